//! Synthetic bi-temporal corpus: rasters, scene generation, tiling,
//! manifests, pixel statistics and viewable exports.

mod raster;
mod scene;
mod taxonomy;
mod visual;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use raster::{
    decode_raster, read_label_raster, read_raster, read_u8_raster, write_raster, AnyRaster, Raster, Sample,
};
pub use scene::{gen_scene, tile, ScenePair, SceneParams};
pub use taxonomy::{
    class_name, class_names, class_table, transition, Category, TransitionClass, BACKGROUND, CLASS_COUNT, TRANSITIONS,
};
pub use visual::{class_colour, heat_map, overlay, write_pgm, write_ppm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub t1_path: String,
    pub t2_path: String,
    pub label_path: String,
    pub split: Split,
}

/// Corpus index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<TransitionClass>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded pair plus its split.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub pair: ScenePair,
    pub split: Split,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.id.as_str(), e.split) {
                return Err(Error::format(format!(
                    "manifest lists id {} twice ({prev} and {})",
                    e.id, e.split
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<LoadedPair> {
        let t1 = read_u8_raster(&self.resolve(&e.t1_path))?;
        let t2 = read_u8_raster(&self.resolve(&e.t2_path))?;
        let label = read_label_raster(&self.resolve(&e.label_path))?;
        if !(t1.same_extent(&label) && t2.same_extent(&label)) || t1.channels != 3 || t2.channels != 3 {
            return Err(Error::format(format!(
                "pair {}: expected two 3-channel images matching the {}x{} label",
                e.id, label.height, label.width
            )));
        }
        if let Some(&bad) = label.data.iter().find(|&&v| v as usize >= CLASS_COUNT) {
            return Err(Error::format(format!(
                "pair {}: label value {bad} is not a class index",
                e.id
            )));
        }
        Ok(LoadedPair {
            pair: ScenePair {
                id: e.id.clone(),
                seed: 0,
                t1,
                t2,
                label,
            },
            split: e.split,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ScenePair>> {
        self.split(split).map(|e| self.load_entry(e).map(|p| p.pair)).collect()
    }
}

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub tile_size: usize,
    pub scene: SceneParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 200,
            test_scenes: 50,
            tile_size: 256,
            scene: SceneParams::default(),
        }
    }
}

/// SplitMix64 finaliser; turns `(global seed, stream)` into a scene seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate every scene of the corpus in memory.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<(ScenePair, Split)>> {
    cfg.scene.validate()?;
    ensure!(
        cfg.tile_size <= cfg.scene.size,
        "tile size {} exceeds scene size {}",
        cfg.tile_size,
        cfg.scene.size
    );
    let jobs: Vec<(usize, Split)> = (0..cfg.train_scenes)
        .map(|i| (i, Split::Train))
        .chain((0..cfg.test_scenes).map(|i| (i, Split::Test)))
        .collect();
    let scenes: Vec<Vec<(ScenePair, Split)>> = jobs
        .par_iter()
        .map(|&(i, split)| {
            let stream = match split {
                Split::Train => i as u64,
                Split::Test => (1 << 40) + i as u64,
            };
            let mut pair = gen_scene(derive_seed(cfg.seed, stream), &cfg.scene)?;
            pair.id = format!("{split}_{i:04}");
            Ok(tile(&pair, cfg.tile_size)?.into_iter().map(|t| (t, split)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(scenes.into_iter().flatten().collect())
}

/// Write the corpus rasters and `manifest.json` under `out`.
pub fn write_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Manifest> {
    let pairs = gen_corpus(cfg)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for split in [Split::Train, Split::Test] {
        let dir = out.join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (pair, split) in &pairs {
        let rel = |kind: &str| format!("{split}/{}_{kind}.rbr", pair.id);
        let entry = ManifestEntry {
            id: pair.id.clone(),
            t1_path: rel("t1"),
            t2_path: rel("t2"),
            label_path: rel("label"),
            split: *split,
        };
        write_raster(&out.join(&entry.t1_path), &pair.t1)?;
        write_raster(&out.join(&entry.t2_path), &pair.t2)?;
        write_raster(&out.join(&entry.label_path), &pair.label)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        entries,
        classes: class_table(),
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Per-pixel histogram of a label raster.
pub fn label_histogram(label: &Raster<u8>) -> [u64; CLASS_COUNT] {
    let mut h = [0u64; CLASS_COUNT];
    for &v in &label.data {
        h[(v as usize).min(CLASS_COUNT - 1)] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub pairs: usize,
    pub total_pixels: u64,
    pub class_pixels: Vec<u64>,
    /// Largest class count over each class count; `None` for absent classes.
    pub imbalance: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub id: String,
    pub split: Split,
    pub class_pixels: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub class_names: Vec<String>,
    pub splits: BTreeMap<Split, SplitStats>,
    pub pairs: Vec<PairStats>,
}

/// Count label pixels per class for every pair and split.
pub fn stats(manifest: &Manifest) -> Result<StatsReport> {
    let pairs: Vec<PairStats> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let label = read_label_raster(&manifest.resolve(&e.label_path))?;
            Ok(PairStats {
                id: e.id.clone(),
                split: e.split,
                class_pixels: label_histogram(&label).to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let mut splits = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let mut counts = vec![0u64; CLASS_COUNT];
        let mut n = 0;
        for p in pairs.iter().filter(|p| p.split == split) {
            n += 1;
            for (c, v) in counts.iter_mut().zip(&p.class_pixels) {
                *c += v;
            }
        }
        if n == 0 {
            continue;
        }
        let max = counts.iter().copied().max().unwrap_or(0) as f64;
        splits.insert(
            split,
            SplitStats {
                pairs: n,
                total_pixels: counts.iter().sum(),
                imbalance: counts.iter().map(|&c| (c > 0).then(|| max / c as f64)).collect(),
                class_pixels: counts,
            },
        );
    }
    Ok(StatsReport {
        class_names: class_names(),
        splits,
        pairs,
    })
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "class");
        for split in self.splits.keys() {
            out += &format!("  {:>12}  {:>7}  {:>9}", format!("{split} px"), "%", "imbalance");
        }
        out.push('\n');
        for (k, name) in self.class_names.iter().enumerate() {
            out += &format!("{name:<width$}");
            for s in self.splits.values() {
                let pct = 100.0 * s.class_pixels[k] as f64 / s.total_pixels.max(1) as f64;
                let imb = s.imbalance[k].map_or("-".to_owned(), |r| format!("{r:.2}"));
                out += &format!("  {:>12}  {pct:>7.2}  {imb:>9}", s.class_pixels[k]);
            }
            out.push('\n');
        }
        out += &format!("{:<width$}", "total");
        for s in self.splits.values() {
            out += &format!("  {:>12}  {:>7}  {:>9}", s.total_pixels, "100.00", "");
        }
        out.push('\n');
        for (split, s) in &self.splits {
            out += &format!("{split}: {} pairs\n", s.pairs);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            seed: 11,
            train_scenes: 3,
            test_scenes: 2,
            tile_size: 64,
            scene: SceneParams {
                size: 64,
                ..SceneParams::default()
            },
        }
    }

    #[test]
    fn corpus_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_corpus(&tiny(), dir.path()).unwrap();
        let m = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.entries, written.entries);
        assert_eq!(m.split(Split::Train).count(), 3);
        let pairs = gen_corpus(&tiny()).unwrap();
        let loaded = m.load_split(Split::Test).unwrap();
        assert_eq!(loaded[1].t2, pairs[4].0.t2);
        assert_eq!(loaded[1].label, pairs[4].0.label);
    }

    #[test]
    fn stats_conserve_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(&tiny(), dir.path()).unwrap();
        let report = stats(&m).unwrap();
        let train = &report.splits[&Split::Train];
        assert_eq!(train.total_pixels, 3 * 64 * 64);
        assert_eq!(train.class_pixels.iter().sum::<u64>(), train.total_pixels);
        assert!(report.to_text().contains("background"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_corpus(&tiny(), dir.path()).unwrap();
        let dup = m.entries[0].clone();
        m.entries.push(dup);
        let path = dir.path().join("dup.json");
        m.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_raster_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(&tiny(), dir.path()).unwrap();
        fs::remove_file(m.resolve(&m.entries[0].label_path)).unwrap();
        let err = stats(&m).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("label"), "{err}");
    }
}
