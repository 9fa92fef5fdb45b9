//! Category probability providers used to fill the prompt template.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{derive_seed, Category, Raster};
use crate::error::{ensure, Error, Result};
use crate::Phase;

/// Number of categories described per image.
pub const TOP_K: usize = 5;

/// Supplies the five most likely categories of an image with their
/// probabilities, most likely first.
pub trait ProbabilityProvider: Send + Sync {
    fn top5(&self, image_id: &str, period: Phase, image: &Raster<u8>) -> Result<Vec<(String, f64)>>;
}

impl<P: ProbabilityProvider + ?Sized> ProbabilityProvider for Box<P> {
    fn top5(&self, image_id: &str, period: Phase, image: &Raster<u8>) -> Result<Vec<(String, f64)>> {
        (**self).top5(image_id, period, image)
    }
}

/// Pseudo-probabilities from colour statistics: the share of sampled pixels
/// whose nearest palette colour is each category, smoothed and perturbed by
/// a fixed seeded offset per category.
#[derive(Clone, Debug)]
pub struct StubProbabilities {
    pub seed: u64,
    /// Pixel sampling stride along each axis.
    pub stride: usize,
}

impl StubProbabilities {
    pub fn new(seed: u64) -> Self {
        Self { seed, stride: 4 }
    }

    pub fn distribution(&self, image: &Raster<u8>) -> Result<[f64; 8]> {
        ensure!(
            image.channels == 3,
            "probability stub needs an RGB image, got {} channels",
            image.channels
        );
        let mut hist = [0.5f64; 8];
        let plane = image.plane();
        let palettes: Vec<[f32; 3]> = Category::ALL.iter().map(|c| c.palette()).collect();
        for y in (0..image.height).step_by(self.stride.max(1)) {
            for x in (0..image.width).step_by(self.stride.max(1)) {
                let i = y * image.width + x;
                let px = [0, 1, 2].map(|c| image.data[c * plane + i] as f32);
                let best = palettes
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (k, (0..3).map(|c| (px[c] - p[c]).powi(2)).sum::<f32>()))
                    .fold((0, f32::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
                    .0;
                hist[best] += 1.0;
            }
        }
        for (k, h) in hist.iter_mut().enumerate() {
            let u = (derive_seed(self.seed, k as u64) >> 11) as f64 / (1u64 << 53) as f64;
            *h *= 0.9 + 0.2 * u;
        }
        let total: f64 = hist.iter().sum();
        Ok(hist.map(|h| h / total))
    }
}

impl ProbabilityProvider for StubProbabilities {
    fn top5(&self, _image_id: &str, _period: Phase, image: &Raster<u8>) -> Result<Vec<(String, f64)>> {
        let dist = self.distribution(image)?;
        let mut order: Vec<usize> = (0..dist.len()).collect();
        // stable sort keeps the lower index first on ties
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
        Ok(order[..TOP_K]
            .iter()
            .map(|&k| (Category::ALL[k].name().to_owned(), dist[k]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyValue {
    pub key: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideRecord {
    pub image_id: String,
    pub period: Phase,
    pub top5: Vec<KeyValue>,
}

/// Probabilities read from a JSON override file; images it does not list
/// fall back to the wrapped provider.
pub struct OverrideProbabilities<P> {
    table: HashMap<(String, Phase), Vec<(String, f64)>>,
    fallback: P,
}

impl<P: ProbabilityProvider> OverrideProbabilities<P> {
    pub fn new(records: Vec<OverrideRecord>, fallback: P) -> Result<Self> {
        let mut table = HashMap::new();
        for r in records {
            ensure!(
                r.top5.len() == TOP_K,
                "override for {} {} lists {} categories, expected {TOP_K}",
                r.image_id,
                r.period,
                r.top5.len()
            );
            for kv in &r.top5 {
                ensure!(
                    (0.0..=1.0).contains(&kv.value),
                    "override for {} {}: probability {} of {:?} outside [0, 1]",
                    r.image_id,
                    r.period,
                    kv.value,
                    kv.key
                );
            }
            let rows = r.top5.into_iter().map(|kv| (kv.key, kv.value)).collect();
            table.insert((r.image_id, r.period), rows);
        }
        Ok(Self { table, fallback })
    }

    pub fn open(path: &Path, fallback: P) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<OverrideRecord> =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Self::new(records, fallback)
    }
}

impl<P: ProbabilityProvider> ProbabilityProvider for OverrideProbabilities<P> {
    fn top5(&self, image_id: &str, period: Phase, image: &Raster<u8>) -> Result<Vec<(String, f64)>> {
        match self.table.get(&(image_id.to_owned(), period)) {
            Some(rows) => Ok(rows.clone()),
            None => self.fallback.top5(image_id, period, image),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rgb: [u8; 3]) -> Raster<u8> {
        let mut r = Raster::filled(3, 8, 8, 0u8);
        for (plane, &v) in r.data.chunks_mut(64).zip(&rgb) {
            plane.fill(v);
        }
        r
    }

    #[test]
    fn stub_ranks_dominant_colour_first() {
        let p = StubProbabilities::new(0);
        let top = p.top5("a", Phase::T1, &flat([35, 70, 130])).unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].0, "water");
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        let dist = p.distribution(&flat([0, 0, 0])).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn override_then_fallback() {
        let rec = OverrideRecord {
            image_id: "x".into(),
            period: Phase::T2,
            top5: (0..5)
                .map(|i| KeyValue {
                    key: format!("k{i}"),
                    value: 0.1,
                })
                .collect(),
        };
        let o = OverrideProbabilities::new(vec![rec.clone()], StubProbabilities::new(0)).unwrap();
        let img = flat([95, 95, 100]);
        assert_eq!(o.top5("x", Phase::T2, &img).unwrap()[0].0, "k0");
        assert_eq!(o.top5("x", Phase::T1, &img).unwrap()[0].0, "road");
        let mut bad = rec;
        bad.top5[0].value = 1.5;
        assert!(OverrideProbabilities::new(vec![bad], StubProbabilities::new(0)).is_err());
    }
}
