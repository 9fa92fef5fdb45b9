//! Command-line front end.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::datakit::{
    self, read_u8_raster, write_corpus, write_pgm, write_ppm, write_raster, CorpusConfig, Manifest, Raster, ScenePair,
    Split,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::pipeline::{argmax_classes, evaluate, predict_pairs, train, Model, RunConfig, TrainState};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph};
use crate::tff::{
    descriptor_vocabulary, FileEmbedder, OverrideProbabilities, StubEmbedder, StubProbabilities, TextEncoder,
};

#[derive(Debug, Parser)]
#[command(name = "mfdcd", version, about = "Frequency-driven bi-temporal change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-class pixel statistics of a corpus.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Omit timestamps from the log.
        #[arg(long)]
        deterministic: bool,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Score a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config the checkpoint was trained with (default: `config.json` beside it).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Predict one pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Write per-level difference maps of one pair as PGM heat maps.
    ExportVis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Replacements for the stub text providers.
#[derive(Debug, Args, Clone, Default)]
pub struct TextArgs {
    /// Embedding rows in TEMB format.
    #[arg(long)]
    pub temb: Option<PathBuf>,
    /// Descriptor list (one per line) matching the TEMB rows.
    #[arg(long, requires = "temb")]
    pub temb_index: Option<PathBuf>,
    /// JSON category probability overrides.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn text_encoder(cfg: &RunConfig, args: &TextArgs) -> Result<Option<TextEncoder>> {
    if !cfg.model.enable_tff {
        return Ok(None);
    }
    let seed = cfg.model.seed;
    let dim = cfg.model.embed_dim;
    let embed: Box<dyn crate::tff::EmbeddingProvider> = match &args.temb {
        None => Box::new(StubEmbedder::new(dim, seed)?),
        Some(path) => {
            let mut fe = FileEmbedder::open(path, Some(dim))?;
            if let Some(index) = &args.temb_index {
                let text = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
                fe = fe.with_index(text.lines().map(str::to_owned).collect())?;
            }
            Box::new(fe)
        }
    };
    let probs: Box<dyn crate::tff::ProbabilityProvider> = match &args.probs {
        None => Box::new(StubProbabilities::new(seed)),
        Some(path) => Box::new(OverrideProbabilities::open(path, StubProbabilities::new(seed))?),
    };
    Ok(Some(TextEncoder { probs, embed }))
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, Model<f32>)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("config.json"),
    };
    let cfg: RunConfig = read_json(&cfg_path)?;
    cfg.validate()?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    load_checkpoint(checkpoint, &mut model.store)?;
    Ok((cfg, model))
}

fn read_pair(t1: &Path, t2: &Path) -> Result<ScenePair> {
    let a = read_u8_raster(t1)?;
    let b = read_u8_raster(t2)?;
    let id = t1
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches("_t1").to_owned())
        .unwrap_or_default();
    Ok(ScenePair {
        id,
        seed: 0,
        label: Raster::filled(1, a.height, a.width, 0u8),
        t1: a,
        t2: b,
    })
}

struct Logger {
    file: fs::File,
    path: PathBuf,
    start: Option<Instant>,
}

impl Logger {
    fn open(path: PathBuf, deterministic: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file,
            path,
            start: (!deterministic).then(Instant::now),
        })
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        let line = match self.start {
            None => format!("{msg}\n"),
            Some(t0) => {
                let unix = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                format!("[{unix} +{:.1}s] {msg}\n", t0.elapsed().as_secs_f64())
            }
        };
        print!("{line}");
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::contract(format!(
            "unknown split {other:?}, expected train or test"
        ))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut cfg: CorpusConfig = match &config {
                Some(p) => read_json(p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            make_dir(&out)?;
            let m = write_corpus(&cfg, &out)?;
            write_text(
                &out.join("descriptors.txt"),
                &(descriptor_vocabulary().join("\n") + "\n"),
            )?;
            println!("wrote {} pairs to {}", m.entries.len(), out.display());
        }
        Command::Stats { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let report = datakit::stats(&m)?;
            make_dir(&out)?;
            write_text(
                &out.join("stats.json"),
                &(serde_json::to_string_pretty(&report).expect("stats serialize") + "\n"),
            )?;
            let text = report.to_text();
            write_text(&out.join("stats.txt"), &text)?;
            print!("{text}");
        }
        Command::Train {
            config,
            manifest,
            out,
            seed,
            iterations,
            deterministic,
            text,
        } => {
            let mut cfg: RunConfig = match &config {
                Some(p) => read_json(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.model.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate()?;
            let m = Manifest::load(&manifest)?;
            let pairs = m.load_split(Split::Train)?;
            make_dir(&out)?;
            write_text(
                &out.join("config.json"),
                &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"),
            )?;
            let encoder = text_encoder(&cfg, &text)?;
            let model = Model::<f32>::new(cfg.model.clone())?;
            let mut state = TrainState::new(model, cfg.optimizer(), cfg.seed);
            let mut log = Logger::open(out.join("train.log"), deterministic)?;
            log.line(&format!(
                "train pairs {} iterations {} batch {} lr {} weight_decay {}",
                pairs.len(),
                cfg.iterations,
                cfg.batch_size,
                cfg.lr,
                cfg.weight_decay
            ))?;
            let every = cfg.checkpoint_every;
            train(&mut state, &pairs, &cfg, encoder.as_ref(), |st, rec| {
                if let Some(r) = rec {
                    log.line(&r.to_string())?;
                }
                if every > 0 && st.p % every == 0 && st.p < cfg.iterations {
                    save_checkpoint(&out.join(format!("checkpoint_{:06}.mfdc", st.p)), &st.model.store)?;
                }
                Ok(())
            })?;
            save_checkpoint(&out.join("model.mfdc"), &state.model.store)?;
            log.line(&format!("done at iteration {}", state.p))?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            config,
            split,
            text,
        } => {
            let (cfg, model) = load_model(&checkpoint, config.as_deref())?;
            let encoder = text_encoder(&cfg, &text)?;
            let m = Manifest::load(&manifest)?;
            let pairs = m.load_split(parse_split(&split)?)?;
            if pairs.is_empty() {
                return Err(Error::Evaluation(format!("manifest has no {split} pairs")));
            }
            let refs: Vec<&ScenePair> = pairs.iter().collect();
            let cm = evaluate(&model, &refs, encoder.as_ref(), cfg.batch_size)?;
            let report = MetricReport::new(&cm);
            make_dir(&out)?;
            write_text(&out.join("metrics.json"), &report.to_json())?;
            let text = report.to_text();
            write_text(&out.join("metrics.txt"), &text)?;
            print!("{text}");
        }
        Command::Infer {
            checkpoint,
            t1,
            t2,
            out,
            config,
            text,
        } => {
            let (cfg, model) = load_model(&checkpoint, config.as_deref())?;
            let encoder = text_encoder(&cfg, &text)?;
            let pair = read_pair(&t1, &t2)?;
            let pred = predict_pairs(&model, &[&pair], encoder.as_ref(), 1)?.remove(0);
            make_dir(&out)?;
            write_raster(&out.join("prediction.rbr"), &pred)?;
            write_ppm(&out.join("overlay.ppm"), &datakit::overlay(&pair.t2, &pred)?)?;
            println!("wrote prediction for {} to {}", pair.id, out.display());
        }
        Command::ExportVis {
            checkpoint,
            t1,
            t2,
            out,
            config,
            text,
        } => {
            let (cfg, model) = load_model(&checkpoint, config.as_deref())?;
            let encoder = text_encoder(&cfg, &text)?;
            let pair = read_pair(&t1, &t2)?;
            let input = model.input_for(&[(pair.id.as_str(), &pair.t1, &pair.t2)], encoder.as_ref())?;
            let mut g = Graph::new();
            let bound = model.store.bind_constant(&mut g);
            let fwd = model.forward(&mut g, &bound, &input, model.iteration())?;
            make_dir(&out)?;
            for (i, &d) in fwd.diffs.iter().enumerate() {
                let v = g.value(d);
                let (_, c, h, w) = v.dims4()?;
                let mut mean = vec![0.0f32; h * w];
                for plane in v.data().chunks_exact(h * w) {
                    for (m, x) in mean.iter_mut().zip(plane) {
                        *m += x / c as f32;
                    }
                }
                write_pgm(
                    &out.join(format!("diff_level{}.pgm", i + 1)),
                    &datakit::heat_map(&mean, h, w)?,
                )?;
            }
            let pred = argmax_classes(g.value(fwd.logits))?.remove(0);
            write_ppm(&out.join("overlay.ppm"), &datakit::overlay(&pair.t2, &pred)?)?;
            println!("wrote difference maps to {}", out.display());
        }
        Command::Selftest => {
            let mut failed = 0;
            for (name, outcome) in crate::selftest::run_all() {
                match outcome {
                    Ok(()) => println!("PASS {name}"),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {name}: {e}");
                    }
                }
            }
            if failed > 0 {
                return Err(Error::contract(format!("{failed} self-test suite(s) failed")));
            }
        }
    }
    Ok(())
}
