//! Training loop, augmentation, batched prediction and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_classes, label_indices, Model, ModelConfig, ModelInput};
use crate::datakit::{Raster, ScenePair};
use crate::error::{ensure, Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::tensor::{adamw_step, collect_grads, AdamW, Graph};
use crate::tff::TextEncoder;

/// Photometric and geometric jitter applied to training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub enabled: bool,
    pub horizontal_flip: f64,
    pub vertical_flip: f64,
    /// Additive offset drawn from `[-brightness, brightness]` per image.
    pub brightness: f64,
    /// Gain range around mid-grey, drawn per image.
    pub contrast: [f64; 2],
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            brightness: 10.0,
            contrast: [0.9, 1.1],
        }
    }
}

impl Augmentation {
    fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.horizontal_flip) && (0.0..=1.0).contains(&self.vertical_flip),
            "flip probabilities must lie in [0, 1]"
        );
        ensure!(self.brightness >= 0.0, "brightness range must be non-negative");
        ensure!(
            0.0 < self.contrast[0] && self.contrast[0] <= self.contrast[1],
            "contrast range {:?} is invalid",
            self.contrast
        );
        Ok(())
    }
}

fn flip(r: &Raster<u8>, horizontal: bool, vertical: bool) -> Raster<u8> {
    let mut out = r.clone();
    for c in 0..r.channels {
        for y in 0..r.height {
            let sy = if vertical { r.height - 1 - y } else { y };
            for x in 0..r.width {
                let sx = if horizontal { r.width - 1 - x } else { x };
                out.set(c, y, x, r.get(c, sy, sx));
            }
        }
    }
    out
}

fn photometric(r: &mut Raster<u8>, gain: f64, offset: f64) {
    for v in &mut r.data {
        *v = ((*v as f64 - 127.5) * gain + 127.5 + offset).round().clamp(0.0, 255.0) as u8;
    }
}

/// Flip the whole pair together, then jitter each date's photometry
/// independently. Labels only see the flips.
pub fn augment(pair: &ScenePair, aug: &Augmentation, rng: &mut impl Rng) -> ScenePair {
    if !aug.enabled {
        return pair.clone();
    }
    let h = rng.random_bool(aug.horizontal_flip);
    let v = rng.random_bool(aug.vertical_flip);
    let mut out = ScenePair {
        id: pair.id.clone(),
        seed: pair.seed,
        t1: flip(&pair.t1, h, v),
        t2: flip(&pair.t2, h, v),
        label: flip(&pair.label, h, v),
    };
    for img in [&mut out.t1, &mut out.t2] {
        let gain = if aug.contrast[0] < aug.contrast[1] {
            rng.random_range(aug.contrast[0]..=aug.contrast[1])
        } else {
            aug.contrast[0]
        };
        let offset = if aug.brightness > 0.0 {
            rng.random_range(-aug.brightness..=aug.brightness)
        } else {
            0.0
        };
        photometric(img, gain, offset);
    }
    out
}

/// Training run settings; the JSON form rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub augmentation: Augmentation,
    /// Seed of data order and augmentation.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            weight_decay: 0.01,
            iterations: 3000,
            batch_size: 4,
            log_every: 50,
            checkpoint_every: 1000,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augmentation.validate()?;
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "lr must be non-negative");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.log_every >= 1, "log_every must be positive");
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Images, node features and flattened labels of one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput<f32>,
    pub labels: Vec<usize>,
}

pub fn make_batch(model: &Model<f32>, pairs: &[&ScenePair], text: Option<&TextEncoder>) -> Result<Batch> {
    ensure!(!pairs.is_empty(), "empty batch");
    let views: Vec<(&str, &Raster<u8>, &Raster<u8>)> = pairs.iter().map(|p| (p.id.as_str(), &p.t1, &p.t2)).collect();
    let input = model.input_for(&views, text)?;
    let labels: Vec<&Raster<u8>> = pairs.iter().map(|p| &p.label).collect();
    Ok(Batch {
        input,
        labels: label_indices(&labels, model.config.class_count)?,
    })
}

/// One progress line of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub iteration: u64,
    pub loss: f32,
    pub lambda: f64,
    pub retained: Option<f64>,
}

impl std::fmt::Display for TrainLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter {} loss {:.6} lambda {:.6}",
            self.iteration, self.loss, self.lambda
        )?;
        match self.retained {
            Some(r) => write!(f, " retained {r:.4}"),
            None => write!(f, " retained -"),
        }
    }
}

/// Everything that evolves during training. `p` is the single iteration
/// counter: the scheduler sees it before the step, then it advances.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub p: u64,
    pub rng: ChaCha8Rng,
    pub losses: Vec<f32>,
}

impl TrainState {
    pub fn new(model: Model<f32>, opt: AdamW, seed: u64) -> Self {
        let p = model.iteration();
        Self {
            model,
            opt,
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            losses: Vec::new(),
        }
    }

    /// Forward, loss, gradients, AdamW, then `p += 1`. Returns the loss and
    /// the retained share of thresholded coefficients.
    pub fn step(&mut self, batch: &Batch) -> Result<(f32, Option<f64>)> {
        let mut g = Graph::new();
        let bound = self.model.store.bind(&mut g);
        let out = self.model.forward(&mut g, &bound, &batch.input, self.p)?;
        let loss = g.cross_entropy(out.logits, &batch.labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value} at iteration {}", self.p)));
        }
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &bound);
        adamw_step(&mut self.model.store, &grads, &self.opt).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("{m} at iteration {}", self.p)),
            other => other,
        })?;
        self.p += 1;
        self.model.set_iteration(self.p);
        self.losses.push(value);
        Ok((value, out.trace.retained_fraction()))
    }
}

/// Run `cfg.iterations - state.p` steps over shuffled, augmented pairs.
/// `on_step` sees the state after every step, with a log record on logging
/// iterations and the last one.
pub fn train(
    state: &mut TrainState,
    pairs: &[ScenePair],
    cfg: &RunConfig,
    text: Option<&TextEncoder>,
    mut on_step: impl FnMut(&TrainState, Option<&TrainLog>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    ensure!(!pairs.is_empty(), "no training pairs");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while state.p < cfg.iterations {
        let mut chosen = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut state.rng);
                cursor = 0;
            }
            chosen.push(augment(&pairs[order[cursor]], &cfg.augmentation, &mut state.rng));
            cursor += 1;
        }
        let refs: Vec<&ScenePair> = chosen.iter().collect();
        let batch = make_batch(&state.model, &refs, text)?;
        let p = state.p;
        let (loss, retained) = state.step(&batch)?;
        let log = (p.is_multiple_of(cfg.log_every) || state.p == cfg.iterations).then(|| TrainLog {
            iteration: p,
            loss,
            lambda: cfg.model.scheduler.strength(p),
            retained,
        });
        on_step(state, log.as_ref())?;
    }
    Ok(())
}

/// Class-index predictions for each pair, using the stored iteration.
pub fn predict_pairs(
    model: &Model<f32>,
    pairs: &[&ScenePair],
    text: Option<&TextEncoder>,
    batch_size: usize,
) -> Result<Vec<Raster<u8>>> {
    let p = model.iteration();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let views: Vec<(&str, &Raster<u8>, &Raster<u8>)> =
            chunk.iter().map(|s| (s.id.as_str(), &s.t1, &s.t2)).collect();
        let input = model.input_for(&views, text)?;
        out.extend(argmax_classes(&model.logits(&input, p)?)?);
    }
    Ok(out)
}

/// Confusion counts of the model's predictions over `pairs`.
pub fn evaluate(
    model: &Model<f32>,
    pairs: &[&ScenePair],
    text: Option<&TextEncoder>,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let preds = predict_pairs(model, pairs, text, batch_size)?;
    let mut cm = ConfusionMatrix::with_default_names(model.config.class_count);
    for (pred, pair) in preds.iter().zip(pairs) {
        cm.accumulate(pred, &pair.label)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{gen_scene, SceneParams};

    #[test]
    fn flips_move_labels_with_images() {
        let pair = gen_scene(
            1,
            &SceneParams {
                size: 64,
                ..SceneParams::default()
            },
        )
        .unwrap();
        let aug = Augmentation {
            horizontal_flip: 1.0,
            vertical_flip: 0.0,
            brightness: 0.0,
            contrast: [1.0, 1.0],
            ..Augmentation::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&pair, &aug, &mut rng);
        assert_eq!(a.label.get(0, 5, 0), pair.label.get(0, 5, 63));
        assert_eq!(a.t2.get(1, 9, 10), pair.t2.get(1, 9, 53));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let pair = gen_scene(
            2,
            &SceneParams {
                size: 64,
                ..SceneParams::default()
            },
        )
        .unwrap();
        let aug = Augmentation {
            enabled: false,
            ..Augmentation::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&pair, &aug, &mut rng), pair);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>(r#"{"lr": 0.1, "enable_dfcc": true}"#);
        assert!(err.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"model": {"enable_tff": false}}"#).unwrap();
        assert!(!ok.model.enable_tff && ok.model.enable_dfc);
    }
}
