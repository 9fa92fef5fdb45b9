//! The end-to-end change detector: siamese backbone, optional frequency
//! coupling and text modulation, absolute differencing and a top-down
//! decoder.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{image_batch, Backbone, PyramidConfig};
use crate::datakit::{Raster, CLASS_COUNT};
use crate::dfc::{Dfc, DfcTrace, DfcVariant, PhaseLevels, SparsityScheduler};
use crate::error::{ensure, Result};
use crate::layers::ConvLayer;
use crate::tensor::{Float, Graph, ParamStore, Tensor, Var};
use crate::tff::{TextEncoder, Tff, TOP_K};
use crate::Phase;

pub use train::{
    augment, evaluate, make_batch, predict_pairs, train, Augmentation, Batch, RunConfig, TrainLog, TrainState,
};

/// Name of the checkpointed buffer holding the scheduler iteration.
pub const ITERATION_BUFFER: &str = "scheduler.iteration";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enable_dfc: bool,
    pub enable_tff: bool,
    pub dfc_variant: DfcVariant,
    pub filter_count: usize,
    pub scheduler: SparsityScheduler,
    pub backbone: PyramidConfig,
    pub class_count: usize,
    pub decoder_width: usize,
    /// Width `C` of the text embeddings.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enable_dfc: true,
            enable_tff: true,
            dfc_variant: DfcVariant::AsffBtff,
            filter_count: 5,
            scheduler: SparsityScheduler::default(),
            backbone: PyramidConfig::default(),
            class_count: CLASS_COUNT,
            decoder_width: 64,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Both modules off.
    pub fn baseline() -> Self {
        Self {
            enable_dfc: false,
            enable_tff: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.class_count >= 2,
            "class_count must be at least 2, got {}",
            self.class_count
        );
        ensure!(self.filter_count >= 1, "filter_count must be at least 1");
        ensure!(self.decoder_width >= 1, "decoder_width must be positive");
        ensure!(self.embed_dim >= 1, "embed_dim must be positive");
        self.scheduler.validate()?;
        self.backbone.validate()
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    proj: [ConvLayer; 4],
    refine: [ConvLayer; 3],
    head: ConvLayer,
}

impl Decoder {
    fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = cfg.decoder_width;
        let ch = cfg.backbone.stage_channels;
        let proj = [0, 1, 2, 3].map(|i| ConvLayer::new(store, &format!("decoder.proj{}", i + 1), ch[i], w, 1, 1, rng));
        let refine = [0, 1, 2].map(|i| ConvLayer::new(store, &format!("decoder.refine{}", i + 1), w, w, 3, 1, rng));
        let head = ConvLayer::new(store, "decoder.head", w, cfg.class_count, 1, 1, rng)?;
        let [p1, p2, p3, p4] = proj;
        let [r1, r2, r3] = refine;
        Ok(Self {
            proj: [p1?, p2?, p3?, p4?],
            refine: [r1?, r2?, r3?],
            head,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], diffs: &[Var; 4]) -> Result<Var> {
        let mut x = self.proj[3].forward(g, bound, diffs[3])?;
        for i in (0..3).rev() {
            x = g.upsample(x, 2)?;
            x = self.refine[i].forward_edge(g, bound, x)?;
            x = g.relu(x);
            let skip = self.proj[i].forward(g, bound, diffs[i])?;
            x = g.add(x, skip)?;
        }
        // a 1×1 map commutes with bilinear resampling, so it runs at the
        // cheaper resolution
        let logits = self.head.forward(g, bound, x)?;
        g.upsample(logits, 4)
    }
}

/// Per-phase images and, when text is enabled, node features.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `B×3×H×W` per phase.
    pub images: [Tensor<T>; 2],
    /// `B×N×2C` per phase.
    pub text: Option<[Tensor<T>; 2]>,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub features: PhaseLevels,
    pub diffs: [Var; 4],
    pub trace: DfcTrace,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Backbone,
    dfc: Option<Dfc>,
    tff: Option<Tff>,
    decoder: Decoder,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng)?;
        let channels = config.backbone.stage_channels;
        let dfc = if config.enable_dfc {
            Some(Dfc::new(
                &mut store,
                config.dfc_variant,
                channels,
                config.scheduler,
                &mut rng,
            )?)
        } else {
            None
        };
        let tff = if config.enable_tff {
            Some(Tff::new(
                &mut store,
                config.filter_count,
                TOP_K,
                2 * config.embed_dim,
                &channels,
                &mut rng,
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, &config, &mut rng)?;
        store.add_buffer(ITERATION_BUFFER, Tensor::scalar(T::zero()))?;
        Ok(Self {
            config,
            store,
            backbone,
            dfc,
            tff,
            decoder,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            dfc: self.dfc.clone(),
            tff: self.tff.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn uses_text(&self) -> bool {
        self.tff.is_some()
    }

    /// Scheduler iteration stored with the weights.
    pub fn iteration(&self) -> u64 {
        let id = self
            .store
            .find(ITERATION_BUFFER)
            .expect("buffer registered at construction");
        self.store.value(id).data()[0].to_f64() as u64
    }

    pub fn set_iteration(&mut self, p: u64) {
        let id = self
            .store
            .find(ITERATION_BUFFER)
            .expect("buffer registered at construction");
        self.store.get_mut(id).value.data_mut()[0] = T::from_f64(p as f64);
    }

    /// Build the forward pass on `g`; `bound` comes from `self.store.bind(g)`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], input: &ModelInput<T>, p: u64) -> Result<ModelOutput> {
        let [a, b] = &input.images;
        ensure!(
            a.shape() == b.shape(),
            "bi-temporal inputs are misaligned: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let x1 = g.constant(a.clone());
        let x2 = g.constant(b.clone());
        let mut features: PhaseLevels = [
            self.backbone.extract(g, bound, x1)?,
            self.backbone.extract(g, bound, x2)?,
        ];
        let mut trace = DfcTrace::default();
        if let Some(dfc) = &self.dfc {
            features = dfc.forward(g, bound, &features, p, &mut trace)?;
        }
        if let Some(tff) = &self.tff {
            let Some(text) = &input.text else {
                return Err(crate::Error::contract(
                    "text modulation is enabled but no node features were given",
                ));
            };
            for phase in Phase::BOTH {
                let nodes = &text[phase.index()];
                ensure!(
                    nodes.rank() == 3 && nodes.shape()[0] == a.shape()[0],
                    "node features {:?} do not match a batch of {}",
                    nodes.shape(),
                    a.shape()[0]
                );
                let nv = g.constant(nodes.clone());
                let pooled = tff.pooled(g, bound, nv)?;
                for level in 1..=4 {
                    let f = features[phase.index()][level - 1];
                    features[phase.index()][level - 1] = tff.modulate(g, bound, level, f, pooled)?;
                }
            }
        }
        let d: Vec<Var> = (0..4)
            .map(|i| g.abs_diff(features[0][i], features[1][i]))
            .collect::<Result<_>>()?;
        let diffs = [d[0], d[1], d[2], d[3]];
        let logits = self.decoder.forward(g, bound, &diffs)?;
        Ok(ModelOutput {
            logits,
            features,
            diffs,
            trace,
        })
    }

    /// Forward a batch without gradients and return the logits tensor.
    pub fn logits(&self, input: &ModelInput<T>, p: u64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_constant(&mut g);
        let out = self.forward(&mut g, &bound, input, p)?;
        Ok(g.value(out.logits).clone())
    }

    /// Assemble the input for a batch of pairs, encoding text when needed.
    pub fn input_for(
        &self,
        pairs: &[(&str, &Raster<u8>, &Raster<u8>)],
        text: Option<&TextEncoder>,
    ) -> Result<ModelInput<T>> {
        let t1: Vec<&Raster<u8>> = pairs.iter().map(|p| p.1).collect();
        let t2: Vec<&Raster<u8>> = pairs.iter().map(|p| p.2).collect();
        let images = [image_batch(&t1)?, image_batch(&t2)?];
        let text = match (&self.tff, text) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(crate::Error::contract(
                    "text modulation is enabled but no text encoder was given",
                ))
            }
            (Some(_), Some(enc)) => {
                ensure!(
                    enc.width() == 2 * self.config.embed_dim,
                    "text encoder width {} does not match model embed_dim {}",
                    enc.width() / 2,
                    self.config.embed_dim
                );
                let mut out = Vec::with_capacity(2);
                for (phase, imgs) in [(Phase::T1, &t1), (Phase::T2, &t2)] {
                    let mut data = Vec::new();
                    for (p, img) in pairs.iter().zip(imgs.iter()) {
                        let d = enc.descriptors(p.0, phase, img)?;
                        data.extend(enc.encode(&d)?.cast::<T>().into_data());
                    }
                    out.push(Tensor::new(&[pairs.len(), TOP_K, enc.width()], data)?);
                }
                let t2 = out.pop().expect("two phases");
                let t1 = out.pop().expect("two phases");
                Some([t1, t2])
            }
        };
        Ok(ModelInput { images, text })
    }
}

/// Per-pixel argmax over `B×K×H×W` logits; ties go to the lower class.
pub fn argmax_classes<T: Float>(logits: &Tensor<T>) -> Result<Vec<Raster<u8>>> {
    let (b, k, h, w) = logits.dims4()?;
    ensure!(k <= 256, "{k} classes do not fit a u8 raster");
    let plane = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * k * plane;
        let mut best = vec![0u8; plane];
        for (i, slot) in best.iter_mut().enumerate() {
            let mut top = data[base + i];
            for c in 1..k {
                let v = data[base + c * plane + i];
                if v > top {
                    top = v;
                    *slot = c as u8;
                }
            }
        }
        out.push(Raster::new(1, h, w, best)?);
    }
    Ok(out)
}

/// Class-index labels of a batch flattened `B×H×W`.
pub fn label_indices(labels: &[&Raster<u8>], class_count: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (bi, l) in labels.iter().enumerate() {
        ensure!(l.channels == 1, "label raster must have one channel");
        for (i, &v) in l.data.iter().enumerate() {
            ensure!(
                (v as usize) < class_count,
                "label {v} at item {bi}, row {}, col {} is not below {class_count}",
                i / l.width,
                i % l.width
            );
            out.push(v as usize);
        }
    }
    Ok(out)
}
