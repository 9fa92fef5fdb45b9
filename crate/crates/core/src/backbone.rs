//! Four-stage residual feature pyramid shared by both acquisition dates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::layers::ConvLayer;
use crate::tensor::{Float, Graph, ParamStore, Tensor, Var};

/// Input images must have sides that are multiples of this.
pub const ALIGNMENT: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub input_channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            input_channels: 3,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stem_channels > 0 && self.stage_channels.iter().all(|&c| c > 0),
            "channel counts must be positive"
        );
        ensure!(
            (1..=3).contains(&self.blocks_per_stage),
            "blocks_per_stage must be 1, 2 or 3, got {}",
            self.blocks_per_stage
        );
        ensure!(self.input_channels > 0, "input_channels must be positive");
        Ok(())
    }

    /// Spatial stride of stage `level` (1-based) relative to the input.
    pub fn stride(level: usize) -> usize {
        4 << (level - 1)
    }
}

#[derive(Clone, Debug)]
struct Residual {
    a: ConvLayer,
    b: ConvLayer,
    skip: Option<ConvLayer>,
}

impl Residual {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = ConvLayer::new(store, &format!("{name}.conv1"), in_c, out_c, 3, stride, rng)?;
        let b = ConvLayer::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, rng)?;
        let skip = if in_c != out_c || stride != 1 {
            Some(ConvLayer::new(
                store,
                &format!("{name}.proj"),
                in_c,
                out_c,
                1,
                stride,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { a, b, skip })
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        let h = self.a.forward(g, bound, x)?;
        let h = g.relu(h);
        let h = self.b.forward(g, bound, h)?;
        let s = match &self.skip {
            Some(p) => p.forward(g, bound, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

/// Shared-weight feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: PyramidConfig,
    stem: [ConvLayer; 2],
    stages: Vec<Vec<Residual>>,
}

impl Backbone {
    pub fn new<T: Float>(store: &mut ParamStore<T>, config: &PyramidConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let sc = config.stem_channels;
        let stem = [
            ConvLayer::new(store, "backbone.stem.conv1", config.input_channels, sc, 3, 2, rng)?,
            ConvLayer::new(store, "backbone.stem.conv2", sc, sc, 3, 2, rng)?,
        ];
        let mut stages = Vec::new();
        let mut in_c = sc;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_stage {
                // the stem already reaches stride 4, so stage 1 keeps it
                let stride = if j == 0 && i > 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.block{}", i + 1, j + 1);
                blocks.push(Residual::new(store, &name, in_c, c, stride, rng)?);
                in_c = c;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// `[F1, F2, F3, F4]` for a `B×3×H×W` batch; F1 and F2 are the
    /// low-level maps.
    pub fn extract<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], image: Var) -> Result<[Var; 4]> {
        let s = g.shape(image).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.input_channels,
            "backbone expects B×{}×H×W input, got {s:?}",
            self.config.input_channels
        );
        ensure!(
            s[2].is_multiple_of(ALIGNMENT) && s[3].is_multiple_of(ALIGNMENT),
            "input extents {}x{} must be multiples of {ALIGNMENT}",
            s[2],
            s[3]
        );
        let x = self.stem[0].forward(g, bound, image)?;
        let x = g.relu(x);
        let mut x = self.stem[1].forward(g, bound, x)?;
        x = g.relu(x);
        let mut out = Vec::with_capacity(4);
        for blocks in &self.stages {
            for block in blocks {
                x = block.forward(g, bound, x)?;
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Scale `u8` samples to roughly unit range around zero.
pub fn normalise_image<T: Float>(data: &[u8]) -> Vec<T> {
    data.iter().map(|&v| T::from_f64((v as f64 - 127.5) / 64.0)).collect()
}

/// Stack `u8` images of identical extents into a `B×C×H×W` tensor.
pub fn image_batch<T: Float>(images: &[&crate::datakit::Raster<u8>]) -> Result<Tensor<T>> {
    ensure!(!images.is_empty(), "empty image batch");
    let first = images[0];
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        ensure!(
            im.channels == first.channels && im.same_extent(first),
            "batch images differ in shape"
        );
        data.extend(normalise_image::<T>(&im.data));
    }
    Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
}
