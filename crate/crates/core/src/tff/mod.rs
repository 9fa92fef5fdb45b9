//! Textual frequency filtering: prompt rendering, embeddings, the spectral
//! node features, a fully connected graph filter bank, and per-level
//! affine modulation of visual features.

mod embed;
mod probs;

use rand::Rng;

use crate::datakit::{Category, Raster};
use crate::error::{ensure, Result};
use crate::layers::Linear;
use crate::spectral::dft;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::Phase;

pub use embed::{
    decode_temb, read_temb, write_temb, EmbeddingMatrix, EmbeddingProvider, EmbeddingSource, FileEmbedder,
    StubEmbedder, TembFile,
};
pub use probs::{KeyValue, OverrideProbabilities, OverrideRecord, ProbabilityProvider, StubProbabilities, TOP_K};

/// Two-decimal rendering, rounding halves up.
fn two_decimals(value: f64) -> String {
    // the epsilon absorbs binary representation error at exact halves
    let cents = (value * 100.0 + 0.5 + 1e-9).floor() as u64;
    format!("{}.{:02}", cents / 100, cents % 100)
}

/// Instantiate the prompt template for one category.
pub fn render_descriptor(period: Phase, key: &str, value: f64) -> Result<String> {
    ensure!(
        (0.0..=1.0).contains(&value),
        "descriptor probability {value} for {key:?} is outside [0, 1]"
    );
    Ok(format!(
        "Remote sensing image at time {period} has a {} probability of being the {key}",
        two_decimals(value)
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextDescriptor {
    pub period: Phase,
    pub key: String,
    pub value: f64,
    pub rendered: String,
}

/// The five descriptors of one image at one acquisition time.
pub fn describe(
    probs: &dyn ProbabilityProvider,
    image_id: &str,
    period: Phase,
    image: &Raster<u8>,
) -> Result<Vec<TextDescriptor>> {
    let top = probs.top5(image_id, period, image)?;
    ensure!(
        top.len() == TOP_K,
        "probability provider returned {} categories for {image_id}, expected {TOP_K}",
        top.len()
    );
    top.into_iter()
        .map(|(key, value)| {
            Ok(TextDescriptor {
                period,
                rendered: render_descriptor(period, &key, value)?,
                key,
                value,
            })
        })
        .collect()
}

/// Every descriptor the stub pipeline can emit: both periods, each
/// category, probabilities 0.00 to 1.00. Order is period, category, value.
pub fn descriptor_vocabulary() -> Vec<String> {
    let mut out = Vec::with_capacity(2 * 8 * 101);
    for period in Phase::BOTH {
        for cat in Category::ALL {
            for cents in 0..=100 {
                out.push(render_descriptor(period, cat.name(), cents as f64 / 100.0).expect("value in range"));
            }
        }
    }
    out
}

/// `[Re | Im]` of the per-row DFT of an `N×C` embedding matrix, giving `N×2C`.
pub fn node_features(emb: &EmbeddingMatrix) -> Result<Tensor<f64>> {
    let (n, c) = (emb.count(), emb.dim());
    // transform along the embedding channels of each descriptor
    let mut t = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            t[j * n + i] = emb.rows.data()[i * c + j];
        }
    }
    let spec = dft(&Tensor::new(&[c, n], t)?)?;
    let mut out = vec![0.0; n * 2 * c];
    for i in 0..n {
        for j in 0..c {
            out[i * 2 * c + j] = spec.re.data()[j * n + i];
            out[i * 2 * c + c + j] = spec.im.data()[j * n + i];
        }
    }
    Tensor::new(&[n, 2 * c], out)
}

/// Fully connected graph over `n` descriptor nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    /// `D^-1/2 (A + I) D^-1/2`.
    pub adjacency_norm: Tensor<f64>,
}

pub fn build_graph(n: usize) -> Result<GraphTopology> {
    ensure!(n >= 1, "a text graph needs at least one node");
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in &edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Ok(GraphTopology {
        n,
        edges,
        adjacency_norm: Tensor::new(&[n, n], a)?,
    })
}

/// Reference evaluation of the filter bank on plain matrices:
/// `E(k) = relu(Â·E(k-1)·W_k)`, returning `Σ_k E(k)`.
pub fn graph_filter(weights: &[Tensor<f64>], topo: &GraphTopology, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    ensure!(!weights.is_empty(), "filter bank needs at least one layer");
    ensure!(
        x.rank() == 2 && x.shape()[0] == topo.n,
        "node features {:?} do not match a {}-node graph",
        x.shape(),
        topo.n
    );
    let f = x.shape()[1];
    for (k, w) in weights.iter().enumerate() {
        ensure!(
            w.shape() == [f, f],
            "filter {} has shape {:?}, node features are {f} wide",
            k + 1,
            w.shape()
        );
    }
    let mut g = Graph::<f64>::new();
    let mut e = g.constant(x.clone().reshape(&[1, topo.n, f])?);
    let mut acc: Option<Var> = None;
    for w in weights {
        let wv = g.constant(w.clone());
        e = filter_layer(&mut g, e, wv, &topo.adjacency_norm)?;
        acc = Some(match acc {
            None => e,
            Some(a) => g.add(a, e)?,
        });
    }
    g.value(acc.expect("non-empty bank")).clone().reshape(&[topo.n, f])
}

/// One layer on a `B×N×F` batch.
fn filter_layer<T: Float>(g: &mut Graph<T>, e: Var, w: Var, adj: &Tensor<f64>) -> Result<Var> {
    let s = g.shape(e).to_vec();
    let (b, n, f) = (s[0], s[1], s[2]);
    let mixed = g.node_mix(e, &adj.cast())?;
    let flat = g.reshape(mixed, &[b * n, f])?;
    let y = g.matmul(flat, w)?;
    let y = g.relu(y);
    g.reshape(y, &[b, n, f])
}

/// Learned text branch: the filter bank plus per-level scale and shift
/// projections.
#[derive(Clone, Debug)]
pub struct Tff {
    pub filters: Vec<ParamId>,
    pub scale: Vec<Linear>,
    pub shift: Vec<Linear>,
    pub nodes: usize,
    pub width: usize,
    topology: GraphTopology,
}

impl Tff {
    /// `width` is the node feature width `2C`; `channels` the pyramid widths.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        k: usize,
        nodes: usize,
        width: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(k >= 1, "filter count must be at least 1, got {k}");
        let bound = (1.0 / width as f64).sqrt();
        let filters = (1..=k)
            .map(|i| {
                store.add(
                    format!("tff.filter{i}.weight"),
                    Tensor::uniform(&[width, width], bound, rng),
                )
            })
            .collect::<Result<_>>()?;
        let mut scale = Vec::new();
        let mut shift = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            scale.push(Linear::zeroed(store, &format!("tff.level{}.scale", i + 1), width, c)?);
            shift.push(Linear::zeroed(store, &format!("tff.level{}.shift", i + 1), width, c)?);
        }
        Ok(Self {
            filters,
            scale,
            shift,
            nodes,
            width,
            topology: build_graph(nodes)?,
        })
    }

    pub fn k(&self) -> usize {
        self.filters.len()
    }

    /// Filter `B×N×2C` node features and mean-pool them to `B×2C`.
    pub fn pooled<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], nodes: Var) -> Result<Var> {
        ensure!(
            g.shape(nodes).len() == 3 && g.shape(nodes)[1..] == [self.nodes, self.width],
            "node features {:?} do not match {} nodes of width {}",
            g.shape(nodes),
            self.nodes,
            self.width
        );
        let mut e = nodes;
        let mut acc: Option<Var> = None;
        for id in &self.filters {
            e = filter_layer(g, e, bound[id.0], &self.topology.adjacency_norm)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        g.mean_nodes(acc.expect("k >= 1"))
    }

    /// `x·(1 + s) + b` with `s`, `b` projected from the pooled text vector.
    pub fn modulate<T: Float>(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        level: usize,
        x: Var,
        pooled: Var,
    ) -> Result<Var> {
        ensure!(
            (1..=self.scale.len()).contains(&level),
            "no modulation for level {level}"
        );
        let s = self.scale[level - 1].forward(g, bound, pooled)?;
        let b = self.shift[level - 1].forward(g, bound, pooled)?;
        g.modulate(x, s, b)
    }
}

/// Probability and embedding providers bundled to turn an image into
/// node features.
pub struct TextEncoder {
    pub probs: Box<dyn ProbabilityProvider>,
    pub embed: Box<dyn EmbeddingProvider>,
}

impl TextEncoder {
    pub fn stub(seed: u64, dim: usize) -> Result<Self> {
        Ok(Self {
            probs: Box::new(StubProbabilities::new(seed)),
            embed: Box::new(StubEmbedder::new(dim, seed)?),
        })
    }

    pub fn descriptors(&self, image_id: &str, period: Phase, image: &Raster<u8>) -> Result<Vec<String>> {
        Ok(describe(self.probs.as_ref(), image_id, period, image)?
            .into_iter()
            .map(|d| d.rendered)
            .collect())
    }

    /// `N×2C` node features for rendered descriptors.
    pub fn encode(&self, descriptors: &[String]) -> Result<Tensor<f64>> {
        node_features(&self.embed.embed(descriptors)?)
    }

    pub fn width(&self) -> usize {
        2 * self.embed.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_examples() {
        assert_eq!(
            render_descriptor(Phase::T1, "road", 0.87).unwrap(),
            "Remote sensing image at time T1 has a 0.87 probability of being the road"
        );
        assert_eq!(
            render_descriptor(Phase::T2, "bridge", 1.0).unwrap(),
            "Remote sensing image at time T2 has a 1.00 probability of being the bridge"
        );
        assert!(render_descriptor(Phase::T1, "water", 0.005)
            .unwrap()
            .contains("has a 0.01 probability of being the water"));
        assert!(render_descriptor(Phase::T1, "water", 0.0049).unwrap().contains("0.00"));
        assert!(render_descriptor(Phase::T1, "x", 1.01).is_err());
        assert!(render_descriptor(Phase::T1, "x", -0.1).is_err());
        assert!(render_descriptor(Phase::T1, "x", f64::NAN).is_err());
    }

    #[test]
    fn vocabulary_is_distinct() {
        let v = descriptor_vocabulary();
        let set: std::collections::HashSet<_> = v.iter().collect();
        assert_eq!(set.len(), v.len());
        assert_eq!(v.len(), 1616);
    }

    #[test]
    fn small_graphs() {
        let g3 = build_graph(3).unwrap();
        assert_eq!(g3.edges.len(), 3);
        assert!(g3.adjacency_norm.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let g1 = build_graph(1).unwrap();
        assert!(g1.edges.is_empty());
        assert_eq!(g1.adjacency_norm.data(), &[1.0]);
        assert!(build_graph(0).is_err());
    }

    #[test]
    fn zero_filters_give_zero() {
        let topo = build_graph(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[4, 6], 1.0, &mut rng);
        let w = vec![Tensor::zeros(&[6, 6]); 3];
        let out = graph_filter(&w, &topo, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(graph_filter(&[Tensor::zeros(&[5, 5])], &topo, &x).is_err());
    }

    #[test]
    fn node_features_split_re_im() {
        let e = StubEmbedder::new(8, 0).unwrap();
        let m = e.embed(&["a".into(), "b".into()]).unwrap();
        let nf = node_features(&m).unwrap();
        assert_eq!(nf.shape(), &[2, 16]);
        // DC term is the row sum, with no imaginary part
        let sum: f64 = m.rows.data()[..8].iter().sum();
        assert!((nf.data()[0] - sum).abs() < 1e-12);
        assert!(nf.data()[8].abs() < 1e-12);
    }

    #[test]
    fn neutral_modulation_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let tff = Tff::new(&mut store, 2, 5, 8, &[3], &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let nodes = g.constant(Tensor::uniform(&[1, 5, 8], 1.0, &mut rng));
        let pooled = tff.pooled(&mut g, &bound, nodes).unwrap();
        let x = Tensor::uniform(&[1, 3, 2, 2], 1.0, &mut rng);
        let xv = g.constant(x.clone());
        let y = tff.modulate(&mut g, &bound, 1, xv, pooled).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn encoder_shapes() {
        let enc = TextEncoder::stub(0, 16).unwrap();
        let img = Raster::filled(3, 8, 8, 90u8);
        let d = enc.descriptors("id", Phase::T2, &img).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d[0].starts_with("Remote sensing image at time T2 has a "));
        assert_eq!(enc.encode(&d).unwrap().shape(), &[5, 32]);
    }
}
