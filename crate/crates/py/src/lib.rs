//! Python bindings over the `mfdcd` core: transforms, rasters, scenes,
//! metrics and model inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use mfdcd::datakit::{
    decode_raster, gen_scene as core_gen_scene, AnyRaster, Raster as CoreRaster, ScenePair, SceneParams,
};
use mfdcd::dfc::SparsityScheduler;
use mfdcd::metrics::{ConfusionMatrix as CoreConfusion, MetricReport};
use mfdcd::pipeline::{predict_pairs, Model as CoreModel, RunConfig};
use mfdcd::spectral::{dft as core_dft, idft as core_idft, ComplexSpectrum};
use mfdcd::tensor::{load_checkpoint, Tensor};
use mfdcd::tff::{build_graph as core_build_graph, read_temb as core_read_temb, TextEncoder};
use mfdcd::wavelet::{dwt2 as core_dwt2, idwt2 as core_idwt2, WaveletBands};
use mfdcd::{Error, Phase};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Divergence(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Shape4 = (usize, usize, usize, usize);

fn tensor4(data: Vec<f64>, shape: Shape4) -> PyResult<Tensor<f64>> {
    Tensor::new(&[shape.0, shape.1, shape.2, shape.3], data).map_err(to_py)
}

type Bands = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
type Graph = (Vec<(usize, usize)>, Vec<f64>);

/// Single-level Haar analysis of a flat NCHW map; returns `(ll, hl, lh, hh)`.
#[pyfunction]
fn dwt2(data: Vec<f64>, shape: Shape4) -> PyResult<Bands> {
    let b = core_dwt2(&tensor4(data, shape)?).map_err(to_py)?;
    Ok((b.ll.into_data(), b.hl.into_data(), b.lh.into_data(), b.hh.into_data()))
}

/// Inverse of [`dwt2`]; `shape` is the half-resolution band shape.
#[pyfunction]
fn idwt2(ll: Vec<f64>, hl: Vec<f64>, lh: Vec<f64>, hh: Vec<f64>, shape: Shape4) -> PyResult<Vec<f64>> {
    let bands = WaveletBands {
        ll: tensor4(ll, shape)?,
        hl: tensor4(hl, shape)?,
        lh: tensor4(lh, shape)?,
        hh: tensor4(hh, shape)?,
    };
    Ok(core_idwt2(&bands).map_err(to_py)?.into_data())
}

/// DFT down each column of a row-major `n×c` matrix; returns `(re, im)`.
#[pyfunction]
fn dft(data: Vec<f64>, n: usize, c: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let x = Tensor::new(&[n, c], data).map_err(to_py)?;
    let s = core_dft(&x).map_err(to_py)?;
    Ok((s.re.into_data(), s.im.into_data()))
}

#[pyfunction]
fn idft(re: Vec<f64>, im: Vec<f64>, n: usize, c: usize) -> PyResult<Vec<f64>> {
    let spec = ComplexSpectrum {
        re: Tensor::new(&[n, c], re).map_err(to_py)?,
        im: Tensor::new(&[n, c], im).map_err(to_py)?,
    };
    Ok(core_idft(&spec).map_err(to_py)?.into_data())
}

#[pyfunction]
#[pyo3(signature = (p, lambda0=1.0, gamma=1e-4))]
fn sparsity_strength(p: u64, lambda0: f64, gamma: f64) -> PyResult<f64> {
    let s = SparsityScheduler::new(lambda0, gamma, 0.1).map_err(to_py)?;
    Ok(s.strength(p))
}

/// Edge list and row-major normalized adjacency of the complete graph on `n` nodes.
#[pyfunction]
fn build_graph(n: usize) -> PyResult<Graph> {
    let g = core_build_graph(n).map_err(to_py)?;
    Ok((g.edges, g.adjacency_norm.into_data()))
}

#[pyfunction]
fn render_descriptor(period: &str, key: &str, value: f64) -> PyResult<String> {
    let phase = match period {
        "T1" => Phase::T1,
        "T2" => Phase::T2,
        other => return Err(PyValueError::new_err(format!("unknown period {other:?}"))),
    };
    mfdcd::tff::render_descriptor(phase, key, value).map_err(to_py)
}

/// `(count, dim, values)` of a TEMB embedding file.
#[pyfunction]
fn read_temb(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let t = core_read_temb(&path).map_err(to_py)?;
    Ok((t.count, t.dim, t.values))
}

#[pyclass(module = "mfdcd_py", skip_from_py_object)]
#[derive(Clone)]
struct Raster {
    inner: CoreRaster<u8>,
}

#[pymethods]
impl Raster {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRaster::new(channels, height, width, data).map_err(to_py)?,
        })
    }

    /// Decode an RBR1 byte string holding 8-bit samples.
    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        match decode_raster(bytes).map_err(to_py)? {
            AnyRaster::U8(r) => Ok(Self { inner: r }),
            _ => Err(PyValueError::new_err("expected an 8-bit raster")),
        }
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn data(&self) -> Vec<u8> {
        self.inner.data.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Raster({}x{}x{})",
            self.inner.channels, self.inner.height, self.inner.width
        )
    }
}

/// One synthetic scene: `(id, t1, t2, label)`.
#[pyfunction]
#[pyo3(signature = (seed, size=256))]
fn gen_scene(seed: u64, size: usize) -> PyResult<(String, Raster, Raster, Raster)> {
    let params = SceneParams {
        size,
        ..SceneParams::default()
    };
    let s = core_gen_scene(seed, &params).map_err(to_py)?;
    Ok((
        s.id,
        Raster { inner: s.t1 },
        Raster { inner: s.t2 },
        Raster { inner: s.label },
    ))
}

#[pyclass(module = "mfdcd_py")]
struct ConfusionMatrix {
    inner: CoreConfusion,
}

#[pymethods]
impl ConfusionMatrix {
    #[new]
    #[pyo3(signature = (classes=12))]
    fn new(classes: usize) -> Self {
        Self {
            inner: CoreConfusion::with_default_names(classes),
        }
    }

    fn accumulate(&mut self, pred: &Raster, label: &Raster) -> PyResult<()> {
        self.inner.accumulate(&pred.inner, &label.inner).map_err(to_py)
    }

    #[getter]
    fn counts(&self) -> Vec<Vec<u64>> {
        self.inner.counts.clone()
    }

    fn report_json(&self) -> String {
        MetricReport::new(&self.inner).to_json()
    }
}

#[pyclass(module = "mfdcd_py", unsendable)]
struct Model {
    inner: CoreModel<f32>,
    text: Option<TextEncoder>,
}

impl Model {
    fn wrap(inner: CoreModel<f32>) -> PyResult<Self> {
        let text = if inner.uses_text() {
            Some(TextEncoder::stub(inner.config.seed, inner.config.embed_dim).map_err(to_py)?)
        } else {
            None
        };
        Ok(Self { inner, text })
    }
}

#[pymethods]
impl Model {
    /// Fresh model from a run-config JSON document (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: RunConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => RunConfig::default(),
        };
        cfg.validate().map_err(to_py)?;
        Self::wrap(CoreModel::new(cfg.model).map_err(to_py)?)
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf, config: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&config).map_err(|e| PyOSError::new_err(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.validate().map_err(to_py)?;
        let mut model = CoreModel::new(cfg.model).map_err(to_py)?;
        load_checkpoint(&checkpoint, &mut model.store).map_err(to_py)?;
        Self::wrap(model)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.scalar_count()
    }

    /// Per-pixel class map for one bi-temporal pair.
    #[pyo3(signature = (t1, t2, image_id="pair"))]
    fn predict(&self, t1: &Raster, t2: &Raster, image_id: &str) -> PyResult<Raster> {
        let pair = ScenePair {
            id: image_id.to_owned(),
            seed: 0,
            t1: t1.inner.clone(),
            t2: t2.inner.clone(),
            label: CoreRaster::filled(1, t1.inner.height, t1.inner.width, 0),
        };
        let mut out = predict_pairs(&self.inner, &[&pair], self.text.as_ref(), 1).map_err(to_py)?;
        Ok(Raster { inner: out.remove(0) })
    }
}

#[pymodule]
fn mfdcd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Raster>()?;
    m.add_class::<ConfusionMatrix>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(dwt2, m)?)?;
    m.add_function(wrap_pyfunction!(idwt2, m)?)?;
    m.add_function(wrap_pyfunction!(dft, m)?)?;
    m.add_function(wrap_pyfunction!(idft, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_strength, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(render_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(read_temb, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    Ok(())
}
