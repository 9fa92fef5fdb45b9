//! Fast invariant checks behind `mfdcd selftest`, one suite per module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::PyramidConfig;
use crate::datakit::{decode_raster, gen_scene, AnyRaster, Raster, SceneParams};
use crate::dfc::{sparse_threshold, SparsityScheduler};
use crate::error::{Error, Result};
use crate::metrics::{per_class_metrics, ConfusionMatrix};
use crate::pipeline::{Model, ModelConfig, ModelInput};
use crate::spectral::{dft, idft};
use crate::tensor::{grad_check, Graph, Tensor};
use crate::tff::{build_graph, graph_filter, render_descriptor};
use crate::wavelet::{dwt2, idwt2};
use crate::Phase;

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::contract(format!("check failed: {what}")))
    }
}

fn ndtensor() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::uniform(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
    let err = grad_check(
        |g: &mut Graph<f64>, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        },
        &[x, w],
        1e-5,
    )?;
    check(err < 1e-6, "conv2d gradient")
}

fn wavelet() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::uniform(&[2, 3, 8, 8], 1.0, &mut rng);
    let bands = dwt2(&x)?;
    check(idwt2(&bands)?.max_abs_diff(&x) < 1e-12, "haar round trip")?;
    check(
        ((bands.energy() - x.sum_squares()) / x.sum_squares()).abs() < 1e-9,
        "energy",
    )
}

fn spectral() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::uniform(&[17, 2], 1.0, &mut rng);
    let s = dft(&x)?;
    let e: f64 = s.re.sum_squares() + s.im.sum_squares();
    check((e / 17.0 - x.sum_squares()).abs() < 1e-10, "parseval")?;
    check(idft(&s)?.max_abs_diff(&x) < 1e-10, "inverse")
}

fn dfc() -> Result<()> {
    let sched = SparsityScheduler::default();
    check(sched.strength(0) == sched.lambda0, "lambda at zero")?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::<f64>::uniform(&[64], 0.3, &mut rng);
    let mut prev: Option<Tensor<f64>> = None;
    for p in [0, 1_000, 10_000, 100_000] {
        let kept = sparse_threshold(&h, &sched, p);
        if let Some(prev) = &prev {
            let nested = prev.data().iter().zip(kept.data()).all(|(a, b)| *a == 0.0 || *b != 0.0);
            check(nested, "support grows as the threshold decays")?;
        }
        prev = Some(kept);
    }
    Ok(())
}

fn tff() -> Result<()> {
    for n in 1..=16 {
        let g = build_graph(n)?;
        check(g.edges.len() == n * (n - 1) / 2, "edge count")?;
        for row in g.adjacency_norm.data().chunks(n) {
            check((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "row sums")?;
        }
    }
    let topo = build_graph(5)?;
    let x = Tensor::new(&[5, 4], [0.5, 1.0, 0.0, 2.0].repeat(5))?;
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let out = graph_filter(&vec![eye; 3], &topo, &x)?;
    check(out.max_abs_diff(&x.map(|v| 3.0 * v)) == 0.0, "identity bank")?;
    check(
        render_descriptor(Phase::T1, "road", 0.87)?
            == "Remote sensing image at time T1 has a 0.87 probability of being the road",
        "template",
    )
}

fn backbone() -> Result<()> {
    let cfg = ModelConfig {
        enable_dfc: false,
        enable_tff: false,
        backbone: PyramidConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 8, 8],
            ..PyramidConfig::default()
        },
        decoder_width: 4,
        class_count: 2,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(cfg)?;
    let input = ModelInput {
        images: [Tensor::zeros(&[1, 3, 64, 64]), Tensor::zeros(&[1, 3, 64, 64])],
        text: None,
    };
    let mut g = Graph::new();
    let bound = m.store.bind_constant(&mut g);
    let out = m.forward(&mut g, &bound, &input, 0)?;
    let sides: Vec<usize> = out.features[0].iter().map(|&v| g.shape(v)[2]).collect();
    check(sides == [16, 8, 4, 2], "stride ladder")
}

fn pipeline() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig {
        backbone: PyramidConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 8, 8],
            ..PyramidConfig::default()
        },
        decoder_width: 4,
        embed_dim: 4,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::new(cfg)?;
    let img = Tensor::uniform(&[1, 3, 64, 64], 1.0, &mut rng);
    let text = Tensor::uniform(&[1, 5, 8], 1.0, &mut rng);
    let input = ModelInput {
        images: [img.clone(), img],
        text: Some([text.clone(), text]),
    };
    let mut g = Graph::new();
    let bound = m.store.bind_constant(&mut g);
    let out = m.forward(&mut g, &bound, &input, 0)?;
    for d in out.diffs {
        check(
            g.value(d).data().iter().all(|&v| v == 0.0),
            "zero difference for identical inputs",
        )?;
    }
    Ok(())
}

fn metrics() -> Result<()> {
    let mut cm = ConfusionMatrix::with_default_names(3);
    cm.counts = vec![vec![5, 1, 0], vec![2, 7, 1], vec![0, 3, 9]];
    for r in per_class_metrics(&cm) {
        let (iou, f1) = (r.iou.unwrap_or(0.0), r.f1.unwrap_or(0.0));
        check((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12, "f1 identity")?;
    }
    Ok(())
}

fn datakit() -> Result<()> {
    let p = SceneParams {
        size: 64,
        ..SceneParams::default()
    };
    check(gen_scene(7, &p)? == gen_scene(7, &p)?, "deterministic scenes")?;
    let r = Raster::new(3, 4, 4, (0..48).collect())?;
    check(decode_raster(&r.to_bytes())? == AnyRaster::U8(r), "raster round trip")
}

type Suite = (&'static str, fn() -> Result<()>);

/// Every suite with its outcome.
pub fn run_all() -> Vec<(&'static str, Result<()>)> {
    let suites: [Suite; 9] = [
        ("ndtensor", ndtensor),
        ("wavelet", wavelet),
        ("spectral", spectral),
        ("dfc", dfc),
        ("tff", tff),
        ("backbone", backbone),
        ("pipeline", pipeline),
        ("metrics", metrics),
        ("datakit", datakit),
    ];
    suites.into_iter().map(|(name, f)| (name, f())).collect()
}
