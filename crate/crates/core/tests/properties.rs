use std::collections::HashSet;

use mfdcd::datakit::{gen_scene, tile, Category, Raster, SceneParams};
use mfdcd::dfc::{sparse_threshold, SparsityScheduler};
use mfdcd::metrics::{per_class_metrics, ConfusionMatrix};
use mfdcd::spectral::dft;
use mfdcd::tensor::{Graph, Tensor};
use mfdcd::tff::{build_graph, render_descriptor};
use mfdcd::wavelet::{dwt2, idwt2};
use mfdcd::Phase;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn even_map() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=2, 1usize..=3, 1usize..=6, 1usize..=6).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, 2 * h, 2 * w]))
}

fn map4(max_side: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=2, 1usize..=3, 1..=max_side, 1..=max_side).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, h, w]))
}

fn label_raster(h: usize, w: usize, k: u8) -> impl Strategy<Value = Raster<u8>> {
    prop::collection::vec(0..k, h * w).prop_map(move |d| Raster::new(1, h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wavelet_round_trip_and_energy(x in even_map()) {
        let bands = dwt2(&x).unwrap();
        prop_assert!(idwt2(&bands).unwrap().max_abs_diff(&x) < 1e-12);
        let e = x.sum_squares();
        prop_assert!((bands.energy() - e).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn wavelet_is_linear((x, y) in even_map().prop_flat_map(|x| {
        let shape = x.shape().to_vec();
        (Just(x), tensor(shape))
    }), a in -2.0f64..2.0) {
        let combo = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let (bx, by, bc) = (dwt2(&x).unwrap(), dwt2(&y).unwrap(), dwt2(&combo).unwrap());
        for (((cx, cy), cc), name) in [&bx.ll, &bx.hl, &bx.lh, &bx.hh]
            .into_iter()
            .zip([&by.ll, &by.hl, &by.lh, &by.hh])
            .zip([&bc.ll, &bc.hl, &bc.lh, &bc.hh])
            .zip(["ll", "hl", "lh", "hh"])
        {
            for ((p, q), r) in cx.data().iter().zip(cy.data()).zip(cc.data()) {
                prop_assert!((a * p + q - r).abs() < 1e-12, "band {}", name);
            }
        }
    }

    #[test]
    fn dft_of_real_input_is_conjugate_symmetric(x in (1usize..=64, 1usize..=3).prop_flat_map(|(n, c)| tensor(vec![n, c]))) {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s = dft(&x).unwrap();
        for k in 1..n {
            for j in 0..c {
                let (a, b) = (k * c + j, (n - k) * c + j);
                prop_assert!((s.re.data()[a] - s.re.data()[b]).abs() < 1e-10);
                prop_assert!((s.im.data()[a] + s.im.data()[b]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dft_is_linear((x, y) in (1usize..=32).prop_flat_map(|n| (tensor(vec![n, 2]), tensor(vec![n, 2]))), a in -2.0f64..2.0) {
        let combo = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let (sx, sy, sc) = (dft(&x).unwrap(), dft(&y).unwrap(), dft(&combo).unwrap());
        for i in 0..x.len() {
            prop_assert!((a * sx.re.data()[i] + sy.re.data()[i] - sc.re.data()[i]).abs() < 1e-10);
            prop_assert!((a * sx.im.data()[i] + sy.im.data()[i] - sc.im.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sparse_threshold_keeps_a_subset_unchanged(h in tensor(vec![3, 17]), p in 0u64..200_000, g in 0.0f64..0.5) {
        let s = SparsityScheduler::new(1.0, 1e-4, g).unwrap();
        let kept = sparse_threshold(&h, &s, p);
        let nnz = |t: &Tensor<f64>| t.data().iter().filter(|v| **v != 0.0).count();
        prop_assert!(nnz(&kept) <= nnz(&h));
        for (k, v) in kept.data().iter().zip(h.data()) {
            prop_assert!(*k == 0.0 || k == v);
            prop_assert_eq!(*k != 0.0, v.abs() > s.threshold(p));
        }
    }

    #[test]
    fn normalised_adjacency_is_symmetric_and_uniform(n in 1usize..64) {
        let g = build_graph(n).unwrap();
        let a = g.adjacency_norm.data();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a[i * n + j], a[j * n + i]);
                prop_assert!((a[i * n + j] - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn confusion_counts_ignore_accumulation_order(pairs in prop::collection::vec((label_raster(4, 5, 6), label_raster(4, 5, 6)), 1..6)) {
        let mut forward = ConfusionMatrix::with_default_names(6);
        let mut backward = ConfusionMatrix::with_default_names(6);
        for (p, l) in &pairs {
            forward.accumulate(p, l).unwrap();
        }
        for (p, l) in pairs.iter().rev() {
            backward.accumulate(p, l).unwrap();
        }
        prop_assert_eq!(&forward.counts, &backward.counts);
        prop_assert_eq!(forward.total(), 20 * pairs.len() as u64);
    }

    #[test]
    fn precision_and_recall_bound_iou(pred in label_raster(8, 8, 5), label in label_raster(8, 8, 5)) {
        let mut cm = ConfusionMatrix::with_default_names(5);
        cm.accumulate(&pred, &label).unwrap();
        for row in per_class_metrics(&cm) {
            if let (Some(iou), Some(pre), Some(rec)) = (row.iou, row.pre, row.rec) {
                prop_assert!(pre >= iou - 1e-15 && rec >= iou - 1e-15);
            }
        }
    }

    #[test]
    fn descriptors_are_injective(
        a in (any::<bool>(), 0usize..8, 0u32..=100),
        b in (any::<bool>(), 0usize..8, 0u32..=100),
    ) {
        let render = |(t2, k, cents): (bool, usize, u32)| {
            let period = if t2 { Phase::T2 } else { Phase::T1 };
            render_descriptor(period, Category::ALL[k].name(), cents as f64 / 100.0).unwrap()
        };
        prop_assert_eq!(render(a) == render(b), a == b);
    }

    #[test]
    fn conv2d_matches_direct_loops(
        x in map4(7),
        out_c in 1usize..=3,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2,
        pad in 0usize..=1,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let (b, c, h, w) = x.dims4().unwrap();
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let wt = Tensor::<f64>::uniform(&[out_c, c, k, k], 1.0, &mut rng);
        let bias = Tensor::<f64>::uniform(&[out_c], 1.0, &mut rng);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let y = g.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let got = g.value(y);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(got.shape(), &[b, out_c, oh, ow][..]);
        for bi in 0..b {
            for o in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    s += xv * wt.data()[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        let v = got.data()[((bi * out_c + o) * oh + oy) * ow + ox];
                        prop_assert!((v - s).abs() < 1e-12, "({}, {}, {}, {}): {} vs {}", bi, o, oy, ox, v, s);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_reproduces_clamped_ramps(
        h in 1usize..=6,
        w in 1usize..=6,
        factor in prop::sample::select(vec![2usize, 4]),
        (a, c, d) in (-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0),
    ) {
        let data: Vec<f64> = (0..h * w).map(|i| a * (i / w) as f64 + c * (i % w) as f64 + d).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, h, w], data).unwrap());
        let y = g.upsample(x, factor).unwrap();
        let coord = |o: usize, n: usize| ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let out = g.value(y).data();
        for oy in 0..h * factor {
            for ox in 0..w * factor {
                let want = a * coord(oy, h) + c * coord(ox, w) + d;
                prop_assert!((out[oy * w * factor + ox] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pad_edge_repeats_the_nearest_border_sample(x in map4(5), pad in 0usize..=3) {
        let (b, c, h, w) = x.dims4().unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.pad_edge(v, pad).unwrap();
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let out = g.value(y).data();
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = oy.saturating_sub(pad).min(h - 1);
                    let sx = ox.saturating_sub(pad).min(w - 1);
                    prop_assert_eq!(out[(p * oh + oy) * ow + ox], x.data()[(p * h + sy) * w + sx]);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_is_the_mean_pixel_loss(
        logits in (1usize..=2, 2usize..=5, 1usize..=4, 1usize..=4).prop_flat_map(|(b, k, h, w)| tensor(vec![b, k, h, w])),
        seed in any::<u64>(),
    ) {
        let (b, k, h, w) = logits.dims4().unwrap();
        let plane = h * w;
        let labels: Vec<usize> = (0..b * plane).map(|i| (seed as usize).wrapping_add(i * 31) % k).collect();
        let mut g = Graph::new();
        let v = g.constant(logits.clone());
        let loss = g.cross_entropy(v, &labels).unwrap();
        let mut want = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let z: f64 = (0..k).map(|c| logits.data()[(bi * k + c) * plane + p].exp()).sum();
                let l = labels[bi * plane + p];
                want -= (logits.data()[(bi * k + l) * plane + p].exp() / z).ln();
            }
        }
        want /= (b * plane) as f64;
        prop_assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn concat_then_slice_is_identity((a, bt) in (1usize..=2, 1usize..=3, 1usize..=3, 1usize..=4, 1usize..=4)
        .prop_flat_map(|(b, c1, c2, h, w)| (tensor(vec![b, c1, h, w]), tensor(vec![b, c2, h, w])))) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(bt.clone()));
        let cat = g.concat(&[va, vb]).unwrap();
        let joined = g.value(cat);
        let (c1, c2) = (a.shape()[1], bt.shape()[1]);
        prop_assert_eq!(&joined.slice_channels(0, c1).unwrap(), &a);
        prop_assert_eq!(&joined.slice_channels(c1, c1 + c2).unwrap(), &bt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tiling_preserves_every_pixel(seed in any::<u64>(), tiles_per_side in 1usize..=2) {
        let size = 64 * tiles_per_side;
        let params = SceneParams { size, ..SceneParams::default() };
        let scene = gen_scene(seed, &params).unwrap();
        let tiles = tile(&scene, 64).unwrap();
        prop_assert_eq!(tiles.len(), tiles_per_side * tiles_per_side);
        let mut ids = HashSet::new();
        for (i, t) in tiles.iter().enumerate() {
            prop_assert!(ids.insert(t.id.clone()));
            let (y0, x0) = (64 * (i / tiles_per_side), 64 * (i % tiles_per_side));
            for y in 0..64 {
                for x in 0..64 {
                    prop_assert_eq!(t.label.get(0, y, x), scene.label.get(0, y0 + y, x0 + x));
                    for ch in 0..3 {
                        prop_assert_eq!(t.t1.get(ch, y, x), scene.t1.get(ch, y0 + y, x0 + x));
                        prop_assert_eq!(t.t2.get(ch, y, x), scene.t2.get(ch, y0 + y, x0 + x));
                    }
                }
            }
        }
    }
}
