//! Seeded bi-temporal scene synthesis and grid tiling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::Raster;
use super::taxonomy::{transition, Category, CLASS_COUNT};
use crate::error::{ensure, Result};

/// Rendering and layout knobs for [`gen_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Side length in pixels (multiple of 64).
    pub size: usize,
    /// Non-negative weights over change classes 1..=11.
    pub transition_mix: Vec<f64>,
    /// Standard deviation of per-pixel texture noise, in grey levels.
    pub noise_sigma: f64,
    /// Target fraction of changed pixels per scene.
    pub area_budget: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Peak amplitude of the per-phase illumination ramp.
    pub illumination: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 256,
            transition_mix: vec![1.0; CLASS_COUNT - 1],
            noise_sigma: 10.0,
            area_budget: 0.25,
            min_regions: 1,
            max_regions: 6,
            illumination: 12.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.size >= 64 && self.size.is_multiple_of(64),
            "scene size must be a positive multiple of 64, got {}",
            self.size
        );
        ensure!(
            self.transition_mix.len() == CLASS_COUNT - 1,
            "transition_mix needs {} weights (classes 1..={}), got {}",
            CLASS_COUNT - 1,
            CLASS_COUNT - 1,
            self.transition_mix.len()
        );
        ensure!(
            self.transition_mix.iter().all(|w| w.is_finite() && *w >= 0.0),
            "transition_mix weights must be finite and non-negative"
        );
        ensure!(
            self.transition_mix.iter().any(|&w| w > 0.0),
            "transition_mix weights are all zero"
        );
        ensure!(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma must be non-negative"
        );
        ensure!(
            self.area_budget > 0.0 && self.area_budget < 0.6,
            "area_budget must lie in (0, 0.6), got {}",
            self.area_budget
        );
        ensure!(
            1 <= self.min_regions && self.min_regions <= self.max_regions,
            "region count range {}..={} is empty",
            self.min_regions,
            self.max_regions
        );
        ensure!(
            self.illumination.is_finite() && self.illumination >= 0.0,
            "illumination must be non-negative"
        );
        Ok(())
    }
}

/// A rendered pre/post pair and its change label.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub seed: u64,
    pub t1: Raster<u8>,
    pub t2: Raster<u8>,
    pub label: Raster<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
    /// Convex quadrilateral, vertices in winding order.
    Quad([(f64, f64); 4]),
}

impl Shape {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0, x0, y1, x1),
            Shape::Quad(p) => p
                .iter()
                .fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |(a, b, c, d), &(y, x)| {
                    (a.min(y), b.min(x), c.max(y), d.max(x))
                }),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Quad(p) => {
                let sides = (0..4).map(|i| {
                    let (ay, ax) = p[i];
                    let (by, bx) = p[(i + 1) % 4];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                });
                let (mut pos, mut neg) = (true, true);
                for s in sides {
                    pos &= s >= 0.0;
                    neg &= s <= 0.0;
                }
                pos || neg
            }
        }
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Sample a region of roughly `area` pixels inside a `size`² canvas.
fn sample_shape(area: f64, size: usize, rng: &mut impl Rng) -> Shape {
    let s = size as f64;
    let aspect: f64 = rng.random_range(0.6..1.67);
    let quad = rng.random_bool(0.4);
    // corner cut-offs of an inscribed quad remove about half the box
    let box_area = if quad { area * 2.0 } else { area };
    let h = (box_area * aspect).sqrt().clamp(8.0, s - 2.0);
    let w = (box_area / aspect).sqrt().clamp(8.0, s - 2.0);
    let y0 = rng.random_range(0.0..=(s - h));
    let x0 = rng.random_range(0.0..=(s - w));
    if !quad {
        return Shape::Rect {
            y0,
            x0,
            y1: y0 + h,
            x1: x0 + w,
        };
    }
    let mut t = || rng.random_range(0.3..0.7);
    // one vertex per box side, in winding order
    Shape::Quad([
        (y0, x0 + t() * w),
        (y0 + t() * h, x0),
        (y0 + h, x0 + t() * w),
        (y0 + t() * h, x0 + w),
    ])
}

/// Render the pair for one seed. Fully determined by `(seed, params)`.
pub fn gen_scene(seed: u64, params: &SceneParams) -> Result<ScenePair> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // layout: regions never overlap, each gets one transition class
    let mut label = Raster::filled(1, n, n, 0u8);
    let regions = rng.random_range(params.min_regions..=params.max_regions);
    let per_region = params.area_budget * (n * n) as f64 / regions as f64;
    for _ in 0..regions {
        let class = 1 + pick_weighted(&params.transition_mix, &mut rng);
        let target = per_region * rng.random_range(0.8..1.2);
        for attempt in 0..40 {
            let shape = sample_shape(target * 0.97f64.powi(attempt), n, &mut rng);
            let (y0, x0, y1, x1) = shape.bbox();
            let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(n as f64) as usize);
            let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(n as f64) as usize);
            let cells: Vec<(usize, usize)> = ys
                .flat_map(|y| xs.clone().map(move |x| (y, x)))
                .filter(|&(y, x)| shape.contains(y as f64 + 0.5, x as f64 + 0.5))
                .collect();
            // one-pixel moat keeps neighbouring regions apart
            let clear = cells.iter().all(|&(y, x)| {
                (y.saturating_sub(1)..(y + 2).min(n))
                    .all(|yy| (x.saturating_sub(1)..(x + 2).min(n)).all(|xx| label.get(0, yy, xx) == 0))
            });
            if clear && !cells.is_empty() {
                for (y, x) in cells {
                    label.set(0, y, x, class as u8);
                }
                break;
            }
        }
    }

    // background: a category that is not the source of any change drawn here
    let used: Vec<Category> = (1..CLASS_COUNT)
        .filter(|&c| label.data.contains(&(c as u8)))
        .filter_map(transition)
        .flat_map(|(a, b)| [a, b])
        .collect();
    let free: Vec<Category> = Category::ALL.iter().copied().filter(|c| !used.contains(c)).collect();
    let pool = if free.is_empty() { &Category::ALL[..] } else { &free[..] };
    let background = pool[rng.random_range(0..pool.len())];

    let noise = Normal::new(0.0, params.noise_sigma.max(1e-12)).expect("sigma is finite");
    let plane = n * n;
    // texture shared by both dates, plus a weaker per-date component
    let texture: Vec<f64> = (0..3 * plane).map(|_| noise.sample(&mut rng)).collect();
    let mut t1 = Raster::filled(3, n, n, 0u8);
    let mut t2 = Raster::filled(3, n, n, 0u8);
    for (phase, out) in [&mut t1, &mut t2].into_iter().enumerate() {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let gain: f64 = rng.random_range(0.5..1.0) * params.illumination;
        let (gy, gx) = (angle.sin() * gain, angle.cos() * gain);
        for y in 0..n {
            for x in 0..n {
                let class = label.get(0, y, x) as usize;
                let cat = match transition(class) {
                    None => background,
                    Some((from, to)) => {
                        if phase == 0 {
                            from
                        } else {
                            to
                        }
                    }
                };
                let ramp = gy * (y as f64 / n as f64 - 0.5) + gx * (x as f64 / n as f64 - 0.5);
                let base = cat.palette();
                let tex = cat.texture() as f64;
                for (c, &b) in base.iter().enumerate() {
                    let i = c * plane + y * n + x;
                    let v = b as f64 + ramp + tex * texture[i] + 0.3 * noise.sample(&mut rng);
                    out.data[i] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    Ok(ScenePair {
        id: format!("scene_{seed:016x}"),
        seed,
        t1,
        t2,
        label,
    })
}

/// Cut a pair into non-overlapping `tile_size` squares, dropping the
/// right and bottom remainders.
pub fn tile(pair: &ScenePair, tile_size: usize) -> Result<Vec<ScenePair>> {
    ensure!(
        tile_size >= 64 && tile_size.is_multiple_of(64),
        "tile size must be a positive multiple of 64, got {tile_size}"
    );
    let (h, w) = (pair.label.height, pair.label.width);
    ensure!(
        pair.t1.same_extent(&pair.label) && pair.t2.same_extent(&pair.label),
        "pair {} has misaligned rasters",
        pair.id
    );
    ensure!(
        h >= tile_size && w >= tile_size,
        "pair {} is {h}x{w}, smaller than tile size {tile_size}",
        pair.id
    );
    let mut tiles = Vec::new();
    for row in 0..h / tile_size {
        for col in 0..w / tile_size {
            let (y0, x0) = (row * tile_size, col * tile_size);
            tiles.push(ScenePair {
                id: format!("{}_r{row}_c{col}", pair.id),
                seed: pair.seed,
                t1: pair.t1.crop(y0, x0, tile_size, tile_size)?,
                t2: pair.t2.crop(y0, x0, tile_size, tile_size)?,
                label: pair.label.crop(y0, x0, tile_size, tile_size)?,
            });
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneParams {
        SceneParams {
            size: 64,
            ..SceneParams::default()
        }
    }

    #[test]
    fn degenerate_mix_gives_one_class() {
        let mut p = small();
        p.transition_mix = vec![0.0; 11];
        p.transition_mix[1] = 1.0;
        for seed in 0..5 {
            let s = gen_scene(seed, &p).unwrap();
            assert!(s.label.data.iter().all(|&v| v == 0 || v == 2));
            assert!(s.label.data.contains(&2));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_scene(9, &small()).unwrap();
        let b = gen_scene(9, &small()).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(10, &small()).unwrap();
        assert_ne!(a.t1, c.t1);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = small();
        p.size = 100;
        assert!(gen_scene(0, &p).is_err());
        let mut p = small();
        p.transition_mix = vec![0.0; 11];
        assert!(gen_scene(0, &p).is_err());
        let mut p = small();
        p.transition_mix[3] = -1.0;
        assert!(gen_scene(0, &p).is_err());
    }

    #[test]
    fn tiling_grid() {
        let big = gen_scene(
            3,
            &SceneParams {
                size: 512,
                ..SceneParams::default()
            },
        )
        .unwrap();
        let tiles = tile(&big, 256).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[3].id, format!("{}_r1_c1", big.id));
        assert_eq!(tiles[3].t1.get(2, 0, 0), big.t1.get(2, 256, 256));

        let one = gen_scene(4, &SceneParams::default()).unwrap();
        let same = tile(&one, 256).unwrap();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].t1, one.t1);
        assert_eq!(same[0].label, one.label);
        assert!(tile(&one, 100).is_err());
        assert!(tile(&one, 512).is_err());
    }

    #[test]
    fn remainder_is_dropped() {
        let base = gen_scene(5, &SceneParams::default()).unwrap();
        let grow = |r: &Raster<u8>| {
            let mut out = Raster::filled(r.channels, 300, 300, 0u8);
            for c in 0..r.channels {
                for y in 0..300 {
                    for x in 0..300 {
                        out.set(c, y, x, r.get(c, y % 256, x % 256));
                    }
                }
            }
            out
        };
        let pair = ScenePair {
            t1: grow(&base.t1),
            t2: grow(&base.t2),
            label: grow(&base.label),
            ..base.clone()
        };
        let tiles = tile(&pair, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].t1, base.t1);
    }
}
