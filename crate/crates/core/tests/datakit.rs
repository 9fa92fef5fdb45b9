use mfdcd::datakit::{gen_scene, SceneParams, CLASS_COUNT};

const SCENES: u64 = 100;

#[test]
fn changed_area_tracks_the_budget() {
    for budget in [0.1, 0.25, 0.4] {
        let params = SceneParams {
            area_budget: budget,
            ..SceneParams::default()
        };
        let mut changed = 0usize;
        let mut total = 0usize;
        for seed in 0..SCENES {
            let s = gen_scene(seed, &params).unwrap();
            changed += s.label.data.iter().filter(|&&v| v != 0).count();
            total += s.label.data.len();
        }
        let frac = changed as f64 / total as f64;
        assert!(
            (frac - budget).abs() <= 0.2 * budget,
            "budget {budget}: measured {frac:.4}"
        );
    }
}

#[test]
fn changed_regions_differ_between_dates() {
    let params = SceneParams::default();
    let mut seen = [false; CLASS_COUNT];
    for seed in 0..SCENES {
        let s = gen_scene(seed, &params).unwrap();
        let plane = s.label.plane();
        let mut differ = [0usize; CLASS_COUNT];
        let mut area = [0usize; CLASS_COUNT];
        for (i, &k) in s.label.data.iter().enumerate() {
            assert!((k as usize) < CLASS_COUNT);
            area[k as usize] += 1;
            if (0..3).any(|c| s.t1.data[c * plane + i] != s.t2.data[c * plane + i]) {
                differ[k as usize] += 1;
            }
        }
        for k in (1..CLASS_COUNT).filter(|&k| area[k] > 0) {
            seen[k] = true;
            let frac = differ[k] as f64 / area[k] as f64;
            assert!(
                frac > 0.9,
                "scene {seed}, class {k}: only {frac:.3} of its pixels differ"
            );
        }
    }
    assert!(seen[1..].iter().all(|&s| s), "some change class never drawn");
}
