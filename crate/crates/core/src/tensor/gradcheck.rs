use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{ensure, Result};

fn evaluate<F>(f: &F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(g.value(out).len() == 1, "gradient check needs a scalar function");
    Ok(g.value(out).data()[0])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare reverse-mode gradients against central differences on every
/// coordinate of every input. Returns the largest relative error.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, point, h, usize::MAX, 0)
}

/// As [`grad_check`], probing at most `per_input` seeded coordinates of each input.
pub fn grad_check_sampled<F>(f: F, point: &[Tensor<f64>], h: f64, per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = point[i].len();
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for j in coords {
            let orig = point[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check_screened`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenedCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates dropped because the step straddles a kink.
    pub skipped: usize,
}

fn central<F>(f: &F, probe: &mut [Tensor<f64>], i: usize, j: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let orig = probe[i].data()[j];
    probe[i].data_mut()[j] = orig + h;
    let up = evaluate(f, probe)?;
    probe[i].data_mut()[j] = orig - h;
    let down = evaluate(f, probe)?;
    probe[i].data_mut()[j] = orig;
    Ok((up - down) / (2.0 * h))
}

/// Sampled check for piecewise-smooth functions. A coordinate counts only
/// when the central differences at `h` and `h/2` agree within `screen`;
/// otherwise a ReLU or absolute-value kink lies inside the step and another
/// coordinate is drawn. The screen never looks at the analytic gradient.
pub fn grad_check_screened<F>(
    f: F,
    point: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    screen: f64,
    seed: u64,
) -> Result<ScreenedCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ScreenedCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = point[i].len();
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let order = sample(&mut rng, n, n.min(4 * per_input)).into_vec();
        let mut taken = 0;
        for j in order {
            if taken == per_input {
                break;
            }
            let coarse = central(&f, &mut probe, i, j, h)?;
            let fine = central(&f, &mut probe, i, j, h / 2.0)?;
            if rel_err(coarse, fine) > screen {
                report.skipped += 1;
                continue;
            }
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], coarse));
            report.checked += 1;
            taken += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_sum_is_exact() {
        // dyadic values keep every sum exact
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[3, 4], 2.0, &mut rng).map(|v| (v * 8.0).round() / 8.0);
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.5).unwrap();
        assert_eq!(err, 0.0);
    }
}
