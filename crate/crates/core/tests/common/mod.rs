//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use sfbc::numerics::{mse_loss, Mlp};
use sfbc::Result;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Relative error `|g - fd| / max(|g|, |fd|, floor)` of the analytic gradient
/// at `probes` randomly chosen parameter entries, against central differences
/// of `loss`.
pub fn gradient_probe_errors<R: Rng>(
    net: &Mlp,
    analytic: &sfbc::numerics::MlpParams,
    loss: impl Fn(&Mlp) -> Result<f64>,
    probes: usize,
    rng: &mut R,
) -> Vec<f64> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let total = net.params.num_params();
    let flat_grad: Vec<f64> = analytic.iter().copied().collect();
    (0..probes)
        .map(|_| {
            let idx = rng.random_range(0..total);
            let shifted = |delta: f64| {
                let mut probe = net.clone();
                *probe.params.iter_mut().nth(idx).unwrap() += delta;
                loss(&probe).unwrap()
            };
            let fd = (shifted(H) - shifted(-H)) / (2.0 * H);
            let g = flat_grad[idx];
            (g - fd).abs() / g.abs().max(fd.abs()).max(FLOOR)
        })
        .collect()
}

/// Mean squared error of `net` on a regression batch, computed from a plain
/// forward pass.
pub fn forward_mse(net: &Mlp, inputs: ArrayView2<f64>, targets: &[f64]) -> Result<f64> {
    let out = net.forward_batch(inputs)?;
    let n = targets.len() as f64;
    Ok(out.iter().zip(targets).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n)
}

pub fn mse_gradients(net: &Mlp, inputs: ArrayView2<f64>, targets: &[f64]) -> Result<sfbc::numerics::MlpParams> {
    Ok(net.gradients(inputs, mse_loss(targets))?.1)
}

/// Planning targets by direct recursion on one episode, written from the
/// definition: the last step keeps its reward, earlier steps add the
/// discounted better of the next target and the next state value.
pub fn planned_episode(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    fn target(n: usize, rewards: &[f64], values: &[f64], gamma: f64) -> f64 {
        if n + 1 == rewards.len() {
            rewards[n]
        } else {
            let next = target(n + 1, rewards, values, gamma);
            rewards[n] + gamma * if next > values[n + 1] { next } else { values[n + 1] }
        }
    }
    (0..rewards.len()).map(|n| target(n, rewards, values, gamma)).collect()
}

/// Pearson chi-square test p-value of `counts` against equal cell
/// probabilities.
pub fn uniform_chi_square_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Synthetic state-independent data: a dummy zero state and 1-D actions
/// drawn from two equally weighted narrow modes at `+-mode`.
pub fn bimodal_transitions<R: Rng>(n: usize, mode: f64, spread: f64, rng: &mut R) -> sfbc::data::Transitions {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, spread).unwrap();
    let mut data = sfbc::data::Transitions::from_rewards(&vec![0.0; n], &vec![true; n]);
    data.actions = Array2::from_shape_fn((n, 1), |_| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        (sign * mode + noise.sample(rng)).clamp(-1.0, 1.0)
    });
    data
}

/// Fraction of samples in `|a| < 0.2`, and on each side of zero.
pub fn bimodal_masses(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let centre = samples.iter().filter(|a| a.abs() < 0.2).count() as f64 / n;
    let neg = samples.iter().filter(|&&a| a <= -0.2).count() as f64 / n;
    let pos = samples.iter().filter(|&&a| a >= 0.2).count() as f64 / n;
    (centre, neg, pos)
}
