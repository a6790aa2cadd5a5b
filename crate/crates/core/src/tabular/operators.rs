use ndarray::{Array, Array1, Array2, ArrayView1, ArrayView2, Dimension, Zip};

use super::{TabularMdp, TabularPolicy};
use crate::error::{Error, Result};

/// Sup-norm step size at which [`fixed_point`] callers usually stop.
pub const DEFAULT_TOL: f64 = 1e-10;

/// `T^pi Q = r + gamma E_{s'} E_{a' ~ pi} Q(s', a')`.
pub fn bellman_expectation(mdp: &TabularMdp, q: ArrayView2<f64>, pi: &TabularPolicy) -> Result<Array2<f64>> {
    mdp.check_q(q)?;
    pi.check(mdp)?;
    Ok(mdp.backup(pi.expect(q).view()))
}

/// `T* Q = r + gamma E_{s'} max_a' Q(s', a')`.
pub fn bellman_optimality(mdp: &TabularMdp, q: ArrayView2<f64>) -> Result<Array2<f64>> {
    mdp.check_q(q)?;
    let v = q.map_axis(ndarray::Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
    Ok(mdp.backup(v.view()))
}

/// `max_{0 <= n <= horizon} (T^mu)^n T^pi Q`.
pub fn planning_operator(
    mdp: &TabularMdp,
    q: ArrayView2<f64>,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
    horizon: usize,
) -> Result<Array2<f64>> {
    Ok(planning_operator_with_argmax(mdp, q, pi, mu, horizon)?.0)
}

/// Planning operator plus the maximizing `n` per entry (smallest on ties).
pub fn planning_operator_with_argmax(
    mdp: &TabularMdp,
    q: ArrayView2<f64>,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
    horizon: usize,
) -> Result<(Array2<f64>, Array2<usize>)> {
    mu.check(mdp)?;
    let mut x = bellman_expectation(mdp, q, pi)?;
    let mut best = x.clone();
    let mut arg = Array2::zeros(x.raw_dim());
    for n in 1..=horizon {
        x = mdp.backup(mu.expect(x.view()).view());
        Zip::from(&mut best).and(&mut arg).and(&x).for_each(|b, k, &v| {
            if v > *b {
                *b = v;
                *k = n;
            }
        });
    }
    Ok((best, arg))
}

/// Expectile V-backup over a deterministic MDP:
/// `E_{a ~ mu}[w (y - V(s)) + V(s)]` with `y = r + gamma V(s')` and
/// `w = tau` above `V(s)`, `1 - tau` below.
pub fn vem_operator(mdp: &TabularMdp, v: ArrayView1<f64>, mu: &TabularPolicy, tau: f64) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("expectile {tau} outside [0, 1)")));
    }
    if v.len() != mdp.n_states {
        return Err(Error::shape("V-table", mdp.n_states, v.len()));
    }
    mu.check(mdp)?;
    let mut out = Array1::zeros(mdp.n_states);
    for s in 0..mdp.n_states {
        let mut acc = 0.0;
        for a in 0..mdp.n_actions {
            let next = mdp.successor(s, a)?;
            let boot = if mdp.terminal[next] { 0.0 } else { v[next] };
            let y = mdp.reward(s, a) + mdp.gamma * boot;
            let blended = if y >= v[s] {
                tau * y + (1.0 - tau) * v[s]
            } else {
                (1.0 - tau) * y + tau * v[s]
            };
            acc += mu.probs[[s, a]] * blended;
        }
        out[s] = acc;
    }
    Ok(out)
}

/// `r + gamma E_{s'} E[max of n i.i.d. mu-draws of Q(s', .)]`, evaluated
/// exactly from the order statistics of the finite action set.
pub fn emaq_target(mdp: &TabularMdp, q: ArrayView2<f64>, mu: &TabularPolicy, n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::invalid("EMaQ needs at least one sample"));
    }
    mdp.check_q(q)?;
    mu.check(mdp)?;
    let v: Array1<f64> = q
        .outer_iter()
        .zip(mu.probs.outer_iter())
        .map(|(qs, ps)| expected_max(qs, ps, n))
        .collect();
    Ok(mdp.backup(v.view()))
}

/// `E[max_i q(A_i)]` for `n` independent draws `A_i ~ p`.
fn expected_max(q: ArrayView1<f64>, p: ArrayView1<f64>, n: usize) -> f64 {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| q[i].total_cmp(&q[j]));
    let exponent = i32::try_from(n).unwrap_or(i32::MAX);
    let (mut cdf, mut prev, mut total) = (0.0, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        cdf += p[i];
        // The top value takes whatever mass rounding left over, so the
        // weights sum to exactly one even for huge `n`.
        let now = if rank + 1 == order.len() {
            1.0
        } else {
            cdf.min(1.0).powi(exponent)
        };
        total += q[i] * (now - prev);
        prev = now;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint<D: Dimension> {
    pub value: Array<f64, D>,
    pub iterations: usize,
    pub residual: f64,
}

/// Iterates `op` from `init` until the sup-norm step falls below `tol`.
pub fn fixed_point<D, F>(init: Array<f64, D>, mut op: F, tol: f64, max_iters: usize) -> Result<FixedPoint<D>>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> Result<Array<f64, D>>,
{
    let mut value = init;
    let mut residual = f64::INFINITY;
    for iterations in 1..=max_iters {
        let next = op(&value)?;
        residual = sup_distance(&next, &value);
        value = next;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return Ok(FixedPoint {
                value,
                iterations,
                residual,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual,
    })
}

pub(crate) fn sup_distance<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |m: f64, &x, &y| m.max((x - y).abs()))
}
