//! Log-domain Sinkhorn iterations for entropy-regularized optimal transport.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::log_sum_exp;
use crate::numerics::Matrix;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const MIN_EPSILON: f64 = 1e-6;

const WARM_START_RATIO: f64 = 16.0;
const WARM_START_SWEEPS: usize = 50;
const WARM_START_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    /// `<C, π>`.
    pub cost: f64,
    /// `<C, π> - ε H(π)`.
    pub entropic_objective: f64,
    /// `H(π) = -Σ π log π`.
    pub entropy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute row- or column-sum violation of the returned plan.
    pub marginal_error: f64,
}

/// Per-sweep diagnostics from [`sinkhorn_traced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    /// Dual value `<f, a> + <g, b> - ε Σ exp((f_i + g_j - C_ij)/ε) + ε`.
    pub dual: f64,
    /// Entropic objective of the current (column-feasible) plan.
    pub primal: f64,
    pub row_violation: f64,
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(shape_err!("marginal {name} has {} entries, expected {len}", m.len()));
    }
    if m.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Input(format!("marginal {name} must be strictly positive")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("marginal {name} sums to {s}")));
    }
    Ok(())
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Solves `min <C, π> - ε H(π)` subject to `π 1 = a`, `πᵀ 1 = b`.
pub fn sinkhorn(c: &Matrix, epsilon: f64, a: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<TransportPlan> {
    run(c, epsilon, a, b, tol, max_iter, None)
}

/// [`sinkhorn`] with uniform marginals and default tolerance and iteration cap.
pub fn sinkhorn_uniform(c: &Matrix, epsilon: f64) -> Result<TransportPlan> {
    let (a, b) = (uniform_marginal(c.rows()), uniform_marginal(c.cols()));
    sinkhorn(c, epsilon, &a, &b, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// [`sinkhorn`] that also records one [`SweepStats`] per iteration.
pub fn sinkhorn_traced(
    c: &Matrix,
    epsilon: f64,
    a: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(TransportPlan, Vec<SweepStats>)> {
    let mut trace = Vec::new();
    let plan = run(c, epsilon, a, b, tol, max_iter, Some(&mut trace))?;
    Ok((plan, trace))
}

fn plan_from(c: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Matrix {
    let (n, m) = c.shape();
    let mut p = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            p[(i, j)] = ((f[i] + g[j] - c[(i, j)]) / eps).exp();
        }
    }
    p
}

fn max_violation(sums: &[f64], target: &[f64]) -> f64 {
    sums.iter().zip(target).map(|(s, t)| (s - t).abs()).fold(0.0, f64::max)
}

fn plan_entropy(p: &Matrix) -> f64 {
    -p.data().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn inner(c: &Matrix, p: &Matrix) -> f64 {
    c.data().iter().zip(p.data()).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
fn run(
    c: &Matrix,
    eps: f64,
    a: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
    mut trace: Option<&mut Vec<SweepStats>>,
) -> Result<TransportPlan> {
    let (n, m) = c.shape();
    if n == 0 || m == 0 {
        return Err(Error::Input("empty cost matrix".into()));
    }
    if !c.is_finite() {
        return Err(Error::Input("non-finite transport cost".into()));
    }
    if !(eps >= MIN_EPSILON) || !eps.is_finite() {
        return Err(Error::Parameter(format!("epsilon {eps} below {MIN_EPSILON}")));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Parameter("tolerance and iteration cap must be positive".into()));
    }
    check_marginal("a", a, n)?;
    check_marginal("b", b, m)?;
    let (log_a, log_b): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| x.ln()).collect(), b.iter().map(|x| x.ln()).collect());

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut sweep = |f: &mut [f64], g: &mut [f64], eps: f64| -> f64 {
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - c[(i, j)]) / eps;
            }
            f[i] = eps * log_a[i] - eps * log_sum_exp(&buf[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - c[(i, j)]) / eps;
            }
            g[j] = eps * log_b[j] - eps * log_sum_exp(&buf[..n]);
        }
        // Columns are exact after the g-update; rows measure progress.
        let rows: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| ((f[i] + g[j] - c[(i, j)]) / eps).exp()).sum())
            .collect();
        max_violation(&rows, a)
    };

    // Epsilon scaling: when eps is far below the cost spread, plain sweeps
    // from zero duals crawl, so warm-start the duals on a halving ladder.
    let mut iterations = 0;
    let spread = c.data().iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y))
        - c.data().iter().fold(f64::INFINITY, |x, &y| x.min(y));
    let stages = if spread > WARM_START_RATIO * eps { (spread / eps).log2().floor() as i32 } else { 0 };
    for s in (1..=stages).rev() {
        let level = eps * 2f64.powi(s);
        for _ in 0..WARM_START_SWEEPS {
            if iterations + 1 >= max_iter {
                break;
            }
            iterations += 1;
            if sweep(&mut f, &mut g, level) < WARM_START_TOL {
                break;
            }
        }
    }

    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let violation = sweep(&mut f, &mut g, eps);
        if let Some(t) = trace.as_deref_mut() {
            let p = plan_from(c, &f, &g, eps);
            let mass: f64 = p.data().iter().sum();
            let dual = f.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + g.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                - eps * mass
                + eps;
            t.push(SweepStats {
                dual,
                primal: inner(c, &p) - eps * plan_entropy(&p),
                row_violation: violation,
            });
        }
        if !violation.is_finite() {
            return Err(Error::Numeric("sinkhorn iterates diverged".into()));
        }
        if violation < tol {
            converged = true;
            break;
        }
    }

    let plan = plan_from(c, &f, &g, eps);
    let marginal_error = max_violation(&plan.row_sums(), a).max(max_violation(&plan.column_sums(), b));
    let cost = inner(c, &plan);
    let entropy = plan_entropy(&plan);
    Ok(TransportPlan {
        plan,
        cost,
        entropic_objective: cost - eps * entropy,
        entropy,
        iterations,
        converged,
        marginal_error,
    })
}
