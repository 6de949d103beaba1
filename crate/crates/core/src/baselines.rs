//! Classical single-frame reconstructions: zeroth-order Tikhonov and
//! gradient-descent spatial TV.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward_project, SensitivityMatrix, VoltageSequence};
use crate::phantom::ConductivitySequence;
use crate::regularizers::spatial_tv_grad;
use crate::volume::{devectorize, Dims3};

/// Accepted range for a configured Tikhonov weight.
pub const MU_GUARD: (f64, f64) = (1e-6, 1e2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TikhonovConfig {
    pub mu: f64,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        Self { mu: 0.005 }
    }
}

impl TikhonovConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= MU_GUARD.0 && mu <= MU_GUARD.1) {
            return Err(Error::invalid(format!(
                "tikhonov mu {mu} outside [{}, {}]",
                MU_GUARD.0, MU_GUARD.1
            )));
        }
        Ok(Self { mu })
    }
}

/// Ten evenly spaced weights spanning 0.001 to 0.01.
pub fn default_mu_sweep() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 1000.0).collect()
}

/// Reusable solver for `(J^T J + mu I) x = J^T dv`.
///
/// When `M < Q` the equivalent dual system `(J J^T + mu I) y = dv`,
/// `x = J^T y` is factored instead, which is much smaller.
pub struct TikhonovSolver<'a> {
    j: &'a SensitivityMatrix,
    gram: DMatrix<f64>,
    dual: bool,
}

pub struct TikhonovFactor<'a> {
    solver: &'a TikhonovSolver<'a>,
    chol: Cholesky<f64, Dyn>,
    mu: f64,
}

impl<'a> TikhonovSolver<'a> {
    pub fn new(j: &'a SensitivityMatrix) -> Self {
        let (m, q) = (j.rows(), j.cols());
        let dual = m < q;
        let n = if dual { m } else { q };
        let mut gram = DMatrix::<f64>::zeros(n, n);
        if dual {
            for a in 0..m {
                let ra = j.row(a);
                for b in a..m {
                    let v: f64 = ra.iter().zip(j.row(b)).map(|(x, y)| x * y).sum();
                    gram[(a, b)] = v;
                    gram[(b, a)] = v;
                }
            }
        } else {
            for i in 0..m {
                let row = j.row(i);
                for a in 0..q {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..q {
                        gram[(a, b)] += ra * row[b];
                    }
                }
            }
            for a in 0..q {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
        }
        Self { j, gram, dual }
    }

    pub fn factor(&self, mu: f64) -> Result<TikhonovFactor<'_>> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::invalid(format!("tikhonov mu must be positive, got {mu}")));
        }
        let mut a = self.gram.clone();
        for k in 0..a.nrows() {
            a[(k, k)] += mu;
        }
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::numerical("tikhonov", "regularized normal matrix is not positive definite"))?;
        Ok(TikhonovFactor {
            solver: self,
            chol,
            mu,
        })
    }
}

impl TikhonovFactor<'_> {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn solve(&self, dv: &[f64]) -> Result<Vec<f64>> {
        let j = self.solver.j;
        if dv.len() != j.rows() {
            return Err(Error::invalid(format!(
                "tikhonov expects {} measurements, got {}",
                j.rows(),
                dv.len()
            )));
        }
        let x = if self.solver.dual {
            let y = self.chol.solve(&DVector::from_column_slice(dv));
            j.adjoint(y.as_slice())?
        } else {
            let rhs = DVector::from_vec(j.adjoint(dv)?);
            self.chol.solve(&rhs).as_slice().to_vec()
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("tikhonov", "solution has non-finite entries"));
        }
        Ok(x)
    }
}

/// `argmin ||Jx - dv||^2 + mu ||x||^2`.
pub fn tikhonov(j: &SensitivityMatrix, dv: &[f64], cfg: &TikhonovConfig) -> Result<Vec<f64>> {
    TikhonovSolver::new(j).factor(cfg.mu)?.solve(dv)
}

pub fn tikhonov_sequence(
    j: &SensitivityMatrix,
    v: &VoltageSequence,
    cfg: &TikhonovConfig,
    dims: Dims3,
) -> Result<ConductivitySequence> {
    let solver = TikhonovSolver::new(j);
    let factor = solver.factor(cfg.mu)?;
    let frames = v
        .frames
        .iter()
        .map(|f| factor.solve(&f.values))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = ConductivitySequence::new(dims, frames, v.reference_mode)?;
    seq.method = Some(format!("tikhonov(mu={})", cfg.mu));
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TVConfig {
    pub lambda_tv: f64,
    pub iterations: usize,
    /// Initial trial step of the backtracking line search.
    pub step_size: f64,
    pub epsilon: f64,
}

impl Default for TVConfig {
    fn default() -> Self {
        Self {
            lambda_tv: 0.002,
            iterations: 300,
            step_size: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl TVConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || !(self.step_size.is_finite() && self.step_size > 0.0)
            || !(self.lambda_tv.is_finite() && self.lambda_tv >= 0.0)
            || !(self.epsilon.is_finite() && self.epsilon > 0.0)
        {
            return Err(Error::invalid(format!("invalid TV config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvResult {
    pub x: Vec<f64>,
    /// Objective before each iteration, then after the last one.
    pub trace: Vec<f64>,
}

fn tv_objective(j: &SensitivityMatrix, dv: &[f64], x: &[f64], dims: Dims3, cfg: &TVConfig, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let jx = forward_project(j, x)?;
    let resid: Vec<f64> = jx.iter().zip(dv).map(|(a, b)| a - b).collect();
    let norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
    let vol = devectorize(x, dims)?;
    let reg = spatial_tv_grad(&vol, cfg.epsilon);
    let value = norm + cfg.lambda_tv * reg.value;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let mut grad = if norm > 0.0 {
        let scaled: Vec<f64> = resid.iter().map(|r| r / norm).collect();
        j.adjoint(&scaled)?
    } else {
        vec![0.0; x.len()]
    };
    for (g, r) in grad.iter_mut().zip(&reg.grad) {
        *g += cfg.lambda_tv * r;
    }
    Ok((value, grad))
}

/// Minimizes `||Jx - dv||_2 + lambda * R_spatial(x)` by gradient descent with
/// Armijo backtracking, starting from zero, for a fixed iteration budget.
pub fn tv_reconstruct(j: &SensitivityMatrix, dv: &[f64], dims: Dims3, cfg: &TVConfig) -> Result<TvResult> {
    cfg.validate()?;
    if dv.len() != j.rows() || dims.len() != j.cols() {
        return Err(Error::invalid("tv_reconstruct: operator, data and grid disagree"));
    }
    const ARMIJO: f64 = 0.5;
    let mut x = vec![0.0; j.cols()];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut step = cfg.step_size;
    for it in 0..cfg.iterations {
        let (f, g) = tv_objective(j, dv, &x, dims, cfg, true)?;
        if !f.is_finite() {
            return Err(Error::numerical("tv_reconstruct", format!("non-finite loss at iteration {it}")));
        }
        trace.push(f);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            continue;
        }
        let mut t = (2.0 * step).min(cfg.step_size);
        loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let (ft, _) = tv_objective(j, dv, &trial, dims, cfg, false)?;
            if ft <= f - ARMIJO * t * g2 {
                x = trial;
                step = t;
                break;
            }
            t *= 0.5;
            if t < 1e-30 {
                break;
            }
        }
    }
    let (f, _) = tv_objective(j, dv, &x, dims, cfg, false)?;
    if !f.is_finite() {
        return Err(Error::numerical("tv_reconstruct", format!("non-finite loss at iteration {}", cfg.iterations)));
    }
    trace.push(f);
    Ok(TvResult { x, trace })
}

pub fn tv_sequence(
    j: &SensitivityMatrix,
    v: &VoltageSequence,
    cfg: &TVConfig,
    dims: Dims3,
) -> Result<ConductivitySequence> {
    let frames = v
        .frames
        .iter()
        .map(|f| tv_reconstruct(j, &f.values, dims, cfg).map(|r| r.x))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = ConductivitySequence::new(dims, frames, v.reference_mode)?;
    seq.method = Some(format!("tv(lambda={})", cfg.lambda_tv));
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> SensitivityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        SensitivityMatrix::from_rows(rows, cols, values).unwrap()
    }

    /// Primal normal equations solved by Gaussian elimination with partial pivoting.
    fn normal_equations_oracle(j: &SensitivityMatrix, dv: &[f64], mu: f64) -> Vec<f64> {
        let (m, q) = (j.rows(), j.cols());
        let mut a = vec![vec![0.0; q + 1]; q];
        for r in 0..q {
            for c in 0..q {
                a[r][c] = (0..m).map(|i| j.get(i, r) * j.get(i, c)).sum::<f64>();
            }
            a[r][r] += mu;
            a[r][q] = (0..m).map(|i| j.get(i, r) * dv[i]).sum::<f64>();
        }
        for col in 0..q {
            let piv = (col..q).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in col + 1..q {
                let f = a[r][col] / a[col][col];
                for c in col..=q {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut x = vec![0.0; q];
        for r in (0..q).rev() {
            let s: f64 = (r + 1..q).map(|c| a[r][c] * x[c]).sum();
            x[r] = (a[r][q] - s) / a[r][r];
        }
        x
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn identity_system() {
        let j = SensitivityMatrix::identity(2);
        let x = tikhonov(&j, &[1.0, 1.0], &TikhonovConfig::new(1.0).unwrap()).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_mu_shrinks() {
        let j = random_matrix(6, 10, 2);
        let dv: Vec<f64> = (0..6).map(|k| k as f64 - 2.5).collect();
        let x = TikhonovSolver::new(&j).factor(1e6).unwrap().solve(&dv).unwrap();
        let bound = j.adjoint(&dv).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt() / 1e6;
        assert!(x.iter().map(|v| v * v).sum::<f64>().sqrt() <= bound);
    }

    #[test]
    fn matches_normal_equations_both_shapes() {
        for (m, q, seed) in [(6, 10, 1), (10, 6, 2), (8, 8, 3)] {
            let j = random_matrix(m, q, seed);
            let dv: Vec<f64> = (0..m).map(|k| (k as f64 * 1.3).sin()).collect();
            let got = tikhonov(&j, &dv, &TikhonovConfig::new(0.005).unwrap()).unwrap();
            let want = normal_equations_oracle(&j, &dv, 0.005);
            assert!(rel_err(&got, &want) < 1e-8);
        }
    }

    #[test]
    fn guard_range() {
        assert!(TikhonovConfig::new(1e-7).is_err());
        assert!(TikhonovConfig::new(1e3).is_err());
        assert!(TikhonovConfig::new(0.001).is_ok());
        assert_eq!(TikhonovConfig::default().mu, 0.005);
        let sweep = default_mu_sweep();
        assert_eq!(sweep.len(), 10);
        assert!((sweep[0] - 0.001).abs() < 1e-15 && (sweep[9] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn solution_is_linear_in_data() {
        let j = random_matrix(12, 30, 4);
        let dv: Vec<f64> = (0..12).map(|k| (k as f64).cos()).collect();
        let solver = TikhonovSolver::new(&j);
        let f = solver.factor(0.003).unwrap();
        let x = f.solve(&dv).unwrap();
        let scaled: Vec<f64> = dv.iter().map(|v| -2.5 * v).collect();
        let xs = f.solve(&scaled).unwrap();
        let want: Vec<f64> = x.iter().map(|v| -2.5 * v).collect();
        assert!(rel_err(&xs, &want) < 1e-10);
    }

    #[test]
    fn residual_shrinks_with_mu() {
        let j = random_matrix(15, 40, 5);
        let dv: Vec<f64> = (0..15).map(|k| (k as f64 * 0.4).sin()).collect();
        let solver = TikhonovSolver::new(&j);
        let mut prev = f64::INFINITY;
        for mu in [0.01, 0.005, 0.001] {
            let x = solver.factor(mu).unwrap().solve(&dv).unwrap();
            let r = forward_project(&j, &x).unwrap();
            let res = r.iter().zip(&dv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(res <= prev);
            prev = res;
        }
    }

    #[test]
    fn tv_without_regularization_recovers_identity_data() {
        let dims = Dims3::new(2, 2, 2);
        let j = SensitivityMatrix::identity(8);
        let dv: Vec<f64> = (0..8).map(|k| 0.1 * k as f64 - 0.3).collect();
        let cfg = TVConfig { lambda_tv: 0.0, iterations: 200, step_size: 1.0, ..TVConfig::default() };
        let res = tv_reconstruct(&j, &dv, dims, &cfg).unwrap();
        assert!(rel_err(&res.x, &dv) <= 1e-3);
    }

    #[test]
    fn tv_with_zero_data_goes_to_zero() {
        let dims = Dims3::new(2, 3, 2);
        let j = random_matrix(10, 12, 9);
        let cfg = TVConfig { lambda_tv: 0.5, iterations: 50, ..TVConfig::default() };
        let res = tv_reconstruct(&j, &[0.0; 10], dims, &cfg).unwrap();
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.x.iter().all(|v| v.abs() < 1e-12));
        let floor = 0.5 * (1e-8f64).sqrt();
        assert!((res.trace.last().unwrap() - floor).abs() < 1e-9);
    }

    #[test]
    fn tv_trace_is_nonincreasing() {
        let dims = Dims3::new(3, 3, 2);
        let j = random_matrix(12, 18, 10);
        let dv: Vec<f64> = (0..12).map(|k| (k as f64 * 0.9).sin()).collect();
        let res = tv_reconstruct(&j, &dv, dims, &TVConfig { iterations: 80, ..TVConfig::default() }).unwrap();
        assert!(res.trace[10..].windows(2).all(|w| w[1] <= w[0]));
    }
}
