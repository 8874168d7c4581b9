//! Per-node LASSO over a neighbor dictionary.
//!
//! The objective is `‖t − Vα‖² + λ‖α‖₁` with no ½ on the squared error, so
//! the coordinate-descent threshold is `λ/2` and an ISTA step with step size
//! `η` is `α ← S(α + 2ηVᵀ(t − Vα), ηλ)`.

use crate::error::{Error, Result};

/// `sign(x)·max(|x| − τ, 0)`.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Target `t`, dictionary columns `v_j` (each of length `t.len()`) and ℓ1 weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoProblem {
    pub t: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl LassoProblem {
    pub fn new(t: Vec<f64>, columns: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
        }
        if let Some((j, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != t.len()) {
            return Err(Error::dim("lasso", format!("column {j} has length {}, target {}", c.len(), t.len())));
        }
        if t.iter().chain(columns.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lasso dictionary".into()));
        }
        Ok(Self { t, columns, lambda })
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    /// `t − Vα`.
    pub fn residual(&self, alpha: &[f64]) -> Vec<f64> {
        let mut r = self.t.clone();
        for (c, a) in self.columns.iter().zip(alpha) {
            for (ri, ci) in r.iter_mut().zip(c) {
                *ri -= a * ci;
            }
        }
        r
    }

    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let r = self.residual(alpha);
        dot(&r, &r) + self.lambda * alpha.iter().map(|a| a.abs()).sum::<f64>()
    }

    /// `Vᵀ u`.
    fn vt(&self, u: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, u)).collect()
    }

    /// Largest eigenvalue of `VᵀV` from `iters` power iterations started at the all-ones vector.
    pub fn gram_spectral_estimate(&self, iters: usize) -> f64 {
        let k = self.k();
        if k == 0 {
            return 0.0;
        }
        let mut x = vec![1.0 / (k as f64).sqrt(); k];
        let mut est = 0.0;
        for _ in 0..iters {
            let vx = {
                let mut acc = vec![0.0; self.dim()];
                for (c, a) in self.columns.iter().zip(&x) {
                    for (o, ci) in acc.iter_mut().zip(c) {
                        *o += a * ci;
                    }
                }
                acc
            };
            let y = self.vt(&vx);
            let norm = dot(&y, &y).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            est = norm;
            x = y.into_iter().map(|v| v / norm).collect();
        }
        est
    }

    /// `1 / (2·λ_max(VᵀV))`, the reciprocal Lipschitz constant of the smooth
    /// part's gradient.
    pub fn default_step_size(&self) -> f64 {
        let l = self.gram_spectral_estimate(10);
        if l > 0.0 {
            1.0 / (2.0 * l)
        } else {
            1.0
        }
    }
}

/// Coefficients aligned with a node's selected neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode {
    pub neighbor_ids: Vec<usize>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl SparseCode {
    pub fn empty(lambda: f64) -> Self {
        Self {
            neighbor_ids: Vec::new(),
            alpha: Vec::new(),
            lambda,
            converged: true,
            iterations: 0,
        }
    }

    pub fn with_neighbors(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.alpha.len() {
            return Err(Error::dim("sparse code", format!("{} ids for {} coefficients", ids.len(), self.alpha.len())));
        }
        self.neighbor_ids = ids;
        Ok(self)
    }

    pub fn l1(&self) -> f64 {
        self.alpha.iter().map(|a| a.abs()).sum()
    }

    pub fn support(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .zip(&self.neighbor_ids)
            .filter(|(a, _)| **a != 0.0)
            .map(|(_, id)| *id)
            .collect()
    }
}

/// Cyclic coordinate descent to a coordinate-change tolerance.
///
/// Zero-norm columns stay at 0. Hitting `max_iter` sweeps returns the current
/// iterate with `converged = false`.
pub fn solve_lasso_cd(p: &LassoProblem, tol: f64, max_iter: usize) -> Result<SparseCode> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    let k = p.k();
    let ids: Vec<usize> = (0..k).collect();
    if k == 0 {
        return SparseCode::empty(p.lambda).with_neighbors(ids);
    }
    let norms: Vec<f64> = p.columns.iter().map(|c| dot(c, c)).collect();
    for (j, n) in norms.iter().enumerate() {
        if *n == 0.0 {
            log::warn!("dictionary column {j} has zero norm; its coefficient is fixed at 0");
        }
    }
    let mut alpha = vec![0.0; k];
    let mut r = p.t.clone();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_iter {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            if norms[j] == 0.0 {
                continue;
            }
            let c = &p.columns[j];
            let rho = dot(c, &r) + norms[j] * alpha[j];
            let new = soft_threshold(rho, p.lambda / 2.0) / norms[j];
            let delta = new - alpha[j];
            if delta != 0.0 {
                for (ri, ci) in r.iter_mut().zip(c) {
                    *ri -= delta * ci;
                }
                alpha[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    Ok(SparseCode {
        neighbor_ids: ids,
        alpha,
        lambda: p.lambda,
        converged,
        iterations: sweeps,
    })
}

/// Largest violation of the LASSO subgradient optimality conditions at `alpha`.
pub fn kkt_residual(p: &LassoProblem, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != p.k() {
        return Err(Error::dim("kkt_residual", format!("{} coefficients for {} columns", alpha.len(), p.k())));
    }
    let r = p.residual(alpha);
    let g: Vec<f64> = p.vt(&r).into_iter().map(|v| -2.0 * v).collect();
    Ok(g.iter()
        .zip(alpha)
        .map(|(gj, aj)| {
            if *aj != 0.0 {
                (gj + p.lambda * aj.signum()).abs()
            } else {
                (gj.abs() - p.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max))
}

/// `steps` unrolled ISTA iterations from `α = 0`. `step_size = None` uses
/// [`LassoProblem::default_step_size`].
pub fn approx_sparse_code(p: &LassoProblem, steps: usize, step_size: Option<f64>) -> Result<SparseCode> {
    if steps == 0 {
        return Err(Error::Parameter("at least one unrolled step is required".into()));
    }
    let eta = step_size.unwrap_or_else(|| p.default_step_size());
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("step size must be positive, got {eta}")));
    }
    let mut alpha = vec![0.0; p.k()];
    for _ in 0..steps {
        let r = p.residual(&alpha);
        let g = p.vt(&r);
        for (a, gj) in alpha.iter_mut().zip(g) {
            *a = soft_threshold(*a + 2.0 * eta * gj, eta * p.lambda);
        }
    }
    Ok(SparseCode {
        neighbor_ids: (0..p.k()).collect(),
        alpha,
        lambda: p.lambda,
        converged: false,
        iterations: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, k: usize, d: usize, lambda: f64) -> LassoProblem {
        let t = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        LassoProblem::new(t, cols, lambda).unwrap()
    }

    /// Grid minimizer over `[-3, 3]^k`: a coarse pass followed by repeated
    /// ten-fold refinements around the incumbent, down to `finest`. Every grid
    /// is aligned to multiples of its step so that 0 is always a candidate.
    fn grid_oracle(p: &LassoProblem, finest: f64) -> f64 {
        let k = p.k();
        let mut step: f64 = 0.25;
        let mut center = vec![0.0; k];
        let mut half: f64 = 3.0;
        let mut best = f64::INFINITY;
        loop {
            let n = (half / step).round() as i64;
            let base: Vec<f64> = center.iter().map(|c| (c / step).round() * step).collect();
            let mut idx = vec![-n; k];
            let mut arg = center.clone();
            'grid: loop {
                let a: Vec<f64> = base.iter().zip(&idx).map(|(b, i)| (b + *i as f64 * step).clamp(-3.0, 3.0)).collect();
                let f = p.objective(&a);
                if f < best {
                    best = f;
                    arg = a;
                }
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot <= n {
                        continue 'grid;
                    }
                    *slot = -n;
                }
                break;
            }
            center = arg;
            if step <= finest * 1.0001 {
                return best;
            }
            half = 2.0 * step;
            step /= 10.0;
        }
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(5.0, 2.0), 3.0);
        assert_eq!(soft_threshold(-1.0, 2.0), 0.0);
        assert_eq!(soft_threshold(-5.0, 2.0), -3.0);
    }

    #[test]
    fn large_lambda_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(&mut rng, 3, 4, 1.0);
        let max_corr = p.vt(&p.t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        p.lambda = 2.0 * max_corr;
        let s = solve_lasso_cd(&p, 1e-12, 1000).unwrap();
        assert!(s.alpha.iter().all(|a| *a == 0.0));
        assert_eq!(kkt_residual(&p, &s.alpha).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_dictionary_closed_form() {
        let t = vec![0.9, -0.3, 0.05, 2.0];
        let cols = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let p = LassoProblem::new(t, cols, 0.2).unwrap();
        let exact: Vec<f64> = p.vt(&p.t).iter().map(|c| soft_threshold(*c, 0.1)).collect();
        let s = solve_lasso_cd(&p, 1e-14, 100).unwrap();
        let a = approx_sparse_code(&p, 1, Some(0.5)).unwrap();
        for j in 0..3 {
            assert!((s.alpha[j] - exact[j]).abs() < 1e-12);
            assert!((a.alpha[j] - exact[j]).abs() < 1e-12);
        }
        assert!((p.default_step_size() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_target_and_bad_inputs() {
        let p = LassoProblem::new(vec![0.0; 3], vec![vec![1.0, 2.0, 0.0]], 0.1).unwrap();
        assert_eq!(approx_sparse_code(&p, 1, None).unwrap().alpha, vec![0.0]);
        assert!(approx_sparse_code(&p, 0, None).is_err());
        assert!(approx_sparse_code(&p, 2, Some(0.0)).is_err());
        assert!(LassoProblem::new(vec![1.0], vec![vec![1.0]], 0.0).is_err());
        assert!(solve_lasso_cd(&p, 0.0, 10).is_err());
    }

    #[test]
    fn zero_column_is_frozen_and_max_iter_flags() {
        let p = LassoProblem::new(vec![1.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, 0.0]], 0.1).unwrap();
        let s = solve_lasso_cd(&p, 1e-12, 100).unwrap();
        assert_eq!(s.alpha[0], 0.0);
        assert!(s.converged);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_problem(&mut rng, 4, 4, 0.01);
        assert!(!solve_lasso_cd(&q, 1e-15, 1).unwrap().converged);
    }

    #[test]
    fn empty_neighborhood_gives_empty_code() {
        let p = LassoProblem::new(vec![1.0, 2.0], vec![], 0.1).unwrap();
        let s = solve_lasso_cd(&p, 1e-9, 10).unwrap();
        assert!(s.alpha.is_empty() && s.neighbor_ids.is_empty());
    }

    #[test]
    fn matches_grid_oracle_on_three_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let p = random_problem(&mut rng, 3, 4, 0.1);
            let s = solve_lasso_cd(&p, 1e-13, 100_000).unwrap();
            let grid = grid_oracle(&p, 1e-3);
            let f = p.objective(&s.alpha);
            assert!((f - grid).abs() < 1e-4, "cd {f} grid {grid}");
            assert!(kkt_residual(&p, &s.alpha).unwrap() < 1e-6);
        }
    }

    #[test]
    fn unrolled_ista_approaches_exact_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 4, 16, 0.1);
            let exact = p.objective(&solve_lasso_cd(&p, 1e-13, 100_000).unwrap().alpha);
            let approx = p.objective(&approx_sparse_code(&p, 20, None).unwrap().alpha);
            assert!(approx <= exact * 1.05 + 1e-12, "approx {approx} exact {exact}");
        }
    }

    #[test]
    fn residual_grows_along_perturbation_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = random_problem(&mut rng, 4, 6, 0.05);
        let s = solve_lasso_cd(&p, 1e-14, 100_000).unwrap();
        // Perturb only the active coordinates, by amounts small enough to keep their signs.
        let dir: Vec<f64> = s.alpha.iter().map(|a| if *a != 0.0 { a.abs() * 0.1 } else { 0.0 }).collect();
        assert!(dir.iter().any(|d| *d != 0.0));
        let mut last = kkt_residual(&p, &s.alpha).unwrap();
        for step in 1..=10 {
            let a: Vec<f64> = s.alpha.iter().zip(&dir).map(|(a, d)| a + step as f64 * 0.1 * d).collect();
            let r = kkt_residual(&p, &a).unwrap();
            assert!(r > last, "step {step}: {r} <= {last}");
            last = r;
        }
    }

    /// Negative log density of `t ~ N(Vα, (σ²/2)·I)` with i.i.d. Laplace
    /// coefficients of rate `λ/σ²`, including normalizing constants.
    fn neg_log_posterior(p: &LassoProblem, alpha: &[f64], sigma2: f64) -> f64 {
        let var = sigma2 / 2.0;
        let r = p.residual(alpha);
        let d = p.dim() as f64;
        let lik = 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() + dot(&r, &r) / (2.0 * var);
        let rate = p.lambda / sigma2;
        let prior: f64 = alpha.iter().map(|a| -(rate / 2.0).ln() + rate * a.abs()).sum();
        lik + prior
    }

    #[test]
    fn map_estimate_matches_lasso_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for sigma2 in [0.3, 1.0, 2.5] {
            let p = random_problem(&mut rng, 3, 4, 0.2);
            let mut best_l = (f64::INFINITY, [0i32; 3]);
            let mut best_m = (f64::INFINITY, [0i32; 3]);
            let c = neg_log_posterior(&p, &[0.0; 3], sigma2) - p.objective(&[0.0; 3]) / sigma2;
            for i in -30..=30 {
                for j in -30..=30 {
                    for k in -30..=30 {
                        let a = [i as f64 * 0.05, j as f64 * 0.05, k as f64 * 0.05];
                        let l = p.objective(&a);
                        let m = neg_log_posterior(&p, &a, sigma2);
                        if l < best_l.0 {
                            best_l = (l, [i, j, k]);
                        }
                        if m < best_m.0 {
                            best_m = (m, [i, j, k]);
                        }
                        assert!((m - (l / sigma2 + c)).abs() < 1e-9);
                    }
                }
            }
            assert_eq!(best_l.1, best_m.1);
        }
    }

    fn orthonormal_pair(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let na = dot(&a, &a).sqrt();
        a.iter_mut().for_each(|v| *v /= na);
        let mut b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(v, x)| *v -= proj * x);
        let nb = dot(&b, &b).sqrt();
        b.iter_mut().for_each(|v| *v /= nb);
        (a, b)
    }

    proptest! {
        #[test]
        fn exact_solver_dominates_unrolled(seed in any::<u64>(), k in 1usize..5, d in 1usize..7, steps in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lambda = rng.random_range(0.01..1.0);
            let p = random_problem(&mut rng, k, d, lambda);
            let exact = solve_lasso_cd(&p, 1e-13, 100_000).unwrap();
            let approx = approx_sparse_code(&p, steps, None).unwrap();
            prop_assert!(p.objective(&exact.alpha) <= p.objective(&approx.alpha) + 1e-9);
        }

        #[test]
        fn kkt_is_scale_consistent(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 3, 5, 0.1);
            let s = solve_lasso_cd(&p, 1e-14, 100_000).unwrap();
            let r0 = kkt_residual(&p, &s.alpha).unwrap();
            let q = LassoProblem::new(
                p.t.iter().map(|v| c * v).collect(),
                p.columns.iter().map(|col| col.iter().map(|v| c * v).collect()).collect(),
                c * c * p.lambda,
            ).unwrap();
            let r1 = kkt_residual(&q, &s.alpha).unwrap();
            prop_assert!(r0 < 1e-9);
            prop_assert!(r1 <= c * c * r0 + 1e-9 * c * c);
        }

        #[test]
        fn incoherent_noisy_columns_get_zero(seed in any::<u64>(), n_bad in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 8;
            let lambda = 0.4;
            let (g1, g2) = orthonormal_pair(&mut rng, d);
            let (w1, w2) = (rng.random_range(0.5..2.0), rng.random_range(-2.0..-0.5));
            let t: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| w1 * a + w2 * b).collect();
            let mut cols = vec![g1.clone(), g2.clone()];
            let mut tries = 0;
            while cols.len() < 2 + n_bad && tries < 10_000 {
                tries += 1;
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let nv = dot(&v, &v).sqrt();
                v.iter_mut().for_each(|x| *x /= nv);
                let coherent = cols.iter().any(|c| dot(c, &v).abs() >= 0.3);
                if !coherent && dot(&v, &t).abs() < lambda / 2.0 {
                    cols.push(v);
                }
            }
            prop_assume!(cols.len() == 2 + n_bad);
            let p = LassoProblem::new(t, cols, lambda).unwrap();
            let s = solve_lasso_cd(&p, 1e-13, 100_000).unwrap();
            for j in 2..p.k() {
                prop_assert_eq!(s.alpha[j], 0.0);
            }
        }
    }
}
