//! Contextual stochastic block model generator and the statistical harnesses
//! for signed aggregation, support recovery and posterior consistency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::graphcore::{make_split, GraphDataset, SignedAdjacency};
use crate::posterior::{state_column, EdgePosterior};
use crate::sparsecode::{solve_lasso_cd, LassoProblem};
use crate::training::{train, TrainConfig};

/// Block model parameters; class `c` owns nodes `c·n/C .. (c+1)·n/C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsbmConfig {
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub means: Vec<Vec<f64>>,
    pub noise: f64,
    pub seed: u64,
}

impl CsbmConfig {
    /// Means `scale·e_c` in `dim ≥ classes` dimensions.
    pub fn orthogonal(n: usize, classes: usize, dim: usize, scale: f64, p_in: f64, p_out: f64, noise: f64, seed: u64) -> Self {
        let means = (0..classes)
            .map(|c| (0..dim).map(|k| if k == c { scale } else { 0.0 }).collect())
            .collect();
        Self {
            n,
            classes,
            p_in,
            p_out,
            means,
            noise,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn class_of(&self, i: usize) -> usize {
        i / (self.n / self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.n == 0 || !self.n.is_multiple_of(self.classes) {
            return Err(Error::Config(format!("n = {} must be a positive multiple of C = {}", self.n, self.classes)));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.means.len() != self.classes || self.dim() == 0 || self.means.iter().any(|m| m.len() != self.dim()) {
            return Err(Error::Config("need one mean of equal positive dimension per class".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise scale {} must be non-negative", self.noise)));
        }
        Ok(())
    }

    /// Smallest distance between two class means.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                best = best.min(dist(&self.means[a], &self.means[b]));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Signed edges for fixed labels: `+1` w.p. `p_in` within a class, `−1`
/// w.p. `p_out` across classes. Returned sorted with `u < v`.
pub fn sample_structure<R: Rng>(labels: &[usize], p_in: f64, p_out: f64, rng: &mut R) -> Vec<((usize, usize), i8)> {
    let n = labels.len();
    let mut out = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let same = labels[u] == labels[v];
            let p = if same { p_in } else { p_out };
            if rng.random::<f64>() < p {
                out.push(((u, v), if same { 1 } else { -1 }));
            }
        }
    }
    out
}

/// A fully labeled graph and its ground-truth signs (aligned with its edge ids).
pub fn generate(cfg: &CsbmConfig) -> Result<(GraphDataset, SignedAdjacency)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<usize> = (0..cfg.n).map(|i| cfg.class_of(i)).collect();
    let d = cfg.dim();
    let mut x = Vec::with_capacity(cfg.n * d);
    for &c in &labels {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            x.push(cfg.means[c][k] + cfg.noise * z);
        }
    }
    let signed = sample_structure(&labels, cfg.p_in, cfg.p_out, &mut rng);
    let edges = signed.iter().map(|(e, _)| *e).collect();
    let states = SignedAdjacency::new(signed.iter().map(|(_, s)| *s).collect())?;
    let g = GraphDataset::new(
        Tensor::matrix(cfg.n, d, x)?,
        labels.into_iter().map(Some).collect(),
        cfg.classes.max(2),
        edges,
    )?;
    Ok((g, states))
}

fn trial_seed(master: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial as u64 + 1);
    rng.random()
}

/// Square matrix given as rows; checks `W + δI ≻ 0` for a small `δ` by Cholesky.
pub fn is_positive_semidefinite(w: &[Vec<f64>]) -> bool {
    let d = w.len();
    if w.iter().any(|r| r.len() != d) {
        return false;
    }
    let scale = w.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..d {
        for j in 0..i {
            if (w[i][j] - w[j][i]).abs() > 1e-12 * (1.0 + scale) {
                return false;
            }
        }
    }
    let delta = 1e-10 * (1.0 + scale);
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = w[i][i] + delta - s;
                if v <= 0.0 {
                    return false;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (w[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

fn right_mul(h: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    h.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|c| row.iter().zip(w).map(|(a, wr)| a * wr[c]).sum())
                .collect()
        })
        .collect()
}

/// Per-class mean rows.
pub fn class_means(h: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = h.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &c) in h.iter().zip(labels) {
        counts[c] += 1;
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// `H·W_self + Z⁺·H·W₊ − Z⁻·H·W₋` with unnormalized signed adjacency.
pub fn signed_linear_update(
    g: &GraphDataset,
    z: &SignedAdjacency,
    h: &[Vec<f64>],
    w_self: &[Vec<f64>],
    w_plus: &[Vec<f64>],
    w_minus: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut out = right_mul(h, w_self);
    let hp = right_mul(h, w_plus);
    let hm = right_mul(h, w_minus);
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let (src, sign) = match z.get(e) {
            1 => (&hp, 1.0),
            -1 => (&hm, -1.0),
            _ => continue,
        };
        for (a, b) in [(u, v), (v, u)] {
            for (o, x) in out[a].iter_mut().zip(&src[b]) {
                *o += sign * x;
            }
        }
    }
    out
}

/// Outcome of the margin-growth simulation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    pub trials: usize,
    pub passed: usize,
    /// Per trial, the smallest ratio of new to old class-mean distance.
    pub min_ratios: Vec<f64>,
}

impl MarginReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.trials.max(1) as f64
    }
}

/// One linearized signed update with ground-truth signs per trial; a trial
/// passes when every pair of class means moves strictly further apart.
pub fn margin_growth_check(
    cfg: &CsbmConfig,
    w_self: &[Vec<f64>],
    w_plus: &[Vec<f64>],
    w_minus: &[Vec<f64>],
    trials: usize,
) -> Result<MarginReport> {
    cfg.validate()?;
    let mut violated = Vec::new();
    if !(cfg.p_out > cfg.p_in) {
        violated.push(format!("p_out = {} is not larger than p_in = {}", cfg.p_out, cfg.p_in));
    }
    if !is_positive_semidefinite(w_minus) {
        violated.push("W₋ is not symmetric positive semidefinite".to_string());
    }
    let d = cfg.dim();
    for (name, w) in [("W_self", w_self), ("W₊", w_plus), ("W₋", w_minus)] {
        if w.len() != d || w.iter().any(|r| r.len() != d) {
            violated.push(format!("{name} is not {d}×{d}"));
        }
    }
    if !violated.is_empty() {
        return Err(Error::Precondition(violated.join("; ")));
    }
    let ratios: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (g, z) = generate(&CsbmConfig {
                seed: trial_seed(cfg.seed, t),
                ..cfg.clone()
            })?;
            let h: Vec<Vec<f64>> = (0..g.n()).map(|i| g.features().row(i).to_vec()).collect();
            let labels: Vec<usize> = g.labels().iter().map(|y| y.expect("labeled")).collect();
            let h2 = signed_linear_update(&g, &z, &h, w_self, w_plus, w_minus);
            let before = class_means(&h, &labels, cfg.classes);
            let after = class_means(&h2, &labels, cfg.classes);
            let mut worst = f64::INFINITY;
            for a in 0..cfg.classes {
                for b in a + 1..cfg.classes {
                    worst = worst.min(dist(&after[a], &after[b]) / dist(&before[a], &before[b]));
                }
            }
            Ok(worst)
        })
        .collect();
    let min_ratios = ratios.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(MarginReport {
        trials,
        passed: min_ratios.iter().filter(|r| **r > 1.0).count(),
        min_ratios,
    })
}

/// Monte-Carlo check of `E[Z⁺·H] = p_in·(B − I)·H` for fixed labels and
/// features: returns the per-entry z-scores of the empirical mean.
pub fn propagation_identity_zscores(cfg: &CsbmConfig, samples: usize) -> Result<Vec<f64>> {
    let (g, _) = generate(cfg)?;
    if samples < 2 {
        return Err(Error::Parameter("need at least two structure samples".into()));
    }
    let labels: Vec<usize> = (0..cfg.n).map(|i| cfg.class_of(i)).collect();
    let (n, d) = (cfg.n, cfg.dim());
    let x = g.features();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut acc = vec![0.0; n * d];
    for _ in 0..samples {
        for ((u, v), s) in sample_structure(&labels, cfg.p_in, cfg.p_out, &mut rng) {
            if s == 1 {
                for k in 0..d {
                    acc[u * d + k] += x.at(v, k);
                    acc[v * d + k] += x.at(u, k);
                }
            }
        }
    }
    let p = cfg.p_in;
    let mut z = Vec::with_capacity(n * d);
    for i in 0..n {
        for k in 0..d {
            let (mut mean, mut var) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i && labels[j] == labels[i]) {
                mean += p * x.at(j, k);
                var += p * (1.0 - p) * x.at(j, k) * x.at(j, k);
            }
            let emp = acc[i * d + k] / samples as f64;
            let se = (var / samples as f64).sqrt();
            z.push(if se > 0.0 { (emp - mean) / se } else { 0.0 });
        }
    }
    Ok(z)
}

/// Averaged precision and recall of LASSO supports against same-class neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SupportRecovery {
    pub precision: f64,
    pub recall: f64,
}

/// Per node, LASSO of its own features on its neighbors' features.
/// Precision averages over nodes with a non-empty support, recall over nodes
/// with at least one same-class neighbor.
pub fn support_recovery_rate(cfg: &CsbmConfig, lambda: f64, trials: usize) -> Result<SupportRecovery> {
    cfg.validate()?;
    let sep = cfg.min_separation();
    if cfg.classes > 1 && sep < 4.0 * cfg.noise {
        return Err(Error::Precondition(format!(
            "mean separation {sep} is below 4·s = {}",
            4.0 * cfg.noise
        )));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let per_trial: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (g, _) = generate(&CsbmConfig {
                seed: trial_seed(cfg.seed, t),
                ..cfg.clone()
            })?;
            let adj = g.adjacency();
            let (mut prec, mut np, mut rec, mut nr) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..g.n() {
                if adj[i].is_empty() {
                    continue;
                }
                let nb: Vec<usize> = adj[i].iter().map(|(j, _)| *j).collect();
                let cols = nb.iter().map(|&j| g.features().row(j).to_vec()).collect();
                let p = LassoProblem::new(g.features().row(i).to_vec(), cols, lambda)?;
                let code = solve_lasso_cd(&p, 1e-10, 100_000)?;
                let same = |j: usize| g.label(j) == g.label(i);
                let support: Vec<usize> = nb.iter().zip(&code.alpha).filter(|(_, a)| **a != 0.0).map(|(j, _)| *j).collect();
                let hits = support.iter().filter(|&&j| same(j)).count();
                let relevant = nb.iter().filter(|&&j| same(j)).count();
                if !support.is_empty() {
                    prec += hits as f64 / support.len() as f64;
                    np += 1;
                }
                if relevant > 0 {
                    rec += hits as f64 / relevant as f64;
                    nr += 1;
                }
            }
            let p = if np > 0 { prec / np as f64 } else { 1.0 };
            let r = if nr > 0 { rec / nr as f64 } else { 0.0 };
            Ok((p, r))
        })
        .collect();
    let vals = per_trial.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SupportRecovery {
        precision: vals.iter().map(|v| v.0).sum::<f64>() / trials as f64,
        recall: vals.iter().map(|v| v.1).sum::<f64>() / trials as f64,
    })
}

/// Floor applied to impossible states before renormalizing the target.
pub const TARGET_FLOOR: f64 = 1e-6;

/// `p*(z | A_ij = 1, Y_i, Y_j) ∝ P(A = 1 | z)·P(z | Y_i, Y_j)` under the flip
/// channel with rate `eps`, in `(−, 0, +)` column order.
pub fn true_sign_distribution(same_class: bool, p_in: f64, p_out: f64, eps: f64) -> [f64; 3] {
    let mut p = [0.0; 3];
    if same_class {
        p[state_column(1)] = (1.0 - eps) * p_in;
        p[state_column(0)] = eps * (1.0 - p_in);
    } else {
        p[state_column(-1)] = (1.0 - eps) * p_out;
        p[state_column(0)] = eps * (1.0 - p_out);
    }
    let p = p.map(|v| v.max(TARGET_FLOOR));
    let s: f64 = p.iter().sum();
    p.map(|v| v / s)
}

/// Mean over edges of `KL(q_e ‖ p*_e)`.
pub fn mean_kl_to_truth(g: &GraphDataset, ep: &EdgePosterior, p_in: f64, p_out: f64, eps: f64) -> Result<f64> {
    if ep.len() != g.num_edges() || ep.is_empty() {
        return Err(Error::dim("mean_kl_to_truth", format!("{} posteriors for {} edges", ep.len(), g.num_edges())));
    }
    let mut total = 0.0;
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let same = g.label(u).zip(g.label(v)).map(|(a, b)| a == b).ok_or_else(|| {
            Error::Consistency(format!("edge {u}-{v} has an unlabeled endpoint"))
        })?;
        let target = true_sign_distribution(same, p_in, p_out, eps);
        let q = ep.get(e);
        total += (0..3).filter(|&c| q[c] > 0.0).map(|c| q[c] * (q[c] / target[c]).ln()).sum::<f64>();
    }
    Ok(total / g.num_edges() as f64)
}

/// Mean KL to the true sign distribution per labeled fraction, averaged over
/// `seeds`. Each cell trains on a fresh split with 20% validation.
pub fn posterior_consistency_trend(
    cfg: &CsbmConfig,
    fractions: &[f64],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("labeled fractions must be strictly increasing".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Parameter("need at least one seed".into()));
    }
    let cells: Vec<(usize, u64)> = (0..fractions.len()).flat_map(|f| seeds.iter().map(move |s| (f, *s))).collect();
    let kls: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(f, seed)| {
            let (g, _) = generate(&CsbmConfig { seed, ..cfg.clone() })?;
            let frac = fractions[f];
            let val = (1.0 - frac).min(0.2);
            let mut split = make_split(&g, (frac, val, (1.0 - frac - val).max(0.0)), seed)?;
            if split.val.is_empty() {
                split.val = split.train.clone();
            }
            let out = train(&g, &split, &TrainConfig { seed, ..train_cfg.clone() })?;
            let ep = out.model.posterior(&g, &split.train)?;
            mean_kl_to_truth(&g, &ep, cfg.p_in, cfg.p_out, train_cfg.eps)
        })
        .collect();
    let kls = kls.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(kls
        .chunks(seeds.len())
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}
