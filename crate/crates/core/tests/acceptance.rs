//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero when any criterion fails.
//!
//! Experiment criteria share one heterophilic CSBM fixture and its trained
//! models. Real-data criteria read geom-gcn directories from `SPAM_DATA_DIR`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spam::csbm::{generate, margin_growth_check, posterior_consistency_trend, support_recovery_rate, CsbmConfig};
use spam::diffmath::{grad_check, ParamStore, Tensor};
use spam::graphcore::{homophily_ratio, load_geom_gcn, make_split, GraphDataset, LabelSplit, SignedAdjacency};
use spam::posterior::{draw_gumbel, EdgePosterior};
use spam::robustness::{delete_edges, mean_std};
use spam::s2net::{exact_marginal, forward_fixed, predict_mc, risk_gap_check, NetworkConfig, NetworkParams};
use spam::sparsecode::{kkt_residual, soft_threshold, solve_lasso_cd, LassoProblem};
use spam::training::{evaluate, gcn_evaluate, gcn_train, loss_total, train, LossContext, Model, SampleMode, TrainConfig};

// Tolerances.
const GRAD_REL_ERR: f64 = 1e-4;
const GRAD_SECONDS: f64 = 10.0;
const LASSO_OBJ_SLACK: f64 = 1e-4;
const LASSO_KKT: f64 = 1e-6;
const LASSO_CLOSED_FORM: f64 = 1e-10;
const MC_TV: f64 = 0.01;
const MC_VAR_FACTOR: f64 = 2.0;
const MARGIN_MIN_PASSED: usize = 18;
const SUPPORT_PRECISION: f64 = 0.9;
const HETERO_GAP: f64 = 0.10;
const TEXAS_MIN_ACC: f64 = 0.70;
const TEXAS_MIN_GAP: f64 = 0.15;
const DEPTH_WINDOW: f64 = 0.10;
const DOUBLING_RATIO: f64 = 2.5;
const HOMOPHILY_TOL: f64 = 0.01;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TEST_DRAW: u64 = 0x5eed;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_posterior(rng: &mut ChaCha8Rng, m: usize) -> EdgePosterior {
    let probs = (0..m)
        .map(|_| {
            let w: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() + 0.05);
            let s: f64 = w.iter().sum();
            w.map(|v| v / s)
        })
        .collect();
    EdgePosterior::new(probs).unwrap()
}

fn small_net(g: &GraphDataset, seed: u64) -> (ParamStore, NetworkParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetworkConfig {
        hidden: 6,
        lambda: 0.05,
        ..NetworkConfig::default()
    };
    let net = NetworkParams::init(&mut store, g.feature_dim(), g.num_classes(), &cfg, &mut rng).unwrap();
    (store, net)
}

/// Every state vector over `m` edges with its probability under `q`.
fn joint_states(q: &EdgePosterior, m: usize) -> Vec<(SignedAdjacency, f64)> {
    (0..3usize.pow(m as u32))
        .map(|mut code| {
            let mut states = vec![0i8; m];
            let mut p = 1.0;
            for e in (0..m).rev() {
                let col = code % 3;
                code /= 3;
                states[e] = col as i8 - 1;
                p *= q.get(e)[col];
            }
            (SignedAdjacency::new(states).unwrap(), p)
        })
        .collect()
}

fn enumerated_marginal(g: &GraphDataset, q: &EdgePosterior, store: &ParamStore, net: &NetworkParams) -> Vec<f64> {
    let mut acc = vec![0.0; g.n() * g.num_classes()];
    for (z, p) in joint_states(q, g.num_edges()) {
        let probs = forward_fixed(g, &z, store, net).unwrap();
        for (a, v) in acc.iter_mut().zip(probs.data()) {
            *a += p * v;
        }
    }
    acc
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)];
    edges.extend([(0, 3), (1, 5)]);
    let y = (0..6).map(|i| Some(i % 2)).collect();
    let g = GraphDataset::new(random_features(&mut rng, 6, 3), y, 2, edges).unwrap();
    let cfg = TrainConfig {
        depth: 2,
        hidden: 5,
        posterior_hidden: 4,
        posterior_embed: 3,
        decoder_hidden: 4,
        k_train: 2,
        ..TrainConfig::default()
    };
    let model = Model::init(&g, &cfg, 2).unwrap();
    let ctx = LossContext::new(&g, &[0, 1, 2, 5], &cfg).unwrap();
    let noise: Vec<Tensor> = (0..2).map(|_| draw_gumbel(g.num_edges(), &mut rng)).collect();
    let ids: Vec<_> = model.store.ids().collect();
    let err = grad_check(&model.store, &ids, 1e-6, |s, t| {
        let m = Model {
            store: s.clone(),
            ..model.clone()
        };
        Ok(loss_total(t, &ctx, &m, &cfg, &noise, 0.5, SampleMode::Soft, None)?.total)
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err < GRAD_REL_ERR && secs < GRAD_SECONDS,
        format!("max relative error {err:.2e} (< {GRAD_REL_ERR:e}), {secs:.2}s (< {GRAD_SECONDS}s)"),
    )
}

/// Coarse-to-fine exhaustive grid over the box `[−4, 4]^k`.
fn grid_oracle(p: &LassoProblem) -> f64 {
    let k = p.columns.len();
    let (mut center, mut half, mut step) = (vec![0.0; k], 4.0f64, 0.2f64);
    let mut best = p.objective(&center);
    while step > 1e-4 {
        let n = (half / step).round() as i64;
        let mut idx = vec![-n; k];
        let mut arg = center.clone();
        loop {
            let a: Vec<f64> = center.iter().zip(&idx).map(|(c, i)| (c + *i as f64 * step).clamp(-4.0, 4.0)).collect();
            let f = p.objective(&a);
            if f < best {
                best = f;
                arg = a;
            }
            let Some(pos) = idx.iter().position(|i| *i < n) else { break };
            idx[pos] += 1;
            idx[..pos].iter_mut().for_each(|i| *i = -n);
        }
        center = arg;
        half = 2.0 * step;
        step /= 8.0;
    }
    best
}

fn lasso_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_kkt) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = LassoProblem::new(t, cols, rng.random_range(0.05..1.0)).unwrap();
        let code = solve_lasso_cd(&p, 1e-12, 1_000_000).unwrap();
        worst_gap = worst_gap.max(p.objective(&code.alpha) - grid_oracle(&p));
        worst_kkt = worst_kkt.max(kkt_residual(&p, &code.alpha).unwrap());
    }
    // Orthonormal dictionary from a scaled permutation of the identity.
    let mut worst_closed = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(2..=6);
        let k = rng.random_range(1..=d);
        let mut axes: Vec<usize> = (0..d).collect();
        axes.sort_by_key(|_| rng.random::<u32>());
        let cols: Vec<Vec<f64>> = axes[..k]
            .iter()
            .map(|&a| {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (0..d).map(|i| if i == a { s } else { 0.0 }).collect()
            })
            .collect();
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.05..2.0);
        let p = LassoProblem::new(t.clone(), cols.clone(), lambda).unwrap();
        let code = solve_lasso_cd(&p, 1e-14, 100_000).unwrap();
        for (c, a) in cols.iter().zip(&code.alpha) {
            let corr: f64 = c.iter().zip(&t).map(|(x, y)| x * y).sum();
            worst_closed = worst_closed.max((a - soft_threshold(corr, lambda / 2.0)).abs());
        }
    }
    outcome(
        worst_gap <= LASSO_OBJ_SLACK && worst_kkt < LASSO_KKT && worst_closed <= LASSO_CLOSED_FORM,
        format!(
            "objective minus grid oracle ≤ {worst_gap:.2e} (≤ {LASSO_OBJ_SLACK:e}), KKT {worst_kkt:.2e} (< {LASSO_KKT:e}), \
             orthonormal closed form {worst_closed:.2e} (≤ {LASSO_CLOSED_FORM:e})"
        ),
    )
}

fn exact_marginal_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = GraphDataset::new(
        random_features(&mut rng, 3, 3),
        vec![Some(0), Some(1), Some(2)],
        3,
        vec![(0, 1), (0, 2), (1, 2)],
    )
    .unwrap();
    let q = random_posterior(&mut rng, 3);
    let (store, net) = small_net(&g, 4);
    let ours = enumerated_marginal(&g, &q, &store, &net);
    let lib = exact_marginal(&g, &q, &store, &net).unwrap();
    let routes = ours.iter().zip(lib.probs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mc = predict_mc(&g, &q, &store, &net, 10_000, 5).unwrap();
    let tv = (0..3)
        .map(|i| 0.5 * (0..3).map(|c| (mc.probs.at(i, c) - ours[3 * i + c]).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let reps = 200;
    let scaled: Vec<f64> = [16usize, 64, 256]
        .iter()
        .map(|&k| {
            let runs: Vec<Vec<f64>> = (0..reps)
                .map(|r| predict_mc(&g, &q, &store, &net, k, 1000 + r).unwrap().probs.data().to_vec())
                .collect();
            let var: f64 = (0..9)
                .map(|e| {
                    let col: Vec<f64> = runs.iter().map(|r| r[e]).collect();
                    mean_std(&col).1.powi(2)
                })
                .sum::<f64>()
                / 9.0;
            k as f64 * var
        })
        .collect();
    let spread = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        tv < MC_TV && routes < 1e-12 && spread <= MC_VAR_FACTOR,
        format!(
            "max per-node TV at K=10000 {tv:.4} (< {MC_TV}), enumeration routes agree to {routes:.1e}, \
             K·Var at K=16/64/256 {scaled:.3?} spread {spread:.2} (≤ {MC_VAR_FACTOR})"
        ),
    )
}

fn risk_gap_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GraphDataset::new(random_features(&mut rng, 3, 3), vec![Some(0), Some(1), Some(0)], 2, vec![(0, 1), (1, 2)]).unwrap();
    let (store, net) = small_net(&g, 5);
    let floor = 1e-3;
    let risk = |marg: &[f64]| -> f64 {
        (0..3).map(|i| -marg[2 * i + g.label(i).unwrap()].clamp(floor, 1.0).ln()).sum::<f64>() / 3.0
    };
    let (mut violations, mut route_err, mut tightest) = (0, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let q = random_posterior(&mut rng, 2);
        let p = random_posterior(&mut rng, 2);
        let gap = (risk(&enumerated_marginal(&g, &q, &store, &net)) - risk(&enumerated_marginal(&g, &p, &store, &net))).abs();
        let l1: f64 = joint_states(&q, 2).iter().zip(joint_states(&p, 2)).map(|(a, b)| (a.1 - b.1).abs()).sum();
        let bound = l1 / floor;
        let lib = risk_gap_check(&g, &store, &net, &q, &p, floor).unwrap();
        route_err = route_err.max((lib.gap() - gap).abs()).max((lib.bound() - bound).abs() / bound);
        if gap > bound || !lib.holds() {
            violations += 1;
        }
        tightest = tightest.max(gap / bound);
    }
    outcome(
        violations == 0 && route_err < 1e-9,
        format!("{violations} violations in 50 pairs, largest gap/bound {tightest:.2e}, routes agree to {route_err:.1e}"),
    )
}

fn margin_growth() -> Outcome {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let base = CsbmConfig::orthogonal(400, 2, 2, 1.0, 0.05, 0.2, 1.0, 5);
    let lib = margin_growth_check(&base, &eye, &eye, &eye, 20).unwrap();
    let mut grown = 0;
    for t in 0..20 {
        let (g, z) = generate(&CsbmConfig { seed: 500 + t, ..base.clone() }).unwrap();
        let mut h2: Vec<[f64; 2]> = (0..g.n()).map(|i| [g.features().at(i, 0), g.features().at(i, 1)]).collect();
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            let s = f64::from(z.get(e));
            for (a, b) in [(u, v), (v, u)] {
                for k in 0..2 {
                    h2[a][k] += s * g.features().at(b, k);
                }
            }
        }
        let dist = |h: &dyn Fn(usize, usize) -> f64| {
            let (mut m, mut count) = ([[0.0; 2]; 2], [0.0; 2]);
            for i in 0..g.n() {
                let c = g.label(i).unwrap();
                count[c] += 1.0;
                for k in 0..2 {
                    m[c][k] += h(i, k);
                }
            }
            for c in 0..2 {
                m[c] = m[c].map(|v| v / count[c]);
            }
            ((m[0][0] - m[1][0]).powi(2) + (m[0][1] - m[1][1]).powi(2)).sqrt()
        };
        let before = dist(&|i, k| g.features().at(i, k));
        let after = dist(&|i, k| h2[i][k]);
        grown += usize::from(after > before);
    }
    outcome(
        lib.passed >= MARGIN_MIN_PASSED && grown >= MARGIN_MIN_PASSED,
        format!("library {}/20, independent recomputation {grown}/20 (need ≥ {MARGIN_MIN_PASSED})", lib.passed),
    )
}

fn support_recovery() -> Outcome {
    let scale = 4.0;
    let cfg = CsbmConfig::orthogonal(120, 3, 16, scale, 0.05, 0.2, scale / 8.0, 10);
    let lambda = scale * scale;
    let lib = support_recovery_rate(&cfg, lambda, 20).unwrap();
    let mut precisions = Vec::new();
    for t in 0..20 {
        let (g, _) = generate(&CsbmConfig { seed: 900 + t, ..cfg.clone() }).unwrap();
        let adj = g.adjacency();
        let mut per_node = Vec::new();
        for i in 0..g.n() {
            let nb: Vec<usize> = adj[i].iter().map(|p| p.0).collect();
            if nb.is_empty() {
                continue;
            }
            let cols = nb.iter().map(|&j| g.features().row(j).to_vec()).collect();
            let p = LassoProblem::new(g.features().row(i).to_vec(), cols, lambda).unwrap();
            let alpha = solve_lasso_cd(&p, 1e-10, 100_000).unwrap().alpha;
            let chosen: Vec<usize> = nb.iter().zip(&alpha).filter(|(_, a)| **a != 0.0).map(|(j, _)| *j).collect();
            if !chosen.is_empty() {
                let hits = chosen.iter().filter(|&&j| g.label(j) == g.label(i)).count();
                per_node.push(hits as f64 / chosen.len() as f64);
            }
        }
        precisions.push(per_node.iter().sum::<f64>() / per_node.len().max(1) as f64);
    }
    let ours = precisions.iter().sum::<f64>() / 20.0;
    outcome(
        lib.precision >= SUPPORT_PRECISION && ours >= SUPPORT_PRECISION,
        format!(
            "λ = ‖μ‖² = {lambda}: precision {:.3} (recall {:.3}), independent recomputation {ours:.3} (need ≥ {SUPPORT_PRECISION})",
            lib.precision, lib.recall
        ),
    )
}

fn hetero_csbm() -> CsbmConfig {
    CsbmConfig::orthogonal(100, 5, 16, 3.0, 0.05, 0.2, 1.0, 7)
}

fn experiment_cfg(seed: u64, depth: usize) -> TrainConfig {
    TrainConfig {
        depth,
        hidden: 32,
        dropout: 0.2,
        max_epochs: 200,
        patience: 50,
        seed,
        ..TrainConfig::default()
    }
}

fn hetero_split(g: &GraphDataset, seed: u64) -> LabelSplit {
    make_split(g, (0.4, 0.2, 0.4), seed).unwrap()
}

fn posterior_trend() -> Outcome {
    let cfg = TrainConfig {
        label_prior: Some(0.9),
        ..experiment_cfg(0, 2)
    };
    let kl = posterior_consistency_trend(&hetero_csbm(), &[0.1, 0.3, 0.6], &cfg, &SEEDS).unwrap();
    outcome(
        kl.windows(2).all(|w| w[1] <= w[0]),
        format!("mean edge KL at labeled fractions 0.1/0.3/0.6: {kl:.4?}"),
    )
}

struct SeedResult {
    spam: f64,
    gcn: f64,
    mc: [f64; 3],
}

/// SpaM and GCN test accuracies per seed on the heterophilic fixture.
fn hetero_runs(g: &GraphDataset, depth: usize, with_mc: bool) -> Vec<SeedResult> {
    SEEDS
        .iter()
        .map(|&seed| {
            let split = hetero_split(g, seed);
            let cfg = experiment_cfg(seed, depth);
            let out = train(g, &split, &cfg).unwrap();
            let acc = |k| evaluate(g, &split.train, &split.test, &out.model, k, TEST_DRAW + seed).unwrap();
            let spam = acc(cfg.k_eval);
            let mc = if with_mc { [acc(1), acc(4), acc(8)] } else { [f64::NAN; 3] };
            let gcn = gcn_evaluate(g, &split.test, &gcn_train(g, &split, &cfg).unwrap().model).unwrap();
            SeedResult { spam, gcn, mc }
        })
        .collect()
}

fn means(runs: &[SeedResult]) -> (f64, f64) {
    let n = runs.len() as f64;
    (runs.iter().map(|r| r.spam).sum::<f64>() / n, runs.iter().map(|r| r.gcn).sum::<f64>() / n)
}

fn heterophily_advantage(base: &[SeedResult]) -> Outcome {
    let (s, g) = means(base);
    outcome(
        s - g >= HETERO_GAP,
        format!("SpaM {s:.3} vs GCN {g:.3}, gap {:.1} points (need ≥ {:.0})", 100.0 * (s - g), 100.0 * HETERO_GAP),
    )
}

fn edge_deletion(g: &GraphDataset, base: &[SeedResult]) -> Outcome {
    let rho = 0.4;
    let perturbed: Vec<SeedResult> = SEEDS
        .iter()
        .map(|&seed| {
            let pg = delete_edges(g, rho, 77 + seed).unwrap();
            let split = hetero_split(&pg, seed);
            let cfg = experiment_cfg(seed, 2);
            let out = train(&pg, &split, &cfg).unwrap();
            let spam = evaluate(&pg, &split.train, &split.test, &out.model, cfg.k_eval, TEST_DRAW + seed).unwrap();
            let gcn = gcn_evaluate(&pg, &split.test, &gcn_train(&pg, &split, &cfg).unwrap().model).unwrap();
            SeedResult { spam, gcn, mc: [f64::NAN; 3] }
        })
        .collect();
    let (s0, g0) = means(base);
    let (s1, g1) = means(&perturbed);
    let (ds, dg) = (s0 - s1, g0 - g1);
    outcome(
        ds < dg,
        format!("drop at ρ = {rho}: SpaM {s0:.3}→{s1:.3} ({:+.1}), GCN {g0:.3}→{g1:.3} ({:+.1})", -100.0 * ds, -100.0 * dg),
    )
}

fn oversmoothing(g: &GraphDataset, base: &[SeedResult]) -> Outcome {
    let deep = hetero_runs(g, 8, false);
    let (s2, g2) = means(base);
    let (s8, g8) = means(&deep);
    let (ds, dg) = (s2 - s8, g2 - g8);
    outcome(
        ds.abs() <= DEPTH_WINDOW && dg > ds,
        format!("L=2→8: SpaM {s2:.3}→{s8:.3}, GCN {g2:.3}→{g8:.3} (SpaM within {:.0} points, GCN drops more)", 100.0 * DEPTH_WINDOW),
    )
}

fn mc_study(base: &[SeedResult]) -> Outcome {
    let col = |j: usize| -> Vec<f64> { base.iter().map(|r| r.mc[j]).collect() };
    let (m1, s1) = mean_std(&col(0));
    let (m4, _) = mean_std(&col(1));
    let (m8, s8) = mean_std(&col(2));
    outcome(
        m4 >= m1 && s8 <= s1,
        format!("mean accuracy K=1 {m1:.3}, K=4 {m4:.3}, K=8 {m8:.3}; std K=1 {s1:.4}, K=8 {s8:.4}"),
    )
}

fn random_graph_with_edges(n: usize, m: usize, seed: u64) -> GraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = std::collections::HashSet::new();
    while set.len() < m {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v {
            set.insert((u.min(v), u.max(v)));
        }
    }
    let y = (0..n).map(|i| Some(i % 2)).collect();
    GraphDataset::new(random_features(&mut rng, n, 16), y, 2, set.into_iter().collect()).unwrap()
}

fn epoch_scaling() -> Outcome {
    let n = 1000;
    let epochs = 2;
    let times: Vec<f64> = [2000usize, 4000, 8000, 16000]
        .iter()
        .map(|&m| {
            let g = random_graph_with_edges(n, m, m as u64);
            let split = make_split(&g, (0.6, 0.2, 0.2), 0).unwrap();
            let cfg = TrainConfig {
                max_epochs: epochs,
                ..experiment_cfg(0, 2)
            };
            (0..2)
                .map(|_| {
                    let t = Instant::now();
                    train(&g, &split, &cfg).unwrap();
                    t.elapsed().as_secs_f64() / epochs as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
    outcome(
        ratios.iter().all(|r| *r <= DOUBLING_RATIO),
        format!("seconds per epoch at m = 2k/4k/8k/16k: {times:.3?}; ratios {ratios:.2?} (≤ {DOUBLING_RATIO})"),
    )
}

fn data_dir(name: &str) -> Result<PathBuf, String> {
    let root = std::env::var("SPAM_DATA_DIR").map_err(|_| format!("SPAM_DATA_DIR is unset; {name} data not available"))?;
    let dir = PathBuf::from(root).join(name);
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(format!("{} not found", dir.display()))
    }
}

fn texas_reproduction() -> Outcome {
    let dir = match data_dir("texas") {
        Ok(d) => d,
        Err(e) => return outcome(false, e),
    };
    let (g, _) = load_geom_gcn(&dir).unwrap();
    let (mut s, mut c) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let split = make_split(&g, (0.6, 0.2, 0.2), seed).unwrap();
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let out = train(&g, &split, &cfg).unwrap();
        s.push(evaluate(&g, &split.train, &split.test, &out.model, cfg.k_eval, TEST_DRAW + seed).unwrap());
        c.push(gcn_evaluate(&g, &split.test, &gcn_train(&g, &split, &cfg).unwrap().model).unwrap());
    }
    let (ms, mc) = (mean_std(&s).0, mean_std(&c).0);
    outcome(
        ms >= TEXAS_MIN_ACC && ms - mc >= TEXAS_MIN_GAP,
        format!("SpaM {ms:.3} (≥ {TEXAS_MIN_ACC}), GCN {mc:.3}, gap {:.1} points (≥ {:.0})", 100.0 * (ms - mc), 100.0 * TEXAS_MIN_GAP),
    )
}

fn homophily_ratios() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, want) in [("cornell", 0.11), ("texas", 0.06), ("wisconsin", 0.16)] {
        match data_dir(name) {
            Ok(dir) => {
                let h = homophily_ratio(&load_geom_gcn(&dir).unwrap().0).unwrap();
                pass &= (h - want).abs() <= HOMOPHILY_TOL;
                parts.push(format!("{name} {h:.3} (want {want} ± {HOMOPHILY_TOL})"));
            }
            Err(e) => {
                pass = false;
                parts.push(e);
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let mut failed = Vec::new();
    let mut check = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let mark = if o.pass { "PASS" } else { "FAIL" };
        println!("{mark} {id:>2} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    };

    check(1, "gradient integrity", &mut gradient_integrity);
    check(2, "lasso oracle equivalence", &mut lasso_oracle);
    check(3, "exact marginal", &mut exact_marginal_check);
    check(4, "risk gap bound", &mut risk_gap_bound);
    check(5, "margin growth", &mut margin_growth);
    check(6, "support recovery", &mut support_recovery);
    check(7, "posterior consistency trend", &mut posterior_trend);

    let (g, _) = generate(&hetero_csbm()).unwrap();
    let base = hetero_runs(&g, 2, true);
    check(8, "heterophily advantage", &mut || heterophily_advantage(&base));
    check(9, "texas reproduction", &mut texas_reproduction);
    check(10, "edge deletion robustness", &mut || edge_deletion(&g, &base));
    check(11, "oversmoothing", &mut || oversmoothing(&g, &base));
    check(12, "linear epoch cost", &mut epoch_scaling);
    check(13, "homophily ratios", &mut homophily_ratios);
    check(14, "monte-carlo study", &mut || mc_study(&base));

    println!("{} of 14 criteria passed", 14 - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
