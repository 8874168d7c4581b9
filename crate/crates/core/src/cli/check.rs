use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{grad_check, ParamStore, Tensor};
use crate::error::Result;
use crate::graphcore::GraphDataset;
use crate::posterior::{draw_gumbel, EdgePosterior};
use crate::s2net::{exact_marginal, predict_mc, NetworkConfig, NetworkParams};
use crate::sparsecode::{approx_sparse_code, kkt_residual, solve_lasso_cd, LassoProblem};
use crate::training::{loss_total, LossContext, Model, SampleMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckItem {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < tolerance,
            value,
            tolerance,
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, classes: usize) -> Result<GraphDataset> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let x = Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y = (0..n).map(|i| Some(i % classes)).collect();
    GraphDataset::new(x, y, classes, edges)
}

fn loss_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 6, 0.4, 2)?;
    let cfg = TrainConfig {
        hidden: 5,
        posterior_hidden: 4,
        posterior_embed: 3,
        decoder_hidden: 4,
        k_train: 2,
        ..TrainConfig::default()
    };
    let model = Model::init(&g, &cfg, seed)?;
    let ctx = LossContext::new(&g, &[0, 1, 2, 5], &cfg)?;
    let noise: Vec<Tensor> = (0..cfg.k_train).map(|_| draw_gumbel(g.num_edges(), &mut rng)).collect();
    let ids: Vec<_> = model.store.ids().collect();
    grad_check(&model.store, &ids, 1e-6, |s, t| {
        let m = Model {
            store: s.clone(),
            ..model.clone()
        };
        Ok(loss_total(t, &ctx, &m, &cfg, &noise, 0.5, SampleMode::Soft, None)?.total)
    })
}

/// Worst KKT residual of coordinate descent and worst objective excess over a
/// long proximal-gradient run, across random small problems.
fn lasso_routes(seed: u64, instances: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kkt, mut excess) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let k = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = LassoProblem::new(t, cols, rng.random_range(0.01..1.0))?;
        let cd = solve_lasso_cd(&p, 1e-12, 100_000)?;
        let ista = approx_sparse_code(&p, 20_000, None)?;
        kkt = kkt.max(kkt_residual(&p, &cd.alpha)?);
        excess = excess.max(p.objective(&cd.alpha) - p.objective(&ista.alpha));
    }
    Ok((kkt, excess))
}

/// Largest per-node total-variation distance between the Monte-Carlo
/// predictive and the enumerated marginal on a triangle.
fn marginal_tv(seed: u64, k: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let g = GraphDataset::new(x, vec![Some(0), Some(1), Some(2)], 3, vec![(0, 1), (0, 2), (1, 2)])?;
    let probs = (0..3)
        .map(|_| {
            let w: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() + 0.05);
            let s: f64 = w.iter().sum();
            w.map(|v| v / s)
        })
        .collect();
    let ep = EdgePosterior::new(probs)?;
    let mut store = ParamStore::new();
    let net_cfg = NetworkConfig {
        hidden: 6,
        lambda: 0.05,
        ..NetworkConfig::default()
    };
    let net = NetworkParams::init(&mut store, 3, 3, &net_cfg, &mut rng)?;
    let exact = exact_marginal(&g, &ep, &store, &net)?;
    let mc = predict_mc(&g, &ep, &store, &net, k, seed)?;
    Ok((0..3)
        .map(|i| 0.5 * (0..3).map(|c| (mc.probs.at(i, c) - exact.probs.at(i, c)).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Gradient and oracle checks run by the `check` verb.
pub fn check(seed: u64) -> Result<Vec<CheckItem>> {
    let (kkt, excess) = lasso_routes(seed, 200)?;
    Ok(vec![
        CheckItem::below("loss-gradient", loss_gradient(seed)?, 1e-4),
        CheckItem::below("lasso-kkt", kkt, 1e-6),
        CheckItem::below("lasso-vs-ista", excess, 1e-9),
        CheckItem::below("mc-vs-exact-marginal", marginal_tv(seed, 10_000)?, 0.01),
    ])
}
