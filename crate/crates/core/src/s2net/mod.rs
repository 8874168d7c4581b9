//! Sparse signed message passing.
//!
//! Each node regresses its target `t_i = h_i·W_t` on the values
//! `v_j = h_j·W_v` of its currently signed neighbors with an ℓ1 penalty, then
//! aggregates `Σ₊ α_ij v_j − γ Σ₋ |α_ij| v_j`. The trainable path unrolls
//! ISTA over all directed edge slots at once; the analysis path solves each
//! LASSO exactly.

mod enumerate;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{dropout_mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::{neighbor_sets, GraphDataset, SignedAdjacency};
use crate::posterior::{sample_signed, EdgePosterior};
use crate::sparsecode::{approx_sparse_code, solve_lasso_cd, LassoProblem, SparseCode};

pub use enumerate::{clamped_risk, enumerate_states, exact_marginal, risk_gap_check, RiskGapReport, MAX_ENUM_EDGES};

/// Hyperparameters shared by every layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub steps: usize,
    pub self_term: bool,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            gamma: 1.0,
            lambda: 0.1,
            steps: 3,
            self_term: true,
            dropout: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.steps == 0 {
            return Err(Error::Config("depth, hidden and steps must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config(format!("need gamma ≥ 0 and lambda > 0, got {} and {}", self.gamma, self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One layer's parameters. Matrices act by right multiplication:
/// `W_v, W_t: d_in × d_val`, `W_o: d_val × d_out`, `W_self: d_in × d_out`.
/// `log_step` scales the per-node ISTA step `η_i = e^{log_step} / (2·λ̂_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2LayerParams {
    pub d_in: usize,
    pub d_val: usize,
    pub d_out: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub steps: usize,
    pub self_term: bool,
    pub w_v: ParamId,
    pub w_t: ParamId,
    pub w_o: ParamId,
    pub w_self: ParamId,
    pub b: ParamId,
    pub log_step: ParamId,
}

impl S2LayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_val: usize,
        d_out: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            d_in,
            d_val,
            d_out,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            steps: cfg.steps,
            self_term: cfg.self_term,
            w_v: store.add_glorot(format!("{name}.w_v"), d_in, d_val, rng),
            w_t: store.add_glorot(format!("{name}.w_t"), d_in, d_val, rng),
            w_o: store.add_glorot(format!("{name}.w_o"), d_val, d_out, rng),
            w_self: store.add_glorot(format!("{name}.w_self"), d_in, d_out, rng),
            b: store.add_zeros(format!("{name}.b"), &[d_out]),
            log_step: store.add_zeros(format!("{name}.log_step"), &[1]),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_v, self.w_t, self.w_o, self.w_self, self.b, self.log_step]
    }
}

/// Stacked layers plus the linear classifier `W_c: d_out × C`, `c: C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<S2LayerParams>,
    pub w_c: ParamId,
    pub c: ParamId,
    pub classes: usize,
    pub dropout: f64,
}

impl NetworkParams {
    pub fn init<R: Rng>(store: &mut ParamStore, input: usize, classes: usize, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut d_in = input;
        for l in 0..cfg.depth {
            layers.push(S2LayerParams::init(store, &format!("s2.{l}"), d_in, cfg.hidden, cfg.hidden, cfg, rng));
            d_in = cfg.hidden;
        }
        Ok(Self {
            layers,
            w_c: store.add_glorot("classifier.w", d_in, classes, rng),
            c: store.add_zeros("classifier.b", &[classes]),
            classes,
            dropout: cfg.dropout,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(S2LayerParams::ids).collect();
        ids.extend([self.w_c, self.c]);
        ids
    }
}

/// Both directions of every observed edge, sorted by target then source.
#[derive(Clone, Debug)]
pub struct SlotIndex {
    pub n: usize,
    pub tgt: Arc<Vec<usize>>,
    pub src: Arc<Vec<usize>>,
    pub edge: Arc<Vec<usize>>,
}

impl SlotIndex {
    pub fn new(g: &GraphDataset) -> Self {
        let mut slots: Vec<(usize, usize, usize)> = Vec::with_capacity(2 * g.num_edges());
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            slots.push((u, v, e));
            slots.push((v, u, e));
        }
        slots.sort_unstable();
        Self {
            n: g.n(),
            tgt: Arc::new(slots.iter().map(|s| s.0).collect()),
            src: Arc::new(slots.iter().map(|s| s.1).collect()),
            edge: Arc::new(slots.iter().map(|s| s.2).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.tgt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt.is_empty()
    }
}

/// Per-edge indicator weights `w⁺ = [z = +1]`, `w⁻ = [z = −1]` as `m`-vectors.
#[derive(Clone, Copy, Debug)]
pub struct EdgeWeights {
    pub plus: Var,
    pub minus: Var,
}

impl EdgeWeights {
    pub fn from_states(tape: &mut Tape, z: &SignedAdjacency) -> Self {
        let plus = z.states().iter().map(|s| f64::from(*s == 1)).collect();
        let minus = z.states().iter().map(|s| f64::from(*s == -1)).collect();
        Self {
            plus: tape.constant(Tensor::vector(plus)),
            minus: tape.constant(Tensor::vector(minus)),
        }
    }

    /// Columns `+1` and `−1` of an `m × 3` (hard or relaxed) sample table.
    pub fn from_sample(tape: &mut Tape, sample: Var) -> Result<Self> {
        Ok(Self {
            plus: tape.column(sample, 2)?,
            minus: tape.column(sample, 0)?,
        })
    }
}

/// Number of power iterations behind each node's step-size estimate.
pub const POWER_ITERS: usize = 10;

/// Output of one recorded layer: new features and one coefficient per slot.
#[derive(Clone, Copy, Debug)]
pub struct LayerOut {
    pub h: Var,
    pub alpha: Var,
}

/// Records one S² layer on the tape.
pub fn s2_layer(
    tape: &mut Tape,
    store: &ParamStore,
    p: &S2LayerParams,
    h: Var,
    slots: &SlotIndex,
    w: &EdgeWeights,
) -> Result<LayerOut> {
    let n = slots.n;
    if tape.value(h).rows() != n || tape.value(h).cols() != p.d_in {
        return Err(Error::dim("s2_layer", format!("H is {:?}, expected {n}×{}", tape.value(h).shape(), p.d_in)));
    }
    let w_v = tape.param(store, p.w_v);
    let w_t = tape.param(store, p.w_t);
    let w_o = tape.param(store, p.w_o);
    let w_self = tape.param(store, p.w_self);
    let b = tape.param(store, p.b);
    let log_step = tape.param(store, p.log_step);

    let vals = tape.matmul(h, w_v)?;
    let targets = tape.matmul(h, w_t)?;
    let vg = tape.gather_rows(vals, Arc::clone(&slots.src))?;
    let tg = tape.gather_rows(targets, Arc::clone(&slots.tgt))?;
    let wp = tape.gather_rows(w.plus, Arc::clone(&slots.edge))?;
    let wm = tape.gather_rows(w.minus, Arc::clone(&slots.edge))?;
    let active = tape.add(wp, wm)?;
    let dict = tape.row_scale(vg, active)?;

    // Largest eigenvalue of each node's Gram matrix by power iteration.
    let mut x = active;
    let mut norm = None;
    for _ in 0..POWER_ITERS {
        let y = tape.group_gram(dict, x, Arc::clone(&slots.tgt), n)?;
        let y2 = tape.mul(y, y)?;
        let s = tape.segment_sum(y2, Arc::clone(&slots.tgt), n)?;
        let s = tape.add_const(s, 1e-12);
        let nrm = tape.sqrt(s);
        let ng = tape.gather_rows(nrm, Arc::clone(&slots.tgt))?;
        x = tape.div(y, ng)?;
        norm = Some(nrm);
    }
    let lam_max = norm.expect("at least one power iteration");
    let scale = tape.exp(log_step);
    let twice = tape.scale(lam_max, 2.0);
    let ones = tape.constant(Tensor::vector(vec![1.0; n]));
    let inv = tape.div(ones, twice)?;
    let eta = tape.mul_scalar(inv, scale)?;
    let eta_s = tape.gather_rows(eta, Arc::clone(&slots.tgt))?;
    let tau = tape.scale(eta_s, p.lambda);
    let eta2 = tape.scale(eta_s, 2.0);

    let corr = tape.row_dot(dict, tg)?;
    let mut alpha = tape.constant(Tensor::vector(vec![0.0; slots.len()]));
    for _ in 0..p.steps {
        let gram = tape.group_gram(dict, alpha, Arc::clone(&slots.tgt), n)?;
        let grad = tape.sub(corr, gram)?;
        let stepped = tape.mul(eta2, grad)?;
        let z = tape.add(alpha, stepped)?;
        alpha = tape.soft_threshold(z, tau)?;
    }

    let pos = tape.mul(wp, alpha)?;
    let abs = tape.abs(alpha);
    let neg = tape.mul(wm, abs)?;
    let neg = tape.scale(neg, p.gamma);
    let coef = tape.sub(pos, neg)?;
    let msgs = tape.row_scale(vg, coef)?;
    let agg = tape.segment_sum(msgs, Arc::clone(&slots.tgt), n)?;
    let mut out = tape.matmul(agg, w_o)?;
    if p.self_term {
        let selfp = tape.matmul(h, w_self)?;
        out = tape.add(out, selfp)?;
    }
    let out = tape.add_row(out, b)?;
    Ok(LayerOut { h: out, alpha })
}

/// Groups slot coefficients into per-node codes over the active neighbors.
pub fn codes_from_slots(slots: &SlotIndex, z: &SignedAdjacency, alpha: &[f64], lambda: f64) -> Vec<SparseCode> {
    let mut codes: Vec<SparseCode> = (0..slots.n).map(|_| SparseCode::empty(lambda)).collect();
    for s in 0..slots.len() {
        if z.get(slots.edge[s]) != 0 {
            let c = &mut codes[slots.tgt[s]];
            c.neighbor_ids.push(slots.src[s]);
            c.alpha.push(alpha[s]);
        }
    }
    codes
}

/// `Σ₊ α_j v_j − γ Σ₋ |α_j| v_j` for columns `values[j]` with signs ±1.
pub fn signed_aggregate(values: &[Vec<f64>], alpha: &[f64], signs: &[i8], gamma: f64) -> Result<Vec<f64>> {
    if values.len() != alpha.len() || signs.len() != alpha.len() {
        return Err(Error::dim("signed_aggregate", "values, code and signs must align"));
    }
    let d = values.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for ((v, a), s) in values.iter().zip(alpha).zip(signs) {
        let c = match s {
            1 => *a,
            -1 => -gamma * a.abs(),
            other => return Err(Error::Parameter(format!("sign {other} not in {{-1, +1}}"))),
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// How a plain (unrecorded) layer computes its codes.
#[derive(Clone, Debug, PartialEq)]
pub enum CodeSolver {
    /// Coordinate descent to the given tolerance.
    Exact { tol: f64 },
    /// Unrolled ISTA with the layer's own step rule.
    Unrolled,
    /// Caller-supplied codes, one per node, ordered by neighbor id.
    Fixed(Vec<Vec<f64>>),
}

/// Unrecorded layer evaluation with per-node LASSO problems, for analysis.
pub fn s2_layer_plain(
    g: &GraphDataset,
    z: &SignedAdjacency,
    h: &Tensor,
    store: &ParamStore,
    p: &S2LayerParams,
    solver: &CodeSolver,
) -> Result<(Tensor, Vec<SparseCode>)> {
    let n = g.n();
    if h.rows() != n || h.cols() != p.d_in {
        return Err(Error::dim("s2_layer_plain", format!("H is {:?}, expected {n}×{}", h.shape(), p.d_in)));
    }
    if let CodeSolver::Fixed(a) = solver {
        if a.len() != n {
            return Err(Error::dim("s2_layer_plain", format!("{} fixed codes for {n} nodes", a.len())));
        }
    }
    let vals = h.matmul(store.get(p.w_v))?;
    let targets = h.matmul(store.get(p.w_t))?;
    let step_scale = store.get(p.log_step).item().exp();
    let mut codes = Vec::with_capacity(n);
    let mut agg = vec![0.0; n * p.d_val];
    for i in 0..n {
        let (pos, neg) = neighbor_sets(g, z, i);
        let mut nb: Vec<(usize, i8)> = pos.iter().map(|j| (*j, 1)).chain(neg.iter().map(|j| (*j, -1))).collect();
        nb.sort_unstable();
        let columns: Vec<Vec<f64>> = nb.iter().map(|(j, _)| vals.row(*j).to_vec()).collect();
        let problem = LassoProblem::new(targets.row(i).to_vec(), columns.clone(), p.lambda)?;
        let code = if nb.is_empty() {
            SparseCode::empty(p.lambda)
        } else {
            match solver {
                CodeSolver::Exact { tol } => solve_lasso_cd(&problem, *tol, 100_000)?,
                CodeSolver::Unrolled => {
                    let eta = step_scale / (2.0 * problem.gram_spectral_estimate(POWER_ITERS));
                    approx_sparse_code(&problem, p.steps, Some(eta))?
                }
                CodeSolver::Fixed(all) => SparseCode {
                    alpha: all[i].clone(),
                    ..SparseCode::empty(p.lambda)
                },
            }
            .with_neighbors(nb.iter().map(|(j, _)| *j).collect())?
        };
        let signs: Vec<i8> = nb.iter().map(|(_, s)| *s).collect();
        if !nb.is_empty() {
            let a = signed_aggregate(&columns, &code.alpha, &signs, p.gamma)?;
            agg[i * p.d_val..(i + 1) * p.d_val].copy_from_slice(&a);
        }
        codes.push(code);
    }
    let mut out = Tensor::matrix(n, p.d_val, agg)?.matmul(store.get(p.w_o))?;
    if p.self_term {
        let s = h.matmul(store.get(p.w_self))?;
        out.data_mut().iter_mut().zip(s.data()).for_each(|(o, x)| *o += x);
    }
    let b = store.get(p.b).data().to_vec();
    for r in 0..n {
        let row = &mut out.data_mut()[r * p.d_out..(r + 1) * p.d_out];
        row.iter_mut().zip(&b).for_each(|(o, x)| *o += x);
    }
    Ok((out, codes))
}

/// Everything a recorded forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub probs: Var,
    pub embeddings: Var,
    pub alphas: Vec<Var>,
}

/// Records `L` layers (ReLU after each; layer norm and dropout between
/// layers), then the softmax classifier. Dropout is active only when `rng`
/// is given.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    net: &NetworkParams,
    x: Var,
    slots: &SlotIndex,
    w: &EdgeWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOut> {
    let mut h = x;
    let mut alphas = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let out = s2_layer(tape, store, layer, h, slots, w)?;
        alphas.push(out.alpha);
        h = tape.relu(out.h);
        if l + 1 < net.layers.len() {
            h = tape.layernorm_rows(h)?;
            if let Some(r) = rng.as_deref_mut() {
                if net.dropout > 0.0 {
                    let mask = dropout_mask(tape.value(h).len(), net.dropout, r);
                    h = tape.mask_mul(h, mask)?;
                }
            }
        }
    }
    let wc = tape.param(store, net.w_c);
    let c = tape.param(store, net.c);
    let logits = tape.matmul(h, wc)?;
    let logits = tape.add_row(logits, c)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(ForwardOut {
        probs,
        embeddings: h,
        alphas,
    })
}

/// Per-node class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
}

impl Prediction {
    /// Most probable class, ties broken toward the lower index.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.probs.row(i);
        let mut best = 0;
        for (c, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = c;
            }
        }
        best
    }
}

/// Evaluation-mode forward on a fixed signed graph.
pub fn forward_fixed(g: &GraphDataset, z: &SignedAdjacency, store: &ParamStore, net: &NetworkParams) -> Result<Tensor> {
    forward_fixed_with(g, &SlotIndex::new(g), z, store, net)
}

fn forward_fixed_with(
    g: &GraphDataset,
    slots: &SlotIndex,
    z: &SignedAdjacency,
    store: &ParamStore,
    net: &NetworkParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(g.features().clone());
    let w = EdgeWeights::from_states(&mut tape, z);
    let out = forward(&mut tape, store, net, x, slots, &w, None)?;
    Ok(tape.value(out.probs).clone())
}

/// Random stream for Monte-Carlo sample `k` under a master seed.
pub fn sample_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

/// Average of `k` evaluation forwards on independent hard samples from `ep`.
pub fn predict_mc(
    g: &GraphDataset,
    ep: &EdgePosterior,
    store: &ParamStore,
    net: &NetworkParams,
    k: usize,
    seed: u64,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Parameter("need at least one Monte-Carlo sample".into()));
    }
    let slots = SlotIndex::new(g);
    let runs: Vec<Result<Tensor>> = (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s);
            let (z, _) = sample_signed(ep, 1.0, &mut rng)?;
            forward_fixed_with(g, &slots, &z, store, net)
        })
        .collect();
    let mut acc = vec![0.0; g.n() * net.classes];
    for r in runs {
        for (a, p) in acc.iter_mut().zip(r?.data()) {
            *a += p;
        }
    }
    let inv = 1.0 / k as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(Prediction {
        probs: Tensor::matrix(g.n(), net.classes, acc)?,
    })
}

/// Mean cosine similarity over all unordered pairs of rows.
pub fn mean_pairwise_cosine(h: &Tensor) -> f64 {
    let n = h.rows();
    let norms: Vec<f64> = (0..n).map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum();
            let den = norms[i] * norms[j];
            total += if den > 0.0 { d / den } else { 1.0 };
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
