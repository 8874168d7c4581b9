//! Structural posterior over signed edge states.
//!
//! A two-layer GCN encodes `[X ‖ onehot(train labels)]`; a pairwise MLP maps
//! each observed edge to three logits in state order `(−1, 0, +1)`. Samples
//! are drawn with the Gumbel-softmax trick, hard in the forward pass and soft
//! in the backward pass.

use std::sync::Arc;

use rand::Rng;

use crate::diffmath::{softmax_in_place, CsrMatrix, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::{GraphDataset, SignedAdjacency};

/// Column of a state in every `m × 3` edge table.
pub fn state_column(s: i8) -> usize {
    (s + 1) as usize
}

pub fn column_state(c: usize) -> i8 {
    c as i8 - 1
}

/// Shared categorical prior `(p⁻, p⁰, p⁺)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignedPrior {
    pub minus: f64,
    pub zero: f64,
    pub plus: f64,
}

impl SignedPrior {
    pub fn new(minus: f64, zero: f64, plus: f64) -> Result<Self> {
        let p = Self { minus, zero, plus };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform() -> Self {
        Self {
            minus: 1.0 / 3.0,
            zero: 1.0 / 3.0,
            plus: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|p| !(*p > 0.0)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("prior {a:?} must be strictly positive and sum to 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.minus, self.zero, self.plus]
    }
}

/// Per-edge probabilities `(π⁻, π⁰, π⁺)`, indexed by edge id.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePosterior {
    probs: Vec<[f64; 3]>,
}

impl EdgePosterior {
    pub fn new(probs: Vec<[f64; 3]>) -> Result<Self> {
        for (e, p) in probs.iter().enumerate() {
            if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("edge {e}: {p:?} is not a probability vector")));
            }
        }
        Ok(Self { probs })
    }

    /// Row-wise softmax of an `m × 3` logit table.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.cols() != 3 || logits.shape().len() != 2 {
            return Err(Error::dim("edge posterior", format!("logits {:?} must be m×3", logits.shape())));
        }
        let probs = (0..logits.rows())
            .map(|e| {
                let mut row = [logits.at(e, 0), logits.at(e, 1), logits.at(e, 2)];
                softmax_in_place(&mut row);
                row
            })
            .collect();
        Ok(Self { probs })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![[1.0 / 3.0; 3]; m],
        }
    }

    /// Point mass on the given states.
    pub fn degenerate(z: &SignedAdjacency) -> Self {
        let probs = z
            .states()
            .iter()
            .map(|s| {
                let mut p = [0.0; 3];
                p[state_column(*s)] = 1.0;
                p
            })
            .collect();
        Self { probs }
    }

    pub fn probs(&self) -> &[[f64; 3]] {
        &self.probs
    }

    pub fn get(&self, e: usize) -> [f64; 3] {
        self.probs[e]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 3, self.probs.iter().flatten().copied().collect()).expect("m×3")
    }
}

/// Layer widths of the encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PosteriorDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub dec_hidden: usize,
}

/// Parameter handles; all matrices act by right multiplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PosteriorParams {
    pub dims: PosteriorDims,
    pub enc_w1: ParamId,
    pub enc_w2: ParamId,
    pub dec_w1: ParamId,
    pub dec_b1: ParamId,
    pub dec_w2: ParamId,
    pub dec_b2: ParamId,
}

impl PosteriorParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dims: PosteriorDims, rng: &mut R) -> Self {
        Self {
            dims,
            enc_w1: store.add_glorot("posterior.enc_w1", dims.input, dims.hidden, rng),
            enc_w2: store.add_glorot("posterior.enc_w2", dims.hidden, dims.embed, rng),
            dec_w1: store.add_glorot("posterior.dec_w1", 2 * dims.embed, dims.dec_hidden, rng),
            dec_b1: store.add_zeros("posterior.dec_b1", &[dims.dec_hidden]),
            dec_w2: store.add_glorot("posterior.dec_w2", dims.dec_hidden, 3, rng),
            dec_b2: store.add_zeros("posterior.dec_b2", &[3]),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.enc_w1, self.enc_w2, self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2]
    }
}

/// Endpoints of every observed edge as gather indices.
#[derive(Clone, Debug)]
pub struct EdgeEnds {
    pub u: Arc<Vec<usize>>,
    pub v: Arc<Vec<usize>>,
}

impl EdgeEnds {
    pub fn new(g: &GraphDataset) -> Self {
        Self {
            u: Arc::new(g.edges().iter().map(|e| e.0).collect()),
            v: Arc::new(g.edges().iter().map(|e| e.1).collect()),
        }
    }
}

/// `[X ‖ onehot(y)]` with one-hot rows only for `train` nodes.
pub fn encoder_input(g: &GraphDataset, train: &[usize]) -> Tensor {
    let (n, d, c) = (g.n(), g.feature_dim(), g.num_classes());
    let mut data = vec![0.0; n * (d + c)];
    for i in 0..n {
        data[i * (d + c)..i * (d + c) + d].copy_from_slice(g.features().row(i));
    }
    for &i in train {
        if let Some(y) = g.label(i) {
            data[i * (d + c) + d + y] = 1.0;
        }
    }
    Tensor::matrix(n, d + c, data).expect("encoder input")
}

/// `Â·ReLU(Â·X·W₁)·W₂` with `Â` the self-loop normalized adjacency.
pub fn encode(tape: &mut Tape, store: &ParamStore, p: &PosteriorParams, ahat: &Arc<CsrMatrix>, input: Var) -> Result<Var> {
    let w1 = tape.param(store, p.enc_w1);
    let w2 = tape.param(store, p.enc_w2);
    let xw = tape.matmul(input, w1)?;
    let h1 = tape.spmm(Arc::clone(ahat), xw)?;
    let h1 = tape.relu(h1);
    let hw = tape.matmul(h1, w2)?;
    tape.spmm(Arc::clone(ahat), hw)
}

fn decode_ordered(tape: &mut Tape, store: &ParamStore, p: &PosteriorParams, a: Var, b: Var) -> Result<Var> {
    let w1 = tape.param(store, p.dec_w1);
    let b1 = tape.param(store, p.dec_b1);
    let w2 = tape.param(store, p.dec_w2);
    let b2 = tape.param(store, p.dec_b2);
    let pair = tape.concat_cols(a, b)?;
    let z = tape.matmul(pair, w1)?;
    let z = tape.add_row(z, b1)?;
    let z = tape.relu(z);
    let o = tape.matmul(z, w2)?;
    tape.add_row(o, b2)
}

/// `m × 3` edge logits, averaged over both orderings of each pair.
pub fn edge_logits(tape: &mut Tape, store: &ParamStore, p: &PosteriorParams, h: Var, ends: &EdgeEnds) -> Result<Var> {
    let hu = tape.gather_rows(h, Arc::clone(&ends.u))?;
    let hv = tape.gather_rows(h, Arc::clone(&ends.v))?;
    let fwd = decode_ordered(tape, store, p, hu, hv)?;
    let bwd = decode_ordered(tape, store, p, hv, hu)?;
    let s = tape.add(fwd, bwd)?;
    Ok(tape.scale(s, 0.5))
}

/// Evaluates the posterior for a dataset without keeping the tape.
pub fn edge_posterior(g: &GraphDataset, train: &[usize], store: &ParamStore, p: &PosteriorParams) -> Result<EdgePosterior> {
    let mut tape = Tape::new();
    let ahat = Arc::new(g.normalized_adjacency());
    let x = tape.constant(encoder_input(g, train));
    let h = encode(&mut tape, store, p, &ahat, x)?;
    let logits = edge_logits(&mut tape, store, p, h, &EdgeEnds::new(g))?;
    EdgePosterior::from_logits(tape.value(logits))
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let mut u: f64 = rng.random();
    while u == 0.0 {
        u = rng.random();
    }
    -(-u.ln()).ln()
}

/// Standard Gumbel noise table `m × 3`.
pub fn draw_gumbel<R: Rng>(m: usize, rng: &mut R) -> Tensor {
    Tensor::matrix(m, 3, (0..3 * m).map(|_| gumbel(rng)).collect()).expect("m×3")
}

/// `softmax((log π + g)/τ)` row-wise.
pub fn relaxed_sample(tape: &mut Tape, log_pi: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let g = tape.constant(noise.clone());
    let s = tape.add(log_pi, g)?;
    let s = tape.scale(s, 1.0 / tau);
    tape.softmax_rows(s)
}

fn argmax3(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..3 {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Row-wise argmax of a relaxed sample: the hard states and their one-hot table.
pub fn harden(soft: &Tensor) -> (SignedAdjacency, Tensor) {
    let m = soft.rows();
    let mut onehot = vec![0.0; 3 * m];
    let states = (0..m)
        .map(|e| {
            let c = argmax3(soft.row(e));
            onehot[3 * e + c] = 1.0;
            column_state(c)
        })
        .collect();
    (
        SignedAdjacency::new(states).expect("valid states"),
        Tensor::matrix(m, 3, onehot).expect("m×3"),
    )
}

/// Gumbel-softmax draw from a fixed posterior: hard states plus the relaxed simplex.
pub fn sample_signed<R: Rng>(ep: &EdgePosterior, tau: f64, rng: &mut R) -> Result<(SignedAdjacency, Vec<[f64; 3]>)> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let mut states = Vec::with_capacity(ep.len());
    let mut soft = Vec::with_capacity(ep.len());
    for p in ep.probs() {
        let mut row = [0.0; 3];
        for c in 0..3 {
            row[c] = (p[c].ln() + gumbel(rng)) / tau;
        }
        let c = argmax3(&row);
        softmax_in_place(&mut row);
        states.push(column_state(c));
        soft.push(row);
    }
    Ok((SignedAdjacency::new(states)?, soft))
}

/// `Σ_e KL(π_e ‖ prior)` with `0·ln 0 = 0`.
pub fn kl_to_prior(ep: &EdgePosterior, prior: &SignedPrior) -> Result<f64> {
    prior.validate()?;
    let q = prior.as_array();
    Ok(ep
        .probs()
        .iter()
        .map(|p| {
            (0..3)
                .filter(|&c| p[c] > 0.0)
                .map(|c| p[c] * (p[c] / q[c]).ln())
                .sum::<f64>()
        })
        .sum())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Parameter(format!("flip rate {eps} outside (0, 0.5)")));
    }
    Ok(())
}

/// Expected log-likelihood of the observed edges under a flip channel:
/// `Σ_e (π⁻ + π⁺)·ln(1−ε) + π⁰·ln ε`.
pub fn recon_loglik(z_soft: &[[f64; 3]], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let (on, off) = ((1.0 - eps).ln(), eps.ln());
    Ok(z_soft.iter().map(|p| (p[0] + p[2]) * on + p[1] * off).sum())
}

/// `Σ_e Σ_s π ⊙ (log π − log prior)` on the tape; `log_prior` is `m × 3`.
pub fn kl_term(tape: &mut Tape, pi: Var, log_pi: Var, log_prior: &Tensor) -> Result<Var> {
    let lp = tape.constant(log_prior.clone());
    let d = tape.sub(log_pi, lp)?;
    let w = tape.mul(pi, d)?;
    Ok(tape.sum(w))
}

/// Tape version of [`recon_loglik`] on an `m × 3` simplex table.
pub fn recon_term(tape: &mut Tape, pi: Var, eps: f64) -> Result<Var> {
    check_eps(eps)?;
    let m = tape.value(pi).rows();
    let (on, off) = ((1.0 - eps).ln(), eps.ln());
    let w = tape.constant(Tensor::matrix(m, 3, [on, off, on].repeat(m))?);
    let p = tape.mul(pi, w)?;
    Ok(tape.sum(p))
}

/// Log prior per edge. Edges whose endpoints are both training nodes put
/// `confidence` on the sign implied by their labels (`+1` same class, `−1`
/// otherwise) and split the rest evenly; all other edges use `prior`.
pub fn prior_table(g: &GraphDataset, train: &[usize], prior: &SignedPrior, confidence: Option<f64>) -> Result<Tensor> {
    prior.validate()?;
    if let Some(c) = confidence {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::Parameter(format!("label prior confidence {c} outside (0, 1)")));
        }
    }
    let mut in_train = vec![false; g.n()];
    for &i in train {
        in_train[i] = true;
    }
    let base = prior.as_array().map(f64::ln);
    let mut data = Vec::with_capacity(3 * g.num_edges());
    for &(u, v) in g.edges() {
        let informed = match (confidence, in_train[u] && in_train[v]) {
            (Some(c), true) => g.label(u).zip(g.label(v)).map(|(a, b)| (a == b, c)),
            _ => None,
        };
        match informed {
            Some((same, c)) => {
                let mut row = [((1.0 - c) / 2.0).ln(); 3];
                row[state_column(if same { 1 } else { -1 })] = c.ln();
                data.extend_from_slice(&row);
            }
            None => data.extend_from_slice(&base),
        }
    }
    Tensor::matrix(g.num_edges(), 3, data)
}
