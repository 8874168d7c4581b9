use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graphcore::{GraphDataset, SignedAdjacency};
use crate::posterior::{state_column, EdgePosterior};

use super::{forward_fixed_with, NetworkParams, Prediction, SlotIndex};

/// Largest edge count accepted for exhaustive enumeration.
pub const MAX_ENUM_EDGES: usize = 10;

/// All `3^m` signed states in lexicographic order over `(−1, 0, +1)`.
pub fn enumerate_states(m: usize) -> Result<Vec<SignedAdjacency>> {
    if m > MAX_ENUM_EDGES {
        return Err(Error::Parameter(format!("{m} edges is too many to enumerate (limit {MAX_ENUM_EDGES})")));
    }
    let total = 3usize.pow(m as u32);
    (0..total)
        .map(|mut code| {
            let mut states = vec![0i8; m];
            for s in states.iter_mut().rev() {
                *s = (code % 3) as i8 - 1;
                code /= 3;
            }
            SignedAdjacency::new(states)
        })
        .collect()
}

fn joint_prob(ep: &EdgePosterior, z: &SignedAdjacency) -> f64 {
    z.states()
        .iter()
        .enumerate()
        .map(|(e, s)| ep.get(e)[state_column(*s)])
        .product()
}

/// `Σ_Z q(Z)·p_θ(y | X, Z)` over every signed state.
pub fn exact_marginal(g: &GraphDataset, ep: &EdgePosterior, store: &ParamStore, net: &NetworkParams) -> Result<Prediction> {
    if ep.len() != g.num_edges() {
        return Err(Error::dim("exact_marginal", format!("{} posteriors for {} edges", ep.len(), g.num_edges())));
    }
    let slots = SlotIndex::new(g);
    let mut acc = vec![0.0; g.n() * net.classes];
    for z in enumerate_states(g.num_edges())? {
        let w = joint_prob(ep, &z);
        if w == 0.0 {
            continue;
        }
        let p = forward_fixed_with(g, &slots, &z, store, net)?;
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += w * v);
    }
    Ok(Prediction {
        probs: Tensor::matrix(g.n(), net.classes, acc)?,
    })
}

/// Both sides of the structural-approximation risk bound on one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskGapReport {
    pub risk_q: f64,
    pub risk_p: f64,
    pub joint_l1: f64,
    pub lipschitz: f64,
}

impl RiskGapReport {
    pub fn gap(&self) -> f64 {
        (self.risk_q - self.risk_p).abs()
    }

    pub fn bound(&self) -> f64 {
        self.lipschitz * self.joint_l1
    }

    pub fn holds(&self) -> bool {
        self.gap() <= self.bound() + 1e-12
    }
}

/// Mean clamped cross-entropy over labeled nodes.
pub fn clamped_risk(g: &GraphDataset, pred: &Prediction, floor: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, y) in g.labels().iter().enumerate() {
        if let Some(c) = y {
            total -= pred.probs.at(i, *c).clamp(floor, 1.0).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Exact risks of the predictive marginals under `q` and `p`, together with
/// the joint ℓ1 distance `Σ_Z |q(Z) − p(Z)|` and the loss's ℓ1-Lipschitz
/// constant `1/floor`.
pub fn risk_gap_check(
    g: &GraphDataset,
    store: &ParamStore,
    net: &NetworkParams,
    q: &EdgePosterior,
    p: &EdgePosterior,
    floor: f64,
) -> Result<RiskGapReport> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::Parameter(format!("clamp floor {floor} outside (0, 1]")));
    }
    let pq = exact_marginal(g, q, store, net)?;
    let pp = exact_marginal(g, p, store, net)?;
    let joint_l1 = enumerate_states(g.num_edges())?
        .iter()
        .map(|z| (joint_prob(q, z) - joint_prob(p, z)).abs())
        .sum();
    Ok(RiskGapReport {
        risk_q: clamped_risk(g, &pq, floor),
        risk_p: clamped_risk(g, &pp, floor),
        joint_l1,
        lipschitz: 1.0 / floor,
    })
}
