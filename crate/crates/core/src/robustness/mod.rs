//! Graph perturbations and accuracy-versus-magnitude curves.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::graphcore::GraphDataset;

/// Labeled nodes considered as endpoints of an added edge, highest degree first.
pub const ATTACK_POOL: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    DeleteEdges,
    FeatureNoise,
    AdversarialFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.magnitude;
        let ok = match self.kind {
            PerturbationKind::DeleteEdges => (0.0..=1.0).contains(&m),
            PerturbationKind::FeatureNoise | PerturbationKind::AdversarialFlip => m.is_finite() && m >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("magnitude {m} is out of range for {:?}", self.kind)))
        }
    }

    /// Applies the perturbation; the attack uses [`CrossFractionGain`].
    pub fn apply(&self, g: &GraphDataset) -> Result<GraphDataset> {
        self.validate()?;
        match self.kind {
            PerturbationKind::DeleteEdges => delete_edges(g, self.magnitude, self.seed),
            PerturbationKind::FeatureNoise => add_feature_noise(g, self.magnitude, self.seed),
            PerturbationKind::AdversarialFlip => {
                adversarial_flip(g, self.magnitude, &CrossFractionGain, self.seed).map(|a| a.graph)
            }
        }
    }
}

/// Removes `round(ρ·m)` edges chosen uniformly without replacement.
pub fn delete_edges(g: &GraphDataset, rho: f64, seed: u64) -> Result<GraphDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!("deletion fraction {rho} outside [0, 1]")));
    }
    let m = g.num_edges();
    let remove = ((rho * m as f64).round() as usize).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..m).collect();
    let (dropped, _) = ids.partial_shuffle(&mut rng, remove);
    let dropped: HashSet<usize> = dropped.iter().copied().collect();
    let kept = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(e, _)| !dropped.contains(e))
        .map(|(_, &p)| p)
        .collect();
    g.with_edges(kept)
}

/// `X + σ·G` with `G` i.i.d. standard normal, drawn row-major.
pub fn add_feature_noise(g: &GraphDataset, sigma: f64, seed: u64) -> Result<GraphDataset> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise scale {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = g.features();
    let data = x
        .data()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    g.with_features(Tensor::new(x.shape().to_vec(), data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeMove {
    Add(usize, usize),
    Delete(usize, usize),
}

impl EdgeMove {
    pub fn endpoints(self) -> (usize, usize) {
        match self {
            Self::Add(u, v) | Self::Delete(u, v) => (u, v),
        }
    }
}

/// Graph state seen by a scorer during the attack.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub labels: Vec<Option<usize>>,
    pub degrees: Vec<usize>,
    pub edges: HashSet<(usize, usize)>,
    /// Edges with both endpoints labeled and different classes.
    pub cross: usize,
    /// Edges with both endpoints labeled and the same class.
    pub same: usize,
}

impl AttackState {
    fn new(g: &GraphDataset) -> Self {
        let mut s = Self {
            labels: g.labels().to_vec(),
            degrees: g.degrees(),
            edges: g.edges().iter().copied().collect(),
            cross: 0,
            same: 0,
        };
        for &(u, v) in g.edges() {
            s.count(u, v, 1);
        }
        s
    }

    fn count(&mut self, u: usize, v: usize, delta: isize) {
        if let (Some(a), Some(b)) = (self.labels[u], self.labels[v]) {
            let slot = if a == b { &mut self.same } else { &mut self.cross };
            *slot = slot.checked_add_signed(delta).expect("edge counts stay non-negative");
        }
    }

    /// Fraction of labeled edges joining different classes; 0 without labeled edges.
    pub fn cross_fraction(&self) -> f64 {
        cross_fraction(self.cross, self.same)
    }

    fn apply(&mut self, mv: EdgeMove) {
        let (u, v) = mv.endpoints();
        let key = (u.min(v), u.max(v));
        let delta = match mv {
            EdgeMove::Add(..) => {
                self.edges.insert(key);
                1
            }
            EdgeMove::Delete(..) => {
                self.edges.remove(&key);
                -1
            }
        };
        self.degrees[u] = self.degrees[u].checked_add_signed(delta).expect("degree");
        self.degrees[v] = self.degrees[v].checked_add_signed(delta).expect("degree");
        self.count(u, v, delta);
    }
}

fn cross_fraction(cross: usize, same: usize) -> f64 {
    let total = cross + same;
    if total == 0 {
        0.0
    } else {
        cross as f64 / total as f64
    }
}

pub trait MoveScorer: Sync {
    fn score(&self, state: &AttackState, mv: EdgeMove) -> f64;
}

impl<F: Fn(&AttackState, EdgeMove) -> f64 + Sync> MoveScorer for F {
    fn score(&self, state: &AttackState, mv: EdgeMove) -> f64 {
        self(state, mv)
    }
}

/// Increase of the cross-class edge fraction caused by the move.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossFractionGain;

impl MoveScorer for CrossFractionGain {
    fn score(&self, s: &AttackState, mv: EdgeMove) -> f64 {
        let after = match mv {
            EdgeMove::Add(..) => cross_fraction(s.cross + 1, s.same),
            EdgeMove::Delete(..) => cross_fraction(s.cross, s.same.saturating_sub(1)),
        };
        after - s.cross_fraction()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub budget: usize,
    pub moves: Vec<EdgeMove>,
    /// Cross-class fraction before the attack and after each move.
    pub cross_fraction: Vec<f64>,
}

impl AttackReport {
    /// True when legal moves ran out before the budget did.
    pub fn partial(&self) -> bool {
        self.moves.len() < self.budget
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub graph: GraphDataset,
    pub report: AttackReport,
}

fn legal_moves(s: &AttackState) -> Vec<EdgeMove> {
    let mut pool: Vec<usize> = (0..s.labels.len()).filter(|&i| s.labels[i].is_some()).collect();
    pool.sort_by_key(|&i| (std::cmp::Reverse(s.degrees[i]), i));
    pool.truncate(ATTACK_POOL);
    let mut moves = Vec::new();
    for (a, &u) in pool.iter().enumerate() {
        for &v in &pool[a + 1..] {
            let key = (u.min(v), u.max(v));
            if s.labels[u] != s.labels[v] && !s.edges.contains(&key) {
                moves.push(EdgeMove::Add(key.0, key.1));
            }
        }
    }
    let mut deletions: Vec<(usize, usize)> = s
        .edges
        .iter()
        .copied()
        .filter(|&(u, v)| s.labels[u].is_some() && s.labels[u] == s.labels[v])
        .collect();
    deletions.sort_unstable();
    moves.extend(deletions.into_iter().map(|(u, v)| EdgeMove::Delete(u, v)));
    moves
}

/// Greedy structure attack with budget `round(β·m)`.
///
/// Each step adds a cross-class edge among the [`ATTACK_POOL`] highest-degree
/// labeled nodes or deletes a same-class edge, taking the move with the highest
/// score. Ties go to the larger endpoint degree product, then to a seeded
/// random order. Stops early, with a partial report, when no legal move is left.
pub fn adversarial_flip(g: &GraphDataset, beta: f64, scorer: &dyn MoveScorer, seed: u64) -> Result<AttackOutcome> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Parameter(format!("attack budget fraction {beta} must be finite and non-negative")));
    }
    let budget = (beta * g.num_edges() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AttackState::new(g);
    let mut report = AttackReport {
        budget,
        moves: Vec::with_capacity(budget),
        cross_fraction: vec![state.cross_fraction()],
    };
    while report.moves.len() < budget {
        let mut moves = legal_moves(&state);
        if moves.is_empty() {
            log::warn!("attack stopped after {} of {budget} moves: no legal move left", report.moves.len());
            break;
        }
        moves.shuffle(&mut rng);
        let key = |mv: EdgeMove| {
            let (u, v) = mv.endpoints();
            (scorer.score(&state, mv), state.degrees[u] * state.degrees[v])
        };
        let mut best = moves[0];
        let mut best_key = key(best);
        for &mv in &moves[1..] {
            let k = key(mv);
            if k.0 > best_key.0 || (k.0 == best_key.0 && k.1 > best_key.1) {
                best = mv;
                best_key = k;
            }
        }
        state.apply(best);
        report.moves.push(best);
        report.cross_fraction.push(state.cross_fraction());
    }
    let mut edges: Vec<(usize, usize)> = state.edges.into_iter().collect();
    edges.sort_unstable();
    Ok(AttackOutcome {
        graph: g.with_edges(edges)?,
        report,
    })
}

/// One (magnitude, seed) cell; `accuracy` is `None` when training aborted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub magnitude: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub magnitude: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub completed: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub kind: PerturbationKind,
    pub cells: Vec<CurveCell>,
    pub rows: Vec<CurveRow>,
}

/// Mean and sample standard deviation (`n − 1`); the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of the perturbation applied in the cell trained with `seed`.
pub fn cell_seed(base: u64, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(seed.wrapping_add(1));
    rng.random()
}

/// Perturbs `g` at each magnitude and trains once per seed.
///
/// `trainer(graph, seed)` returns the test accuracy. Failed cells are kept as
/// missing and excluded from the row statistics.
pub fn robustness_curve<F>(
    g: &GraphDataset,
    trainer: F,
    kind: PerturbationKind,
    grid: &[f64],
    seeds: &[u64],
    base_seed: u64,
) -> Result<CurveTable>
where
    F: Fn(&GraphDataset, u64) -> Result<f64> + Sync,
{
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("magnitude grid and seed list must be non-empty".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter(format!("magnitude grid {grid:?} is not sorted ascending")));
    }
    for &m in grid {
        PerturbationSpec::new(kind, m, 0).validate()?;
    }
    let jobs: Vec<(f64, u64)> = grid.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let cells: Vec<CurveCell> = jobs
        .par_iter()
        .map(|&(magnitude, seed)| {
            let spec = PerturbationSpec::new(kind, magnitude, cell_seed(base_seed, seed));
            let run = spec.apply(g).and_then(|pg| trainer(&pg, seed));
            match run {
                Ok(acc) => CurveCell {
                    magnitude,
                    seed,
                    accuracy: Some(acc),
                    error: None,
                },
                Err(e) => {
                    log::warn!("cell {kind:?} {magnitude} seed {seed} failed: {e}");
                    CurveCell {
                        magnitude,
                        seed,
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let rows = cells
        .chunks(seeds.len())
        .map(|chunk| {
            let acc: Vec<f64> = chunk.iter().filter_map(|c| c.accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&acc);
            CurveRow {
                magnitude: chunk[0].magnitude,
                mean_acc,
                std_acc,
                completed: acc.len(),
                missing: chunk.len() - acc.len(),
            }
        })
        .collect();
    Ok(CurveTable { kind, cells, rows })
}

impl CurveTable {
    /// CSV with columns `magnitude,mean_acc,std_acc,completed,missing`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with columns `magnitude,seed,accuracy,error`; missing cells have empty accuracy.
    pub fn write_cells_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for cell in &self.cells {
            w.serialize(cell)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
