//! Graph data model: attributed undirected graphs with partial labels,
//! signed edge states, label splits and neighborhood queries.

mod io;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{CsrMatrix, Tensor};
use crate::error::{Error, Result};

pub use io::{load_dataset, load_dataset_dir, load_geom_gcn, save_dataset, LoadReport};

/// Undirected attributed graph with optional per-node labels.
///
/// Edges are stored once per unordered pair as `(u, v)` with `u < v`, in
/// ascending order; the position of a pair in that list is its edge id.
#[derive(Clone, Debug)]
pub struct GraphDataset {
    x: Tensor,
    y: Vec<Option<usize>>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

impl PartialEq for GraphDataset {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x
            && self.y == other.y
            && self.num_classes == other.num_classes
            && self.edges == other.edges
    }
}

fn ordered(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl GraphDataset {
    /// Validates and builds a dataset. Self-loops, duplicate pairs, labels out
    /// of range and endpoints without a feature row are errors; use
    /// [`GraphDataset::from_raw_edges`] to clean an edge list instead.
    pub fn new(x: Tensor, y: Vec<Option<usize>>, num_classes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = x.rows();
        if x.shape().len() != 2 || x.cols() == 0 {
            return Err(Error::Consistency(format!("features must be n×d with d ≥ 1, got {:?}", x.shape())));
        }
        if y.len() != n {
            return Err(Error::Consistency(format!("{} labels for {n} nodes", y.len())));
        }
        if num_classes < 2 {
            return Err(Error::Consistency(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some((i, c)) = y.iter().enumerate().find_map(|(i, c)| c.filter(|c| *c >= num_classes).map(|c| (i, c))) {
            return Err(Error::Consistency(format!("node {i} has class {c} >= {num_classes}")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u == v {
                return Err(Error::Consistency(format!("self-loop on node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::Consistency(format!("edge {u}-{v} references a node without features (n = {n})")));
            }
            pairs.push(ordered(u, v));
        }
        pairs.sort_unstable();
        if let Some(w) = pairs.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Consistency(format!("duplicate edge {}-{}", w[0].0, w[0].1)));
        }
        let index = pairs.iter().enumerate().map(|(e, p)| (*p, e)).collect();
        Ok(Self {
            x,
            y,
            num_classes,
            edges: pairs,
            index,
        })
    }

    /// Drops self-loops and repeated unordered pairs before validating.
    pub fn from_raw_edges(
        x: Tensor,
        y: Vec<Option<usize>>,
        num_classes: usize,
        raw: Vec<(usize, usize)>,
    ) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(raw.len());
        for (u, v) in raw {
            if u == v {
                report.self_loops += 1;
            } else {
                pairs.push(ordered(u, v));
            }
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        report.duplicates = before - pairs.len();
        let g = Self::new(x, y, num_classes, pairs)?;
        Ok((g, report))
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.y
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.y[i]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.y[i].is_some()
    }

    pub fn labeled_mask(&self) -> Vec<bool> {
        self.y.iter().map(Option::is_some).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_id(&self, u: usize, v: usize) -> Option<usize> {
        self.index.get(&ordered(u, v)).copied()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edge_id(u, v).is_some()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n()];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Per node, the list of `(neighbor, edge id)` in ascending neighbor order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n()];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            adj[u].push((v, e));
            adj[v].push((u, e));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(self.x.clone(), self.y.clone(), self.num_classes, edges)
    }

    pub fn with_features(&self, x: Tensor) -> Result<Self> {
        if x.shape() != self.x.shape() {
            return Err(Error::dim("with_features", format!("{:?} vs {:?}", x.shape(), self.x.shape())));
        }
        Self::new(x, self.y.clone(), self.num_classes, self.edges.clone())
    }

    pub fn with_labels(&self, y: Vec<Option<usize>>) -> Result<Self> {
        Self::new(self.x.clone(), y, self.num_classes, self.edges.clone())
    }

    /// Renames node `i` to `perm[i]`, carrying features, labels and edges along.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("relabel needs a permutation of 0..n".into()));
        }
        let d = self.feature_dim();
        let mut x = vec![0.0; n * d];
        let mut y = vec![None; n];
        for i in 0..n {
            x[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(self.x.row(i));
            y[perm[i]] = self.y[i];
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(Tensor::matrix(n, d, x)?, y, self.num_classes, edges)
    }

    /// `D^{-1/2}(A + I)D^{-1/2}` with degrees counted including the self-loop.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let n = self.n();
        let inv_sqrt: Vec<f64> = self.degrees().iter().map(|d| 1.0 / ((*d + 1) as f64).sqrt()).collect();
        let mut trip = Vec::with_capacity(n + 2 * self.edges.len());
        for (i, s) in inv_sqrt.iter().enumerate() {
            trip.push((i, i, s * s));
        }
        for &(u, v) in &self.edges {
            let w = inv_sqrt[u] * inv_sqrt[v];
            trip.push((u, v, w));
            trip.push((v, u, w));
        }
        CsrMatrix::from_triplets(n, n, trip)
    }
}

/// One state in {−1, 0, +1} per observed edge, indexed by edge id.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignedAdjacency {
    states: Vec<i8>,
}

impl SignedAdjacency {
    pub fn new(states: Vec<i8>) -> Result<Self> {
        if let Some(s) = states.iter().find(|s| !matches!(s, -1..=1)) {
            return Err(Error::Parameter(format!("edge state {s} not in {{-1,0,1}}")));
        }
        Ok(Self { states })
    }

    pub fn zeros(m: usize) -> Self {
        Self { states: vec![0; m] }
    }

    pub fn filled(m: usize, state: i8) -> Self {
        Self::new(vec![state; m]).expect("valid state")
    }

    pub fn states(&self) -> &[i8] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, edge: usize) -> i8 {
        self.states[edge]
    }

    /// State of an arbitrary pair; 0 when the pair is not an observed edge.
    pub fn pair(&self, g: &GraphDataset, u: usize, v: usize) -> i8 {
        g.edge_id(u, v).map_or(0, |e| self.states[e])
    }
}

/// `(N⁺_i, N⁻_i)`: neighbors of `i` whose edge state is +1 and −1 respectively.
pub fn neighbor_sets(g: &GraphDataset, z: &SignedAdjacency, i: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let j = if u == i {
            v
        } else if v == i {
            u
        } else {
            continue;
        };
        match z.get(e) {
            1 => pos.push(j),
            -1 => neg.push(j),
            _ => {}
        }
    }
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Fraction of edges with two labeled endpoints whose labels agree.
pub fn homophily_ratio(g: &GraphDataset) -> Result<f64> {
    let mut same = 0usize;
    let mut counted = 0usize;
    for &(u, v) in g.edges() {
        if let (Some(a), Some(b)) = (g.label(u), g.label(v)) {
            counted += 1;
            same += usize::from(a == b);
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedRatio);
    }
    if counted < g.num_edges() {
        log::warn!(
            "homophily ratio computed over {counted} of {} edges; the rest touch unlabeled nodes",
            g.num_edges()
        );
    }
    Ok(same as f64 / counted as f64)
}

/// Disjoint train/validation/test node lists plus the nodes without labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

/// Per-class stratified random split of the labeled nodes.
///
/// Each class is shuffled and cut at `round(f·n_c)`; a part with positive
/// fraction receives at least one node of every class.
pub fn make_split(g: &GraphDataset, fractions: (f64, f64, f64), seed: u64) -> Result<LabelSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut by_class = vec![Vec::new(); g.num_classes()];
    let mut unlabeled = Vec::new();
    for i in 0..g.n() {
        match g.label(i) {
            Some(c) => by_class[c].push(i),
            None => unlabeled.push(i),
        }
    }
    let parts_needed = [ft, fv, fs].iter().filter(|f| **f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, nodes) in by_class.iter_mut().enumerate() {
        if nodes.is_empty() {
            continue;
        }
        if nodes.len() < parts_needed {
            return Err(Error::Split(format!(
                "class {c} has {} nodes but {parts_needed} parts need one each",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        let nc = nodes.len();
        let want = |f: f64| if f > 0.0 { ((f * nc as f64).round() as usize).max(1) } else { 0 };
        let mut nt = want(ft);
        let mut nv = want(fv);
        let min_test = usize::from(fs > 0.0);
        while nt + nv + min_test > nc {
            if nt >= nv && nt > usize::from(ft > 0.0) {
                nt -= 1;
            } else {
                nv -= 1;
            }
        }
        if fs == 0.0 {
            nv = nc - nt;
        }
        train.extend_from_slice(&nodes[..nt]);
        val.extend_from_slice(&nodes[nt..nt + nv]);
        test.extend_from_slice(&nodes[nt + nv..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(LabelSplit {
        train,
        val,
        test,
        unlabeled,
        seed,
    })
}
