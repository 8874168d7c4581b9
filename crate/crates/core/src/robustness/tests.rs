use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::csbm::{generate, CsbmConfig};
use crate::graphcore::homophily_ratio;

fn graph_with_edges(n: usize, classes: usize, m: usize, seed: u64) -> GraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = HashSet::new();
    while edges.len() < m {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let mut edges: Vec<_> = edges.into_iter().collect();
    edges.sort_unstable();
    let x = Tensor::matrix(n, 3, (0..3 * n).map(|i| i as f64 * 0.1).collect()).unwrap();
    let y = (0..n).map(|i| Some(i % classes)).collect();
    GraphDataset::new(x, y, classes, edges).unwrap()
}

#[test]
fn deletion_extremes_and_rounding() {
    let g = graph_with_edges(40, 2, 100, 1);
    assert_eq!(delete_edges(&g, 0.0, 3).unwrap(), g);
    assert_eq!(delete_edges(&g, 1.0, 3).unwrap().num_edges(), 0);
    let half = delete_edges(&g, 0.5, 3).unwrap();
    assert_eq!(half.num_edges(), 50);
    assert_eq!(half.features(), g.features());
    assert_eq!(half.labels(), g.labels());
    assert!(delete_edges(&g, 1.5, 3).is_err());
}

#[test]
fn deletion_is_roughly_uniform() {
    let g = graph_with_edges(30, 2, 20, 2);
    let mut kept = [0usize; 20];
    let trials = 4000;
    for s in 0..trials {
        let h = delete_edges(&g, 0.5, s).unwrap();
        for (e, pair) in g.edges().iter().enumerate() {
            if h.has_edge(pair.0, pair.1) {
                kept[e] += 1;
            }
        }
    }
    let sd = (trials as f64 * 0.25).sqrt();
    for k in kept {
        assert!((k as f64 - trials as f64 / 2.0).abs() < 4.0 * sd, "{k}");
    }
}

#[test]
fn feature_noise_moments() {
    let base = graph_with_edges(1000, 2, 50, 3);
    let x = Tensor::matrix(1000, 10, vec![0.5; 10_000]).unwrap();
    let g = GraphDataset::new(x, base.labels().to_vec(), 2, base.edges().to_vec()).unwrap();
    assert_eq!(add_feature_noise(&g, 0.0, 9).unwrap(), g);
    let h = add_feature_noise(&g, 1.0, 9).unwrap();
    let diff: Vec<f64> = h.features().data().iter().zip(g.features().data()).map(|(a, b)| a - b).collect();
    let (mean, sd) = mean_std(&diff);
    assert!(mean.abs() < 0.05, "{mean}");
    assert!((sd * sd - 1.0).abs() < 0.05, "{}", sd * sd);
    assert_eq!(h.edges(), g.edges());
    assert_eq!(h.labels(), g.labels());
    assert_eq!(homophily_ratio(&h).unwrap(), homophily_ratio(&g).unwrap());
}

#[test]
fn zero_budget_attack_is_identity() {
    let g = graph_with_edges(20, 2, 30, 4);
    let out = adversarial_flip(&g, 0.0, &CrossFractionGain, 1).unwrap();
    assert_eq!(out.graph, g);
    assert!(out.report.moves.is_empty());
    assert!(!out.report.partial());
}

#[test]
fn attack_raises_cross_fraction_every_step() {
    let g = graph_with_edges(20, 2, 50, 5);
    let out = adversarial_flip(&g, 0.1, &CrossFractionGain, 2).unwrap();
    assert_eq!(out.report.moves.len(), 5);
    for w in out.report.cross_fraction.windows(2) {
        assert!(w[1] >= w[0], "{:?}", out.report.cross_fraction);
    }
    let changed = g.edges().iter().filter(|e| !out.graph.has_edge(e.0, e.1)).count()
        + out.graph.edges().iter().filter(|e| !g.has_edge(e.0, e.1)).count();
    assert_eq!(changed, 5);
}

#[test]
fn attack_lowers_homophily_on_homophilic_csbm() {
    let cfg = CsbmConfig::orthogonal(80, 2, 2, 1.0, 0.2, 0.02, 0.5, 6);
    let (g, _) = generate(&cfg).unwrap();
    let before = homophily_ratio(&g).unwrap();
    let out = adversarial_flip(&g, 0.2, &CrossFractionGain, 3).unwrap();
    assert!(homophily_ratio(&out.graph).unwrap() < before);
}

#[test]
fn attack_prefers_high_degree_endpoints() {
    // Hub 0 (class 0) has degree 4; node 1 is the busiest class-1 node.
    let mut edges: Vec<(usize, usize)> = (1..5).map(|k| (0, 2 * k)).collect();
    edges.extend([(1, 3), (1, 5)]);
    let x = Tensor::matrix(10, 1, vec![0.0; 10]).unwrap();
    let y = (0..10).map(|i| Some(i % 2)).collect();
    let g = GraphDataset::new(x, y, 2, edges).unwrap();
    let adds_only = |s: &AttackState, mv: EdgeMove| match mv {
        EdgeMove::Add(..) => CrossFractionGain.score(s, mv),
        EdgeMove::Delete(..) => -1.0,
    };
    let out = adversarial_flip(&g, 0.2, &adds_only, 0).unwrap();
    assert_eq!(out.report.moves, vec![EdgeMove::Add(0, 1)]);
}

#[test]
fn exhausted_moves_give_partial_report() {
    // Two labeled nodes of different classes: one addition, then nothing.
    let x = Tensor::matrix(3, 1, vec![0.0; 3]).unwrap();
    let g = GraphDataset::new(x, vec![Some(0), Some(1), None], 2, vec![(0, 2)]).unwrap();
    let out = adversarial_flip(&g, 3.0, &CrossFractionGain, 0).unwrap();
    assert_eq!(out.report.budget, 3);
    assert_eq!(out.report.moves, vec![EdgeMove::Add(0, 1)]);
    assert!(out.report.partial());
    assert_eq!(out.graph.num_edges(), 2);
}

#[test]
fn spec_ranges() {
    use PerturbationKind::*;
    assert!(PerturbationSpec::new(DeleteEdges, 1.2, 0).validate().is_err());
    assert!(PerturbationSpec::new(FeatureNoise, -0.1, 0).validate().is_err());
    assert!(PerturbationSpec::new(AdversarialFlip, f64::NAN, 0).validate().is_err());
    assert!(PerturbationSpec::new(AdversarialFlip, 2.0, 0).validate().is_ok());
    let json = r#"{"kind":"feature-noise","magnitude":0.3,"seed":4}"#;
    let spec: PerturbationSpec = serde_json::from_str(json).unwrap();
    assert_eq!(spec, PerturbationSpec::new(FeatureNoise, 0.3, 4));
    assert!(serde_json::from_str::<PerturbationSpec>(r#"{"kind":"delete-edges","magnitude":0.1,"x":1}"#).is_err());
}

#[test]
fn mean_std_examples() {
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

fn edge_count_trainer(g: &GraphDataset, seed: u64) -> Result<f64> {
    if seed == 99 && g.num_edges() < 10 {
        return Err(Error::Diverged {
            epoch: 0,
            detail: "forced".into(),
        });
    }
    Ok(g.num_edges() as f64 + seed as f64 * 1e-3)
}

#[test]
fn curve_shape_and_missing_cells() {
    let g = graph_with_edges(30, 2, 40, 7);
    let grid = [0.0, 0.5, 0.9];
    let t = robustness_curve(&g, edge_count_trainer, PerturbationKind::DeleteEdges, &grid, &[1, 2, 99], 5).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.cells.len(), 9);
    assert_eq!(t.cells[0].accuracy, edge_count_trainer(&g, 1).ok());
    assert_eq!(t.rows[0].missing, 0);
    assert_eq!(t.rows[2].missing, 1);
    assert_eq!(t.rows[2].completed, 2);
    assert!(t.cells[8].error.as_deref().unwrap().contains("forced"));
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("magnitude,mean_acc,std_acc,completed,missing"));
}

#[test]
fn curve_rejects_unsorted_grid() {
    let g = graph_with_edges(10, 2, 10, 8);
    let r = robustness_curve(&g, edge_count_trainer, PerturbationKind::DeleteEdges, &[0.5, 0.1], &[1], 0);
    assert!(matches!(r, Err(Error::Parameter(_))));
}

#[test]
fn relabeling_commutes_at_deterministic_extremes() {
    let g = graph_with_edges(12, 3, 20, 9);
    let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
    let r = g.relabel(&perm).unwrap();
    assert_eq!(delete_edges(&g, 1.0, 1).unwrap().relabel(&perm).unwrap(), delete_edges(&r, 1.0, 2).unwrap());
    assert_eq!(add_feature_noise(&g, 0.0, 1).unwrap().relabel(&perm).unwrap(), r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perturbations_are_deterministic_and_subset(seed in 0u64..1000, rho in 0.0f64..=1.0, beta in 0.0f64..0.5) {
        let g = graph_with_edges(25, 3, 40, seed);
        let a = delete_edges(&g, rho, seed).unwrap();
        prop_assert_eq!(&a, &delete_edges(&g, rho, seed).unwrap());
        prop_assert!(a.edges().iter().all(|e| g.has_edge(e.0, e.1)));
        prop_assert_eq!(a.num_edges(), 40 - (rho * 40.0).round() as usize);
        let f = add_feature_noise(&g, 0.7, seed).unwrap();
        prop_assert_eq!(homophily_ratio(&f).unwrap(), homophily_ratio(&g).unwrap());
        let x = adversarial_flip(&g, beta, &CrossFractionGain, seed).unwrap();
        let y = adversarial_flip(&g, beta, &CrossFractionGain, seed).unwrap();
        prop_assert_eq!(&x.graph, &y.graph);
        let changed = g.edges().iter().filter(|e| !x.graph.has_edge(e.0, e.1)).count()
            + x.graph.edges().iter().filter(|e| !g.has_edge(e.0, e.1)).count();
        prop_assert_eq!(changed, x.report.moves.len());
        prop_assert_eq!(x.report.moves.len(), x.report.budget);
    }
}
