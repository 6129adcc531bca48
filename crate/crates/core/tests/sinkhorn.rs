mod common;

use common::lp::simplex_ot;
use common::rng::{cost_matrix, seeded, simplex_point};
use ontex::alignment::{
    alignment_losses, sinkhorn, sinkhorn_gradient, AlignmentConfig, MemoryBank, RepresentationVector,
    SinkhornParams, TransportProblem,
};
use ontex::matrix::Matrix;
use ontex::ontology::{OntologyVector, PriorMatrix};
use rand::Rng;

fn problem(p: &[f64], q: &[f64], c: &[Vec<f64>]) -> TransportProblem<f64> {
    TransportProblem::from_parts(p.to_vec(), q.to_vec(), Matrix::from_rows(c).unwrap()).unwrap()
}

fn params(reg: f64, tolerance: f64) -> SinkhornParams<f64> {
    SinkhornParams { reg, max_iters: 1_000_000, tolerance }
}

#[test]
fn sharp_cost_approaches_exact_transport() {
    let mut rng = seeded(11);
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let (p, q, c) = (simplex_point(&mut rng, n), simplex_point(&mut rng, m), cost_matrix(&mut rng, n, m));
        let exact = simplex_ot(&p, &q, &c);
        let sol = sinkhorn(&problem(&p, &q, &c), &params(1e-3, 1e-9)).unwrap();
        assert!((sol.cost - exact).abs() <= 1e-3, "{} vs {exact}", sol.cost);
        assert!(sol.residual <= 1e-6);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = seeded(23);
    let h = 1e-6;
    for case in 0..100 {
        let m = rng.random_range(2..=5);
        let reg = [0.1, 0.05, 0.01][case % 3];
        let (p, q, c) = (simplex_point(&mut rng, m), simplex_point(&mut rng, m), cost_matrix(&mut rng, m, m));
        let prm = params(reg, 1e-14);
        let grad = sinkhorn_gradient(&problem(&p, &q, &c), &prm).unwrap();
        let mut fd = Vec::with_capacity(m);
        let mut an = Vec::with_capacity(m);
        for i in 0..m {
            // Tangent direction e_i - 1/m keeps the perturbed point on the simplex.
            let dir: Vec<f64> = (0..m).map(|k| f64::from(u8::from(k == i)) - 1.0 / m as f64).collect();
            let shifted = |s: f64| -> Vec<f64> { p.iter().zip(&dir).map(|(a, d)| a + s * d).collect() };
            let plus = sinkhorn(&problem(&shifted(h), &q, &c), &prm).unwrap().cost;
            let minus = sinkhorn(&problem(&shifted(-h), &q, &c), &prm).unwrap().cost;
            fd.push((plus - minus) / (2.0 * h));
            an.push(grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>());
        }
        let scale = fd.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-8);
        let err = fd.iter().zip(&an).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err / scale <= 1e-4, "case {case}: {an:?} vs {fd:?}");
    }
}

#[test]
fn plans_meet_marginals() {
    let mut rng = seeded(5);
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let (p, q, c) = (simplex_point(&mut rng, n), simplex_point(&mut rng, m), cost_matrix(&mut rng, n, m));
        let sol = sinkhorn(&problem(&p, &q, &c), &params(0.01, 1e-7)).unwrap();
        let rows = sol.plan.row_sums();
        let cols = sol.plan.col_sums();
        let worst = rows
            .iter()
            .zip(&p)
            .chain(cols.iter().zip(&q))
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(worst <= 1e-6);
        assert!(sol.plan.all_finite() && sol.cost.is_finite());
    }
}

#[test]
fn sharp_cost_tightens_as_regularization_shrinks() {
    let mut rng = seeded(31);
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let (p, q, c) = (simplex_point(&mut rng, n), simplex_point(&mut rng, n), cost_matrix(&mut rng, n, n));
        let exact = simplex_ot(&p, &q, &c);
        let gaps: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&r| sinkhorn(&problem(&p, &q, &c), &params(r, 1e-10)).unwrap().cost - exact)
            .collect();
        assert!(gaps.iter().all(|&g| g >= -1e-7));
        assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-7), "{gaps:?}");
    }
}

fn random_bank(rng: &mut impl Rng, size: usize, rep_dim: usize, ont_dim: usize) -> Vec<(RepresentationVector<f64>, OntologyVector)> {
    (0..size)
        .map(|k| {
            let v: Vec<f64> = (0..rep_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let active: Vec<usize> = (0..ont_dim).filter(|_| rng.random_bool(0.3)).collect();
            (RepresentationVector::new(format!("e{k}"), v).unwrap(), OntologyVector::from_active(ont_dim, &active))
        })
        .collect()
}

#[test]
fn loss_ignores_representation_scale() {
    let mut rng = seeded(41);
    let entries = random_bank(&mut rng, 12, 6, 8);
    let bank = MemoryBank::prefill(entries.clone()).unwrap();
    let prior = PriorMatrix::identity(8);
    let cfg = AlignmentConfig { max_iters: 100_000, ..AlignmentConfig::default() };
    let base = alignment_losses(&entries, &bank, &prior, &cfg).unwrap();
    let scaled: Vec<_> = entries
        .iter()
        .map(|(r, o)| {
            let v = r.values.iter().map(|x| x * 7.5).collect();
            (RepresentationVector::new(r.example_id.clone(), v).unwrap(), o.clone())
        })
        .collect();
    let again = alignment_losses(&scaled, &bank, &prior, &cfg).unwrap();
    for (a, b) in base.iter().zip(&again) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        assert!(a.is_finite() && *a >= 0.0);
    }
}

#[test]
fn default_iteration_budget_converges_on_moderate_banks() {
    let mut rng = seeded(43);
    let entries = random_bank(&mut rng, 64, 16, 43);
    let bank = MemoryBank::prefill(entries.clone()).unwrap();
    let prior = PriorMatrix::identity(43);
    let losses = alignment_losses(&entries, &bank, &prior, &AlignmentConfig::default()).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn gradient_direction_stabilizes_as_regularization_shrinks() {
    let mut rng = seeded(47);
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    for _ in 0..10 {
        let (p, q, c) = (simplex_point(&mut rng, 3), simplex_point(&mut rng, 3), cost_matrix(&mut rng, 3, 3));
        let pr = problem(&p, &q, &c);
        let sharp = sinkhorn_gradient(&pr, &params(1e-4, 1e-9)).unwrap();
        let near = sinkhorn_gradient(&pr, &params(1e-3, 1e-9)).unwrap();
        assert!(cosine(&near, &sharp) >= 0.99, "{near:?} vs {sharp:?}");
    }
}

mod finite {
    use super::*;
    use proptest::prelude::*;

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..1.0f64, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64)> {
        (1usize..6, 1usize..6).prop_flat_map(|(n, m)| {
            (
                simplex(n),
                simplex(m),
                prop::collection::vec(prop::collection::vec(0.0..=1.0f64, m), n),
                prop::sample::select(vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn iterations_stay_finite((p, q, c, reg) in case()) {
            let prm = SinkhornParams { reg, max_iters: 2_000, tolerance: 1e-6 };
            match sinkhorn(&problem(&p, &q, &c), &prm) {
                Ok(sol) => {
                    prop_assert!(sol.cost.is_finite() && sol.plan.all_finite());
                    prop_assert!(sol.residual <= 1e-6);
                }
                Err(ontex::alignment::AlignmentError::NonConvergence { residual, .. }) => {
                    prop_assert!(residual.is_finite());
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
