use nalgebra::DMatrix;
use proptest::prelude::*;

use qsmooth::backward::{backward_step, EffectField};
use qsmooth::classical::{transition_kernel, ClassicalGrid, ClassicalModel};
use qsmooth::engine::{BlockStack, HybridEngine};
use qsmooth::forward::{filter_step, HybridDensityField};
use qsmooth::linalg::{hermiticity_defect, max_abs, min_eigenvalue, trace, Operator, C64};
use qsmooth::operators::{build_fock_operators, driven_oscillator, lindblad_apply, MeasurementModel, QuantumModel};
use qsmooth::scenario::{PropagatorKind, Scenario, ScenarioConfig, TimeGrid};
use qsmooth::smoother::combine;
use qsmooth::truth::{read_record, simulate_truth, write_record};

fn psd(d: usize, entries: &[(f64, f64)]) -> Operator {
    let a = Operator::from_fn(d, d, |i, j| {
        let (re, im) = entries[i * d + j];
        C64::new(re, im)
    });
    &a * a.adjoint() + Operator::identity(d, d) * C64::new(1e-3, 0.0)
}

fn entries(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n)
}

fn engine(dissipative: bool, omega: f64, r: f64) -> HybridEngine {
    let d = 3;
    let fock = build_fock_operators(d, omega, 1.0).unwrap();
    let diss = if dissipative { vec![fock.a.clone() * C64::new(0.3, 0.0)] } else { vec![] };
    let model = QuantumModel::new(d, driven_oscillator(&fock, omega, 1.0, 1), diss, 1.0).unwrap();
    let meas = MeasurementModel::new(vec![fock.q.clone()], DMatrix::from_element(1, 1, r)).unwrap();
    let classical = ClassicalModel::ornstein_uhlenbeck(0.4, 0.7, 0.0, 0.1).unwrap();
    HybridEngine::from_parts(
        model,
        meas,
        classical,
        ClassicalGrid::uniform_1d(-1.5, 1.5, 4).unwrap(),
        TimeGrid { t0: 0.0, dt: 0.02, steps: 1 },
        fock.identity.clone() / C64::new(3.0, 0.0),
        PropagatorKind::Auto,
    )
    .unwrap()
}

fn blocks(raw: &[(f64, f64)]) -> Vec<Operator> {
    raw.chunks(9).map(|c| psd(3, c)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_rows_are_stochastic(lambda in 0.0..2.0f64, sigma in 0.0..2.0f64, points in 2usize..60, dt in 1e-4..0.2f64) {
        let model = ClassicalModel::ornstein_uhlenbeck(lambda, sigma, 0.0, 0.1).unwrap();
        let grid = ClassicalGrid::uniform_1d(-2.0, 2.0, points).unwrap();
        let k = transition_kernel(&model, &grid, 0.0, dt).unwrap();
        for i in 0..k.len() {
            let row = k.row(i);
            let s: f64 = row.iter().map(|e| e.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
            prop_assert!(row.iter().all(|e| e.1 >= 0.0));
        }
    }

    #[test]
    fn filter_step_keeps_fields_hermitian_psd_and_normalized(
        raw in entries(36), dy in -0.5..0.5f64, diss in any::<bool>(), omega in 0.5..2.0f64, r in 0.2..2.0f64,
    ) {
        let engine = engine(diss, omega, r);
        let mut f = HybridDensityField {
            grid: engine.grid.clone(), stack: BlockStack::from_blocks(&blocks(&raw)), log_weight: 0.0, t: 0.0, step: 0,
        };
        f.normalize();
        filter_step(&engine, &mut f, &[dy]).unwrap();
        prop_assert!((f.total_trace() - 1.0).abs() < 1e-12);
        for k in 0..f.stack.len() {
            let op = f.stack.operator(k);
            prop_assert!(hermiticity_defect(&op) < 1e-12);
            prop_assert!(min_eigenvalue(&op) > -1e-9 * max_abs(&op));
        }
    }

    #[test]
    fn backward_step_is_the_adjoint_of_the_forward_step(
        fraw in entries(36), graw in entries(36), dy in -0.5..0.5f64, diss in any::<bool>(),
    ) {
        let engine = engine(diss, 1.1, 0.6);
        let vol = engine.grid.cell_volume();
        let f = HybridDensityField {
            grid: engine.grid.clone(), stack: BlockStack::from_blocks(&blocks(&fraw)), log_weight: 0.0, t: 0.0, step: 0,
        };
        let mut g = EffectField {
            grid: engine.grid.clone(), stack: BlockStack::from_blocks(&blocks(&graw)), log_weight: 0.0, t: 0.02, step: 1,
        };
        let mut stepped = f.clone();
        filter_step(&engine, &mut stepped, &[dy]).unwrap();
        let lhs = BlockStack::pairing(&g.stack, &stepped.stack).0.iter().sum::<f64>() * vol * stepped.log_weight.exp();
        backward_step(&engine, &mut g, &[dy]).unwrap();
        let rhs = BlockStack::pairing(&g.stack, &f.stack).0.iter().sum::<f64>() * vol * g.log_weight.exp();
        prop_assert!(((lhs - rhs) / lhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
        // effect fields stay PSD and carry the K d normalization
        prop_assert!((g.trace_sum() - 12.0).abs() < 1e-10);
        for k in 0..g.stack.len() {
            let op = g.stack.operator(k);
            prop_assert!(min_eigenvalue(&op) > -1e-8 * max_abs(&op));
        }
    }

    #[test]
    fn smoothed_density_is_normalized_and_nonnegative(fraw in entries(36), graw in entries(36)) {
        let engine = engine(false, 1.0, 0.5);
        let mut f = HybridDensityField {
            grid: engine.grid.clone(), stack: BlockStack::from_blocks(&blocks(&fraw)), log_weight: 0.0, t: 0.0, step: 0,
        };
        f.normalize();
        let g = EffectField {
            grid: engine.grid.clone(), stack: BlockStack::from_blocks(&blocks(&graw)), log_weight: 0.0, t: 0.0, step: 0,
        };
        let s = combine(&f, &g).unwrap();
        let vol = engine.grid.cell_volume();
        prop_assert!((s.h.iter().sum::<f64>() * vol - 1.0).abs() < 1e-12);
        prop_assert!(s.h.iter().all(|h| *h >= -1e-12));
        prop_assert!(s.x_cov[(0, 0)] >= 0.0);
    }

    #[test]
    fn lindblad_generator_is_traceless_and_hermitian(raw in entries(16), x in -3.0..3.0f64, gamma in 0.0..1.0f64) {
        let fock = build_fock_operators(4, 1.0, 1.0).unwrap();
        let model = QuantumModel::new(
            4,
            driven_oscillator(&fock, 1.0, 1.0, 1),
            vec![fock.a.clone() * C64::new(gamma, 0.0)],
            1.0,
        ).unwrap();
        let mut rho = psd(4, &raw);
        let tr = trace(&rho);
        rho /= tr;
        let out = lindblad_apply(&model, &[x], &rho).unwrap();
        prop_assert!(trace(&out).norm() < 1e-12);
        prop_assert!(hermiticity_defect(&out) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn seeded_records_are_reproducible_and_round_trip(seed in any::<u64>()) {
        let mut cfg = ScenarioConfig::linear_gaussian_preset();
        cfg.quantum.fock_dim = 6;
        cfg.quantum.truth_fock_dim = Some(12);
        cfg.grid.points = 21;
        cfg.time.t_end = 0.05;
        let scenario = Scenario::from_config(&cfg).unwrap();
        let a = simulate_truth(&scenario, seed).unwrap();
        let b = simulate_truth(&scenario, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_record(&a, &p).unwrap();
        prop_assert_eq!(read_record(&p).unwrap(), a);
    }
}
