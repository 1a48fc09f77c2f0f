mod common;

use minugraph::diagnostics::{gradient_suite, GRAD_CHECK_COMPONENTS, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
use minugraph::numeric::{grad_check, Matrix, Mode, RunningStats, Tape, Var};
use minugraph::rng;
use minugraph::training::{distance, Triplet};
use minugraph::Result;
use proptest::prelude::*;

fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (_, cols) = tape.value(x).shape();
    let w = common::matrix(&mut rng::stream(seed, 77), cols, 1, false);
    let w = tape.constant(w);
    let y = tape.matmul(x, w)?;
    Ok(tape.sum(y))
}

fn assert_passes(params: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = grad_check(params, f, GRAD_CHECK_STEP).unwrap();
    assert!(
        report.max_relative_error < GRAD_CHECK_TOLERANCE,
        "max relative error {}",
        report.max_relative_error
    );
}

#[test]
fn every_component_passes_for_several_seeds() {
    for seed in 0..3 {
        let reports = gradient_suite(seed, None).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.component).collect();
        assert_eq!(names, GRAD_CHECK_COMPONENTS);
        for r in reports {
            assert!(
                r.passed(),
                "seed {seed} {}: {}",
                r.component,
                r.report.max_relative_error
            );
        }
    }
}

#[test]
fn every_injected_fault_is_reported_by_its_component_only() {
    for fault in GRAD_CHECK_COMPONENTS {
        let reports = gradient_suite(1, Some(fault)).unwrap();
        for r in reports {
            assert_eq!(r.passed(), r.component != fault, "fault {fault} at {}", r.component);
        }
    }
}

#[test]
fn elementary_ops_pass() {
    let mut r = rng::stream(5, 0);
    let a = common::matrix(&mut r, 5, 4, false);
    let b = common::matrix(&mut r, 3, 4, false);
    assert_passes(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul_bt(v[0], v[1])?;
        let y = t.gelu(y);
        weighted(t, y, 1)
    });
    assert_passes(&[a.clone(), a.clone()], |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        let y = t.max_pool_rows(y)?;
        weighted(t, y, 2)
    });
    assert_passes(std::slice::from_ref(&a), |t, v| {
        let y = t.l2_normalize_rows(v[0]);
        weighted(t, y, 3)
    });
    let r0 = t_row(&a, 0);
    let r1 = t_row(&a, 1);
    assert_passes(&[r0, r1], |t, v| {
        let y = t.stack_rows(&[v[0], v[1], v[0]])?;
        let m = t.mean(y);
        let w = weighted(t, y, 4)?;
        t.add(m, w)
    });
}

fn t_row(m: &Matrix, r: usize) -> Matrix {
    Matrix::from_rows(&[m.row(r)]).unwrap()
}

#[test]
fn batchnorm_passes_in_both_modes() {
    let mut r = rng::stream(6, 0);
    let x = common::matrix(&mut r, 9, 3, false);
    let gamma = common::matrix(&mut r, 1, 3, false);
    let beta = common::matrix(&mut r, 1, 3, false);
    let mut running = RunningStats::new(3);
    running.mean = vec![0.1, -0.2, 0.3];
    running.var = vec![0.5, 1.5, 2.0];
    for mode in [Mode::Train, Mode::Infer] {
        assert_passes(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &running, mode)?;
            weighted(t, y, 5)
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_loss_gradient_matches_away_from_the_kink(seed in 0u64..100_000, scale in 0.1f64..2.0) {
        let mut r = rng::stream(seed, 9);
        let x = common::matrix(&mut r, 3, 5, false);
        let x = Matrix::from_vec(3, 5, x.values().iter().map(|v| v * scale).collect()).unwrap();
        let margin = 0.5;
        let gap = distance(x.row(0), x.row(1)) - distance(x.row(0), x.row(2)) + margin;
        prop_assume!(gap.abs() > 1e-4);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let report = grad_check(&[x], |tape, v| tape.triplet_loss(v[0], &t, margin), GRAD_CHECK_STEP).unwrap();
        prop_assert!(report.max_relative_error < GRAD_CHECK_TOLERANCE);
    }
}
