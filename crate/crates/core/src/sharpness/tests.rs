use super::*;
use crate::arch::{res_mlp_residue, ArchSpec};
use crate::module::{compose, concat, power, residual, Mask};
use crate::tensor::seeded_rng;
use rand::Rng;

fn t(alpha: f64, beta: f64, gamma: f64, mu: f64, m: f64) -> SharpnessTriple {
    SharpnessTriple::new(alpha, beta, gamma, mu, m).unwrap()
}

fn close(a: &SharpnessTriple, b: &SharpnessTriple, tol: f64) -> bool {
    a.components()
        .iter()
        .zip(b.components())
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn compose_examples() {
    let lin = t(0.0, 1.0, 0.0, 1.0, 1.0);
    let c = compose_sharpness(&lin, &lin).unwrap();
    assert!(close(&c, &t(0.5, 1.0, 0.0, 1.0, 2.0), 1e-15));
    assert_eq!(c.mass, 2.0);
    let m2 = t(0.3, 0.7, 1.1, 1.0, 1.0);
    let c = compose_sharpness(&t(0.0, 0.0, 0.0, 1.0, 1e-12), &m2).unwrap();
    assert!(close(&c, &m2, 1e-10));
    let g = compose_sharpness(&t(0.0, 0.0, 1.0, 2.0, 1.0), &t(0.0, 0.0, 1.0, 3.0, 1.0)).unwrap();
    assert_eq!(g.gamma, 7.0);
    assert_eq!(g.sensitivity, 6.0);
}

#[test]
fn zero_mass_rules() {
    let bond = t(0.0, 0.0, 2.0, 0.5, 0.0);
    assert!(compose_sharpness(&bond, &bond).is_err());
    assert!(concat_sharpness(&bond, &bond).is_err());
    let inner = compose_limit(&bond, &bond).unwrap();
    assert_eq!(inner.components(), [0.0, 0.0, 0.5 * 2.0 + 0.25 * 2.0]);
    assert!(compose_sharpness(&t(0.0, 1.0, 0.0, 1.0, 1.0), &t(0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
}

#[test]
fn concat_examples() {
    let lin = t(0.0, 1.0, 0.0, 1.0, 1.0);
    let c = concat_sharpness(&lin, &lin).unwrap();
    assert!(close(&c, &t(0.0, 1.0, 0.0, 2.0, 2.0), 1e-15));
    let g = concat_sharpness(&t(0.0, 0.0, 2.0, 1.0, 1.0), &t(0.0, 0.0, 3.0, 1.0, 1.0)).unwrap();
    assert_eq!(g.gamma, 5.0);
    let p = concat_sharpness(&t(0.4, 0.6, 0.0, 1.0, 1.0), &t(9.0, 9.0, 0.0, 1.0, 0.0)).unwrap();
    assert_eq!((p.alpha, p.beta), (0.4, 0.6));
}

#[test]
fn residual_examples() {
    let one = t(1.0, 1.0, 1.0, 1.0, 1.0);
    let c = residual_sharpness(&one, 2, ResidualMode::ClosedForm).unwrap();
    assert!(close(&c, &t(1.625, 1.25, 1.0, 1.0, 2.0), 1e-15));
    let r = residual_sharpness(&one, 2, ResidualMode::Recurrence).unwrap();
    assert!(close(&r, &c, 1e-14));
    let base = t(0.2, 0.3, 0.4, 1.0, 1.0);
    for mode in [ResidualMode::ClosedForm, ResidualMode::Recurrence] {
        assert!(close(
            &residual_sharpness(&base, 1, mode).unwrap(),
            &base,
            1e-15
        ));
    }
    let b = residual_sharpness(&one, 7, ResidualMode::Bound).unwrap();
    assert!(close(&b, &t(7.0 / 3.0, 1.5, 1.0, 1.0, 7.0), 1e-15));
    assert!(residual_sharpness(&t(1.0, 1.0, 1.0, 2.0, 1.0), 2, ResidualMode::ClosedForm).is_err());
    assert!(residual_sharpness(&one, 0, ResidualMode::ClosedForm).is_err());
}

#[test]
fn residual_recurrence_matches_closed_form_and_bound() {
    let mut rng = seeded_rng(1);
    for _ in 0..20 {
        let base = t(
            rng.random(),
            rng.random(),
            rng.random(),
            1.0,
            rng.random_range(0.1..3.0),
        );
        let bound = residual_sharpness(&base, 1, ResidualMode::Bound).unwrap();
        for l in 1..=64 {
            let r = residual_sharpness(&base, l, ResidualMode::Recurrence).unwrap();
            let c = residual_sharpness(&base, l, ResidualMode::ClosedForm).unwrap();
            assert!(close(&r, &c, 1e-10), "L={l}: {r:?} vs {c:?}");
            for (x, y) in c.components().iter().zip(bound.components()) {
                assert!(*x <= y + 1e-15);
            }
        }
    }
}

#[test]
fn broadcast_examples() {
    let x = t(0.1, 0.2, 1.0, 1.0, 1.0);
    assert_eq!(broadcast_sharpness(&x, 4, BroadcastMode::Linf).unwrap(), x);
    assert_eq!(
        broadcast_sharpness(&x, 4, BroadcastMode::LpStandard).unwrap(),
        x
    );
    assert_eq!(
        broadcast_sharpness(&x, 4, BroadcastMode::RmsPessimistic)
            .unwrap()
            .gamma,
        2.0
    );
    assert!(
        (broadcast_sharpness(&x, 4, BroadcastMode::RmsSqrt3)
            .unwrap()
            .gamma
            - 1.7320508)
            .abs()
            < 1e-7
    );
    assert!(broadcast_sharpness(&x, 0, BroadcastMode::Linf).is_err());
}

#[test]
fn tree_examples() {
    let table = SharpnessTable::default();
    let lin = Module::linear(3, 2).unwrap();
    let s = tree_sharpness(&lin, &table, BroadcastMode::Linf).unwrap();
    assert_eq!(s.components(), [0.0, 1.0, 0.0]);

    let residue = res_mlp_residue(4).unwrap();
    let got = tree_sharpness(&residue, &table, BroadcastMode::Linf).unwrap();
    let rms = t(0.0, 0.0, 1.0, 1.0, 0.0);
    let linear = t(0.0, 1.0, 0.0, 1.0, 1.0);
    let zero = t(0.0, 0.0, 0.0, 1.0, 0.0);
    let by_hand = compose_limit(
        &compose_limit(&compose_limit(&rms, &linear).unwrap(), &zero).unwrap(),
        &zero,
    )
    .unwrap();
    assert!(close(&got, &by_hand, 1e-15));
    assert!(close(&got, &t(0.0, 1.0, 1.0, 1.0, 1.0), 1e-15));

    let mut missing = table.clone();
    missing.remove("abs");
    assert!(
        matches!(tree_sharpness(&residue, &missing, BroadcastMode::Linf), Err(Error::MissingKind(k)) if k == "abs")
    );
}

#[test]
fn tree_residual_matches_recurrence() {
    let table = SharpnessTable::default();
    let residue = power(&res_mlp_residue(4).unwrap(), 2).unwrap();
    let inner = tree_sharpness(&residue, &table, BroadcastMode::Linf).unwrap();
    for l in [1, 2, 5] {
        let tree =
            tree_sharpness(&residual(&residue, l).unwrap(), &table, BroadcastMode::Linf).unwrap();
        let closed = residual_sharpness(&inner, l, ResidualMode::ClosedForm).unwrap();
        assert!(close(&tree, &closed, 1e-12));
    }
}

#[test]
fn tree_associativity() {
    let table = SharpnessTable::default();
    let (a, b, c) = (
        res_mlp_residue(3).unwrap(),
        compose(&Module::gelu(), &Module::linear(3, 3).unwrap()).unwrap(),
        Module::linear(3, 3).unwrap().with_mass(2.5).unwrap(),
    );
    let left = compose(&compose(&c, &b).unwrap(), &a).unwrap();
    let right = compose(&c, &compose(&b, &a).unwrap()).unwrap();
    let l = tree_sharpness(&left, &table, BroadcastMode::Linf).unwrap();
    let r = tree_sharpness(&right, &table, BroadcastMode::Linf).unwrap();
    assert!(close(&l, &r, 1e-12));
    let cl = concat(&concat(&a, &b).unwrap(), &c).unwrap();
    let cr = concat(&a, &concat(&b, &c).unwrap()).unwrap();
    let l = tree_sharpness(&cl, &table, BroadcastMode::Linf).unwrap();
    let r = tree_sharpness(&cr, &table, BroadcastMode::Linf).unwrap();
    assert!(close(&l, &r, 1e-12));
}

#[test]
fn architectures_have_finite_sharpness() {
    let table = SharpnessTable::default();
    for spec in [
        ArchSpec::res_mlp(8, 3, 4, 2),
        ArchSpec::res_net(4, 2, 3, 10),
        ArchSpec::gpt(8, 2, 2, 4, 6),
    ] {
        let m = spec.build().unwrap();
        for mode in [BroadcastMode::Linf, BroadcastMode::RmsSqrt3] {
            let s = tree_sharpness(&m, &table, mode).unwrap();
            assert!(s.components().iter().all(|v| v.is_finite()));
        }
    }
    let attn = crate::arch::multi_head_attention(8, 4, 2, 2, 3, Mask::Causal).unwrap();
    let a = tree_sharpness(&attn, &table, BroadcastMode::Linf).unwrap();
    let b = tree_sharpness(&attn, &table, BroadcastMode::RmsPessimistic).unwrap();
    assert!(b.alpha > a.alpha);
}

#[test]
fn smoothness_examples() {
    let x = t(1.0, 0.0, 0.0, 1.0, 1.0);
    let s = loss_smoothness(&x, LossKind::Square, 0.5, 10, CrossEntropyTau::default()).unwrap();
    assert!((s.sigma - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(s.tau, 1.0);
    let c = loss_smoothness(
        &x,
        LossKind::CrossEntropy,
        10f64.ln(),
        10,
        CrossEntropyTau::default(),
    )
    .unwrap();
    assert!((c.sigma - 4.798).abs() < 1e-3);
    assert!((c.tau - 10f64.sqrt()).abs() < 1e-15);
    let a = loss_smoothness(
        &x,
        LossKind::CrossEntropy,
        1.0,
        10,
        CrossEntropyTau::Aligned,
    )
    .unwrap();
    assert_eq!(a.tau, 1.0);
    assert_eq!(SmoothnessEstimate::new(2.0, 1.0, 1.0).lipschitz, 3.0);
    assert!(loss_smoothness(&x, LossKind::Square, -1.0, 10, CrossEntropyTau::default()).is_err());
}
