use super::*;
use crate::module::{compose, concat, initialize, residual, scalar_mul, tare};
use crate::tensor::seeded_rng;

fn lin(d_out: usize, d_in: usize) -> Module {
    Module::linear(d_out, d_in).unwrap()
}

fn randn_weights(m: &Module, seed: u64) -> WeightVector {
    let mut rng = seeded_rng(seed);
    WeightVector::new(
        m.atoms()
            .iter()
            .map(|(k, _)| Tensor::randn(&k.weight_shape(), &mut rng))
            .collect(),
    )
}

#[test]
fn vector_norms() {
    let x = Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
    assert!((vector_norm(VectorNorm::Rms, &x).unwrap() - (26.0f64 / 4.0).sqrt()).abs() < 1e-15);
    assert_eq!(vector_norm(VectorNorm::L1, &x).unwrap(), 8.0);
    assert!((vector_norm(VectorNorm::InfRms, &x).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
    assert!(vector_norm(VectorNorm::InfRms, &Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn spectral_norm_of_diagonal() {
    let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
    let mut rng = seeded_rng(0);
    let (s, v) = spectral_norm(&w, PowerIteration::VERIFY, None, &mut rng).unwrap();
    assert!((s - 4.0).abs() < 1e-9);
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((atom_norm(&AtomKind::Linear { d_out: 2, d_in: 2 }, &w).unwrap() - 4.0).abs() < 1e-12);
    assert!(
        (dual_atom_norm(&AtomKind::Linear { d_out: 2, d_in: 2 }, &w).unwrap() - 7.0).abs() < 1e-12
    );
}

#[test]
fn spectral_norm_of_zero_matrix() {
    let (s, v) = spectral_norm(
        &Tensor::zeros(&[3, 2]),
        PowerIteration::Steps(2),
        None,
        &mut seeded_rng(1),
    )
    .unwrap();
    assert_eq!(s, 0.0);
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn power_iteration_matches_svd_and_is_monotone() {
    let mut rng = seeded_rng(2);
    for _ in 0..20 {
        let w = Tensor::randn(&[7, 5], &mut rng);
        let exact = svd_spectral_norm(&w).unwrap();
        let (s, _) = spectral_norm(
            &w,
            PowerIteration::Converged {
                min_steps: 200,
                max_steps: 20_000,
                tol: 1e-14,
            },
            None,
            &mut rng,
        )
        .unwrap();
        assert!((s - exact).abs() <= 1e-6 * exact);
        let mut warm: Option<Vec<f64>> = None;
        let mut prev = 0.0;
        for _ in 0..10 {
            let (s, v) =
                spectral_norm(&w, PowerIteration::Steps(1), warm.as_deref(), &mut rng).unwrap();
            assert!(s >= prev - 1e-12 && s <= exact * (1.0 + 1e-12));
            prev = s;
            warm = Some(v);
        }
    }
}

#[test]
fn exact_warm_start_is_a_fixed_point() {
    let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
    let (s, _) = spectral_norm(
        &w,
        PowerIteration::Steps(1),
        Some(&[0.0, 1.0]),
        &mut seeded_rng(0),
    )
    .unwrap();
    assert_eq!(s, 4.0);
}

#[test]
fn embedding_norms() {
    let kind = AtomKind::Embed {
        n: 2,
        d: 2,
        positional: false,
    };
    let e = Tensor::matrix(2, 2, vec![0.5, 2.0, 0.0, 0.0]).unwrap();
    assert_eq!(atom_norm(&kind, &e).unwrap(), 2.0);
    assert_eq!(dual_atom_norm(&kind, &e).unwrap(), 2.5);
}

#[test]
fn kernel_norms_use_slices() {
    let kind = AtomKind::Conv2d {
        d_out: 1,
        d_in: 1,
        k: 2,
    };
    let c = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -3.0, 2.0, 0.5]).unwrap();
    assert_eq!(kernel_slices(&c).unwrap().len(), 4);
    assert!((atom_norm(&kind, &c).unwrap() - 3.0).abs() < 1e-12);
    assert!((dual_atom_norm(&kind, &c).unwrap() - 6.5).abs() < 1e-12);
}

#[test]
fn chain_scales() {
    let m = compose(&lin(2, 2), &lin(2, 2)).unwrap();
    let s: Vec<_> = m
        .scales()
        .unwrap()
        .iter()
        .map(|l| l.scale.unwrap())
        .collect();
    assert_eq!(s, vec![2.0, 2.0]);
    let m3 = compose(&lin(2, 2), &m).unwrap();
    let s: Vec<_> = m3
        .scales()
        .unwrap()
        .iter()
        .map(|l| l.scale.unwrap())
        .collect();
    for v in s {
        assert!((v - 3.0).abs() < 1e-12);
    }
}

#[test]
fn two_atom_modular_norm() {
    let m = compose(&lin(2, 2), &lin(2, 2)).unwrap();
    let w = WeightVector::new(vec![
        Tensor::matrix(2, 2, vec![4.0, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
    ]);
    assert!((modular_norm(&m, &w).unwrap() - 8.0).abs() < 1e-12);
    assert!((m.norm(&w).unwrap() - 8.0).abs() < 1e-12);
}

#[test]
fn sensitivity_enters_first_child_scale() {
    let m = compose(&scalar_mul(0.5, &Module::identity()).unwrap(), &lin(2, 2)).unwrap();
    let s: Vec<_> = m.scales().unwrap().iter().map(|l| l.scale).collect();
    assert_eq!(s, vec![Some(0.5)]);
    let m = compose(&lin(2, 2), &m).unwrap();
    let s: Vec<_> = m.scales().unwrap().iter().map(|l| l.scale).collect();
    assert_eq!(s, vec![Some(1.0), Some(2.0)]);
}

#[test]
fn zero_mass_leaves_are_frozen() {
    let frozen = lin(2, 2).with_mass(0.0).unwrap();
    let m = compose(&lin(2, 2), &frozen).unwrap();
    let s: Vec<_> = m.scales().unwrap().iter().map(|l| l.scale).collect();
    assert_eq!(s, vec![None, Some(1.0)]);
    let dw = randn_weights(&m, 3);
    let u = normalize(&m, &dw, &mut PowerIterState::converged(0), NORMALIZE_EPS).unwrap();
    assert!(u.leaves()[0].data().iter().all(|x| *x == 0.0));
    assert!((modular_norm(&m, &u).unwrap() - 1.0).abs() < 1e-8);
    assert!(compute_scales(&Module::relu()).is_err());
}

#[test]
fn recursive_and_flattened_norms_agree() {
    let block = compose(&Module::relu(), &lin(4, 4)).unwrap();
    let m = compose(
        &lin(3, 4),
        &compose(&residual(&block, 3).unwrap(), &lin(4, 5)).unwrap(),
    )
    .unwrap();
    let m = tare(&m, 2.5).unwrap();
    let c = concat(&m, &lin(3, 5)).unwrap();
    for (i, module) in [m, c].iter().enumerate() {
        let w = randn_weights(module, 10 + i as u64);
        let a = modular_norm(module, &w).unwrap();
        let b = module.norm(&w).unwrap();
        assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
    }
}

#[test]
fn normalize_gives_unit_norm_and_holder_holds() {
    let block = compose(&Module::gelu(), &lin(6, 6)).unwrap();
    let m = compose(
        &lin(2, 6),
        &compose(&residual(&block, 2).unwrap(), &lin(6, 3)).unwrap(),
    )
    .unwrap();
    let w = initialize(&m, 4);
    let mut state = PowerIterState::converged(5);
    for seed in 0..10 {
        let dw = randn_weights(&m, 100 + seed);
        let u = normalize(&m, &dw, &mut state, NORMALIZE_EPS).unwrap();
        assert!((modular_norm(&m, &u).unwrap() - 1.0).abs() < 1e-6);
        let g = randn_weights(&m, 200 + seed);
        let lhs = g.dot(&dw).unwrap().abs();
        let rhs = dual_modular_norm(&m, &g).unwrap() * modular_norm(&m, &dw).unwrap();
        assert!(lhs <= rhs * (1.0 + 1e-12));
    }
    for v in state.vectors() {
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(modular_norm(&m, &w).unwrap() > 0.0);
}

#[test]
fn zero_update_stays_zero() {
    let m = compose(&lin(2, 2), &lin(2, 2)).unwrap();
    let dw = WeightVector::new(vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])]);
    let u = normalize(&m, &dw, &mut PowerIterState::training(0), NORMALIZE_EPS).unwrap();
    assert!(u
        .leaves()
        .iter()
        .all(|t| t.data().iter().all(|x| *x == 0.0)));
}

#[test]
fn leaf_count_is_checked() {
    let m = compose(&lin(2, 2), &lin(2, 2)).unwrap();
    let w = WeightVector::new(vec![Tensor::zeros(&[2, 2])]);
    assert!(modular_norm(&m, &w).is_err());
    assert!(m.norm(&w).is_err());
}
