use super::*;
use crate::module::{initialize, Value};
use crate::norm::atom_norm;
use crate::tensor::seeded_rng;

fn one_hot(tokens: &[usize], n: usize) -> Tensor {
    let mut data = vec![0.0; tokens.len() * n];
    for (i, t) in tokens.iter().enumerate() {
        data[i * n + t] = 1.0;
    }
    Tensor::new(vec![1, tokens.len(), n], data).unwrap()
}

#[test]
fn res_mlp_structure() {
    for l in [1, 2, 5] {
        let mut spec = ArchSpec::res_mlp(8, l, 6, 3);
        spec.block_mass = 0.5;
        let m = spec.build().unwrap();
        assert!((m.mass() - 2.5).abs() < 1e-12);
        assert_eq!(m.atom_count(), 2 + l * 2);
        let body = residual(&power(&res_mlp_residue(8).unwrap(), 2).unwrap(), l).unwrap();
        assert!((body.sensitivity() - 1.0).abs() < 1e-12);
        assert_eq!(body.exact_sensitivity().unwrap(), &ExactReal::one());
        let w = initialize(&m, 1);
        let x = Tensor::randn(&[4, 6], &mut seeded_rng(2));
        let y = m
            .forward(&w, &Value::Tensor(x))
            .unwrap()
            .into_tensor()
            .unwrap();
        assert_eq!(y.shape(), &[4, 3]);
    }
}

#[test]
fn residue_sensitivity_is_one() {
    assert!((res_mlp_residue(4).unwrap().sensitivity() - 1.0).abs() < 1e-15);
    assert!((res_net_residue(4, 3).unwrap().sensitivity() - 1.0).abs() < 1e-15);
}

#[test]
fn res_net_structure() {
    let spec = ArchSpec::res_net(4, 2, 3, 10);
    let m = spec.build().unwrap();
    assert_eq!(m.atom_count(), 2 + 2 * 2);
    assert!((m.mass() - 22.0).abs() < 1e-12);
    let w = initialize(&m, 3);
    let x = Tensor::randn(&[1, 3, 32, 32], &mut seeded_rng(4));
    let y = m
        .forward(&w, &Value::Tensor(x))
        .unwrap()
        .into_tensor()
        .unwrap();
    assert_eq!(y.shape(), &[1, 10]);
}

#[test]
fn attention_attributes() {
    for h in [1, 2, 4] {
        let m = multi_head_attention(8, h, 8 / h, 8 / h, 5, Mask::Causal).unwrap();
        assert!((m.sensitivity() - 1.0).abs() < 1e-15);
        assert_eq!(m.exact_sensitivity().unwrap(), &ExactReal::one());
        assert_eq!(m.mass(), 4.0);
        assert_eq!(m.atom_count(), 4);
        let w = initialize(&m, 5);
        let x = Tensor::randn(&[2, 5, 8], &mut seeded_rng(6));
        let y = m
            .forward(&w, &Value::Tensor(x))
            .unwrap()
            .into_tensor()
            .unwrap();
        assert_eq!(y.shape(), &[2, 5, 8]);
    }
}

#[test]
fn single_head_matches_unbroadcast_attention() {
    let m = multi_head_attention(4, 1, 3, 2, 3, Mask::Zero).unwrap();
    let plain = chain(&[
        concat(
            &concat(
                &Module::linear(3, 4).unwrap(),
                &Module::linear(3, 4).unwrap(),
            )
            .unwrap(),
            &Module::linear(2, 4).unwrap(),
        )
        .unwrap(),
        Module::func_attention(3, 3, 2, Mask::Zero).unwrap(),
        Module::mul(1.0 / 3.0).unwrap(),
        Module::linear(4, 2).unwrap(),
    ])
    .unwrap();
    let w = initialize(&m, 7);
    let x = Value::Tensor(Tensor::randn(&[3, 4], &mut seeded_rng(8)));
    let a = m.forward(&w, &x).unwrap().into_tensor().unwrap();
    let b = plain.forward(&w, &x).unwrap().into_tensor().unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn gpt_structure() {
    for l in [1, 2, 3] {
        let spec = ArchSpec::gpt(8, l, 2, 4, 11);
        let m = spec.build().unwrap();
        assert!((m.mass() - 7.0).abs() < 1e-12);
        assert_eq!(m.atom_count(), 2 + l * 6 + 1);
        let w = initialize(&m, 9);
        let y = m
            .forward(&w, &Value::Tensor(one_hot(&[1, 4, 10, 0], 11)))
            .unwrap()
            .into_tensor()
            .unwrap();
        assert_eq!(y.shape(), &[1, 4, 11]);
        let attn = gpt_block(
            &multi_head_attention(8, 2, 4, 4, 4, Mask::Causal).unwrap(),
            l,
        )
        .unwrap();
        let mlp = gpt_block(&transformer_mlp(8).unwrap(), l).unwrap();
        assert_eq!(attn.exact_sensitivity().unwrap(), &ExactReal::one());
        assert_eq!(mlp.exact_sensitivity().unwrap(), &ExactReal::one());
    }
}

#[test]
fn gpt_is_causal() {
    let m = ArchSpec::gpt(8, 1, 2, 4, 6).build().unwrap();
    let w = initialize(&m, 1);
    let a = m
        .forward(&w, &Value::Tensor(one_hot(&[1, 2, 3, 4], 6)))
        .unwrap()
        .into_tensor()
        .unwrap();
    let b = m
        .forward(&w, &Value::Tensor(one_hot(&[1, 2, 5, 0], 6)))
        .unwrap()
        .into_tensor()
        .unwrap();
    assert_eq!(&a.data()[..12], &b.data()[..12]);
    assert_ne!(&a.data()[12..18], &b.data()[12..18]);
}

#[test]
fn gpt_input_layer_mass() {
    let half = ExactReal::rational(1, 2);
    let input = tare(
        &add(
            &scalar_mul_exact(&half, &Module::embed(5, 4).unwrap()).unwrap(),
            &scalar_mul_exact(&half, &Module::positional_embed(3, 4).unwrap()).unwrap(),
        )
        .unwrap(),
        1.0,
    )
    .unwrap();
    assert_eq!(input.mass(), 1.0);
    assert_eq!(input.exact_sensitivity().unwrap(), &ExactReal::one());
}

#[test]
fn init_is_well_normed() {
    let specs = [
        ArchSpec::res_mlp(8, 2, 5, 3),
        ArchSpec::res_net(4, 1, 3, 10),
        ArchSpec::gpt(8, 1, 2, 4, 6),
    ];
    for spec in specs {
        let m = spec.build().unwrap();
        let w = initialize(&m, 11);
        for ((kind, _), leaf) in m.atoms().iter().zip(w.leaves()) {
            assert!(
                (atom_norm(kind, leaf).unwrap() - 1.0).abs() < 1e-10,
                "{kind}"
            );
        }
    }
}

#[test]
fn invalid_specs() {
    let mut s = ArchSpec::gpt(8, 1, 3, 4, 6);
    assert!(s.build().is_err());
    s.heads = 2;
    s.width = 0;
    assert!(s.build().is_err());
    let mut r = ArchSpec::res_mlp(4, 1, 2, 2);
    r.block_mass = 0.0;
    assert!(r.build().is_err());
    assert!(Family::parse("vgg").is_err());
}

#[test]
fn loss_examples() {
    let y = Tensor::zeros(&[1, 10]);
    assert!((loss_eval(LossKind::Square, &y, &[3]).unwrap() - 0.5).abs() < 1e-15);
    assert!((loss_eval(LossKind::CrossEntropy, &y, &[3]).unwrap() - 10f64.ln()).abs() < 1e-15);
    let mut hit = vec![0.0; 10];
    hit[3] = 10f64.sqrt();
    let hit = Tensor::new(vec![1, 10], hit).unwrap();
    assert!(loss_eval(LossKind::Square, &hit, &[3]).unwrap().abs() < 1e-15);
    assert!(loss_eval(LossKind::Square, &y, &[10]).is_err());
    assert!(loss_eval(LossKind::Square, &y, &[1, 2]).is_err());
}

#[test]
fn loss_gradients_match_differences() {
    let mut rng = seeded_rng(12);
    for kind in [LossKind::Square, LossKind::CrossEntropy] {
        let y = Tensor::randn(&[3, 5], &mut rng);
        let t = [0, 4, 2];
        let (_, g) = loss_and_grad(kind, &y, &t).unwrap();
        for i in 0..y.len() {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp.data_mut()[i] += 1e-6;
            ym.data_mut()[i] -= 1e-6;
            let fd = (loss_eval(kind, &yp, &t).unwrap() - loss_eval(kind, &ym, &t).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
