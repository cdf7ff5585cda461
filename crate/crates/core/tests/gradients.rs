mod common;

use common::checks::{model_grad_error, op_suite};
use snip_core::autograd::{finite_diff_check, Graph, Tensor, Var};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20 {
        for (name, err) in op_suite(seed).unwrap() {
            assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn gated_two_layer_model_matches_finite_differences() {
    for seed in 0..10 {
        let rep = model_grad_error(seed).unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {:e}", rep.max_rel_err);
        assert!(rep.key_bias_grad < 1e-12, "seed {seed}: key bias grad {:e}", rep.key_bias_grad);
    }
}

#[test]
fn sum_of_squares_is_near_exact() {
    let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let err = finite_diff_check(
        |g: &mut Graph, v: Var| {
            let y = g.matmul_t(v, v)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn linear_loss_gives_outer_product_gradient() {
    let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let w = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w);
    let y = g.matmul(xv, wv).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let grad = g.grad(wv).unwrap();
    let want: Vec<f64> = x.data().iter().flat_map(|xi| [*xi, *xi]).collect();
    assert_eq!(grad, want.as_slice());
}

#[test]
fn cross_entropy_gradient_is_p_minus_onehot() {
    let logits = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let loss = g.cross_entropy(l, 1).unwrap();
    g.backward(loss).unwrap();
    let p = common::softmax(logits.data());
    for (j, (gr, pj)) in g.grad(l).unwrap().iter().zip(&p).enumerate() {
        let want = pj - if j == 1 { 1.0 } else { 0.0 };
        assert!((gr - want).abs() < 1e-14);
    }
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::new();
    let v = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(snip_core::Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let (cfg, arch, params, tokens, label, gate) = common::checks::gated_model(3, 1e-3).unwrap();
        let mut g = Graph::new();
        let pv = snip_core::model::insert_params(&mut g, &params, true);
        let ctx = snip_core::model::ForwardCtx::new(&cfg, &arch, Some(&gate));
        let logits = snip_core::model::forward_example(&mut g, &pv, &ctx, &tokens, None, None).unwrap();
        let loss = g.cross_entropy(logits, label).unwrap();
        g.backward(loss).unwrap();
        pv.leaves().iter().map(|v| g.grad(**v).unwrap().to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
