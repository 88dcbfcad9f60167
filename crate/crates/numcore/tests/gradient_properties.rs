//! Finite-difference verification of every exported primitive, plus a
//! multi-step LSTM gradient check.

use numcore::{grad_check, lstm_forward, lstm_param_shapes};
use numcore::{LstmLayer, LstmVars, ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::rngs::mock::StepRng;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, len)
}

/// Check d(sum(op(x)))/dx against central differences for a unary op.
fn check_unary<F>(x: Vec<f64>, op: F, positive_only: bool)
where
    F: Fn(&mut Tape, numcore::Var) -> numcore::Result<numcore::Var> + Copy,
{
    let x: Vec<f64> = if positive_only {
        x.into_iter().map(|v| v.abs() + 0.1).collect()
    } else {
        x
    };
    let n = x.len();
    let mut params = ParamSet::new();
    params.insert("x", Tensor::vector(x));
    let report = grad_check(
        &params,
        move |p| {
            let mut t = Tape::new();
            let xv = t.leaf(p.require("x")?.clone())?;
            let y = op(&mut t, xv)?;
            let loss = t.sum(y)?;
            let g = t.backward(loss)?;
            let mut grads = ParamSet::new();
            grads.insert("x", g.get_or_zeros(xv, &[n]));
            Ok((t.value(loss).item(), grads))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tanh_gradients_match_fd(x in finite_vec(5)) {
        check_unary(x, |t, v| t.tanh(v), false);
    }

    #[test]
    fn sigmoid_gradients_match_fd(x in finite_vec(5)) {
        check_unary(x, |t, v| t.sigmoid(v), false);
    }

    #[test]
    fn exp_gradients_match_fd(x in finite_vec(5)) {
        check_unary(x, |t, v| t.exp(v), false);
    }

    #[test]
    fn log_gradients_match_fd(x in finite_vec(5)) {
        check_unary(x, |t, v| t.log(v), true);
    }

    #[test]
    fn sqrt_gradients_match_fd(x in finite_vec(5)) {
        check_unary(x, |t, v| t.sqrt(v), true);
    }

    #[test]
    fn softmax_gradients_match_fd(x in finite_vec(6)) {
        // weighted sum makes the softmax gradient non-trivial
        check_unary(x, |t, v| {
            let s = t.softmax(v)?;
            let w = t.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]))?;
            t.mul(s, w)
        }, false);
    }

    #[test]
    fn log_softmax_gradients_match_fd(x in finite_vec(6)) {
        check_unary(x, |t, v| {
            let s = t.log_softmax(v)?;
            let w = t.constant(Tensor::vector(vec![0.3, 1.0, -0.7, 2.0, 0.1, -1.5]))?;
            t.mul(s, w)
        }, false);
    }

    #[test]
    fn matmul_gradients_match_fd(a in finite_vec(6), b in finite_vec(12)) {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::matrix(2, 3, a).unwrap());
        params.insert("b", Tensor::matrix(3, 4, b).unwrap());
        let report = grad_check(
            &params,
            |p| {
                let mut t = Tape::new();
                let av = t.leaf(p.require("a")?.clone())?;
                let bv = t.leaf(p.require("b")?.clone())?;
                let c = t.matmul(av, bv)?;
                let loss = t.sum(c)?;
                let g = t.backward(loss)?;
                let mut grads = ParamSet::new();
                grads.insert("a", g.get_or_zeros(av, &[2, 3]));
                grads.insert("b", g.get_or_zeros(bv, &[3, 4]));
                Ok((t.value(loss).item(), grads))
            },
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mul_div_dot_chain_matches_fd(a in finite_vec(4), b in finite_vec(4)) {
        let b: Vec<f64> = b.into_iter().map(|v| v.abs() + 0.5).collect();
        let mut params = ParamSet::new();
        params.insert("a", Tensor::vector(a));
        params.insert("b", Tensor::vector(b));
        let report = grad_check(
            &params,
            |p| {
                let mut t = Tape::new();
                let av = t.leaf(p.require("a")?.clone())?;
                let bv = t.leaf(p.require("b")?.clone())?;
                let m = t.mul(av, bv)?;
                let d = t.div(m, bv)?;
                let loss = t.dot(d, m)?;
                let g = t.backward(loss)?;
                let mut grads = ParamSet::new();
                grads.insert("a", g.get_or_zeros(av, &[4]));
                grads.insert("b", g.get_or_zeros(bv, &[4]));
                Ok((t.value(loss).item(), grads))
            },
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn matvec_t_gradients_match_fd(x in finite_vec(3), w in finite_vec(6)) {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::vector(x));
        params.insert("w", Tensor::matrix(3, 2, w).unwrap());
        let report = grad_check(
            &params,
            |p| {
                let mut t = Tape::new();
                let xv = t.leaf(p.require("x")?.clone())?;
                let wv = t.leaf(p.require("w")?.clone())?;
                let y = t.matvec_t(xv, wv)?;
                let loss = t.dot(y, y)?;
                let g = t.backward(loss)?;
                let mut grads = ParamSet::new();
                grads.insert("x", g.get_or_zeros(xv, &[3]));
                grads.insert("w", g.get_or_zeros(wv, &[3, 2]));
                Ok((t.value(loss).item(), grads))
            },
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn concat_slice_lookup_matches_fd(m in finite_vec(6)) {
        let mut params = ParamSet::new();
        params.insert("m", Tensor::matrix(3, 2, m).unwrap());
        let report = grad_check(
            &params,
            |p| {
                let mut t = Tape::new();
                let mv = t.leaf(p.require("m")?.clone())?;
                let r0 = t.lookup_row(mv, 0)?;
                let r2 = t.lookup_row(mv, 2)?;
                let cat = t.concat(&[r0, r2])?;
                let sl = t.slice(cat, 1, 3)?;
                let sq = t.mul(sl, sl)?;
                let loss = t.sum(sq)?;
                let g = t.backward(loss)?;
                let mut grads = ParamSet::new();
                grads.insert("m", g.get_or_zeros(mv, &[3, 2]));
                Ok((t.value(loss).item(), grads))
            },
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}

#[test]
fn random_three_op_graph_matches_fd() {
    // matvec -> tanh -> dot
    let mut params = ParamSet::new();
    params.insert("w", Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect()).unwrap());
    params.insert("x", Tensor::vector(vec![0.2, -0.4, 0.8, 1.1]));
    let report = grad_check(
        &params,
        |p| {
            let mut t = Tape::new();
            let w = t.leaf(p.require("w")?.clone())?;
            let x = t.leaf(p.require("x")?.clone())?;
            let y = t.matvec(w, x)?;
            let z = t.tanh(y)?;
            let loss = t.dot(z, z)?;
            let g = t.backward(loss)?;
            let mut grads = ParamSet::new();
            grads.insert("w", g.get_or_zeros(w, &[3, 4]));
            grads.insert("x", g.get_or_zeros(x, &[4]));
            Ok((t.value(loss).item(), grads))
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn lstm_three_timesteps_matches_fd() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
    let (input, hidden, layers) = (3, 4, 2);
    let mut params = ParamSet::new();
    for (l, (ws, bs)) in lstm_param_shapes(layers, input, hidden).into_iter().enumerate() {
        params.insert(&format!("l{l}.w"), Tensor::uniform(ws, 0.4, &mut rng));
        params.insert(&format!("l{l}.b"), Tensor::uniform(bs, 0.4, &mut rng));
    }
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(vec![input], 1.0, &mut rng)).collect();

    let report = grad_check(
        &params,
        move |p| {
            let mut t = Tape::new();
            let mut layer_vars = Vec::new();
            let mut handles = Vec::new();
            for l in 0..layers {
                let w = t.leaf(p.require(&format!("l{l}.w"))?.clone())?;
                let b = t.leaf(p.require(&format!("l{l}.b"))?.clone())?;
                layer_vars.push(LstmLayer { w, b });
                handles.push((format!("l{l}.w"), w, p.require(&format!("l{l}.w"))?.shape().to_vec()));
                handles.push((format!("l{l}.b"), b, p.require(&format!("l{l}.b"))?.shape().to_vec()));
            }
            let vars = LstmVars { layers: layer_vars, hidden };
            let inputs: Vec<numcore::Var> = xs
                .iter()
                .map(|x| t.constant(x.clone()))
                .collect::<numcore::Result<_>>()?;
            let (tops, _) =
                lstm_forward(&mut t, &vars, &inputs, None, 0.0, false, &mut StepRng::new(0, 0))?;
            let last = *tops.last().unwrap();
            let loss = t.dot(last, last)?;
            let g = t.backward(loss)?;
            let mut grads = ParamSet::new();
            for (name, var, shape) in handles {
                grads.insert(&name, g.get_or_zeros(var, &shape));
            }
            Ok((t.value(loss).item(), grads))
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}
