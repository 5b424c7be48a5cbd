use gatn_core::gradcheck::{self, COMPOSED_TOLERANCE, EPSILON, OP_TOLERANCE};
use gatn_core::tensor::{grad_check, Tape, Tensor4};
use gatn_core::Error;

#[test]
fn full_suite_within_tolerance() {
    let results = gradcheck::run_suite(None, 1.0).unwrap();
    assert_eq!(results.len(), gradcheck::check_names().len());
    for r in &results {
        println!("{:<24} {:.3e} (< {:.0e})", r.name, r.max_relative_error, r.tolerance);
    }
    for r in &results {
        assert!(r.passed(), "{} failed: {:.3e}", r.name, r.max_relative_error);
        let bound = if r.name.starts_with("model.") { COMPOSED_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(r.tolerance, bound);
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let results = gradcheck::run_suite(Some("tanh"), 1.01).unwrap();
    assert_eq!(results.len(), 1);
    assert!(!results[0].passed());
}

#[test]
fn filter_selects_groups() {
    let r = gradcheck::run_suite(Some("model.heads"), 1.0).unwrap();
    assert_eq!(r.len(), 1);
    assert!(gradcheck::run_suite(Some("nonexistent"), 1.0).unwrap().is_empty());
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor4::from_fn([1, 2, 3, 3], |_, c, h, w| (c as f64 - h as f64) * 0.3 + w as f64);
    let err = grad_check(|t, v| Ok(t.sum(v)), &x, EPSILON).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn tanh_sum_on_random_inputs() {
    let x = Tensor4::from_fn([1, 1, 4, 6], |_, _, h, w| libm::sin((h * 6 + w) as f64 * 1.7));
    let err = grad_check(
        |t, v| {
            let y = t.tanh(v);
            Ok(t.sum(y))
        },
        &x,
        EPSILON,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn sum_gradient_is_ones_and_negative_relu_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4::from_fn([1, 2, 2, 2], |_, c, h, w| -1.0 - (c + h + w) as f64));
    let s = tape.sum(x);
    let g = tape.backward(s, 1.0).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let r = tape.relu(x);
    let s = tape.sum(r);
    let g = tape.backward(s, 1.0).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4::scalar(0.0));
    let r = tape.relu(x);
    let g = tape.backward(r, 1.0).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_misuse() {
    let mut other = Tape::new();
    let x = other.param(Tensor4::zeros([1, 1, 2, 2]));
    let empty = Tape::new();
    assert!(matches!(empty.backward(x, 1.0), Err(Error::Usage(_))));
    assert!(matches!(other.backward(x, 1.0), Err(Error::Usage(_))));
    let err = grad_check(|_, v| Ok(v), &Tensor4::zeros([1, 1, 2, 2]), EPSILON).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn shared_input_accumulates() {
    // f = Σ (x + x) → ∂f/∂x = 2.
    let mut tape = Tape::new();
    let x = tape.param(Tensor4::full([1, 1, 2, 2], 0.7));
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s, 1.0).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let cfg = gradcheck::toy_model_config();
        let params = gatn_core::model::ModelParams::init(&cfg, 3).unwrap();
        let img = Tensor4::from_fn([1, 3, 32, 32], |_, c, h, w| ((c * 7 + h * 3 + w) % 11) as f64 / 11.0);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let g = gatn_core::model::forward_graph(&mut tape, &b, &params, &img, &cfg).unwrap();
        let l = gatn_core::training::multi_task_loss_on_tape(&mut tape, g.logits_global, g.logits_fusion, 0, 0.3).unwrap();
        let grads = tape.backward(l, 1.0).unwrap();
        b.vars()
            .iter()
            .map(|&v| grads.get(v).map(|t| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
