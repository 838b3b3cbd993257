use esbm::autodiff::gradcheck;
use esbm::autodiff::nn::{self, SetShape};
use esbm::autodiff::{Bindings, Graph, Mode, ParamSet, Tensor, Values};
use esbm::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eval1(build: impl FnOnce(&mut Graph) -> esbm::autodiff::NodeId, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let root = build(&mut g);
    let mut b = Bindings::new();
    b.bind("x", x);
    g.evaluate(root, &b, Mode::Eval).unwrap().get(root).unwrap().clone()
}

#[test]
fn softplus_at_zero_is_ln2() {
    let y = eval1(
        |g| {
            let x = g.input("x");
            g.softplus(x)
        },
        &Tensor::scalar(0.0),
    );
    assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn gelu_at_zero_is_zero() {
    let y = eval1(
        |g| {
            let x = g.input("x");
            g.gelu(x)
        },
        &Tensor::scalar(0.0),
    );
    assert_eq!(y.item(), 0.0);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
    let eye = Tensor::eye(3);
    let mut g = Graph::new();
    let i = g.input("i");
    let x = g.input("x");
    let y = g.matmul(i, x);
    let mut b = Bindings::new();
    b.bind("i", &eye).bind("x", &a);
    let v = g.evaluate(y, &b, Mode::Eval).unwrap();
    assert_eq!(v.get(y).unwrap(), &a);
}

fn scalar_grad(build: impl FnOnce(&mut Graph, esbm::autodiff::NodeId) -> esbm::autodiff::NodeId, x0: f64) -> f64 {
    let mut g = Graph::new();
    let x = g.param("x");
    let loss = build(&mut g, x);
    let xv = Tensor::scalar(x0);
    let mut b = Bindings::new();
    b.bind("x", &xv);
    let values = g.evaluate(loss, &b, Mode::Eval).unwrap();
    g.gradients(&values, loss).unwrap()["x"].item()
}

#[test]
fn derivative_of_square_product() {
    assert_eq!(scalar_grad(|g, x| g.mul(x, x), 3.0), 6.0);
}

#[test]
fn derivative_of_softplus_at_zero() {
    assert!((scalar_grad(|g, x| g.softplus(x), 0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn gradients_before_evaluate_error() {
    let mut g = Graph::new();
    let x = g.param("x");
    let y = g.square(x);
    assert!(matches!(g.gradients(&Values::empty(), y), Err(Error::NotEvaluated(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let y = g.add(a, b);
    let (ta, tb) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2]));
    let mut bind = Bindings::new();
    bind.bind("a", &ta).bind("b", &tb);
    match g.evaluate(y, &bind, Mode::Eval) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_intermediate_is_reported() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.log(x);
    let t = Tensor::scalar(0.0);
    let mut b = Bindings::new();
    b.bind("x", &t);
    assert!(matches!(
        g.evaluate(y, &b, Mode::Eval),
        Err(Error::NonFinite { op: "log", .. })
    ));
}

#[test]
fn missing_binding_is_reported() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.exp(x);
    assert!(matches!(
        g.evaluate(y, &Bindings::new(), Mode::Eval),
        Err(Error::MissingBinding(name)) if name == "x"
    ));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param("x");
    let y = g.exp(x);
    let t = Tensor::zeros(&[2]);
    let mut b = Bindings::new();
    b.bind("x", &t);
    let v = g.evaluate(y, &b, Mode::Eval).unwrap();
    assert!(matches!(g.gradients(&v, y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn duplicated_subexpression_accumulates() {
    // f = (x*y) + (x*y) built twice from one node versus the expanded sum.
    let xv = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let yv = Tensor::new(vec![3], vec![1.5, 0.25, -0.75]).unwrap();
    let run = |shared: bool| {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.param("y");
        let (p, q) = if shared {
            let p = g.mul(x, y);
            (p, p)
        } else {
            (g.mul(x, y), g.mul(y, x))
        };
        let s = g.add(p, q);
        let s = g.square(s);
        let loss = g.sum(s, 0);
        let mut b = Bindings::new();
        b.bind("x", &xv).bind("y", &yv);
        let v = g.evaluate(loss, &b, Mode::Eval).unwrap();
        g.gradients(&v, loss).unwrap()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn dropout_deterministic_per_seed_and_off_in_eval() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.dropout(x, 0.5);
    let t = Tensor::full(&[64], 1.0);
    let mut b = Bindings::new();
    b.bind("x", &t);
    let a = g.evaluate(y, &b, Mode::Train { seed: 7 }).unwrap().get(y).unwrap().clone();
    let a2 = g.evaluate(y, &b, Mode::Train { seed: 7 }).unwrap().get(y).unwrap().clone();
    let c = g.evaluate(y, &b, Mode::Train { seed: 8 }).unwrap().get(y).unwrap().clone();
    assert_eq!(a, a2);
    assert_ne!(a, c);
    assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    let e = g.evaluate(y, &b, Mode::Eval).unwrap().get(y).unwrap().clone();
    assert_eq!(e, t);
}

#[test]
fn attention_block_matches_finite_differences() {
    let shape = SetShape {
        sets: 1,
        tokens: 2,
        width: 4,
    };
    let mut g = Graph::new();
    let x = g.input("x");
    let y = nn::self_attention(&mut g, x, "sa", shape, 2, 0.0);
    let c = g.input("c");
    let y = g.mul(y, c);
    let loss = g.sum_all(y, 8);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for p in ["q", "k", "v", "out"] {
            params.insert(format!("sa.{p}.weight"), Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
            params.insert(format!("sa.{p}.bias"), Tensor::uniform(&[4], -1.0, 1.0, &mut rng));
        }
        let mut inputs = ParamSet::new();
        inputs.insert("x".into(), Tensor::uniform(&[1, 2, 4], -2.0, 2.0, &mut rng));
        inputs.insert("c".into(), Tensor::uniform(&[1, 2, 4], -2.0, 2.0, &mut rng));
        let r = gradcheck::check(&g, loss, &params, &inputs, Mode::Eval, 1e-4, None).unwrap();
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
}

fn softmax_of(data: Vec<f64>, shape: Vec<usize>, axis: usize) -> Tensor {
    let t = Tensor::new(shape, data).unwrap();
    eval1(
        |g| {
            let x = g.input("x");
            g.softmax(x, axis)
        },
        &t,
    )
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in proptest::collection::vec(-30.0f64..30.0, 24), axis in 0usize..3) {
        let y = softmax_of(data, vec![2, 3, 4], axis);
        let shape = [2usize, 3, 4];
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for j in 0..inner {
                let s: f64 = (0..shape[axis]).map(|l| y.data()[(o * shape[axis] + l) * inner + j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_is_deterministic(data in proptest::collection::vec(-2.0f64..2.0, 12), seed in any::<u64>()) {
        let t = Tensor::new(vec![3, 4], data).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.gelu(x);
        let y = g.dropout(y, 0.3);
        let y = g.softmax(y, 1);
        let mut b = Bindings::new();
        b.bind("x", &t);
        let a = g.evaluate(y, &b, Mode::Train { seed }).unwrap().get(y).unwrap().clone();
        let c = g.evaluate(y, &b, Mode::Train { seed }).unwrap().get(y).unwrap().clone();
        prop_assert_eq!(a, c);
    }
}
