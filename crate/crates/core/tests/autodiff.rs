use proptest::prelude::*;
use uninext::autodiff::{forward_primitive, grad_check_fn, Attr, Attrs, NodeId, Precision};
use uninext::gradsuite::{run_case, tolerance, EPSILON, PRIMITIVES};
use uninext::{Error, Tape, Tensor};

fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims.to_vec(), v).unwrap()
}

#[test]
fn grad_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let y = x.mul(x).unwrap().sum_all().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grad_through_matmul() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::ones([1, 2]));
    let w = tape.leaf(Tensor::<f64>::ones([2, 2]));
    let y = x.matmul(w).unwrap().sum_all().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().dims(), &[1, 2]);
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn unused_leaf_gets_zeros() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(Tensor::<f64>::ones([3, 2]));
    let g = tape.backward(x.sum_all().unwrap()).unwrap();
    let gu = g.get(unused).unwrap();
    assert_eq!(gu.dims(), &[3, 2]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn primitive_examples() {
    let none = Attrs::new();
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert!(forward_primitive("matmul", &[a.clone(), eye], &none).unwrap().bit_eq(&a));
    let s = forward_primitive("sum", &[Tensor::<f64>::ones([2, 3])], &none).unwrap();
    assert_eq!(s.item(), Some(6.0));
    let e = forward_primitive("exp", &[t(&[2], &[0.0, std::f64::consts::LN_2])], &none).unwrap();
    assert_eq!(e.data()[0], 1.0);
    assert!((e.data()[1] - 2.0).abs() < 1e-15);
}

#[test]
fn primitive_errors() {
    let none = Attrs::new();
    let err = forward_primitive("frobnicate", &[t(&[1], &[0.0])], &none).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    let err = forward_primitive("matmul", &[Tensor::<f64>::ones([2, 3]), Tensor::<f64>::ones([2, 3])], &none).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }), "{msg}");
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let err = forward_primitive("add", &[Tensor::<f64>::ones([2, 3]), Tensor::<f64>::ones([4])], &none).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn attribute_driven_primitive() {
    let mut attrs = Attrs::new();
    attrs.insert("axis".into(), Attr::Int(1));
    attrs.insert("start".into(), Attr::Int(1));
    attrs.insert("len".into(), Attr::Int(2));
    let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let y = forward_primitive("slice", &[x], &attrs).unwrap();
    assert_eq!(y.dims(), &[2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 4.0, 5.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([3]));
    let err = tape.backward(x.exp().unwrap()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    let empty = Tape::<f64>::new();
    let err = empty.backward_id(NodeId(0)).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn grad_check_examples() {
    let x = t(&[3], &[-1.0, 0.0, 1.0]);
    let e = grad_check_fn(|_, x| x.gelu()?.sum_all(), &x, 1e-3).unwrap();
    assert!(e <= 1e-5, "gelu {e}");
    let x = t(&[2, 2], &[0.3, -4.0, 7.5, 1e-3]);
    let e = grad_check_fn(|_, x| x.sum_all(), &x, 1e-3).unwrap();
    assert!(e <= 1e-6, "sum {e}");
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = t(&[2], &[-1.0, 1.0]);
    let err = grad_check_fn(|_, x| x.ln()?.sum_all(), &x, 1e-3).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn every_primitive_matches_central_differences() {
    for &name in PRIMITIVES {
        for p in [Precision::F64, Precision::F32] {
            let r = run_case(name, p, 20, 0, EPSILON).unwrap();
            assert!(r.max_rel_error <= tolerance(p), "{name} {p:?}: {:e} (seed {})", r.max_rel_error, r.worst_seed);
        }
    }
}

fn graph(tape: &Tape<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let x = tape.leaf(a.clone());
    let w = tape.leaf(b.clone());
    let h = x.matmul(w).unwrap().gelu().unwrap().softmax().unwrap();
    let y = h.mul(h).unwrap().ln().unwrap().mean_all().unwrap();
    let g = tape.backward(y).unwrap();
    (y.value(), vec![g.get(x).unwrap().clone(), g.get(w).unwrap().clone()])
}

fn tensor(dims: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = dims.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::from_f64(dims.clone(), &v).unwrap())
}

fn broadcast_pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    prop::collection::vec((1usize..4, any::<bool>(), any::<bool>()), 1..4)
        .prop_flat_map(|axes| {
            let a: Vec<usize> = axes.iter().map(|&(d, ka, _)| if ka { d } else { 1 }).collect();
            let drop = axes.len() / 2;
            let b: Vec<usize> = axes[drop..].iter().map(|&(d, _, kb)| if kb { d } else { 1 }).collect();
            (tensor(a), tensor(b))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_gradient_is_ones(dims in prop::collection::vec(1usize..5, 0..4)) {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(dims.clone(), |i| i as f64 * 0.25 - 1.0));
        let g = tape.backward(x.sum_all().unwrap()).unwrap();
        let gx = g.get(x).unwrap();
        prop_assert_eq!(gx.dims(), dims.as_slice());
        prop_assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn broadcast_gradients_keep_input_dims((a, b) in broadcast_pair()) {
        for kind in ["add", "sub", "mul"] {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(a.clone());
            let y = tape.leaf(b.clone());
            let out = tape.forward_primitive(kind, &[x, y], &Attrs::new()).unwrap();
            let g = tape.backward(out.sum_all().unwrap()).unwrap();
            prop_assert_eq!(g.get(x).unwrap().dims(), a.dims());
            prop_assert_eq!(g.get(y).unwrap().dims(), b.dims());
            let e = grad_check_fn(|tape, x| {
                let y = tape.constant(b.clone());
                tape.forward_primitive(kind, &[x, y], &Attrs::new())
            }, &a, 1e-5).unwrap();
            prop_assert!(e <= 1e-5, "{} {:?} {:?}: {:e}", kind, a.dims(), b.dims(), e);
        }
    }

    #[test]
    fn determinism_and_replay(a in tensor(vec![3, 4]), b in tensor(vec![4, 5])) {
        let t1 = Tape::new();
        let (y1, g1) = graph(&t1, &a, &b);
        let t2 = Tape::new();
        let (y2, g2) = graph(&t2, &a, &b);
        prop_assert!(y1.bit_eq(&y2));
        for (p, q) in g1.iter().zip(&g2) {
            prop_assert!(p.bit_eq(q));
        }
        prop_assert!(t1.replay().is_ok());
    }
}
