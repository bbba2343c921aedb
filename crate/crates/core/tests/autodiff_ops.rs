use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfelflow::autodiff::{concat, grad_check, AutodiffError, Tape, Tensor, Var};

type R<'t> = Result<Var<'t>, AutodiffError>;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Fixed projection so vector-valued ops reduce to a scalar with a non-trivial gradient.
fn weighted_sum<'t>(v: Var<'t>) -> R<'t> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let wv = v.tape().constant(w);
    Ok(v.mul(wv)?.sum_all())
}

#[test]
fn add_example() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity_example() {
    let tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    assert_eq!(i.matmul(m).unwrap().value().data(), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn softmax_uniform_example() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0; 3]));
    for v in x.softmax().unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let loss = x.mul(x).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(g.get(loss), None, "non-leaf gradients are released");

    let tape = Tape::new();
    let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let bt = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
    let b = tape.constant(bt.clone());
    let loss = a.matmul(b).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    // ones(2,2) · Bᵀ: each row equals the row sums of B.
    let row_sums: Vec<f64> = (0..3).map(|r| bt.data()[2 * r] + bt.data()[2 * r + 1]).collect();
    let expected: Vec<f64> = row_sums.iter().chain(&row_sums).cloned().collect();
    assert_eq!(g.get(a).unwrap().data(), &expected[..]);

    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let loss = x.sigmoid();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = a.add(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    let err = a.matmul(a).unwrap_err();
    assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn domain_errors_for_log_and_sqrt() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(x.log(), Err(AutodiffError::Domain { op: "log", .. })));
    assert!(matches!(x.sqrt(), Err(AutodiffError::Domain { op: "sqrt", .. })));
}

#[test]
fn exp_is_range_guarded() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1000.0, -1000.0, 1.0]));
    let y = x.exp();
    assert!(y.value().is_finite());
    let g = tape.backward(y.sum_all()).unwrap();
    let g = g.get(x).unwrap().data().to_vec();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[1], 0.0);
    assert!((g[2] - 1f64.exp()).abs() < 1e-15);
}

#[test]
fn gradcheck_examples() {
    let e = grad_check(|_, x| Ok(x.mul(x)?.sum_all()), &Tensor::from_vec(vec![1.0, 2.0]), 1e-5).unwrap();
    assert!(e < 1e-8, "{e}");
    let e = grad_check(|_, x| Ok(x.exp().sum_all()), &Tensor::from_vec(vec![0.0]), 1e-5).unwrap();
    assert!(e < 1e-7, "{e}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 5], &mut rng, -2.0, 2.0);
    let e = grad_check(|_, x| weighted_sum(x.layer_norm(1e-6)?), &x, 1e-5).unwrap();
    assert!(e < 1e-5, "{e}");
}

#[test]
fn shared_subexpression_accumulates() {
    // f = x·x + x  ⇒  f' = 2x + 1
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 0.5, 3.0]));
    let f = x.mul(x).unwrap().add(x).unwrap().sum_all();
    let g = tape.backward(f).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[-1.0, 2.0, 7.0]);
}

#[test]
fn reshape_and_transpose_are_gradient_transparent() {
    let tape = Tape::new();
    let x = tape.param(
        Tensor::from_vec((0..12).map(f64::from).collect())
            .reshaped(&[3, 4])
            .unwrap(),
    );
    let y = x.reshape(&[2, 6]).unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[3, 4]));

    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3, 4]));
    let y = x.transpose().unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3, 4]));
}

#[test]
fn broadcast_over_leading_dims() {
    let tape = Tape::new();
    let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.param(Tensor::from_vec(vec![10.0, 20.0]));
    let s = a.add(b).unwrap();
    assert_eq!(s.value().data(), &[11.0, 22.0, 13.0, 24.0]);
    let g = tape.backward(s.mul(a).unwrap().sum_all()).unwrap();
    // d/db Σ (a+b)·a = Σ_rows a
    assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    let c = tape.param(Tensor::scalar(2.0));
    assert_eq!(c.mul(a).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn concat_and_slice_round_trip() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(c.slice(1, 2, 3).unwrap().value(), b.value());
    assert_eq!(c.slice(1, 0, 2).unwrap().value(), a.value());
    assert!(c.slice(1, 2, 4).is_err());
}

/// Every op, five seeds, shapes up to 4×4×4, eps 1e-5, rel error < 1e-5.
#[test]
fn gradcheck_every_op_over_random_inputs() {
    let shapes: [&[usize]; 3] = [&[4], &[3, 4], &[2, 3, 4]];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for shape in shapes {
            let x = random(shape, &mut rng, -1.5, 1.5);
            let pos = random(shape, &mut rng, 0.5, 2.0);
            let other = random(shape, &mut rng, -1.0, 1.0);
            let last = *shape.last().unwrap();
            let row = random(&[last], &mut rng, 0.5, 1.5);
            let mat = random(&[last, 3], &mut rng, -1.0, 1.0);

            let check = |name: &str, e: f64| {
                assert!(e < 1e-5, "op {name} seed {seed} shape {shape:?}: rel err {e}");
            };
            macro_rules! gc {
                ($name:expr, $x:expr, |$tp:ident, $v:ident| $body:expr) => {{
                    let e = grad_check(|$tp, $v| weighted_sum($body), $x, 1e-5).unwrap();
                    check($name, e);
                }};
            }
            gc!("add", &x, |tp, v| v.add(tp.constant(other.clone()))?);
            gc!("add_bcast", &x, |tp, v| v.add(tp.constant(row.clone()))?);
            gc!("add_bcast_rhs_grad", &row, |tp, v| tp.constant(x.clone()).add(v)?);
            gc!("sub", &x, |tp, v| tp.constant(other.clone()).sub(v)?);
            gc!("mul", &x, |_tp, v| v.mul(v)?);
            gc!("mul_bcast_rhs_grad", &row, |tp, v| tp.constant(x.clone()).mul(v)?);
            gc!("div", &pos, |tp, v| tp.constant(other.clone()).div(v)?);
            gc!("div_num", &x, |tp, v| v.div(tp.constant(pos.clone()))?);
            gc!("exp", &x, |_tp, v| v.exp());
            gc!("log", &pos, |_tp, v| v.log()?);
            gc!("sqrt", &pos, |_tp, v| v.sqrt()?);
            gc!("tanh", &x, |_tp, v| v.tanh());
            gc!("sigmoid", &x, |_tp, v| v.sigmoid());
            gc!("silu", &x, |_tp, v| v.silu());
            gc!("scale", &x, |_tp, v| v.scale(-2.5).add_scalar(1.0));
            gc!("sum_axis", &x, |_tp, v| v.sum(0)?);
            gc!("mean_axis", &x, |_tp, v| v.mean(shape.len() - 1)?);
            gc!("mean_all", &x, |_tp, v| v.mul(v)?.mean_all());
            gc!("reshape", &x, |_tp, v| v
                .reshape(&[x.len()])?
                .mul(v.reshape(&[x.len()])?)?);
            gc!("concat", &x, |tp, v| concat(&[v, tp.constant(other.clone()), v], 0)?
                .mul(concat(&[v, v, v], 0)?)?);
            gc!("slice", &x, |_tp, v| v.slice(shape.len() - 1, 1, last)?.exp());
            gc!("softmax", &x, |_tp, v| v.softmax()?);
            gc!("layer_norm", &x, |_tp, v| v.layer_norm(1e-6)?);
            gc!("l2_normalize", &x, |_tp, v| v.l2_normalize(1e-9)?);
            if shape.len() >= 2 {
                gc!("transpose", &x, |_tp, v| v.transpose()?.exp());
                gc!("matmul_lhs", &x, |tp, v| v.matmul(tp.constant(mat.clone()))?);
                gc!("matmul_rhs", &mat, |tp, v| tp.constant(x.clone()).matmul(v)?);
                if shape.len() == 3 {
                    let bt = random(&[shape[0], last, 2], &mut rng, -1.0, 1.0);
                    gc!("batched_matmul", &x, |tp, v| v.matmul(tp.constant(bt.clone()))?);
                    gc!("batched_matmul_rhs", &bt, |tp, v| tp.constant(x.clone()).matmul(v)?);
                    gc!("attention_like", &x, |_tp, v| v
                        .matmul(v.transpose()?)?
                        .softmax()?
                        .matmul(v)?);
                }
            }
        }
    }
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0], vec![]).is_err());
    assert_eq!(Tensor::scalar(3.0).item(), Some(3.0));
}
