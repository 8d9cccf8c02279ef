use super::*;

fn t(data: &[Float], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn leaf(data: &[Float], shape: &[usize]) -> Tensor {
    Tensor::leaf(data.to_vec(), shape).unwrap()
}

/// Naive triple loop, independent of the kernel used by `matmul`.
fn naive_matmul(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_known_product() {
    let a = t(&[1., 2., 3., 4.], &[2, 2]);
    let eye = t(&[1., 0., 0., 1.], &[2, 2]);
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());

    let b = t(&[5., 6., 7., 8.], &[2, 2]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.data(), &[19., 22., 43., 50.]);
    assert_eq!(c.data(), naive_matmul(a.data(), b.data(), 2, 2, 2).as_slice());
}

#[test]
fn matmul_matches_naive_on_rectangular_and_batched() {
    let mut rng = crate::rng::SeedTree::new(3).rng();
    let (m, k, n) = (5, 7, 3);
    let a: Vec<Float> = (0..2 * m * k).map(|_| rng.normal()).collect();
    let b: Vec<Float> = (0..2 * k * n).map(|_| rng.normal()).collect();
    let c = t(&a, &[2, m, k]).matmul(&t(&b, &[2, k, n])).unwrap();
    assert_eq!(c.shape(), &[2, m, n]);
    for bi in 0..2 {
        let want = naive_matmul(&a[bi * m * k..][..m * k], &b[bi * k * n..][..k * n], m, k, n);
        for (x, y) in c.data()[bi * m * n..][..m * n].iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let a = t(&[0.0; 6], &[2, 3]);
    let b = t(&[0.0; 6], &[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");

    let c = t(&[0.0; 4], &[4]);
    let msg = a.add(&c).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn constructor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    assert!(Tensor::new(vec![], &[0]).is_err());
}

#[test]
fn softmax_uniform_and_row_sums() {
    let s = t(&[0.; 4], &[4]).softmax().unwrap();
    assert_eq!(s.data(), &[0.25; 4]);

    let mut rng = crate::rng::SeedTree::new(11).rng();
    let x: Vec<Float> = (0..60).map(|_| rng.normal() * 5.0).collect();
    let s = t(&x, &[6, 10]).softmax().unwrap();
    for row in s.data().chunks(10) {
        assert!((row.iter().sum::<Float>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_v() {
    for v in [2usize, 4, 17, 300] {
        let ce = t(&vec![0.3; v], &[1, v]).cross_entropy(&[v / 2]).unwrap();
        assert!((ce.item() - (v as Float).ln()).abs() < 1e-6);
    }
}

#[test]
fn sum_backward_is_all_ones() {
    let x = leaf(&[1., -2., 3., 4., 5., 6.], &[2, 3]);
    x.sum().unwrap().backward().unwrap();
    assert_eq!(*x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn square_at_three_has_grad_six() {
    let x = leaf(&[3.0], &[1]);
    let y = x.mul(&x).unwrap();
    assert_eq!(y.item(), 9.0);
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap()[0], 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = leaf(&[1., 2.], &[2]);
    let err = x.scale(2.0).unwrap().backward().unwrap_err();
    assert!(matches!(err, Error::NonScalarLoss(ref s) if s == &[2]));
}

#[test]
fn gradients_accumulate_across_uses_and_calls() {
    let x = leaf(&[2.0], &[1]);
    // y = x + 3x → dy/dx = 4
    let y = x.add(&x.scale(3.0).unwrap()).unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap()[0], 4.0);
    // a second backward adds on top until explicitly zeroed
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap()[0], 8.0);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn detached_tensor_receives_no_gradient() {
    let x = leaf(&[1., 2.], &[2]);
    let d = x.detach();
    let loss = x.mul(&d).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert!(d.grad().is_none());
    assert!(!d.requires_grad());
    // only the live branch contributes: d/dx (x * const) = const
    assert_eq!(*x.grad().unwrap(), vec![1., 2.]);
}

#[test]
fn constants_produce_no_graph() {
    let a = t(&[1., 2.], &[2]);
    let b = a.exp().unwrap().sum().unwrap();
    assert!(!b.requires_grad());
    assert!(Graph::build(&b).unwrap().is_empty());
    b.backward().unwrap();
}

#[test]
fn graph_visits_each_node_once_in_topological_order() {
    // Diamond: x -> (a, b) -> c
    let x = leaf(&[0.5, 1.5], &[2]);
    let a = x.exp().unwrap();
    let b = x.scale(2.0).unwrap();
    let c = a.mul(&b).unwrap().sum().unwrap();
    let g = Graph::build(&c).unwrap();
    assert_eq!(g.len(), 5);
    let pos = |t: &Tensor| g.nodes().iter().position(|n| n.ptr() == t.ptr()).unwrap();
    assert!(pos(&x) < pos(&a) && pos(&x) < pos(&b));
    assert!(pos(&a) < pos(&c) && pos(&b) < pos(&c));
    c.backward().unwrap();
    // d/dx [2x e^x] = 2e^x (1 + x)
    for (i, &xv) in [0.5, 1.5].iter().enumerate() {
        let want = 2.0 * (xv as Float).exp() * (1.0 + xv);
        assert!((x.grad().unwrap()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn broadcasting_add_reduces_gradient() {
    let x = leaf(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let bias = leaf(&[10., 20., 30.], &[3]);
    let y = x.add(&bias).unwrap();
    assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
    y.sum().unwrap().backward().unwrap();
    assert_eq!(*bias.grad().unwrap(), vec![2., 2., 2.]);
    assert!(t(&[0.; 6], &[2, 3]).add(&t(&[0.; 2], &[2])).is_err());
}

#[test]
fn slice_concat_roundtrip() {
    let x = t(&(0..12).map(|i| i as Float).collect::<Vec<_>>(), &[3, 4]);
    let left = x.slice(1, 0, 1).unwrap();
    let right = x.slice(1, 1, 3).unwrap();
    assert_eq!(left.data(), &[0., 4., 8.]);
    let back = Tensor::concat(&[left, right], 1).unwrap();
    assert_eq!(back.data(), x.data());
    assert!(x.slice(0, 2, 2).is_err());
}

#[test]
fn transpose_and_reshape() {
    let x = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let xt = x.transpose().unwrap();
    assert_eq!(xt.shape(), &[3, 2]);
    assert_eq!(xt.data(), &[1., 4., 2., 5., 3., 6.]);
    assert_eq!(x.reshape(&[3, 2]).unwrap().data(), x.data());
    assert!(x.reshape(&[4, 2]).is_err());
}

#[test]
fn gather_rows_rejects_out_of_range() {
    let table = t(&[0.; 6], &[3, 2]);
    assert!(matches!(table.gather_rows(&[3]), Err(Error::TokenOutOfRange { id: 3, vocab: 3 })));
    assert_eq!(table.gather_rows(&[2, 0, 2]).unwrap().shape(), &[3, 2]);
}

#[test]
fn debug_switch_flags_non_finite_outputs() {
    let x = t(&[-1.0], &[1]);
    assert!(x.ln().unwrap().item().is_nan());
    set_debug_checks(true);
    let r = x.ln();
    set_debug_checks(false);
    assert!(matches!(r, Err(Error::NonFinite { op: "ln" })));
}

#[test]
fn log_sigmoid_is_stable() {
    let x = t(&[-800., 0., 800.], &[3]);
    let y = x.log_sigmoid().unwrap();
    assert_eq!(y.data()[0], -800.0);
    assert!((y.data()[1] + (2.0 as Float).ln()).abs() < 1e-15);
    assert_eq!(y.data()[2], 0.0);
}

#[test]
fn clamp_blocks_gradient_outside_range() {
    let x = leaf(&[0.5, 1.0, 1.5], &[3]);
    x.clamp(0.8, 1.2).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(*x.grad().unwrap(), vec![0., 1., 0.]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = crate::rng::SeedTree::new(5).rng();
        let a = leaf(&(0..12).map(|_| rng.normal()).collect::<Vec<_>>(), &[3, 4]);
        let b = leaf(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>(), &[4, 2]);
        let y = a.matmul(&b).unwrap().gelu().unwrap().softmax().unwrap().ln().unwrap().sum().unwrap();
        y.backward().unwrap();
        let bits = |v: &[Float]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let out = (y.item().to_bits(), bits(&a.grad().unwrap()), bits(&b.grad().unwrap()));
        out
    };
    assert_eq!(run(), run());
}
