//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Only the primitives needed by the alignment encoder, the hinge loss and
//! the toy reader are provided: matmul, add, scale, clamp, softmax,
//! layer-norm, L2-normalize, gather/max over rows, slicing/concatenation,
//! dot and sum. There is no general broadcasting.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    dot_slices, l2_normalize, l2_normalize_rows, matmul, matmul_nt, matmul_tn, softmax_rows,
    Tensor,
};

/// Central finite-difference gradient of a scalar function, entry by entry.
///
/// Used by tests as an independent oracle for the analytic gradients.
pub fn finite_difference<F>(x: &Tensor, h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    /// Checks a unary graph builder against finite differences at `points` random inputs.
    fn check_op<F>(name: &str, rows: usize, cols: usize, points: usize, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for _ in 0..points {
            let x = rand_t(&mut rng, rows, cols);
            // random projection turns any output into a scalar
            let probe_shape = {
                let mut t = Tape::new();
                let v = t.constant(x.clone());
                let out = build(&mut t, v);
                t.value(out).shape().to_vec()
            };
            let n: usize = probe_shape.iter().product();
            let w = Tensor::new(probe_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let eval = |x: &Tensor| {
                let mut t = Tape::new();
                let v = t.constant(x.clone());
                let out = build(&mut t, v);
                let wv = t.constant(w.clone());
                let s = t.dot(out, wv).unwrap();
                t.value(s).data()[0]
            };
            let mut t = Tape::new();
            let v = t.param(&x);
            let out = build(&mut t, v);
            let wv = t.constant(w.clone());
            let s = t.dot(out, wv).unwrap();
            let grads = t.backward(s).unwrap();
            let analytic = grads.get(v).unwrap().data().to_vec();
            let numeric = finite_difference(&x, 1e-5, eval);
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = (a - n).abs() / a.abs().max(1.0);
                assert!(err < 1e-4, "{name}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn finite_difference_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_t(&mut rng, 4, 3);
        let row = rand_t(&mut rng, 1, 4);
        let other = rand_t(&mut rng, 3, 4);
        let gain = rand_t(&mut rng, 1, 4);
        let points = 100;
        check_op("matmul", 3, 4, points, |t, x| {
            let wv = t.param(&w);
            t.matmul(x, wv).unwrap()
        });
        check_op("matmul_nt", 3, 4, points, |t, x| {
            let o = t.constant(other.clone());
            t.matmul_nt(x, o).unwrap()
        });
        check_op("add_row", 3, 4, points, |t, x| {
            let r = t.param(&row);
            let y = t.add_row(x, r).unwrap();
            t.add(y, x).unwrap()
        });
        check_op("scale", 3, 4, points, |t, x| {
            let y = t.scale(x, -2.5);
            t.add_scalar(y, 0.3)
        });
        check_op("relu", 3, 4, points, |t, x| t.relu(x));
        check_op("softmax", 3, 4, points, |t, x| t.softmax_rows(x).unwrap());
        check_op("layer_norm", 3, 4, points, |t, x| {
            let g = t.param(&gain);
            let b = t.param(&row);
            t.layer_norm_rows(x, g, b, 1e-5).unwrap()
        });
        check_op("l2_normalize", 3, 4, points, |t, x| t.l2_normalize_rows(x).unwrap());
        check_op("gather", 3, 4, points, |t, x| {
            let a = t.gather_rows(x, vec![2, 0, 2]).unwrap();
            let b = t.gather_elements(x, vec![(0, 1), (2, 3), (0, 1)]).unwrap();
            let m = t.max_rows(a).unwrap();
            t.concat_rows(&[m, b]).unwrap()
        });
        check_op("slice_concat", 3, 4, points, |t, x| {
            let a = t.slice_cols(x, 1, 2).unwrap();
            let b = t.slice_cols(x, 0, 2).unwrap();
            let c = t.concat_cols(&[a, b]).unwrap();
            t.transpose(c).unwrap()
        });
        check_op("dot_sum", 3, 4, points, |t, x| {
            let d = t.dot(x, x).unwrap();
            let s = t.sum(x);
            t.add(d, s).unwrap()
        });
        check_op("cross_entropy", 3, 4, points, |t, x| {
            t.softmax_cross_entropy(x, vec![0, 3, 1]).unwrap()
        });
    }

    #[test]
    fn backward_simple_cases() {
        let v = Tensor::row_vector(vec![1.0, -2.0, 0.5]);
        let mut t = Tape::new();
        let x = t.param(&v);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(&v);
        let s = t.dot(x, x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::row_vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::row_vector(vec![3.0, 4.0]));
        let s = t.dot(x, c).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn max_rows_ties_pick_first() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::row_vector(vec![2.0, 5.0, 5.0]));
        let m = t.max_rows(x).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn deterministic_bits() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = rand_t(&mut rng, 5, 6);
            let b = rand_t(&mut rng, 6, 3);
            let mut t = Tape::new();
            let av = t.param(&a);
            let bv = t.param(&b);
            let m = t.matmul(av, bv).unwrap();
            let sm = t.softmax_rows(m).unwrap();
            let s = t.dot(sm, sm).unwrap();
            let g = t.backward(s).unwrap();
            (
                t.value(s).data()[0].to_bits(),
                g.get(av).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = Tensor::matrix(
                4,
                7,
                (0..28).map(|_| rng.random_range(-50.0..50.0)).collect(),
            );
            let s = softmax_rows(&a).unwrap();
            for i in 0..4 {
                let sum: f64 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}
