//! Dense `f64` arrays with reverse-mode differentiation.
//!
//! Model code is written once against [`Ops`] and runs either eagerly on
//! plain [`Tensor`]s (inference) or on a [`Tape`] (training), so both paths
//! execute the same arithmetic in the same order.

mod tape;
mod tensor;

pub use tape::{GradientMap, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Identifies a trainable tensor across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// The primitive set. Every primitive checks shapes and rejects non-finite
/// results.
pub trait Ops {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    /// Lifts a parameter. On a tape, repeated calls with the same id return
    /// the same leaf so gradients from every use accumulate in one place.
    fn param(&mut self, id: ParamId, t: &Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V, TensorError>;
    /// `x·sigmoid(x)`
    fn silu(&mut self, a: &Self::V) -> Result<Self::V, TensorError>;
    fn sum(&mut self, a: &Self::V) -> Result<Self::V, TensorError>;
    fn mean_square(&mut self, a: &Self::V) -> Result<Self::V, TensorError>;
    fn exp(&mut self, a: &Self::V) -> Result<Self::V, TensorError>;
    /// Broadcasts a `[1, n]` row over every row of an `[m, n]` matrix.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V, TensorError>;
    fn concat_cols(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn concat_rows(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn slice_rows(&mut self, a: &Self::V, start: usize, end: usize) -> Result<Self::V, TensorError>;
    /// `[m, d] × [n, d] → [m, n]` matrix of squared Euclidean distances.
    fn pairwise_sq_dist(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;

    fn scalar_value(&self, v: &Self::V) -> f64 {
        self.value(v).item()
    }
}

/// Untaped evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Ops for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, _id: ParamId, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.matmul(b)?.check_finite("matmul")
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.add(b)?.check_finite("add")
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.sub(b)?.check_finite("sub")
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.mul(b)?.check_finite("mul")
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        a.scale(c).check_finite("scale")
    }

    fn silu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        a.map(tensor::silu).check_finite("silu")
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::scalar(a.sum()).check_finite("sum")
    }

    fn mean_square(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::scalar(a.mean_square()).check_finite("mean_square")
    }

    fn exp(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        a.map(f64::exp).check_finite("exp")
    }

    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
        a.add_row(row)?.check_finite("add_row")
    }

    fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.concat_cols(b)
    }

    fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.concat_rows(b)
    }

    fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor, TensorError> {
        a.slice_rows(start, end)
    }

    fn pairwise_sq_dist(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        a.pairwise_sq_dist(b)?.check_finite("pairwise_sq_dist")
    }
}

/// Central finite-difference gradient of `f` with respect to `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`, the largest over all elements.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const W: ParamId = ParamId(0);
    const U: ParamId = ParamId(1);

    fn grad_of(w: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>) -> Tensor {
        let mut tape = Tape::new();
        let wv = tape.param(W, w);
        let loss = f(&mut tape, wv).unwrap();
        tape.backward(loss, &[W]).unwrap().remove(&W).unwrap()
    }

    fn eager_loss(w: &Tensor, f: &impl Fn(&mut Eager, Tensor) -> Result<Tensor, TensorError>) -> f64 {
        f(&mut Eager, w.clone()).unwrap().item()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::from_rows(&[[1.0, 2.0]]);
        let g = grad_of(&w, |t, v| {
            let sq = t.mul(&v, &v)?;
            t.sum(&sq)
        });
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_square_at_minimum_is_flat() {
        let w = Tensor::from_rows(&[[0.3, -1.2, 4.0]]);
        let c = w.clone();
        let g = grad_of(&w, |t, v| {
            let cv = t.constant(c.clone());
            let d = t.sub(&v, &cv)?;
            t.mean_square(&d)
        });
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_unknown_params() {
        let mut tape = Tape::new();
        let v = tape.param(W, &Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(v, &[W]), Err(TensorError::NotScalar(_))));
        let mut tape = Tape::new();
        let v = tape.param(W, &Tensor::zeros(&[1, 2]));
        let s = tape.sum(&v).unwrap();
        assert!(matches!(
            tape.backward(s, &[U]),
            Err(TensorError::ParamNotOnTape(ParamId(1)))
        ));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(W, &Tensor::full(&[1, 2], 1.0));
        let _b = tape.param(U, &Tensor::full(&[2, 3], 1.0));
        let s = tape.sum(&a).unwrap();
        let g = tape.backward(s, &[W, U]).unwrap();
        assert_eq!(g[&U], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.param(W, &Tensor::full(&[1, 1], 1000.0));
        assert!(matches!(tape.exp(&a), Err(TensorError::NonFinite { op: "exp" })));
        assert!(Eager.exp(&Tensor::full(&[1, 1], 1000.0)).is_err());
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[[3.0]]);
        let a = tape.param(W, &w);
        let b = tape.param(W, &w);
        assert_eq!(a, b);
        let p = tape.mul(&a, &b).unwrap();
        let s = tape.sum(&p).unwrap();
        let g = tape.backward(s, &[W]).unwrap();
        assert_eq!(g[&W].data(), &[6.0]);
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
    }

    /// Every primitive, each reduced to a scalar through a fixed random
    /// projection so every output element contributes.
    fn check_primitive(
        w: &Tensor,
        f: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>,
        g: impl Fn(&mut Eager, Tensor) -> Result<Tensor, TensorError>,
    ) -> f64 {
        let ad = grad_of(w, f);
        let fd = finite_difference(w, 1e-6, |p| eager_loss(p, &g));
        max_relative_error(&ad, &fd, 1e-3)
    }

    macro_rules! both {
        ($body:expr) => {
            (
                |t: &mut Tape, v: Var| -> Result<Var, TensorError> { $body(t, v) },
                |t: &mut Eager, v: Tensor| -> Result<Tensor, TensorError> { $body(t, v) },
            )
        };
    }

    fn project<O: Ops>(o: &mut O, v: &O::V) -> Result<O::V, TensorError> {
        let shape = o.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let proj = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7).cos()).collect()).unwrap();
        let p = o.constant(proj);
        let m = o.mul(v, &p)?;
        o.sum(&m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitives_match_finite_differences(
            w in matrix_strategy(3, 4),
            other in matrix_strategy(3, 4),
            right in matrix_strategy(4, 2),
            row in matrix_strategy(1, 4),
        ) {
            let tol = 1e-5;
            macro_rules! check {
                ($f:expr) => {{
                    let (ft, fe) = both!($f);
                    let err = check_primitive(&w, ft, fe);
                    prop_assert!(err < tol, "rel err {err}");
                }};
            }
            check!(|o: &mut _, v| { let c = Ops::constant(o, right.clone()); let m = Ops::matmul(o, &v, &c)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.transpose().unwrap()); let m = Ops::matmul(o, &c, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::add(o, &v, &c)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::sub(o, &c, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::mul(o, &v, &c)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::mul(o, &v, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::scale(o, &v, -1.7)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::silu(o, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::exp(o, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::silu(o, &v)?; Ops::sum(o, &m) });
            check!(|o: &mut _, v| { Ops::mean_square(o, &v) });
            check!(|o: &mut _, v| { let r = Ops::constant(o, row.clone()); let m = Ops::add_row(o, &v, &r)?; let m = Ops::mul(o, &m, &m)?; project(o, &m) });
            check!(|o: &mut _, v| { let r = Ops::slice_rows(o, &v, 0, 1)?; let c = Ops::constant(o, other.clone()); let m = Ops::add_row(o, &c, &r)?; let m = Ops::silu(o, &m)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::concat_cols(o, &c, &v)?; let m = Ops::silu(o, &m)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::concat_rows(o, &v, &c)?; let m = Ops::silu(o, &m)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::slice_rows(o, &v, 1, 3)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::pairwise_sq_dist(o, &v, &c)?; project(o, &m) });
            check!(|o: &mut _, v| { let c = Ops::constant(o, other.clone()); let m = Ops::pairwise_sq_dist(o, &c, &v)?; project(o, &m) });
            check!(|o: &mut _, v| { let m = Ops::pairwise_sq_dist(o, &v, &v)?; let m = Ops::scale(o, &m, -0.5)?; let m = Ops::exp(o, &m)?; Ops::sum(o, &m) });
        }

        #[test]
        fn backward_is_linear(w in matrix_strategy(2, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            fn l1<O: Ops>(o: &mut O, v: &O::V) -> Result<O::V, TensorError> {
                let s = o.silu(v)?;
                o.mean_square(&s)
            }
            fn l2<O: Ops>(o: &mut O, v: &O::V) -> Result<O::V, TensorError> {
                let e = o.exp(v)?;
                project(o, &e)
            }
            let g1 = grad_of(&w, |t, v| l1(t, &v));
            let g2 = grad_of(&w, |t, v| l2(t, &v));
            let gc = grad_of(&w, |t, v| {
                let x = l1(t, &v)?;
                let y = l2(t, &v)?;
                let x = t.scale(&x, a)?;
                let y = t.scale(&y, b)?;
                t.add(&x, &y)
            });
            for i in 0..w.len() {
                let want = a * g1.data()[i] + b * g2.data()[i];
                prop_assert!((gc.data()[i] - want).abs() < 1e-12);
            }
        }

        #[test]
        fn taped_runs_are_bit_identical(w in matrix_strategy(3, 3)) {
            let run = || {
                let mut t = Tape::new();
                let v = t.param(W, &w);
                let m = t.matmul(&v, &v).unwrap();
                let m = t.silu(&m).unwrap();
                let l = t.mean_square(&m).unwrap();
                let value = t.scalar_value(&l);
                (value.to_bits(), t.backward(l, &[W]).unwrap())
            };
            let (v1, g1) = run();
            let (v2, g2) = run();
            prop_assert_eq!(v1, v2);
            let bits = |g: &GradientMap| g[&W].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&g1), bits(&g2));
        }
    }
}
