//! Velocity fields `u(x, t)`.
//!
//! [`Mlp`] is the trainable network. The other implementors of [`Velocity`]
//! are closed-form fields used as test fixtures and oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{Ops, ParamId, Tensor};
use crate::{Error, Result};

/// Time argument of a field evaluation: one time for the whole batch, or
/// one per row.
#[derive(Debug, Clone, Copy)]
pub enum Time<'a> {
    Uniform(f64),
    PerRow(&'a [f64]),
}

impl Time<'_> {
    fn check(&self, rows: usize) -> Result<()> {
        let ok = |t: f64| (0.0..=1.0).contains(&t);
        match self {
            Time::Uniform(t) if !ok(*t) => Err(Error::TimeOutOfRange(*t)),
            Time::PerRow(ts) => {
                if ts.len() != rows {
                    return Err(Error::Invalid(format!("{} per-row times for {rows} rows", ts.len())));
                }
                match ts.iter().find(|t| !ok(**t)) {
                    Some(t) => Err(Error::TimeOutOfRange(*t)),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, row: usize) -> f64 {
        match self {
            Time::Uniform(t) => *t,
            Time::PerRow(ts) => ts[row],
        }
    }
}

pub trait Velocity {
    /// Point dimension `D`.
    fn dim(&self) -> usize;

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V>;
}

fn check_input<O: Ops>(ops: &O, x: &O::V, dim: usize, t: Time<'_>) -> Result<usize> {
    let shape = ops.value(x).shape();
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: shape.to_vec(),
        });
    }
    t.check(shape[0])?;
    Ok(shape[0])
}

/// How `t` is fed to the network alongside `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEmbedding {
    /// `t` itself, one feature.
    Raw,
    /// `sin(2^k·π·t), cos(2^k·π·t)` for `k = 0..K`, interleaved.
    Fourier(usize),
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match self {
            TimeEmbedding::Raw => 1,
            TimeEmbedding::Fourier(k) => 2 * k,
        }
    }

    pub fn features(&self, t: f64) -> Vec<f64> {
        match self {
            TimeEmbedding::Raw => vec![t],
            TimeEmbedding::Fourier(k) => (0..*k)
                .flat_map(|i| {
                    let w = (1u64 << i) as f64 * std::f64::consts::PI * t;
                    [w.sin(), w.cos()]
                })
                .collect(),
        }
    }

    fn batch(&self, t: Time<'_>, rows: usize) -> Tensor {
        let e = self.width();
        let mut data = Vec::with_capacity(rows * e);
        match t {
            Time::Uniform(t) => {
                let f = self.features(t);
                for _ in 0..rows {
                    data.extend_from_slice(&f);
                }
            }
            Time::PerRow(ts) => {
                for &t in ts {
                    data.extend(self.features(t));
                }
            }
        }
        Tensor::matrix(rows, e, data).expect("embedding shape")
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(TimeEmbedding::Raw),
            _ => s
                .strip_prefix("fourier:")
                .and_then(|k| k.parse().ok())
                .filter(|k| *k >= 1)
                .map(TimeEmbedding::Fourier),
        }
    }
}

impl std::fmt::Display for TimeEmbedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeEmbedding::Raw => write!(f, "raw"),
            TimeEmbedding::Fourier(k) => write!(f, "fourier:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub embedding: TimeEmbedding,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            dim: 2,
            hidden: 128,
            hidden_layers: 3,
            embedding: TimeEmbedding::Fourier(4),
        }
    }
}

impl FieldSpec {
    /// `[D + E, H, …, H, D]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + self.embedding.width()];
        w.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        w.push(self.dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::Invalid(format!("invalid field widths {self:?}")));
        }
        if let TimeEmbedding::Fourier(0) = self.embedding {
            return Err(Error::Invalid("fourier embedding needs K >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInit {
    pub seed: u64,
    pub final_scale: f64,
}

impl FieldInit {
    pub fn new(seed: u64) -> Self {
        FieldInit {
            seed,
            final_scale: 1e-2,
        }
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Multilayer perceptron over `[x, embed(t)]` with `x·sigmoid(x)` hidden
/// activations. Parameters are stored as `[W0, b0, W1, b1, …]` with `W` of
/// shape `[fan_in, fan_out]` and `b` of shape `[1, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: FieldSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Weights uniform in `[-a, a]` (Glorot bound), biases zero; the last
    /// layer's weights are additionally multiplied by `init.final_scale`.
    pub fn init(spec: FieldSpec, init: FieldInit) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let layers = widths.len() - 1;
        let mut params = Vec::with_capacity(2 * layers);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut a = glorot_bound(fan_in, fan_out);
            if l + 1 == layers {
                a *= init.final_scale;
            }
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-1.0..=1.0) * a).collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Mlp { spec, params })
    }

    /// Rebuilds a network from flattened parameters in storage order.
    pub fn from_params(spec: FieldSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if params.len() != 2 * (widths.len() - 1) {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * (widths.len() - 1),
                params.len()
            )));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            if w.shape() != [pair[0], pair[1]] || b.shape() != [1, pair[1]] {
                return Err(Error::Invalid(format!(
                    "layer {l}: parameter shapes {:?}/{:?} do not chain",
                    w.shape(),
                    b.shape()
                )));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::Invalid(format!("layer {l}: non-finite parameter")));
            }
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.params.len())
            .map(|i| {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                format!("layer{}.{kind}", i / 2)
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Eager evaluation on a batch.
    pub fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.velocity(&mut crate::numcore::Eager, x, Time::Uniform(t))
    }
}

impl Velocity for Mlp {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V> {
        let rows = check_input(ops, x, self.spec.dim, t)?;
        let emb = ops.constant(self.spec.embedding.batch(t, rows));
        let mut h = ops.concat_cols(x, &emb)?;
        let layers = self.params.len() / 2;
        for l in 0..layers {
            let w = ops.param(ParamId(2 * l), &self.params[2 * l]);
            let b = ops.param(ParamId(2 * l + 1), &self.params[2 * l + 1]);
            h = ops.matmul(&h, &w)?;
            h = ops.add_row(&h, &b)?;
            if l + 1 < layers {
                h = ops.silu(&h)?;
            }
        }
        Ok(h)
    }
}

/// `u(x, t) = c` for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        ConstantField { value }
    }
}

impl Velocity for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V> {
        let rows = check_input(ops, x, self.dim(), t)?;
        let rows_data: Vec<&[f64]> = vec![&self.value; rows];
        let mut out = Tensor::from_rows(&rows_data);
        if rows == 0 {
            out = Tensor::zeros(&[0, self.dim()]);
        }
        Ok(ops.constant(out))
    }
}

/// Scalar field `u(x, t) = slope·t`, independent of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTimeField {
    pub slope: f64,
}

impl Velocity for LinearTimeField {
    fn dim(&self) -> usize {
        1
    }

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V> {
        let rows = check_input(ops, x, 1, t)?;
        let data = (0..rows).map(|i| self.slope * t.at(i)).collect();
        Ok(ops.constant(Tensor::matrix(rows, 1, data)?))
    }
}

/// One free velocity vector per grid node, ignoring `x`: `u(·, t_n) = v_n`.
/// Node `n` is parameter `ParamId(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeVelocities {
    pub times: Vec<f64>,
    pub velocities: Vec<Tensor>,
}

impl NodeVelocities {
    pub fn zeros(times: &[f64], dim: usize) -> Self {
        NodeVelocities {
            times: times.to_vec(),
            velocities: vec![Tensor::zeros(&[1, dim]); times.len()],
        }
    }

    fn node(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() < 1e-12)
            .ok_or_else(|| Error::Invalid(format!("t = {t} is not a grid node")))
    }
}

impl Velocity for NodeVelocities {
    fn dim(&self) -> usize {
        self.velocities[0].len()
    }

    fn velocity<O: Ops>(&self, ops: &mut O, x: &O::V, t: Time<'_>) -> Result<O::V> {
        let rows = check_input(ops, x, self.dim(), t)?;
        let Time::Uniform(t) = t else {
            return Err(Error::Invalid("node velocities need a uniform time".into()));
        };
        let n = self.node(t)?;
        let v = ops.param(ParamId(n), &self.velocities[n]);
        let zeros = ops.constant(Tensor::zeros(&[rows, self.dim()]));
        Ok(ops.add_row(&zeros, &v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_difference, max_relative_error, Eager, Tape};
    use proptest::prelude::*;

    fn small_spec(embedding: TimeEmbedding) -> FieldSpec {
        FieldSpec {
            dim: 2,
            hidden: 6,
            hidden_layers: 2,
            embedding,
        }
    }

    #[test]
    fn zero_parameters_give_zero_velocity() {
        let mut f = Mlp::init(FieldSpec::default(), FieldInit::new(1)).unwrap();
        for p in f.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::from_rows(&[[0.3, -2.0], [1.0, 5.0]]);
        for t in [0.0, 0.4, 1.0] {
            assert!(f.eval(&x, t).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let f = Mlp::init(FieldSpec::default(), FieldInit::new(3)).unwrap();
        let x = Tensor::from_rows(&[[0.5, -0.25]; 4]);
        let y = f.eval(&x, 0.3).unwrap();
        for i in 1..4 {
            assert_eq!(y.row(i), y.row(0));
        }
    }

    #[test]
    fn single_hidden_layer_matches_hand_evaluation() {
        let spec = FieldSpec {
            dim: 2,
            hidden: 2,
            hidden_layers: 1,
            embedding: TimeEmbedding::Raw,
        };
        // Input is [x0, x1, t] = [1, 0, 0].
        let w0 = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25], [3.0, 3.0]]);
        let b0 = Tensor::from_rows(&[[0.1, 0.2]]);
        let w1 = Tensor::from_rows(&[[1.0, -2.0], [0.5, 4.0]]);
        let b1 = Tensor::from_rows(&[[-0.3, 0.7]]);
        let f = Mlp::from_params(spec, vec![w0, b0, w1, b1]).unwrap();
        let y = f.eval(&Tensor::from_rows(&[[1.0, 0.0]]), 0.0).unwrap();

        let silu = |v: f64| v / (1.0 + (-v).exp());
        let h0 = silu(1.0 * 0.5 + 0.1);
        let h1 = silu(1.0 * -1.0 + 0.2);
        let want = [h0 * 1.0 + h1 * 0.5 - 0.3, h0 * -2.0 + h1 * 4.0 + 0.7];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = FieldSpec::default();
        let a = Mlp::init(spec.clone(), FieldInit::new(9)).unwrap();
        let b = Mlp::init(spec.clone(), FieldInit::new(9)).unwrap();
        assert_eq!(a, b);
        let c = Mlp::init(spec.clone(), FieldInit::new(10)).unwrap();
        assert_ne!(a, c);

        let widths = spec.widths();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let mut bound = glorot_bound(widths[l], widths[l + 1]);
            if l + 1 == layers {
                bound *= 1e-2;
            }
            for &v in a.params()[2 * l].data() {
                assert!(v.abs() <= bound);
            }
            assert!(a.params()[2 * l + 1].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn glorot_bound_closed_form() {
        assert!((glorot_bound(4, 4) - 0.8660254037844386).abs() < 1e-12);
    }

    #[test]
    fn invalid_widths_rejected() {
        let mut spec = FieldSpec::default();
        spec.hidden = 0;
        assert!(Mlp::init(spec, FieldInit::new(0)).is_err());
        let spec = FieldSpec {
            embedding: TimeEmbedding::Fourier(0),
            ..FieldSpec::default()
        };
        assert!(Mlp::init(spec, FieldInit::new(0)).is_err());
    }

    #[test]
    fn fourier_embedding_at_zero() {
        assert_eq!(
            TimeEmbedding::Fourier(4).features(0.0),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(TimeEmbedding::parse("fourier:4"), Some(TimeEmbedding::Fourier(4)));
        assert_eq!(TimeEmbedding::parse("raw"), Some(TimeEmbedding::Raw));
        assert_eq!(TimeEmbedding::parse("fourier:0"), None);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = Mlp::init(FieldSpec::default(), FieldInit::new(0)).unwrap();
        let x3 = Tensor::zeros(&[2, 3]);
        assert!(matches!(f.eval(&x3, 0.5), Err(Error::Dimension { .. })));
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(f.eval(&x, 1.5), Err(Error::TimeOutOfRange(_))));
        assert!(matches!(f.eval(&x, -0.1), Err(Error::TimeOutOfRange(_))));
    }

    #[test]
    fn per_row_time_matches_uniform() {
        let f = Mlp::init(FieldSpec::default(), FieldInit::new(4)).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]);
        let a = f.velocity(&mut Eager, &x, Time::PerRow(&[0.25, 0.25])).unwrap();
        assert_eq!(a, f.eval(&x, 0.25).unwrap());
    }

    #[test]
    fn mean_square_gradient_matches_finite_differences() {
        for emb in [TimeEmbedding::Raw, TimeEmbedding::Fourier(2)] {
            let mut f = Mlp::init(small_spec(emb), FieldInit::new(5)).unwrap();
            // Unit final scale keeps every gradient well away from zero.
            f = Mlp::from_params(
                f.spec().clone(),
                f.params()
                    .iter()
                    .map(|p| p.scale(if p.cols() == 2 { 30.0 } else { 1.0 }))
                    .collect(),
            )
            .unwrap();
            let x = Tensor::from_rows(&[[0.4, -1.1], [1.5, 0.2], [-0.7, 0.9]]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = f.velocity(&mut tape, &xv, Time::Uniform(0.35)).unwrap();
            let l = tape.mean_square(&y).unwrap();
            let grads = tape.backward(l, &f.param_ids()).unwrap();
            for (i, id) in f.param_ids().into_iter().enumerate() {
                let fd = finite_difference(&f.params()[i], 1e-6, |p| {
                    let mut g = f.clone();
                    g.params_mut()[i] = p.clone();
                    g.eval(&x, 0.35).unwrap().mean_square()
                });
                let err = max_relative_error(&grads[&id], &fd, 1e-6);
                assert!(err < 1e-5, "param {i}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_equivariant(seed in 0u64..1000, t in 0.0f64..=1.0) {
            let f = Mlp::init(small_spec(TimeEmbedding::Fourier(3)), FieldInit::new(seed)).unwrap();
            let x = Tensor::from_rows(&[[0.1, 0.2], [1.3, -0.4], [-2.0, 0.5], [0.0, 0.0]]);
            let perm = [2usize, 0, 3, 1];
            let y = f.eval(&x, t).unwrap();
            let yp = f.eval(&x.select_rows(&perm), t).unwrap();
            prop_assert_eq!(yp, y.select_rows(&perm));
        }
    }
}
