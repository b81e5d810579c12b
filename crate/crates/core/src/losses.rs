//! Training objectives.
//!
//! The process-matching loss compares forward states of source samples
//! with backward states of target samples at every grid node:
//! `L = Σ_n w_n·d(X^f_{t_n}, X^b_{t_n})`. Paired rows use a pointwise metric,
//! unpaired pools use biased MMD², and the two are mixed as
//! `L = L^p + λ_u·L^u`.

use crate::assignment;
use crate::field::{Time, Velocity};
use crate::flow::{backward_rollout, forward_rollout, TimeGrid};
use crate::numcore::{Ops, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairwiseMetric {
    /// `(1/B)·Σ_i ‖a_i − b_i‖²`
    #[default]
    SquaredL2Mean,
}

impl PairwiseMetric {
    pub fn apply<O: Ops>(&self, ops: &mut O, a: &O::V, b: &O::V) -> Result<O::V> {
        let rows = ops.value(a).rows();
        let ra = ops.value(b).rows();
        if rows != ra {
            return Err(Error::RowMismatch { left: rows, right: ra });
        }
        if rows == 0 {
            return Err(Error::Empty("paired batch"));
        }
        match self {
            PairwiseMetric::SquaredL2Mean => {
                let d = ops.sub(a, b)?;
                let sq = ops.mul(&d, &d)?;
                let s = ops.sum(&sq)?;
                Ok(ops.scale(&s, 1.0 / rows as f64)?)
            }
        }
    }
}

/// Sum of Gaussian RBF kernels `exp(−‖x − y‖² / (2σ²))` over bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Invalid("kernel needs at least one bandwidth".into()));
        }
        if bandwidths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("bandwidths must be positive: {bandwidths:?}")));
        }
        Ok(KernelSpec { bandwidths })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Kernel-sum of every pair: `Σ_{i,j} k(a_i, b_j)`.
    fn pair_sum<O: Ops>(&self, ops: &mut O, a: &O::V, b: &O::V) -> Result<O::V> {
        let d2 = ops.pairwise_sq_dist(a, b)?;
        let mut acc: Option<O::V> = None;
        for &s in &self.bandwidths {
            let scaled = ops.scale(&d2, -1.0 / (2.0 * s * s))?;
            let k = ops.exp(&scaled)?;
            let total = ops.sum(&k)?;
            acc = Some(match acc {
                None => total,
                Some(prev) => ops.add(&prev, &total)?,
            });
        }
        Ok(acc.expect("nonempty bandwidths"))
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            bandwidths: vec![0.25, 0.5, 1.0, 2.0],
        }
    }
}

/// Biased (V-statistic) MMD²:
/// `(1/m²)Σk(a,a′) + (1/n²)Σk(b,b′) − (2/mn)Σk(a,b)`.
pub fn mmd_squared<O: Ops>(ops: &mut O, a: &O::V, b: &O::V, kernel: &KernelSpec) -> Result<O::V> {
    let (sa, sb) = (ops.value(a).shape().to_vec(), ops.value(b).shape().to_vec());
    let (m, n) = (sa[0], sb[0]);
    if m == 0 || n == 0 {
        return Err(Error::Empty("MMD batch"));
    }
    if sa.get(1) != sb.get(1) {
        return Err(Error::Dimension {
            expected: sa.get(1).copied().unwrap_or(0),
            got: sb,
        });
    }
    let kaa = kernel.pair_sum(ops, a, a)?;
    let kbb = kernel.pair_sum(ops, b, b)?;
    let kab = kernel.pair_sum(ops, a, b)?;
    let kaa = ops.scale(&kaa, 1.0 / (m * m) as f64)?;
    let kbb = ops.scale(&kbb, 1.0 / (n * n) as f64)?;
    let kab = ops.scale(&kab, 2.0 / (m * n) as f64)?;
    let s = ops.add(&kaa, &kbb)?;
    Ok(ops.sub(&s, &kab)?)
}

fn lift_pair<O: Ops>(ops: &mut O, x: &Tensor, z: &Tensor) -> Result<(O::V, O::V)> {
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    Ok((ops.constant(x.clone()), ops.constant(z.clone())))
}

/// `Σ_n w_n·term(n)`, also returning the weighted per-node values.
fn weighted_sum<O: Ops>(
    ops: &mut O,
    grid: &TimeGrid,
    mut term: impl FnMut(&mut O, usize) -> Result<O::V>,
) -> Result<(O::V, Vec<f64>)> {
    let mut acc: Option<O::V> = None;
    let mut parts = Vec::with_capacity(grid.weights().len());
    for (n, &w) in grid.weights().iter().enumerate() {
        let d = term(ops, n)?;
        let wd = ops.scale(&d, w)?;
        parts.push(ops.scalar_value(&wd));
        acc = Some(match acc {
            None => wd,
            Some(prev) => ops.add(&prev, &wd)?,
        });
    }
    Ok((acc.expect("grid has nodes"), parts))
}

/// Paired term: row `i` of `x` is matched with row `i` of `z` at each node.
pub fn paired_match_loss<O: Ops, F: Velocity>(
    ops: &mut O,
    field: &F,
    x: &Tensor,
    z: &Tensor,
    grid: &TimeGrid,
    metric: PairwiseMetric,
) -> Result<(O::V, Vec<f64>)> {
    let (xv, zv) = lift_pair(ops, x, z)?;
    let fwd = forward_rollout(ops, field, &xv, grid)?;
    let bwd = backward_rollout(ops, field, &zv, grid)?;
    weighted_sum(ops, grid, |ops, n| metric.apply(ops, &fwd[n], &bwd[n]))
}

/// Unpaired term: MMD² between the forward states of `x_u` and the
/// backward states of `z_u` at each node.
pub fn unpaired_match_loss<O: Ops, F: Velocity>(
    ops: &mut O,
    field: &F,
    x_u: &Tensor,
    z_u: &Tensor,
    grid: &TimeGrid,
    kernel: &KernelSpec,
) -> Result<(O::V, Vec<f64>)> {
    if x_u.rows() == 0 || z_u.rows() == 0 {
        return Err(Error::Empty("unpaired pool"));
    }
    let xv = ops.constant(x_u.clone());
    let zv = ops.constant(z_u.clone());
    let fwd = forward_rollout(ops, field, &xv, grid)?;
    let bwd = backward_rollout(ops, field, &zv, grid)?;
    weighted_sum(ops, grid, |ops, n| mmd_squared(ops, &fwd[n], &bwd[n], kernel))
}

/// One minibatch: aligned paired rows plus independent unpaired pools. Any
/// part may have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch {
    pub x_paired: Tensor,
    pub z_paired: Tensor,
    pub x_unpaired: Tensor,
    pub z_unpaired: Tensor,
}

impl MatchBatch {
    pub fn paired(x: Tensor, z: Tensor) -> Self {
        let d = x.cols();
        MatchBatch {
            x_paired: x,
            z_paired: z,
            x_unpaired: Tensor::zeros(&[0, d]),
            z_unpaired: Tensor::zeros(&[0, d]),
        }
    }

    pub fn has_unpaired(&self) -> bool {
        self.x_unpaired.rows() > 0 || self.z_unpaired.rows() > 0
    }

    /// All source rows, paired first.
    pub fn x_all(&self) -> Result<Tensor> {
        Ok(self.x_paired.concat_rows(&self.x_unpaired)?)
    }

    pub fn z_all(&self) -> Result<Tensor> {
        Ok(self.z_paired.concat_rows(&self.z_unpaired)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `L^p`
    pub paired: f64,
    /// `L^u`, before multiplying by `λ_u`.
    pub unpaired: f64,
    /// `w_n·d(X^f_{t_n}, X^b_{t_n})` over paired rows, per node.
    pub paired_terms: Vec<f64>,
    /// `w_n·MMD²` per node; empty when the unpaired term is absent.
    pub unpaired_terms: Vec<f64>,
}

/// Full objective `L^p + λ_u·L^u`.
///
/// The MMD on each side runs over that side's unpaired rows together with
/// its paired rows from the same batch. The unpaired term is skipped (not
/// multiplied by zero) when `λ_u = 0` or both pools are empty, so fully
/// paired training never touches the unpaired path.
#[allow(clippy::too_many_arguments)]
pub fn bidpm_loss<O: Ops, F: Velocity>(
    ops: &mut O,
    field: &F,
    batch: &MatchBatch,
    grid: &TimeGrid,
    metric: PairwiseMetric,
    kernel: &KernelSpec,
    lambda_u: f64,
) -> Result<(O::V, LossBreakdown)> {
    if !(lambda_u >= 0.0 && lambda_u.is_finite()) {
        return Err(Error::Invalid(format!("lambda_u must be >= 0, got {lambda_u}")));
    }
    let p = batch.x_paired.rows();
    if p != batch.z_paired.rows() {
        return Err(Error::RowMismatch {
            left: p,
            right: batch.z_paired.rows(),
        });
    }
    let use_unpaired = lambda_u > 0.0 && batch.has_unpaired();
    if p == 0 && !use_unpaired {
        return Err(Error::Empty("batch"));
    }

    let (x_src, z_src) = if use_unpaired {
        (batch.x_all()?, batch.z_all()?)
    } else {
        (batch.x_paired.clone(), batch.z_paired.clone())
    };
    let xv = ops.constant(x_src);
    let zv = ops.constant(z_src);
    let fwd = forward_rollout(ops, field, &xv, grid)?;
    let bwd = backward_rollout(ops, field, &zv, grid)?;

    let mut paired_terms = Vec::new();
    let mut lp = None;
    if p > 0 {
        let (l, parts) = weighted_sum(ops, grid, |ops, n| {
            let (a, b) = if use_unpaired {
                (ops.slice_rows(&fwd[n], 0, p)?, ops.slice_rows(&bwd[n], 0, p)?)
            } else {
                (fwd[n].clone(), bwd[n].clone())
            };
            metric.apply(ops, &a, &b)
        })?;
        lp = Some(l);
        paired_terms = parts;
    }

    let mut unpaired_terms = Vec::new();
    let mut lu = None;
    if use_unpaired {
        let (l, parts) = weighted_sum(ops, grid, |ops, n| mmd_squared(ops, &fwd[n], &bwd[n], kernel))?;
        lu = Some(l);
        unpaired_terms = parts;
    }

    let paired = lp.as_ref().map_or(0.0, |v| ops.scalar_value(v));
    let unpaired = lu.as_ref().map_or(0.0, |v| ops.scalar_value(v));
    let total_v = match (lp, lu) {
        (Some(lp), None) => lp,
        (None, Some(lu)) => ops.scale(&lu, lambda_u)?,
        (Some(lp), Some(lu)) => {
            let s = ops.scale(&lu, lambda_u)?;
            ops.add(&lp, &s)?
        }
        (None, None) => unreachable!("checked above"),
    };
    let total = ops.scalar_value(&total_v);
    Ok((
        total_v,
        LossBreakdown {
            total,
            paired,
            unpaired,
            paired_terms,
            unpaired_terms,
        },
    ))
}

fn check_times(t: &[f64], rows: usize) -> Result<()> {
    if t.len() != rows {
        return Err(Error::RowMismatch {
            left: rows,
            right: t.len(),
        });
    }
    Ok(())
}

/// `(1/B)·Σ_i ‖u − target_i‖²` with the field evaluated at `(x_t, t_i)`.
fn regression_loss<O: Ops, F: Velocity>(
    ops: &mut O,
    field: &F,
    x_t: Tensor,
    target: Tensor,
    t: &[f64],
) -> Result<O::V> {
    let rows = x_t.rows();
    if rows == 0 {
        return Err(Error::Empty("flow-matching batch"));
    }
    let xv = ops.constant(x_t);
    let u = field.velocity(ops, &xv, Time::PerRow(t))?;
    let tv = ops.constant(target);
    PairwiseMetric::SquaredL2Mean.apply(ops, &u, &tv)
}

/// Rectified-flow regression onto `z − x` along `X_t = (1 − t)·x + t·z`.
pub fn rf_loss<O: Ops, F: Velocity>(ops: &mut O, field: &F, x: &Tensor, z: &Tensor, t: &[f64]) -> Result<O::V> {
    cfm_loss(ops, field, x, z, t, CfmVariant::Independent { sigma: 0.0 }, None).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CfmVariant {
    /// I-CFM: `μ_t = (1 − t)x + tz`, constant `σ`.
    Independent { sigma: f64 },
    /// OT-CFM: I-CFM after exact minimum-cost re-pairing of the batch.
    OptimalTransport { sigma: f64 },
}

impl CfmVariant {
    pub fn sigma(&self) -> f64 {
        match self {
            CfmVariant::Independent { sigma } | CfmVariant::OptimalTransport { sigma } => *sigma,
        }
    }
}

/// Costs of one OT re-pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtCost {
    pub assigned: f64,
    pub identity: f64,
}

/// Re-pairs `z` to `x` by minimum total squared Euclidean cost. Returns the
/// permuted `z` and both costs.
pub fn ot_pairing(x: &Tensor, z: &Tensor) -> Result<(Tensor, OtCost)> {
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    let costs = x.pairwise_sq_dist(z)?;
    let a = assignment::solve(&costs)?;
    let perm: Vec<usize> = a.row_to_col.iter().map(|j| j.expect("square")).collect();
    let identity = (0..x.rows()).map(|i| costs.data()[i * x.rows() + i]).sum();
    Ok((
        z.select_rows(&perm),
        OtCost {
            assigned: a.cost,
            identity,
        },
    ))
}

/// Conditional flow matching. With `σ_t = σ` constant the conditional
/// velocity `σ′/σ·(X_t − μ_t) + μ′_t` reduces to `z − x`, and
/// `X_t = μ_t + σ·ξ`. `noise` supplies `ξ` and is required when `σ > 0`.
pub fn cfm_loss<O: Ops, F: Velocity>(
    ops: &mut O,
    field: &F,
    x: &Tensor,
    z: &Tensor,
    t: &[f64],
    variant: CfmVariant,
    noise: Option<&Tensor>,
) -> Result<(O::V, Option<OtCost>)> {
    let sigma = variant.sigma();
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if x.rows() != z.rows() {
        return Err(Error::RowMismatch {
            left: x.rows(),
            right: z.rows(),
        });
    }
    check_times(t, x.rows())?;
    let (z, ot) = match variant {
        CfmVariant::Independent { .. } => (z.clone(), None),
        CfmVariant::OptimalTransport { .. } => {
            let (zp, cost) = ot_pairing(x, z)?;
            (zp, Some(cost))
        }
    };
    let d = x.cols();
    let mut x_t = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        for j in 0..d {
            x_t.data_mut()[i * d + j] = (1.0 - t[i]) * x.row(i)[j] + t[i] * z.row(i)[j];
        }
    }
    if sigma > 0.0 {
        let xi = noise.ok_or_else(|| Error::Invalid("sigma > 0 needs noise".into()))?;
        x_t = x_t.add(&xi.scale(sigma))?;
    }
    let target = z.sub(x)?;
    Ok((regression_loss(ops, field, x_t, target, t)?, ot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;
    use crate::numcore::Eager;
    use proptest::prelude::*;

    fn brute_mmd(a: &Tensor, b: &Tensor, bw: &[f64]) -> f64 {
        let k = |x: &[f64], y: &[f64]| -> f64 {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
        };
        let (m, n) = (a.rows(), b.rows());
        let mut saa = 0.0;
        for i in 0..m {
            for j in 0..m {
                saa += k(a.row(i), a.row(j));
            }
        }
        let mut sbb = 0.0;
        for i in 0..n {
            for j in 0..n {
                sbb += k(b.row(i), b.row(j));
            }
        }
        let mut sab = 0.0;
        for i in 0..m {
            for j in 0..n {
                sab += k(a.row(i), b.row(j));
            }
        }
        saa / (m * m) as f64 + sbb / (n * n) as f64 - 2.0 * sab / (m * n) as f64
    }

    fn mmd(a: &Tensor, b: &Tensor, k: &KernelSpec) -> f64 {
        mmd_squared(&mut Eager, a, b, k).unwrap().item()
    }

    #[test]
    fn singleton_mmd_hand_value() {
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let v = mmd(&Tensor::from_rows(&[[0.0, 0.0]]), &Tensor::from_rows(&[[1.0, 0.0]]), &k);
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.78694).abs() < 1e-5);
    }

    #[test]
    fn mmd_of_identical_samples_is_zero() {
        let x = Tensor::from_rows(&[[0.1, 0.2], [1.0, -3.0], [0.5, 0.5]]);
        assert!(mmd(&x, &x, &KernelSpec::default()).abs() <= 1e-12);
    }

    #[test]
    fn mmd_errors() {
        let k = KernelSpec::default();
        let e = Tensor::zeros(&[0, 2]);
        let x = Tensor::zeros(&[2, 2]);
        assert!(mmd_squared(&mut Eager, &e, &x, &k).is_err());
        assert!(mmd_squared(&mut Eager, &x, &Tensor::zeros(&[2, 3]), &k).is_err());
        assert!(KernelSpec::rbf(vec![]).is_err());
        assert!(KernelSpec::rbf(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_field_paired_hand_value() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(2).unwrap();
        let x = Tensor::from_rows(&[[0.0, 0.0]]);
        let z = Tensor::from_rows(&[[1.0, 0.0]]);
        let (l, parts) = paired_match_loss(&mut Eager, &f, &x, &z, &g, PairwiseMetric::SquaredL2Mean).unwrap();
        assert_eq!(l.item(), 2.5);
        assert_eq!(parts, vec![1.0, 0.5, 1.0]);
        let (l, _) = paired_match_loss(&mut Eager, &f, &x, &x, &g, PairwiseMetric::SquaredL2Mean).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn straight_field_has_zero_paired_loss() {
        let f = ConstantField::new(vec![1.0, 0.0]);
        let x = Tensor::from_rows(&[[0.0, 0.0]]);
        let z = Tensor::from_rows(&[[1.0, 0.0]]);
        for n in 1..=8 {
            let g = TimeGrid::uniform(n).unwrap();
            let (l, _) = paired_match_loss(&mut Eager, &f, &x, &z, &g, PairwiseMetric::SquaredL2Mean).unwrap();
            assert!(l.item() <= 1e-12);
        }
    }

    #[test]
    fn paired_row_mismatch() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(1).unwrap();
        let r = paired_match_loss(
            &mut Eager,
            &f,
            &Tensor::zeros(&[2, 2]),
            &Tensor::zeros(&[3, 2]),
            &g,
            PairwiseMetric::SquaredL2Mean,
        );
        assert!(matches!(r, Err(Error::RowMismatch { .. })));
    }

    #[test]
    fn unpaired_singletons_compose() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(1).unwrap();
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let (l, parts) = unpaired_match_loss(
            &mut Eager,
            &f,
            &Tensor::from_rows(&[[0.0, 0.0]]),
            &Tensor::from_rows(&[[1.0, 0.0]]),
            &g,
            &k,
        )
        .unwrap();
        let one = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((l.item() - 2.0 * one).abs() < 1e-15);
        assert_eq!(parts.len(), 2);
        assert!(unpaired_match_loss(&mut Eager, &f, &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[1, 2]), &g, &k).is_err());
    }

    #[test]
    fn unpaired_identical_pools_vanish() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(3).unwrap();
        let x = Tensor::from_rows(&[[0.3, 0.1], [-1.0, 2.0], [0.0, 0.5]]);
        let (_, parts) = unpaired_match_loss(&mut Eager, &f, &x, &x, &g, &KernelSpec::default()).unwrap();
        assert!(parts.iter().all(|p| p.abs() <= 1e-12));
    }

    #[test]
    fn gaussian_pools_give_nonnegative_mmd() {
        use rand::SeedableRng;
        use rand_distr_like::normal_matrix;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = normal_matrix(&mut rng, 64, 2);
        let b = normal_matrix(&mut rng, 64, 2);
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(1).unwrap();
        let (_, parts) = unpaired_match_loss(&mut Eager, &f, &a, &b, &g, &KernelSpec::default()).unwrap();
        assert!(parts[0] >= 0.0 && parts[0] < 0.5);
    }

    mod rand_distr_like {
        use crate::numcore::Tensor;
        use rand::Rng;

        pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
            let data = (0..rows * cols)
                .map(|_| {
                    let u1: f64 = 1.0 - rng.gen::<f64>();
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            Tensor::matrix(rows, cols, data).unwrap()
        }
    }

    fn singleton_batch() -> MatchBatch {
        MatchBatch {
            x_paired: Tensor::from_rows(&[[0.0, 0.0]]),
            z_paired: Tensor::from_rows(&[[1.0, 0.5]]),
            x_unpaired: Tensor::from_rows(&[[0.5, -0.5]]),
            z_unpaired: Tensor::from_rows(&[[-1.0, 1.0]]),
        }
    }

    #[test]
    fn lambda_zero_is_pure_paired_loss() {
        let f = ConstantField::new(vec![0.2, -0.1]);
        let g = TimeGrid::uniform(2).unwrap();
        let b = singleton_batch();
        let (_, bd) = bidpm_loss(
            &mut Eager,
            &f,
            &b,
            &g,
            PairwiseMetric::SquaredL2Mean,
            &KernelSpec::default(),
            0.0,
        )
        .unwrap();
        let (lp, _) = paired_match_loss(
            &mut Eager,
            &f,
            &b.x_paired,
            &b.z_paired,
            &g,
            PairwiseMetric::SquaredL2Mean,
        )
        .unwrap();
        assert_eq!(bd.total, lp.item());
        assert_eq!(bd.unpaired, 0.0);
        assert!(bd.unpaired_terms.is_empty());
    }

    #[test]
    fn empty_pools_drop_the_unpaired_term() {
        let f = ConstantField::new(vec![0.2, -0.1]);
        let g = TimeGrid::uniform(2).unwrap();
        let b = MatchBatch::paired(Tensor::from_rows(&[[0.0, 0.0]]), Tensor::from_rows(&[[1.0, 0.5]]));
        let (_, bd) = bidpm_loss(
            &mut Eager,
            &f,
            &b,
            &g,
            PairwiseMetric::SquaredL2Mean,
            &KernelSpec::default(),
            0.3,
        )
        .unwrap();
        assert_eq!(bd.total, bd.paired);
        assert_eq!(bd.unpaired, 0.0);
    }

    #[test]
    fn total_is_component_sum() {
        let f = ConstantField::new(vec![0.2, -0.1]);
        let g = TimeGrid::uniform(2).unwrap();
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let b = singleton_batch();
        let (_, bd) = bidpm_loss(&mut Eager, &f, &b, &g, PairwiseMetric::SquaredL2Mean, &k, 0.2).unwrap();
        let (lp, _) = paired_match_loss(
            &mut Eager,
            &f,
            &b.x_paired,
            &b.z_paired,
            &g,
            PairwiseMetric::SquaredL2Mean,
        )
        .unwrap();
        // Pools are each side's unpaired rows joined with its paired rows.
        let (lu, _) = unpaired_match_loss(&mut Eager, &f, &b.x_all().unwrap(), &b.z_all().unwrap(), &g, &k).unwrap();
        assert!((bd.paired - lp.item()).abs() < 1e-15);
        assert!((bd.unpaired - lu.item()).abs() < 1e-15);
        assert!((bd.total - (lp.item() + 0.2 * lu.item())).abs() <= 1e-12);
        let sum_parts: f64 = bd.paired_terms.iter().sum();
        assert!((sum_parts - bd.paired).abs() < 1e-12);
    }

    #[test]
    fn fully_unpaired_batch() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(1).unwrap();
        let k = KernelSpec::rbf(vec![1.0]).unwrap();
        let b = MatchBatch {
            x_paired: Tensor::zeros(&[0, 2]),
            z_paired: Tensor::zeros(&[0, 2]),
            x_unpaired: Tensor::from_rows(&[[0.0, 0.0]]),
            z_unpaired: Tensor::from_rows(&[[1.0, 0.0]]),
        };
        let (_, bd) = bidpm_loss(&mut Eager, &f, &b, &g, PairwiseMetric::SquaredL2Mean, &k, 0.5).unwrap();
        assert_eq!(bd.paired, 0.0);
        let one = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((bd.total - 0.5 * 2.0 * one).abs() < 1e-15);
        let empty = MatchBatch::paired(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2]));
        assert!(bidpm_loss(&mut Eager, &f, &empty, &g, PairwiseMetric::SquaredL2Mean, &k, 0.5).is_err());
        assert!(bidpm_loss(&mut Eager, &f, &b, &g, PairwiseMetric::SquaredL2Mean, &k, -1.0).is_err());
    }

    #[test]
    fn rf_hand_values() {
        let x = Tensor::from_rows(&[[0.0, 0.0]]);
        let z = Tensor::from_rows(&[[1.0, 0.0]]);
        for t in [0.0, 0.3, 1.0] {
            let zero = ConstantField::new(vec![0.0, 0.0]);
            assert_eq!(rf_loss(&mut Eager, &zero, &x, &z, &[t]).unwrap().item(), 1.0);
            let exact = ConstantField::new(vec![1.0, 0.0]);
            assert_eq!(rf_loss(&mut Eager, &exact, &x, &z, &[t]).unwrap().item(), 0.0);
        }
        let zero = ConstantField::new(vec![0.0, 0.0]);
        assert!(rf_loss(&mut Eager, &zero, &x, &Tensor::zeros(&[2, 2]), &[0.1]).is_err());
    }

    #[test]
    fn icfm_zero_sigma_is_rf_target() {
        let f = ConstantField::new(vec![1.0, -2.0]);
        let x = Tensor::from_rows(&[[0.0, 1.0], [2.0, 2.0]]);
        let z = x.add(&Tensor::from_rows(&[[1.0, -2.0], [1.0, -2.0]])).unwrap();
        let (l, ot) = cfm_loss(
            &mut Eager,
            &f,
            &x,
            &z,
            &[0.2, 0.9],
            CfmVariant::Independent { sigma: 0.0 },
            None,
        )
        .unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(ot.is_none());
        assert!(cfm_loss(
            &mut Eager,
            &f,
            &x,
            &z,
            &[0.2, 0.9],
            CfmVariant::Independent { sigma: -0.1 },
            None
        )
        .is_err());
        assert!(cfm_loss(
            &mut Eager,
            &f,
            &x,
            &z,
            &[0.2, 0.9],
            CfmVariant::Independent { sigma: 0.1 },
            None
        )
        .is_err());
    }

    #[test]
    fn ot_pairing_keeps_diagonal_minimum() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [5.0, 5.0]]);
        let z = Tensor::from_rows(&[[0.1, 0.0], [5.0, 5.1]]);
        let (zp, c) = ot_pairing(&x, &z).unwrap();
        assert_eq!(zp, z);
        assert_eq!(c.assigned, c.identity);
        let swapped = z.select_rows(&[1, 0]);
        let (zp, c) = ot_pairing(&x, &swapped).unwrap();
        assert_eq!(zp, z);
        assert!(c.assigned < c.identity);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mmd_matches_brute_force_and_is_symmetric(
            m in 1usize..=16,
            n in 1usize..=16,
            pts in proptest::collection::vec(-3.0f64..3.0, 64),
        ) {
            let a = Tensor::matrix(m, 2, pts[..2 * m].to_vec()).unwrap();
            let b = Tensor::matrix(n, 2, pts[32..32 + 2 * n].to_vec()).unwrap();
            let k = KernelSpec::default();
            let v = mmd(&a, &b, &k);
            prop_assert!((v - brute_mmd(&a, &b, k.bandwidths())).abs() <= 1e-12);
            prop_assert!((v - mmd(&b, &a, &k)).abs() <= 1e-12);
            prop_assert!(v >= -1e-12);
        }

        #[test]
        fn paired_loss_is_linear_in_weights(
            c in 0.01f64..10.0,
            v in proptest::collection::vec(-1.0f64..1.0, 2),
            n in 1usize..6,
        ) {
            let f = ConstantField::new(v);
            let x = Tensor::from_rows(&[[0.0, 0.3], [1.0, -1.0]]);
            let z = Tensor::from_rows(&[[0.5, 0.5], [2.0, 0.0]]);
            let g = TimeGrid::uniform(n).unwrap();
            let gc = g.clone().with_weights(g.weights().iter().map(|w| w * c).collect()).unwrap();
            let (l, _) = paired_match_loss(&mut Eager, &f, &x, &z, &g, PairwiseMetric::SquaredL2Mean).unwrap();
            let (lc, _) = paired_match_loss(&mut Eager, &f, &x, &z, &gc, PairwiseMetric::SquaredL2Mean).unwrap();
            prop_assert!((lc.item() - c * l.item()).abs() <= 1e-12 * (1.0 + lc.item().abs()));
        }

        #[test]
        fn rf_loss_permutation_invariant(pts in proptest::collection::vec(-2.0f64..2.0, 12), ts in proptest::collection::vec(0.0f64..=1.0, 3)) {
            let f = ConstantField::new(vec![0.3, -0.7]);
            let x = Tensor::matrix(3, 2, pts[..6].to_vec()).unwrap();
            let z = Tensor::matrix(3, 2, pts[6..].to_vec()).unwrap();
            let perm = [2, 0, 1];
            let tp: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
            let a = rf_loss(&mut Eager, &f, &x, &z, &ts).unwrap().item();
            let b = rf_loss(&mut Eager, &f, &x.select_rows(&perm), &z.select_rows(&perm), &tp).unwrap().item();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn ot_cost_never_exceeds_identity(pts in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let x = Tensor::matrix(6, 2, pts[..12].to_vec()).unwrap();
            let z = Tensor::matrix(6, 2, pts[12..].to_vec()).unwrap();
            let (_, c) = ot_pairing(&x, &z).unwrap();
            prop_assert!(c.assigned <= c.identity + 1e-12);
        }
    }
}
