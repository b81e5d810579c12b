//! Time grids and the discrete forward/backward Euler processes.

use std::fmt;
use std::str::FromStr;

use crate::field::{Time, Velocity};
use crate::numcore::{Eager, Ops, Tensor};
use crate::{Error, Result};

/// `0 = t_0 < t_1 < … < t_N = 1` with a nonnegative weight per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Grid("need at least two time points".into()));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(Error::Grid("endpoints must be exactly 0 and 1".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("points must be strictly increasing".into()));
        }
        if weights.len() != points.len() {
            return Err(Error::Grid(format!(
                "{} weights for {} points",
                weights.len(),
                points.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Grid("weights must be finite and nonnegative".into()));
        }
        Ok(TimeGrid { points, weights })
    }

    /// `N` equal steps; endpoint weight 1, interior weight 0.5.
    pub fn uniform(steps: usize) -> Result<Self> {
        Self::uniform_weighted(steps, 1.0, 0.5)
    }

    pub fn uniform_weighted(steps: usize, endpoint: f64, interior: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Grid("step count must be at least 1".into()));
        }
        let points = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        let weights = (0..=steps)
            .map(|k| if k == 0 || k == steps { endpoint } else { interior })
            .collect();
        Self::new(points, weights)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of Euler steps `N`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        Self::new(self.points, self.weights)
    }

    /// Equal spacing up to rounding in the point values.
    pub fn is_uniform(&self) -> bool {
        let h = 1.0 / self.steps() as f64;
        self.points.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source at `t = 0` to target at `t = 1`.
    Forward,
    /// Target at `t = 1` to source at `t = 0`.
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(Error::Invalid(format!("unknown direction {s:?}"))),
        }
    }
}

fn check_dim<O: Ops, F: Velocity>(ops: &O, field: &F, x: &O::V) -> Result<()> {
    let shape = ops.value(x).shape();
    if shape.len() != 2 || shape[1] != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: shape.to_vec(),
        });
    }
    Ok(())
}

/// `X_n = X_{n-1} + u(X_{n-1}, t_{n-1})·(t_n − t_{n-1})`, returning all
/// `N + 1` states starting with `x0`.
pub fn forward_rollout<O: Ops, F: Velocity>(ops: &mut O, field: &F, x0: &O::V, grid: &TimeGrid) -> Result<Vec<O::V>> {
    check_dim(ops, field, x0)?;
    let t = grid.points();
    let mut states = Vec::with_capacity(t.len());
    states.push(x0.clone());
    for n in 1..t.len() {
        let prev = &states[n - 1];
        let u = field.velocity(ops, prev, Time::Uniform(t[n - 1]))?;
        let step = ops.scale(&u, t[n] - t[n - 1])?;
        let next = ops.add(prev, &step)?;
        states.push(next);
    }
    Ok(states)
}

/// `X_{n-1} = X_n + u(X_n, t_n)·(t_{n-1} − t_n)` from `X_N = z1`. The
/// returned states are indexed by grid node, so `states[N]` is `z1`.
pub fn backward_rollout<O: Ops, F: Velocity>(ops: &mut O, field: &F, z1: &O::V, grid: &TimeGrid) -> Result<Vec<O::V>> {
    check_dim(ops, field, z1)?;
    let t = grid.points();
    let n_steps = grid.steps();
    let mut rev = Vec::with_capacity(t.len());
    rev.push(z1.clone());
    for n in (1..=n_steps).rev() {
        let cur = rev.last().unwrap();
        let u = field.velocity(ops, cur, Time::Uniform(t[n]))?;
        let step = ops.scale(&u, t[n - 1] - t[n])?;
        let prev = ops.add(cur, &step)?;
        rev.push(prev);
    }
    rev.reverse();
    Ok(rev)
}

/// Forward and backward state sequences over one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
}

impl Trajectory {
    pub fn compute<F: Velocity>(field: &F, x: &Tensor, z: &Tensor, grid: &TimeGrid) -> Result<Self> {
        Ok(Trajectory {
            forward: forward_rollout(&mut Eager, field, x, grid)?,
            backward: backward_rollout(&mut Eager, field, z, grid)?,
        })
    }
}

/// Untaped synthesis: the forward endpoint `X^f_{t_N}` or the backward
/// endpoint `X^b_{t_0}`.
pub fn synthesize<F: Velocity>(field: &F, batch: &Tensor, grid: &TimeGrid, direction: Direction) -> Result<Tensor> {
    let mut states = match direction {
        Direction::Forward => forward_rollout(&mut Eager, field, batch, grid)?,
        Direction::Backward => {
            let mut s = backward_rollout(&mut Eager, field, batch, grid)?;
            s.reverse();
            s
        }
    };
    Ok(states.pop().expect("rollout has at least two states"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, LinearTimeField};
    use proptest::prelude::*;

    #[test]
    fn uniform_grids() {
        let g = TimeGrid::uniform(1).unwrap();
        assert_eq!(g.points(), &[0.0, 1.0]);
        assert_eq!(g.weights(), &[1.0, 1.0]);
        let g = TimeGrid::uniform(2).unwrap();
        assert_eq!(g.points(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.weights(), &[1.0, 0.5, 1.0]);
        let g = TimeGrid::uniform(4).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(g.is_uniform());
        assert!(TimeGrid::uniform(0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0], vec![1.0; 4]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0], vec![1.0; 2]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.9], vec![1.0; 2]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
        let g = TimeGrid::new(vec![0.0, 0.1, 1.0], vec![1.0, 0.5, 1.0]).unwrap();
        assert!(!g.is_uniform());
    }

    #[test]
    fn uniform_step_sum_is_one() {
        for n in 1..=64 {
            let g = TimeGrid::uniform(n).unwrap();
            let s: f64 = g.points().windows(2).map(|w| w[1] - w[0]).sum();
            assert!((s - 1.0).abs() <= 64.0 * f64::EPSILON, "N={n}: {s}");
        }
    }

    #[test]
    fn constant_field_forward_lands_on_shift() {
        let f = ConstantField::new(vec![1.0, 1.0]);
        let x0 = Tensor::from_rows(&[[0.0, 0.0]]);
        for n in [1, 2, 3, 7, 10] {
            let g = TimeGrid::uniform(n).unwrap();
            let states = forward_rollout(&mut Eager, &f, &x0, &g).unwrap();
            assert_eq!(states.len(), n + 1);
            assert_eq!(states[0], x0);
            let last = states.last().unwrap();
            for v in last.data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_bias_on_linear_time_field() {
        let f = LinearTimeField { slope: 2.0 };
        let g = TimeGrid::uniform(2).unwrap();
        let x0 = Tensor::from_rows(&[[0.0]]);
        let fwd = forward_rollout(&mut Eager, &f, &x0, &g).unwrap();
        // 0 + 0.5·u(0) + 0.5·u(0.5) = 0.5
        assert_eq!(fwd[2].item(), 0.5);
        let bwd = backward_rollout(&mut Eager, &f, &x0, &g).unwrap();
        // 0 − 0.5·u(1) − 0.5·u(0.5) = −1.5
        assert_eq!(bwd[0].item(), -1.5);
        assert_eq!(bwd[2], x0);
    }

    #[test]
    fn constant_field_backward_inverts() {
        let f = ConstantField::new(vec![1.0, 1.0]);
        let z1 = Tensor::from_rows(&[[1.0, 1.0]]);
        for n in [1, 2, 5] {
            let g = TimeGrid::uniform(n).unwrap();
            let states = backward_rollout(&mut Eager, &f, &z1, &g).unwrap();
            assert_eq!(states.len(), n + 1);
            assert_eq!(states[n], z1);
            for v in states[0].data() {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_is_a_fixed_point() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let x = Tensor::from_rows(&[[0.3, -0.2], [1.0, 2.0]]);
        let g = TimeGrid::uniform(3).unwrap();
        let tr = Trajectory::compute(&f, &x, &x, &g).unwrap();
        assert!(tr.forward.iter().all(|s| *s == x));
        assert!(tr.backward.iter().all(|s| *s == x));
    }

    #[test]
    fn synthesize_constant_shift() {
        let f = ConstantField::new(vec![0.5, -2.0]);
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let g = TimeGrid::uniform(4).unwrap();
        let fwd = synthesize(&f, &x, &g, Direction::Forward).unwrap();
        let bwd = synthesize(&f, &x, &g, Direction::Backward).unwrap();
        for i in 0..2 {
            assert!((fwd.row(i)[0] - (x.row(i)[0] + 0.5)).abs() < 1e-12);
            assert!((fwd.row(i)[1] - (x.row(i)[1] - 2.0)).abs() < 1e-12);
            assert!((bwd.row(i)[0] - (x.row(i)[0] - 0.5)).abs() < 1e-12);
            assert!((bwd.row(i)[1] - (x.row(i)[1] + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn nonuniform_grid_accepted() {
        let f = ConstantField::new(vec![2.0]);
        let g = TimeGrid::new(vec![0.0, 0.1, 0.35, 1.0], vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let out = synthesize(&f, &Tensor::from_rows(&[[1.0]]), &g, Direction::Forward).unwrap();
        assert!((out.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let f = ConstantField::new(vec![0.0, 0.0]);
        let g = TimeGrid::uniform(2).unwrap();
        let x = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            forward_rollout(&mut Eager, &f, &x, &g),
            Err(Error::Dimension { .. })
        ));
        assert!(backward_rollout(&mut Eager, &f, &x, &g).is_err());
    }

    proptest! {
        #[test]
        fn constant_round_trip_is_identity(
            c in proptest::collection::vec(-3.0f64..3.0, 2),
            pts in proptest::collection::vec(-5.0f64..5.0, 8),
            n in 1usize..12,
        ) {
            let f = ConstantField::new(c);
            let x = Tensor::matrix(4, 2, pts).unwrap();
            let g = TimeGrid::uniform(n).unwrap();
            let there = synthesize(&f, &x, &g, Direction::Forward).unwrap();
            let back = synthesize(&f, &there, &g, Direction::Backward).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
