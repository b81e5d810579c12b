//! Forward and backward Euler rollouts of a velocity field, and how the
//! step count changes where they land.
//!
//!     cargo run --release --example euler_rollouts

use bidpm::field::{ConstantField, LinearTimeField};
use bidpm::flow::{synthesize, Direction, TimeGrid, Trajectory};
use bidpm::Tensor;

fn main() -> bidpm::Result<()> {
    // A constant field is integrated exactly by any grid, in both directions.
    let shift = ConstantField::new(vec![0.5, -1.0]);
    let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 2.0]]);
    let z = x.add_row(&Tensor::from_rows(&[[0.5, -1.0]]))?;
    let grid = TimeGrid::uniform(4)?;
    let traj = Trajectory::compute(&shift, &x, &z, &grid)?;
    for (n, (f, b)) in traj.forward.iter().zip(&traj.backward).enumerate() {
        println!(
            "t = {:.2}  forward {:?}  backward {:?}",
            grid.points()[n],
            f.row(0),
            b.row(0)
        );
    }

    // u(x, t) = t has exact solution x + 1/2 at t = 1. Explicit Euler reads
    // the velocity at the left node going forward and at the right node going
    // backward, so the two directions err on opposite sides.
    let ramp = LinearTimeField { slope: 1.0 };
    let x0 = Tensor::from_rows(&[[0.0]]);
    println!("\nsteps  forward x(1)  backward x(0) from 0.5");
    for steps in [1, 2, 4, 8, 16, 64] {
        let g = TimeGrid::uniform(steps)?;
        let fwd = synthesize(&ramp, &x0, &g, Direction::Forward)?;
        let bwd = synthesize(&ramp, &Tensor::from_rows(&[[0.5]]), &g, Direction::Backward)?;
        println!("{steps:>5}  {:>12.6}  {:>13.6}", fwd.item(), bwd.item());
    }

    // Grids need not be uniform.
    let g = TimeGrid::new(vec![0.0, 0.1, 0.5, 1.0], vec![1.0, 0.5, 0.5, 1.0])?;
    let fwd = synthesize(&ramp, &x0, &g, Direction::Forward)?;
    println!("\nnon-uniform grid {:?}: x(1) = {:.6}", g.points(), fwd.item());
    Ok(())
}
