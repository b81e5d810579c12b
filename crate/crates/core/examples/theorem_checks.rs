//! Straight-path diagnostics on a single pair. Minimizing the
//! process-matching loss drives every node velocity to `z − x`, and a
//! trained network becomes constant along its own rollout. The last part
//! reports the initial-velocity gap for networks trained to the same
//! residual loss at several grid sizes.
//!
//!     cargo run --release --example theorem_checks

use bidpm::data::ToyDataset;
use bidpm::eval::{check_proposition1, check_theorem1, fit_node_velocities};
use bidpm::field::{ConstantField, FieldInit, FieldSpec, Mlp};
use bidpm::flow::TimeGrid;
use bidpm::losses::{bidpm_loss, KernelSpec, MatchBatch, PairwiseMetric};
use bidpm::numcore::Eager;
use bidpm::train::{AdamConfig, TrainConfig, Trainer};
use bidpm::Tensor;

/// Trains on one pair until the paired loss drops below `target`.
fn fit_pair(x: &Tensor, z: &Tensor, grid: &TimeGrid, target: f64) -> bidpm::Result<(Mlp, u64)> {
    let spec = FieldSpec {
        hidden: 32,
        hidden_layers: 2,
        ..FieldSpec::default()
    };
    let config = TrainConfig {
        batch_size: 1,
        grid: grid.clone(),
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ema_decay: 0.0,
        ..TrainConfig::default()
    };
    let data = ToyDataset::from_pairs(x.clone(), z.clone())?;
    let batch = MatchBatch::paired(x.clone(), z.clone());
    let mut trainer = Trainer::new(Mlp::init(spec, FieldInit::new(3))?, config)?;
    loop {
        let (_, b) = bidpm_loss(
            &mut Eager,
            trainer.live(),
            &batch,
            grid,
            PairwiseMetric::SquaredL2Mean,
            &KernelSpec::default(),
            0.0,
        )?;
        if b.total < target || trainer.step_count() >= 50_000 {
            return Ok((trainer.live().clone(), trainer.step_count()));
        }
        for _ in 0..50 {
            trainer.step(&data)?;
        }
    }
}

fn main() -> bidpm::Result<()> {
    let x = Tensor::from_rows(&[[0.3, -0.2]]);
    let z = Tensor::from_rows(&[[-0.5, 0.6]]);
    let d = z.sub(&x)?;

    let exact = ConstantField::new(d.data().to_vec());
    let batch = MatchBatch::paired(x.clone(), z.clone());
    for n in [1, 2, 4, 8] {
        let (_, b) = bidpm_loss(
            &mut Eager,
            &exact,
            &batch,
            &TimeGrid::uniform(n)?,
            PairwiseMetric::SquaredL2Mean,
            &KernelSpec::default(),
            0.0,
        )?;
        println!("constant z - x, N = {n}: loss {:.1e}", b.total);
    }

    println!();
    for n in [2, 4, 8] {
        let (v, loss) = fit_node_velocities(&x, &z, &TimeGrid::uniform(n)?, 1e-12, 100_000)?;
        let worst = v
            .velocities
            .iter()
            .map(|u| u.sub(&d).map(|e| e.norm()).unwrap_or(f64::NAN))
            .fold(0.0, f64::max);
        println!("free velocities, N = {n}: loss {loss:.1e}, max |u_n - (z - x)| {worst:.1e}");
    }

    println!();
    let mut fields = Vec::new();
    for n in [1, 2, 4, 8] {
        let grid = TimeGrid::uniform(n)?;
        let (field, steps) = fit_pair(&x, &z, &grid, 1e-6)?;
        let diag = check_theorem1(&field, &x, &z, &grid)?;
        println!(
            "network, N = {n}: loss {:.1e} after {steps} steps, max deviation from z - x {:.1e}, endpoint gap {:.1e}",
            diag.residual_loss, diag.max_deviation, diag.endpoint_gap
        );
        fields.push((n, field));
    }

    let refs: Vec<(usize, &Mlp)> = fields.iter().map(|(n, f)| (*n, f)).collect();
    let report = check_proposition1(&refs, &x, &z)?;
    println!();
    for (n, gap) in &report.gaps {
        println!("N = {n}: |u(x, 0) - (z - x)| = {gap:.2e}");
    }
    println!("fit gap ~ {:.2e}/N + {:.2e}", report.c, report.r);
    Ok(())
}
