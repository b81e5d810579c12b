//! Trains a two-step model on the fully paired 8-Gaussian rotation task and
//! reports transport error in both directions, then writes a scatter plot.
//!
//!     cargo run --release --example train_paired_toy -- [steps] [grid steps] [plot.svg]

use std::time::Instant;

use bidpm::cli::scatter_svg;
use bidpm::data::ToySpec;
use bidpm::eval::evaluate;
use bidpm::field::{FieldInit, FieldSpec, Mlp};
use bidpm::flow::{synthesize, Direction, TimeGrid};
use bidpm::train::{AdamConfig, TrainConfig, Trainer};

fn main() -> bidpm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let plot = args.get(2).cloned().unwrap_or_else(|| "paired_toy.svg".into());

    let spec = ToySpec::default();
    let data = spec.build()?;
    let test = spec.test_split(64)?;
    let field = Mlp::init(
        FieldSpec {
            hidden: 64,
            ..FieldSpec::default()
        },
        FieldInit::new(0),
    )?;
    let config = TrainConfig {
        steps,
        batch_size: 64,
        grid: TimeGrid::uniform(n)?,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    println!(
        "{} parameters, {} training pairs, {n}-step grid",
        field.num_scalars(),
        data.pairing.pairs.len()
    );

    let mut trainer = Trainer::new(field, config)?;
    let start = Instant::now();
    while trainer.step_count() < steps {
        let r = trainer.step(&data)?;
        if r.step % (steps / 10).max(1) == 0 {
            let e = evaluate(trainer.ema(), &test, n, "bidpm", 1.0)?;
            println!(
                "step {:>6}  loss {:.3e}  |g| {:.2e}  ema error fwd {:.4} bwd {:.4}  [{:.1}s]",
                r.step,
                r.loss.total,
                r.grad_norm,
                e.forward.mean,
                e.backward.mean,
                start.elapsed().as_secs_f64()
            );
        }
    }

    let report = evaluate(trainer.ema(), &test, n, "bidpm", 1.0)?;
    println!("\n{}", report.summary());

    let x = test.paired_source();
    let out = synthesize(trainer.ema(), &x, &TimeGrid::uniform(n)?, Direction::Forward)?;
    let pairs: Vec<(usize, usize)> = (0..x.rows()).map(|i| (i, i)).collect();
    std::fs::write(
        &plot,
        scatter_svg(&x, &test.paired_target(), &out, &pairs, &test.target_ring.means()),
    )?;
    println!("wrote {plot}");
    Ok(())
}
