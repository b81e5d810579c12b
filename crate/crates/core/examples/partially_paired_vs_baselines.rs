//! With only 10% of the data paired, compares the process-matching model
//! against rectified flow and conditional flow matching trained on the same
//! data, seeds and batches. Everything is sampled with 10 Euler steps.
//!
//!     cargo run --release --example partially_paired_vs_baselines -- [steps] [rho]

use bidpm::data::ToySpec;
use bidpm::eval::evaluate;
use bidpm::field::{FieldInit, FieldSpec, Mlp};
use bidpm::flow::TimeGrid;
use bidpm::train::{train, AdamConfig, Method, TrainConfig};

fn main() -> bidpm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let rho: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let spec = ToySpec {
        paired_fraction: rho,
        ..ToySpec::default()
    };
    let data = spec.build()?;
    let test = spec.test_split(64)?;
    println!(
        "{} pairs, {} unpaired sources, {} unpaired targets",
        data.pairing.pairs.len(),
        data.pairing.unpaired_source.len(),
        data.pairing.unpaired_target.len()
    );
    let field = Mlp::init(
        FieldSpec {
            hidden: 64,
            ..FieldSpec::default()
        },
        FieldInit::new(0),
    )?;

    println!("\nmethod   fwd err   bwd err   worst centroid");
    for method in [
        Method::BiDpm,
        Method::Rf,
        Method::ICfm { sigma: 0.1 },
        Method::OtCfm { sigma: 0.1 },
    ] {
        let config = TrainConfig {
            steps,
            batch_size: 64,
            grid: TimeGrid::uniform(2)?,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            method,
            ..TrainConfig::default()
        };
        let out = train(&data, field.clone(), config)?;
        let r = evaluate(&out.ema, &test, 10, method.name(), rho)?;
        println!(
            "{:<7}  {:.4}    {:.4}    {:.4}",
            method.name(),
            r.forward.mean,
            r.backward.mean,
            r.centroid_forward_max()
        );
    }
    Ok(())
}
