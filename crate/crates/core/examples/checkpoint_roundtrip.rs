//! The file-level workflow: train from a config into a run directory,
//! reload the checkpoint, synthesize a point table in both directions and
//! confirm a second save reproduces the same bytes.
//!
//!     cargo run --release --example checkpoint_roundtrip -- [out dir]

use std::path::PathBuf;

use bidpm::cli::{cmd_inspect, run_training, synthesize_table, Checkpoint, ExperimentConfig};
use bidpm::data::{PointTable, Side};
use bidpm::flow::Direction;

const CONFIG: &str = r#"
seed = 3
data.per_component = 32
data.paired_fraction = 0.5
data.test_per_component = 8
data.normalize = true
field.hidden = 32
field.hidden_layers = 2
train.steps = 300
train.batch_size = 32
train.lr = 1e-3
train.checkpoint_interval = 100
"#;

fn main() -> bidpm::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("bidpm-roundtrip-{}", std::process::id())));
    std::fs::create_dir_all(&out)?;
    let config = ExperimentConfig::parse(CONFIG)?;
    let summary = run_training(&config, &out)?;
    println!("trained {} steps into {}", summary.steps, out.display());
    let mut files: Vec<_> = std::fs::read_dir(&out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .collect();
    files.sort();
    println!("files: {files:?}\n");
    println!("{}", cmd_inspect(&summary.checkpoint)?);

    let ck = Checkpoint::load(&summary.checkpoint)?;
    let copy = out.join("copy.bin");
    ck.save(&copy)?;
    let same = std::fs::read(&copy)? == std::fs::read(&summary.checkpoint)?;
    println!("re-saved checkpoint identical: {same}");

    let table = PointTable::read(&out.join("test_points.csv"))?;
    for direction in [Direction::Forward, Direction::Backward] {
        let a = synthesize_table(&ck.model(true), &table, 2, direction)?;
        let b = synthesize_table(&Checkpoint::load(&copy)?.model(true), &table, 2, direction)?;
        let side = if direction == Direction::Forward {
            Side::Target
        } else {
            Side::Source
        };
        let first = a.rows.iter().find(|r| r.side == side).map(|r| r.coords.clone());
        println!(
            "{direction}: {} rows, bit-identical after reload: {}, first {:?}",
            a.rows.len(),
            a == b,
            first
        );
        a.write(&out.join(format!("synth_{direction}.csv")))?;
    }
    Ok(())
}
