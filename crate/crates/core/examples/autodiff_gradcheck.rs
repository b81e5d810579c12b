//! Reverse-mode gradients through an unrolled two-step loss, checked
//! against central finite differences.
//!
//!     cargo run --release --example autodiff_gradcheck

use bidpm::field::{FieldInit, FieldSpec, Mlp, TimeEmbedding};
use bidpm::flow::TimeGrid;
use bidpm::losses::{bidpm_loss, KernelSpec, MatchBatch, PairwiseMetric};
use bidpm::numcore::{finite_difference, max_relative_error, Eager, Tape};
use bidpm::Tensor;

fn main() -> bidpm::Result<()> {
    let spec = FieldSpec {
        dim: 2,
        hidden: 32,
        hidden_layers: 2,
        embedding: TimeEmbedding::Fourier(4),
    };
    let field = Mlp::init(
        spec,
        FieldInit {
            seed: 1,
            final_scale: 1.0,
        },
    )?;
    let batch = MatchBatch {
        x_paired: Tensor::from_rows(&[[0.7, -0.3], [0.1, 0.4]]),
        z_paired: Tensor::from_rows(&[[-0.2, 1.1], [0.9, 0.0]]),
        x_unpaired: Tensor::from_rows(&[[-0.9, 0.4]]),
        z_unpaired: Tensor::from_rows(&[[0.5, 0.8]]),
    };
    let grid = TimeGrid::uniform(2)?;
    let kernel = KernelSpec::default();
    let metric = PairwiseMetric::SquaredL2Mean;
    let lambda_u = 0.2;

    let mut tape = Tape::new();
    let (loss, parts) = bidpm_loss(&mut tape, &field, &batch, &grid, metric, &kernel, lambda_u)?;
    println!(
        "loss {:.6} = paired {:.6} + {lambda_u} x unpaired {:.6}  ({} tape nodes)",
        parts.total,
        parts.paired,
        parts.unpaired,
        tape.len()
    );
    let grads = tape.backward(loss, &field.param_ids())?;

    for (i, (id, name)) in field.param_ids().into_iter().zip(field.param_names()).enumerate() {
        let fd = finite_difference(&field.params()[i], 1e-5, |p| {
            let mut g = field.clone();
            g.params_mut()[i] = p.clone();
            bidpm_loss(&mut Eager, &g, &batch, &grid, metric, &kernel, lambda_u)
                .map(|(_, b)| b.total)
                .unwrap_or(f64::NAN)
        });
        let g = &grads[&id];
        println!(
            "{name:>6} {:?}  |grad| {:.3e}  max rel err {:.2e}",
            g.shape(),
            g.norm(),
            max_relative_error(g, &fd, 1e-6)
        );
    }
    Ok(())
}
