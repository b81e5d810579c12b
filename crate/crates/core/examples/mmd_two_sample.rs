//! The multi-bandwidth MMD² as a two-sample statistic: how it grows with
//! the shift between two Gaussian samples.
//!
//!     cargo run --release --example mmd_two_sample

use bidpm::data::normals;
use bidpm::losses::{mmd_squared, KernelSpec};
use bidpm::numcore::Eager;
use bidpm::Tensor;

fn main() -> bidpm::Result<()> {
    let kernel = KernelSpec::default();
    println!("bandwidths {:?}", kernel.bandwidths());

    let unit = KernelSpec::rbf(vec![1.0])?;
    let single = mmd_squared(
        &mut Eager,
        &Tensor::from_rows(&[[0.0, 0.0]]),
        &Tensor::from_rows(&[[1.0, 0.0]]),
        &unit,
    )?;
    println!("two points at distance 1, one unit bandwidth: {:.5}", single.item());

    let a = normals(1, 0, 200, 2);
    let b = normals(2, 0, 200, 2);
    println!("\nshift   MMD²");
    for shift in [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0] {
        let moved = b.add_row(&Tensor::from_rows(&[[shift, 0.0]]))?;
        let v = mmd_squared(&mut Eager, &a, &moved, &kernel)?.item();
        println!("{shift:>5.2}  {v:.5}");
    }

    let same = mmd_squared(&mut Eager, &a, &a, &kernel)?.item();
    println!("\nMMD²(X, X) = {same:e}");
    Ok(())
}
