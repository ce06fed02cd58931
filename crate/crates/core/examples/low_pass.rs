//! Low-pass filtering and low/high band blending.
//!
//! With the box resampler the blended image carries the low band of its
//! first argument exactly. Bicubic gets close but is not idempotent.

use dr2::dataset::synthetic_faces;
use dr2::lowpass::{blend, phi, FilterSpec};

fn main() -> dr2::Result<()> {
    let faces = synthetic_faces(2, 32, 3);
    let (y, x) = (&faces[0], &faces[1]);
    for n in [2, 4, 8] {
        for spec in [FilterSpec::boxed(n), FilterSpec::bicubic(n)] {
            let target = phi(y, spec)?;
            let mixed = blend(y, x, spec)?;
            let before = phi(x, spec)?.mean_abs_diff(&target)?;
            let after = phi(&mixed, spec)?.mean_abs_diff(&target)?;
            println!(
                "N = {n} {:?}: low-band gap {before:.4} -> {after:.2e}, high band kept within {:.4}",
                spec.resampler,
                mixed.sub(&phi(&mixed, spec)?)?.mean_abs_diff(&x.sub(&phi(x, spec)?)?)?
            );
        }
    }
    Ok(())
}
