//! Builds a small degraded test split and replays it from its manifest.
//!
//! ```text
//! cargo run --example degrade_testset -- /tmp/testset
//! ```

use std::path::PathBuf;

use dr2::dataset::{synthetic_faces, write_faces};
use dr2::degradation::{build_testset, read_manifest, replay_testset, SplitLevel, SplitSpec, MANIFEST_CSV};

fn main() -> dr2::Result<()> {
    let root: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/example-testset".into()).into();
    let clean = root.join("clean");
    write_faces(&synthetic_faces(6, 64, 21), &clean)?;

    for level in [SplitLevel::Mild, SplitLevel::Severe] {
        let out = root.join(format!("{level:?}").to_lowercase());
        let rows = build_testset(&clean, &SplitSpec::new(level, 4)?, 6, &out, 100)?;
        println!("{level:?} split in {}:", out.display());
        for r in &rows {
            println!(
                "  {}  sigma {:.2}  x{}  {:?} delta {:.1}  q {}",
                r.filename, r.sigma, r.r, r.family, r.delta, r.q
            );
        }
        let again = root.join("replay");
        replay_testset(out.join(MANIFEST_CSV), &clean, &again)?;
        let same = rows.iter().all(|r| {
            std::fs::read(out.join("degraded").join(&r.filename)).ok()
                == std::fs::read(again.join("degraded").join(&r.filename)).ok()
        });
        println!("  replay identical: {same}, rows read back: {}", read_manifest(out.join(MANIFEST_CSV))?.len());
    }
    Ok(())
}
