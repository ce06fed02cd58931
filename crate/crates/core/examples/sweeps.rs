//! The N x tau grid search and the omega ablation on a small noisy set.
//!
//! ```text
//! cargo run --release --example sweeps -- [toy checkpoint dir]
//! ```
//!
//! Without a checkpoint a short-trained model is used, which is enough to
//! see the shapes but not the final numbers. `train_and_restore` writes a
//! checkpoint to `target/example-toy-ddpm`.

use std::path::PathBuf;

use dr2::dataset::{synthetic_faces, write_faces};
use dr2::degradation::{degrade, DegradationSpec, NoiseFamily};
use dr2::denoiser::{load_denoiser, train_toy_denoiser, Denoiser, ToyTrainConfig};
use dr2::harness::{ablate_omega_with, gridsearch_with, AblateSettings, GridSettings};
use dr2::schedule::NoiseSchedule;

fn main() -> dr2::Result<()> {
    let schedule = NoiseSchedule::default();
    let model: Box<dyn Denoiser> = match std::env::args().nth(1) {
        Some(dir) => load_denoiser(PathBuf::from(dir).join("manifest.toml"), &schedule)?,
        None => {
            let cfg = ToyTrainConfig {
                epochs: 4,
                synthetic_count: 256,
                ..ToyTrainConfig::default()
            };
            Box::new(train_toy_denoiser(&synthetic_faces(256, 32, 1), &schedule, &cfg)?.0)
        }
    };

    let root = PathBuf::from("target/example-sweeps");
    let clean = synthetic_faces(6, 32, 77);
    let noisy = clean
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let spec = DegradationSpec {
                family: NoiseFamily::Gaussian,
                delta: 40.0,
                seed: i as u64,
                ..DegradationSpec::identity()
            };
            degrade(x, &spec)
        })
        .collect::<dr2::Result<Vec<_>>>()?;
    write_faces(&noisy, root.join("degraded"))?;
    write_faces(&clean, root.join("hr"))?;

    let grid = GridSettings {
        input_dir: root.join("degraded"),
        ref_dir: root.join("hr"),
        out_dir: root.join("grid"),
        n_set: vec![2, 4, 8],
        tau_set: vec![50, 150, 250, 350],
        embedder: Some("projection:32:0".into()),
        ..GridSettings::default()
    };
    let out = gridsearch_with(&grid, model.as_ref(), &schedule)?;
    for c in &out.cells {
        println!("N {:2} tau {:3} omega {:3}: PSNR {:.2} dB, Deg {:.2}", c.n, c.tau, c.omega, c.psnr, c.deg.unwrap_or(f64::NAN));
    }
    println!("contact sheet: {}", out.sheet.display());

    let ablate = AblateSettings {
        input_dir: root.join("degraded"),
        ref_dir: root.join("hr"),
        out_dir: root.join("ablate"),
        omega_set: vec![350, 550, 750],
        off_omega_set: vec![400, 550, 700],
        off_tau_set: vec![0],
        ..AblateSettings::default()
    };
    for r in ablate_omega_with(&ablate, model.as_ref(), &schedule)?.rows {
        println!("refinement {:5} tau {:3} omega {:4}: PSNR {:.2} dB", r.refinement, r.tau, r.omega, r.psnr);
    }
    Ok(())
}
