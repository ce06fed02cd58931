//! Trains the toy DDPM on synthetic faces, saves it, reloads it and removes
//! Gaussian noise from faces it has not seen.
//!
//! ```text
//! cargo run --release --example train_and_restore -- [epochs] [checkpoint dir]
//! ```
//!
//! The default 30 epochs take a few minutes on one core.

use std::path::PathBuf;

use dr2::dataset::synthetic_faces;
use dr2::degradation::{degrade, DegradationSpec, NoiseFamily};
use dr2::denoiser::{load_denoiser, train_toy_denoiser, ToyTrainConfig};
use dr2::metrics::psnr;
use dr2::sampler::{dr2_remove, Dr2Config};
use dr2::schedule::NoiseSchedule;

fn main() -> dr2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|a| a.parse().expect("epochs must be an integer")).unwrap_or(30);
    let dir: PathBuf = args.next().unwrap_or_else(|| "target/example-toy-ddpm".into()).into();

    let schedule = NoiseSchedule::default();
    let cfg = ToyTrainConfig {
        epochs,
        ..ToyTrainConfig::default()
    };
    let data = synthetic_faces(cfg.synthetic_count, cfg.image_size, 1);
    let (model, report) = train_toy_denoiser(&data, &schedule, &cfg)?;
    println!("final loss {:.4}", report.final_loss);
    let manifest = model.save(&dir)?;
    let model = load_denoiser(&manifest, &schedule)?;

    let mut wins = 0;
    let held_out = synthetic_faces(10, cfg.image_size, 999);
    for (i, x) in held_out.iter().enumerate() {
        let spec = DegradationSpec {
            family: NoiseFamily::Gaussian,
            delta: 40.0,
            seed: i as u64,
            ..DegradationSpec::identity()
        };
        let y = degrade(x, &spec)?;
        let out = dr2_remove(&y, model.as_ref(), &schedule, &Dr2Config::new(4, 300).with_seed(i as u64))?;
        let (before, after) = (psnr(&y, x)?, psnr(&out, x)?);
        wins += usize::from(after > before);
        println!("face {i}: {before:.2} dB -> {after:.2} dB");
    }
    println!("{wins}/10 improved; checkpoint at {}", manifest.display());
    Ok(())
}
