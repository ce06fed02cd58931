//! Enhancer training pairs and the baseline residual enhancer.
//!
//! Pairs come from running DR2 on clean faces and blurring the result.
//! An oracle denoiser per face keeps this fast; a trained denoiser works
//! the same way through `build_training_pairs`.

use dr2::dataset::synthetic_faces;
use dr2::denoiser::{oracle_denoiser, Denoiser, OracleDenoiser};
use dr2::enhancement::{build_training_pairs_with, pair_taus, restore, train_baseline_enhancer, Enhancer, EnhancerTrainConfig, PairConfig};
use dr2::lowpass::gaussian_blur;
use dr2::metrics::psnr;
use dr2::sampler::Dr2Config;
use dr2::schedule::NoiseSchedule;

fn main() -> dr2::Result<()> {
    let schedule = NoiseSchedule::default();
    let clean = synthetic_faces(24, 16, 4);
    let oracles: Vec<OracleDenoiser> = clean.iter().map(|x| oracle_denoiser(x.clone(), &schedule)).collect();
    let pairs = build_training_pairs_with(
        &clean,
        |i| &oracles[i] as &dyn Denoiser,
        &schedule,
        &PairConfig {
            sigma_set: vec![1.0, 2.0],
            ..PairConfig::default()
        },
    )?;
    println!("{} pairs, tau values {:?}", pairs.len(), pair_taus(&pairs));

    let cfg = EnhancerTrainConfig {
        width: 16,
        blocks: 2,
        epochs: 60,
        ..EnhancerTrainConfig::default()
    };
    let (enhancer, report) = train_baseline_enhancer(&pairs, &cfg)?;
    println!("L1 by epoch: {:.4} -> {:.4}", report.epoch_losses[0], report.final_loss);

    let (mut blurred, mut sharpened) = (0.0, 0.0);
    for p in &pairs {
        blurred += psnr(&p.input, &p.target)? / pairs.len() as f64;
        sharpened += psnr(&enhancer.enhance(&p.input)?, &p.target)? / pairs.len() as f64;
    }
    println!("pair inputs {blurred:.2} dB, enhanced {sharpened:.2} dB");

    // A held-out face whose DR2 output is a blurred copy of it.
    let x = synthetic_faces(1, 16, 99).remove(0);
    let blurred = gaussian_blur(&x, 1.5)?;
    let oracle = oracle_denoiser(blurred.clone(), &schedule);
    let (coarse, out) = restore(&blurred, &oracle, &enhancer, &schedule, &Dr2Config::new(4, 100))?;
    println!("two-stage restore: coarse {:.2} dB, final {:.2} dB", psnr(&coarse, &x)?, psnr(&out, &x)?);
    Ok(())
}
