//! The linear noise schedule and the closed-form forward process.
//!
//! ```text
//! cargo run --example forward_process
//! ```

use dr2::dataset::synthetic_faces;
use dr2::metrics::psnr;
use dr2::rng::seeded;
use dr2::schedule::NoiseSchedule;
use dr2::ImageTensor;

fn main() -> dr2::Result<()> {
    let schedule = NoiseSchedule::default();
    println!("T = {}", schedule.steps());
    for t in [1, 100, 250, 500, 750, 1000] {
        println!(
            "t = {t:4}  beta = {:.6}  alpha_bar = {:.6e}  sigma = {:.6}",
            schedule.beta(t),
            schedule.alpha_bar(t),
            schedule.sigma(t)
        );
    }

    let x0 = synthetic_faces(1, 32, 0).remove(0);
    let noise = ImageTensor::standard_normal(x0.shape(), &mut seeded(1));
    for t in [50, 300, 700] {
        let xt = schedule.diffuse(&x0, t, &noise)?;
        let back = schedule.predict_x0_raw(&xt, &noise, t)?;
        println!(
            "t = {t}: PSNR(x_t, x_0) = {:.2} dB, inversion error {:.1e}",
            psnr(&xt.clamped(), &x0)?,
            back.max_abs_diff(&x0)?
        );
    }
    Ok(())
}
