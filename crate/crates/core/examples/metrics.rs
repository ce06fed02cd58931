//! PSNR, SSIM, the identity angle and the Fréchet distance.

use dr2::dataset::synthetic_faces;
use dr2::lowpass::gaussian_blur;
use dr2::metrics::{frechet_distance, identity_deg, psnr, ssim, Embedder, RandomProjectionEmbedder};
use dr2::rng::seeded;
use dr2::ImageTensor;

fn main() -> dr2::Result<()> {
    let faces = synthetic_faces(8, 32, 2);
    let x = &faces[0];
    let embedder = RandomProjectionEmbedder::new(x.shape(), 64, 0);
    let noise = ImageTensor::standard_normal(x.shape(), &mut seeded(3));

    println!("{:>12} {:>8} {:>7} {:>7}", "variant", "PSNR", "SSIM", "Deg");
    let variants = [
        ("identical", x.clone()),
        ("blur 1.0", gaussian_blur(x, 1.0)?),
        ("blur 2.5", gaussian_blur(x, 2.5)?),
        ("noise 0.1", x.zip_map(&noise, |a, e| (a + 0.1 * e).clamp(-1.0, 1.0))?),
        ("other face", faces[1].clone()),
    ];
    for (name, img) in &variants {
        println!(
            "{name:>12} {:>8.2} {:>7.4} {:>7.2}",
            psnr(img, x)?,
            ssim(img, x)?,
            identity_deg(img, x, Some(&embedder))?
        );
    }

    let embed = |set: &[ImageTensor]| set.iter().map(|f| embedder.embed(f)).collect::<dr2::Result<Vec<_>>>();
    let real = embed(&faces)?;
    let blurred = embed(&faces.iter().map(|f| gaussian_blur(f, 2.0)).collect::<dr2::Result<Vec<_>>>()?)?;
    println!("Fréchet distance, faces vs themselves {:.3}", frechet_distance(&real, &real)?);
    println!("Fréchet distance, faces vs blurred    {:.3}", frechet_distance(&real, &blurred)?);
    Ok(())
}
