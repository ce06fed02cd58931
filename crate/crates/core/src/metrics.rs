//! PSNR, SSIM, embedding-angle identity distance and Fréchet distance, plus
//! directory evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::list_images;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::{gaussian_kernel, resize};
use crate::rng::seeded;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Peak signal-to-noise ratio on the 0..255 scale, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .to_255()
        .iter()
        .zip(b.to_255())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM with an 11x11 Gaussian window (std 1.5), K1 = 0.01 and
/// K2 = 0.03 on the 0..255 scale, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            required: SSIM_WINDOW,
        });
    }
    let kernel = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(kernel.len(), SSIM_WINDOW);
    let (pa, pb) = (a.to_255(), b.to_255());
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |p: &[f64], f: &dyn Fn(f64) -> f64| -> Vec<f64> { (0..h * w).map(|i| f(p[i * c + ch])).collect() };
        let xa = plane(&pa, &|v| v);
        let xb = plane(&pb, &|v| v);
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let (mu_a, oh, ow) = filter_valid(&xa, h, w, &kernel);
        let (mu_b, ..) = filter_valid(&xb, h, w, &kernel);
        let (aa, ..) = filter_valid(&prod(&xa, &xa), h, w, &kernel);
        let (bb, ..) = filter_valid(&prod(&xb, &xb), h, w, &kernel);
        let (ab, ..) = filter_valid(&prod(&xa, &xb), h, w, &kernel);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Face-embedding extractor; outputs must have unit norm.
pub trait Embedder: Send + Sync {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Fixed Gaussian random projection followed by normalization.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    shape: (usize, usize, usize),
    projection: DMatrix<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(shape: (usize, usize, usize), dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let inputs = shape.0 * shape.1 * shape.2;
        let projection = DMatrix::from_fn(dim, inputs, |_, _| StandardNormal.sample(&mut rng));
        Self { shape, projection }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        image.ensure_shape(self.shape)?;
        let x = DVector::from_iterator(image.len(), image.values());
        let v = &self.projection * x;
        let norm = v.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok((v / norm).iter().copied().collect())
    }

    fn dim(&self) -> usize {
        self.projection.nrows()
    }
}

/// Angle in degrees between two vectors of equal length.
pub fn embedding_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: (u.len(), 1, 1),
            actual: (v.len(), 1, 1),
        });
    }
    let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a / nu - b / nv).collect();
    let sum: Vec<f64> = u.iter().zip(v).map(|(a, b)| a / nu + b / nv).collect();
    // 2 atan2(|u - v|, |u + v|) equals arccos(u . v) for unit vectors and
    // stays accurate near 0 and 180 degrees.
    Ok((2.0 * norm(&diff).atan2(norm(&sum))).to_degrees())
}

/// Identity distance (Deg) between two face images.
pub fn identity_deg(a: &ImageTensor, b: &ImageTensor, embedder: Option<&dyn Embedder>) -> Result<f64> {
    let e = embedder.ok_or_else(|| Error::Missing("identity distance needs an embedder".into()))?;
    embedding_angle(&e.embed(a)?, &e.embed(b)?)
}

/// Learned perceptual distance such as LPIPS; no weights ship with the crate.
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

fn mean_cov(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Empty("Fréchet distance needs at least two feature vectors per set".into()));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: (d, 1, 1),
            actual: (bad.len(), 1, 1),
        });
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` over two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, s_a) = mean_cov(a)?;
    let (mu_b, s_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch {
            expected: (mu_a.len(), 1, 1),
            actual: (mu_b.len(), 1, 1),
        });
    }
    let r = sqrt_psd(&s_a);
    let cross = sqrt_psd(&(&r * &s_b * &r)).trace();
    Ok(((mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub deg: Option<f64>,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Files present on only one side.
    pub missing: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn mean(&self) -> MetricsRow {
        MetricsRow {
            name: "MEAN".into(),
            psnr: mean_of(self.rows.iter().map(|r| Some(r.psnr))).unwrap_or(f64::NAN),
            ssim: mean_of(self.rows.iter().map(|r| r.ssim)),
            deg: mean_of(self.rows.iter().map(|r| r.deg)),
            lpips: mean_of(self.rows.iter().map(|r| r.lpips)),
        }
    }

    /// Writes `name,psnr,ssim,deg,lpips` rows and a final `MEAN` row; absent
    /// metrics are left empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "psnr", "ssim", "deg", "lpips"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        if !self.rows.is_empty() {
            for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
                w.write_record([r.name.clone(), fmt(Some(r.psnr)), fmt(r.ssim), fmt(r.deg), fmt(r.lpips)])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Default)]
pub struct EvalConfig<'a> {
    pub ssim: bool,
    pub embedder: Option<&'a dyn Embedder>,
    pub perceptual: Option<&'a dyn PerceptualDistance>,
    /// Resize each reference to its prediction's size when they differ;
    /// otherwise a size difference is an error.
    pub resize_reference: bool,
}

pub fn evaluate_pair(pred: &ImageTensor, reference: &ImageTensor, name: &str, cfg: &EvalConfig<'_>) -> Result<MetricsRow> {
    let reference = if cfg.resize_reference && pred.shape() != reference.shape() && pred.channels() == reference.channels() {
        resize(reference, pred.height(), pred.width()).clamped()
    } else {
        reference.clone()
    };
    let ssim = if cfg.ssim && pred.height() >= SSIM_WINDOW && pred.width() >= SSIM_WINDOW {
        Some(ssim(pred, &reference)?)
    } else {
        None
    };
    Ok(MetricsRow {
        name: name.to_string(),
        psnr: psnr(pred, &reference)?,
        ssim,
        deg: cfg.embedder.map(|e| identity_deg(pred, &reference, Some(e))).transpose()?,
        lpips: cfg.perceptual.map(|p| p.distance(pred, &reference)).transpose()?,
    })
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect())
}

/// Pairs files by stem (extension ignored) and evaluates every pair.
pub fn evaluate_dir(pred_dir: impl AsRef<Path>, ref_dir: impl AsRef<Path>, cfg: &EvalConfig<'_>) -> Result<MetricsReport> {
    let preds = stems(pred_dir.as_ref())?;
    let refs = stems(ref_dir.as_ref())?;
    let mut missing: Vec<String> = preds.keys().filter(|k| !refs.contains_key(*k)).cloned().collect();
    missing.extend(refs.keys().filter(|k| !preds.contains_key(*k)).cloned());
    missing.sort();
    for m in &missing {
        log::warn!("no counterpart for `{m}`");
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        preds.iter().filter_map(|(k, p)| refs.get(k).map(|r| (k, p, r))).collect();
    if pairs.is_empty() {
        log::warn!("no image pairs to evaluate");
    }
    let rows = pairs
        .par_iter()
        .map(|(name, p, r)| {
            let pred = ImageTensor::load(p)?;
            let reference = ImageTensor::load(r)?;
            evaluate_pair(&pred, &reference, name, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { rows, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_faces, write_faces};
    use proptest::prelude::*;

    fn random(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
        ImageTensor::standard_normal(shape, &mut seeded(seed)).map(|v| (v * 0.5).clamp(-1.0, 1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let black = ImageTensor::filled(4, 4, 3, -1.0);
        let white = ImageTensor::filled(4, 4, 3, 1.0);
        assert_eq!(psnr(&black, &black).unwrap(), 100.0);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        // A difference of 25.5 on the 0..255 scale gives MSE = 255^2 / 100.
        let shifted = black.map(|v| v + 25.5 / 127.5);
        assert!((psnr(&black, &shifted).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(255.0 * 255.0 / 100.0), 20.0);
        assert!(psnr(&black, &ImageTensor::zeros(4, 5, 3)).is_err());
    }

    #[test]
    fn ssim_reference_cases() {
        let a = random((24, 24, 3), 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = ImageTensor::from_fn((24, 24, 1), |y, x, _| if (y / 2 + x / 2) % 2 == 0 { 0.9 } else { -0.9 }).unwrap();
        let inverted = checker.map(|v| -v);
        assert!(ssim(&checker, &inverted).unwrap() < 0.0);
        assert!(matches!(ssim(&ImageTensor::zeros(10, 30, 1), &ImageTensor::zeros(10, 30, 1)), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_on_constants_is_the_luminance_term() {
        // Both planes constant: variances and covariance vanish, so the
        // structure term is C2 / C2 = 1 and SSIM reduces to luminance.
        let (ma, mb) = (100.0, 140.0);
        let a = ImageTensor::filled(16, 16, 1, ma / 127.5 - 1.0);
        let b = ImageTensor::filled(16, 16, 1, mb / 127.5 - 1.0);
        let luminance = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!(got < 1.0);
        assert!((got - luminance).abs() < 1e-9, "{got} vs {luminance}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn metrics_are_symmetric(sa in any::<u64>(), sb in any::<u64>()) {
            let (a, b) = (random((12, 12, 3), sa), random((12, 12, 3), sb));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-3f64..1e4, m2 in 1e-3f64..1e4) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }
    }

    #[test]
    fn embedding_angles() {
        assert_eq!(embedding_angle(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((embedding_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 90.0).abs() < 1e-12);
        let e = RandomProjectionEmbedder::new((8, 8, 3), 16, 0);
        let a = random((8, 8, 3), 3);
        let v = e.embed(&a).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(identity_deg(&a, &a, Some(&e)).unwrap(), 0.0);
        assert!(matches!(identity_deg(&a, &a, None), Err(Error::Missing(_))));
    }

    #[test]
    fn deg_grows_with_perturbation() {
        let e = RandomProjectionEmbedder::new((8, 8, 3), 32, 1);
        let base: Vec<ImageTensor> = (0..50).map(|i| random((8, 8, 3), 100 + i)).collect();
        let mean_deg = |eps: f64| {
            base.iter()
                .enumerate()
                .map(|(i, a)| {
                    let noise = ImageTensor::standard_normal(a.shape(), &mut seeded(7 + i as u64));
                    identity_deg(a, &a.add(&noise.scale(eps)).unwrap(), Some(&e)).unwrap()
                })
                .sum::<f64>()
                / base.len() as f64
        };
        let degs: Vec<f64> = [0.01, 0.05, 0.2, 0.5].iter().map(|&eps| mean_deg(eps)).collect();
        assert!(degs.windows(2).all(|w| w[0] < w[1]), "{degs:?}");
    }

    #[test]
    fn frechet_distance_cases() {
        let mut rng = seeded(2);
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x + 2.0).collect()).collect();
        // Same covariance, mean offset of 2 in each of 3 dimensions.
        assert!((frechet_distance(&a, &shifted).unwrap() - 12.0).abs() < 1e-6);
        // Scaling by 2: covariances S and 4S, cross term 2S, means mu and 2mu.
        let scaled: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let (mu, s) = mean_cov(&a).unwrap();
        let expected = mu.norm_squared() + s.trace() + 4.0 * s.trace() - 2.0 * 2.0 * s.trace();
        assert!((frechet_distance(&a, &scaled).unwrap() - expected).abs() < 1e-8);
        assert!(frechet_distance(&a[..1], &a).is_err());
    }

    #[test]
    fn directory_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let faces = synthetic_faces(3, 16, 4);
        let pred = dir.path().join("pred");
        write_faces(&faces, &pred).unwrap();
        let cfg = EvalConfig { ssim: true, ..EvalConfig::default() };
        let report = evaluate_dir(&pred, &pred, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.psnr == 100.0 && r.ssim == Some(1.0)));
        assert!(report.missing.is_empty());

        let refs = dir.path().join("ref");
        write_faces(&faces[..2], &refs).unwrap();
        let report = evaluate_dir(&pred, &refs, &cfg).unwrap();
        assert_eq!((report.rows.len(), report.missing.len()), (2, 1));
        let csv_path = dir.path().join("m.csv");
        report.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "name,psnr,ssim,deg,lpips");
        assert!(lines[3].starts_with("MEAN,100.000000,1.000000,,"));

        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let report = evaluate_dir(&empty, &empty, &cfg).unwrap();
        assert!(report.rows.is_empty());
    }
}
