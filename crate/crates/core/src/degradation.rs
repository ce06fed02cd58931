//! Synthetic degradations `y = [(x * k_sigma) downsampled by r + n_delta]_JPEG(q)`
//! and the mild / medium / severe evaluation splits.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::load_dir;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::{gaussian_blur, resize};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Poisson,
    None,
}

impl NoiseFamily {
    pub const RANDOM: [NoiseFamily; 3] = [NoiseFamily::Gaussian, NoiseFamily::Laplace, NoiseFamily::Poisson];
}

/// JPEG quality 1..=100, or no compression at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Lossless,
    Jpeg(u8),
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quality::Lossless => f.write_str("lossless"),
            Quality::Jpeg(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("lossless") {
            return Ok(Quality::Lossless);
        }
        let q: u32 = s
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("JPEG quality must be 1..=100 or `lossless`, got `{s}`")))?;
        Quality::new(q)
    }
}

impl Quality {
    pub fn new(q: u32) -> Result<Self> {
        if (1..=100).contains(&q) {
            Ok(Quality::Jpeg(q as u8))
        } else {
            Err(Error::InvalidConfig(format!("JPEG quality must be 1..=100, got {q}")))
        }
    }
}

impl Serialize for Quality {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quality::Lossless => s.serialize_str("lossless"),
            Quality::Jpeg(q) => s.serialize_u8(*q),
        }
    }
}

impl<'de> Deserialize<'de> for Quality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(q) => Quality::new(q),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Gaussian blur std in pixels; 0 disables blur.
    pub sigma: f64,
    pub r: usize,
    pub family: NoiseFamily,
    /// Noise scale on the 0..255 scale.
    pub delta: f64,
    pub q: Quality,
    pub seed: u64,
    /// Resize the result back to the input size.
    #[serde(default)]
    pub resize_back: bool,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self {
            sigma: 0.0,
            r: 1,
            family: NoiseFamily::None,
            delta: 0.0,
            q: Quality::Lossless,
            seed: 0,
            resize_back: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.r == 0 {
            return Err(Error::InvalidConfig("r must be >= 1".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        if let Quality::Jpeg(q) = self.q {
            Quality::new(u32::from(q))?;
        }
        Ok(())
    }
}

/// Inverse-CDF Laplace draw with scale `b`.
fn laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn add_noise(img: &ImageTensor, family: NoiseFamily, delta: f64, seed: u64) -> Result<ImageTensor> {
    if family == NoiseFamily::None || delta == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = seeded(seed);
    let to_unit = |v: f64| v.clamp(0.0, 255.0) / 127.5 - 1.0;
    let noisy: Vec<f64> = match family {
        NoiseFamily::Gaussian => img
            .to_255()
            .into_iter()
            .map(|v| {
                let z: f64 = rng.sample(StandardNormal);
                to_unit(v + delta * z)
            })
            .collect(),
        NoiseFamily::Laplace => {
            let b = delta / std::f64::consts::SQRT_2;
            img.to_255().into_iter().map(|v| to_unit(v + laplace(&mut rng, b))).collect()
        }
        NoiseFamily::Poisson => {
            let lambda = 255.0 / delta;
            img.to_255()
                .into_iter()
                .map(|v| {
                    let rate = v.max(0.0) * lambda;
                    if rate <= 0.0 {
                        return to_unit(0.0);
                    }
                    let k: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                    to_unit(k / lambda)
                })
                .collect()
        }
        NoiseFamily::None => unreachable!(),
    };
    let (h, w, c) = img.shape();
    ImageTensor::from_vec(h, w, c, noisy)
}

pub fn encode_jpeg(img: &ImageTensor, quality: u8) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    let (bytes, color) = match c {
        1 => (img.to_u8(), ExtendedColorType::L8),
        3 => (img.to_u8(), ExtendedColorType::Rgb8),
        _ => return Err(Error::InvalidConfig(format!("JPEG needs 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .encode(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::ImageCodec {
            path: "<jpeg>".into(),
            message: e.to_string(),
        })?;
    Ok(out)
}

pub fn decode_image(bytes: &[u8], channels: usize) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::ImageCodec {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    if channels == 1 {
        let l = img.to_luma8();
        ImageTensor::from_u8(l.height() as usize, l.width() as usize, 1, l.as_raw())
    } else {
        ImageTensor::from_dynamic(&img)
    }
}

/// Degrades `x`; also returns the JPEG bytes when compression was applied.
pub fn degrade_with_bytes(x: &ImageTensor, spec: &DegradationSpec) -> Result<(ImageTensor, Option<Vec<u8>>)> {
    spec.validate()?;
    let (h, w, _) = x.shape();
    let mut img = gaussian_blur(x, spec.sigma)?;
    if spec.r > 1 {
        img = resize(&img, h.div_ceil(spec.r), w.div_ceil(spec.r)).clamped();
    }
    img = add_noise(&img, spec.family, spec.delta, spec.seed)?;
    let mut bytes = None;
    if let Quality::Jpeg(q) = spec.q {
        let encoded = encode_jpeg(&img, q)?;
        img = decode_image(&encoded, img.channels())?;
        bytes = Some(encoded);
    }
    if spec.resize_back && (img.height(), img.width()) != (h, w) {
        img = resize(&img, h, w).clamped();
    }
    Ok((img, bytes))
}

pub fn degrade(x: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    Ok(degrade_with_bytes(x, spec)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLevel {
    Mild,
    Medium,
    Severe,
}

impl FromStr for SplitLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mild" => Ok(SplitLevel::Mild),
            "medium" => Ok(SplitLevel::Medium),
            "severe" => Ok(SplitLevel::Severe),
            other => Err(Error::InvalidConfig(format!("unknown split level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub sigma: (f64, f64),
    pub delta: (f64, f64),
    pub q: (u32, u32),
}

impl SplitLevel {
    pub fn ranges(self) -> SplitRanges {
        match self {
            SplitLevel::Mild => SplitRanges {
                sigma: (3.0, 5.0),
                delta: (5.0, 20.0),
                q: (60, 80),
            },
            SplitLevel::Medium => SplitRanges {
                sigma: (5.0, 7.0),
                delta: (15.0, 40.0),
                q: (40, 60),
            },
            SplitLevel::Severe => SplitRanges {
                sigma: (7.0, 9.0),
                delta: (25.0, 50.0),
                q: (30, 40),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub level: SplitLevel,
    /// Downsampling factor of the super-resolution task: 4, 8 or 16.
    pub r: usize,
}

impl SplitSpec {
    pub fn new(level: SplitLevel, r: usize) -> Result<Self> {
        if ![4, 8, 16].contains(&r) {
            return Err(Error::InvalidConfig(format!("split factor must be 4, 8 or 16, got {r}")));
        }
        Ok(Self { level, r })
    }
}

/// Draws sigma and delta uniformly from the split's ranges, an integer
/// quality uniformly from its inclusive range and one of the three random
/// noise families.
pub fn sample_split_spec<R: Rng + ?Sized>(split: &SplitSpec, rng: &mut R) -> DegradationSpec {
    let ranges = split.level.ranges();
    let sigma = rng.random_range(ranges.sigma.0..=ranges.sigma.1);
    let delta = rng.random_range(ranges.delta.0..=ranges.delta.1);
    let q = rng.random_range(ranges.q.0..=ranges.q.1) as u8;
    let family = NoiseFamily::RANDOM[rng.random_range(0..3)];
    DegradationSpec {
        sigma,
        r: split.r,
        family,
        delta,
        q: Quality::Jpeg(q),
        seed: rng.random(),
        resize_back: false,
    }
}

/// One row of a test-set manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub sigma: f64,
    pub r: usize,
    pub family: NoiseFamily,
    pub delta: f64,
    pub q: Quality,
    pub seed: u64,
    /// Clean source image the row was generated from.
    pub source: String,
}

impl ManifestRow {
    pub fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            sigma: self.sigma,
            r: self.r,
            family: self.family,
            delta: self.delta,
            q: self.q,
            seed: self.seed,
            resize_back: false,
        }
    }
}

pub const DEGRADED_DIR: &str = "degraded";
pub const LR_DIR: &str = "lr";
/// Clean sources renamed to match the degraded files.
pub const HR_DIR: &str = "hr";
pub const MANIFEST_CSV: &str = "manifest.csv";

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn degraded_name(index: usize, spec: &DegradationSpec) -> String {
    match spec.q {
        Quality::Lossless => format!("{index:05}.png"),
        Quality::Jpeg(_) => format!("{index:05}.jpg"),
    }
}

/// Degrades one source and writes the degraded file (JPEG bytes verbatim),
/// its bicubic-only low-resolution reference and a copy of the clean source
/// under the same stem.
fn emit(
    source: &ImageTensor,
    spec: &DegradationSpec,
    filename: &str,
    out_dir: &Path,
) -> Result<()> {
    let (img, bytes) = degrade_with_bytes(source, spec)?;
    let path = out_dir.join(DEGRADED_DIR).join(filename);
    match bytes {
        Some(b) => write_bytes(&path, &b)?,
        None => img.save_png(&path)?,
    }
    let (h, w, _) = source.shape();
    let lr = if spec.r > 1 {
        resize(source, h.div_ceil(spec.r), w.div_ceil(spec.r)).clamped()
    } else {
        source.clone()
    };
    let stem = Path::new(filename).with_extension("png");
    lr.save_png(out_dir.join(LR_DIR).join(&stem))?;
    source.save_png(out_dir.join(HR_DIR).join(&stem))
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    for sub in [DEGRADED_DIR, LR_DIR, HR_DIR] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

/// Builds `count` degraded images from the images in `clean_dir` (cycling
/// through them when `count` exceeds the source count). Image `i` uses seed
/// `seed + i` both for its parameter draw and its noise.
pub fn build_testset(
    clean_dir: impl AsRef<Path>,
    split: &SplitSpec,
    count: usize,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let sources = load_dir(clean_dir, None)?;
    build_testset_from(&sources, split, count, out_dir, seed)
}

pub fn build_testset_from(
    sources: &[(String, ImageTensor)],
    split: &SplitSpec,
    count: usize,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    if sources.is_empty() {
        return Err(Error::Empty("no clean source images".into()));
    }
    let out_dir = out_dir.as_ref();
    prepare_out(out_dir)?;
    let rows: Vec<ManifestRow> = (0..count)
        .into_par_iter()
        .map(|i| {
            let item_seed = seed.wrapping_add(i as u64);
            let mut spec = sample_split_spec(split, &mut seeded(item_seed));
            spec.seed = item_seed;
            let (name, img) = &sources[i % sources.len()];
            let filename = degraded_name(i, &spec);
            emit(img, &spec, &filename, out_dir)?;
            Ok(ManifestRow {
                filename,
                sigma: spec.sigma,
                r: spec.r,
                family: spec.family,
                delta: spec.delta,
                q: spec.q,
                seed: spec.seed,
                source: name.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&rows, out_dir.join(MANIFEST_CSV))?;
    Ok(rows)
}

/// Re-runs every manifest row against the sources in `clean_dir`.
pub fn replay_testset(
    manifest: impl AsRef<Path>,
    clean_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRow>> {
    let rows = read_manifest(manifest)?;
    let clean_dir = clean_dir.as_ref();
    let out_dir = out_dir.as_ref();
    prepare_out(out_dir)?;
    rows.par_iter()
        .map(|row| {
            let source = ImageTensor::load(clean_dir.join(&row.source))?;
            emit(&source, &row.spec(), &row.filename, out_dir)
        })
        .collect::<Result<Vec<()>>>()?;
    write_manifest(&rows, out_dir.join(MANIFEST_CSV))?;
    Ok(rows)
}

/// Paths of the degraded files and LR references a manifest names.
pub fn testset_paths(out_dir: impl AsRef<Path>, rows: &[ManifestRow]) -> Vec<(PathBuf, PathBuf)> {
    let out_dir = out_dir.as_ref();
    rows.iter()
        .map(|r| {
            let lr = Path::new(&r.filename).with_extension("png");
            (out_dir.join(DEGRADED_DIR).join(&r.filename), out_dir.join(LR_DIR).join(lr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_faces, write_faces};

    fn gaussian(delta: f64, seed: u64) -> DegradationSpec {
        DegradationSpec {
            family: NoiseFamily::Gaussian,
            delta,
            seed,
            ..DegradationSpec::identity()
        }
    }

    #[test]
    fn identity_spec_is_exact() {
        let x = synthetic_faces(1, 32, 0).remove(0);
        let noisy = ImageTensor::standard_normal((9, 7, 3), &mut seeded(1)).map(|v| (v * 0.3).clamp(-1.0, 1.0));
        assert_eq!(degrade(&x, &DegradationSpec::identity()).unwrap(), x);
        assert_eq!(degrade(&noisy, &DegradationSpec::identity()).unwrap(), noisy);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let x = synthetic_faces(1, 32, 0).remove(0);
        let spec = DegradationSpec {
            sigma: 2.0,
            r: 2,
            family: NoiseFamily::Poisson,
            delta: 20.0,
            q: Quality::Jpeg(50),
            seed: 42,
            resize_back: false,
        };
        let (a, ba) = degrade_with_bytes(&x, &spec).unwrap();
        let (b, bb) = degrade_with_bytes(&x, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        assert_eq!(a.shape(), (16, 16, 3));
        let back = degrade(&x, &DegradationSpec { resize_back: true, ..spec }).unwrap();
        assert_eq!(back.shape(), (32, 32, 3));
    }

    #[test]
    fn noise_families_are_calibrated() {
        let x = ImageTensor::filled(256, 256, 1, 0.0);
        for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace, NoiseFamily::Poisson] {
            let spec = DegradationSpec { family, ..gaussian(25.0, 3) };
            let y = degrade(&x, &spec).unwrap();
            let diffs: Vec<f64> = y.to_255().iter().zip(x.to_255()).map(|(a, b)| a - b).collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
            // Poisson std at level 127.5 is sqrt(127.5 / lambda) = sqrt(127.5 * 25 / 255).
            let expected = if family == NoiseFamily::Poisson { (127.5f64 * 25.0 / 255.0).sqrt() } else { 25.0 };
            assert!((std - expected).abs() < 0.05 * expected, "{family:?}: {std}");
        }
    }

    #[test]
    fn laplace_draws_have_the_right_shape() {
        let mut rng = seeded(8);
        let b = 2.0;
        let draws: Vec<f64> = (0..100_000).map(|_| laplace(&mut rng, b)).collect();
        let mean_abs = draws.iter().map(|v| v.abs()).sum::<f64>() / draws.len() as f64;
        assert!((mean_abs - b).abs() < 0.03);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Quality::new(0).is_err() && Quality::new(101).is_err());
        assert!("lossless".parse::<Quality>().unwrap() == Quality::Lossless);
        assert!("abc".parse::<Quality>().is_err());
        let x = ImageTensor::zeros(8, 8, 3);
        for bad in [
            DegradationSpec { sigma: -1.0, ..DegradationSpec::identity() },
            DegradationSpec { r: 0, ..DegradationSpec::identity() },
            DegradationSpec { delta: f64::NAN, ..DegradationSpec::identity() },
            DegradationSpec { q: Quality::Jpeg(0), ..DegradationSpec::identity() },
        ] {
            assert!(matches!(degrade(&x, &bad), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn split_draws_stay_in_range() {
        let split = SplitSpec::new(SplitLevel::Severe, 16).unwrap();
        let mut rng = seeded(4);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let s = sample_split_spec(&split, &mut rng);
            assert!((7.0..=9.0).contains(&s.sigma) && (25.0..=50.0).contains(&s.delta));
            let Quality::Jpeg(q) = s.q else { panic!("split specs always compress") };
            assert!((30..=40).contains(&q));
            counts[NoiseFamily::RANDOM.iter().position(|f| *f == s.family).unwrap()] += 1;
        }
        // 3-sigma binomial bound around 10^4 / 3.
        let bound = 3.0 * (10_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0 / 3.0).abs() < bound, "{counts:?}");
        }
        let a: Vec<_> = (0..5).map(|_| sample_split_spec(&split, &mut seeded(9))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert!(SplitSpec::new(SplitLevel::Mild, 3).is_err());
    }

    #[test]
    fn testset_cardinality_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("clean");
        write_faces(&synthetic_faces(4, 32, 2), &clean).unwrap();
        let split = SplitSpec::new(SplitLevel::Severe, 4).unwrap();
        let out = dir.path().join("set");
        let rows = build_testset(&clean, &split, 10, &out, 100).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(std::fs::read_dir(out.join(DEGRADED_DIR)).unwrap().count(), 10);
        assert_eq!(std::fs::read_dir(out.join(LR_DIR)).unwrap().count(), 10);
        let manifest = read_manifest(out.join(MANIFEST_CSV)).unwrap();
        assert_eq!(manifest, rows);
        assert!(manifest.iter().all(|r| matches!(r.q, Quality::Jpeg(q) if q <= 40)));

        let again = dir.path().join("replay");
        replay_testset(out.join(MANIFEST_CSV), &clean, &again).unwrap();
        for ((a, la), (b, lb)) in testset_paths(&out, &rows).iter().zip(testset_paths(&again, &rows)) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
            assert_eq!(std::fs::read(la).unwrap(), std::fs::read(lb).unwrap());
        }
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(build_testset(&empty, &split, 3, &out, 0), Err(Error::Empty(_))));
    }
}
