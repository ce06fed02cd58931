use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{create_dir, open_denoiser, parse_embedder, unix_now, ContactSheet, EnhancerSpec, RunManifest, RUN_MANIFEST};
use crate::dataset::{file_name, list_images, synthetic_faces, write_faces};
use crate::degradation::{build_testset, ManifestRow, SplitLevel, SplitSpec};
use crate::denoiser::{train_toy_denoiser, Denoiser, ToyTrainConfig, TrainReport};
use crate::enhancement::{
    build_training_pairs, clean_images, read_pairs, train_baseline_enhancer, write_pairs, EnhancerTrainConfig,
    Enhancer, PairConfig,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::{resize, Resampler};
use crate::metrics::{evaluate_dir, evaluate_pair, EvalConfig, Embedder, MetricsReport};
use crate::sampler::{dr2_remove, Dr2Config, GuidanceNoise};
use crate::schedule::{NoiseSchedule, ScheduleParams};

fn finish<S: Serialize>(command: &str, seed: u64, started: u64, settings: &S, dir: &Path) -> Result<PathBuf> {
    finish_as(command, seed, started, settings, &dir.join(RUN_MANIFEST))
}

fn finish_as<S: Serialize>(command: &str, seed: u64, started: u64, settings: &S, path: &Path) -> Result<PathBuf> {
    let path = path.to_path_buf();
    RunManifest::new(command, seed, started, settings)?.write(&path)?;
    Ok(path)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Loads every image in `dir` and resizes it to `size x size` when needed.
pub fn load_inputs(dir: &Path, size: Option<(usize, usize)>, limit: Option<usize>) -> Result<Vec<(String, ImageTensor)>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no images in {}", dir.display())));
    }
    files
        .iter()
        .take(limit.unwrap_or(usize::MAX))
        .map(|p| {
            let img = ImageTensor::load(p)?;
            let img = match size {
                Some((h, w)) if (img.height(), img.width()) != (h, w) => resize(&img, h, w).clamped(),
                _ => img,
            };
            Ok((stem(p), img))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeSettings {
    pub input_dir: PathBuf,
    pub out_dir: PathBuf,
    pub level: SplitLevel,
    pub factor: usize,
    /// Defaults to the number of source images.
    pub count: Option<usize>,
    /// Generate this many synthetic faces into `out_dir/clean` and use them
    /// instead of `input_dir`.
    pub synthetic_count: Option<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DegradeSettings {
    fn default() -> Self {
        Self {
            input_dir: "clean".into(),
            out_dir: "testset".into(),
            level: SplitLevel::Severe,
            factor: 16,
            count: None,
            synthetic_count: None,
            image_size: 32,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_CLEAN_DIR: &str = "clean";

#[derive(Clone, Debug)]
pub struct DegradeOutcome {
    pub rows: Vec<ManifestRow>,
    pub run_manifest: PathBuf,
}

pub fn cmd_degrade(settings: &DegradeSettings) -> Result<DegradeOutcome> {
    let started = unix_now();
    let split = SplitSpec::new(settings.level, settings.factor)?;
    let input_dir = match settings.synthetic_count {
        Some(n) => {
            let dir = settings.out_dir.join(SYNTHETIC_CLEAN_DIR);
            write_faces(&synthetic_faces(n, settings.image_size, settings.seed), &dir)?;
            dir
        }
        None => settings.input_dir.clone(),
    };
    let count = match settings.count {
        Some(c) => c,
        None => list_images(&input_dir)?.len(),
    };
    let rows = build_testset(&input_dir, &split, count, &settings.out_dir, settings.seed)?;
    let resolved = DegradeSettings {
        count: Some(count),
        ..settings.clone()
    };
    let run_manifest = finish("degrade", settings.seed, started, &resolved, &settings.out_dir)?;
    Ok(DegradeOutcome { rows, run_manifest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreSettings {
    pub input_dir: PathBuf,
    pub out_dir: PathBuf,
    pub denoiser: PathBuf,
    pub schedule: ScheduleParams,
    #[serde(rename = "N")]
    pub n: usize,
    pub tau: usize,
    pub omega: Option<usize>,
    pub refinement: bool,
    pub blend_at_tau: bool,
    pub guidance_noise: GuidanceNoise,
    pub resampler: Resampler,
    pub enhancer: String,
    pub save_coarse: bool,
    pub seed: u64,
}

impl Default for RestoreSettings {
    fn default() -> Self {
        let dr2 = Dr2Config::default();
        Self {
            input_dir: "testset/degraded".into(),
            out_dir: "restored".into(),
            denoiser: "toy-ddpm".into(),
            schedule: ScheduleParams::default(),
            n: dr2.n,
            tau: dr2.tau,
            omega: None,
            refinement: dr2.refinement,
            blend_at_tau: dr2.blend_at_tau,
            guidance_noise: dr2.guidance_noise,
            resampler: dr2.resampler,
            enhancer: "identity".into(),
            save_coarse: false,
            seed: 0,
        }
    }
}

impl RestoreSettings {
    /// Sampler settings for the image at `index`, seeded `seed + index`.
    pub fn dr2_config(&self, index: usize) -> Dr2Config {
        Dr2Config {
            n: self.n,
            resampler: self.resampler,
            tau: self.tau,
            omega: self.omega,
            refinement: self.refinement,
            blend_at_tau: self.blend_at_tau,
            guidance_noise: self.guidance_noise,
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestoreOutcome {
    pub outputs: Vec<PathBuf>,
    pub coarse: Vec<PathBuf>,
    pub omega: usize,
    pub run_manifest: PathBuf,
}

pub const COARSE_DIR: &str = "coarse";

pub fn cmd_restore(settings: &RestoreSettings) -> Result<RestoreOutcome> {
    let schedule = settings.schedule.build()?;
    let denoiser = open_denoiser(&settings.denoiser, &schedule)?;
    let enhancer = settings.enhancer.parse::<EnhancerSpec>()?.open()?;
    restore_with(settings, denoiser.as_ref(), enhancer.as_ref(), &schedule)
}

/// [`cmd_restore`] with models supplied by the caller.
pub fn restore_with(
    settings: &RestoreSettings,
    denoiser: &dyn Denoiser,
    enhancer: &dyn Enhancer,
    schedule: &NoiseSchedule,
) -> Result<RestoreOutcome> {
    let started = unix_now();
    let omega = settings.dr2_config(0).resolve_omega(schedule)?;
    let inputs = load_inputs(&settings.input_dir, denoiser.image_size(), None)?;
    create_dir(&settings.out_dir)?;
    let coarse_dir = settings.out_dir.join(COARSE_DIR);
    if settings.save_coarse {
        create_dir(&coarse_dir)?;
    }
    let written: Vec<(PathBuf, Option<PathBuf>)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (name, y))| {
            let coarse = dr2_remove(y, denoiser, schedule, &settings.dr2_config(i))?;
            let out = enhancer.enhance(&coarse)?.clamped();
            let out_path = settings.out_dir.join(format!("{name}.png"));
            out.save_png(&out_path)?;
            let coarse_path = if settings.save_coarse {
                let p = coarse_dir.join(format!("{name}.png"));
                coarse.save_png(&p)?;
                Some(p)
            } else {
                None
            };
            Ok((out_path, coarse_path))
        })
        .collect::<Result<_>>()?;
    let resolved = RestoreSettings {
        omega: Some(omega),
        ..settings.clone()
    };
    let run_manifest = finish("restore", settings.seed, started, &resolved, &settings.out_dir)?;
    let (outputs, coarse): (Vec<_>, Vec<_>) = written.into_iter().unzip();
    Ok(RestoreOutcome {
        outputs,
        coarse: coarse.into_iter().flatten().collect(),
        omega,
        run_manifest,
    })
}

/// Degraded inputs paired with their references by file stem.
fn paired_inputs(
    input_dir: &Path,
    ref_dir: &Path,
    size: Option<(usize, usize)>,
    limit: Option<usize>,
) -> Result<Vec<(String, ImageTensor, ImageTensor)>> {
    let refs: std::collections::BTreeMap<String, PathBuf> =
        list_images(ref_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut out = Vec::new();
    for (name, y) in load_inputs(input_dir, size, None)? {
        match refs.get(&name) {
            Some(p) => out.push((name, y, ImageTensor::load(p)?)),
            None => log::warn!("no reference for `{name}` in {}", ref_dir.display()),
        }
        if Some(out.len()) == limit {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "no inputs in {} have references in {}",
            input_dir.display(),
            ref_dir.display()
        )));
    }
    Ok(out)
}

/// Mean metrics of one sampler configuration over a sample set.
#[derive(Clone, Debug)]
struct CellResult {
    psnr: f64,
    deg: Option<f64>,
    first: ImageTensor,
}

fn run_cell(
    samples: &[(String, ImageTensor, ImageTensor)],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &Dr2Config,
    embedder: Option<&dyn Embedder>,
) -> Result<CellResult> {
    let eval = EvalConfig {
        ssim: false,
        embedder,
        perceptual: None,
        resize_reference: true,
    };
    let rows: Vec<(f64, Option<f64>, ImageTensor)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (name, y, reference))| {
            let cfg = cfg.clone().with_seed(cfg.seed.wrapping_add(i as u64));
            let out = dr2_remove(y, denoiser, schedule, &cfg)?;
            let row = evaluate_pair(&out, reference, name, &eval)?;
            Ok((row.psnr, row.deg, out))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let deg = rows.iter().map(|r| r.1).collect::<Option<Vec<f64>>>().map(|d| d.iter().sum::<f64>() / n);
    Ok(CellResult {
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        deg,
        first: rows.into_iter().next().expect("non-empty sample set").2,
    })
}

fn embedder_for(spec: &Option<String>, denoiser: &dyn Denoiser, sample: &ImageTensor) -> Result<Option<Box<dyn Embedder>>> {
    let shape = match denoiser.image_size() {
        Some((h, w)) => (h, w, sample.channels()),
        None => sample.shape(),
    };
    spec.as_deref().map(|s| parse_embedder(s, shape)).transpose()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    pub input_dir: PathBuf,
    pub ref_dir: PathBuf,
    pub out_dir: PathBuf,
    pub denoiser: PathBuf,
    pub schedule: ScheduleParams,
    pub n_set: Vec<usize>,
    pub tau_set: Vec<usize>,
    /// `omega - tau`; defaults to `round(0.25 T)`.
    pub omega_offset: Option<usize>,
    pub refinement: bool,
    pub blend_at_tau: bool,
    pub embedder: Option<String>,
    /// Use at most this many sample images.
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            input_dir: "testset/degraded".into(),
            ref_dir: "testset/lr".into(),
            out_dir: "gridsearch".into(),
            denoiser: "toy-ddpm".into(),
            schedule: ScheduleParams::default(),
            n_set: vec![2, 4, 8, 16],
            tau_set: (1..=9).map(|k| 50 * k).collect(),
            omega_offset: None,
            refinement: true,
            blend_at_tau: true,
            embedder: None,
            limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(rename = "N")]
    pub n: usize,
    pub tau: usize,
    pub omega: usize,
    pub psnr: f64,
    pub deg: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub csv: PathBuf,
    pub sheet: PathBuf,
    pub run_manifest: PathBuf,
}

pub fn cmd_gridsearch(settings: &GridSettings) -> Result<GridOutcome> {
    let schedule = settings.schedule.build()?;
    let denoiser = open_denoiser(&settings.denoiser, &schedule)?;
    gridsearch_with(settings, denoiser.as_ref(), &schedule)
}

pub fn gridsearch_with(settings: &GridSettings, denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<GridOutcome> {
    let started = unix_now();
    if settings.n_set.is_empty() || settings.tau_set.is_empty() {
        return Err(Error::InvalidConfig("n_set and tau_set must be non-empty".into()));
    }
    let samples = paired_inputs(&settings.input_dir, &settings.ref_dir, denoiser.image_size(), settings.limit)?;
    let embedder = embedder_for(&settings.embedder, denoiser, &samples[0].1)?;
    create_dir(&settings.out_dir)?;
    let offset = settings.omega_offset.unwrap_or_else(|| schedule.fraction(0.25));
    let tile = samples[0].1.height().max(16);
    let mut sheet = ContactSheet::new(settings.n_set.len(), settings.tau_set.len(), tile);
    let mut cells = Vec::new();
    for (r, &n) in settings.n_set.iter().enumerate() {
        for (c, &tau) in settings.tau_set.iter().enumerate() {
            let cfg = Dr2Config {
                n,
                tau,
                omega: Some((tau + offset).min(schedule.steps())),
                refinement: settings.refinement,
                blend_at_tau: settings.blend_at_tau,
                seed: settings.seed,
                ..Dr2Config::default()
            };
            let omega = cfg.resolve_omega(schedule)?;
            let result = run_cell(&samples, denoiser, schedule, &cfg, embedder.as_deref())?;
            log::info!("gridsearch N={n} tau={tau}: PSNR {:.3}", result.psnr);
            sheet.place(r, c, &result.first, &format!("N{n} T{tau}"));
            cells.push(GridCell {
                n,
                tau,
                omega,
                psnr: result.psnr,
                deg: result.deg,
            });
        }
    }
    let csv = settings.out_dir.join("gridsearch.csv");
    let mut w = csv::Writer::from_path(&csv)?;
    w.write_record(["N", "tau", "omega", "psnr", "deg"])?;
    for cell in &cells {
        w.write_record([
            cell.n.to_string(),
            cell.tau.to_string(),
            cell.omega.to_string(),
            format!("{:.6}", cell.psnr),
            fmt_opt(cell.deg),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv, e))?;
    let sheet_path = settings.out_dir.join("grid.png");
    sheet.save(&sheet_path)?;
    let run_manifest = finish("gridsearch", settings.seed, started, settings, &settings.out_dir)?;
    Ok(GridOutcome {
        cells,
        csv,
        sheet: sheet_path,
        run_manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSettings {
    pub input_dir: PathBuf,
    pub ref_dir: PathBuf,
    pub out_dir: PathBuf,
    pub denoiser: PathBuf,
    pub schedule: ScheduleParams,
    #[serde(rename = "N")]
    pub n: usize,
    /// Truncation step of the refinement-on sweep.
    pub tau: usize,
    pub omega_set: Vec<usize>,
    /// `(omega, tau)` grid of the refinement-off sweep; pairs with
    /// `omega <= tau` are skipped.
    pub off_omega_set: Vec<usize>,
    pub off_tau_set: Vec<usize>,
    pub blend_at_tau: bool,
    pub embedder: Option<String>,
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            input_dir: "testset/degraded".into(),
            ref_dir: "testset/lr".into(),
            out_dir: "ablate-omega".into(),
            denoiser: "toy-ddpm".into(),
            schedule: ScheduleParams::default(),
            n: 4,
            tau: 300,
            omega_set: vec![350, 550, 750, 1000],
            off_omega_set: vec![400, 500, 600, 700],
            off_tau_set: vec![0, 300],
            blend_at_tau: true,
            embedder: None,
            limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub refinement: bool,
    #[serde(rename = "N")]
    pub n: usize,
    pub tau: usize,
    pub omega: usize,
    pub psnr: f64,
    pub deg: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblateOutcome {
    pub rows: Vec<AblationRow>,
    pub csv: PathBuf,
    pub run_manifest: PathBuf,
}

pub fn cmd_ablate_omega(settings: &AblateSettings) -> Result<AblateOutcome> {
    let schedule = settings.schedule.build()?;
    let denoiser = open_denoiser(&settings.denoiser, &schedule)?;
    ablate_omega_with(settings, denoiser.as_ref(), &schedule)
}

pub fn ablate_omega_with(settings: &AblateSettings, denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<AblateOutcome> {
    let started = unix_now();
    let samples = paired_inputs(&settings.input_dir, &settings.ref_dir, denoiser.image_size(), settings.limit)?;
    let embedder = embedder_for(&settings.embedder, denoiser, &samples[0].1)?;
    create_dir(&settings.out_dir)?;
    let mut plan: Vec<Dr2Config> = settings
        .omega_set
        .iter()
        .map(|&omega| Dr2Config {
            n: settings.n,
            tau: settings.tau,
            omega: Some(omega),
            blend_at_tau: settings.blend_at_tau,
            seed: settings.seed,
            ..Dr2Config::default()
        })
        .collect();
    for &tau in &settings.off_tau_set {
        for &omega in settings.off_omega_set.iter().filter(|&&o| o > tau) {
            plan.push(Dr2Config {
                n: settings.n,
                tau,
                omega: Some(omega),
                refinement: false,
                seed: settings.seed,
                ..Dr2Config::default()
            });
        }
    }
    let mut rows = Vec::new();
    for cfg in &plan {
        let omega = cfg.resolve_omega(schedule)?;
        let result = run_cell(&samples, denoiser, schedule, cfg, embedder.as_deref())?;
        log::info!(
            "ablate-omega refinement={} tau={} omega={omega}: PSNR {:.3}",
            cfg.refinement,
            cfg.tau,
            result.psnr
        );
        rows.push(AblationRow {
            refinement: cfg.refinement,
            n: cfg.n,
            tau: cfg.tau,
            omega,
            psnr: result.psnr,
            deg: result.deg,
        });
    }
    let csv = settings.out_dir.join("ablate_omega.csv");
    let mut w = csv::Writer::from_path(&csv)?;
    w.write_record(["refinement", "N", "tau", "omega", "psnr", "deg"])?;
    for r in &rows {
        w.write_record([
            r.refinement.to_string(),
            r.n.to_string(),
            r.tau.to_string(),
            r.omega.to_string(),
            format!("{:.6}", r.psnr),
            fmt_opt(r.deg),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv, e))?;
    let run_manifest = finish("ablate-omega", settings.seed, started, settings, &settings.out_dir)?;
    Ok(AblateOutcome { rows, csv, run_manifest })
}

fn write_losses(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDdpmSettings {
    pub out_dir: PathBuf,
    pub schedule: ScheduleParams,
    /// Image directory; synthetic faces are generated when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic_count: usize,
    pub image_size: usize,
    pub widths: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for ToyDdpmSettings {
    fn default() -> Self {
        let t = ToyTrainConfig::default();
        Self {
            out_dir: "toy-ddpm".into(),
            schedule: ScheduleParams::default(),
            dataset: t.dataset,
            synthetic_count: t.synthetic_count,
            image_size: t.image_size,
            widths: t.widths,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            grad_clip: t.grad_clip,
            seed: t.seed,
        }
    }
}

impl ToyDdpmSettings {
    pub fn train_config(&self) -> ToyTrainConfig {
        ToyTrainConfig {
            image_size: self.image_size,
            widths: self.widths,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            seed: self.seed,
            dataset: self.dataset.clone(),
            synthetic_count: self.synthetic_count,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_manifest: PathBuf,
    pub report: TrainReport,
    pub run_manifest: PathBuf,
}

/// Trains the toy DDPM. Synthetic faces are drawn from `seed + 0x5eed` so
/// they do not share streams with initialization.
pub fn cmd_train_toy_ddpm(settings: &ToyDdpmSettings) -> Result<TrainOutcome> {
    let started = unix_now();
    let schedule = settings.schedule.build()?;
    let data = clean_images(
        settings.dataset.as_deref(),
        settings.image_size,
        settings.synthetic_count,
        settings.seed.wrapping_add(0x5eed),
    )?;
    let (model, report) = train_toy_denoiser(&data, &schedule, &settings.train_config())?;
    let model_manifest = model.save(&settings.out_dir)?;
    write_losses(&report, &settings.out_dir.join("losses.csv"))?;
    let run_manifest = finish("train toy-ddpm", settings.seed, started, settings, &settings.out_dir)?;
    Ok(TrainOutcome {
        model_manifest,
        report,
        run_manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairsSettings {
    pub out_dir: PathBuf,
    pub denoiser: PathBuf,
    pub schedule: ScheduleParams,
    pub clean_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub image_size: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub tau_set: Vec<usize>,
    pub sigma_set: Vec<f64>,
    pub seed: u64,
}

impl Default for PairsSettings {
    fn default() -> Self {
        let p = PairConfig::default();
        Self {
            out_dir: "pairs".into(),
            denoiser: "toy-ddpm".into(),
            schedule: ScheduleParams::default(),
            clean_dir: None,
            synthetic_count: 64,
            image_size: 32,
            n: p.n,
            tau_set: p.tau_set,
            sigma_set: p.sigma_set,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairsOutcome {
    pub count: usize,
    pub pair_manifest: PathBuf,
    pub run_manifest: PathBuf,
}

pub fn cmd_train_pairs(settings: &PairsSettings) -> Result<PairsOutcome> {
    let started = unix_now();
    let schedule = settings.schedule.build()?;
    let denoiser = open_denoiser(&settings.denoiser, &schedule)?;
    let size = denoiser.image_size().map(|s| s.0).unwrap_or(settings.image_size);
    let clean = match &settings.clean_dir {
        Some(d) => clean_images(Some(d), size, 0, 0)?,
        None => synthetic_faces(settings.synthetic_count, size, settings.seed.wrapping_add(0x5eed)),
    };
    let cfg = PairConfig {
        n: settings.n,
        tau_set: settings.tau_set.clone(),
        sigma_set: settings.sigma_set.clone(),
        seed: settings.seed,
    };
    let pairs = build_training_pairs(&clean, denoiser.as_ref(), &schedule, &cfg)?;
    let pair_manifest = write_pairs(&pairs, &settings.out_dir)?;
    let run_manifest = finish("train pairs", settings.seed, started, settings, &settings.out_dir)?;
    Ok(PairsOutcome {
        count: pairs.len(),
        pair_manifest,
        run_manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub pairs_dir: PathBuf,
    pub out_dir: PathBuf,
    pub width: usize,
    pub blocks: usize,
    pub upscale: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        let c = EnhancerTrainConfig::default();
        Self {
            pairs_dir: "pairs".into(),
            out_dir: "baseline-enhancer".into(),
            width: c.width,
            blocks: c.blocks,
            upscale: c.upscale,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            grad_clip: c.grad_clip,
            seed: c.seed,
        }
    }
}

pub fn cmd_train_baseline(settings: &BaselineSettings) -> Result<TrainOutcome> {
    let started = unix_now();
    let pairs = read_pairs(&settings.pairs_dir)?;
    let cfg = EnhancerTrainConfig {
        width: settings.width,
        blocks: settings.blocks,
        upscale: settings.upscale,
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        learning_rate: settings.learning_rate,
        grad_clip: settings.grad_clip,
        seed: settings.seed,
    };
    let (model, report) = train_baseline_enhancer(&pairs, &cfg)?;
    let model_manifest = model.save(&settings.out_dir)?;
    write_losses(&report, &settings.out_dir.join("losses.csv"))?;
    let run_manifest = finish("train baseline-enhancer", settings.seed, started, settings, &settings.out_dir)?;
    Ok(TrainOutcome {
        model_manifest,
        report,
        run_manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSettings {
    pub pred_dir: PathBuf,
    pub ref_dir: PathBuf,
    /// Defaults to `metrics.csv` inside `pred_dir`.
    pub out_csv: Option<PathBuf>,
    pub ssim: bool,
    pub embedder: Option<String>,
    pub resize_reference: bool,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            pred_dir: "restored".into(),
            ref_dir: "testset/lr".into(),
            out_csv: None,
            ssim: true,
            embedder: None,
            resize_reference: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub csv: PathBuf,
    pub run_manifest: PathBuf,
}

pub fn cmd_evaluate(settings: &EvaluateSettings) -> Result<EvaluateOutcome> {
    let started = unix_now();
    let embedder = match &settings.embedder {
        Some(spec) => {
            let first = list_images(&settings.pred_dir)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Empty(format!("no images in {}", settings.pred_dir.display())))?;
            Some(parse_embedder(spec, ImageTensor::load(&first)?.shape())?)
        }
        None => None,
    };
    let cfg = EvalConfig {
        ssim: settings.ssim,
        embedder: embedder.as_deref(),
        perceptual: None,
        resize_reference: settings.resize_reference,
    };
    let report = evaluate_dir(&settings.pred_dir, &settings.ref_dir, &cfg)?;
    let csv = settings.out_csv.clone().unwrap_or_else(|| settings.pred_dir.join("metrics.csv"));
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&csv)?;
    let resolved = EvaluateSettings {
        out_csv: Some(csv.clone()),
        ..settings.clone()
    };
    // Kept apart from the run.toml of the command that produced `pred_dir`.
    let run_manifest = finish_as("evaluate", 0, started, &resolved, &csv.with_extension("run.toml"))?;
    Ok(EvaluateOutcome {
        report,
        csv,
        run_manifest,
    })
}

/// Names of the files a command wrote into `dir`, for replay comparisons.
pub fn output_files(dir: &Path) -> Result<Vec<String>> {
    Ok(list_images(dir)?.iter().map(|p| file_name(p)).collect())
}
