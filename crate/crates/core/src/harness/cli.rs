//! Command-line surface. Every flag is optional so that a `--config`
//! manifest can fill the gaps; precedence is flag > config > `DR2_SEED` >
//! default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::*;
use crate::degradation::SplitLevel;
use crate::error::{Error, Result};
use crate::sampler::GuidanceNoise;

#[derive(Debug, Parser)]
#[command(name = "dr2", version, about = "Diffusion-based degradation removal for face images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a degraded test split with LR references and a manifest.
    Degrade(DegradeArgs),
    /// Run DR2 and an enhancer over a directory.
    Restore(RestoreArgs),
    /// Sweep N and tau; write a CSV and a contact sheet.
    Gridsearch(GridArgs),
    /// Sweep omega with and without iterative refinement.
    AblateOmega(AblateArgs),
    /// Train models or build enhancer training pairs.
    Train {
        #[command(subcommand)]
        which: TrainCommand,
    },
    /// Compute PSNR / SSIM (and Deg) between two directories.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    ToyDdpm(ToyDdpmArgs),
    Pairs(PairsArgs),
    BaselineEnhancer(BaselineArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DegradeArgs {
    /// Replay a run.toml written by a previous `degrade`.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_level)]
    pub level: Option<SplitLevel>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Use this many synthetic faces as the clean source.
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct RestoreArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Denoiser directory or manifest.toml.
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    /// Start step; defaults to tau + round(0.25 T).
    #[arg(long)]
    pub omega: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub no_refinement: bool,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub blend_at_tau: Option<bool>,
    #[arg(long, value_parser = parse_guidance)]
    pub guidance_noise: Option<GuidanceNoise>,
    /// identity, baseline:<ckpt> or external:<ckpt>.
    #[arg(long)]
    pub enhancer: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_coarse: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// References paired with inputs by file stem.
    #[arg(long)]
    pub ref_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub n_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub tau_set: Option<Vec<usize>>,
    #[arg(long)]
    pub omega_offset: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub no_refinement: bool,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub blend_at_tau: Option<bool>,
    /// projection:<dim>:<seed>
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub ref_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub omega_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub off_omega_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub off_tau_set: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub blend_at_tau: Option<bool>,
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyDdpmArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training images; synthetic faces when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub grad_clip: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct PairsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub tau_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sigma_set: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pairs_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub upscale: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub ref_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ssim: Option<bool>,
    /// projection:<dim>:<seed>
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resize_reference: Option<bool>,
}

fn parse_level(s: &str) -> std::result::Result<SplitLevel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_guidance(s: &str) -> std::result::Result<GuidanceNoise, String> {
    match s {
        "independent" => Ok(GuidanceNoise::Independent),
        "shared" | "shared_trajectory" => Ok(GuidanceNoise::SharedTrajectory),
        other => Err(format!("unknown guidance noise `{other}` (independent, shared)")),
    }
}

fn flags<T: Serialize>(args: &T) -> Result<toml::Table> {
    toml::Table::try_from(args).map_err(|e| Error::InvalidConfig(format!("flags: {e}")))
}

fn without_refinement(mut table: toml::Table, off: bool) -> toml::Table {
    if off {
        table.insert("refinement".into(), false.into());
    }
    table
}

/// Runs one command and returns a one-line summary for stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Degrade(a) => {
            let s: DegradeSettings = resolve_settings("degrade", a.config.as_deref(), flags(&a)?)?;
            let out = cmd_degrade(&s)?;
            Ok(format!("degrade: {} images -> {}", out.rows.len(), s.out_dir.display()))
        }
        Command::Restore(a) => {
            let cli = without_refinement(flags(&a)?, a.no_refinement);
            let s: RestoreSettings = resolve_settings("restore", a.config.as_deref(), cli)?;
            let out = cmd_restore(&s)?;
            Ok(format!(
                "restore: {} images, omega {} -> {}",
                out.outputs.len(),
                out.omega,
                s.out_dir.display()
            ))
        }
        Command::Gridsearch(a) => {
            let cli = without_refinement(flags(&a)?, a.no_refinement);
            let s: GridSettings = resolve_settings("gridsearch", a.config.as_deref(), cli)?;
            let out = cmd_gridsearch(&s)?;
            let best = out
                .cells
                .iter()
                .max_by(|x, y| x.psnr.total_cmp(&y.psnr))
                .expect("non-empty grid");
            Ok(format!(
                "gridsearch: {} cells, best N={} tau={} PSNR {:.3} -> {}",
                out.cells.len(),
                best.n,
                best.tau,
                best.psnr,
                out.csv.display()
            ))
        }
        Command::AblateOmega(a) => {
            let s: AblateSettings = resolve_settings("ablate-omega", a.config.as_deref(), flags(&a)?)?;
            let out = cmd_ablate_omega(&s)?;
            Ok(format!("ablate-omega: {} rows -> {}", out.rows.len(), out.csv.display()))
        }
        Command::Train { which } => match which {
            TrainCommand::ToyDdpm(a) => {
                let s: ToyDdpmSettings = resolve_settings("train toy-ddpm", a.config.as_deref(), flags(&a)?)?;
                let out = cmd_train_toy_ddpm(&s)?;
                Ok(format!(
                    "train toy-ddpm: final loss {:.5} -> {}",
                    out.report.final_loss,
                    out.model_manifest.display()
                ))
            }
            TrainCommand::Pairs(a) => {
                let s: PairsSettings = resolve_settings("train pairs", a.config.as_deref(), flags(&a)?)?;
                let out = cmd_train_pairs(&s)?;
                Ok(format!("train pairs: {} pairs -> {}", out.count, out.pair_manifest.display()))
            }
            TrainCommand::BaselineEnhancer(a) => {
                let s: BaselineSettings =
                    resolve_settings("train baseline-enhancer", a.config.as_deref(), flags(&a)?)?;
                let out = cmd_train_baseline(&s)?;
                Ok(format!(
                    "train baseline-enhancer: final L1 {:.5} -> {}",
                    out.report.final_loss,
                    out.model_manifest.display()
                ))
            }
        },
        Command::Evaluate(a) => {
            let s: EvaluateSettings = resolve_settings("evaluate", a.config.as_deref(), flags(&a)?)?;
            let out = cmd_evaluate(&s)?;
            let mean = out.report.mean();
            Ok(format!(
                "evaluate: {} pairs, {} missing, mean PSNR {:.3} -> {}",
                out.report.rows.len(),
                out.report.missing.len(),
                mean.psnr,
                out.csv.display()
            ))
        }
    }
}

/// The machine-readable stderr line for a failed command.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return 2;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overlay_tables() {
        let cli = Cli::try_parse_from(["dr2", "restore", "--N", "8", "--no-refinement", "--save-coarse", "--blend-at-tau", "false"]).unwrap();
        let Command::Restore(a) = cli.command else { panic!("parsed the wrong command") };
        let table = without_refinement(flags(&a).unwrap(), a.no_refinement);
        assert_eq!(table.get("N").and_then(|v| v.as_integer()), Some(8));
        assert_eq!(table.get("refinement").and_then(|v| v.as_bool()), Some(false));
        assert_eq!(table.get("save_coarse").and_then(|v| v.as_bool()), Some(true));
        assert_eq!(table.get("blend_at_tau").and_then(|v| v.as_bool()), Some(false));
        assert!(!table.contains_key("tau"));
        let s: RestoreSettings = resolve_settings("restore", None, table).unwrap();
        assert_eq!((s.n, s.tau, s.refinement), (8, 300, false));
    }

    #[test]
    fn errors_are_json_and_nonzero() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let out = dir.path().join("out");
        let code = main_with_args([
            "dr2",
            "degrade",
            "--input-dir",
            missing.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--count",
            "2",
        ]);
        assert_eq!(code, 1);
        assert_eq!(main_with_args(["dr2", "restore", "--N", "x"]), 2);
        let line = error_line("io", "a \"quoted\" path");
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "io");
    }

    #[test]
    fn train_subcommands_parse() {
        for args in [
            vec!["dr2", "train", "toy-ddpm", "--epochs", "1", "--widths", "8,16,32"],
            vec!["dr2", "train", "pairs", "--tau-set", "50,100"],
            vec!["dr2", "train", "baseline-enhancer", "--blocks", "2"],
            vec!["dr2", "ablate-omega", "--omega-set", "350,1000"],
            vec!["dr2", "gridsearch", "--n-set", "2,4", "--tau-set", "100,200"],
            vec!["dr2", "evaluate", "--ssim", "false"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }
}
