//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use dr2::dataset::{synthetic_faces, write_faces};
use dr2::degradation::{degrade, sample_split_spec, DegradationSpec, NoiseFamily, Quality, SplitLevel, SplitSpec};
use dr2::denoiser::{oracle_denoiser, train_toy_denoiser, ToyDenoiser, ToyTrainConfig};
use dr2::harness::cli::main_with_args;
use dr2::harness::{ablate_omega_with, gridsearch_with, AblateSettings, GridSettings, RunManifest, RUN_MANIFEST};
use dr2::lowpass::{blend, phi, FilterSpec};
use dr2::metrics::{psnr, psnr_from_mse, ssim};
use dr2::rng::seeded;
use dr2::sampler::{dr2_remove, Dr2Config};
use dr2::schedule::NoiseSchedule;
use dr2::ImageTensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform_image(shape: (usize, usize, usize), rng: &mut impl Rng) -> ImageTensor {
    ImageTensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..=1.0)).unwrap()
}

fn c1_diffusion_algebra() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = seeded(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x0 = uniform_image((4, 4, 1), &mut rng);
        let t = rng.random_range(1..=1000);
        let eps = ImageTensor::standard_normal((4, 4, 1), &mut rng);
        let back = s.predict_x0_raw(&s.diffuse(&x0, t, &eps).unwrap(), &eps, t).unwrap();
        worst = worst.max(back.max_abs_diff(&x0).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-5 && secs < 5.0, format!("max abs error {worst:.2e}, {secs:.3} s"))
}

fn c2_marginal_statistics() -> Outcome {
    let s = NoiseSchedule::default();
    let n = 10_000;
    let x0 = uniform_image((4, 4, 1), &mut seeded(2));
    let mut worst_z = 0.0f64;
    for (k, t) in [100usize, 500, 900].into_iter().enumerate() {
        let ab = s.alpha_bar(t);
        let mut rng = seeded(20 + k as u64);
        let draws: Vec<ImageTensor> = (0..n)
            .map(|_| s.diffuse(&x0, t, &ImageTensor::standard_normal(x0.shape(), &mut rng)).unwrap())
            .collect();
        let mean_se = ((1.0 - ab) / n as f64).sqrt();
        let var_se = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        for y in 0..4 {
            for x in 0..4 {
                let vals: Vec<f64> = draws.iter().map(|d| d.get(y, x, 0)).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                worst_z = worst_z
                    .max((mean - ab.sqrt() * x0.get(y, x, 0)).abs() / mean_se)
                    .max((var - (1.0 - ab)).abs() / var_se);
            }
        }
    }
    check(worst_z < 5.0, format!("worst deviation {worst_z:.2} standard errors"))
}

fn c3_schedule_constant() -> Outcome {
    let s = NoiseSchedule::default();
    let brute: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    let got = s.alpha_bar(1000);
    let rel = (got - brute).abs() / brute;
    let frozen = 4.035829765375676e-05;
    check(
        rel < 1e-10 && ((got - frozen) / frozen).abs() < 1e-10,
        format!("alpha_bar(1000) = {got:.6e}, relative error {rel:.1e}"),
    )
}

fn c4_oracle_fixed_point() -> Outcome {
    let s = NoiseSchedule::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, y) in synthetic_faces(3, 32, 40).iter().enumerate() {
        let oracle = oracle_denoiser(y.clone(), &s);
        for n in [1, 2, 4] {
            for tau in [100, 300] {
                for blend_at_tau in [true, false] {
                    let cfg = Dr2Config {
                        blend_at_tau,
                        ..Dr2Config::new(n, tau).with_seed(i as u64)
                    };
                    let out = dr2_remove(y, &oracle, &s, &cfg).unwrap();
                    worst = worst.max(out.mean_abs_diff(y).unwrap());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-3 && secs < 120.0, format!("max mean-abs error {worst:.2e}, {secs:.1} s"))
}

fn c5_low_frequency_ownership() -> Outcome {
    let mut rng = seeded(5);
    let mut failures = 0;
    let trials = 50;
    for _ in 0..trials {
        let y = uniform_image((32, 32, 3), &mut rng);
        let x = uniform_image((32, 32, 3), &mut rng);
        for n in [2, 4] {
            let spec = FilterSpec::boxed(n);
            if phi(&blend(&y, &x, spec).unwrap(), spec).unwrap() != phi(&y, spec).unwrap() {
                failures += 1;
            }
        }
    }
    check(failures == 0, format!("{failures} of {} pairs differ in any bit", 2 * trials))
}

fn gaussian40(seed: u64) -> DegradationSpec {
    DegradationSpec {
        family: NoiseFamily::Gaussian,
        delta: 40.0,
        seed,
        ..DegradationSpec::identity()
    }
}

fn train_model(s: &NoiseSchedule) -> (ToyDenoiser, f64) {
    let start = Instant::now();
    let cfg = ToyTrainConfig::default();
    let data = synthetic_faces(cfg.synthetic_count, cfg.image_size, 600);
    let (model, _) = train_toy_denoiser(&data, s, &cfg).unwrap();
    (model, start.elapsed().as_secs_f64())
}

fn c6_denoising_efficacy(model: &ToyDenoiser, s: &NoiseSchedule, train_secs: f64) -> Outcome {
    let clean = synthetic_faces(50, 32, 6_000);
    let (mut wins, mut before, mut after) = (0, 0.0, 0.0);
    for (i, x) in clean.iter().enumerate() {
        let y = degrade(x, &gaussian40(i as u64)).unwrap();
        let out = dr2_remove(&y, model, s, &Dr2Config::new(4, 300).with_seed(i as u64)).unwrap();
        let (p_in, p_out) = (psnr(&y, x).unwrap(), psnr(&out, x).unwrap());
        wins += usize::from(p_out > p_in);
        before += p_in / 50.0;
        after += p_out / 50.0;
    }
    check(
        wins >= 40,
        format!("{wins}/50 wins, mean PSNR {before:.2} -> {after:.2} dB, training {train_secs:.0} s"),
    )
}

/// Writes noisy inputs and their clean references under `root`.
fn ablation_set(root: &Path, count: usize) -> (PathBuf, PathBuf) {
    let clean = synthetic_faces(count, 32, 7_000);
    let degraded: Vec<ImageTensor> = clean
        .iter()
        .enumerate()
        .map(|(i, x)| degrade(x, &gaussian40(100 + i as u64)).unwrap())
        .collect();
    let (inputs, refs) = (root.join("degraded"), root.join("hr"));
    write_faces(&degraded, &inputs).unwrap();
    write_faces(&clean, &refs).unwrap();
    (inputs, refs)
}

/// True when the sequence rises (weakly) to a single maximum and then falls.
fn one_peak(values: &[f64]) -> bool {
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    values[..=peak].windows(2).all(|w| w[1] >= w[0]) && values[peak..].windows(2).all(|w| w[1] <= w[0])
}

fn c7_ablation_shapes(model: &ToyDenoiser, s: &NoiseSchedule) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (inputs, refs) = ablation_set(dir.path(), 20);
    let ablate = AblateSettings {
        input_dir: inputs.clone(),
        ref_dir: refs.clone(),
        out_dir: dir.path().join("ablate"),
        seed: 7,
        ..AblateSettings::default()
    };
    let rows = ablate_omega_with(&ablate, model, s).unwrap().rows;
    let on: Vec<f64> = rows.iter().filter(|r| r.refinement).map(|r| r.psnr).collect();
    let spread = on.iter().cloned().fold(f64::MIN, f64::max) - on.iter().cloned().fold(f64::MAX, f64::min);
    let mut off: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.refinement) {
        off.entry(r.tau).or_default().push(r.psnr);
    }
    let monotone = off.values().all(|v| v.windows(2).all(|w| w[1] <= w[0]));

    let grid = GridSettings {
        input_dir: inputs,
        ref_dir: refs,
        out_dir: dir.path().join("grid"),
        n_set: vec![4],
        seed: 7,
        ..GridSettings::default()
    };
    let curve: Vec<f64> = gridsearch_with(&grid, model, s).unwrap().cells.iter().map(|c| c.psnr).collect();
    let peak = grid.tau_set[curve.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    let unimodal = one_peak(&curve);

    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>().join(" ");
    let off_text = off.iter().map(|(t, v)| format!("tau {t}: {}", fmt(v))).collect::<Vec<_>>().join("; ");
    let detail = format!(
        "(a) spread {spread:.3} dB [{}] {}; (b) {off_text} {}; (c) tau curve [{}] peak at {peak} {}",
        fmt(&on),
        if spread < 1.0 { "ok" } else { "FAIL" },
        if monotone { "ok" } else { "FAIL" },
        fmt(&curve),
        if unimodal { "ok" } else { "FAIL" },
    );
    check(spread < 1.0 && monotone && unimodal, detail)
}

fn c8_degradation() -> Outcome {
    let x = synthetic_faces(1, 32, 8).remove(0);
    let specs = [
        DegradationSpec {
            sigma: 3.0,
            r: 4,
            family: NoiseFamily::Gaussian,
            delta: 20.0,
            q: Quality::Jpeg(60),
            seed: 1,
            resize_back: true,
        },
        DegradationSpec {
            sigma: 1.0,
            r: 2,
            family: NoiseFamily::Poisson,
            delta: 30.0,
            q: Quality::Jpeg(40),
            seed: 2,
            resize_back: false,
        },
        DegradationSpec {
            sigma: 0.0,
            r: 1,
            family: NoiseFamily::Laplace,
            delta: 15.0,
            q: Quality::Lossless,
            seed: 3,
            resize_back: false,
        },
    ];
    let deterministic = specs.iter().all(|spec| degrade(&x, spec).unwrap() == degrade(&x, spec).unwrap());

    let mut ranges_ok = true;
    for level in [SplitLevel::Mild, SplitLevel::Medium, SplitLevel::Severe] {
        let want = level.ranges();
        let split = SplitSpec::new(level, 8).unwrap();
        let mut rng = seeded(80);
        let draws: Vec<DegradationSpec> = (0..10_000).map(|_| sample_split_spec(&split, &mut rng)).collect();
        let qs: Vec<u32> = draws
            .iter()
            .map(|d| match d.q {
                Quality::Jpeg(q) => u32::from(q),
                Quality::Lossless => 0,
            })
            .collect();
        let inside = draws.iter().all(|d| {
            d.r == 8
                && (want.sigma.0..=want.sigma.1).contains(&d.sigma)
                && (want.delta.0..=want.delta.1).contains(&d.delta)
                && d.family != NoiseFamily::None
        }) && qs.iter().all(|q| (want.q.0..=want.q.1).contains(q));
        // Draws should also reach both ends of every range.
        let near = |vals: Vec<f64>, (lo, hi): (f64, f64)| {
            let span = hi - lo;
            let (mn, mx) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            mn - lo < 0.01 * span && hi - mx < 0.01 * span
        };
        let covered = near(draws.iter().map(|d| d.sigma).collect(), want.sigma)
            && near(draws.iter().map(|d| d.delta).collect(), want.delta)
            && qs.contains(&want.q.0)
            && qs.contains(&want.q.1);
        ranges_ok &= inside && covered;
    }

    let gray = ImageTensor::filled(256, 256, 1, 0.0);
    let noisy = degrade(
        &gray,
        &DegradationSpec {
            family: NoiseFamily::Gaussian,
            delta: 25.0,
            seed: 9,
            ..DegradationSpec::identity()
        },
    )
    .unwrap();
    let vals = noisy.to_255();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    let calibrated = (std / 25.0 - 1.0).abs() < 0.05;
    check(
        deterministic && ranges_ok && calibrated,
        format!("determinism {deterministic}, ranges {ranges_ok}, delta 25 measured {std:.2}"),
    )
}

fn c9_metrics() -> Outcome {
    let closed_form = psnr_from_mse(255.0 * 255.0) == 0.0 && psnr_from_mse(650.25) == 20.0;
    // Black vs white is the full-scale MSE; a uniform offset of 25.5 is 20 dB.
    let black = ImageTensor::filled(16, 16, 3, -1.0);
    let white = ImageTensor::filled(16, 16, 3, 1.0);
    let offset = ImageTensor::filled(16, 16, 3, -0.8);
    let zero_db = psnr(&black, &white).unwrap();
    let twenty_db = psnr(&black, &offset).unwrap();
    let images_ok = zero_db.abs() < 1e-9 && (twenty_db - 20.0).abs() < 1e-9;

    let mut rng = seeded(9);
    let mut ssim_one = true;
    let mut symmetric = true;
    for _ in 0..100 {
        let a = uniform_image((16, 16, 3), &mut rng);
        let b = uniform_image((16, 16, 3), &mut rng);
        ssim_one &= ssim(&a, &a).unwrap() == 1.0;
        symmetric &= psnr(&a, &b).unwrap() == psnr(&b, &a).unwrap() && ssim(&a, &b).unwrap() == ssim(&b, &a).unwrap();
    }
    check(
        closed_form && images_ok && ssim_one && symmetric,
        format!("closed forms {closed_form}, image PSNR {zero_db:.3}/{twenty_db:.3} dB, SSIM(a,a)=1 {ssim_one}, symmetry {symmetric}"),
    )
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dr2").chain(args.iter().copied()))
}

/// Every file below `dir` except run manifests, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if !path.to_string_lossy().ends_with(RUN_MANIFEST) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn c10_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("degrade", vec!["degrade".into(), "--synthetic-count".into(), "4".into(), "--factor".into(), "4".into(), "--level".into(), "severe".into()]),
        ("train toy-ddpm", vec!["train".into(), "toy-ddpm".into(), "--synthetic-count".into(), "16".into(), "--widths".into(), "4,8,8".into(), "--epochs".into(), "1".into(), "--batch-size".into(), "8".into()]),
        ("restore", vec!["restore".into(), "--input-dir".into(), format!("{}/degraded", p("degrade")), "--denoiser".into(), p("train toy-ddpm"), "--N".into(), "4".into(), "--tau".into(), "100".into(), "--omega".into(), "160".into(), "--save-coarse".into()]),
        ("gridsearch", vec!["gridsearch".into(), "--input-dir".into(), format!("{}/degraded", p("degrade")), "--ref-dir".into(), format!("{}/hr", p("degrade")), "--denoiser".into(), p("train toy-ddpm"), "--n-set".into(), "2,4".into(), "--tau-set".into(), "20,40".into(), "--omega-offset".into(), "20".into(), "--embedder".into(), "projection:8:1".into(), "--limit".into(), "2".into()]),
        ("ablate-omega", vec!["ablate-omega".into(), "--input-dir".into(), format!("{}/degraded", p("degrade")), "--ref-dir".into(), format!("{}/hr", p("degrade")), "--denoiser".into(), p("train toy-ddpm"), "--tau".into(), "20".into(), "--omega-set".into(), "40,60".into(), "--off-omega-set".into(), "30,50".into(), "--off-tau-set".into(), "0,20".into(), "--limit".into(), "2".into()]),
        ("train pairs", vec!["train".into(), "pairs".into(), "--denoiser".into(), p("train toy-ddpm"), "--synthetic-count".into(), "4".into(), "--tau-set".into(), "10,20".into()]),
        ("train baseline-enhancer", vec!["train".into(), "baseline-enhancer".into(), "--pairs-dir".into(), p("train pairs"), "--width".into(), "4".into(), "--blocks".into(), "1".into(), "--epochs".into(), "1".into()]),
    ];
    let mut failures = Vec::new();
    for (name, mut args) in runs {
        let first = p(name);
        args.extend(["--out-dir".into(), first.clone()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        if cli(&refs) != 0 {
            failures.push(format!("{name}: first run failed"));
            continue;
        }
        let replay = p(&format!("{name} replay"));
        let config = format!("{first}/{RUN_MANIFEST}");
        if cli(&[name.split(' ').collect::<Vec<_>>(), vec!["--config", &config, "--out-dir", &replay]].concat()) != 0 {
            failures.push(format!("{name}: replay failed"));
            continue;
        }
        let (a, b) = (snapshot(Path::new(&first)), snapshot(Path::new(&replay)));
        let seeds = [&first, &replay].map(|d| RunManifest::read(format!("{d}/{RUN_MANIFEST}")).unwrap().run.seed);
        if a.is_empty() || a != b || seeds[0] != seeds[1] {
            failures.push(format!("{name}: outputs differ ({} vs {} files)", a.len(), b.len()));
        }
    }

    let csv = p("metrics.csv");
    let restored = p("restore");
    let hr = format!("{}/hr", p("degrade"));
    let eval_ok = cli(&["evaluate", "--pred-dir", &restored, "--ref-dir", &hr, "--embedder", "projection:8:2", "--out-csv", &csv]) == 0;
    let replay_csv = p("metrics replay.csv");
    let config = PathBuf::from(&csv).with_extension(RUN_MANIFEST);
    let replay_ok = cli(&["evaluate", "--config", &config.to_string_lossy(), "--out-csv", &replay_csv]) == 0;
    if !(eval_ok && replay_ok && std::fs::read(&csv).ok() == std::fs::read(&replay_csv).ok()) {
        failures.push("evaluate: outputs differ".into());
    }
    check(failures.is_empty(), if failures.is_empty() { "8 commands replayed byte-for-byte".into() } else { failures.join("; ") })
}

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {number:>2} {name}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

fn main() {
    let s = NoiseSchedule::default();
    let mut ok = true;
    ok &= run(1, "diffusion algebra", c1_diffusion_algebra);
    ok &= run(2, "marginal statistics", c2_marginal_statistics);
    ok &= run(3, "schedule constant", c3_schedule_constant);
    ok &= run(4, "oracle fixed point", c4_oracle_fixed_point);
    ok &= run(5, "low-frequency ownership", c5_low_frequency_ownership);
    let model = catch_unwind(AssertUnwindSafe(|| train_model(&s))).ok();
    match &model {
        Some((m, secs)) => {
            ok &= run(6, "denoising efficacy", || c6_denoising_efficacy(m, &s, *secs));
            ok &= run(7, "ablation shapes", || c7_ablation_shapes(m, &s));
        }
        None => {
            ok &= run(6, "denoising efficacy", || Err("toy training failed".into()));
            ok &= run(7, "ablation shapes", || Err("toy training failed".into()));
        }
    }
    ok &= run(8, "degradation pipeline", c8_degradation);
    ok &= run(9, "metrics", c9_metrics);
    ok &= run(10, "reproducibility", c10_replay);
    if !ok {
        std::process::exit(1);
    }
}
