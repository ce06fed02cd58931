//! Runs CLI commands in-process and replays them from their `run.toml`.
//!
//! Every command records the settings it actually used, including the
//! seed, so `--config <run.toml>` reproduces the outputs bit for bit.

use std::path::Path;

use dr2::harness::cli::main_with_args;
use dr2::harness::RunManifest;

fn dr2(args: &[&str]) {
    let code = main_with_args(std::iter::once("dr2").chain(args.iter().copied()));
    assert_eq!(code, 0, "dr2 {args:?} failed");
}

fn same_files(a: &Path, b: &Path) -> bool {
    let names = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d.join("degraded")).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    names(a) == names(b)
        && names(a)
            .iter()
            .all(|n| std::fs::read(a.join("degraded").join(n)).unwrap() == std::fs::read(b.join("degraded").join(n)).unwrap())
}

fn main() {
    let root = Path::new("target/example-replay");
    let (first, second) = (root.join("first"), root.join("second"));
    let (first, second) = (first.to_str().unwrap(), second.to_str().unwrap());

    dr2(&["degrade", "--synthetic-count", "4", "--level", "medium", "--factor", "4", "--out-dir", first]);
    let manifest = RunManifest::read(root.join("first/run.toml")).unwrap();
    println!("recorded seed {} and args:\n{}", manifest.run.seed, toml::to_string(&manifest.args).unwrap());

    let config = root.join("first/run.toml");
    dr2(&["degrade", "--config", config.to_str().unwrap(), "--out-dir", second]);
    println!("replay identical: {}", same_files(Path::new(first), Path::new(second)));
}
