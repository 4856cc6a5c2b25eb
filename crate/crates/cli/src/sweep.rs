use std::path::{Path, PathBuf};
use std::process::Command;

use fpt_core::trainer::TrainReport;
use fpt_core::{FptError, Result};
use serde::Serialize;

use crate::commands::REPORT_FILE;
use crate::RunOptions;

const SWEEP_KEYS: [&str; 9] = [
    "mode",
    "seed",
    "epochs",
    "batch-size",
    "lr",
    "weight-decay",
    "ratio",
    "prompts",
    "samples",
];

#[derive(Debug, Serialize)]
struct SweepRun {
    settings: Vec<(String, String)>,
    dir: PathBuf,
    exit_code: Option<i32>,
    best_val_auc: Option<f64>,
    test_auc: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    runs: Vec<SweepRun>,
    /// Index of the run with the highest validation AUC.
    best: Option<usize>,
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|spec| {
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| FptError::Config(format!("grid entry {spec:?} is not key=v1,v2")))?;
            let key = key.trim().replace('_', "-");
            if !SWEEP_KEYS.contains(&key.as_str()) {
                return Err(FptError::Config(format!(
                    "cannot sweep {key:?}; choose from {}",
                    SWEEP_KEYS.join(", ")
                )));
            }
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(FptError::Config(format!("grid entry {spec:?} has no values")));
            }
            Ok((key, values))
        })
        .collect()
}

/// Cartesian product in the order the keys were given, last key fastest.
fn combinations(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    grid.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

/// Flags that reproduce `opts` in a child process.
fn base_args(opts: &RunOptions) -> Vec<String> {
    let mut args = Vec::new();
    let mut push = |flag: &str, v: Option<String>| {
        if let Some(v) = v {
            args.push(format!("--{flag}"));
            args.push(v);
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    push("config", path(&opts.config));
    push("data-root", path(&opts.data_root));
    push("cache-dir", path(&opts.cache_dir));
    push("mode", opts.mode.map(|m| m.name().to_string()));
    push("seed", opts.seed.map(|v| v.to_string()));
    push("epochs", opts.epochs.map(|v| v.to_string()));
    push("batch-size", opts.batch_size.map(|v| v.to_string()));
    push("lr", opts.lr.map(|v| v.to_string()));
    push("weight-decay", opts.weight_decay.map(|v| v.to_string()));
    push("ratio", opts.ratio.map(|v| v.to_string()));
    push("prompts", opts.prompts.map(|v| v.to_string()));
    push("samples", opts.samples.map(|v| v.to_string()));
    push("synth-seed", opts.synth_seed.map(|v| v.to_string()));
    args
}

fn read_report(dir: &Path) -> Option<TrainReport> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn run(opts: &RunOptions, grid: &[String], out: &Path, jobs: usize) -> Result<()> {
    // Fail on a bad base config before spawning anything.
    opts.config()?;
    let combos = combinations(&parse_grid(grid)?);
    std::fs::create_dir_all(out).map_err(|e| FptError::io(out, e))?;
    let exe = std::env::current_exe().map_err(|e| FptError::io("fpt", e))?;
    let base = base_args(opts);

    let jobs = jobs.max(1);
    let mut runs: Vec<SweepRun> = Vec::with_capacity(combos.len());
    for (b, chunk) in combos.chunks(jobs).enumerate() {
        let offset = b * jobs;
        let mut children = Vec::new();
        for (i, settings) in chunk.iter().enumerate() {
            let dir = out.join(format!("run{:03}", offset + i));
            let mut cmd = Command::new(&exe);
            cmd.arg("train").args(&base).arg("--out").arg(&dir);
            // Later flags override earlier ones in clap, so grid values win over the base.
            for (k, v) in settings {
                cmd.arg(format!("--{k}")).arg(v);
            }
            let child = cmd.spawn().map_err(|e| FptError::io(&exe, e))?;
            children.push((settings.clone(), dir, child));
        }
        for (settings, dir, mut child) in children {
            let status = child.wait().map_err(|e| FptError::io(&exe, e))?;
            let report = read_report(&dir).filter(|_| status.success());
            runs.push(SweepRun {
                settings,
                dir,
                exit_code: status.code(),
                best_val_auc: report.as_ref().map(|r| r.best_val_auc),
                test_auc: report.and_then(|r| r.test_auc),
            });
        }
    }
    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.best_val_auc.map(|a| (i, a)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    for r in &runs {
        let s: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{:<40} exit {:>3}  val {}  test {}",
            s.join(" "),
            r.exit_code.map_or("-".into(), |c| c.to_string()),
            r.best_val_auc.map_or("-".into(), |a| format!("{a:.4}")),
            r.test_auc.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    let summary = SweepSummary { runs, best };
    let path = out.join("sweep.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| FptError::io(&path, e))?;
    if summary.runs.iter().any(|r| r.exit_code != Some(0)) {
        return Err(FptError::Data("some sweep runs failed; see sweep.json".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_order() {
        let g = parse_grid(&["lr=1,2".into(), "seed=0,1,2".into()]).unwrap();
        let c = combinations(&g);
        assert_eq!(c.len(), 6);
        assert_eq!(c[1], vec![("lr".into(), "1".into()), ("seed".into(), "1".into())]);
        assert!(parse_grid(&["depth=3".into()]).is_err());
        assert!(parse_grid(&["lr".into()]).is_err());
    }
}
