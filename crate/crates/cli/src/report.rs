use std::path::{Path, PathBuf};

use fpt_core::metrics::{
    estimate_activation_memory, param_inventory, EfficiencyReport, MemoryMode, MEMORY_MODEL_VERSION,
};
use fpt_core::trainer::TrainReport;
use fpt_core::{FptConfig, FptError, Result, TrainMode};
use serde::{Deserialize, Serialize};

use crate::RunOptions;

/// Published or externally measured rows to score.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    /// Memory of the full fine-tuning reference, in the same unit as `mem`.
    pub reference_mem: f64,
    pub rows: Vec<FixtureRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRow {
    pub method: String,
    pub params_pct: f64,
    pub mem: f64,
    pub scores: Vec<f64>,
    pub published_ppe: Option<f64>,
    pub published_pme: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub params_pct: f64,
    pub mem: f64,
    pub scores: Vec<f64>,
    pub avg: Option<f64>,
    pub ppe: Option<f64>,
    pub pme: Option<f64>,
    /// Largest absolute gap to the published PPE/PME, when given.
    pub published_gap: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Table {
    pub mem_unit: String,
    pub rows: Vec<Row>,
    pub footnote: String,
}

fn score_row(method: String, params_pct: f64, mem: f64, reference_mem: f64, scores: Vec<f64>) -> Result<Row> {
    let avg = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let eff = avg.map(|a| EfficiencyReport::new(a, params_pct / 100.0, mem / reference_mem)).transpose()?;
    Ok(Row {
        method,
        params_pct,
        mem,
        scores,
        avg,
        ppe: eff.as_ref().map(|e| e.ppe),
        pme: eff.as_ref().map(|e| e.pme),
        published_gap: None,
    })
}

pub fn from_fixtures(f: &Fixtures) -> Result<Table> {
    let rows = f
        .rows
        .iter()
        .map(|r| {
            let mut row = score_row(r.method.clone(), r.params_pct, r.mem, f.reference_mem, r.scores.clone())?;
            let gaps = [(row.ppe, r.published_ppe), (row.pme, r.published_pme)];
            row.published_gap = gaps
                .iter()
                .filter_map(|&(a, b)| Some((a? - b?).abs()))
                .reduce(f64::max);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(Table {
        mem_unit: "MB".into(),
        rows,
        footnote: "Params. = learnable / (frozen + learnable); PME memory ratio is against the reference memory.".into(),
    })
}

/// Analytic rows for `cfg`, with scores from train reports where available.
pub fn from_config(cfg: &FptConfig, runs: &[TrainReport]) -> Result<Table> {
    let classes = cfg.data.synth.num_classes;
    let bb = &cfg.backbone;
    let full = estimate_activation_memory(cfg, MemoryMode::FullFineTune, classes).retained as f64;
    let backbone_total = param_inventory(cfg, TrainMode::Fpt, classes).backbone;
    let head = bb.dim * classes + classes;
    let scores_for = |mode: TrainMode| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.test_auc.map(|a| 100.0 * a))
            .collect()
    };
    let mut rows = vec![
        score_row("full fine-tuning".into(), 100.0, full, full, Vec::new())?,
        score_row(
            "linear probing".into(),
            100.0 * head as f64 / (backbone_total + head) as f64,
            estimate_activation_memory(cfg, MemoryMode::LinearProbe, classes).retained as f64,
            full,
            Vec::new(),
        )?,
    ];
    for mode in TrainMode::ALL {
        let inv = param_inventory(cfg, mode, classes);
        let mem = estimate_activation_memory(cfg, MemoryMode::for_train_mode(cfg, mode), classes).retained as f64;
        // Side-only has no backbone of its own; its ratio is taken against the backbone it replaces.
        let total = inv.learnable() + backbone_total;
        let pct = 100.0 * inv.learnable() as f64 / total as f64;
        rows.push(score_row(mode.name().into(), pct, mem, full, scores_for(mode))?);
    }
    Ok(Table {
        mem_unit: "elements".into(),
        rows,
        footnote: format!(
            "Params. = learnable / (frozen + learnable); Mem. = retained activation elements per step \
             (memory model v{MEMORY_MODEL_VERSION}, batch {}); ratios are against full fine-tuning.",
            cfg.train.batch_size
        ),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}

pub fn render(t: &Table) -> String {
    let header = [
        "Method".to_string(),
        "Params.(%)".into(),
        format!("Mem.({})", t.mem_unit),
        "Scores".into(),
        "Avg.".into(),
        "PPE".into(),
        "PME".into(),
    ];
    let mut cells: Vec<[String; 7]> = vec![header];
    for r in &t.rows {
        let scores = if r.scores.is_empty() {
            "-".into()
        } else {
            r.scores.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" ")
        };
        cells.push([
            r.method.clone(),
            format!("{:.2}", r.params_pct),
            format!("{:.0}", r.mem),
            scores,
            fmt_opt(r.avg),
            fmt_opt(r.ppe),
            fmt_opt(r.pme),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    if let Some(gap) = t.rows.iter().filter_map(|r| r.published_gap).reduce(f64::max) {
        out.push_str(&format!("max |PPE/PME - published| = {gap:.4}\n"));
    }
    out.push_str(&t.footnote);
    out.push('\n');
    out
}

pub fn run(opts: &RunOptions, fixtures: Option<&Path>, runs: &[PathBuf], json: bool) -> Result<()> {
    let table = match fixtures {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| FptError::io(path, e))?;
            let f: Fixtures = toml::from_str(&text).map_err(|e| FptError::format(path, e.to_string()))?;
            from_fixtures(&f)?
        }
        None => {
            let reports = runs
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).map_err(|e| FptError::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| FptError::format(p, e.to_string()))
                })
                .collect::<Result<Vec<TrainReport>>>()?;
            from_config(&opts.config()?, &reports)?
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
    } else {
        print!("{}", render(&table));
    }
    Ok(())
}
