use std::path::{Path, PathBuf};

use fpt_core::backbone::Backbone;
use fpt_core::cache::{build_cache, cache_paths};
use fpt_core::data::{load_dir, synth_generate, write_dir, Dataset, Split};
use fpt_core::fusion::Checkpoint;
use fpt_core::trainer::{evaluate, FeatureSource, FptModel, Trainer};
use fpt_core::{FptConfig, FptError, Result};

use crate::{Preset, RunOptions};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];
pub const CHECKPOINT_FILE: &str = "model.fptk";
pub const REPORT_FILE: &str = "report.json";

pub fn config(preset: Preset, out: Option<&Path>) -> Result<()> {
    let cfg = match preset {
        Preset::Desk => FptConfig::desk(),
        Preset::VitB => FptConfig::vit_b(),
    };
    match out {
        Some(p) => std::fs::write(p, cfg.to_toml()).map_err(|e| FptError::io(p, e)),
        None => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

pub fn load_dataset(cfg: &FptConfig) -> Result<Dataset> {
    let ds = match &cfg.data.root {
        Some(root) => load_dir(root)?,
        None => synth_generate(&cfg.data.synth)?,
    };
    for (id, reason) in &ds.skipped {
        eprintln!("warning: skipped {id}: {reason}");
    }
    Ok(ds)
}

pub fn synth(opts: &RunOptions, out: &Path) -> Result<()> {
    let cfg = opts.config()?;
    let ds = synth_generate(&cfg.data.synth)?;
    write_dir(&ds, out)?;
    println!(
        "wrote {} train / {} val / {} test images to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn require_backbone_mode(cfg: &FptConfig, what: &str) -> Result<()> {
    if cfg.train.mode.uses_backbone() {
        Ok(())
    } else {
        Err(FptError::Config(format!("mode {} has no frozen path to {what}", cfg.train.mode.name())))
    }
}

pub fn cache(opts: &RunOptions, force: bool) -> Result<()> {
    let cfg = opts.config()?;
    require_backbone_mode(&cfg, "cache")?;
    let dir = opts.cache_dir();
    if !force {
        for split in SPLITS {
            let (data, manifest) = cache_paths(&dir, split);
            if data.exists() || manifest.exists() {
                return Err(FptError::CacheExists(data));
            }
        }
    }
    let data = load_dataset(&cfg)?;
    let backbone = Backbone::new(&cfg.backbone)?;
    let run_cfg = cfg.for_mode(cfg.train.mode);
    let mut samples = 0;
    let mut bytes = 0;
    for split in SPLITS {
        let skipped = if split == Split::Train { data.skipped.as_slice() } else { &[] };
        let m = build_cache(data.split(split), skipped, split, &run_cfg, &backbone, &dir, force)?;
        samples += m.samples.len();
        bytes += std::fs::metadata(cache_paths(&dir, split).0).map_err(|e| FptError::io(&dir, e))?.len();
    }
    println!("cached {samples} samples, {bytes} bytes in {} (config {})", dir.display(), run_cfg.digest());
    Ok(())
}

/// Feature source for a run: nothing, a live backbone, or the cache.
fn features(cfg: &FptConfig, dir: &Path, live: bool, splits: &[Split]) -> Result<(FeatureSource, Option<u64>)> {
    if !cfg.train.mode.uses_backbone() {
        return Ok((FeatureSource::Disabled, None));
    }
    let backbone = Backbone::new(&cfg.backbone)?;
    let id = backbone.identity();
    if live {
        Ok((FeatureSource::Live(backbone), Some(id)))
    } else {
        Ok((FeatureSource::open_cache(dir, cfg, &backbone, splits)?, Some(id)))
    }
}

pub fn train(opts: &RunOptions, out: &Path, live: bool) -> Result<()> {
    let cfg = opts.config()?;
    let run_cfg = cfg.for_mode(cfg.train.mode);
    let data = load_dataset(&cfg)?;
    let (source, identity) = features(&run_cfg, &opts.cache_dir(), live, &SPLITS)?;
    let model = FptModel::new(&cfg, &data, identity)?;
    let (best, report) = Trainer::new(model, &data, &source)?.train()?;
    std::fs::create_dir_all(out).map_err(|e| FptError::io(out, e))?;
    best.checkpoint(report.best_epoch).save(&out.join(CHECKPOINT_FILE))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, json).map_err(|e| FptError::io(&path, e))?;
    println!(
        "{}: best epoch {}, val AUC {:.4}, test AUC {}, learnable {} ({:.2}%), config {}",
        report.mode.name(),
        report.best_epoch,
        report.best_val_auc,
        report.test_auc.map_or("-".into(), |a| format!("{a:.4}")),
        report.learnable_params,
        100.0 * report.param_ratio,
        report.config_digest
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, split: Split, data_root: Option<PathBuf>, cache_dir: &Path, live: bool) -> Result<()> {
    let model = FptModel::from_checkpoint(Checkpoint::load(checkpoint)?);
    let mut cfg = model.cfg.clone();
    if data_root.is_some() {
        cfg.data.root = data_root;
    }
    let data = load_dataset(&cfg)?;
    let (source, identity) = features(&cfg, cache_dir, live, &[split])?;
    if identity != model.backbone_identity {
        return Err(FptError::Config("checkpoint was trained against a different backbone".into()));
    }
    let auc = evaluate(&model, &data, split, &source)?;
    println!("{} AUC {auc:.6} (config {})", split.name(), model.cfg.digest());
    Ok(())
}
