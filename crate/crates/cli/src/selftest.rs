use std::process::ExitCode;
use std::time::Instant;

use fpt_core::backbone::Backbone;
use fpt_core::cache::build_cache;
use fpt_core::data::{synth_generate, Dataset, Split, SynthSpec};
use fpt_core::fusion::{ffm_forward, FusionBatch, SideNetwork, SideShape};
use fpt_core::selection::select_row;
use fpt_core::trainer::{freeze_check, FeatureSource, FptModel, Trainer};
use fpt_core::{FptConfig, TrainMode};
use fpt_numerics::{check_params, Tape, Tensor, DEFAULT_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{from_fixtures, Fixtures};

type Check = fn() -> Result<String, String>;

const CHECKS: [(&str, Check); 6] = [
    ("efficiency arithmetic", efficiency_rows),
    ("selection oracle", selection_oracle),
    ("fusion gradients", fusion_gradients),
    ("structural laws", structural_laws),
    ("freeze contract", freeze_contract),
    ("cache equivalence", cache_equivalence),
];

pub fn run() -> ExitCode {
    let mut failed = 0;
    for (name, check) in CHECKS {
        let t = Instant::now();
        let outcome = check();
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {detail} ({ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {why} ({ms} ms)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn tiny() -> (FptConfig, Dataset) {
    let mut cfg = FptConfig::desk();
    cfg.backbone.image_size_high = 32;
    cfg.backbone.layers = 2;
    cfg.side.image_size_low = 16;
    cfg.train.batch_size = 4;
    cfg.data.synth = SynthSpec {
        canvas: 32,
        samples: 40,
        ..SynthSpec::default()
    };
    let data = synth_generate(&cfg.data.synth).expect("tiny synth spec is valid");
    (cfg, data)
}

fn efficiency_rows() -> Result<String, String> {
    let f: Fixtures = toml::from_str(include_str!("../fixtures/efficiency_rows.toml")).map_err(err)?;
    let table = from_fixtures(&f).map_err(err)?;
    let gap = table.rows.iter().filter_map(|r| r.published_gap).fold(0.0, f64::max);
    if gap <= 0.02 {
        Ok(format!("{} rows, max gap {gap:.4}", table.rows.len()))
    } else {
        Err(format!("max gap {gap:.4} > 0.02"))
    }
}

fn selection_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for n in 1..=24 {
        for tenth in 1..=10 {
            let ratio = tenth as f64 / 10.0;
            // Coarse values force ties.
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..4) as f32).collect();
            let got = select_row(&scores, ratio, false).map_err(err)?.indices;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let k = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut want = order[..k.min(n)].to_vec();
            want.sort_unstable();
            if got != want {
                return Err(format!("n={n} m={ratio}: {got:?} vs {want:?}"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases"))
}

fn fusion_gradients() -> Result<String, String> {
    let shape = SideShape {
        layers: 1,
        dim: 4,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 2,
        resolution: 4,
        num_classes: 3,
        backbone_dim: 8,
        backbone_heads: 2,
        num_prompts: 2,
        shared_prompts: false,
        fusion: true,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..4u64 {
        let mut net = SideNetwork::<f64>::new(shape.clone(), seed).map_err(err)?;
        let ids = *net.fusion_ids(0).ok_or("no fusion module")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |_| rng.gen_range(-1.0..1.0);
        let feats = FusionBatch {
            layer: 0,
            keys: Tensor::from_fn([2, 2, 3, 4], &mut gen),
            values: Tensor::from_fn([2, 2, 3, 4], &mut gen),
        };
        let z = Tensor::from_fn([2, 5, 4], &mut gen);
        net.store_mut().get_mut(ids.prompts).value = Tensor::from_fn([2, 4], &mut gen).with_requires_grad(true);
        net.store_mut().get_mut(ids.f_out.weight).value = Tensor::from_fn([8, 4], &mut gen).with_requires_grad(true);
        let used = [ids.prompts, ids.f_in.weight, ids.f_in.bias, ids.f_out.weight, ids.f_out.bias];
        for (id, p) in net.store_mut().iter_mut() {
            p.value.set_requires_grad(used.contains(&id));
        }
        let report = check_params(
            net.store(),
            |tape: &mut Tape<f64>, s| {
                let zv = tape.constant(z.clone());
                let (out, _) = ffm_forward(tape, s, &ids, zv, &feats, 0, 2)
                    .map_err(|e| fpt_numerics::NumericsError::InvalidValue(e.to_string()))?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            DEFAULT_STEP,
        )
        .map_err(err)?;
        worst = worst.max(report.max_rel_error);
    }
    if worst < 1e-5 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

fn structural_laws() -> Result<String, String> {
    let (cfg, data) = tiny();
    let backbone = Backbone::new(&cfg.backbone).map_err(err)?;
    let model = FptModel::new(&cfg, &data, Some(backbone.identity())).map_err(err)?;
    let source = FeatureSource::Live(backbone);
    let refs: Vec<_> = data.train[..2].iter().collect();
    let feats = source.batch(&refs, Split::Train, &model.cfg).map_err(err)?.ok_or("no features")?;
    let x = fpt_core::trainer::side_input(&refs, model.side_resolution(), &model.side_norm, None).map_err(err)?;
    let mut tape = Tape::new();
    let out = model.side.forward(&mut tape, &x, Some(&feats), None).map_err(err)?;
    if out.lengths.windows(2).any(|w| w[0] != w[1]) {
        return Err(format!("side lengths vary: {:?}", out.lengths));
    }
    let s = feats[0].keys.shape()[2];
    let want = [2, cfg.backbone.heads, cfg.side.num_prompts, s];
    for m in &out.ca_maps {
        if tape.shape(*m) != want {
            return Err(format!("map shape {:?}, expected {want:?}", tape.shape(*m)));
        }
    }
    Ok(format!("length {} at every layer, maps {want:?}", out.lengths[0]))
}

fn freeze_contract() -> Result<String, String> {
    let (cfg, data) = tiny();
    let backbone = Backbone::new(&cfg.backbone).map_err(err)?;
    let model = FptModel::new(&cfg, &data, Some(backbone.identity())).map_err(err)?;
    let source = FeatureSource::Live(backbone);
    let mut trainer = Trainer::new(model, &data, &source).map_err(err)?;
    trainer.run_epoch(0, Some(2)).map_err(err)?;
    let report = freeze_check(&source);
    if !report.passed {
        return Err(format!("changed: {}", report.violations.join(", ")));
    }
    let missing: Vec<&str> = trainer
        .model()
        .side
        .store()
        .iter()
        .filter(|(_, p)| p.grad.is_none())
        .map(|(_, p)| p.name.as_str())
        .collect();
    if missing.is_empty() {
        Ok("backbone untouched, every side tensor has a gradient".into())
    } else {
        Err(format!("no gradient for {}", missing.join(", ")))
    }
}

fn cache_equivalence() -> Result<String, String> {
    let (cfg, data) = tiny();
    let dir = std::env::temp_dir().join(format!("fpt-selftest-{}", std::process::id()));
    let result = (|| {
        let run_cfg = cfg.for_mode(TrainMode::Fpt);
        let backbone = Backbone::new(&cfg.backbone).map_err(err)?;
        build_cache(&data.train, &[], Split::Train, &run_cfg, &backbone, &dir, true).map_err(err)?;
        let cached = FeatureSource::open_cache(&dir, &run_cfg, &backbone, &[Split::Train]).map_err(err)?;
        let id = backbone.identity();
        let live = FeatureSource::Live(backbone);
        let losses = |source: &FeatureSource| -> Result<Vec<f64>, String> {
            let model = FptModel::new(&cfg, &data, Some(id)).map_err(err)?;
            let mut t = Trainer::new(model, &data, source).map_err(err)?;
            t.run_epoch(0, Some(3)).map_err(err)
        };
        let (a, b) = (losses(&cached)?, losses(&live)?);
        if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            Ok(format!("{} identical losses", a.len()))
        } else {
            Err(format!("cached {a:?} vs live {b:?}"))
        }
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
