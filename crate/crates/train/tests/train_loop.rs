//! Training-loop contracts on a tiny model and dataset: identity at zero
//! epochs, loss descent, determinism, freezing and head routing.

use std::collections::BTreeSet;

use deskvla_autodiff::ParamSet;
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::expert::{ExpertConfig, ExpertKind};
use deskvla_model::stage1::Stage1Config;
use deskvla_train::model::ModelSpec;
use deskvla_train::run::{train_stage, TrainOptions};
use deskvla_train::stage::build_stage;
use deskvla_world::batch::StageFilter;
use deskvla_world::episode::EpisodeRecord;
use deskvla_world::gen::{gen_dataset, DatasetRecipe, RecipeGroup};
use deskvla_world::stats::NormStats;
use sha2::{Digest, Sha256};

fn tiny_spec() -> ModelSpec {
    let expert = ExpertConfig {
        kind: ExpertKind::Transformer,
        layers: 1,
        hidden: 32,
        heads: 2,
        horizon: 8,
        max_timestep: 20,
        time_dim: 8,
        ffn_mult: 2,
    };
    let mut spec = ModelSpec::new(expert);
    spec.stage1 = Stage1Config {
        view_res: 64,
        views: 3,
        patch: 16,
        width: 16,
        blocks: 1,
        instr_dim: 8,
        cond_width: 32,
    };
    spec.backbone.layers = 1;
    spec.backbone.width = 32;
    spec.backbone.heads = 2;
    spec.backbone.patch = 32;
    spec.backbone.queries = 2;
    spec.backbone.connector_width = 32;
    spec
}

fn tiny_dataset() -> (Vec<EpisodeRecord>, NormStats) {
    let dir = tempfile::tempdir().unwrap();
    let recipe = DatasetRecipe {
        name: "tiny".into(),
        groups: vec![
            RecipeGroup {
                embodiment: "arm3".into(),
                task: "pick-place".into(),
                episodes: 3,
            },
            RecipeGroup {
                embodiment: "arm2".into(),
                task: "pick-place".into(),
                episodes: 2,
            },
        ],
        max_steps: 600,
        retry_cap: 5,
    };
    gen_dataset(&recipe, 5, dir.path()).unwrap();
    let records = deskvla_world::episode::load_dataset(dir.path()).unwrap();
    let stats = NormStats::load(dir.path()).unwrap();
    (records, stats)
}

fn sha(params: &ParamSet, name: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(params.param_bytes(name).unwrap());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn zero_steps_returns_the_input_checkpoint() {
    let spec = tiny_spec();
    let (records, stats) = tiny_dataset();
    let cfg = build_stage(1, &EmbodimentId::new("arm3"), &BTreeSet::new()).unwrap();
    let init = spec.init_stage1(1).unwrap();
    let out = train_stage(
        &cfg,
        &spec,
        &records,
        &stats,
        init.clone(),
        9,
        &TrainOptions {
            max_steps: Some(0),
            out_dir: None,
        },
    )
    .unwrap();
    for name in init.names() {
        assert_eq!(init.get(name), out.params.get(name), "{name}");
    }
    assert!(out.metrics.is_empty());
}

#[test]
fn stage1_smoke_run_descends_and_is_deterministic() {
    let spec = tiny_spec();
    let (records, stats) = tiny_dataset();
    let mut cfg = build_stage(1, &EmbodimentId::new("arm3"), &BTreeSet::new()).unwrap();
    cfg.lr = 1e-3;
    cfg.batch = 4;
    let run = || {
        let init = spec.init_stage1(3).unwrap();
        train_stage(
            &cfg,
            &spec,
            &records,
            &stats,
            init,
            11,
            &TrainOptions {
                max_steps: Some(60),
                out_dir: None,
            },
        )
        .unwrap()
    };
    let out = run();
    assert_eq!(out.metrics.len(), 60);
    let early: f64 = out.metrics[..10].iter().map(|m| m.l_diff).sum::<f64>() / 10.0;
    let late: f64 = out.metrics[50..].iter().map(|m| m.l_diff).sum::<f64>() / 10.0;
    assert!(
        late < early,
        "diffusion loss failed to descend: {early} -> {late}"
    );
    for m in &out.metrics {
        assert!((m.total - (m.l_diff + cfg.alpha * m.l_ntp)).abs() < 1e-6);
    }

    let again = run();
    for (a, b) in out.metrics.iter().zip(&again.metrics) {
        assert_eq!(a.l_diff.to_bits(), b.l_diff.to_bits(), "step {}", a.step);
    }
    for name in out.params.names() {
        assert_eq!(
            out.params.get(name),
            again.params.get(name),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn stage2_freezes_the_visual_encoder_and_descends_ntp() {
    let spec = tiny_spec();
    let (records, stats) = tiny_dataset();
    let target = EmbodimentId::new("arm3");
    let mut cfg = build_stage(2, &target, &BTreeSet::new()).unwrap();
    cfg.lr = 1e-3;
    cfg.batch = 4;
    let s1 = spec.init_stage1(3).unwrap();
    let init = spec.init_stage2(4, &s1).unwrap();
    let patch_before = {
        let mut p = init.clone();
        p.freeze_matching(&["backbone/patch/"]);
        sha(&p, "backbone/patch/w")
    };
    let out = train_stage(
        &cfg,
        &spec,
        &records,
        &stats,
        init,
        13,
        &TrainOptions {
            max_steps: Some(50),
            out_dir: None,
        },
    )
    .unwrap();
    assert_eq!(sha(&out.params, "backbone/patch/w"), patch_before);
    // other backbone parameters did move
    let moved = out
        .params
        .names()
        .filter(|n| n.starts_with("backbone/layer0/"))
        .any(|n| sha(&out.params, n) != sha(&spec.init_stage2(4, &s1).unwrap(), n));
    assert!(moved, "trainable backbone weights must move");
    let early: f64 = out.metrics[..10].iter().map(|m| m.l_ntp).sum::<f64>() / 10.0;
    let late: f64 = out.metrics[40..].iter().map(|m| m.l_ntp).sum::<f64>() / 10.0;
    assert!(late < early, "NTP failed to descend: {early} -> {late}");
}

#[test]
fn single_embodiment_training_leaves_other_heads_bit_identical() {
    let spec = tiny_spec();
    let (records, stats) = tiny_dataset();
    let mut cfg = build_stage(1, &EmbodimentId::new("arm3"), &BTreeSet::new()).unwrap();
    cfg.lr = 1e-3;
    cfg.batch = 4;
    cfg.filter = StageFilter::Embodiment(EmbodimentId::new("arm3"));
    let init = spec.init_stage1(3).unwrap();
    let before: Vec<(String, String)> = init
        .names()
        .filter(|n| n.starts_with("head/arm2/") || n.starts_with("head/biman2x2/"))
        .map(|n| (n.to_string(), sha(&init, n)))
        .collect();
    assert!(!before.is_empty());
    let out = train_stage(
        &cfg,
        &spec,
        &records,
        &stats,
        init,
        17,
        &TrainOptions {
            max_steps: Some(20),
            out_dir: None,
        },
    )
    .unwrap();
    for (name, digest) in before {
        assert_eq!(sha(&out.params, &name), digest, "{name} moved");
    }
    // arm3's own head did move
    let init2 = spec.init_stage1(3).unwrap();
    assert_ne!(
        sha(&out.params, "head/arm3/out_out/w"),
        sha(&init2, "head/arm3/out_out/w")
    );
}

#[test]
fn throughput_requires_twenty_steps() {
    let spec = tiny_spec();
    let (records, stats) = tiny_dataset();
    let cfg = build_stage(1, &EmbodimentId::new("arm3"), &BTreeSet::new()).unwrap();
    let init = spec.init_stage1(1).unwrap();
    assert!(deskvla_train::run::throughput(&cfg, &spec, &records, &stats, init, 3, 5).is_err());
}
