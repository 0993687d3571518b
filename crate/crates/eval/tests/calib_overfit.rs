use deskvla_autodiff::rng::{child_seed, DetRng};
use deskvla_eval::policy::{decide_chunk, ModelPolicy};
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::expert::ExpertConfig;
use deskvla_train::model::ModelSpec;
use deskvla_train::run::{train_stage, TrainOptions};
use deskvla_train::stage::build_stage;
use deskvla_world::batch::ReasoningSource;
use deskvla_world::episode::load_dataset;
use deskvla_world::gen::{gen_dataset, DatasetRecipe, RecipeGroup};
use deskvla_world::kin::step_env;
use deskvla_world::raster::default_palette;
use deskvla_world::stats::NormStats;
use deskvla_world::task::{sample_task, TaskKind};

#[test]
#[ignore]
fn overfit_probe() {
    let dir = std::path::Path::new("/root/calib/overfit1");
    if !dir.join("manifest.json").exists() {
        let recipe = DatasetRecipe {
            name: "pp".into(),
            groups: vec![RecipeGroup { embodiment: "arm3".into(), task: "pick-place".into(), episodes: 30 }],
            max_steps: 600, retry_cap: 5,
        };
        gen_dataset(&recipe, 500, dir).unwrap();
    }
    let records = load_dataset(dir).unwrap();
    let stats = NormStats::load(dir).unwrap();
    let spec = ModelSpec::new(ExpertConfig::small());
    let mut cfg = build_stage(1, &EmbodimentId::new("arm3"), &Default::default()).unwrap();
    cfg.lr = 1e-3;
    cfg.batch = 16;
    cfg.reasoning = ReasoningSource::DirectPrompt;
    let ckpt_dir = std::path::Path::new("/root/calib/overfit_ckpt");
    let t0 = std::time::Instant::now();
    let params = if ckpt_dir.join("manifest.json").exists() {
        deskvla_autodiff::load_checkpoint(ckpt_dir).unwrap()
    } else {
        let init = spec.init_stage1(3).unwrap();
        let out = train_stage(&cfg, &spec, &records, &stats, init, 21,
            &TrainOptions { max_steps: Some(3000), out_dir: None }).unwrap();
        for m in out.metrics.iter().step_by(100) {
            println!("step {:4}  l_diff {:.4}", m.step, m.l_diff);
        }
        println!("last l_diff {:.4}  ({:.0}s)", out.metrics.last().unwrap().l_diff, t0.elapsed().as_secs_f64());
        deskvla_autodiff::save_checkpoint(&out.params, ckpt_dir).unwrap();
        out.params
    };
    let policy = ModelPolicy::new(spec.clone(), params, stats.clone()).unwrap();
    let emb_id = EmbodimentId::new("arm3");
    let scene_seed: u64 = std::env::var("SCENE_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(child_seed(900, "scene", 0));
    let inst = sample_task(TaskKind::PickPlace, &emb_id, &mut DetRng::new(scene_seed)).unwrap();
    let instr_ids = spec.vocab.encode(&inst.instruction).unwrap();
    let mut scene = inst.scene.clone();
    let mut emb = inst.embodiment.clone();
    let palette = default_palette();
    let mut rng = DetRng::new(42);
    let obj = (scene.objects[0].x, scene.objects[0].y);
    println!("object at ({:.2},{:.2}), zone {}", obj.0, obj.1, inst.jobs[0].zone);
    // quick conditioning discrimination check
    {
        use deskvla_world::raster::render_views;
        let inst2 = sample_task(TaskKind::PickPlace, &emb_id, &mut DetRng::new(child_seed(901, "scene", 0))).unwrap();
        let v1: Vec<deskvla_model::image::ObsImage> = render_views(&inst.scene, &inst.embodiment).iter().map(|i| i.to_obs(&palette)).collect();
        let v2: Vec<deskvla_model::image::ObsImage> = render_views(&inst2.scene, &inst2.embodiment).iter().map(|i| i.to_obs(&palette)).collect();
        let c1 = deskvla_model::stage1::encode_obs_stage1(&policy.spec.stage1, &policy.params, &v1, &instr_ids, deskvla_autodiff::Tensor::vector(vec![0.0;6])).unwrap();
        let c2 = deskvla_model::stage1::encode_obs_stage1(&policy.spec.stage1, &policy.params, &v2, &instr_ids, deskvla_autodiff::Tensor::vector(vec![0.0;6])).unwrap();
        let diff: f32 = c1.obs_tokens.data().iter().zip(c2.obs_tokens.data()).map(|(a,b)| (a-b)*(a-b)).sum::<f32>().sqrt();
        let norm: f32 = c1.obs_tokens.data().iter().map(|a| a*a).sum::<f32>().sqrt();
        println!("obs diff {:.4} vs norm {:.4}", diff, norm);
    }
    for chunk_i in 0..12 {
        let d = decide_chunk(&policy, &scene, &emb, &instr_ids, &palette, &mut rng).unwrap();
        for a in &d.actions { step_env(&mut scene, &mut emb, a); }
        let (ex, ey) = emb.arms[0].ee();
        let o = &scene.objects[0];
        println!("chunk {:2}: ee=({:.2},{:.2}) obj=({:.2},{:.2}) grip={:.2} grasped={:?} in_zone={}",
            chunk_i, ex, ey, o.x, o.y, emb.arms[0].gripper, emb.arms[0].grasped,
            scene.object_in_zone(inst.jobs[0].object, &inst.jobs[0].zone));
    }
    // proper scored suite
    use deskvla_eval::policy::Policy;
    use deskvla_eval::suite::run_suite;
    let pol = Policy::Model(Box::new(policy));
    let tasks = vec![(TaskKind::PickPlace, emb_id.clone())];
    let (table, _) = run_suite(&pol, &tasks, 6, 900, None).unwrap();
    println!("pick-place mean over 6 trials: {:.3}", table.rows[0].mean_normalized);
}
