//! `deskvla` — single binary over the pipeline: data generation, staged
//! training, evaluation, ablations, benchmarking and plots.
//!
//! Exit codes: 0 success, 1 domain error (bad config/data/checkpoint),
//! 2 internal error. Errors print one machine-parsable stderr line.

mod config;
mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use deskvla_autodiff::{load_checkpoint, ParamSet};
use deskvla_eval::ablate::{
    run_ablation, AblationBudget, AblationEngine, AblationName, GeneralizationReport,
};
use deskvla_eval::policy::{ModelPolicy, Policy};
use deskvla_eval::suite::{run_suite, DEFAULT_TRIALS};
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::expert::ExpertConfig;
use deskvla_train::model::ModelSpec;
use deskvla_train::run::{train_stage, TrainOptions};
use deskvla_train::stage::{build_stage, Schedule};
use deskvla_world::episode::load_dataset;
use deskvla_world::gen::{gen_dataset, DatasetRecipe};
use deskvla_world::stats::NormStats;
use deskvla_world::task::TaskKind;

use config::{
    apply_overrides, load_table, parse_filter, parse_reasoning, reject_unknown, write_artifacts,
};

#[derive(Parser)]
#[command(name = "deskvla", version, about = "desk-scale vision-language-action stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demonstration dataset from a recipe.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Dotted key=value overrides applied to the config.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train one curriculum stage.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Previous-stage checkpoint (required for stages 2 and 3).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint over seeded trials.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory providing normalization stats.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated task:embodiment pairs.
        #[arg(long, default_value = "pick-place:arm3,sort-2:arm3")]
        tasks: String,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Expert architecture the checkpoint was trained with.
        #[arg(long, default_value = "small")]
        expert: String,
        /// Recolor palette entries, e.g. "6:255;128;0,0:10;10;10".
        #[arg(long)]
        recolor: Option<String>,
    },
    /// Run a named ablation experiment.
    Ablate {
        /// stages | substep | expert-size | throughput
        name: String,
        #[arg(long, default_value = "smoke")]
        budget: String,
        #[arg(long)]
        out: PathBuf,
        /// Work directory for datasets and checkpoints (defaults to out/work).
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Benchmark training throughput (stage 1 vs stage 2).
    Bench {
        #[arg(long, default_value = "micro")]
        budget: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-namespace parameter counts of a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Render a score CSV as a bar-chart PNG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, tag) = classify(&err);
            eprintln!("deskvla: error[{tag}]: {err:#}");
            code
        }
    }
}

/// Domain errors (bad input, data, checkpoints) exit 1; anything else is an
/// internal error and exits 2.
fn classify(err: &anyhow::Error) -> (ExitCode, &'static str) {
    let text = format!("{err:#}");
    let domain_markers = [
        "config",
        "unknown",
        "missing",
        "checkpoint",
        "filter",
        "stage",
        "recipe",
        "dataset",
        "empty selection",
        "task generation",
        "format",
        "vocabulary",
        "routing",
        "override",
        "budget",
        "no head",
        "graft",
    ];
    if domain_markers.iter().any(|m| text.to_lowercase().contains(m)) {
        (ExitCode::from(1), "E_DOMAIN")
    } else {
        (ExitCode::from(2), "E_INTERNAL")
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            config,
            out,
            seed,
            overrides,
        } => cmd_gen_data(&config, &out, seed, &overrides),
        Command::Train {
            stage,
            config,
            data,
            out,
            seed,
            init,
            overrides,
        } => cmd_train(stage, config.as_deref(), &data, &out, seed, init.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data,
            tasks,
            trials,
            seed,
            out,
            expert,
            recolor,
        } => cmd_eval(
            &checkpoint,
            &data,
            &tasks,
            trials,
            seed,
            &out,
            &expert,
            recolor.as_deref(),
        ),
        Command::Ablate {
            name,
            budget,
            out,
            work,
            seed,
        } => cmd_ablate(&name, &budget, &out, work.as_deref(), seed),
        Command::Bench { budget, out } => cmd_bench(&budget, &out),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::Plot { csv, out } => plot::plot_csv(&csv, &out),
    }
}

fn cmd_gen_data(config: &Path, out: &Path, seed: u64, overrides: &[String]) -> Result<()> {
    let doc = load_table(config, overrides)?;
    reject_unknown(&doc, &["name", "groups", "max_steps", "retry_cap"], "recipe")?;
    let recipe: DatasetRecipe = doc
        .clone()
        .try_into()
        .context("recipe config does not match the schema")?;
    let meta = gen_dataset(&recipe, seed, out)?;
    write_artifacts(out, "gen-data", seed, &doc)?;
    println!(
        "dataset `{}`: {} episodes across {} cells at {}",
        meta.name,
        meta.mixture.values().sum::<usize>(),
        meta.mixture.len(),
        out.display()
    );
    Ok(())
}

fn expert_config(name: &str) -> Result<ExpertConfig> {
    match name {
        "small" => Ok(ExpertConfig::small()),
        "large" => Ok(ExpertConfig::large()),
        "tiny-mlp" => Ok(ExpertConfig::tiny_mlp()),
        other => bail!("unknown expert config `{other}` (small, large, tiny-mlp)"),
    }
}

const TRAIN_KEYS: [&str; 12] = [
    "stage", "lr", "schedule", "weight_decay", "epochs", "batch", "seed", "max_steps", "data",
    "init", "model", "target",
];

fn cmd_train(
    stage: u8,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: u64,
    init: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let mut doc = match config {
        Some(path) => load_table(path, overrides)?,
        None => {
            let mut doc = toml::Table::new();
            apply_overrides(&mut doc, overrides)?;
            doc
        }
    };
    doc.insert("stage".into(), toml::Value::Integer(i64::from(stage)));
    doc.insert("seed".into(), toml::Value::Integer(seed as i64));
    reject_unknown(&doc, &TRAIN_KEYS, "train")?;
    if let Some(data_tbl) = doc.get("data").and_then(|v| v.as_table()) {
        reject_unknown(data_tbl, &["filter", "reasoning"], "train data")?;
    }
    if let Some(init_tbl) = doc.get("init").and_then(|v| v.as_table()) {
        reject_unknown(init_tbl, &["checkpoint"], "train init")?;
    }
    if let Some(model_tbl) = doc.get("model").and_then(|v| v.as_table()) {
        reject_unknown(model_tbl, &["expert"], "train model")?;
    }

    let target = doc
        .get("target")
        .and_then(|v| v.as_str())
        .unwrap_or("arm3");
    let tasks: BTreeSet<String> = ["sort-4".to_string()].into_iter().collect();
    let mut cfg = build_stage(stage, &EmbodimentId::new(target), &tasks)
        .map_err(|e| anyhow!("{e}"))?;
    if let Some(v) = doc.get("lr").and_then(toml::Value::as_float) {
        cfg.lr = v;
    }
    if let Some(v) = doc.get("schedule").and_then(|v| v.as_str()) {
        cfg.schedule = match v {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine,
            other => bail!("unknown schedule `{other}`"),
        };
    }
    if let Some(v) = doc.get("epochs").and_then(toml::Value::as_integer) {
        cfg.epochs = v as usize;
    }
    if let Some(v) = doc.get("batch").and_then(toml::Value::as_integer) {
        cfg.batch = v as usize;
    }
    if let Some(data_tbl) = doc.get("data").and_then(|v| v.as_table()) {
        if let Some(f) = data_tbl.get("filter").and_then(|v| v.as_str()) {
            cfg.filter = parse_filter(f)?;
        }
        if let Some(r) = data_tbl.get("reasoning").and_then(|v| v.as_str()) {
            cfg.reasoning = parse_reasoning(r)?;
        }
    }
    let max_steps = doc
        .get("max_steps")
        .and_then(toml::Value::as_integer)
        .map(|v| v as usize);

    let expert_name = doc
        .get("model")
        .and_then(|m| m.get("expert"))
        .and_then(|v| v.as_str())
        .unwrap_or("small");
    let spec = ModelSpec::new(expert_config(expert_name)?);

    let records = load_dataset(data)?;
    let stats = NormStats::load(data)?;

    let init_path: Option<PathBuf> = init.map(Path::to_path_buf).or_else(|| {
        doc.get("init")
            .and_then(|t| t.get("checkpoint"))
            .and_then(|v| v.as_str())
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    });
    let params = match stage {
        1 => spec.init_stage1(seed)?,
        2 => {
            let path = init_path.ok_or_else(|| {
                anyhow!("stage 2 needs the stage-1 checkpoint: pass --init <dir> or set init.checkpoint")
            })?;
            let stage1 = load_checkpoint(&path)
                .with_context(|| format!("stage-1 checkpoint at {}", path.display()))?;
            spec.init_stage2(seed, &stage1)?
        }
        3 => {
            let path = init_path.ok_or_else(|| {
                anyhow!("stage 3 needs the stage-2 checkpoint: pass --init <dir> or set init.checkpoint")
            })?;
            load_checkpoint(&path)
                .with_context(|| format!("stage-2 checkpoint at {}", path.display()))?
        }
        other => bail!("unknown stage {other}"),
    };

    let outcome = train_stage(
        &cfg,
        &spec,
        &records,
        &stats,
        params,
        seed,
        &TrainOptions {
            max_steps,
            out_dir: Some(out.to_path_buf()),
        },
    )?;
    write_artifacts(out, "train", seed, &doc)?;
    println!(
        "stage {stage}: {} steps, final loss {:.4}, {:.2} steps/sec, checkpoints at {}",
        outcome.metrics.len(),
        outcome.metrics.last().map_or(0.0, |m| m.total),
        outcome.steps_per_sec,
        out.display()
    );
    Ok(())
}

fn parse_tasks(raw: &str) -> Result<Vec<(TaskKind, EmbodimentId)>> {
    let mut out = Vec::new();
    for pair in raw.split(',') {
        let (task, emb) = pair
            .split_once(':')
            .with_context(|| format!("task spec `{pair}` is not task:embodiment"))?;
        out.push((
            TaskKind::from_name(task.trim())?,
            EmbodimentId::new(emb.trim()),
        ));
    }
    Ok(out)
}

fn parse_recolor(raw: &str) -> Result<Vec<(u8, [u8; 3])>> {
    let mut out = Vec::new();
    for entry in raw.split(',') {
        let (idx, rgb) = entry
            .split_once(':')
            .with_context(|| format!("recolor `{entry}` is not idx:r;g;b"))?;
        let parts: Vec<u8> = rgb
            .split(';')
            .map(|p| p.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("recolor `{entry}` has bad rgb"))?;
        if parts.len() != 3 {
            bail!("recolor `{entry}` needs three channels");
        }
        out.push((idx.parse::<u8>()?, [parts[0], parts[1], parts[2]]));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    tasks: &str,
    trials: usize,
    seed: u64,
    out: &Path,
    expert: &str,
    recolor: Option<&str>,
) -> Result<()> {
    let params: ParamSet = load_checkpoint(checkpoint)
        .with_context(|| format!("checkpoint at {}", checkpoint.display()))?;
    let stats = NormStats::load(data)?;
    let spec = ModelSpec::new(expert_config(expert)?);
    let policy = Policy::Model(Box::new(ModelPolicy::new(spec, params, stats)?));
    let task_list = parse_tasks(tasks)?;

    fs::create_dir_all(out)?;
    match recolor {
        None => {
            let (table, logs) = run_suite(&policy, &task_list, trials, seed, None)?;
            fs::write(out.join("scores.csv"), table.to_csv())?;
            let mut trial_log = String::new();
            for log in &logs {
                trial_log.push_str(&serde_json::to_string(log)?);
                trial_log.push('\n');
            }
            fs::write(out.join("trials.jsonl"), trial_log)?;
            print!("{}", table.to_csv());
        }
        Some(map_raw) => {
            let map = parse_recolor(map_raw)?;
            let report: GeneralizationReport = deskvla_eval::ablate::generalization_eval(
                &policy, &task_list, &map, trials, seed,
            )?;
            fs::write(out.join("scores_in_domain.csv"), report.in_domain.to_csv())?;
            fs::write(out.join("scores_recolored.csv"), report.recolored.to_csv())?;
            print!("in-domain:\n{}", report.in_domain.to_csv());
            print!("recolored:\n{}", report.recolored.to_csv());
        }
    }
    let mut doc = toml::Table::new();
    doc.insert("tasks".into(), toml::Value::String(tasks.to_string()));
    doc.insert("trials".into(), toml::Value::Integer(trials as i64));
    doc.insert(
        "checkpoint".into(),
        toml::Value::String(checkpoint.display().to_string()),
    );
    write_artifacts(out, "eval", seed, &doc)?;
    Ok(())
}

fn cmd_ablate(
    name: &str,
    budget_name: &str,
    out: &Path,
    work: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let ablation = AblationName::parse(name)?;
    let mut budget = AblationBudget::by_name(budget_name)?;
    if let Some(seed) = seed {
        budget.dataset_seed = seed;
    }
    let work_dir = work
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("work"));
    let engine = AblationEngine::prepare(budget, &work_dir)?;
    let table = run_ablation(&engine, ablation)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}.csv", table.name)), table.to_csv())?;
    fs::write(
        out.join(format!("{}.json", table.name)),
        serde_json::to_vec_pretty(&table)?,
    )?;
    let mut doc = toml::Table::new();
    doc.insert("ablation".into(), toml::Value::String(name.to_string()));
    doc.insert("budget".into(), toml::Value::String(budget_name.to_string()));
    write_artifacts(out, "ablate", engine.budget.dataset_seed, &doc)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_bench(budget_name: &str, out: &Path) -> Result<()> {
    let budget = AblationBudget::by_name(budget_name)?;
    let work = out.join("work");
    let engine = AblationEngine::prepare(budget, &work)?;
    let table = run_ablation(&engine, AblationName::Throughput)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("throughput.csv"), table.to_csv())?;
    let s1 = table.arm("stage1-expert-only").map_or(0.0, |a| a.mean);
    let s2 = table.arm("stage2-full-model").map_or(0.0, |a| a.mean);
    let mut doc = toml::Table::new();
    doc.insert("budget".into(), toml::Value::String(budget_name.to_string()));
    write_artifacts(out, "bench", engine.budget.dataset_seed, &doc)?;
    println!(
        "stage-1 {:.2} steps/sec, stage-2 {:.2} steps/sec, ratio {:.2}x (reference full-scale ratio 2.78x)",
        s1,
        s2,
        if s2 > 0.0 { s1 / s2 } else { 0.0 }
    );
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)
        .with_context(|| format!("checkpoint at {}", checkpoint.display()))?;
    let by_ns = params.count_by_namespace();
    let mut total = 0usize;
    println!("{:<12} {:>12}", "namespace", "parameters");
    for (ns, count) in &by_ns {
        println!("{ns:<12} {count:>12}");
        total += count;
    }
    println!("{:<12} {total:>12}", "total");
    Ok(())
}
