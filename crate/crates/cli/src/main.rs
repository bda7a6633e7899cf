use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use flexmol::confeval::{evaluate, generate_conformers, pair_by_id, EvalConfig};
use flexmol::featurize::{featurize, FeatureCache};
use flexmol::finetune::{finetune, FinetuneConfig, Task};
use flexmol::gradcheck::{chain_molecule, gradcheck_config, stage1_gradcheck};
use flexmol::model::{Branch, ModelConfig};
use flexmol::molio::{parse_jsonl, parse_sdf_v2000, write_jsonl, DatasetManifest, Molecule};
use flexmol::pretrain::{
    apply_kv, evaluate_stage1, parse_kv, run_stage1, run_stage2, Checkpoint, RunOptions, TrainConfig,
};

#[derive(Parser)]
#[command(name = "flexmol", version, about = "Unified 2D/3D molecular pre-training toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value configuration file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random number consumer.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    /// Serial execution and wallclock-free metric logs.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an SDF (V2000) or JSONL file to JSONL with a manifest sidecar.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Featurize every record, filling the cache when one is configured.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        /// Cache root; defaults to FLEXMOL_CACHE_DIR.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Paired pre-training from a fresh model.
    #[command(name = "pretrain-stage1")]
    PretrainStage1 {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Single-modality continual training from a Stage 1 checkpoint.
    #[command(name = "pretrain-stage2")]
    PretrainStage2 {
        #[command(flatten)]
        run: RunArgs,
        /// Stage 1 checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        modality: Branch,
    },
    /// Supervised training of a pooled linear head.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        modality: Option<Branch>,
        #[arg(long)]
        freeze_backbone: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Generate conformers for each record's bond graph.
    #[command(name = "gen-conf")]
    GenConf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Conformers per molecule, as a multiple of its reference count.
        #[arg(long, default_value_t = 2)]
        factor: usize,
        /// Fixed count per molecule; required for records without conformers.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Coverage and matching scores of generated against reference sets.
    #[command(name = "eval-conf")]
    EvalConf {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        /// Include hydrogens in the RMSD.
        #[arg(long)]
        all_atoms: bool,
    },
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        atoms: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print a checkpoint's header as JSON.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at every epoch boundary.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics log (JSON lines).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report masked-atom, SPD and retrieval accuracy on the paired records
    /// after training.
    #[arg(long)]
    evaluate: bool,
}

enum Failure {
    User(String),
    Runtime(String),
}

impl From<flexmol::Error> for Failure {
    fn from(e: flexmol::Error) -> Self {
        let not_found = matches!(&e, flexmol::Error::Io { source, .. } if source.kind() == ErrorKind::NotFound);
        if e.is_user_error() || not_found {
            Failure::User(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn emit(g: &Global, value: &Value, table: Option<String>) {
    match (g.pretty, table) {
        (true, Some(t)) => print!("{t}"),
        (true, None) => println!("{}", serde_json::to_string_pretty(value).expect("JSON value")),
        (false, _) => println!("{value}"),
    }
}

fn load_molecules(path: &Path) -> CliResult<Vec<Molecule>> {
    let is_sdf = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("sdf") || e.eq_ignore_ascii_case("mol"));
    let mols = if is_sdf { parse_sdf_v2000(path)? } else { parse_jsonl(path)? };
    let sidecar = DatasetManifest::sidecar_path(path);
    if !is_sdf && sidecar.exists() {
        DatasetManifest::load(&sidecar)?.verify(&mols)?;
    }
    Ok(mols)
}

fn config_pairs(g: &Global) -> CliResult<Vec<(String, String)>> {
    match &g.config {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::User(format!("cannot read config {}: {e}", p.display())))?;
            Ok(parse_kv(&text, p)?)
        }
    }
}

fn split_override(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Failure::User(format!("override '{s}' is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn train_configs(g: &Global, run: &RunArgs, stage: u8) -> CliResult<(TrainConfig, ModelConfig)> {
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::default();
    let mut pairs = config_pairs(g)?;
    for s in &run.overrides {
        pairs.push(split_override(s)?);
    }
    apply_kv(&pairs, &mut train, &mut model)?;
    if let Some(v) = run.lr {
        train.lr = v;
    }
    if let Some(v) = run.epochs {
        match stage {
            1 => train.epochs_stage1 = v,
            _ => train.epochs_stage2 = v,
        }
    }
    if let Some(v) = run.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = run.max_steps {
        train.max_steps = Some(v);
    }
    if let Some(v) = g.seed {
        train.seed = v;
    }
    if g.deterministic {
        train.deterministic = true;
    }
    train.validate()?;
    model.validate()?;
    Ok((train, model))
}

fn run_options(run: &RunArgs) -> RunOptions {
    RunOptions {
        metrics_path: run.metrics.clone(),
        checkpoint_path: Some(run.out.clone()),
        cache: FeatureCache::from_env(),
    }
}

fn training_summary(outcome: &flexmol::pretrain::TrainOutcome, out: &Path) -> Value {
    let first = outcome.reports.first().map(|r| r.total);
    let last = outcome.reports.last();
    json!({
        "stage": outcome.checkpoint.stage,
        "steps": outcome.checkpoint.step,
        "initial_total": first,
        "final_total": last.map(|r| r.total),
        "final_terms": last.map(|r| r.terms.clone()),
        "checkpoint": out.display().to_string(),
    })
}

fn run(cli: Cli) -> CliResult<u8> {
    let g = &cli.global;
    let seed = g.seed.unwrap_or(0);
    match &cli.command {
        Command::Convert { input, out } => {
            let mols = load_molecules(input)?;
            for m in &mols {
                m.validate()?;
            }
            write_jsonl(out, &mols)?;
            let manifest = DatasetManifest::describe(out, &mols);
            let sidecar = DatasetManifest::sidecar_path(out);
            manifest.save(&sidecar)?;
            emit(
                g,
                &json!({
                    "records": mols.len(),
                    "modality": manifest.modality,
                    "out": out.display().to_string(),
                    "manifest": sidecar.display().to_string(),
                }),
                None,
            );
        }
        Command::Featurize { data, cache_dir } => {
            let mols = load_molecules(data)?;
            let (_, model) = {
                let mut t = TrainConfig::default();
                let mut m = ModelConfig::default();
                apply_kv(&config_pairs(g)?, &mut t, &mut m)?;
                (t, m)
            };
            model.features.validate()?;
            let cache = cache_dir.clone().map(FeatureCache::new).or_else(FeatureCache::from_env);
            let (mut records, mut atoms, mut pairs_2d, mut pairs_3d) = (0usize, 0usize, 0usize, 0usize);
            for m in &mols {
                let count = m.conformers.as_ref().map_or(1, |c| c.len().max(1));
                for k in 0..count {
                    let f = match &cache {
                        Some(c) => c.load_or_compute(m, &model.features, k)?,
                        None => featurize(m, &model.features, k)?,
                    };
                    records += 1;
                    atoms += f.n_atoms();
                    pairs_2d += usize::from(f.f2d.is_some());
                    pairs_3d += usize::from(f.f3d.is_some());
                }
            }
            emit(
                g,
                &json!({
                    "molecules": mols.len(),
                    "records": records,
                    "atoms": atoms,
                    "with_2d": pairs_2d,
                    "with_3d": pairs_3d,
                    "feature_config_hash": model.features.hash(),
                    "cache": cache.as_ref().map(|c| c.root().display().to_string()),
                }),
                None,
            );
        }
        Command::PretrainStage1 { run } => {
            let (train, model) = train_configs(g, run, 1)?;
            let mols = load_molecules(&run.data)?;
            let outcome = run_stage1(&mols, &model, &train, &run_options(run))?;
            let mut summary = training_summary(&outcome, &run.out);
            if run.evaluate {
                let m = evaluate_stage1(&outcome.checkpoint.params, &model, &mols, &train, seed)?;
                summary["evaluation"] = json!(m);
            }
            emit(g, &summary, None);
        }
        Command::PretrainStage2 { run, init, modality } => {
            let init = init.as_ref().ok_or_else(|| {
                Failure::User(
                    "pretrain-stage2 continues from a Stage 1 checkpoint; pass it with --init <path> \
                     (produce one with pretrain-stage1)"
                        .into(),
                )
            })?;
            let ckpt = Checkpoint::load(init)?;
            let (train, _) = train_configs(g, run, 2)?;
            let mols = load_molecules(&run.data)?;
            let outcome = run_stage2(&mols, &ckpt, *modality, &train, &run_options(run))?;
            let mut summary = training_summary(&outcome, &run.out);
            summary["modality"] = json!(modality);
            if run.evaluate {
                let paired: Vec<Molecule> = mols.iter().filter(|m| m.has_2d() && m.has_3d()).cloned().collect();
                if !paired.is_empty() {
                    let m = evaluate_stage1(&outcome.checkpoint.params, &ckpt.config, &paired, &train, seed)?;
                    summary["evaluation"] = json!(m);
                }
            }
            emit(g, &summary, None);
        }
        Command::Finetune {
            data,
            init,
            task,
            modality,
            freeze_backbone,
            lr,
            epochs,
            batch_size,
            max_steps,
        } => {
            let mut cfg = FinetuneConfig::default();
            for (k, v) in config_pairs(g)? {
                if !cfg.set(&k, &v)? {
                    return Err(Failure::User(format!("unknown fine-tuning configuration key '{k}'")));
                }
            }
            if let Some(v) = task {
                cfg.task = *v;
            }
            if let Some(v) = modality {
                cfg.branch = *v;
            }
            if *freeze_backbone {
                cfg.freeze_backbone = true;
            }
            if let Some(v) = lr {
                cfg.lr = *v;
            }
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = *v;
            }
            if let Some(v) = max_steps {
                cfg.max_steps = Some(*v);
            }
            if let Some(v) = g.seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let ckpt = Checkpoint::load(init)?;
            let mols = load_molecules(data)?;
            let outcome = finetune(&mols, &ckpt, &cfg)?;
            let r = &outcome.report;
            let table = format!(
                "steps {}\ninitial loss {:.6}\nfinal loss {:.6}\n{} {:.6}\n",
                r.steps, r.initial_loss, r.final_loss, r.metric_name, r.metric
            );
            emit(g, &json!({"config": cfg, "report": r}), Some(table));
        }
        Command::GenConf {
            data,
            init,
            out,
            factor,
            count,
        } => {
            let ckpt = Checkpoint::load(init)?;
            let mols = load_molecules(data)?;
            let mut generated = Vec::with_capacity(mols.len());
            let mut total = 0;
            for (i, m) in mols.iter().enumerate() {
                let n = match (count, m.conformers.as_ref()) {
                    (Some(c), _) => *c,
                    (None, Some(c)) if !c.is_empty() => factor * c.len(),
                    (None, _) => {
                        return Err(Failure::User(format!(
                            "record '{}' has no reference conformers; pass --count",
                            m.id
                        )))
                    }
                };
                if n == 0 {
                    return Err(Failure::User("conformer count must be positive".into()));
                }
                let set = generate_conformers(m, &ckpt, n, seed.wrapping_add((i as u64) << 32))?;
                total += set.conformers.len();
                generated.push(set.to_molecule(m));
            }
            write_jsonl(out, &generated)?;
            emit(
                g,
                &json!({
                    "molecules": generated.len(),
                    "conformers": total,
                    "out": out.display().to_string(),
                }),
                None,
            );
        }
        Command::EvalConf {
            gen,
            reference,
            delta,
            all_atoms,
        } => {
            let cfg = EvalConfig {
                delta: *delta,
                heavy_atoms_only: !all_atoms,
            };
            cfg.validate()?;
            let generated = load_molecules(gen)?;
            let refs = load_molecules(reference)?;
            let report = evaluate(&pair_by_id(&generated, &refs)?, &cfg)?;
            emit(g, &json!(report), Some(report.to_table()));
        }
        Command::Gradcheck {
            atoms,
            dim,
            step,
            tolerance,
        } => {
            if *dim == 0 || dim % 2 != 0 {
                return Err(Failure::User(format!("--dim {dim} must be a positive multiple of the 2 heads")));
            }
            if !(*step > 0.0) {
                return Err(Failure::User("--step must be positive".into()));
            }
            let cfg = gradcheck_config(*dim);
            let mol = chain_molecule(*atoms, seed)?;
            let report = stage1_gradcheck(&mol, &cfg, seed, *step)?;
            let pass = report.max_rel_error < *tolerance;
            let table = format!(
                "max relative error {:.3e} ({})\nscalars checked {}\n{}\n",
                report.max_rel_error,
                report.worst_tensor,
                report.scalars_checked,
                if pass { "PASS" } else { "FAIL" }
            );
            let mut value = json!(report);
            value["tolerance"] = json!(tolerance);
            value["pass"] = json!(pass);
                        emit(g, &value, Some(table));
            if !pass {
                eprintln!(
                    "error: max relative gradient error {:.3e} is not below {tolerance:e}",
                    report.max_rel_error
                );
                return Ok(2);
            }
        }
        Command::Inspect { checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let value = ckpt.describe();
            if g.pretty {
                println!("{}", serde_json::to_string_pretty(&value).expect("JSON value"));
            } else {
                println!("{value}");
            }
        }
    }
    Ok(0)
}
