use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vmf_core::complexity::{
    budget_line, count_flops, layer_table, preset_reports, BudgetLine, TOKEN_SHARE_LIMIT,
};
use vmf_core::harness::{
    evaluate, gradcheck, gradcheck_config, train, Dataset, EpochRecord, Experiment, ParamGroup,
    Task,
};
use vmf_core::model::{Model, ModelConfig};
use vmf_core::Category;

/// Config keys an ablation may sweep.
const ABLATION_AXES: [&str; 7] = [
    "token_count",
    "token_mode",
    "temporal_stride",
    "downsample_position",
    "conv_type",
    "activation",
    "former_enabled",
];

#[derive(Parser, Debug)]
#[command(
    name = "vmf",
    version,
    about = "Build, count, check and train video classifiers"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of key=value lines, applied over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named starting config.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Override one config key; repeatable, last wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Initialisation seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Clip length; overrides the config's frames.
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Report::Text)]
    report: Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Report {
    Text,
    Machine,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Per-layer shapes and per-category parameters.
    Summarize,
    /// Per-category MACs and parameters for one clip.
    Flops,
    /// Token-side share of compute; the four variants unless a config is given.
    Budget,
    /// Central differences against autodiff, per parameter group.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic task.
    Train(TaskArgs),
    /// Single-clip accuracy of a checkpoint on the held-out split.
    Eval(TaskArgs),
    /// Train and score one model per value of a config key.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Parameter group to leave out; repeatable.
    #[arg(long = "freeze", value_name = "GROUP")]
    frozen: Vec<String>,
    /// Elements perturbed per tensor; 0 checks every element.
    #[arg(long, default_value_t = 0)]
    max_per_tensor: usize,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long, default_value = "flash-order")]
    task: String,
    #[arg(long, default_value_t = 384)]
    train_size: usize,
    #[arg(long, default_value_t = 256)]
    eval_size: usize,
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Checkpoint written by train, read by eval.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset cache for the training split: loaded if present, written otherwise.
    #[arg(long, value_name = "PATH")]
    train_cache: Option<PathBuf>,
    /// Dataset cache for the held-out split.
    #[arg(long, value_name = "PATH")]
    eval_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Config key to sweep.
    axis: String,
    /// Comma-separated values.
    values: String,
    #[command(flatten)]
    task: TaskArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let text = match &cli.verb {
        Verb::Summarize => summarize(&resolve(c, None)?, c)?,
        Verb::Flops => flops(&resolve(c, None)?, c)?,
        Verb::Budget => budget(c)?,
        Verb::Gradcheck(a) => run_gradcheck(c, a)?,
        Verb::Train(a) => run_train(c, a)?,
        Verb::Eval(a) => run_eval(c, a)?,
        Verb::Ablate(a) => ablate(c, a)?,
    };
    emit(c.out.as_deref(), &text)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            match stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
            {
                // A closed pipe (`vmf ... | head`) is not an error.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn has_source(c: &Common) -> bool {
    c.config.is_some() || c.preset.is_some() || !c.overrides.is_empty()
}

/// Preset, then config file, then overrides in order, then `--frames`.
/// `base` replaces the default preset when none is named.
fn resolve(c: &Common, base: Option<ModelConfig>) -> Result<ModelConfig> {
    let mut cfg = match (&c.preset, base) {
        (Some(p), _) => ModelConfig::preset(p)?,
        (None, Some(b)) => b,
        (None, None) => ModelConfig::default(),
    };
    if let Some(path) = &c.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &c.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(f) = c.frames {
        cfg.frames = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn clip_shape(cfg: &ModelConfig) -> [usize; 5] {
    [1, 3, cfg.frames, cfg.resolution, cfg.resolution]
}

fn summarize(cfg: &ModelConfig, c: &Common) -> Result<String> {
    let model = Model::<f32>::build(cfg, c.seed)?;
    let shape = clip_shape(cfg);
    let rows = layer_table(&model, &shape)?;
    let tally = model.param_tally();
    let mut s = String::new();
    if c.report == Report::Machine {
        let doc = json!({
            "input_shape": shape,
            "layers": rows,
            "categories": Category::ALL.iter().map(|&cat| json!({
                "category": cat.name(),
                "params": tally.get(cat),
            })).collect::<Vec<_>>(),
            "total_params": tally.total(),
        });
        writeln!(s, "{}", serde_json::to_string_pretty(&doc)?)?;
        return Ok(s);
    }
    writeln!(s, "input {:?}", shape)?;
    writeln!(s, "{:<22} {:<24} {:>12}", "layer", "output", "params")?;
    for r in &rows {
        writeln!(
            s,
            "{:<22} {:<24} {:>12}",
            r.name,
            format!("{:?}", r.output_shape),
            r.params
        )?;
    }
    writeln!(s)?;
    writeln!(s, "{:<22} {:>12}", "category", "params")?;
    for cat in Category::ALL {
        writeln!(s, "{:<22} {:>12}", cat.name(), tally.get(cat))?;
    }
    writeln!(s, "{:<22} {:>12}", "total", tally.total())?;
    writeln!(s, "total params {:.3}M", tally.total() as f64 / 1e6)?;
    Ok(s)
}

fn flops(cfg: &ModelConfig, c: &Common) -> Result<String> {
    let model = Model::<f32>::build(cfg, c.seed)?;
    let r = count_flops(&model, &clip_shape(cfg))?;
    Ok(match c.report {
        Report::Text => r.to_text(),
        Report::Machine => r.to_json() + "\n",
    })
}

fn budget(c: &Common) -> Result<String> {
    let lines: Vec<BudgetLine> = if has_source(c) {
        let cfg = resolve(c, None)?;
        let model = Model::<f32>::build(&cfg, c.seed)?;
        let r = count_flops(&model, &clip_shape(&cfg))?;
        vec![budget_line(c.preset.as_deref().unwrap_or("model"), &r)]
    } else {
        preset_reports(c.frames.unwrap_or(64))?
            .iter()
            .map(|(name, r)| budget_line(name, r))
            .collect()
    };
    let mut s = String::new();
    for l in &lines {
        match c.report {
            Report::Machine => writeln!(s, "{}", serde_json::to_string(l)?)?,
            Report::Text => writeln!(
                s,
                "{:<10} total_macs = {:>13}  token_side_macs = {:>11}  ratio = {:.4}  {}",
                l.name,
                l.total_macs,
                l.token_side_macs,
                l.ratio,
                if l.pass { "PASS" } else { "FAIL" }
            )?,
        }
    }
    if let Some(l) = lines.iter().find(|l| !l.pass) {
        emit(c.out.as_deref(), &s)?;
        bail!(
            "{} spends {:.4} of its compute on the token side (limit {TOKEN_SHARE_LIMIT})",
            l.name,
            l.ratio
        );
    }
    Ok(s)
}

fn run_gradcheck(c: &Common, a: &GradcheckArgs) -> Result<String> {
    let cfg = resolve(c, Some(gradcheck_config()))?;
    let frozen = a
        .frozen
        .iter()
        .map(|g| {
            ParamGroup::parse(g).with_context(|| {
                let names: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
                format!(
                    "unknown parameter group {g:?} (expected one of {})",
                    names.join(", ")
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = gradcheck(&cfg, a.tolerance, &frozen, c.seed, a.max_per_tensor)?;
    let text = match c.report {
        Report::Text => report.to_string(),
        Report::Machine => serde_json::to_string_pretty(&report)? + "\n",
    };
    if !report.pass() {
        emit(c.out.as_deref(), &text)?;
        report.into_result()?;
    }
    Ok(text)
}

fn experiment(a: &TaskArgs) -> Result<Experiment> {
    let task: Task = a.task.parse()?;
    let mut e = Experiment::new(task);
    e.train_size = a.train_size;
    e.eval_size = a.eval_size;
    e.data_seed = a.data_seed;
    e.train.epochs = a.epochs;
    e.train.batch_size = a.batch_size;
    e.train.lr = a.lr;
    e.train.momentum = a.momentum;
    e.train.weight_decay = a.weight_decay;
    Ok(e)
}

/// The resolved config with the task's class count. An explicit
/// `num_classes` that disagrees with the task is an error.
fn task_config(c: &Common, e: &Experiment) -> Result<ModelConfig> {
    let cfg = resolve(c, None)?;
    let explicit = c
        .overrides
        .iter()
        .any(|kv| kv.split('=').next().map(str::trim) == Some("num_classes"));
    if explicit && cfg.num_classes != e.task.num_classes() {
        bail!(
            "num_classes={} does not match task {} ({} classes)",
            cfg.num_classes,
            e.task.name(),
            e.task.num_classes()
        );
    }
    let cfg = e.fit_config(&cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cached(path: Option<&Path>, gen: impl FnOnce() -> vmf_core::Result<Dataset>) -> Result<Dataset> {
    match path {
        Some(p) if p.exists() => {
            Ok(Dataset::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        Some(p) => {
            let d = gen()?;
            d.save(p)
                .with_context(|| format!("writing {}", p.display()))?;
            Ok(d)
        }
        None => Ok(gen()?),
    }
}

fn check_split(d: &Dataset, e: &Experiment, cfg: &ModelConfig) -> Result<()> {
    let want = [3, cfg.frames, cfg.resolution, cfg.resolution];
    if d.task != e.task || d.clip_shape().is_some_and(|s| s != want) {
        bail!(
            "cached dataset is {} with clips {:?}, expected {} with clips {:?}",
            d.task.name(),
            d.clip_shape().unwrap_or(&[]),
            e.task.name(),
            want
        );
    }
    Ok(())
}

fn record_text(r: &EpochRecord, report: Report) -> Result<String> {
    Ok(match report {
        Report::Machine => r.to_json_line(),
        Report::Text => format!(
            "epoch {:>3}  loss {:.6}  top1 {:.4}  top5 {:.4}",
            r.epoch, r.loss, r.top1, r.top5
        ),
    })
}

fn run_train(c: &Common, a: &TaskArgs) -> Result<String> {
    let mut e = experiment(a)?;
    e.train.seed = c.seed;
    let cfg = task_config(c, &e)?;
    let train_set = cached(a.train_cache.as_deref(), || e.train_split(&cfg))?;
    let eval_set = cached(a.eval_cache.as_deref(), || e.held_out_split(&cfg))?;
    check_split(&train_set, &e, &cfg)?;
    check_split(&eval_set, &e, &cfg)?;

    let mut s = String::new();
    let header = json!({
        "task": e.task.name(),
        "train_size": train_set.len(),
        "eval_size": eval_set.len(),
        "data_seed": e.data_seed,
        "init_seed": c.seed,
        "train": e.train,
        "config": cfg.to_text().lines().collect::<Vec<_>>(),
    });
    match c.report {
        Report::Machine => writeln!(s, "{}", serde_json::to_string(&header)?)?,
        Report::Text => {
            writeln!(
                s,
                "task {}  train {}  held-out {}",
                e.task.name(),
                train_set.len(),
                eval_set.len()
            )?;
            writeln!(s, "train {}", serde_json::to_string(&e.train)?)?;
            writeln!(s, "config {}", cfg.to_text().trim_end().replace('\n', " "))?;
        }
    }
    let mut model = Model::<f32>::build(&cfg, c.seed)?;
    let mut lines = Vec::new();
    train(&mut model, &train_set, None, &e.train, |r| {
        lines.push(record_text(r, c.report))
    })?;
    for l in lines {
        writeln!(s, "{}", l?)?;
    }
    let acc = evaluate(&model, &eval_set, e.train.batch_size)?;
    match c.report {
        Report::Machine => writeln!(s, "{}", json!({"held_out": acc}))?,
        Report::Text => writeln!(
            s,
            "held-out top1 {:.4}  top5 {:.4}  n {}",
            acc.top1, acc.top5, acc.n
        )?,
    }
    if let Some(p) = &a.checkpoint {
        model
            .save(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(s)
}

fn run_eval(c: &Common, a: &TaskArgs) -> Result<String> {
    let e = experiment(a)?;
    let path = a.checkpoint.as_ref().context("eval needs --checkpoint")?;
    let model = Model::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = model.config().clone();
    if let Some(f) = c.frames {
        cfg.frames = f;
    }
    let data = cached(a.eval_cache.as_deref(), || e.held_out_split(&cfg))?;
    check_split(&data, &e, &cfg)?;
    let acc = evaluate(&model, &data, e.train.batch_size)?;
    Ok(match c.report {
        Report::Machine => format!("{}\n", json!({"task": e.task.name(), "held_out": acc})),
        Report::Text => format!(
            "{} held-out top1 {:.4}  top5 {:.4}  n {}\n",
            e.task.name(),
            acc.top1,
            acc.top5,
            acc.n
        ),
    })
}

fn ablate(c: &Common, a: &AblateArgs) -> Result<String> {
    if !ABLATION_AXES.contains(&a.axis.as_str()) {
        bail!(
            "unknown ablation axis {:?} (expected one of {})",
            a.axis,
            ABLATION_AXES.join(", ")
        );
    }
    let mut e = experiment(&a.task)?;
    e.train.seed = c.seed;
    let base = task_config(c, &e)?;
    let values: Vec<&str> = a
        .values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        bail!("no values given for axis {}", a.axis);
    }
    // Every value is checked before any training starts.
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(&a.axis, v)?;
            cfg.validate().with_context(|| format!("{}={v}", a.axis))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut s = String::new();
    if c.report == Report::Text {
        writeln!(
            s,
            "{:<14} {:>10} {:>12} {:>8}",
            a.axis, "params", "GMACs", "top1"
        )?;
    }
    for (v, cfg) in values.iter().zip(&configs) {
        let run = e.run(cfg, c.seed, |_| {})?;
        let r = count_flops(&run.model, &clip_shape(cfg))?;
        let gmacs = r.total_macs() as f64 / 1e9;
        match c.report {
            Report::Text => writeln!(
                s,
                "{:<14} {:>10} {:>12.6} {:>8.4}",
                v,
                r.total_params(),
                gmacs,
                run.accuracy.top1
            )?,
            Report::Machine => {
                let macs: serde_json::Map<String, serde_json::Value> = Category::ALL
                    .iter()
                    .map(|&cat| (cat.name().to_string(), json!(r.macs.get(cat))))
                    .collect();
                writeln!(
                    s,
                    "{}",
                    json!({
                        "axis": a.axis,
                        "value": v,
                        "params": r.total_params(),
                        "gmacs": gmacs,
                        "macs": macs,
                        "top1": run.accuracy.top1,
                        "top5": run.accuracy.top5,
                    })
                )?
            }
        }
    }
    Ok(s)
}
