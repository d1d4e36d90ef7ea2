use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvfas::harness::ablate::{self, GridSpec};
use mvfas::harness::config::{DomainSource, DomainSpec, RunConfig};
use mvfas::harness::data::{self, ManifestRecord};
use mvfas::harness::evaluate::{self, MetricsReport};
use mvfas::harness::train::TrainOptions;
use mvfas::harness::{checkpoint, protocol, synth, train, visualize};
use mvfas::head::Variant;
use mvfas::metrics::ThresholdMode;
use mvfas::mtpa::AnchorKind;
use mvfas::Error;

#[derive(Parser)]
#[command(name = "mvfas", version, about = "Multi-view slot attention face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domains of a config as PNGs plus a manifest.
    SynthGen(SynthArgs),
    /// Train on every domain except the target.
    Train(TrainArgs),
    /// Score a domain with a checkpoint, or summarise an existing score CSV.
    Eval(EvalArgs),
    /// Train and evaluate every combination of an ablation grid.
    Ablate(AblateArgs),
    /// Export first-iteration attention maps for one image.
    Visualize(VisualizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); the built-in synthetic smoke config if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    gape: Option<OnOff>,
    #[arg(long, value_enum)]
    anchor: Option<AnchorKind>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    imax: Option<usize>,
    #[arg(long, value_enum)]
    threshold: Option<ThresholdMode>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Base seed; domain i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    checkpoint: Option<PathBuf>,
    /// Score CSV to summarise instead of running a model.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Domains to draw the evaluation set from; the checkpoint's config if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Domain to evaluate; the checkpoint's held-out domain if omitted.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    threshold: Option<ThresholdMode>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    /// Grid spec (TOML), e.g. `mvs = [true, false]`.
    #[arg(long)]
    grid: PathBuf,
    /// Run every leave-one-out scenario instead of the target only.
    #[arg(long)]
    all_targets: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::smoke(),
    })
}

fn apply(o: &Overrides, cfg: &mut RunConfig) {
    if let Some(t) = &o.target {
        cfg.target = t.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    let m = &mut cfg.model;
    if let Some(v) = o.variant {
        m.ablation.variant = v;
    }
    if let Some(g) = o.gape {
        m.ablation.gape = matches!(g, OnOff::On);
    }
    if let Some(a) = o.anchor {
        m.mtpa.anchor = a;
    }
    if let Some(v) = o.views {
        m.views = Some(v);
    }
    if let Some(i) = o.imax {
        m.mvs.i_max = i;
    }
    if let Some(t) = o.threshold {
        cfg.threshold = t;
    }
}

/// Creates `dir` and fails if any of `files` already exists without `overwrite`.
fn prepare_out(dir: &Path, files: &[&str], overwrite: bool) -> anyhow::Result<()> {
    if !overwrite {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                return Err(Error::WouldClobber(p).into());
            }
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_gen(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let out = &a.common.out;
    prepare_out(out, &["manifest.csv", "config.toml"], a.common.overwrite)?;
    let mut records = Vec::new();
    let mut domains = Vec::new();
    for (i, d) in cfg.domains.iter().enumerate() {
        let DomainSource::Synthetic(recipe) = &d.source else {
            domains.push(d.clone());
            continue;
        };
        let mut recipe = recipe.clone();
        if let Some(s) = a.seed {
            recipe.seed = s + i as u64;
        }
        let samples = synth::generate(&d.name, &recipe)?;
        for (path, label) in synth::write_domain(out, &samples)? {
            records.push(ManifestRecord { path, label: Some(label), domain: d.name.clone() });
        }
        domains.push(DomainSpec { name: d.name.clone(), source: DomainSource::Manifest("manifest.csv".into()) });
    }
    if records.is_empty() {
        bail!("config has no synthetic domains");
    }
    data::write_manifest(&out.join("manifest.csv"), &records)?;
    let mut rewritten = cfg.clone();
    rewritten.domains = domains;
    write(&out.join("config.toml"), &rewritten.to_toml()?)?;
    println!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    apply(&a.overrides, &mut cfg);
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, &["checkpoint.safetensors", "history.json", "config.toml"], a.common.overwrite)?;
    let (train_specs, _) = protocol::leave_one_out(&cfg.domains, &cfg.target)?;
    let samples = data::load_domains(&train_specs, cfg.model.backbone.image_size)?;
    let outcome = train::train(&cfg, &samples, &TrainOptions::default())?;
    checkpoint::save(
        &out.join("checkpoint.safetensors"),
        &cfg,
        &outcome.model,
        &outcome.optimizer,
        outcome.epochs,
        &outcome.history,
    )?;
    write(&out.join("history.json"), &serde_json::to_string_pretty(&outcome.history)?)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "trained {} epochs on {} samples; loss {:.4} -> {:.4}",
        outcome.epochs,
        samples.len(),
        outcome.history.first().copied().unwrap_or(f64::NAN),
        outcome.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let out = &a.out;
    if let Some(scores) = &a.scores {
        prepare_out(out, &["metrics.json", "metrics.txt"], a.overwrite)?;
        let rows = evaluate::read_scores(scores)?;
        let mode = a.threshold.unwrap_or_default();
        let name = a.target.clone().unwrap_or_else(|| scores.display().to_string());
        let report = MetricsReport::new(mode, vec![evaluate::scenario_report(&name, &rows, mode)?]);
        return emit_report(out, &report);
    }
    prepare_out(out, &["scores.csv", "metrics.json", "metrics.txt"], a.overwrite)?;
    let ckpt = checkpoint::load(a.checkpoint.as_deref().expect("clap requires one"))?;
    let domain_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    let target = a.target.clone().unwrap_or_else(|| ckpt.config.target.clone());
    let spec = domain_cfg
        .domains
        .iter()
        .find(|d| d.name == target)
        .ok_or_else(|| Error::Config(format!("domain {target:?} not in config")))?;
    let samples = data::load_domain(spec, ckpt.model.config.backbone.image_size)?;
    let rows = evaluate::score_samples(&ckpt.model, &samples)?;
    evaluate::write_scores(&out.join("scores.csv"), &rows)?;
    let mode = a.threshold.unwrap_or(ckpt.config.threshold);
    let (train_specs, test) = protocol::leave_one_out(&ckpt.config.domains, &ckpt.config.target)?;
    let name = if target == test.name {
        protocol::scenario_name(&train_specs, &test)
    } else {
        target.clone()
    };
    let report = MetricsReport::new(mode, vec![evaluate::scenario_report(&name, &rows, mode)?]);
    if let Some(note) = &report.scenarios[0].note {
        eprintln!("notice: {note}");
    }
    emit_report(out, &report)
}

fn emit_report(out: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    write(&out.join("metrics.json"), &report.to_json()?)?;
    let table = report.to_table();
    write(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    apply(&a.overrides, &mut cfg);
    cfg.validate()?;
    let text = std::fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid = GridSpec::from_toml(&text)?;
    grid.configs(&cfg)?;
    let out = &a.common.out;
    prepare_out(out, &["ablation.txt", "ablation.json"], a.common.overwrite)?;
    let targets: Vec<String> = if a.all_targets {
        cfg.domains.iter().map(|d| d.name.clone()).collect()
    } else {
        vec![cfg.target.clone()]
    };
    let rows = ablate::run_grid(&cfg, &grid, &targets, &TrainOptions::default())?;
    let table = ablate::table(&rows);
    write(&out.join("ablation.txt"), &table)?;
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}

fn visualize_cmd(a: VisualizeArgs) -> anyhow::Result<()> {
    prepare_out(&a.out, &["composite.png"], a.overwrite)?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let size = ckpt.model.config.backbone.image_size;
    let pixels = data::load_image(&a.image, size)?;
    let maps = visualize::attention_maps(&ckpt.model, &pixels)?;
    if !a.overwrite {
        for m in &maps {
            let p = a.out.join(format!("{}.txt", m.name));
            if p.exists() {
                return Err(Error::WouldClobber(p).into());
            }
        }
    }
    let v = visualize::write_visualization(&a.out, &pixels, size, &maps)?;
    println!("wrote {} grids and overlays to {}", v.grid_files.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Visualize(a) => visualize_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
