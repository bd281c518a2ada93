use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args as ClapArgs, Parser, Subcommand};
use partlayout::baselines::{train_cggan, BmVae, BmVaeConfig, BsLstm, BsLstmConfig, CgGan, CgGanConfig, GumbelConfig};
use partlayout::boxvae::{BoxVae, BoxVaeConfig};
use partlayout::dataset::{split_corpus, synth_generate_with, Corpus, NormalizedInstance, Split, SplitRatios, SynthConfig};
use partlayout::eval::{generation_metrics, reconstruction_metrics};
use partlayout::labelmapvae::{LabelMapConfig, LabelMapVae};
use partlayout::pipeline::{add_part, edit_and_regenerate, generate_layout, EditCommand, Generation, GenerationRequest, LayoutModel};
use partlayout::training::{train_stage, CheckpointPaths, Stage, TrainConfig, TrainData};
use partlayout::{DType, Execution};

use crate::config::{overlay, read_value};
use crate::server::{serve, AppState};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "partlayout", version, about = "Part-based object layout generation")]
pub struct Args {
    /// Seed for every random draw; overrides config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run data-parallel work sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Train one stage or baseline.
    Train(TrainArgs),
    /// Generate a layout from the prior.
    Generate(GenerateArgs),
    /// Edit boxes of a saved generation and regenerate its masks.
    Edit(EditArgs),
    /// Add a part to a saved generation or a corpus instance.
    Addpart(AddPartArgs),
    /// Reconstruction and generation metrics.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, ClapArgs)]
pub struct SynthArgs {
    /// Synthetic corpus config (JSON or YAML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_category: Option<usize>,
    /// Leave the corpus unsplit.
    #[arg(long)]
    pub no_split: bool,
}

#[derive(Debug, ClapArgs)]
pub struct TrainArgs {
    #[arg(value_parser = parse_stage)]
    pub stage: Stage,
    /// `corpus.json` or a directory holding it.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "checkpoints")]
    pub out: PathBuf,
    /// Training config (JSON or YAML) over the stage preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Also feed the conditioning vector to the box decoder input.
    #[arg(long)]
    pub cond_concat: bool,
    /// Anneal the Gumbel temperature from 1 to 0.1.
    #[arg(long)]
    pub anneal_tau: bool,
}

#[derive(Debug, Clone, ClapArgs)]
pub struct ModelArgs {
    #[arg(long, default_value = "checkpoints")]
    pub checkpoints: PathBuf,
    /// Checkpoint tag inside `--checkpoints`.
    #[arg(long, default_value = "best")]
    pub tag: String,
    #[arg(long)]
    pub box_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub mask_ckpt: Option<PathBuf>,
}

impl ModelArgs {
    pub fn load(&self) -> CliResult<LayoutModel> {
        let default = |stage| CheckpointPaths::new(&self.checkpoints, stage, &self.tag).weights;
        let b = self.box_ckpt.clone().unwrap_or_else(|| default(Stage::BoxVae));
        let m = self.mask_ckpt.clone().unwrap_or_else(|| default(Stage::LabelMapVae));
        for p in [&b, &m] {
            if !p.exists() {
                return Err(CliError::Validation(format!("checkpoint {} not found", p.display())));
            }
        }
        Ok(LayoutModel::load(&b, &m)?)
    }
}

#[derive(Debug, ClapArgs)]
pub struct OutputArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value = "layout")]
    pub stem: String,
}

#[derive(Debug, ClapArgs)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Category name or id.
    #[arg(long)]
    pub category: String,
    /// Comma-separated part names.
    #[arg(long, value_delimiter = ',')]
    pub parts: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, ClapArgs)]
pub struct EditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// A `*.generation.json` written by `generate`.
    #[arg(long)]
    pub from: PathBuf,
    /// JSON or YAML list of edit commands.
    #[arg(long)]
    pub edits: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, ClapArgs)]
pub struct AddPartArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with_all = ["corpus", "instance"])]
    pub from: Option<PathBuf>,
    #[arg(long, requires = "instance")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub instance: Option<usize>,
    /// Part name.
    #[arg(long)]
    pub part: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, ClapArgs)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Prior generations per category.
    #[arg(long, default_value_t = 50)]
    pub generations: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, ClapArgs)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: partlayout::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

/// Parses `argv` and runs it. Usage errors exit 1, `--help` exits 0.
pub fn main_with<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(args: Args) -> CliResult<()> {
    let exec = if args.sequential { Execution::Sequential } else { Execution::default() };
    let seed = args.seed;
    match args.command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0), exec),
        Command::Train(a) => train(a, seed),
        Command::Generate(a) => generate(a, seed.unwrap_or(0)),
        Command::Edit(a) => edit(a),
        Command::Addpart(a) => addpart(a, seed.unwrap_or(0)),
        Command::Eval(a) => eval(a, seed.unwrap_or(0), exec),
        Command::Serve(a) => {
            let state = AppState::new(a.model.load()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, &a.addr))?;
            Ok(())
        }
    }
}

fn corpus_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("corpus.json")
    } else {
        p.to_path_buf()
    }
}

pub fn load_corpus(p: &Path) -> CliResult<Corpus> {
    let path = corpus_path(p);
    if !path.exists() {
        return Err(CliError::Validation(format!("corpus {} not found", path.display())));
    }
    Ok(Corpus::load(&path)?)
}

fn synth(a: SynthArgs, seed: u64, exec: Execution) -> CliResult<()> {
    let mut cfg: SynthConfig = overlay(SynthConfig::default(), a.config.as_deref())?;
    if let Some(n) = a.per_category {
        cfg.instances_per_category = n;
    }
    cfg.validate()?;
    let mut corpus = synth_generate_with(&cfg, seed, exec)?;
    if !a.no_split {
        let (split, warnings) = split_corpus(&corpus, SplitRatios::default(), seed)?;
        for w in warnings {
            log::warn!("{w}");
        }
        corpus = split;
    }
    std::fs::create_dir_all(&a.out)?;
    corpus.save(&a.out.join("corpus.json"))?;
    corpus.schemas.to_file(&a.out.join("schema.json"))?;
    println!("wrote {} instances to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = overlay(TrainConfig::preset(a.stage), a.config.as_deref())?;
    cfg.stage = a.stage;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let data = TrainData::new(&corpus)?;
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    let dt = DType::F32;
    let report = match a.stage {
        Stage::BoxVae => {
            let mut c = BoxVaeConfig::new(p, m);
            c.cond_concat = a.cond_concat;
            train_stage(&BoxVae::new(c, cfg.seed, dt)?, &data, &cfg, Some(&a.out))?
        }
        Stage::LabelMapVae => train_stage(&LabelMapVae::new(LabelMapConfig::new(p, m), cfg.seed, dt)?, &data, &cfg, Some(&a.out))?,
        Stage::BmVae => train_stage(&BmVae::new(BmVaeConfig::new(p, m), cfg.seed, dt)?, &data, &cfg, Some(&a.out))?,
        Stage::BsLstm => train_stage(&BsLstm::new(BsLstmConfig::new(p, m), cfg.seed, dt)?, &data, &cfg, Some(&a.out))?,
        Stage::CgGan => {
            let mut c = CgGanConfig::new(p, m);
            if a.anneal_tau {
                c.gumbel = GumbelConfig::annealed();
            }
            let r = train_cggan(&CgGan::new(c, cfg.seed, dt)?, &data, &cfg, Some(&a.out))?;
            println!("trained cggan for {} epochs into {}", r.metrics.len(), a.out.display());
            return Ok(());
        }
    };
    println!(
        "trained {} for {} epochs into {} (best epoch {})",
        a.stage,
        report.metrics.len(),
        a.out.display(),
        report.best_epoch
    );
    Ok(())
}

fn write_generation(g: &Generation, out: &OutputArgs) -> CliResult<()> {
    g.layout.export(&out.out, &out.stem)?;
    let path = out.out.join(format!("{}.generation.json", out.stem));
    std::fs::write(&path, serde_json::to_vec(g).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    for n in &g.notices {
        log::warn!("{n}");
    }
    println!("{}", serde_json::to_string(&g.layout.sidecar()).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}

fn read_generation(path: &Path) -> CliResult<Generation> {
    serde_json::from_value(read_value(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn generate(a: GenerateArgs, seed: u64) -> CliResult<()> {
    let model = a.model.load()?;
    let names: Vec<&str> = a.parts.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    let req = GenerationRequest::from_names(&model.schemas, &a.category, &names, seed)?;
    let g = generate_layout(&model, &req)?;
    for k in &g.forced {
        log::info!("part {k} forced present");
    }
    write_generation(&g, &a.output)
}

fn edit(a: EditArgs) -> CliResult<()> {
    let model = a.model.load()?;
    let prev = read_generation(&a.from)?;
    let edits: Vec<EditCommand> = match &a.edits {
        Some(p) => serde_json::from_value(read_value(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    write_generation(&edit_and_regenerate(&model, &prev, &edits)?, &a.output)
}

fn addpart(a: AddPartArgs, seed: u64) -> CliResult<()> {
    let model = a.model.load()?;
    let inst: NormalizedInstance = match (&a.from, &a.corpus, a.instance) {
        (Some(p), _, _) => read_generation(p)?.instance(model.schemas.p_max),
        (None, Some(c), Some(i)) => {
            let corpus = load_corpus(c)?;
            corpus
                .instances
                .get(i)
                .cloned()
                .ok_or_else(|| CliError::Validation(format!("corpus has {} instances, no index {i}", corpus.len())))?
        }
        _ => return Err(CliError::Validation("give --from or --corpus with --instance".into())),
    };
    let schema = model.schemas.get(inst.category_id)?;
    let part = schema
        .part_index(&a.part)
        .ok_or_else(|| CliError::Validation(format!("category {} has no part {:?}", schema.category_name, a.part)))?;
    write_generation(&add_part(&model, &inst, part, seed)?, &a.output)
}

fn eval(a: EvalArgs, seed: u64, exec: Execution) -> CliResult<()> {
    let model = a.model.load()?;
    let corpus = load_corpus(&a.corpus)?;
    if corpus.schemas.hash() != model.schemas.hash() {
        return Err(CliError::Validation("corpus schema differs from the checkpoint schema".into()));
    }
    let idx = corpus.indices(a.split);
    let recon = reconstruction_metrics(&model.boxvae, &corpus, &idx, a.batch_size, exec)?;
    let mut reqs = Vec::new();
    for schema in &model.schemas.categories {
        for i in 0..a.generations {
            let parts = (0..schema.num_parts()).collect();
            reqs.push(GenerationRequest::new(schema.category_id, parts, seed.wrapping_add(i as u64)));
        }
    }
    let gen = generation_metrics(&model, &reqs, exec)?;
    let out = serde_json::json!({ "reconstruction": recon, "generation": gen });
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}
