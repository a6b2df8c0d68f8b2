//! Command-line entry points. Every command prints its resolved
//! configuration and seed before doing any work.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kselect_core::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use kselect_core::{DialogueSample, Vocabulary};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DecodeConfig, Preset, TrainConfig};
use crate::corpus::{self, Format};
use crate::error::{Error, Result};
use crate::eval::{self, Selection};
use crate::model::Model;
use crate::trainer;

#[derive(Parser, Debug)]
#[command(name = "kselect", version, about = "Reward-driven multi-knowledge selection for grounded dialogue")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Evaluate(EvaluateArgs),
    /// Evaluate a checkpoint once per maximum selection count.
    SweepO(SweepArgs),
    /// Train with one ablation applied.
    Ablate(AblateArgs),
    /// Write a seeded synthetic corpus as JSONL.
    SynthData(SynthArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a preset instead of the defaults.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tensors to import over the fresh initialization (a checkpoint file).
    #[arg(long)]
    pub init_weights: Option<PathBuf>,
    /// Evaluate on this corpus after training.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum PresetArg {
    WizardSeen,
    WizardUnseen,
    Holle,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionArg {
    Policy,
    Tfidf,
    Random,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Maximum selections; the checkpoint's training value by default.
    #[arg(long)]
    pub o: Option<usize>,
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    pub beams: usize,
    #[arg(long, value_enum, default_value_t = SelectionArg::Policy)]
    pub selection: SelectionArg,
    /// Seed of the random selection baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub min: usize,
    #[arg(long, default_value_t = 12)]
    pub max: usize,
    #[arg(long, default_value_t = 1)]
    pub beams: usize,
    /// JSON array of reports.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Uniformly random selection without policy or weak losses.
    Random,
    /// No weak supervision.
    NoWeak,
    /// Alternate generator and selector updates.
    Separate,
    /// Credit every action with the episode reward.
    EpisodeReward,
}

impl AblationMode {
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            AblationMode::Random => {
                cfg.disable_rl = true;
                cfg.disable_weak = true;
            }
            AblationMode::NoWeak => cfg.disable_weak = true,
            AblationMode::Separate => cfg.separate_training = true,
            AblationMode::EpisodeReward => cfg.episode_reward = true,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: AblationMode,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    #[arg(long, default_value_t = 2)]
    pub g: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

fn print_json(out: &mut dyn Write, label: &str, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value)?;
    writeln!(out, "{label}: {text}").map_err(|e| Error::io("<stdout>", e))
}

fn print_seed(out: &mut dyn Write, seed: u64) -> Result<()> {
    writeln!(out, "seed: {seed}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_samples(data: &DataArgs, vocab: &Vocabulary, cfg: &TrainConfig, out: &mut dyn Write) -> Result<Vec<DialogueSample>> {
    let c = corpus::load_corpus(&data.data, data.format)?;
    let (samples, dropped) = corpus::tokenize_corpus(&c.samples, vocab, &cfg.lengths)?;
    writeln!(
        out,
        "data: {} samples from {} ({} skipped for empty pools, {} unusable after tokenization)",
        samples.len(),
        data.data.display(),
        c.skipped_empty_pool,
        dropped
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    if samples.is_empty() {
        return Err(kselect_core::Error::Empty("corpus").into());
    }
    Ok(samples)
}

/// Resolves the training config: preset or defaults, then the JSON file,
/// then the seed override.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = args.preset.map(preset).unwrap_or_default();
            let mut value = serde_json::to_value(&base)?;
            merge(&mut value, serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), line: e.line(), message: e.to_string() })?);
            serde_json::from_value(value).map_err(|e| Error::Parse { path: path.clone(), line: 0, message: e.to_string() })?
        }
        (None, Some(p)) => preset(p),
        (None, None) => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn preset(p: PresetArg) -> TrainConfig {
    TrainConfig::preset(match p {
        PresetArg::WizardSeen => Preset::WizardSeen,
        PresetArg::WizardUnseen => Preset::WizardUnseen,
        PresetArg::Holle => Preset::Holle,
    })
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run_train(args: &TrainArgs, mut cfg: TrainConfig, out: &mut dyn Write) -> Result<()> {
    let raw = corpus::load_corpus(&args.data.data, args.data.format)?;
    let vocab = corpus::build_vocab(&raw.samples, cfg.min_freq);
    if cfg.model.vocab == 0 {
        cfg.model.vocab = vocab.len();
    } else if cfg.model.vocab != vocab.len() {
        return Err(Error::Config(format!("model.vocab = {} but the corpus vocabulary has {}", cfg.model.vocab, vocab.len())));
    }
    cfg.validate()?;
    cfg.model.validate(&cfg.lengths)?;
    print_json(out, "config", &cfg)?;
    print_seed(out, cfg.seed)?;
    let samples = load_samples(&args.data, &vocab, &cfg, out)?;
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(path) = &args.init_weights {
        let n = checkpoint::import_weights(&mut model, checkpoint::read_tensors(path)?)?;
        writeln!(out, "imported {n} tensors from {}", path.display()).map_err(|e| Error::io("<stdout>", e))?;
    }
    let mut io = Ok(());
    let (model, reports) = trainer::train(model, &samples, &cfg, |r| {
        if io.is_ok() {
            io = print_json(out, "epoch", r);
        }
    })?;
    io?;
    let hash = checkpoint::save(&args.out, &model, &vocab, &cfg)?;
    writeln!(out, "checkpoint: {} sha256 {hash}", args.out.display()).map_err(|e| Error::io("<stdout>", e))?;
    let report = match &args.eval_data {
        Some(path) => {
            let data = DataArgs { data: path.clone(), format: args.data.format };
            let test = load_samples(&data, &vocab, &cfg, out)?;
            let decode = DecodeConfig::greedy(cfg.lengths.max_response);
            let r = eval::evaluate(&model, &test, &vocab, &cfg, &decode, Selection::Policy)?;
            print_json(out, "report", &r)?;
            Some(r)
        }
        None => None,
    };
    if let Some(r) = &report {
        write_json(&args.out.with_extension("eval.json"), r)?;
    }
    let path = args.out.with_extension("report.jsonl");
    let mut text = String::new();
    for r in &reports {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn decode_config(beams: usize, cfg: &TrainConfig) -> Result<DecodeConfig> {
    let d = if beams <= 1 { DecodeConfig::greedy(cfg.lengths.max_response) } else { DecodeConfig::beam(beams, cfg.lengths.max_response) };
    if beams == 0 {
        return Err(Error::Config("beams must be at least 1".into()));
    }
    d.validate()?;
    Ok(d)
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    checkpoint: &'a str,
    o: usize,
    decode: DecodeConfig,
    selection: SelectionArg,
    lengths: kselect_core::LengthLimits,
}

fn run_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&args.ckpt)?;
    let cfg = TrainConfig { o: args.o.unwrap_or(ck.train.o), ..ck.train.clone() };
    cfg.validate()?;
    let decode = decode_config(args.beams, &cfg)?;
    print_json(out, "config", &EvalSettings { checkpoint: &ck.hash, o: cfg.o, decode, selection: args.selection, lengths: cfg.lengths })?;
    print_seed(out, args.seed)?;
    let samples = load_samples(&args.data, &ck.vocab, &cfg, out)?;
    let selection = match args.selection {
        SelectionArg::Policy => Selection::Policy,
        SelectionArg::Tfidf => Selection::TfIdf,
        SelectionArg::Random => Selection::Random { seed: args.seed },
    };
    let report = eval::evaluate(&ck.model, &samples, &ck.vocab, &cfg, &decode, selection)?;
    print_json(out, "report", &report)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    if args.min == 0 || args.min > args.max {
        return Err(Error::Config(format!("invalid o range {}..={}", args.min, args.max)));
    }
    let ck: Checkpoint = checkpoint::load(&args.ckpt)?;
    let decode = decode_config(args.beams, &ck.train)?;
    #[derive(Serialize)]
    struct SweepSettings<'a> {
        checkpoint: &'a str,
        min: usize,
        max: usize,
        decode: DecodeConfig,
    }
    print_json(out, "config", &SweepSettings { checkpoint: &ck.hash, min: args.min, max: args.max, decode })?;
    print_seed(out, ck.train.seed)?;
    let samples = load_samples(&args.data, &ck.vocab, &ck.train, out)?;
    let mut io = Ok(());
    let reports = eval::sweep_o(&ck.model, &samples, &ck.vocab, &ck.train, &decode, args.min..=args.max, |r| {
        if io.is_ok() {
            io = print_json(out, "report", r);
        }
    })?;
    io?;
    if let Some(path) = &args.report {
        write_json(path, &reports)?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec::new(args.r, args.g, args.n, args.seed);
    print_json(out, "config", &spec)?;
    print_seed(out, args.seed)?;
    let samples = generate_synthetic_corpus(&spec)?;
    corpus::write_jsonl(&args.out, &samples)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), args.out.display()).map_err(|e| Error::io("<stdout>", e))
}

fn run_serve(args: &ServeArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&args.ckpt)?;
    #[derive(Serialize)]
    struct ServeSettings<'a> {
        checkpoint: &'a str,
        addr: SocketAddr,
        train: &'a TrainConfig,
    }
    let addr = SocketAddr::new(args.host, args.port);
    print_json(out, "config", &ServeSettings { checkpoint: &ck.hash, addr, train: &ck.train })?;
    print_seed(out, ck.train.seed)?;
    out.flush().map_err(|e| Error::io("<stdout>", e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(crate::service::serve(ck, addr)).map_err(|e| Error::io(addr.to_string(), e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve_train_config(&args)?;
            run_train(&args, cfg, out)
        }
        Command::Ablate(args) => {
            let mut cfg = resolve_train_config(&args.train)?;
            args.mode.apply(&mut cfg);
            writeln!(out, "ablation: {}", serde_json::to_string(&args.mode)?).map_err(|e| Error::io("<stdout>", e))?;
            run_train(&args.train, cfg, out)
        }
        Command::Evaluate(args) => run_evaluate(&args, out),
        Command::SweepO(args) => run_sweep(&args, out),
        Command::SynthData(args) => run_synth(&args, out),
        Command::Serve(args) => run_serve(&args, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags() {
        let mut c = TrainConfig::default();
        AblationMode::EpisodeReward.apply(&mut c);
        assert!(c.episode_reward && !c.disable_rl && !c.disable_weak && !c.separate_training);
        let mut c = TrainConfig::default();
        AblationMode::Random.apply(&mut c);
        assert!(c.disable_rl && c.disable_weak);
        let mut c = TrainConfig::default();
        AblationMode::Separate.apply(&mut c);
        assert!(c.separate_training);
        let mut c = TrainConfig::default();
        AblationMode::NoWeak.apply(&mut c);
        assert!(c.disable_weak && !c.disable_rl);
    }

    #[test]
    fn config_file_overrides_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"o": 4, "model": {"d": 32}}"#).unwrap();
        let args = TrainArgs {
            config: Some(p),
            preset: Some(PresetArg::Holle),
            data: DataArgs { data: "x".into(), format: Format::Jsonl },
            out: "y".into(),
            seed: Some(9),
            init_weights: None,
            eval_data: None,
        };
        let c = resolve_train_config(&args).unwrap();
        assert_eq!((c.o, c.lambda, c.model.d, c.model.heads, c.seed), (4, 0.7, 32, 4, 9));
        assert_eq!(c.lengths, kselect_core::LengthLimits::HOLLE);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"gama": 3}"#).unwrap();
        let args = TrainArgs {
            config: Some(p),
            preset: None,
            data: DataArgs { data: "x".into(), format: Format::Jsonl },
            out: "y".into(),
            seed: None,
            init_weights: None,
            eval_data: None,
        };
        assert!(resolve_train_config(&args).is_err());
    }
}
