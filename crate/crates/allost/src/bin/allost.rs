use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use allost::ablate::{run_ablation, AblationSpec};
use allost::checkpoint;
use allost::config::ExperimentConfig;
use allost::datapipe::{filter_pairs, load_examples, Example, Tokenizers};
use allost::error::{Error, Result};
use allost::manifest;
use allost::synth::{synth_generate, SynthOutput, SynthSpec};
use allost::tokenizer_file;
use allost::trainer::train;
use allost::translate::{score, translate};
use allost_core::bpe::{phone_segments, text_segments, train_bpe};
use allost_core::model::{AlloSt, FusionMode, ParameterSet};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "allost", version, about = "Speech translation with phone-feature fusion")]
struct Cli {
    /// Log level when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Learn a BPE tokenizer from one manifest field.
    BpeTrain(BpeTrainArgs),
    /// Tokenize lines from a file or stdin.
    BpeEncode(BpeEncodeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Decode a manifest with a checkpoint.
    Translate(TranslateArgs),
    /// Element-wise mean of checkpoints.
    Average(AverageArgs),
    /// Corpus BLEU of hypotheses against references, as JSON.
    Score(ScoreArgs),
    /// Train every fusion mode with raw and BPE phones over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_valid: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.4)]
    corruption_prob: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Phones,
    Target,
}

#[derive(Args)]
struct BpeTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    field: Field,
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpeEncodeArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    /// Lines are space-separated phones, or plain text for `target`.
    #[arg(long, value_enum, default_value = "phones")]
    field: Field,
    /// Reads stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print ids instead of tokens.
    #[arg(long)]
    ids: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.max_steps=500`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<(String, String)>) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set {s:?} must look like section.key=value")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        overrides.extend(extra);
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = ["none", "encoder", "decoder", "both"])]
    fusion: Option<String>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    /// Writes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AverageArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// One hypothesis per line.
    #[arg(long)]
    hyps: PathBuf,
    /// Line-parallel reference files, up to four.
    #[arg(long = "refs", conflicts_with = "manifest")]
    refs: Vec<PathBuf>,
    /// Take references from a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding train/valid/test.jsonl, as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    work_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "none,encoder,decoder,both")]
    arms: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    phone_vocab: usize,
    #[arg(long, default_value_t = 1000)]
    target_vocab: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
}

fn read_lines(path: Option<&Path>) -> Result<Vec<String>> {
    let reader: Box<dyn BufRead> = match path {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdin().lock()),
    };
    reader
        .lines()
        .collect::<io::Result<_>>()
        .map_err(|e| Error::io(path.unwrap_or(Path::new("<stdin>")), e))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

/// Reads a manifest, drops over-long pairs and loads features.
fn load_set(path: &Path, dim: usize) -> Result<Vec<Example>> {
    let (records, _) = filter_pairs(manifest::read(path)?)?;
    info!("{}: {} examples", path.display(), records.len());
    load_examples(&records, dim)
}

fn build_model(cfg: &ExperimentConfig, tok: &Tokenizers) -> Result<AlloSt> {
    let mc = cfg.model.to_model_config(tok.phones.vocab_size(), tok.target.vocab_size())?;
    Ok(AlloSt::new(mc)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_train: a.n_train,
        n_valid: a.n_valid,
        n_test: a.n_test,
        seed: a.seed,
        noise_sigma: a.noise_sigma,
        corruption_prob: a.corruption_prob,
    };
    let out = synth_generate(&spec, &a.out)?;
    println!("{}\n{}\n{}", out.train.display(), out.valid.display(), out.test.display());
    Ok(())
}

fn bpe_train(a: BpeTrainArgs) -> Result<()> {
    let records = manifest::read(&a.manifest)?;
    let tok = match a.field {
        Field::Phones => {
            let lines: Vec<&str> = records.iter().map(|r| r.phones.as_str()).collect();
            train_bpe(&phone_segments(&lines), a.vocab_size)?
        }
        Field::Target => {
            let lines: Vec<&str> = records.iter().map(|r| r.target.as_str()).collect();
            train_bpe(&text_segments(&lines), a.vocab_size)?
        }
    };
    if tok.vocab_size() < a.vocab_size {
        warn!("no pair occurs twice after {} merges; vocabulary is {}", tok.merges().len(), tok.vocab_size());
    }
    tokenizer_file::save(&a.out, &tok)?;
    println!("{} merges, vocabulary {}", tok.merges().len(), tok.vocab_size());
    Ok(())
}

fn bpe_encode(a: BpeEncodeArgs) -> Result<()> {
    let tok = tokenizer_file::load(&a.tokenizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = String::new();
    for line in read_lines(a.input.as_deref())? {
        let enc = match a.field {
            Field::Phones => tok.encode_phones(&line, a.dropout, &mut rng)?,
            Field::Target => tok.encode_text(&line, a.dropout, &mut rng)?,
        };
        let parts: Vec<String> = if a.ids {
            enc.ids.iter().map(usize::to_string).collect()
        } else {
            enc.ids
                .iter()
                .map(|&i| tok.token(i).unwrap_or("<unk>").to_string())
                .collect()
        };
        out.push_str(&parts.join(" "));
        out.push('\n');
    }
    write_out(None, &out)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(f) = a.fusion {
        extra.push(("model.fusion_mode".to_string(), format!("{f:?}")));
    }
    if let Some(d) = a.run_dir {
        extra.push(("data.run_dir".to_string(), format!("{:?}", d.display().to_string())));
    }
    let cfg = a.config.resolve(extra)?;
    let tok = Tokenizers::load(&cfg.data.phone_tokenizer, &cfg.data.target_tokenizer)?;
    let model = build_model(&cfg, &tok)?;
    let dim = cfg.model.acoustic_feature_dim;
    let train_set = load_set(&cfg.data.train_manifest, dim)?;
    let valid_set = load_set(&cfg.data.valid_manifest, dim)?;
    cfg.echo(&cfg.data.run_dir)?;
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.model.init_seed));
    let out = train(&model, params, &train_set, &valid_set, &tok, &cfg.train, &cfg.data.run_dir)?;
    for k in &out.kept {
        println!("kept {} valid_loss {:.4}", k.path.display(), k.valid_loss);
    }
    println!("averaged {}", out.averaged_path.display());
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let cfg = a.config.resolve(vec![])?;
    let tok = Tokenizers::load(&cfg.data.phone_tokenizer, &cfg.data.target_tokenizer)?;
    let model = build_model(&cfg, &tok)?;
    let params: ParameterSet<f32> = checkpoint::load(&a.checkpoint)?;
    model.check_params(&params)?;
    let examples = load_set(&a.manifest, cfg.model.acoustic_feature_dim)?;
    let hyps = translate(&model, &params, &examples, &tok, a.beam, a.max_len)?;
    let mut text = hyps.join("\n");
    text.push('\n');
    write_out(a.out.as_deref(), &text)
}

fn average(a: AverageArgs) -> Result<()> {
    let avg: ParameterSet<f32> = checkpoint::average_checkpoints(&a.checkpoints)?;
    checkpoint::save(&a.out, &avg)
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let hyps = read_lines(Some(&a.hyps))?;
    let refs: Vec<Vec<String>> = if let Some(m) = &a.manifest {
        manifest::read(m)?
            .iter()
            .map(|r| r.references().into_iter().map(String::from).collect())
            .collect()
    } else {
        if a.refs.is_empty() || a.refs.len() > 4 {
            return Err(Error::config("give one to four --refs files, or --manifest"));
        }
        let files = a
            .refs
            .iter()
            .map(|p| read_lines(Some(p)))
            .collect::<Result<Vec<_>>>()?;
        for (p, f) in a.refs.iter().zip(&files) {
            if f.len() != hyps.len() {
                return Err(Error::data(format!(
                    "{}: {} lines, hypotheses have {}",
                    p.display(),
                    f.len(),
                    hyps.len()
                )));
            }
        }
        (0..hyps.len()).map(|i| files.iter().map(|f| f[i].clone()).collect()).collect()
    };
    let s = score(&hyps, &refs)?;
    let v = json!({
        "bleu": s.bleu,
        "precisions": s.precisions,
        "bp": s.bp,
        "cand_len": s.cand_len,
        "ref_len": s.ref_len,
    });
    println!("{v}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve(vec![])?;
    let arms = a
        .arms
        .iter()
        .map(|s| s.parse::<FusionMode>().map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let dim = cfg.model.acoustic_feature_dim;
    let data = SynthOutput::in_dir(&a.data);
    let train_set = load_set(&data.train, dim)?;
    let valid_set = load_set(&data.valid, dim)?;
    let test_set = load_set(&data.test, dim)?;
    cfg.echo(&a.work_dir)?;
    let spec = AblationSpec {
        model: cfg.model,
        train: cfg.train,
        arms,
        seeds: a.seeds,
        phone_vocab: a.phone_vocab,
        target_vocab: a.target_vocab,
        beam: a.beam,
        max_len: a.max_len,
    };
    let report = run_ablation(&spec, &train_set, &valid_set, &test_set, &a.work_dir)?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BpeTrain(a) => bpe_train(a),
        Command::BpeEncode(a) => bpe_encode(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Average(a) => average(a),
        Command::Score(a) => score_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
