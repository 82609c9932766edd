//! `pue`: corpus generation, training, synthesis and evaluation.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use config::{ConfigError, ExperimentConfig};
use pue_core::corpus::{load_manifest, make_corpus, DataSplit, StyleModel};
use pue_core::eval::{
    ab_aggregate, bws_aggregate, decode_content, emotion_posterior, monotonicity_report, mos_aggregate,
    token_error_rate, BallotKind, BallotSet, EvalReport, MonotonicitySpec,
};
use pue_core::eval::monotonic::probe_text;
use pue_core::eval::report::{mean_ci, proportion_ci};
use pue_core::model::{load_checkpoint, save_checkpoint};
use pue_core::train::{mixing_grid, synthesize, train, SamplingMode, SynthRecord, TrainRunConfig};
use pue_core::{Emotion, EmotionWeights, Gender, Vocabulary};

/// Bad flags, config or input paths; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl From<ConfigError> for UsageError {
    fn from(e: ConfigError) -> Self {
        UsageError(e.0)
    }
}

#[derive(Parser)]
#[command(name = "pue", version, about = "Emotion-proportion prompts for a toy speech-token language model")]
struct Cli {
    /// Worker threads (default: the config value, else 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its train/validation/test split.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Synthesize speech tokens with chosen emotion proportions.
    Synth(SynthArgs),
    /// Score synthesized output or aggregate listening-test ballots.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Utterances per (speaker, emotion).
    #[arg(long)]
    per_emotion: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory (default: `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    mode: Option<SamplingMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "surprise")]
    primary: Emotion,
    /// Mixing sweep: secondary emotion added to the primary at each level.
    #[arg(long, conflicts_with_all = ["weights", "manifest"])]
    secondary: Option<Emotion>,
    #[arg(long, value_delimiter = ',', default_value = "0,30,60,90")]
    levels: Vec<u32>,
    /// Explicit percentages in happy,sad,neutral,angry,surprise order.
    #[arg(long, conflicts_with = "manifest")]
    weights: Option<EmotionWeights>,
    /// Resynthesize the records of a manifest split with their own prompts.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Utterances per weight vector.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Texts to speak, cycled; random texts when absent.
    #[arg(long)]
    text: Vec<String>,
    /// Fixed gender; alternates when absent.
    #[arg(long)]
    gender: Option<Gender>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Content token error rate and oracle emotion accuracy per condition.
    Ter(TerArgs),
    /// Mean estimated secondary weight across mixing levels.
    Monotonicity(MonoArgs),
    /// Aggregate AB, BWS or MOS ballots.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TerArgs {
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MonoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "surprise")]
    primary: Emotion,
    #[arg(long)]
    secondary: Emotion,
    #[arg(long, value_delimiter = ',', default_value = "0,30,60,90")]
    levels: Vec<u32>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    kind: BallotKind,
    #[arg(long)]
    ballots: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    files: Vec<String>,
}

/// Output directory bookkeeping: every file written is listed in
/// `outputs.json`, alongside the resolved config.
struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    fn report(&mut self, report: &EvalReport, stem: &str) -> Result<()> {
        self.path(&format!("{stem}.csv"));
        self.path(&format!("{stem}.json"));
        report.write(&self.dir, stem)?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.write("resolved.cfg", cfg.resolved())?;
        let mut files = self.files.clone();
        files.push("outputs.json".into());
        let m = RunManifest { command, files };
        self.write("outputs.json", serde_json::to_string_pretty(&m)? + "\n")
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p).map_err(UsageError::from)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env().map_err(UsageError::from)?;
    Ok(cfg)
}

fn apply_sampling(cfg: &mut ExperimentConfig, s: &SamplingArgs) -> Result<()> {
    if let Some(m) = s.mode {
        cfg.sampling.mode = m;
    }
    if let Some(k) = s.k {
        cfg.sampling.k = k;
    }
    if let Some(t) = s.temperature {
        cfg.sampling.temperature = t;
    }
    if let Some(n) = s.max_new_tokens {
        cfg.sampling.max_new_tokens = n;
    }
    cfg.sampling.validate().map_err(|e| usage(e.to_string()))
}

fn style_of(cfg: &ExperimentConfig) -> Result<StyleModel> {
    Ok(cfg.style().map_err(UsageError::from)?)
}

fn gen_corpus(args: GenCorpusArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.per_emotion {
        cfg.corpus.per_emotion = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if cfg.corpus.per_emotion == 0 {
        bail!(usage("--per-emotion must be at least 1"));
    }
    let vocab = Vocabulary::default();
    let style = style_of(&cfg)?;
    let (manifest, split) = make_corpus(&vocab, &style, &cfg.corpus_config()).map_err(|e| usage(e.to_string()))?;
    let mut run = RunDir::create(&args.out)?;
    manifest.write(&run.path("manifest.jsonl"))?;
    split.write(&run.path("split.json"))?;
    run.write("style.json", serde_json::to_string_pretty(&style)? + "\n")?;
    eprintln!(
        "wrote {} records ({} train, {} validation, {} test) to {}",
        manifest.records.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        args.out.display()
    );
    run.finish("gen-corpus", &cfg)
}

fn train_cmd(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = load_config(Some(&args.config))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| usage("config has no train.manifest"))?;
    if !manifest.is_file() {
        bail!(usage(format!("manifest {} does not exist", manifest.display())));
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| usage("no output directory (pass --out or set out_dir)"))?;
    let vocab = Vocabulary::default();
    let mut run_cfg = TrainRunConfig::new(manifest, cfg.model.clone());
    run_cfg.split = cfg.split.clone();
    run_cfg.optimizer = cfg.optimizer.clone();
    run_cfg.batch_tokens = cfg.batch_tokens;
    run_cfg.max_steps = cfg.max_steps;
    run_cfg.eval_interval = cfg.eval_interval;
    run_cfg.patience = cfg.patience;
    run_cfg.seed = cfg.seed;
    run_cfg.threads = cfg.threads;
    run_cfg.frame_rate = cfg.corpus.frame_rate;
    run_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p, &vocab).with_context(|| format!("cannot resume from {}", p.display()))?),
        None => None,
    };
    let progress = |r: &pue_core::train::LogRow| {
        eprintln!("step {:>6}  train {:.4}  validation {:.4}", r.step, r.train_loss, r.val_loss)
    };
    let outcome = train(&vocab, &run_cfg, resume.as_ref(), Some(&progress))?;
    let mut run = RunDir::create(&out)?;
    save_checkpoint(&outcome.checkpoint, &run.path("model.pue"))?;
    outcome.log.write_csv(&run.path("train_log.csv"))?;
    let meta = &outcome.checkpoint.training;
    eprintln!(
        "trained to step {}; best validation loss {:.4}",
        meta.step,
        meta.best_val_loss.unwrap_or(f64::NAN)
    );
    run.finish("train", &cfg)
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_sampling(&mut cfg, &args.sampling)?;
    let vocab = Vocabulary::default();
    let ckpt = load_checkpoint(&args.ckpt, &vocab).with_context(|| format!("cannot load {}", args.ckpt.display()))?;

    // (id, weights, gender, text)
    let mut jobs: Vec<(String, EmotionWeights, Gender, String)> = Vec::new();
    let gender_for = |i: usize| args.gender.unwrap_or(if i % 2 == 0 { Gender::Woman } else { Gender::Man });
    let text_for = |i: usize| -> String {
        if args.text.is_empty() {
            probe_text(&vocab, cfg.seed, i as u64, cfg.corpus.min_text_len, cfg.corpus.max_text_len)
        } else {
            args.text[i % args.text.len()].clone()
        }
    };
    if let Some(path) = &args.manifest {
        let manifest = load_manifest(path, &vocab, cfg.corpus.frame_rate).map_err(|e| usage(e.to_string()))?;
        let split = DataSplit::load(&path.parent().unwrap_or(Path::new(".")).join("split.json"))
            .map_err(|e| usage(e.to_string()))?;
        let ids = match args.split.as_str() {
            "train" => &split.train,
            "validation" => &split.validation,
            "test" => &split.test,
            other => bail!(usage(format!("unknown split `{other}`"))),
        };
        for r in manifest.select(ids) {
            jobs.push((r.id.clone(), r.prompt_weights()?, r.gender, r.text.clone()));
        }
    } else {
        let grid: Vec<(String, EmotionWeights)> = match (args.secondary, args.weights) {
            (Some(sec), _) => {
                if args.levels.iter().any(|&l| l > 100) {
                    bail!(usage("levels must be within 0..=100"));
                }
                let weights = mixing_grid(args.primary, sec, &args.levels).map_err(|e| usage(e.to_string()))?;
                args.levels
                    .iter()
                    .zip(weights)
                    .map(|(l, w)| (format!("{}+{sec}{l:03}", args.primary), w))
                    .collect()
            }
            (None, Some(w)) => {
                w.validate().map_err(|e| usage(e.to_string()))?;
                let p = w.percents();
                vec![(format!("w{}-{}-{}-{}-{}", p[0], p[1], p[2], p[3], p[4]), w)]
            }
            (None, None) => bail!(usage("give --secondary, --weights or --manifest")),
        };
        for (tag, w) in grid {
            for i in 0..args.n {
                jobs.push((format!("{tag}_{i:04}"), w, gender_for(i), text_for(i)));
            }
        }
    }
    for (_, _, _, text) in &jobs {
        vocab.tokenize_text(text).map_err(|e| usage(format!("text `{text}`: {e}")))?;
    }

    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, (id, w, g, text))| -> Result<SynthRecord> {
        let mut sampling = cfg.sampling.clone();
        sampling.seed = pue_core::corpus::derive_seed(cfg.seed, idx as u64);
        let out = synthesize(&ckpt, &vocab, w, *g, text, &sampling)?;
        Ok(SynthRecord {
            id: id.clone(),
            weights: *w,
            gender: *g,
            text: text.clone(),
            speech_ids: out.speech_ids,
            truncated: out.truncated,
        })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut run = RunDir::create(&args.out)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    run.write("synth.jsonl", lines)?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    eprintln!("wrote {} records ({truncated} truncated)", records.len());
    run.finish("synth", &cfg)
}

fn read_synth(path: &Path) -> Result<Vec<SynthRecord>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| usage(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn weights_label(w: &EmotionWeights) -> String {
    match w.one_hot_label() {
        Some(e) => e.to_string(),
        None => {
            let p = w.percents();
            format!("{},{},{},{},{}", p[0], p[1], p[2], p[3], p[4])
        }
    }
}

fn eval_ter(args: TerArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let vocab = Vocabulary::default();
    let style = style_of(&cfg)?;
    let manifest = load_manifest(&args.r#ref, &vocab, cfg.corpus.frame_rate).map_err(|e| usage(e.to_string()))?;
    let hyps = read_synth(&args.hyp)?;
    if hyps.is_empty() {
        bail!(usage(format!("{} has no records", args.hyp.display())));
    }
    // condition -> (ter values, correct count, scored count)
    let mut conditions: Vec<(String, Vec<f64>, usize, usize)> = Vec::new();
    let mut truncated = 0;
    for h in &hyps {
        let rec = manifest
            .get(&h.id)
            .ok_or_else(|| usage(format!("hypothesis {} is not in the reference manifest", h.id)))?;
        if h.truncated {
            truncated += 1;
        }
        let reference: Vec<usize> = vocab
            .tokenize_text(&rec.text)?
            .iter()
            .map(|&t| vocab.text_content(t))
            .collect::<Result<_, _>>()?;
        let hyp = decode_content(&vocab, &h.speech_ids, cfg.corpus.frame_rate)?;
        let ter = token_error_rate(&reference, &hyp)?;
        let label = weights_label(&h.weights);
        let correct = match (h.weights.one_hot_label(), h.speech_ids.is_empty()) {
            (Some(e), false) => usize::from(emotion_posterior(&vocab, &style, &h.speech_ids)?.argmax() == e),
            _ => 0,
        };
        let idx = match conditions.iter().position(|c| c.0 == label) {
            Some(i) => i,
            None => {
                conditions.push((label, Vec::new(), 0, 0));
                conditions.len() - 1
            }
        };
        let c = &mut conditions[idx];
        c.1.push(ter);
        c.2 += correct;
        c.3 += usize::from(h.weights.one_hot_label().is_some());
    }
    let mut ter_report = EvalReport::new("token_error_rate");
    let mut acc_report = EvalReport::new("oracle_emotion_accuracy");
    let all_ter: Vec<f64> = conditions.iter().flat_map(|c| c.1.iter().copied()).collect();
    let (all_c, all_n) = conditions.iter().fold((0, 0), |a, c| (a.0 + c.2, a.1 + c.3));
    println!("{:<16} {:>6} {:>16} {:>10}", "condition", "n", "TER", "accuracy");
    for (x, (label, ters, correct, scored)) in conditions.iter().chain(std::iter::once(&(
        "all".to_string(),
        all_ter.clone(),
        all_c,
        all_n,
    ))).enumerate()
    {
        let (m, h) = mean_ci(ters);
        ter_report.push(label.clone(), x as f64, m, h, ters.len());
        let acc = if *scored > 0 {
            let (p, half) = proportion_ci(*correct, *scored);
            acc_report.push(label.clone(), x as f64, p, half, *scored);
            format!("{:.2}%", 100.0 * p)
        } else {
            "-".into()
        };
        println!("{label:<16} {:>6} {:>16} {acc:>10}", ters.len(), format!("{m:.4}±{h:.4}"));
    }
    if truncated > 0 {
        println!("{truncated} hypotheses were truncated");
    }
    let mut run = RunDir::create(&args.out)?;
    run.report(&ter_report, "ter")?;
    run.report(&acc_report, "emotion_accuracy")?;
    run.finish("eval ter", &cfg)
}

fn eval_monotonicity(args: MonoArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_sampling(&mut cfg, &args.sampling)?;
    let vocab = Vocabulary::default();
    let style = style_of(&cfg)?;
    let ckpt = load_checkpoint(&args.ckpt, &vocab).with_context(|| format!("cannot load {}", args.ckpt.display()))?;
    if args.primary == args.secondary {
        bail!(usage("primary and secondary emotion must differ"));
    }
    let mut spec = MonotonicitySpec::new(args.primary, args.secondary, args.levels.clone());
    spec.n_per_level = args.n;
    spec.seeds = args.seeds.clone();
    spec.sampling = cfg.sampling.clone();
    spec.min_text_len = cfg.corpus.min_text_len;
    spec.max_text_len = cfg.corpus.max_text_len;
    let report = monotonicity_report(&ckpt, &vocab, &style, &spec).map_err(|e| match e {
        pue_core::eval::EvalError::Invalid(m) => usage(m),
        other => other.into(),
    })?;
    println!("level  pooled_mean  {}", spec.seeds.iter().map(|s| format!("seed{s:<6}")).collect::<Vec<_>>().join(" "));
    for (i, level) in spec.levels.iter().enumerate() {
        let per: Vec<String> = report.per_seed_means.iter().map(|m| format!("{:<10.4}", m[i])).collect();
        println!("{level:>5}  {:>11.4}  {}", report.pooled[i].0, per.join(" "));
    }
    println!(
        "strictly increasing: pooled={} per-seed={:?}",
        report.monotone_pooled, report.monotone_per_seed
    );
    let mut run = RunDir::create(&args.out)?;
    run.report(&report.to_eval_report(), "monotonicity")?;
    run.write("monotonicity_full.json", serde_json::to_string_pretty(&report)? + "\n")?;
    run.finish("eval monotonicity", &cfg)
}

fn eval_stats(args: StatsArgs) -> Result<()> {
    let file = fs::File::open(&args.ballots).map_err(|e| usage(format!("cannot open {}: {e}", args.ballots.display())))?;
    let ballots = BallotSet::from_csv(args.kind, file).map_err(|e| usage(e.to_string()))?;
    let (report, stem) = match args.kind {
        BallotKind::Ab => (ab_aggregate(&ballots)?, "ab"),
        BallotKind::Bws => (bws_aggregate(&ballots)?, "bws"),
        BallotKind::Mos => (mos_aggregate(&ballots)?, "mos"),
    };
    for r in &report.rows {
        match args.kind {
            BallotKind::Mos => println!("{:<20} {}", r.label, r.formatted()),
            _ => println!("{:<20} {:>7.2}%  (n={})", r.label, r.mean, r.n),
        }
    }
    let mut run = RunDir::create(&args.out)?;
    run.report(&report, stem)?;
    run.finish("eval stats", &ExperimentConfig::default())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, cli.threads),
        Command::Train(a) => train_cmd(a, cli.threads),
        Command::Synth(a) => synth_cmd(a),
        Command::Eval(EvalCommand::Ter(a)) => eval_ter(a),
        Command::Eval(EvalCommand::Monotonicity(a)) => eval_monotonicity(a),
        Command::Eval(EvalCommand::Stats(a)) => eval_stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.chain().any(|c| c.is::<UsageError>());
            eprintln!("error: {}", e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": "));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
