use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::batch_plan;
use super::TrainError;
use crate::corpus::{derive_seed, load_manifest, CorpusRecord, DataSplit, DEFAULT_FRAME_RATE};
use crate::model::loss::kl_sum;
use crate::model::{
    backward, forward, teacher_forcing, Adam, AdamConfig, Conditioning, ModelCheckpoint, ModelConfig,
    Params, TargetDistribution, TrainingMeta,
};
use crate::prompt::{assemble_sample, render_prompt, PromptEncoding, TrainingSample};
use crate::vocab::{TokenId, Vocabulary};

/// Samples per gradient work item. Fixed so that the reduction order, and
/// hence the result, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub manifest: PathBuf,
    /// Defaults to `split.json` beside the manifest.
    pub split: Option<PathBuf>,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    /// Evaluations without validation improvement before stopping.
    pub patience: u64,
    pub seed: u64,
    pub threads: usize,
    pub frame_rate: usize,
}

impl TrainRunConfig {
    pub fn new(manifest: PathBuf, model: ModelConfig) -> Self {
        Self {
            manifest,
            split: None,
            model,
            optimizer: AdamConfig::default(),
            batch_tokens: 2048,
            max_steps: 4000,
            eval_interval: 100,
            patience: 5,
            seed: 0,
            threads: 1,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_tokens == 0 || self.max_steps == 0 || self.eval_interval == 0 || self.threads == 0 {
            return Err(TrainError::Config(
                "batch_tokens, max_steps, eval_interval and threads must be positive".into(),
            ));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("split.json")
        })
    }
}

/// A training sample laid out for teacher forcing.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub cond: Option<Conditioning>,
}

impl PreparedSample {
    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Prompt token ids and conditioning for a sample under `encoding`.
pub fn encode_prompt_for(
    vocab: &Vocabulary,
    encoding: PromptEncoding,
    sample: &TrainingSample,
) -> Result<(Vec<TokenId>, Option<Conditioning>), TrainError> {
    match encoding {
        PromptEncoding::Text => {
            let text = render_prompt(&sample.weights, sample.gender)?;
            Ok((vocab.encode_prompt(&text)?, None))
        }
        PromptEncoding::Scalar => Ok((Vec::new(), Some(Conditioning::new(&sample.weights, sample.gender)))),
    }
}

/// Rejects anything but single-emotion prompts: the model must never see a
/// mixture during training.
pub fn guard_zero_shot(samples: &[TrainingSample]) -> Result<(), TrainError> {
    for s in samples {
        if s.weights.one_hot_label().is_none() {
            return Err(TrainError::ZeroShotContamination {
                id: s.id.clone(),
                weights: s.weights.percents(),
            });
        }
    }
    Ok(())
}

pub fn prepare(
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    samples: &[TrainingSample],
) -> Result<Vec<PreparedSample>, TrainError> {
    guard_zero_shot(samples)?;
    let specials = vocab.specials();
    samples
        .iter()
        .map(|s| {
            s.check()?;
            let (prompt, cond) = encode_prompt_for(vocab, cfg.prompt_encoding, s)?;
            let seq = assemble_sample(&specials, &prompt, &s.text_ids, &s.speech_ids)?;
            let (inputs, targets, mask) = teacher_forcing(&seq, &specials);
            if inputs.len() > cfg.max_sequence_length {
                return Err(TrainError::SampleTooLong {
                    id: s.id.clone(),
                    len: inputs.len(),
                    budget: cfg.max_sequence_length,
                });
            }
            Ok(PreparedSample {
                id: s.id.clone(),
                inputs,
                targets,
                mask,
                cond,
            })
        })
        .collect()
}

/// Sum of KL over supervised positions; gradient (scaled by `scale`) is
/// accumulated into `grads` when given.
fn sample_loss(p: &Params<f32>, s: &PreparedSample, scale: f32, grads: Option<&mut [f32]>) -> f64 {
    let fwd = forward(p, &s.inputs, s.cond.as_ref()).expect("prepared samples fit the model");
    let targets = TargetDistribution::new(s.targets.clone(), p.config.vocab_size, p.config.label_smoothing);
    match grads {
        Some(g) => {
            let mut dlogits = vec![0.0f32; fwd.logits.len()];
            let sum = kl_sum(&fwd.logits, &targets, &s.mask, scale, Some(&mut dlogits));
            backward(p, &fwd, &dlogits, g);
            sum
        }
        None => kl_sum(&fwd.logits, &targets, &s.mask, scale, None),
    }
}

/// Mean loss and gradient over `batch`. Work is split into fixed chunks
/// reduced in order, so the result is independent of the thread count.
pub fn batch_gradient(p: &Params<f32>, samples: &[&PreparedSample]) -> (f64, Vec<f32>) {
    let count: usize = samples.iter().map(|s| s.supervised()).sum();
    let scale = 1.0 / count.max(1) as f32;
    let partials: Vec<(f64, Vec<f32>)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0f32; p.len()];
            let loss = chunk.iter().map(|s| sample_loss(p, s, scale, Some(&mut g))).sum();
            (loss, g)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap_or((0.0, vec![0.0; p.len()]));
    for (l, g) in iter {
        loss += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss / count.max(1) as f64, grads)
}

/// Mean KL over every supervised position of `samples`.
pub fn evaluate_loss(p: &Params<f32>, samples: &[PreparedSample]) -> f64 {
    let count: usize = samples.iter().map(|s| s.supervised()).sum();
    let sums: Vec<f64> = samples
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|s| sample_loss(p, s, 1.0, None)).sum())
        .collect();
    sums.into_iter().sum::<f64>() / count.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.train_loss, r.val_loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: TrainingLog,
}

/// In-memory training loop: seeded batching per epoch, Adam updates,
/// periodic validation with early stopping, best-validation parameters kept.
pub struct Trainer<'a> {
    pub vocab: &'a Vocabulary,
    pub config: TrainRunConfig,
    /// Called with each log row as it is recorded.
    pub progress: Option<Box<dyn Fn(&LogRow) + Sync + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(vocab: &'a Vocabulary, config: TrainRunConfig) -> Self {
        Self {
            vocab,
            config,
            progress: None,
        }
    }

    pub fn with_progress(mut self, f: impl Fn(&LogRow) + Sync + 'a) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn run(
        &self,
        train: &[TrainingSample],
        validation: &[TrainingSample],
        resume: Option<&ModelCheckpoint>,
    ) -> Result<TrainOutcome, TrainError> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.model.vocab_size != self.vocab.size() {
            return Err(TrainError::Config(format!(
                "model vocab_size {} does not match the vocabulary ({})",
                cfg.model.vocab_size,
                self.vocab.size()
            )));
        }
        if train.is_empty() {
            return Err(TrainError::Config("no training samples".into()));
        }
        let train = prepare(self.vocab, &cfg.model, train)?;
        let validation = prepare(self.vocab, &cfg.model, validation)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| self.run_prepared(&train, &validation, resume))
    }

    fn run_prepared(
        &self,
        train: &[PreparedSample],
        validation: &[PreparedSample],
        resume: Option<&ModelCheckpoint>,
    ) -> Result<TrainOutcome, TrainError> {
        let cfg = &self.config;
        let (mut params, start_step) = match resume {
            Some(ck) => {
                if ck.params.config != cfg.model {
                    return Err(TrainError::Config(
                        "resume checkpoint configuration differs from the run configuration".into(),
                    ));
                }
                (ck.params.clone(), ck.training.step)
            }
            None => (Params::<f32>::init(&cfg.model, derive_seed(cfg.seed, 0))?, 0),
        };
        let mut opt = Adam::new(cfg.optimizer.clone(), params.len());
        let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
        let lengths: Vec<usize> = train.iter().map(|s| s.inputs.len()).collect();

        let mut log = TrainingLog::default();
        let mut best: Option<(f64, Vec<f32>)> = None;
        let mut since_best = 0u64;
        let mut window = (0.0f64, 0u64);
        let mut last_train: f64;
        let mut step = start_step;
        let end = start_step + cfg.max_steps;
        let mut epoch = 0u64;
        'outer: loop {
            let plan = batch_plan(&ids, &lengths, cfg.batch_tokens, derive_seed(cfg.seed, 1 + start_step + epoch))?;
            epoch += 1;
            for batch in plan {
                let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &train[i]).collect();
                let (loss, grads) = batch_gradient(&params, &samples);
                opt.step(&mut params.data, &grads);
                step += 1;
                last_train = loss;
                window.0 += loss;
                window.1 += 1;
                let done = step >= end;
                if (step - start_step) % cfg.eval_interval == 0 || done {
                    let val = if validation.is_empty() {
                        window.0 / window.1 as f64
                    } else {
                        evaluate_loss(&params, validation)
                    };
                    let row = LogRow {
                        step,
                        train_loss: window.0 / window.1 as f64,
                        val_loss: val,
                    };
                    if let Some(f) = &self.progress {
                        f(&row);
                    }
                    log.rows.push(row);
                    window = (0.0, 0);
                    if best.as_ref().map_or(true, |(b, _)| val < *b) {
                        best = Some((val, params.data.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                    }
                    if since_best >= cfg.patience.max(1) {
                        break 'outer;
                    }
                }
                if done {
                    break 'outer;
                }
            }
        }
        let best_val = best.as_ref().map(|(v, _)| *v);
        if let Some((_, data)) = best {
            params.data = data;
        }
        let checkpoint = ModelCheckpoint::new(
            params,
            self.vocab,
            TrainingMeta {
                step,
                final_loss: Some(last_train),
                best_val_loss: best_val,
            },
        );
        Ok(TrainOutcome { checkpoint, log })
    }
}

/// Loads the manifest and split named in `config` and trains on them.
pub fn train(
    vocab: &Vocabulary,
    config: &TrainRunConfig,
    resume: Option<&ModelCheckpoint>,
    progress: Option<&(dyn Fn(&LogRow) + Sync)>,
) -> Result<TrainOutcome, TrainError> {
    let manifest = load_manifest(&config.manifest, vocab, config.frame_rate)?;
    let split = DataSplit::load(&config.split_path())?;
    let to_samples = |records: Vec<&CorpusRecord>| -> Result<Vec<TrainingSample>, TrainError> {
        records.into_iter().map(|r| Ok(r.to_sample(vocab)?)).collect()
    };
    let train_set = to_samples(manifest.select(&split.train))?;
    let validation = to_samples(manifest.select(&split.validation))?;
    let overlap = split.train.iter().find(|id| split.validation.contains(id));
    if let Some(id) = overlap {
        return Err(TrainError::Config(format!(
            "utterance {id} is in both the training and validation split"
        )));
    }
    let mut trainer = Trainer::new(vocab, config.clone());
    if let Some(f) = progress {
        trainer = trainer.with_progress(f);
    }
    trainer.run(&train_set, &validation, resume)
}
