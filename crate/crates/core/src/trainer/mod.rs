//! Combined objective, training loop, held-out evaluation and ablations.

mod objective;
mod optim;

pub use objective::{example_graph, probe, ExampleGraph, PreparedExample, Probe};
pub use optim::{clip_global_norm, Adam, AdamConfig};

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn_shaping::ATTENTION_BUDGET;
use crate::autograd::Tape;
use crate::backbone::{BackboneConfig, ModelState, ParamGrads};
use crate::corpus::Example;
use crate::decoder::{generate, DecodeConfig, GenerationRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EntailmentOracle, FactContainment, MetricsReport, Scores};
use crate::fusion::{build_citation_set_with, CitationSource};
use crate::heads::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Citation tokens keep their own table embeddings everywhere.
    pub disable_fusion: bool,
    /// Attention loss is still computed and logged but weighted by zero.
    pub disable_attn: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub attn_budget: f64,
    /// Steps between checkpoint callbacks; 0 means only at the end.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.1,
            gamma: 0.1,
            learning_rate: 1e-4,
            n_steps: 3000,
            batch_size: 8,
            seed: 0,
            disable_fusion: false,
            disable_attn: false,
            clip_norm: 1.0,
            attn_budget: ATTENTION_BUDGET,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("clip_norm", self.clip_norm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.attn_budget > 0.0 && self.attn_budget.is_finite()) {
            return Err(Error::InvalidConfig("attn_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: if self.disable_attn { 0.0 } else { self.gamma },
        }
    }

    pub fn citation_source(&self) -> CitationSource {
        if self.disable_fusion {
            CitationSource::Symbolic
        } else {
            CitationSource::Contextual
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Hash with the ablation flags cleared; equal across ablation variants.
    pub fn base_hash(&self) -> String {
        TrainConfig {
            disable_fusion: false,
            disable_attn: false,
            ..self.clone()
        }
        .hash()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_default: f64,
    pub l_citation: f64,
    pub l_router: f64,
    pub l_attn: f64,
}

pub fn combined_loss(c: LossComponents, w: LossWeights) -> Result<LossBreakdown> {
    if ![c.l_default, c.l_citation, c.l_router, c.l_attn].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteLoss { step: None });
    }
    Ok(LossBreakdown {
        l_default: c.l_default,
        l_citation: c.l_citation,
        l_router: c.l_router,
        l_attn: c.l_attn,
        total: c.l_default + w.alpha * c.l_citation + w.beta * c.l_router + w.gamma * c.l_attn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub base_config_hash: String,
    pub weights: LossWeights,
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header {
        seed: u64,
        config_hash: String,
        base_config_hash: String,
        weights: LossWeights,
    },
    Step(StepRecord),
    Footer {
        wall_clock_secs: f64,
    },
}

impl TrainLog {
    /// One JSON object per line: a header, one line per step, a footer.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n").map_err(|e| Error::io("<train log>", e))
        };
        line(&LogLine::Header {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            base_config_hash: self.base_config_hash.clone(),
            weights: self.weights,
        })?;
        for r in &self.records {
            line(&LogLine::Step(r.clone()))?;
        }
        line(&LogLine::Footer {
            wall_clock_secs: self.wall_clock_secs,
        })
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log: Option<TrainLog> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<train log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let missing = || Error::Parse {
                line: i + 1,
                message: "record before header".into(),
            };
            match parsed {
                LogLine::Header {
                    seed,
                    config_hash,
                    base_config_hash,
                    weights,
                } => {
                    log = Some(TrainLog {
                        seed,
                        config_hash,
                        base_config_hash,
                        weights,
                        records: Vec::new(),
                        wall_clock_secs: 0.0,
                    })
                }
                LogLine::Step(s) => log.as_mut().ok_or_else(missing)?.records.push(s),
                LogLine::Footer { wall_clock_secs } => log.as_mut().ok_or_else(missing)?.wall_clock_secs = wall_clock_secs,
            }
        }
        log.ok_or(Error::Parse {
            line: 0,
            message: "empty train log".into(),
        })
    }

    /// Trailing mean of the total loss over up to `window` records.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.records.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s: f64 = self.records[lo..=i].iter().map(|r| r.loss.total).sum();
                s / (i + 1 - lo) as f64
            })
            .collect()
    }
}

pub fn train(config: &TrainConfig, corpus: &[Example], initial: ModelState) -> Result<(ModelState, TrainLog)> {
    train_with_checkpoints(config, corpus, initial, |_, _| Ok(()))
}

/// Like [`train`], calling `on_checkpoint(step, state)` every
/// `checkpoint_every` steps (counted from 1) and after the final step.
pub fn train_with_checkpoints<F>(
    config: &TrainConfig,
    corpus: &[Example],
    mut state: ModelState,
    mut on_checkpoint: F,
) -> Result<(ModelState, TrainLog)>
where
    F: FnMut(usize, &ModelState) -> Result<()>,
{
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("training corpus is empty".into()));
    }
    let vocab = state.vocab();
    let prepared = corpus
        .iter()
        .map(|ex| PreparedExample::new(ex, &vocab, config.attn_budget))
        .collect::<Result<Vec<_>>>()?;
    let weights = config.weights();
    let source = config.citation_source();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&state, config.adam);
    let mut records = Vec::with_capacity(config.n_steps);
    let started = Instant::now();

    for step in 0..config.n_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let b = batch.len() as f64;
        let n_cited = batch.iter().filter(|&&i| prepared[i].has_citation_targets()).count();

        let mut grads = ParamGrads::zeros_like(&state);
        let mut sum = LossComponents::default();
        for &i in &batch {
            let mut tape = Tape::new();
            let p = state.load(&mut tape);
            let g = example_graph(&mut tape, &state, &p, &prepared[i], source)?;
            let mut terms = vec![(g.l_default, 1.0 / b), (g.l_router, weights.beta / b), (g.l_attn, weights.gamma / b)];
            sum.l_default += tape.scalar(g.l_default);
            sum.l_router += tape.scalar(g.l_router);
            sum.l_attn += tape.scalar(g.l_attn);
            if let Some(c) = g.l_citation {
                terms.push((c, weights.alpha / n_cited as f64));
                sum.l_citation += tape.scalar(c);
            }
            let loss = tape.weighted_sum(terms);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss { step: Some(step) });
            }
            let mut gr = tape.backward(loss);
            grads.add_assign(&p.collect(&tape, &mut gr));
        }
        let means = LossComponents {
            l_default: sum.l_default / b,
            l_citation: if n_cited == 0 { 0.0 } else { sum.l_citation / n_cited as f64 },
            l_router: sum.l_router / b,
            l_attn: sum.l_attn / b,
        };
        let loss = combined_loss(means, weights).map_err(|_| Error::NonFiniteLoss { step: Some(step) })?;
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: Some(step) });
        }
        adam.step(&mut state, &grads, config.learning_rate);
        let record = StepRecord {
            step,
            loss,
            grad_norm,
            elapsed_secs: started.elapsed().as_secs_f64(),
        };
        records.push(record);
        let done = step + 1;
        if done == config.n_steps || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            on_checkpoint(done, &state)?;
        }
    }
    let log = TrainLog {
        seed: config.seed,
        config_hash: config.hash(),
        base_config_hash: config.base_hash(),
        weights,
        records,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutEvaluation {
    pub metrics: MetricsReport,
    pub probe: Probe,
    pub router_accuracy: f64,
    pub marker_accuracy: f64,
    pub n_generated_citations: usize,
    /// Emitted markers outside `1..=N`; the decoder cannot produce these.
    pub out_of_range_markers: usize,
}

/// Decodes every example, scores the responses and runs the teacher-forced
/// probe.
pub fn evaluate_model<O: EntailmentOracle + ?Sized>(
    state: &ModelState,
    examples: &[Example],
    source: CitationSource,
    decode: &DecodeConfig,
    oracle: &O,
) -> Result<(HeldoutEvaluation, Vec<GenerationRecord>)> {
    let vocab = state.vocab();
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let set = build_citation_set_with(state, &ex.documents, source)?;
        records.push(generate(state, ex, &set, decode)?);
    }
    let responses: Vec<_> = records.iter().map(|r| r.response.clone()).collect();
    let metrics = evaluate(examples, &responses, oracle, &vocab)?;
    let probe = probe(state, examples, source, ATTENTION_BUDGET)?;
    let mut n_generated_citations = 0;
    let mut out_of_range_markers = 0;
    for (ex, r) in examples.iter().zip(&records) {
        for m in r.emitted.iter().filter_map(|t| t.marker) {
            n_generated_citations += 1;
            if m == 0 || m > ex.n_docs() {
                out_of_range_markers += 1;
            }
        }
    }
    Ok((
        HeldoutEvaluation {
            metrics,
            router_accuracy: probe.router_accuracy(),
            marker_accuracy: probe.marker_accuracy(),
            probe,
            n_generated_citations,
            out_of_range_markers,
        },
        records,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o CAE")]
    WithoutFusion,
    #[serde(rename = "w/o Attn")]
    WithoutAttn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::WithoutFusion, Variant::WithoutAttn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFusion => "w/o CAE",
            Variant::WithoutAttn => "w/o Attn",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            disable_fusion: self == Variant::WithoutFusion,
            disable_attn: self == Variant::WithoutAttn,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub base_config_hash: String,
    pub final_loss: LossBreakdown,
    /// Percentages rounded to one decimal.
    pub scores: Scores,
    pub router_accuracy: f64,
    pub marker_accuracy: f64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Medians over seeds, in percent.
    pub citation_precision: f64,
    pub citation_recall: f64,
    pub citation_f1: f64,
    pub correctness: f64,
    /// Relative F1 change against the full model, in percent.
    pub f1_change_vs_full: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<VariantRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary_for(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Trains the three variants once per seed (the seed drives both model
/// initialisation and batch order), evaluates each on `heldout`, and
/// summarises medians over seeds.
pub fn ablate(
    config: &TrainConfig,
    model: &BackboneConfig,
    corpus: &[Example],
    heldout: &[Example],
    decode: &DecodeConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let oracle = FactContainment::new(model.vocab());
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let cfg = variant.apply(&TrainConfig { seed, ..config.clone() });
            let init = ModelState::init(&BackboneConfig { seed, ..model.clone() })?;
            let (state, log) = train(&cfg, corpus, init)?;
            let (eval, _) = evaluate_model(&state, heldout, cfg.citation_source(), decode, &oracle)?;
            runs.push(VariantRun {
                variant,
                seed,
                config_hash: log.config_hash,
                base_config_hash: log.base_config_hash,
                final_loss: log.records.last().map(|r| r.loss).unwrap_or_default(),
                scores: eval.metrics.percent,
                router_accuracy: eval.router_accuracy,
                marker_accuracy: eval.marker_accuracy,
                wall_clock_secs: log.wall_clock_secs,
            });
        }
    }
    Ok(summarise(seeds, runs))
}

pub fn summarise(seeds: &[u64], runs: Vec<VariantRun>) -> AblationReport {
    let med = |v: Variant, f: fn(&Scores) -> f64| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| f(&r.scores)).collect();
        median(&xs).unwrap_or(0.0)
    };
    let full_f1 = med(Variant::Full, |s| s.citation_f1);
    let summary = Variant::ALL
        .iter()
        .map(|&v| {
            let f1 = med(v, |s| s.citation_f1);
            VariantSummary {
                variant: v,
                citation_precision: med(v, |s| s.citation_precision),
                citation_recall: med(v, |s| s.citation_recall),
                citation_f1: f1,
                correctness: med(v, |s| s.correctness),
                f1_change_vs_full: (v != Variant::Full && full_f1 > 0.0).then(|| (f1 - full_f1) / full_f1 * 100.0),
            }
        })
        .collect();
    AblationReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    }
}
