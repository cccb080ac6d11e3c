//! Attributed decoding and segmentation of token streams into sentences with
//! citations.
//!
//! Each step routes the last hidden state. A default step samples from the
//! vocabulary with every citation id masked out; a citation step emits the
//! marker the alignment head ranks highest among the example's documents.
//! Emitted citation tokens are spliced with their contextual embedding on the
//! next step, exactly as during training, and markers outside `1..=N` cannot
//! be produced.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape};
use crate::backbone::{forward, forward_graph, lm_logits_graph, ForwardTrace, ModelState};
use crate::corpus::{assemble_prompt, AttributedResponse, Example, Segment};
use crate::error::{Error, Result};
use crate::fusion::{splice, splice_graph, CitationEmbeddingSet};
use crate::heads::{align, argmax, route};
use crate::vocab::{self, Role, TaggedToken, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64, temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// A step is a citation step when `p_citation` exceeds this.
    pub router_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: DecodeMode::Greedy,
            router_threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        if let DecodeMode::Sampled { temperature, .. } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.router_threshold) {
            return Err(Error::InvalidConfig("router_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// What one decoding step sees of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// `(p_default, p_citation)`.
    pub router: [f64; 2],
    pub logits: Vec<f64>,
    /// Distribution over markers `1..=N`.
    pub alignment: Vec<f64>,
}

pub trait StepModel {
    fn vocab(&self) -> Vocab;
    fn max_len(&self) -> usize;
    fn step(&self, context: &[TaggedToken], citation_set: &CitationEmbeddingSet) -> Result<StepOutput>;
}

impl StepModel for ModelState {
    fn vocab(&self) -> Vocab {
        ModelState::vocab(self)
    }

    fn max_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn step(&self, context: &[TaggedToken], citation_set: &CitationEmbeddingSet) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let p = self.load(&mut tape);
        let cm = tape.leaf(citation_set.matrix.clone());
        let x = splice_graph(&mut tape, self, &p, context, cm)?;
        let tv = forward_graph(&mut tape, self.config(), &p, x)?;
        let last = tape.select_rows(tv.hidden, &[context.len() - 1]);
        let logits = lm_logits_graph(&mut tape, &p, last);
        let h = tape.value(last).row(0).to_vec();
        Ok(StepOutput {
            router: route(self, &h)?,
            logits: tape.value(logits).row(0).to_vec(),
            alignment: align(self, &h, citation_set)?.probs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStep {
    pub step: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_len: usize,
    pub emitted: Vec<TaggedToken>,
    pub router_probs: Vec<[f64; 2]>,
    pub alignments: Vec<AlignmentStep>,
    pub response: AttributedResponse,
    pub leading_citations: usize,
    /// `"… [i]."` rendering of the response.
    pub text: String,
}

pub fn generate<M: StepModel + ?Sized>(
    model: &M,
    example: &Example,
    citation_set: &CitationEmbeddingSet,
    config: &DecodeConfig,
) -> Result<GenerationRecord> {
    config.validate()?;
    let vocab = model.vocab();
    let prompt = assemble_prompt(example, &vocab)?;
    let n_docs = example.n_docs();
    if citation_set.len() != n_docs {
        return Err(Error::LengthMismatch {
            what: "citation set rows vs documents",
            left: citation_set.len(),
            right: n_docs,
        });
    }
    let mut rng = match config.mode {
        DecodeMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut context = prompt.tokens.clone();
    let mut emitted = Vec::new();
    let mut router_probs = Vec::new();
    let mut alignments = Vec::new();
    for step in 0..config.max_new_tokens {
        if context.len() >= model.max_len() {
            break;
        }
        let out = model.step(&context, citation_set)?;
        router_probs.push(out.router);
        let token = if out.router[1] > config.router_threshold {
            if out.alignment.len() != n_docs {
                return Err(Error::LengthMismatch {
                    what: "alignment distribution vs documents",
                    left: out.alignment.len(),
                    right: n_docs,
                });
            }
            let marker = argmax(&out.alignment) + 1;
            alignments.push(AlignmentStep {
                step,
                probs: out.alignment,
            });
            vocab.citation(marker)?
        } else {
            TaggedToken::default_token(pick_default(&vocab, out.logits, config, rng.as_mut())?)
        };
        context.push(token);
        emitted.push(token);
        if token.token_id == vocab::END {
            break;
        }
    }
    let Segmented {
        response,
        leading_citations,
    } = segment(&emitted);
    let text = response.render(&vocab);
    Ok(GenerationRecord {
        prompt_len: prompt.tokens.len(),
        emitted,
        router_probs,
        alignments,
        response,
        leading_citations,
        text,
    })
}

fn pick_default(
    vocab: &Vocab,
    mut logits: Vec<f64>,
    config: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<usize> {
    if logits.len() != vocab.size() {
        return Err(Error::LengthMismatch {
            what: "logits vs vocabulary",
            left: logits.len(),
            right: vocab.size(),
        });
    }
    for id in vocab.citation_ids() {
        logits[id] = f64::NEG_INFINITY;
    }
    match (config.mode, rng) {
        (DecodeMode::Sampled { temperature, .. }, Some(rng)) => {
            logits.iter_mut().for_each(|l| *l /= temperature);
            softmax_in_place(&mut logits);
            let dist = WeightedIndex::new(&logits).map_err(|_| Error::NonFiniteInput("sampling weights"))?;
            Ok(dist.sample(rng))
        }
        _ => Ok(argmax(&logits)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segmented {
    pub response: AttributedResponse,
    /// Citations that arrived before any sentence content; each is attached
    /// to an empty sentence.
    pub leading_citations: usize,
}

/// Groups a tagged stream into sentences and their citations.
///
/// Citations attach to the sentence they follow, including across the
/// end-of-sentence token; a default token after citations opens a new
/// sentence. The end token stops segmentation.
pub fn segment(tokens: &[TaggedToken]) -> Segmented {
    let mut segments: Vec<Segment> = Vec::new();
    let mut current = Segment::default();
    let mut leading = 0;
    let is_empty = |s: &Segment| s.sentence.is_empty() && s.citations.is_empty();
    for t in tokens {
        match t.role {
            Role::Citation => {
                let m = t.marker.expect("citation tokens carry a marker");
                if !is_empty(&current) {
                    current.citations.push(m);
                } else if let Some(last) = segments.last_mut() {
                    last.citations.push(m);
                } else {
                    leading += 1;
                    current.citations.push(m);
                }
            }
            Role::Default if t.token_id == vocab::END => break,
            Role::Default if t.token_id == vocab::EOS => {
                if !is_empty(&current) {
                    segments.push(std::mem::take(&mut current));
                }
            }
            Role::Default => {
                if !current.citations.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
                current.sentence.push(t.token_id);
            }
        }
    }
    if !is_empty(&current) {
        segments.push(current);
    }
    Segmented {
        response: AttributedResponse { segments },
        leading_citations: leading,
    }
}

/// Re-runs the model over prompt plus emitted tokens; the response occupies
/// `record.prompt_len..trace.len()`.
pub fn trace_generation(
    state: &ModelState,
    example: &Example,
    record: &GenerationRecord,
    citation_set: &CitationEmbeddingSet,
) -> Result<ForwardTrace> {
    let mut tokens = assemble_prompt(example, &state.vocab())?.tokens;
    tokens.extend_from_slice(&record.emitted);
    forward(state, &splice(state, &tokens, citation_set)?)
}
