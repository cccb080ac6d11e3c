//! Teacher-forced objective for a single example.
//!
//! The gold response is appended to the prompt and run through the model
//! once. Predictions are made at every position from the last prompt token
//! to the second-to-last response token, each for the next token. The LM
//! loss covers the positions whose target is a default token, the alignment
//! loss those whose target is a citation, and the router loss all of them.

use serde::{Deserialize, Serialize};

use crate::attn_shaping::{attn_loss_graph, target_plan, AttentionTargetPlan};
use crate::autograd::{Tape, Var};
use crate::backbone::{forward_graph, lm_logits_graph, ModelState, ParamVars};
use crate::corpus::{assemble_prompt, Document, Example};
use crate::error::Result;
use crate::fusion::{citation_matrix_graph, splice_graph, CitationSource};
use crate::heads::{alignment_logits_graph, argmax, router_logits_graph};
use crate::vocab::{Role, TaggedToken, Vocab};

#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub tokens: Vec<TaggedToken>,
    pub response_start: usize,
    pub documents: Vec<Document>,
    pub plan: AttentionTargetPlan,
}

impl PreparedExample {
    pub fn new(example: &Example, vocab: &Vocab, budget: f64) -> Result<Self> {
        let mut tokens = assemble_prompt(example, vocab)?.tokens;
        let response_start = tokens.len();
        let response = example.gold.to_tagged(vocab)?;
        let plan = target_plan(&response, budget)?;
        tokens.extend(response);
        Ok(Self {
            tokens,
            response_start,
            documents: example.documents.clone(),
            plan,
        })
    }

    pub fn has_citation_targets(&self) -> bool {
        self.tokens[self.response_start..].iter().any(|t| t.is_citation())
    }
}

/// Teacher-forced head accuracy counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub router_correct: usize,
    pub router_total: usize,
    pub marker_correct: usize,
    pub marker_total: usize,
}

impl Probe {
    pub fn merge(&mut self, other: Probe) {
        self.router_correct += other.router_correct;
        self.router_total += other.router_total;
        self.marker_correct += other.marker_correct;
        self.marker_total += other.marker_total;
    }

    pub fn router_accuracy(&self) -> f64 {
        ratio(self.router_correct, self.router_total)
    }

    pub fn marker_accuracy(&self) -> f64 {
        ratio(self.marker_correct, self.marker_total)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub struct ExampleGraph {
    pub l_default: Var,
    /// `None` when the response has no citation targets.
    pub l_citation: Option<Var>,
    pub l_router: Var,
    pub l_attn: Var,
    pub probe: Probe,
}

pub fn example_graph(
    tape: &mut Tape,
    state: &ModelState,
    p: &ParamVars,
    ex: &PreparedExample,
    source: CitationSource,
) -> Result<ExampleGraph> {
    let cm = citation_matrix_graph(tape, state, p, &ex.documents, source)?;
    let x = splice_graph(tape, state, p, &ex.tokens, cm)?;
    let tv = forward_graph(tape, state.config(), p, x)?;

    let positions: Vec<usize> = (ex.response_start - 1..ex.tokens.len() - 1).collect();
    let targets: Vec<&TaggedToken> = positions.iter().map(|&t| &ex.tokens[t + 1]).collect();

    let h = tape.select_rows(tv.hidden, &positions);
    let router_logits = router_logits_graph(tape, p, h);
    let labels: Vec<usize> = targets.iter().map(|t| t.role.label()).collect();
    let l_router = tape.cross_entropy(router_logits, labels.clone());

    let mut probe = Probe::default();
    let rl = tape.value(router_logits);
    for (i, &label) in labels.iter().enumerate() {
        probe.router_total += 1;
        if argmax(rl.row(i)) == label {
            probe.router_correct += 1;
        }
    }

    let (def_rows, def_targets): (Vec<usize>, Vec<usize>) = positions
        .iter()
        .zip(&targets)
        .filter(|(_, t)| t.role == Role::Default)
        .map(|(&pos, t)| (pos, t.token_id))
        .unzip();
    let h_def = tape.select_rows(tv.hidden, &def_rows);
    let logits = lm_logits_graph(tape, p, h_def);
    let l_default = tape.cross_entropy(logits, def_targets);

    let (cit_rows, cit_targets): (Vec<usize>, Vec<usize>) = positions
        .iter()
        .zip(&targets)
        .filter_map(|(&pos, t)| t.marker.map(|m| (pos, m - 1)))
        .unzip();
    let l_citation = if cit_rows.is_empty() {
        None
    } else {
        let h_cit = tape.select_rows(tv.hidden, &cit_rows);
        let al = alignment_logits_graph(tape, p, h_cit, cm);
        let values = tape.value(al);
        for (i, &t) in cit_targets.iter().enumerate() {
            probe.marker_total += 1;
            if argmax(values.row(i)) == t {
                probe.marker_correct += 1;
            }
        }
        Some(tape.cross_entropy(al, cit_targets))
    };

    let l_attn = attn_loss_graph(
        tape,
        tv.queries,
        tv.keys,
        state.config().n_heads,
        &ex.plan,
        ex.response_start,
    )?;
    Ok(ExampleGraph {
        l_default,
        l_citation,
        l_router,
        l_attn,
        probe,
    })
}

/// Teacher-forced router and marker accuracy over a set of examples.
pub fn probe(state: &ModelState, examples: &[Example], source: CitationSource, budget: f64) -> Result<Probe> {
    let vocab = state.vocab();
    let mut total = Probe::default();
    for ex in examples {
        let prepared = PreparedExample::new(ex, &vocab, budget)?;
        let mut tape = Tape::new();
        let p = state.load(&mut tape);
        total.merge(example_graph(&mut tape, state, &p, &prepared, source)?.probe);
    }
    Ok(total)
}
