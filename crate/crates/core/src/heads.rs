//! Router, alignment and vocabulary heads with their losses.
//!
//! The router is a 2-way softmax over `W_r · h_t`. The alignment head maps
//! `h_t` into citation space, `z_t = W_c · h_t + b_c`, and scores it against
//! the citation matrix, `softmax(C · z_t)`. Both read the last decoder
//! layer's hidden state.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var, PROB_FLOOR};
use crate::backbone::{ModelState, ParamVars};
use crate::error::{Error, Result};
use crate::fusion::CitationEmbeddingSet;
use crate::tensor::Tensor;
use crate::vocab::Role;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_default: f64,
    pub l_citation: f64,
    pub l_router: f64,
    pub l_attn: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEntry {
    pub z: Vec<f64>,
    pub probs: Vec<f64>,
}

impl AlignmentEntry {
    /// 1-based marker with the highest probability (first on ties).
    pub fn argmax_marker(&self) -> usize {
        argmax(&self.probs) + 1
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_width(state: &ModelState, h: &[f64]) -> Result<()> {
    if h.len() != state.config().hidden_size {
        return Err(Error::LengthMismatch {
            what: "hidden state width",
            left: h.len(),
            right: state.config().hidden_size,
        });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("hidden state"));
    }
    Ok(())
}

/// `(p_default, p_citation)`.
pub fn route(state: &ModelState, h: &[f64]) -> Result<[f64; 2]> {
    check_width(state, h)?;
    let w = &state.params()[state.layout().router_w()];
    let mut out = [dot(w.row(0), h), dot(w.row(1), h)];
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn align(state: &ModelState, h: &[f64], citation_set: &CitationEmbeddingSet) -> Result<AlignmentEntry> {
    check_width(state, h)?;
    if citation_set.is_empty() {
        return Err(Error::EmptyCitationSet);
    }
    let lay = state.layout();
    let w = &state.params()[lay.align_w()];
    let b = state.params()[lay.align_b()].row(0);
    let z: Vec<f64> = (0..w.rows()).map(|r| dot(w.row(r), h) + b[r]).collect();
    let mut probs: Vec<f64> = (0..citation_set.len())
        .map(|i| dot(citation_set.matrix.row(i), &z))
        .collect();
    softmax_in_place(&mut probs);
    Ok(AlignmentEntry { z, probs })
}

fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Mean two-class cross-entropy against role labels.
pub fn router_loss(outputs: &[[f64; 2]], labels: &[Role]) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "router outputs vs labels",
            left: outputs.len(),
            right: labels.len(),
        });
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = outputs.iter().zip(labels).map(|(p, r)| nll(p[r.label()])).sum();
    Ok(s / outputs.len() as f64)
}

/// Mean cross-entropy of each predicted marker distribution against the true
/// 1-based marker. Empty input (no citation targets) gives 0.
pub fn alignment_loss(outputs: &[Vec<f64>], true_markers: &[usize]) -> Result<f64> {
    if outputs.len() != true_markers.len() {
        return Err(Error::LengthMismatch {
            what: "alignment outputs vs markers",
            left: outputs.len(),
            right: true_markers.len(),
        });
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, &m) in outputs.iter().zip(true_markers) {
        if m == 0 || m > p.len() {
            return Err(Error::MarkerOutOfRange { marker: m, n: p.len() });
        }
        s += nll(p[m - 1]);
    }
    Ok(s / outputs.len() as f64)
}

/// Mean vocabulary cross-entropy over positions whose target is a default
/// token; citation-target positions are left to the alignment loss. An empty
/// set gives 0.
pub fn default_lm_loss(logits: &Tensor, targets: &[usize], roles: &[Role]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "logit rows vs targets",
            left: logits.rows(),
            right: targets.len(),
        });
    }
    if roles.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "roles vs targets",
            left: roles.len(),
            right: targets.len(),
        });
    }
    let mut s = 0.0;
    let mut n = 0;
    for (i, (&t, role)) in targets.iter().zip(roles).enumerate() {
        if *role != Role::Default {
            continue;
        }
        if t >= logits.cols() {
            return Err(Error::UnknownToken {
                id: t,
                vocab_size: logits.cols(),
            });
        }
        let mut row = logits.row(i).to_vec();
        softmax_in_place(&mut row);
        s += nll(row[t]);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Router logits (`rows×2`) for the given hidden rows.
pub fn router_logits_graph(tape: &mut Tape, p: &ParamVars, hidden_rows: Var) -> Var {
    tape.matmul_bt(hidden_rows, p.var(p.layout().router_w()))
}

/// Marker logits (`rows×N`): `(h W_cᵀ + b_c) · Cᵀ`.
pub fn alignment_logits_graph(tape: &mut Tape, p: &ParamVars, hidden_rows: Var, citation_matrix: Var) -> Var {
    let lay = p.layout();
    let z = tape.matmul_bt(hidden_rows, p.var(lay.align_w()));
    let z = tape.add_row(z, p.var(lay.align_b()));
    tape.matmul_bt(z, citation_matrix)
}
