//! Attention shaping toward earlier citation tokens.
//!
//! For a default token at response position `j` and an earlier citation token
//! at `c`, the observed score is the head-averaged cosine between the last
//! layer's query at `j` and key at `c`. Its target splits a fixed budget over
//! all of `j`'s preceding citations in proportion to `1/(j-c)`. The loss is the
//! summed absolute gap, normalised by `|T_default|·|T_citation|`.

use serde::{Deserialize, Serialize};

use crate::autograd::{cosine, Tape, Var};
use crate::backbone::ForwardTrace;
use crate::error::{Error, Result};
use crate::vocab::TaggedToken;

/// Total target attention a default token spreads over its preceding citations.
pub const ATTENTION_BUDGET: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Default-token position within the response.
    pub position: usize,
    /// `(citation position, target score)`, nearest citation last.
    pub targets: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTargetPlan {
    pub budget: f64,
    pub entries: Vec<PlanEntry>,
    pub n_default: usize,
    pub n_citation: usize,
}

impl AttentionTargetPlan {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .flat_map(|e| e.targets.iter().map(move |&(c, t)| (e.position, c, t)))
    }

    pub fn n_pairs(&self) -> usize {
        self.entries.iter().map(|e| e.targets.len()).sum()
    }

    fn normaliser(&self) -> Option<f64> {
        (self.n_default > 0 && self.n_citation > 0)
            .then(|| (self.n_default * self.n_citation) as f64)
    }
}

pub fn target_plan(response: &[TaggedToken], budget: f64) -> Result<AttentionTargetPlan> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::InvalidConfig(format!("attention budget must be positive, got {budget}")));
    }
    let mut citations = Vec::new();
    let mut entries = Vec::new();
    let mut n_default = 0;
    for (j, t) in response.iter().enumerate() {
        if t.is_citation() {
            citations.push(j);
            continue;
        }
        n_default += 1;
        let total: f64 = citations.iter().map(|&c| 1.0 / (j - c) as f64).sum();
        let targets = citations
            .iter()
            .map(|&c| (c, budget * (1.0 / (j - c) as f64) / total))
            .collect();
        entries.push(PlanEntry { position: j, targets });
    }
    Ok(AttentionTargetPlan {
        budget,
        entries,
        n_default,
        n_citation: citations.len(),
    })
}

/// Head-averaged cosine between the query at `j` and the key at `c`.
pub fn observed_score(trace: &ForwardTrace, j: usize, c: usize) -> Result<f64> {
    if c >= j || j >= trace.len() {
        return Err(Error::NonCausalPair { query: j, key: c });
    }
    let heads = trace.n_heads.max(1);
    let d = trace.queries.cols() / heads;
    let mut s = 0.0;
    for h in 0..heads {
        let q = &trace.queries.row(j)[h * d..(h + 1) * d];
        let k = &trace.keys.row(c)[h * d..(h + 1) * d];
        s += cosine(q, k).ok_or(Error::ZeroNorm { query: j, key: c })?;
    }
    Ok(s / heads as f64)
}

/// Plan positions are offset by `response_start` to index the trace.
pub fn attn_loss(trace: &ForwardTrace, plan: &AttentionTargetPlan, response_start: usize) -> Result<f64> {
    let Some(norm) = plan.normaliser() else {
        return Ok(0.0);
    };
    let mut s = 0.0;
    for (j, c, target) in plan.pairs() {
        s += (target - observed_score(trace, response_start + j, response_start + c)?).abs();
    }
    Ok(s / norm)
}

pub fn attn_loss_graph(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    n_heads: usize,
    plan: &AttentionTargetPlan,
    response_start: usize,
) -> Result<Var> {
    let norm = match plan.normaliser() {
        Some(n) if plan.n_pairs() > 0 => n,
        _ => return Ok(tape.constant(0.0)),
    };
    let (pairs, targets): (Vec<_>, Vec<_>) = plan
        .pairs()
        .map(|(j, c, t)| ((response_start + j, response_start + c), t))
        .unzip();
    let len = tape.shape(queries).0;
    if let Some(&(j, c)) = pairs.iter().find(|&&(j, c)| c >= j || j >= len) {
        return Err(Error::NonCausalPair { query: j, key: c });
    }
    let scores = tape.cosine_pairs(queries, keys, pairs, n_heads)?;
    let gap = tape.abs_diff_sum(scores, targets);
    Ok(tape.scale(gap, 1.0 / norm))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;
    use crate::vocab::Vocab;

    fn stream(pattern: &str) -> Vec<TaggedToken> {
        let v = Vocab::new(512, 8).unwrap();
        pattern
            .chars()
            .map(|ch| match ch {
                'c' => v.citation(1).unwrap(),
                _ => TaggedToken::default_token(100),
            })
            .collect()
    }

    fn trace_from(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, heads: usize) -> ForwardTrace {
        let q = Tensor::from_rows(&q);
        let k = Tensor::from_rows(&k);
        let (l, h) = q.shape();
        ForwardTrace {
            embeddings: Tensor::zeros(l, h),
            hidden: Tensor::zeros(l, h),
            queries: q,
            keys: k,
            n_heads: heads,
            logits: Tensor::zeros(l, 1),
            attention: vec![],
        }
    }

    #[test]
    fn single_citation_takes_whole_budget() {
        let plan = target_plan(&stream("dcd"), ATTENTION_BUDGET).unwrap();
        assert_eq!(plan.entries[0].targets, vec![]);
        assert_eq!(plan.entries[1].position, 2);
        assert_eq!(plan.entries[1].targets, vec![(1, 0.3)]);
        assert_eq!((plan.n_default, plan.n_citation), (2, 1));
    }

    #[test]
    fn inverse_distance_split() {
        // Citations at distances 2 and 1 from position 3: weights 0.5 and 1.
        let plan = target_plan(&stream("dccd"), ATTENTION_BUDGET).unwrap();
        let e = &plan.entries[1];
        assert_eq!(e.position, 3);
        assert_eq!(e.targets.len(), 2);
        assert!((e.targets[0].1 - 0.1).abs() < 1e-15);
        assert!((e.targets[1].1 - 0.2).abs() < 1e-15);
    }

    #[test]
    fn citation_free_response_has_zero_loss() {
        let plan = target_plan(&stream("dddd"), ATTENTION_BUDGET).unwrap();
        assert_eq!(plan.n_pairs(), 0);
        let t = trace_from(vec![vec![1.0, 0.0]; 4], vec![vec![1.0, 0.0]; 4], 1);
        assert_eq!(attn_loss(&t, &plan, 0).unwrap(), 0.0);
    }

    #[test]
    fn cosine_scores() {
        let t = trace_from(
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![3.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]],
            1,
        );
        assert!((observed_score(&t, 1, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(observed_score(&t, 2, 1).unwrap().abs() < 1e-15);
        assert!((observed_score(&t, 3, 2).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(observed_score(&t, 1, 1), Err(Error::NonCausalPair { .. })));
        let zero = trace_from(vec![vec![0.0, 0.0]; 2], vec![vec![1.0, 0.0]; 2], 1);
        assert!(matches!(observed_score(&zero, 1, 0), Err(Error::ZeroNorm { query: 1, key: 0 })));
    }

    #[test]
    fn cosine_is_averaged_over_heads() {
        // Head 0 aligned (1.0), head 1 orthogonal (0.0).
        let t = trace_from(vec![vec![1., 0., 1., 0.], vec![1., 0., 1., 0.]], vec![vec![2., 0., 0., 3.]; 2], 2);
        assert!((observed_score(&t, 1, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_pair_loss_arithmetic() {
        // One pair with target 0.3 and observed 0.1; |T_default| = 2, |T_citation| = 1.
        let s = 0.1f64;
        let q1 = vec![1.0, 0.0];
        let kc = vec![s, (1.0 - s * s).sqrt()];
        let t = trace_from(vec![vec![1.0, 0.0], q1], vec![kc, vec![1.0, 0.0]], 1);
        let plan = AttentionTargetPlan {
            budget: 0.3,
            entries: vec![PlanEntry { position: 0, targets: vec![] }, PlanEntry { position: 1, targets: vec![(0, 0.3)] }],
            n_default: 2,
            n_citation: 1,
        };
        assert!((attn_loss(&t, &plan, 0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn matching_targets_give_zero_loss() {
        // Observed cosine 0.3 everywhere a target of 0.3 is planned.
        let s = 0.3f64;
        let t = trace_from(
            vec![vec![1.0, 0.0]; 3],
            vec![vec![1.0, 0.0], vec![s, (1.0 - s * s).sqrt()], vec![1.0, 0.0]],
            1,
        );
        let plan = target_plan(&stream("dcd"), 0.3).unwrap();
        assert!(attn_loss(&t, &plan, 0).unwrap() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let q: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).sin() + 0.2, (i as f64).cos(), 0.5, -0.3]).collect();
        let k: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64 * 1.3).cos(), 0.4, (i as f64).sin(), 0.7]).collect();
        let t = trace_from(q.clone(), k.clone(), 2);
        let plan = target_plan(&stream("cdcdd"), 0.3).unwrap();
        let plain = attn_loss(&t, &plan, 1).unwrap();
        let mut tape = Tape::new();
        let qv = tape.leaf(Tensor::from_rows(&q));
        let kv = tape.leaf(Tensor::from_rows(&k));
        let l = attn_loss_graph(&mut tape, qv, kv, 2, &plan, 1).unwrap();
        assert!((tape.scalar(l) - plain).abs() < 1e-14);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<TaggedToken>> {
        prop::collection::vec(prop::bool::weighted(0.3), 1..64).prop_map(|bits| {
            let v = Vocab::new(512, 8).unwrap();
            bits.into_iter()
                .map(|c| if c { v.citation(2).unwrap() } else { TaggedToken::default_token(120) })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn budget_is_conserved_and_decays(resp in arb_stream()) {
            let plan = target_plan(&resp, ATTENTION_BUDGET).unwrap();
            for e in &plan.entries {
                if e.targets.is_empty() {
                    continue;
                }
                let total: f64 = e.targets.iter().map(|t| t.1).sum();
                prop_assert!((total - ATTENTION_BUDGET).abs() <= 1e-12);
                // Targets are listed by ascending citation position, so they
                // must strictly increase as the distance shrinks.
                for w in e.targets.windows(2) {
                    prop_assert!(w[0].1 < w[1].1);
                }
                prop_assert!(e.targets.iter().all(|t| t.1 > 0.0 && t.0 < e.position));
            }
        }
    }
}
