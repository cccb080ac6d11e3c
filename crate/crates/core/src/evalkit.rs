//! Citation precision, recall, F1 and answer correctness under a pluggable
//! support oracle, plus table arithmetic and attention heatmap export.
//!
//! Fractions are kept in `[0, 1]` internally; reports also carry percentages
//! rounded to one decimal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardTrace;
use crate::corpus::{AttributedResponse, Document, Example};
use crate::error::{Error, Result};
use crate::vocab::{Role, TaggedToken, Vocab};

pub trait EntailmentOracle {
    /// Does the union of `documents` support the whole sentence?
    fn supports(&self, sentence: &[usize], documents: &[&Document]) -> bool;

    /// Does `document` alone support some part of the sentence?
    fn relevant(&self, sentence: &[usize], document: &Document) -> bool;
}

/// A sentence is supported when it has fact tokens and every one of them
/// occurs in the cited documents; a single document is relevant when it
/// shares at least one fact token with the sentence.
#[derive(Clone, Debug)]
pub struct FactContainment {
    vocab: Vocab,
}

impl FactContainment {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    fn facts(&self, tokens: &[usize]) -> BTreeSet<usize> {
        tokens.iter().copied().filter(|&t| self.vocab.is_fact(t)).collect()
    }
}

impl EntailmentOracle for FactContainment {
    fn supports(&self, sentence: &[usize], documents: &[&Document]) -> bool {
        let facts = self.facts(sentence);
        if facts.is_empty() {
            return false;
        }
        let available: BTreeSet<usize> = documents.iter().flat_map(|d| d.tokens.iter().copied()).collect();
        facts.is_subset(&available)
    }

    fn relevant(&self, sentence: &[usize], document: &Document) -> bool {
        let facts = self.facts(sentence);
        document.tokens.iter().any(|t| facts.contains(t))
    }
}

/// Externally supplied judgments keyed by sentence tokens and the sorted
/// 1-based indices of the documents considered. Missing entries are false.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct JudgmentTable {
    pub judgments: Vec<Judgment>,
    #[serde(skip)]
    index: BTreeMap<(Vec<usize>, Vec<usize>), bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Judgment {
    pub sentence: Vec<usize>,
    pub documents: Vec<usize>,
    pub supported: bool,
}

impl JudgmentTable {
    pub fn new(judgments: Vec<Judgment>) -> Self {
        let index = judgments
            .iter()
            .map(|j| {
                let mut docs = j.documents.clone();
                docs.sort_unstable();
                docs.dedup();
                ((j.sentence.clone(), docs), j.supported)
            })
            .collect();
        Self { judgments, index }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let judgments: Vec<Judgment> = serde_json::from_str(text)?;
        Ok(Self::new(judgments))
    }

    fn lookup(&self, sentence: &[usize], documents: impl Iterator<Item = usize>) -> bool {
        let mut docs: Vec<usize> = documents.collect();
        docs.sort_unstable();
        docs.dedup();
        self.index.get(&(sentence.to_vec(), docs)).copied().unwrap_or(false)
    }
}

impl EntailmentOracle for JudgmentTable {
    fn supports(&self, sentence: &[usize], documents: &[&Document]) -> bool {
        self.lookup(sentence, documents.iter().map(|d| d.index))
    }

    fn relevant(&self, sentence: &[usize], document: &Document) -> bool {
        self.lookup(sentence, std::iter::once(document.index))
    }
}

fn cited<'a>(documents: &'a [Document], markers: &[usize]) -> Vec<&'a Document> {
    let mut seen = BTreeSet::new();
    markers
        .iter()
        .filter(|m| seen.insert(**m))
        .filter_map(|&m| documents.iter().find(|d| d.index == m))
        .collect()
}

/// Share of non-empty sentences whose cited documents jointly support them.
/// A response without such sentences scores 0.
pub fn citation_recall<O: EntailmentOracle + ?Sized>(
    response: &AttributedResponse,
    documents: &[Document],
    oracle: &O,
) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for seg in response.segments.iter().filter(|s| !s.sentence.is_empty()) {
        total += 1;
        if !seg.citations.is_empty() && oracle.supports(&seg.sentence, &cited(documents, &seg.citations)) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Share of individual citations whose document is relevant to its
/// sentence. No citations scores 0 if there is any sentence, 1 otherwise.
pub fn citation_precision<O: EntailmentOracle + ?Sized>(
    response: &AttributedResponse,
    documents: &[Document],
    oracle: &O,
) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for seg in &response.segments {
        for m in &seg.citations {
            total += 1;
            if let Some(doc) = documents.iter().find(|d| d.index == *m) {
                if oracle.relevant(&seg.sentence, doc) {
                    hits += 1;
                }
            }
        }
    }
    match total {
        0 if response.segments.iter().any(|s| !s.sentence.is_empty()) => 0.0,
        0 => 1.0,
        _ => hits as f64 / total as f64,
    }
}

/// Harmonic mean; works on either the `[0, 1]` or the `[0, 100]` scale.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Share of the gold answer's fact tokens found anywhere in the response
/// sentences. A gold answer without facts scores 1.
pub fn correctness(response: &AttributedResponse, gold: &AttributedResponse, vocab: &Vocab) -> f64 {
    let gold_facts: BTreeSet<usize> = gold
        .segments
        .iter()
        .flat_map(|s| s.sentence.iter().copied())
        .filter(|&t| vocab.is_fact(t))
        .collect();
    if gold_facts.is_empty() {
        return 1.0;
    }
    let present: BTreeSet<usize> = response.segments.iter().flat_map(|s| s.sentence.iter().copied()).collect();
    gold_facts.intersection(&present).count() as f64 / gold_facts.len() as f64
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Relative change of `new` over `old`, in percent.
pub fn improvement(new: f64, old: f64) -> Result<f64> {
    if old == 0.0 || !old.is_finite() || !new.is_finite() {
        return Err(Error::InvalidConfig(format!("improvement undefined for old value {old}")));
    }
    Ok((new - old) / old * 100.0)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub citation_precision: f64,
    pub citation_recall: f64,
    pub citation_f1: f64,
    pub correctness: f64,
}

impl Scores {
    pub fn percent(&self) -> Scores {
        let p = |x: f64| round1(100.0 * x);
        Scores {
            citation_precision: p(self.citation_precision),
            citation_recall: p(self.citation_recall),
            citation_f1: p(self.citation_f1),
            correctness: p(self.correctness),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    #[serde(flatten)]
    pub scores: Scores,
    pub n_sentences: usize,
    pub n_citations: usize,
}

/// `aggregate` holds fractions; `percent` the same values scaled to
/// `[0, 100]` and rounded to one decimal. The aggregate F1 is the harmonic
/// mean of the mean precision and mean recall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    pub n_sentences: usize,
    pub n_citations: usize,
    pub aggregate: Scores,
    pub percent: Scores,
    pub per_example: Vec<ExampleScores>,
}

pub fn score_example<O: EntailmentOracle + ?Sized>(
    response: &AttributedResponse,
    example: &Example,
    oracle: &O,
    vocab: &Vocab,
) -> ExampleScores {
    let p = citation_precision(response, &example.documents, oracle);
    let r = citation_recall(response, &example.documents, oracle);
    ExampleScores {
        scores: Scores {
            citation_precision: p,
            citation_recall: r,
            citation_f1: f1(p, r),
            correctness: correctness(response, &example.gold, vocab),
        },
        n_sentences: response.segments.iter().filter(|s| !s.sentence.is_empty()).count(),
        n_citations: response.n_citations(),
    }
}

pub fn evaluate<O: EntailmentOracle + ?Sized>(
    examples: &[Example],
    responses: &[AttributedResponse],
    oracle: &O,
    vocab: &Vocab,
) -> Result<MetricsReport> {
    if examples.len() != responses.len() {
        return Err(Error::LengthMismatch {
            what: "examples vs responses",
            left: examples.len(),
            right: responses.len(),
        });
    }
    let per_example: Vec<ExampleScores> = examples
        .iter()
        .zip(responses)
        .map(|(ex, resp)| score_example(resp, ex, oracle, vocab))
        .collect();
    let avg = |f: fn(&Scores) -> f64| mean(&per_example.iter().map(|e| f(&e.scores)).collect::<Vec<_>>()).unwrap_or(0.0);
    let precision = avg(|s| s.citation_precision);
    let recall = avg(|s| s.citation_recall);
    let aggregate = Scores {
        citation_precision: precision,
        citation_recall: recall,
        citation_f1: f1(precision, recall),
        correctness: avg(|s| s.correctness),
    };
    Ok(MetricsReport {
        n_examples: per_example.len(),
        n_sentences: per_example.iter().map(|e| e.n_sentences).sum(),
        n_citations: per_example.iter().map(|e| e.n_citations).sum(),
        aggregate,
        percent: aggregate.percent(),
        per_example,
    })
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPosition {
    /// Index into the full trace.
    pub position: usize,
    pub token_id: usize,
    pub text: String,
    pub role: Role,
    pub marker: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapIndex {
    pub region_start: usize,
    pub region_end: usize,
    pub positions: Vec<HeatmapPosition>,
    /// Per exported row, the share of its attention that lands inside the
    /// region. The remainder went to earlier (prompt) positions.
    pub row_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub index: PathBuf,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("index.json")
}

/// Writes the head-averaged last-layer attention over `region` as CSV
/// (row = attending position, column = attended position) next to a JSON
/// index of the region's tokens. `tokens` must align with the trace.
pub fn export_heatmap(
    trace: &ForwardTrace,
    tokens: &[TaggedToken],
    region: Range<usize>,
    vocab: &Vocab,
    path: &Path,
) -> Result<HeatmapFiles> {
    if tokens.len() != trace.len() {
        return Err(Error::LengthMismatch {
            what: "tokens vs trace",
            left: tokens.len(),
            right: trace.len(),
        });
    }
    if region.start > region.end || region.end > trace.len() {
        return Err(Error::InvalidConfig(format!(
            "heatmap region {region:?} does not fit a trace of length {}",
            trace.len()
        )));
    }
    let attn = trace
        .mean_last_attention()
        .ok_or_else(|| Error::InvalidConfig("trace has no attention layers".into()))?;
    let mut csv = String::new();
    let mut row_mass = Vec::with_capacity(region.len());
    for i in region.clone() {
        let row = &attn.row(i)[region.clone()];
        row_mass.push(row.iter().sum());
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let index = HeatmapIndex {
        region_start: region.start,
        region_end: region.end,
        positions: region
            .clone()
            .map(|i| HeatmapPosition {
                position: i,
                token_id: tokens[i].token_id,
                text: vocab.render(tokens[i].token_id),
                role: tokens[i].role,
                marker: tokens[i].marker,
            })
            .collect(),
        row_mass,
    };
    let index_path = sidecar_path(path);
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    fs::write(&index_path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&index_path, e))?;
    Ok(HeatmapFiles {
        csv: path.to_path_buf(),
        index: index_path,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::backbone::{forward, BackboneConfig, ModelState};
    use crate::corpus::{assemble_prompt, generate_synthetic_corpus, Segment};
    use crate::fusion::{build_citation_set, splice};

    fn vocab() -> Vocab {
        Vocab::new(512, 8).unwrap()
    }

    fn docs(v: &Vocab) -> Vec<Document> {
        vec![
            Document::new(1, vec![100, 101, 40], v),
            Document::new(2, vec![102, 41], v),
            Document::new(3, vec![103, 104], v),
        ]
    }

    fn seg(sentence: Vec<usize>, citations: Vec<usize>) -> Segment {
        Segment { sentence, citations }
    }

    fn resp(segments: Vec<Segment>) -> AttributedResponse {
        AttributedResponse { segments }
    }

    #[test]
    fn table_identities() {
        assert!((round1(f1(76.3, 74.4)) - 75.3).abs() <= 0.05);
        assert!((mean(&[75.3, 54.8, 29.6]).unwrap() - 53.2).abs() <= 0.05);
        assert!((improvement(53.2, 50.3).unwrap() - 5.8).abs() <= 0.1);
        assert!((improvement(24.3, 20.7).unwrap() - 17.4).abs() <= 0.1);
        assert_eq!(f1(42.0, 42.0), 42.0);
        assert_eq!(f1(0.0, 70.0), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!(improvement(1.0, 0.0).is_err());
        assert_eq!(mean(&[]), None);
    }

    #[test]
    fn recall_counts() {
        let v = vocab();
        let o = FactContainment::new(v.clone());
        let d = docs(&v);
        let r = resp(vec![seg(vec![100, 101], vec![1]), seg(vec![102], vec![])]);
        assert_eq!(citation_recall(&r, &d, &o), 0.5);
        // Support may need the union of several documents.
        let r = resp(vec![seg(vec![100, 103], vec![1, 3])]);
        assert_eq!(citation_recall(&r, &d, &o), 1.0);
        let r = resp(vec![seg(vec![100, 103], vec![1])]);
        assert_eq!(citation_recall(&r, &d, &o), 0.0);
        assert_eq!(citation_recall(&resp(vec![]), &d, &o), 0.0);
    }

    #[test]
    fn precision_counts() {
        let v = vocab();
        let o = FactContainment::new(v.clone());
        let d = docs(&v);
        let r = resp(vec![seg(vec![100, 101], vec![1, 2]), seg(vec![103], vec![3])]);
        assert!((citation_precision(&r, &d, &o) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(citation_precision(&resp(vec![seg(vec![100], vec![])]), &d, &o), 0.0);
        assert_eq!(citation_precision(&resp(vec![]), &d, &o), 1.0);
        // Citations to documents that do not exist are irrelevant.
        assert_eq!(citation_precision(&resp(vec![seg(vec![100], vec![7])]), &d, &o), 0.0);
    }

    #[test]
    fn factless_sentences_are_unsupported() {
        let v = vocab();
        let o = FactContainment::new(v.clone());
        let d = docs(&v);
        let r = resp(vec![seg(vec![40], vec![1])]);
        assert_eq!(citation_recall(&r, &d, &o), 0.0);
        assert_eq!(citation_precision(&r, &d, &o), 0.0);
    }

    #[test]
    fn correctness_counts() {
        let v = vocab();
        let gold = resp(vec![seg(vec![100, 101], vec![1]), seg(vec![102, 103], vec![2])]);
        assert_eq!(correctness(&gold, &gold, &v), 1.0);
        assert_eq!(correctness(&resp(vec![]), &gold, &v), 0.0);
        let partial = resp(vec![seg(vec![100, 101, 102, 40], vec![])]);
        assert_eq!(correctness(&partial, &gold, &v), 0.75);
    }

    #[test]
    fn extra_irrelevant_citation() {
        let v = vocab();
        let o = FactContainment::new(v.clone());
        for ex in generate_synthetic_corpus(3, 20, 4, 2, &v).unwrap() {
            let k = ex.gold.n_citations();
            let mut r = ex.gold.clone();
            // Cite a document that shares no facts with the first sentence.
            let own = r.segments[0].citations[0];
            let other = (1..=4).find(|&m| m != own).unwrap();
            r.segments[0].citations.push(other);
            let p = citation_precision(&r, &ex.documents, &o);
            assert!((p - k as f64 / (k + 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn gold_scores_perfect() {
        let v = vocab();
        let o = FactContainment::new(v.clone());
        let examples = generate_synthetic_corpus(11, 30, 4, 2, &v).unwrap();
        let golds: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
        let report = evaluate(&examples, &golds, &o, &v).unwrap();
        assert_eq!(report.percent.citation_f1, 100.0);
        assert_eq!(report.percent.citation_precision, 100.0);
        assert_eq!(report.percent.citation_recall, 100.0);
        assert_eq!(report.percent.correctness, 100.0);
        let stripped: Vec<_> = golds
            .iter()
            .map(|g| resp(g.segments.iter().map(|s| seg(s.sentence.clone(), vec![])).collect()))
            .collect();
        let report = evaluate(&examples, &stripped, &o, &v).unwrap();
        assert_eq!(report.aggregate.citation_recall, 0.0);
        assert!(evaluate(&examples, &stripped[1..], &o, &v).is_err());
    }

    #[test]
    fn judgment_table_oracle() {
        let v = vocab();
        let d = docs(&v);
        let table = JudgmentTable::from_json(
            r#"[{"sentence":[100],"documents":[2,1],"supported":true},
                {"sentence":[100],"documents":[3],"supported":true}]"#,
        )
        .unwrap();
        let r = resp(vec![seg(vec![100], vec![1, 2])]);
        assert_eq!(citation_recall(&r, &d, &table), 1.0);
        assert_eq!(citation_precision(&r, &d, &table), 0.0);
        let r = resp(vec![seg(vec![100], vec![3])]);
        assert_eq!(citation_precision(&r, &d, &table), 1.0);
    }

    #[test]
    fn report_json_schema() {
        let v = vocab();
        let examples = generate_synthetic_corpus(2, 3, 2, 1, &v).unwrap();
        let golds: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
        let report = evaluate(&examples, &golds, &FactContainment::new(v.clone()), &v).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        for key in ["n_examples", "n_sentences", "n_citations", "aggregate", "percent", "per_example"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        assert!(value["per_example"][0].get("citation_f1").is_some());
        let back: MetricsReport = serde_json::from_value(value).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn heatmap_export() {
        let config = BackboneConfig {
            hidden_size: 16,
            n_heads: 2,
            max_seq_len: 128,
            ..Default::default()
        };
        let state = ModelState::init(&config).unwrap();
        let v = state.vocab();
        let ex = generate_synthetic_corpus(4, 1, 3, 1, &v).unwrap().remove(0);
        let mut tokens = assemble_prompt(&ex, &v).unwrap().tokens;
        let start = tokens.len();
        tokens.extend(ex.gold.to_tagged(&v).unwrap());
        let set = build_citation_set(&state, &ex.documents).unwrap();
        let trace = forward(&state, &splice(&state, &tokens, &set).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let full = export_heatmap(&trace, &tokens, 0..tokens.len(), &v, &dir.path().join("full.csv")).unwrap();
        let text = fs::read_to_string(&full.csv).unwrap();
        for (i, line) in text.lines().enumerate() {
            let row: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(row.len(), tokens.len());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }

        let region = start..tokens.len();
        let path = dir.path().join("resp.csv");
        let files = export_heatmap(&trace, &tokens, region.clone(), &v, &path).unwrap();
        let first = (fs::read(&files.csv).unwrap(), fs::read(&files.index).unwrap());
        let text = String::from_utf8(first.0.clone()).unwrap();
        assert_eq!(text.lines().count(), region.len());
        let index: HeatmapIndex = serde_json::from_slice(&first.1).unwrap();
        assert_eq!(index.positions.len(), region.len());
        assert!(index.positions.iter().any(|p| p.role == Role::Citation && p.text.starts_with('[')));
        assert!(index.row_mass.iter().all(|&m| m > 0.0 && m <= 1.0 + 1e-12));

        export_heatmap(&trace, &tokens, region.clone(), &v, &path).unwrap();
        assert_eq!(fs::read(&files.csv).unwrap(), first.0);
        assert_eq!(fs::read(&files.index).unwrap(), first.1);
        assert!(export_heatmap(&trace, &tokens[1..], region, &v, &path).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_mean_bounded(p in 0.0f64..=100.0, r in 0.0f64..=100.0) {
            let h = f1(p, r);
            prop_assert!(h <= p.max(r) + 1e-12);
            prop_assert!(h <= p.min(r) * 2.0 + 1e-12);
            prop_assert!(h >= 0.0);
        }

        #[test]
        fn gold_is_perfect_and_perturbations_are_monotone(seed in any::<u64>(), drop in 0usize..16) {
            let v = vocab();
            let o = FactContainment::new(v.clone());
            let ex = generate_synthetic_corpus(seed, 1, 4, 2, &v).unwrap().remove(0);
            let gold = &ex.gold;
            prop_assert_eq!(citation_recall(gold, &ex.documents, &o), 1.0);
            prop_assert_eq!(citation_precision(gold, &ex.documents, &o), 1.0);

            let mut fewer = gold.clone();
            let i = drop % fewer.segments.len();
            fewer.segments[i].citations.clear();
            prop_assert!(citation_recall(&fewer, &ex.documents, &o) <= 1.0 - 1.0 / 4.0 + 1e-12);

            let mut more = gold.clone();
            let own = more.segments[i].citations[0];
            more.segments[i].citations.push(own % 4 + 1);
            prop_assert!(citation_precision(&more, &ex.documents, &o) < 1.0);
        }
    }
}
