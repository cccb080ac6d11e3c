use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributedResponse, Document, Example, Segment};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Shared word-band tokens mixed into each document alongside its facts.
pub const FILLERS_PER_DOC: usize = 2;
/// Word-band tokens opening each query.
pub const QUERY_WORDS: usize = 2;

/// Deterministic symbolic QA corpus.
///
/// Each example draws `n_docs * facts_per_doc` distinct fact tokens and deals
/// them out to the documents, shuffled together with a few filler words. The
/// gold response visits every document once, in a random order, with one
/// sentence per document that repeats the document's facts in document order
/// and cites it. The query opens with filler words and then lists the first
/// fact of each document in answer order, which is what makes the answer
/// predictable from the prompt.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_examples: usize,
    n_docs: usize,
    facts_per_doc: usize,
    vocab: &Vocab,
) -> Result<Vec<Example>> {
    if n_examples == 0 || n_docs == 0 || facts_per_doc == 0 {
        return Err(Error::InvalidConfig(
            "n_examples, n_docs and facts_per_doc must all be at least 1".into(),
        ));
    }
    if n_docs > vocab.n_citation() {
        return Err(Error::InvalidConfig(format!(
            "n_docs {n_docs} exceeds the {} reserved citation tokens",
            vocab.n_citation()
        )));
    }
    let facts = vocab.fact_band();
    let requested = n_docs * facts_per_doc;
    if requested > facts.len() {
        return Err(Error::VocabularyExhausted {
            requested,
            available: facts.len(),
        });
    }
    let words = vocab.word_band();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let drawn: Vec<usize> = index::sample(&mut rng, facts.len(), requested)
            .into_iter()
            .map(|i| facts.start + i)
            .collect();
        let mut documents = Vec::with_capacity(n_docs);
        let mut doc_facts = Vec::with_capacity(n_docs);
        for (d, chunk) in drawn.chunks(facts_per_doc).enumerate() {
            let mut tokens = chunk.to_vec();
            for _ in 0..FILLERS_PER_DOC {
                tokens.push(rng.random_range(words.clone()));
            }
            tokens.shuffle(&mut rng);
            let in_order: Vec<usize> = tokens.iter().copied().filter(|&t| vocab.is_fact(t)).collect();
            doc_facts.push(in_order);
            documents.push(Document::new(d + 1, tokens, vocab));
        }
        let mut order: Vec<usize> = (0..n_docs).collect();
        order.shuffle(&mut rng);
        let mut query: Vec<usize> = (0..QUERY_WORDS)
            .map(|_| rng.random_range(words.clone()))
            .collect();
        query.extend(order.iter().map(|&d| doc_facts[d][0]));
        let segments = order
            .iter()
            .map(|&d| Segment {
                sentence: doc_facts[d].clone(),
                citations: vec![d + 1],
            })
            .collect();
        out.push(Example {
            query,
            documents,
            gold: AttributedResponse { segments },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(512, 8).unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let v = vocab();
        let a = generate_synthetic_corpus(7, 20, 4, 2, &v).unwrap();
        let b = generate_synthetic_corpus(7, 20, 4, 2, &v).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(8, 20, 4, 2, &v).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn facts_are_owned_by_one_document() {
        let v = vocab();
        for ex in generate_synthetic_corpus(3, 50, 3, 2, &v).unwrap() {
            let mut seen = HashSet::new();
            for d in &ex.documents {
                let facts: Vec<_> = d.tokens.iter().filter(|&&t| v.is_fact(t)).collect();
                assert_eq!(facts.len(), 2);
                for f in facts {
                    assert!(seen.insert(*f), "fact {f} shared across documents");
                }
            }
        }
    }

    #[test]
    fn gold_sentences_copy_one_document_and_cite_it() {
        let v = vocab();
        for ex in generate_synthetic_corpus(11, 30, 4, 3, &v).unwrap() {
            assert_eq!(ex.gold.segments.len(), 4);
            for seg in &ex.gold.segments {
                assert_eq!(seg.citations.len(), 1);
                let doc = &ex.documents[seg.citations[0] - 1];
                assert!(seg.sentence.iter().all(|t| doc.tokens.contains(t)));
            }
        }
    }

    #[test]
    fn bounds_are_enforced() {
        let v = vocab();
        assert!(matches!(
            generate_synthetic_corpus(1, 1, 8, 60, &v),
            Err(Error::VocabularyExhausted { requested: 480, available: 408 })
        ));
        assert!(generate_synthetic_corpus(1, 1, 9, 1, &v).is_err());
        assert!(generate_synthetic_corpus(1, 0, 2, 1, &v).is_err());
        assert!(generate_synthetic_corpus(1, 1, 8, 51, &v).is_ok());
    }

    proptest! {
        #[test]
        fn generated_examples_are_valid(seed in any::<u64>(), n_docs in 1usize..=8, fpd in 1usize..=4) {
            let v = vocab();
            for ex in generate_synthetic_corpus(seed, 3, n_docs, fpd, &v).unwrap() {
                prop_assert!(ex.validate(&v).is_ok());
                prop_assert_eq!(ex.query.len(), QUERY_WORDS + n_docs);
            }
        }
    }
}
