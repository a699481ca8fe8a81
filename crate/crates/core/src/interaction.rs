//! Query-document interaction inputs: tokenization, passage windowing,
//! `[CLS] query [SEP] passage [SEP]` sequence construction, and CLS vector
//! extraction.
//!
//! The tokenizer is deliberately simple: lowercase, split on any
//! non-alphanumeric character, then hash each word into a fixed id space
//! with FNV-1a. Ids 0..3 are reserved for `[PAD]`, `[CLS]`, `[SEP]`, and
//! `[UNK]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamBinder};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_IDS: u32 = 4;

pub const DEFAULT_VOCAB_SIZE: usize = 30_000;
pub const DEFAULT_WINDOW: usize = 150;
pub const DEFAULT_STRIDE: usize = 75;
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

/// Lowercased words split on non-alphanumeric boundaries.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Stable FNV-1a word hash into [RESERVED_IDS, vocab_size).
pub fn token_id(word: &str, vocab_size: usize) -> u32 {
    debug_assert!(vocab_size > RESERVED_IDS as usize);
    let space = vocab_size as u64 - RESERVED_IDS as u64;
    RESERVED_IDS + (fnv1a(word.as_bytes()) % space) as u32
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Lowercase, split, and map words to vocabulary ids.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    words(text)
        .iter()
        .map(|w| token_id(w, vocab_size))
        .collect()
}

/// A `[CLS] query [SEP] passage [SEP]` input, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    /// 0 through the first [SEP] inclusive, 1 afterwards, 0 on padding
    pub segment_ids: Vec<u8>,
    /// false on padding
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    /// Number of real (unmasked) positions; padding is always a suffix.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m).count()
    }
}

/// A fixed-length window of document words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub doc_id: String,
    pub start_word: usize,
    pub words: Vec<String>,
}

/// Split a document into overlapping windows. A document that fits in one
/// window (including the empty document) is a single passage; longer
/// documents emit a passage at every stride multiple below the length.
pub fn window_passages(
    doc_id: &str,
    doc_words: &[String],
    window: usize,
    stride: usize,
) -> Result<Vec<Passage>> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be positive".into()));
    }
    if stride == 0 || stride > window {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} must be in 1..=window ({window})"
        )));
    }
    if doc_words.len() <= window {
        return Ok(vec![Passage {
            doc_id: doc_id.to_string(),
            start_word: 0,
            words: doc_words.to_vec(),
        }]);
    }
    let mut passages = Vec::new();
    let mut start = 0;
    while start < doc_words.len() {
        let end = (start + window).min(doc_words.len());
        passages.push(Passage {
            doc_id: doc_id.to_string(),
            start_word: start,
            words: doc_words[start..end].to_vec(),
        });
        start += stride;
    }
    Ok(passages)
}

/// Build the padded `[CLS] q [SEP] p [SEP]` sequence. Over-long passages
/// are truncated from the right so the final `[SEP]` survives.
pub fn build_sequence(
    query_tokens: &[u32],
    passage_tokens: &[u32],
    max_seq_len: usize,
) -> Result<TokenSequence> {
    if query_tokens.is_empty() {
        return Err(Error::Invalid("query produced no tokens".into()));
    }
    let needed = query_tokens.len() + 3; // [CLS], [SEP], [SEP]
    if needed > max_seq_len {
        return Err(Error::QueryTooLong {
            needed,
            max: max_seq_len,
        });
    }
    let budget = max_seq_len - needed;
    let passage = &passage_tokens[..passage_tokens.len().min(budget)];

    let mut token_ids = Vec::with_capacity(max_seq_len);
    let mut segment_ids = Vec::with_capacity(max_seq_len);
    let mut attention_mask = Vec::with_capacity(max_seq_len);

    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(query_tokens);
    token_ids.push(SEP_ID);
    segment_ids.resize(token_ids.len(), 0);

    token_ids.extend_from_slice(passage);
    token_ids.push(SEP_ID);
    segment_ids.resize(token_ids.len(), 1);

    attention_mask.resize(token_ids.len(), true);

    token_ids.resize(max_seq_len, PAD_ID);
    segment_ids.resize(max_seq_len, 0);
    attention_mask.resize(max_seq_len, false);

    Ok(TokenSequence {
        token_ids,
        segment_ids,
        attention_mask,
    })
}

/// Run a token sequence through the interaction encoder and return the
/// output at position 0 (the `[CLS]` slot) as a 1 x H node.
///
/// Trailing padded positions are dropped before encoding; masked positions
/// cannot change unmasked outputs, so the CLS vector is unaffected.
pub fn interaction_vector<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    encoder: &Encoder,
    seq: &TokenSequence,
) -> Result<NodeId> {
    let len = seq.content_len();
    let out = encoder.encode_tokens(
        g,
        binder,
        &seq.token_ids[..len],
        &seq.segment_ids[..len],
        &seq.attention_mask[..len],
    )?;
    g.slice_rows(out, 0, 1)
}

/// Pick the passage maximizing the scorer; ties go to the smallest start
/// offset. Returns the winning passage and its score.
pub fn select_max_passage<'a, F>(
    passages: &'a [Passage],
    mut scorer: F,
) -> Result<(&'a Passage, f64)>
where
    F: FnMut(&Passage) -> Result<f64>,
{
    if passages.is_empty() {
        return Err(Error::Invalid("document has no passages".into()));
    }
    let mut best = 0;
    let mut best_score = scorer(&passages[0])?;
    for (i, p) in passages.iter().enumerate().skip(1) {
        let s = scorer(p)?;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((&passages[best], best_score))
}

/// One corpus document: JSONL with fields `doc_id` and `text`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let content = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::ParseLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Queries as `qid<TAB>text`, one per line.
pub fn read_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut queries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line.split_once('\t').ok_or_else(|| Error::ParseLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected qid<TAB>text".into(),
        })?;
        queries.push((qid.trim().to_string(), text.trim().to_string()));
    }
    Ok(queries)
}

pub fn write_queries(queries: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, text) in queries {
        out.push_str(qid);
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_tokenizes_to_nothing() {
        assert!(tokenize("", DEFAULT_VOCAB_SIZE).is_empty());
        assert!(tokenize("  \t\n ", DEFAULT_VOCAB_SIZE).is_empty());
    }

    #[test]
    fn case_folding_maps_to_one_id() {
        let ids = tokenize("The THE the", DEFAULT_VOCAB_SIZE);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[1], ids[2]);
    }

    #[test]
    fn repeated_words_get_equal_ids() {
        let ids = tokenize("a b a", DEFAULT_VOCAB_SIZE);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], ids[2]);
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn ids_avoid_reserved_range() {
        for w in ["a", "zz", "punctuation", "42"] {
            assert!(token_id(w, 100) >= RESERVED_IDS);
            assert!(token_id(w, 100) < 100);
        }
    }

    #[test]
    fn punctuation_splits_words() {
        assert_eq!(words("state-of-the-art, really?"), vec![
            "state", "of", "the", "art", "really"
        ]);
    }

    #[test]
    fn short_document_is_one_passage() {
        let w: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let p = window_passages("d", &w, 150, 75).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].start_word, 0);
        assert_eq!(p[0].words.len(), 100);
    }

    #[test]
    fn three_hundred_words_cover_the_tail() {
        let w: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let p = window_passages("d", &w, 150, 75).unwrap();
        let starts: Vec<usize> = p.iter().map(|x| x.start_word).collect();
        assert!(starts.starts_with(&[0, 75, 150]));
        // word 299 is covered
        assert!(p
            .iter()
            .any(|x| x.start_word + x.words.len() == 300));
        // enumeration oracle: starts are i*stride while start < len
        let expected: Vec<usize> = (0..).map(|i| i * 75).take_while(|&s| s < 300).collect();
        assert_eq!(starts, expected);
    }

    #[test]
    fn short_tail_still_gets_a_passage() {
        let w: Vec<String> = (0..160).map(|i| format!("w{i}")).collect();
        let p = window_passages("d", &w, 150, 75).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].start_word, 0);
        assert_eq!(p[1].start_word, 75);
        assert_eq!(p[2].start_word, 150);
        assert_eq!(p[2].words.len(), 10);
    }

    #[test]
    fn empty_document_yields_single_empty_passage() {
        let p = window_passages("d", &[], 150, 75).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].words.is_empty());
    }

    #[test]
    fn every_word_lands_in_some_passage() {
        for len in [1usize, 5, 74, 75, 76, 149, 150, 151, 299, 300, 301] {
            let w: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
            let p = window_passages("d", &w, 150, 75).unwrap();
            let mut covered = vec![false; len];
            for pass in &p {
                for i in pass.start_word..pass.start_word + pass.words.len() {
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "len {len}");
        }
    }

    #[test]
    fn sequence_layout_matches_construction_rule() {
        // query [a,b], passage [c]
        let seq = build_sequence(&[10, 11], &[12], 10).unwrap();
        assert_eq!(
            seq.token_ids,
            vec![CLS_ID, 10, 11, SEP_ID, 12, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
        );
        assert_eq!(seq.segment_ids, vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(
            seq.attention_mask,
            vec![true, true, true, true, true, true, false, false, false, false]
        );
    }

    #[test]
    fn overlong_passage_truncates_keeping_final_sep() {
        let passage: Vec<u32> = (10..1010).collect();
        let seq = build_sequence(&[5, 6], &passage, 256).unwrap();
        assert_eq!(seq.token_ids.len(), 256);
        assert_eq!(seq.content_len(), 256);
        assert_eq!(*seq.token_ids.last().unwrap(), SEP_ID);
        assert_eq!(*seq.segment_ids.last().unwrap(), 1);
    }

    #[test]
    fn empty_passage_keeps_both_separators() {
        let seq = build_sequence(&[7], &[], 8).unwrap();
        assert_eq!(seq.token_ids[..4], [CLS_ID, 7, SEP_ID, SEP_ID]);
        assert_eq!(seq.segment_ids[..4], [0, 0, 0, 1]);
        assert_eq!(seq.content_len(), 4);
    }

    #[test]
    fn oversized_query_is_rejected() {
        let query: Vec<u32> = (10..20).collect();
        let err = build_sequence(&query, &[], 12).unwrap_err();
        assert!(err.to_string().contains("query too long"));
    }

    #[test]
    fn segments_never_one_before_first_sep() {
        let seq = build_sequence(&[4, 5, 6], &[7, 8], 16).unwrap();
        let first_sep = seq.token_ids.iter().position(|&t| t == SEP_ID).unwrap();
        for i in 0..=first_sep {
            assert_eq!(seq.segment_ids[i], 0);
        }
    }

    #[test]
    fn max_passage_prefers_earliest_on_ties() {
        let w: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let passages = window_passages("d", &w, 150, 75).unwrap();
        // constant scorer: earliest passage wins
        let (best, score) = select_max_passage(&passages, |_| Ok(1.0)).unwrap();
        assert_eq!(best.start_word, 0);
        assert_eq!(score, 1.0);
        // length scorer: longest (the full windows), earliest among them
        let (best, _) = select_max_passage(&passages, |p| Ok(p.words.len() as f64)).unwrap();
        assert_eq!(best.start_word, 0);
    }

    #[test]
    fn max_passage_matches_brute_force_on_random_scores() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let passages = window_passages("d", &w, 150, 75).unwrap();
        for _ in 0..50 {
            let scores: Vec<f64> = (0..passages.len()).map(|_| rng.random()).collect();
            let (best, got) = select_max_passage(&passages, |p| {
                Ok(scores[p.start_word / 75])
            })
            .unwrap();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got, max);
            assert_eq!(scores[best.start_word / 75], max);
        }
    }

    #[test]
    fn corpus_roundtrip_and_bad_line_reporting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let docs = vec![
            Document {
                doc_id: "d1".into(),
                text: "hello world".into(),
            },
            Document {
                doc_id: "d2".into(),
                text: "".into(),
            },
        ];
        write_corpus(&docs, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), docs);

        std::fs::write(&path, "{\"doc_id\": \"a\", \"text\": \"x\"}\nnot json\n").unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn queries_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.tsv");
        let qs = vec![
            ("301".to_string(), "international organized crime".to_string()),
            ("302".to_string(), "poliomyelitis and post polio".to_string()),
        ];
        write_queries(&qs, &path).unwrap();
        assert_eq!(read_queries(&path).unwrap(), qs);
    }
}
