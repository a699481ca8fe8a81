//! First-stage retrieval: an inverted index with BM25 scoring, used to
//! produce the top-k candidate pool and the initial ranking.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::interaction::{words, Document};

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;
pub const DEFAULT_TOP_K: usize = 1000;

const INDEX_MAGIC: &[u8; 8] = b"CRNKIDX1";

/// Term postings over a fixed corpus. Postings are sorted by document
/// ordinal; doc ordinals follow corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

/// One query's ranking: (doc_id, score) sorted by score descending,
/// ties by doc id ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn doc_ids(&self) -> Vec<String> {
        self.entries.iter().map(|(d, _)| d.clone()).collect()
    }
}

impl InvertedIndex {
    pub fn build(corpus: &[Document]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("cannot index an empty corpus".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut total_len: u64 = 0;

        for (ord, doc) in corpus.iter().enumerate() {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::DuplicateDocId(doc.doc_id.clone()));
            }
            let tokens = words(&doc.text);
            total_len += tokens.len() as u64;
            doc_ids.push(doc.doc_id.clone());
            doc_lengths.push(tokens.len() as u32);

            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, freq) in tf {
                postings.entry(term).or_default().push((ord as u32, freq));
            }
        }

        Ok(Self {
            avg_doc_length: total_len as f64 / doc_ids.len() as f64,
            doc_ids,
            doc_lengths,
            postings,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, |p| p.len())
    }

    /// Lucene-style idf: `ln((N - df + 0.5) / (df + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.document_frequency(term) as f64;
        if df == 0.0 {
            return 0.0;
        }
        let n = self.doc_count() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn bm25_term(&self, idf: f64, tf: f64, doc_len: f64) -> f64 {
        let norm = if self.avg_doc_length > 0.0 {
            doc_len / self.avg_doc_length
        } else {
            0.0
        };
        idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
    }

    /// Score free-standing text (e.g. one passage) against query words
    /// using this index's statistics.
    pub fn score_text(&self, query_words: &[String], text_words: &[String]) -> f64 {
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for w in text_words {
            *tf.entry(w.as_str()).or_insert(0) += 1;
        }
        let len = text_words.len() as f64;
        let mut score = 0.0;
        for q in query_words {
            let f = tf.get(q.as_str()).copied().unwrap_or(0) as f64;
            if f > 0.0 {
                score += self.bm25_term(self.idf(q), f, len);
            }
        }
        score
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.doc_ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.avg_doc_length.to_le_bytes());
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u32).to_le_bytes());
        for (term, posts) in &self.postings {
            out.extend_from_slice(&(term.len() as u32).to_le_bytes());
            out.extend_from_slice(term.as_bytes());
            out.extend_from_slice(&(posts.len() as u32).to_le_bytes());
            for &(ord, tf) in posts {
                out.extend_from_slice(&ord.to_le_bytes());
                out.extend_from_slice(&tf.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::InvalidIndex("bad magic".into()));
        }
        let n = r.u32()? as usize;
        let avg = r.f64()?;
        let mut doc_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            doc_ids.push(
                String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::InvalidIndex("doc id not UTF-8".into()))?,
            );
            doc_lengths.push(r.u32()?);
        }
        let terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..terms {
            let len = r.u32()? as usize;
            let term = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::InvalidIndex("term not UTF-8".into()))?;
            let count = r.u32()? as usize;
            let mut posts = Vec::with_capacity(count);
            for _ in 0..count {
                let ord = r.u32()?;
                let tf = r.u32()?;
                if ord as usize >= n {
                    return Err(Error::InvalidIndex(format!("doc ordinal {ord} out of range")));
                }
                posts.push((ord, tf));
            }
            postings.insert(term, posts);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidIndex("trailing bytes".into()));
        }
        let index = Self {
            doc_ids,
            doc_lengths,
            avg_doc_length: avg,
            postings,
        };
        let recomputed = index.doc_lengths.iter().map(|&l| l as u64).sum::<u64>() as f64
            / index.doc_count() as f64;
        if (recomputed - index.avg_doc_length).abs() > 1e-9 {
            return Err(Error::InvalidIndex("stored average length is inconsistent".into()));
        }
        Ok(index)
    }
}

/// Standard BM25 over the query's word multiset; documents matching no
/// query term are not returned.
pub fn bm25_search(index: &InvertedIndex, query_id: &str, query: &str, k: usize) -> RankedList {
    let query_words = words(query);
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for term in &query_words {
        let Some(posts) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(term);
        for &(ord, tf) in posts {
            let len = index.doc_lengths[ord as usize] as f64;
            *scores.entry(ord).or_insert(0.0) += index.bm25_term(idf, tf as f64, len);
        }
    }
    let mut entries: Vec<(String, f64)> = scores
        .into_iter()
        .map(|(ord, s)| (index.doc_ids[ord as usize].clone(), s))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    RankedList {
        query_id: query_id.to_string(),
        entries,
    }
}

/// The top-m documents of a first-pass ranking, used as feedback documents.
pub fn select_prf(ranking: &[String], m: usize) -> Result<Vec<String>> {
    if ranking.len() < m {
        return Err(Error::Invalid(format!(
            "cannot select {m} feedback documents from a ranking of {}",
            ranking.len()
        )));
    }
    Ok(ranking[..m].to_vec())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::InvalidIndex("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn single_doc_postings() {
        let index = InvertedIndex::build(&[doc("d", "a b a")]).unwrap();
        assert_eq!(index.doc_count(), 1);
        assert_eq!(index.avg_doc_length(), 3.0);
        assert_eq!(index.postings["a"], vec![(0, 2)]);
        assert_eq!(index.postings["b"], vec![(0, 1)]);
    }

    #[test]
    fn empty_document_is_indexed_with_zero_length() {
        let index = InvertedIndex::build(&[doc("d1", "x"), doc("d2", "")]).unwrap();
        assert_eq!(index.doc_count(), 2);
        assert_eq!(index.doc_lengths[1], 0);
        assert!(index.postings.values().all(|p| p.iter().all(|&(o, _)| o == 0)));
    }

    #[test]
    fn duplicate_doc_id_is_rejected() {
        let err = InvertedIndex::build(&[doc("d", "a"), doc("d", "b")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateDocId(_)));
    }

    #[test]
    fn document_frequencies_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vocab = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
        let corpus: Vec<Document> = (0..1000)
            .map(|i| {
                let len = rng.random_range(0..30);
                let text = (0..len)
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ");
                doc(&format!("d{i:04}"), &text)
            })
            .collect();
        let index = InvertedIndex::build(&corpus).unwrap();
        for term in vocab {
            let expected = corpus
                .iter()
                .filter(|d| words(&d.text).iter().any(|w| w == term))
                .count();
            assert_eq!(index.document_frequency(term), expected, "{term}");
        }
    }

    #[test]
    fn bm25_hand_example_is_ln_two() {
        // two docs, one contains the term once, lengths equal so len = avglen
        let index = InvertedIndex::build(&[doc("d1", "term x y"), doc("d2", "a b c")]).unwrap();
        let r = bm25_search(&index, "q", "term", 10);
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].0, "d1");
        assert!((r.entries[0].1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn no_matching_terms_yields_empty_list() {
        let index = InvertedIndex::build(&[doc("d1", "a b")]).unwrap();
        let r = bm25_search(&index, "q", "zz yy", 10);
        assert!(r.entries.is_empty());
    }

    #[test]
    fn search_matches_exhaustive_scoring() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let vocab = ["aa", "bb", "cc", "dd", "ee", "ff", "gg"];
        let corpus: Vec<Document> = (0..200)
            .map(|i| {
                let len = rng.random_range(1..40);
                let text = (0..len)
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ");
                doc(&format!("d{i:03}"), &text)
            })
            .collect();
        let index = InvertedIndex::build(&corpus).unwrap();
        for query in ["aa", "bb cc", "dd dd ee", "gg ff aa bb"] {
            let got = bm25_search(&index, "q", query, 25);
            // oracle: score every document from its raw text
            let qw = words(query);
            let mut expected: Vec<(String, f64)> = corpus
                .iter()
                .map(|d| (d.doc_id.clone(), index.score_text(&qw, &words(&d.text))))
                .filter(|(_, s)| *s > 0.0)
                .collect();
            expected.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            expected.truncate(25);
            assert_eq!(got.entries.len(), expected.len());
            for ((gd, gs), (ed, es)) in got.entries.iter().zip(&expected) {
                assert_eq!(gd, ed, "query {query}");
                assert!((gs - es).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_nonnegative_and_deterministic() {
        let corpus = vec![doc("a", "x y z"), doc("b", "x x"), doc("c", "y")];
        let index = InvertedIndex::build(&corpus).unwrap();
        let r1 = bm25_search(&index, "q", "x y", 10);
        let r2 = bm25_search(&index, "q", "x y", 10);
        assert_eq!(r1, r2);
        assert!(r1.entries.iter().all(|(_, s)| *s >= 0.0));
    }

    #[test]
    fn index_roundtrip_through_disk() {
        let corpus = vec![doc("a", "the quick brown fox"), doc("b", "lazy dogs"), doc("c", "")];
        let index = InvertedIndex::build(&corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        index.save(&path).unwrap();
        let back = InvertedIndex::load(&path).unwrap();
        assert_eq!(index, back);
    }

    #[test]
    fn select_prf_takes_the_top() {
        let ranking: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
        assert_eq!(select_prf(&ranking, 1).unwrap(), vec!["d0"]);
        assert_eq!(select_prf(&ranking, 5).unwrap(), ranking);
        assert!(select_prf(&ranking, 6).is_err());
    }

    #[test]
    fn select_prf_matches_sort_then_take() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut scored: Vec<(String, f64)> = (0..30)
            .map(|i| (format!("d{i:02}"), rng.random::<f64>()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let ranking: Vec<String> = scored.iter().map(|(d, _)| d.clone()).collect();
        let got = select_prf(&ranking, 4).unwrap();
        assert_eq!(got, ranking[..4].to_vec());
    }
}
