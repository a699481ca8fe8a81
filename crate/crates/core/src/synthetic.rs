//! Synthetic ranking corpora with controllable relevance structure.
//!
//! Relevance is a function of query-term overlap plus two context signals
//! that pointwise term matching cannot resolve, both of which require
//! comparing a candidate against other documents rather than memorizing
//! token identities:
//!
//! * a per-query feature count: every document repeats a global feature
//!   token some number of times, and relevant documents keep that count
//!   within one of a hidden per-query center. The top-ranked feedback
//!   documents carry the center exactly, so calibration against them
//!   reveals it. A larger block of center distractors sits at a far-off
//!   decoy count, so the majority count inside a candidate group points at
//!   the wrong value.
//! * duplicate clusters: a few strong documents each drag two weaker
//!   near-copies (same feature count, same padding words) into the
//!   ranking. Only the strongest member of each cluster is relevant; the
//!   copies match the query exactly as well as ordinary relevant documents
//!   and can only be recognized by their similarity to a stronger
//!   group-mate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::Qrels;
use crate::interaction::Document;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub queries: usize,
    pub docs_per_query: usize,
    pub seed: u64,
    /// very strong term matches; relevant, feature count exactly centered
    pub anchors: usize,
    /// ordinary relevant documents (mid-tier term matches, centered)
    pub standard_relevant: usize,
    /// clusters of one relevant winner plus two non-relevant near-copies
    pub dup_clusters: usize,
    /// mid-tier term matches whose feature count sits at the decoy value
    pub center_distractors: usize,
    /// words per document
    pub doc_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            queries: 50,
            docs_per_query: 200,
            seed: 1,
            anchors: 5,
            standard_relevant: 26,
            dup_clusters: 0,
            center_distractors: 44,
            doc_len: 32,
        }
    }
}

impl SyntheticSpec {
    fn structured_docs(&self) -> usize {
        self.anchors + self.standard_relevant + 3 * self.dup_clusters + self.center_distractors
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.docs_per_query == 0 {
            return Err(Error::InvalidConfig(
                "synthetic corpus needs queries and documents".into(),
            ));
        }
        if self.anchors < 1 {
            return Err(Error::InvalidConfig("need at least one anchor document".into()));
        }
        if self.structured_docs() > self.docs_per_query {
            return Err(Error::InvalidConfig(format!(
                "{} structured documents exceed docs_per_query {}",
                self.structured_docs(),
                self.docs_per_query
            )));
        }
        if self.doc_len < 30 {
            return Err(Error::InvalidConfig("doc_len must be at least 30".into()));
        }
        Ok(())
    }
}

/// Construction role of a document, for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DocKind {
    Anchor,
    Relevant,
    ClusterWinner,
    ClusterFollower,
    CenterDistractor,
    Easy,
}

pub struct SyntheticData {
    pub corpus: Vec<Document>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
    /// doc id -> construction role
    pub kinds: std::collections::BTreeMap<String, DocKind>,
}

const FEATURE: &str = "featmark";
const FILLER_POOL: usize = 60;
const CLUSTER_FILLERS: usize = 26;

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.queries * spec.docs_per_query);
    let mut queries = Vec::with_capacity(spec.queries);
    let mut qrels = Qrels::new();
    let mut kinds = std::collections::BTreeMap::new();

    for qi in 0..spec.queries {
        let qid = format!("{}", 101 + qi);
        // disjoint topic triples keep each query's candidate pool clean
        let topics: Vec<String> = (0..3).map(|t| format!("topic{:03}", 3 * qi + t)).collect();
        queries.push((qid.clone(), topics.join(" ")));
        let center: i64 = rng.random_range(3..=7);
        // the decoy count is well separated from the true center
        let decoy: i64 = if center >= 5 {
            rng.random_range(0..=center - 3)
        } else {
            rng.random_range(center + 3..=10)
        };

        let near = |rng: &mut ChaCha8Rng, c: i64| -> usize {
            (c + rng.random_range(-1..=1)).clamp(0, 10) as usize
        };

        let mut plans: Vec<DocPlan> = Vec::with_capacity(spec.docs_per_query);
        for _ in 0..spec.anchors {
            plans.push(DocPlan {
                kind: DocKind::Anchor,
                topic_count: rng.random_range(14..=16),
                feature: center as usize,
                fillers: None,
                relevant: true,
            });
        }
        for _ in 0..spec.standard_relevant {
            plans.push(DocPlan {
                kind: DocKind::Relevant,
                topic_count: rng.random_range(9..=11),
                feature: near(&mut rng, center),
                fillers: None,
                relevant: true,
            });
        }
        for _ in 0..spec.dup_clusters {
            // members share the feature count and the padding word list
            let shared: Vec<String> = (0..CLUSTER_FILLERS)
                .map(|_| format!("filler{:02}", rng.random_range(0..FILLER_POOL)))
                .collect();
            let v = near(&mut rng, center);
            plans.push(DocPlan {
                kind: DocKind::ClusterWinner,
                topic_count: rng.random_range(12..=13),
                feature: v,
                fillers: Some(shared.clone()),
                relevant: true,
            });
            for _ in 0..2 {
                plans.push(DocPlan {
                    kind: DocKind::ClusterFollower,
                    topic_count: rng.random_range(9..=11),
                    feature: v,
                    fillers: Some(shared.clone()),
                    relevant: false,
                });
            }
        }
        for _ in 0..spec.center_distractors {
            plans.push(DocPlan {
                kind: DocKind::CenterDistractor,
                topic_count: rng.random_range(9..=11),
                feature: near(&mut rng, decoy),
                fillers: None,
                relevant: false,
            });
        }
        while plans.len() < spec.docs_per_query {
            plans.push(DocPlan {
                kind: DocKind::Easy,
                topic_count: rng.random_range(1..=3),
                feature: rng.random_range(0..=10),
                fillers: None,
                relevant: false,
            });
        }
        // doc ids must not correlate with the construction order, or id
        // tie-breaking would leak labels into term-match rankings
        plans.shuffle(&mut rng);

        for (di, plan) in plans.iter().enumerate() {
            let doc_id = format!("q{qid}d{di:03}");
            let text = plan.render(&topics, spec.doc_len, &mut rng);
            qrels.insert(&qid, &doc_id, u32::from(plan.relevant));
            kinds.insert(doc_id.clone(), plan.kind);
            corpus.push(Document { doc_id, text });
        }
    }
    Ok(SyntheticData {
        corpus,
        queries,
        qrels,
        kinds,
    })
}

struct DocPlan {
    kind: DocKind,
    topic_count: usize,
    feature: usize,
    /// shared padding words for cluster members
    fillers: Option<Vec<String>>,
    relevant: bool,
}

impl DocPlan {
    fn render(&self, topics: &[String], doc_len: usize, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = Vec::with_capacity(doc_len);
        for i in 0..self.topic_count {
            words.push(topics[i % topics.len()].clone());
        }
        for _ in 0..self.feature {
            words.push(FEATURE.to_string());
        }
        match &self.fillers {
            Some(shared) => {
                let mut i = 0;
                while words.len() < doc_len {
                    words.push(shared[i % shared.len()].clone());
                    i += 1;
                }
            }
            None => {
                while words.len() < doc_len {
                    words.push(format!("filler{:02}", rng.random_range(0..FILLER_POOL)));
                }
            }
        }
        words.truncate(doc_len);
        words.shuffle(rng);
        words.join(" ")
    }
}
