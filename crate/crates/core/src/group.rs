//! Groupwise scoring: overlapping group scheduling over an initial ranking,
//! joint scoring of each group through an order-free encoder, and score
//! merging across groups.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamBinder};

/// Overlapping index windows over a ranking of `k` documents.
///
/// Windows use 1-based ranking positions. Group `g` starts at
/// `(g-1)*(n-o)+1`; consecutive groups share `o` positions; only the final
/// group may be shorter than `n`, and its trailing slots are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchedule {
    pub k: usize,
    pub n: usize,
    pub o: usize,
    pub groups: Vec<Group>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    /// 1-based first ranking position
    pub start: usize,
    /// 1-based ranking positions actually covered (no padding)
    pub indices: Vec<usize>,
    /// length n; true where a real document sits, false on padding
    pub pad_mask: Vec<bool>,
}

impl Group {
    pub fn padded_len(&self) -> usize {
        self.pad_mask.len()
    }
}

/// Number of groups needed to cover `k` documents with group size `n` and
/// overlap `o`: `ceil(max(k - o, 1) / (n - o))`.
pub fn group_count(k: usize, n: usize, o: usize) -> Result<usize> {
    validate_kno(k, n, o)?;
    let stride = n - o;
    let effective = k.saturating_sub(o).max(1);
    Ok(effective.div_ceil(stride))
}

fn validate_kno(k: usize, n: usize, o: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidConfig("group size n must be at least 1".into()));
    }
    if o >= n {
        return Err(Error::OverlapTooLarge { overlap: o, group: n });
    }
    if k < 1 {
        return Err(Error::InvalidConfig("ranking must contain at least one document".into()));
    }
    Ok(())
}

pub fn schedule_groups(k: usize, n: usize, o: usize) -> Result<GroupSchedule> {
    let count = group_count(k, n, o)?;
    let stride = n - o;
    let mut groups = Vec::with_capacity(count);
    for g in 0..count {
        let start = g * stride + 1;
        let end = (start + n - 1).min(k);
        let indices: Vec<usize> = (start..=end).collect();
        let mut pad_mask = vec![false; n];
        for slot in pad_mask.iter_mut().take(indices.len()) {
            *slot = true;
        }
        groups.push(Group {
            start,
            indices,
            pad_mask,
        });
    }
    Ok(GroupSchedule { k, n, o, groups })
}

/// Scored ranking for one query, sorted by score descending with ties
/// broken by doc id ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredList {
    pub query_id: String,
    pub entries: Vec<ScoredEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub doc_id: String,
    pub score: f64,
    /// 1-based group the score was taken from (0 for pointwise scoring)
    pub source_group: usize,
}

impl ScoredList {
    pub fn from_scores(query_id: &str, scores: Vec<(String, f64, usize)>) -> Self {
        let mut entries: Vec<ScoredEntry> = scores
            .into_iter()
            .map(|(doc_id, score, source_group)| ScoredEntry {
                doc_id,
                score,
                source_group,
            })
            .collect();
        sort_entries(&mut entries);
        Self {
            query_id: query_id.to_string(),
            entries,
        }
    }
}

fn sort_entries(entries: &mut [ScoredEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

/// Jointly score one group of calibrated interaction vectors.
///
/// The vectors form a length-n sequence through the scorer encoder (which
/// must run without positional embeddings), then a shared linear head
/// projects each position to a scalar. Padded slots are masked out of
/// attention; their scores are meaningless and must be dropped by the
/// caller.
pub fn score_group<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    scorer: &Encoder,
    vectors: &[NodeId],
    pad_mask: &[bool],
    head_w: &str,
    head_b: &str,
) -> Result<NodeId> {
    if vectors.is_empty() {
        return Err(Error::Invalid("score_group needs at least one vector".into()));
    }
    if vectors.len() != pad_mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "vector count {} differs from pad mask length {}",
            vectors.len(),
            pad_mask.len()
        )));
    }
    if scorer.config.use_positional {
        return Err(Error::InvalidConfig(
            "groupwise scorer must run without positional embeddings".into(),
        ));
    }
    let stacked = g.stack_rows(vectors)?;
    let encoded = scorer.encode_embedded(g, binder, stacked, pad_mask)?;
    let w = binder.bind(g, head_w)?;
    let b = binder.bind(g, head_b)?;
    let scores = g.matmul(encoded, w)?;
    g.add_row(scores, b)
}

/// Merge per-group scores into one list: a document keeps the score from
/// the earliest group containing it; later appearances only serve as
/// context for their group.
pub fn merge_scores(
    query_id: &str,
    per_group: &[Vec<f64>],
    schedule: &GroupSchedule,
    doc_ids: &[String],
) -> Result<ScoredList> {
    if per_group.len() != schedule.groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score groups for {} scheduled groups",
            per_group.len(),
            schedule.groups.len()
        )));
    }
    if doc_ids.len() != schedule.k {
        return Err(Error::ShapeMismatch(format!(
            "{} doc ids for k={}",
            doc_ids.len(),
            schedule.k
        )));
    }
    let mut assigned: Vec<Option<(f64, usize)>> = vec![None; schedule.k];
    for (gi, (group, scores)) in schedule.groups.iter().zip(per_group.iter()).enumerate() {
        if scores.len() != group.padded_len() {
            return Err(Error::ShapeMismatch(format!(
                "group {} has {} scores for {} slots",
                gi + 1,
                scores.len(),
                group.padded_len()
            )));
        }
        for (slot, &rank_pos) in group.indices.iter().enumerate() {
            let doc = rank_pos - 1;
            if assigned[doc].is_none() {
                assigned[doc] = Some((scores[slot], gi + 1));
            }
        }
    }
    let mut entries = Vec::with_capacity(schedule.k);
    for (doc, slot) in assigned.into_iter().enumerate() {
        let (score, source_group) =
            slot.ok_or_else(|| Error::Invalid(format!("document at rank {} never scored", doc + 1)))?;
        entries.push(ScoredEntry {
            doc_id: doc_ids[doc].clone(),
            score,
            source_group,
        });
    }
    sort_entries(&mut entries);
    Ok(ScoredList {
        query_id: query_id.to_string(),
        entries,
    })
}

/// Shared linear relevance head: `w . v + b`.
pub fn pointwise_score<S: Scalar>(v: &[S], w: &[S], b: S) -> Result<S> {
    if v.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "pointwise_score: vector {} vs weights {}",
            v.len(),
            w.len()
        )));
    }
    let mut acc = S::zero();
    for (&x, &y) in v.iter().zip(w.iter()) {
        acc += x * y;
    }
    Ok(acc + b)
}
