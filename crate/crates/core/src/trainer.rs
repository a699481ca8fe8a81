//! End-to-end training: pointwise cross-entropy loss, batch assembly with
//! feeding-order modes, Adam with linear warmup/decay, per-epoch validation
//! with checkpoint selection, and k-fold cross-validation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evalkit::{ndcg_at, Qrels, RunFile, RunRow};
use crate::firststage::InvertedIndex;
use crate::group::{schedule_groups, ScoredList};
use crate::interaction::{
    select_max_passage, tokenize, window_passages, Document, TokenSequence,
};
use crate::model::{CandidateDoc, CoBertModel, Variant};
use crate::tensor::{Graph, ParamBinder, ParamSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How training batches are ordered within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMode {
    /// all batches globally shuffled (the default)
    Shuffled,
    /// per query, groups follow the initial ranking; query blocks shuffled
    Initial,
    /// per query, groups in reversed ranking order; query blocks shuffled
    Reversed,
}

impl std::str::FromStr for OrderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffled" => Ok(OrderMode::Shuffled),
            "initial" => Ok(OrderMode::Initial),
            "reversed" => Ok(OrderMode::Reversed),
            other => Err(Error::InvalidConfig(format!(
                "unknown order mode {other:?} (expected shuffled, initial, or reversed)"
            ))),
        }
    }
}

impl std::fmt::Display for OrderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OrderMode::Shuffled => "shuffled",
            OrderMode::Initial => "initial",
            OrderMode::Reversed => "reversed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// candidates per group (batch)
    pub n: usize,
    /// feedback prototypes per batch
    pub m: usize,
    /// documents carried over between consecutive batches
    pub o: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub order_mode: OrderMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(
                "warmup_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.o >= self.n {
            return Err(Error::OverlapTooLarge {
                overlap: self.o,
                group: self.n,
            });
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Pointwise cross-entropy over probabilities:
/// `-sum_pos log(p) - sum_neg log(1-p)`, with probabilities clamped into
/// [1e-12, 1-1e-12] and padded slots contributing nothing.
pub fn loss(pr: &[f64], labels: &[f64], pad_mask: &[bool]) -> Result<f64> {
    if pr.len() != labels.len() || pr.len() != pad_mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss: {} probabilities, {} labels, {} mask slots",
            pr.len(),
            labels.len(),
            pad_mask.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..pr.len() {
        if !pad_mask[i] {
            continue;
        }
        if labels[i] != 0.0 && labels[i] != 1.0 {
            return Err(Error::InvalidLabel(labels[i]));
        }
        let p = pr[i].clamp(1e-12, 1.0 - 1e-12);
        total -= if labels[i] == 1.0 {
            p.ln()
        } else {
            (1.0 - p).ln()
        };
    }
    Ok(total)
}

/// Logistic sigmoid; strictly monotone, so ranking by probability equals
/// ranking by raw score.
pub fn to_probability(score: f64) -> f64 {
    if score >= 0.0 {
        1.0 / (1.0 + (-score).exp())
    } else {
        let e = score.exp();
        e / (1.0 + e)
    }
}

/// Linear warmup from 0 to `base_lr` over `round(warmup_fraction * total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps - 1);
    if warmup > 0 && step <= warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// One prepared training document: all passages plus the fixed training
/// passage and its binarized label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainDoc {
    pub doc_id: String,
    pub passages: Vec<Vec<u32>>,
    /// passage used for training inputs (highest lexical match score)
    pub train_passage: usize,
    /// qrels grade >= 1
    pub relevant: bool,
}

/// One query with its initial candidate ranking, fully tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainQuery {
    pub query_id: String,
    pub query_tokens: Vec<u32>,
    /// initial-ranking order, length <= k
    pub docs: Vec<TrainDoc>,
}

impl TrainQuery {
    pub fn candidate_docs(&self) -> Vec<CandidateDoc> {
        self.docs
            .iter()
            .map(|d| CandidateDoc {
                doc_id: d.doc_id.clone(),
                passages: d.passages.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainDataset {
    pub queries: Vec<TrainQuery>,
    /// (query id, reason) for queries left out during preparation
    pub skipped: Vec<(String, String)>,
}

impl TrainDataset {
    pub fn subset(&self, query_ids: &[String]) -> TrainDataset {
        let wanted: std::collections::HashSet<&String> = query_ids.iter().collect();
        TrainDataset {
            queries: self
                .queries
                .iter()
                .filter(|q| wanted.contains(&q.query_id))
                .cloned()
                .collect(),
            skipped: Vec::new(),
        }
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.query_id.clone()).collect()
    }
}

/// Prepare a dataset from raw inputs: for each query, take the top-k rows
/// of the initial run, window and tokenize each document, pick the training
/// passage by lexical match score, and binarize labels at grade >= 1.
/// Queries missing from the run or with fewer than m candidates are skipped.
pub fn build_dataset(
    corpus: &[Document],
    index: &InvertedIndex,
    queries: &[(String, String)],
    run: &RunFile,
    qrels: &Qrels,
    config: &ModelConfig,
) -> Result<TrainDataset> {
    let by_id: std::collections::HashMap<&str, &Document> =
        corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut out = TrainDataset::default();

    let mut sorted: Vec<&(String, String)> = queries.iter().collect();
    sorted.sort_by(|a, b| natural_qid_cmp(&a.0, &b.0));

    for (qid, text) in sorted {
        let query_tokens = tokenize(text, config.vocab_size);
        if query_tokens.is_empty() {
            out.skipped.push((qid.clone(), "query has no tokens".into()));
            continue;
        }
        let Some(rows) = run.ranking(qid) else {
            out.skipped.push((qid.clone(), "absent from initial run".into()));
            continue;
        };
        let query_words = crate::interaction::words(text);
        let mut docs = Vec::new();
        for row in rows.iter().take(config.k) {
            let doc = by_id.get(row.doc_id.as_str()).ok_or_else(|| {
                Error::Invalid(format!(
                    "run references doc {} not present in the corpus",
                    row.doc_id
                ))
            })?;
            let doc_words = crate::interaction::words(&doc.text);
            let passages = window_passages(&doc.doc_id, &doc_words, config.window, config.stride)?;
            let (best, _) = select_max_passage(&passages, |p| {
                Ok(index.score_text(&query_words, &p.words))
            })?;
            let train_passage = passages
                .iter()
                .position(|p| p.start_word == best.start_word)
                .expect("selected passage comes from the list");
            let tokenized: Vec<Vec<u32>> = passages
                .iter()
                .map(|p| {
                    p.words
                        .iter()
                        .map(|w| crate::interaction::token_id(w, config.vocab_size))
                        .collect()
                })
                .collect();
            docs.push(TrainDoc {
                doc_id: doc.doc_id.clone(),
                passages: tokenized,
                train_passage,
                relevant: qrels.grade(qid, &doc.doc_id) >= 1,
            });
        }
        if docs.len() < config.m {
            out.skipped.push((
                qid.clone(),
                format!("{} candidates, need at least m={}", docs.len(), config.m),
            ));
            continue;
        }
        out.queries.push(TrainQuery {
            query_id: qid.clone(),
            query_tokens,
            docs,
        });
    }
    Ok(out)
}

/// Sort TREC-style query ids numerically when they all parse as integers,
/// lexicographically otherwise.
fn natural_qid_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// One training batch: a group window of candidates plus the query's
/// feedback prototypes and the overlap documents carried from the
/// previous batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub query_index: usize,
    pub query_id: String,
    /// 1-based group number within the query
    pub group_index: usize,
    pub prototype_ids: Vec<String>,
    /// overlap docs shared with the previous group (empty for group 1)
    pub context_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    /// 1-based initial-ranking positions of the candidates
    pub candidate_ranks: Vec<usize>,
    /// length n; 0.0 on padding
    pub labels: Vec<f64>,
    /// length n
    pub pad_mask: Vec<bool>,
}

/// Assemble the epoch's batches in the configured feeding order. The batch
/// multiset is identical across order modes; only the order differs.
pub fn make_batches(
    dataset: &TrainDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<TrainBatch>> {
    cfg.validate()?;
    let mut per_query: Vec<Vec<TrainBatch>> = Vec::new();
    for (qi, q) in dataset.queries.iter().enumerate() {
        if q.docs.is_empty() {
            continue;
        }
        let schedule = schedule_groups(q.docs.len(), cfg.n, cfg.o)?;
        let protos: Vec<String> = q.docs[..cfg.m.min(q.docs.len())]
            .iter()
            .map(|d| d.doc_id.clone())
            .collect();
        let mut batches = Vec::with_capacity(schedule.groups.len());
        let mut prev_window: Option<Vec<usize>> = None;
        for (gi, group) in schedule.groups.iter().enumerate() {
            let candidate_ids: Vec<String> = group
                .indices
                .iter()
                .map(|&r| q.docs[r - 1].doc_id.clone())
                .collect();
            let context_ids: Vec<String> = match &prev_window {
                Some(prev) => group
                    .indices
                    .iter()
                    .filter(|r| prev.contains(r))
                    .map(|&r| q.docs[r - 1].doc_id.clone())
                    .collect(),
                None => Vec::new(),
            };
            let mut labels = vec![0.0; group.padded_len()];
            for (slot, &r) in group.indices.iter().enumerate() {
                labels[slot] = if q.docs[r - 1].relevant { 1.0 } else { 0.0 };
            }
            batches.push(TrainBatch {
                query_index: qi,
                query_id: q.query_id.clone(),
                group_index: gi + 1,
                prototype_ids: protos.clone(),
                context_ids,
                candidate_ids,
                candidate_ranks: group.indices.clone(),
                labels,
                pad_mask: group.pad_mask.clone(),
            });
            prev_window = Some(group.indices.clone());
        }
        per_query.push(batches);
    }

    let mut rng = epoch_rng(cfg.seed, epoch);
    let ordered = match cfg.order_mode {
        OrderMode::Shuffled => {
            let mut all: Vec<TrainBatch> = per_query.into_iter().flatten().collect();
            all.shuffle(&mut rng);
            all
        }
        OrderMode::Initial => {
            per_query.shuffle(&mut rng);
            per_query.into_iter().flatten().collect()
        }
        OrderMode::Reversed => {
            per_query.shuffle(&mut rng);
            per_query
                .into_iter()
                .flat_map(|mut b| {
                    b.reverse();
                    b
                })
                .collect()
        }
    };
    Ok(ordered)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// Adam with per-parameter moments and bias correction.
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update to every trainable parameter present in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f64>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(&p.name) else {
                continue;
            };
            if grad.is_empty() {
                continue;
            }
            if grad.len() != p.tensor.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {} has {} values, parameter has {}",
                    p.name,
                    grad.len(),
                    p.tensor.numel()
                )));
            }
            let entry = self.moments.entry(p.name.clone()).or_insert_with(|| {
                (vec![0.0; grad.len()], vec![0.0; grad.len()], 0)
            });
            entry.2 += 1;
            let t = entry.2 as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let data = p.tensor.data_mut();
            for i in 0..grad.len() {
                entry.0[i] = ADAM_BETA1 * entry.0[i] + (1.0 - ADAM_BETA1) * grad[i];
                entry.1[i] = ADAM_BETA2 * entry.1[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let mhat = entry.0[i] / bc1;
                let vhat = entry.1[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// total loss divided by the number of real (unpadded) candidate slots
    pub mean_loss: f64,
    /// variant-head component of mean_loss
    pub mean_variant_loss: f64,
    /// first-pass-head component of mean_loss
    pub mean_first_pass_loss: f64,
    pub val_ndcg20: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_ndcg20: f64,
    pub snapshot: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub checkpoints: Vec<Checkpoint>,
    /// 1-based epoch of the selected checkpoint
    pub best_epoch: usize,
}

/// Highest validation score wins; ties go to the earliest epoch.
/// Returns an index into `checkpoints`.
pub fn select_model(checkpoints: &[Checkpoint]) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid("no checkpoints to select from".into()));
    }
    let mut best = 0;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.val_ndcg20 > checkpoints[best].val_ndcg20 {
            best = i;
        }
    }
    Ok(best)
}

/// Train end-to-end on the given queries; after every epoch the model is
/// evaluated on the validation queries (nDCG@20 over full re-ranking) and
/// snapshotted. The model is left holding the selected checkpoint. With no
/// validation queries the final epoch is kept.
pub fn train(
    model: &mut CoBertModel<f64>,
    train_set: &TrainDataset,
    val_set: &TrainDataset,
    qrels: &Qrels,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.queries.is_empty() {
        return Err(Error::DegenerateTrainingSet("no training queries".into()));
    }
    let mut any_pos = false;
    let mut any_neg = false;
    for q in &train_set.queries {
        for d in &q.docs {
            if d.relevant {
                any_pos = true;
            } else {
                any_neg = true;
            }
        }
    }
    if !any_pos {
        return Err(Error::DegenerateTrainingSet(
            "no relevant documents in the training queries".into(),
        ));
    }
    if !any_neg {
        return Err(Error::DegenerateTrainingSet(
            "no non-relevant documents in the training queries".into(),
        ));
    }

    let batches_per_epoch = make_batches(train_set, cfg, 1)?.len();
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train_set, cfg, epoch)?;
        let mut variant_sum = 0.0;
        let mut fp_sum = 0.0;
        let mut slot_count = 0usize;
        for batch in &batches {
            let q = &train_set.queries[batch.query_index];
            let (variant_loss, fp_loss, grads) = batch_loss_and_grads(model, q, batch, variant)?;
            global_step += 1;
            let lr = lr_schedule(global_step, total_steps, cfg.base_lr, cfg.warmup_fraction);
            adam.step(&mut model.params, &grads, lr)?;
            variant_sum += variant_loss;
            fp_sum += fp_loss;
            slot_count += batch.candidate_ids.len();
        }
        let val_ndcg20 = if val_set.queries.is_empty() {
            0.0
        } else {
            evaluate_ndcg20(model, val_set, qrels, variant)?
        };
        let denom = slot_count.max(1) as f64;
        history.push(EpochStats {
            epoch,
            mean_loss: (variant_sum + fp_sum) / denom,
            mean_variant_loss: variant_sum / denom,
            mean_first_pass_loss: fp_sum / denom,
            val_ndcg20,
        });
        checkpoints.push(Checkpoint {
            epoch,
            val_ndcg20,
            snapshot: model.params.to_snapshot_bytes(),
        });
    }

    let best = if val_set.queries.is_empty() {
        checkpoints.len() - 1
    } else {
        select_model(&checkpoints)?
    };
    model.params = ParamSet::from_snapshot_bytes(&checkpoints[best].snapshot)?;
    Ok(TrainOutcome {
        history,
        checkpoints: checkpoints.clone(),
        best_epoch: checkpoints[best].epoch,
    })
}

/// One batch: forward, loss (variant scores plus the first-pass pointwise
/// head on the same labels), backward, gradient collection.
fn batch_loss_and_grads(
    model: &CoBertModel<f64>,
    query: &TrainQuery,
    batch: &TrainBatch,
    variant: Variant,
) -> Result<(f64, f64, BTreeMap<String, Vec<f64>>)> {
    let doc_by_id: std::collections::HashMap<&str, &TrainDoc> = query
        .docs
        .iter()
        .map(|d| (d.doc_id.as_str(), d))
        .collect();
    let seq_of = |doc_id: &str| -> Result<TokenSequence> {
        let doc = doc_by_id
            .get(doc_id)
            .ok_or_else(|| Error::Invalid(format!("batch references unknown doc {doc_id}")))?;
        model.sequence(&query.query_tokens, &doc.passages[doc.train_passage])
    };

    let prototypes: Vec<(String, TokenSequence)> = batch
        .prototype_ids
        .iter()
        .map(|d| Ok((d.clone(), seq_of(d)?)))
        .collect::<Result<_>>()?;
    let mut slots: Vec<Option<TokenSequence>> = Vec::with_capacity(batch.pad_mask.len());
    for (i, &real) in batch.pad_mask.iter().enumerate() {
        if real {
            slots.push(Some(seq_of(&batch.candidate_ids[i])?));
        } else {
            slots.push(None);
        }
    }

    let mut g = Graph::new();
    let mut binder = ParamBinder::new(&model.params, true);
    let fwd = model.batch_forward(&mut g, &mut binder, &prototypes, &slots, variant)?;

    let pr = g.sigmoid(fwd.scores);
    let variant_loss = g.bce(pr, &batch.labels, &batch.pad_mask)?;
    let pr_fp = g.sigmoid(fwd.first_pass_scores);
    let fp_loss = g.bce(pr_fp, &batch.labels, &batch.pad_mask)?;
    let total = g.add(variant_loss, fp_loss)?;

    g.backward(total)?;
    let variant_value = g.scalar_value(variant_loss)?;
    let fp_value = g.scalar_value(fp_loss)?;
    Ok((variant_value, fp_value, binder.collect_grads(&g)))
}

/// Mean nDCG@20 over the dataset's queries after full re-ranking.
pub fn evaluate_ndcg20(
    model: &CoBertModel<f64>,
    dataset: &TrainDataset,
    qrels: &Qrels,
    variant: Variant,
) -> Result<f64> {
    let lists = rerank_dataset(model, dataset, variant)?;
    let run = run_from_lists(&lists);
    let metric = ndcg_at(&run, qrels, 20)?;
    let qids = dataset.query_ids();
    let mut sum = 0.0;
    for qid in &qids {
        sum += metric.per_query.get(qid).copied().unwrap_or(0.0);
    }
    Ok(sum / qids.len().max(1) as f64)
}

/// Re-rank every query of a dataset with the inference pipeline.
pub fn rerank_dataset(
    model: &CoBertModel<f64>,
    dataset: &TrainDataset,
    variant: Variant,
) -> Result<Vec<ScoredList>> {
    let mut lists = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        lists.push(model.rerank_query(
            &q.query_id,
            &q.query_tokens,
            &q.candidate_docs(),
            variant,
        )?);
    }
    Ok(lists)
}

/// In-memory run built from scored lists (for metric computation).
pub fn run_from_lists(lists: &[ScoredList]) -> RunFile {
    let mut per_query = BTreeMap::new();
    for list in lists {
        per_query.insert(
            list.query_id.clone(),
            list.entries
                .iter()
                .enumerate()
                .map(|(i, e)| RunRow {
                    query_id: list.query_id.clone(),
                    doc_id: e.doc_id.clone(),
                    rank: i as u32 + 1,
                    score: e.score,
                    tag: "mem".into(),
                })
                .collect(),
        );
    }
    RunFile::from_parts(per_query)
}

/// Train/validation/test query ids for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CvFold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Round-robin partitioning by query id order: sorted id at index i lands
/// in partition `i mod folds`. In fold f, partition f is the test set,
/// partition (f+1) mod folds the validation set, the rest train.
pub fn cv_split_round_robin(query_ids: &[String], folds: usize) -> Result<Vec<CvFold>> {
    if folds < 2 {
        return Err(Error::InvalidConfig("need at least 2 folds".into()));
    }
    if query_ids.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} queries cannot fill {folds} folds",
            query_ids.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for q in query_ids {
        if !seen.insert(q) {
            return Err(Error::DuplicateQueryId(q.clone()));
        }
    }
    let mut sorted = query_ids.to_vec();
    sorted.sort_by(|a, b| natural_qid_cmp(a, b));
    let mut partitions = vec![Vec::new(); folds];
    for (i, qid) in sorted.into_iter().enumerate() {
        partitions[i % folds].push(qid);
    }
    folds_from_partitions(partitions)
}

/// Assemble folds from explicit partitions (e.g. published split files).
pub fn folds_from_partitions(partitions: Vec<Vec<String>>) -> Result<Vec<CvFold>> {
    let folds = partitions.len();
    if folds < 2 {
        return Err(Error::InvalidConfig("need at least 2 partitions".into()));
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let val = (f + 1) % folds;
        let mut train = Vec::new();
        for (p, part) in partitions.iter().enumerate() {
            if p != f && p != val {
                train.extend(part.iter().cloned());
            }
        }
        out.push(CvFold {
            train,
            validation: partitions[val].clone(),
            test: partitions[f].clone(),
        });
    }
    Ok(out)
}

/// Parse a split file of `query_id<whitespace>partition_index` lines.
pub fn parse_cv_file(path: &Path, folds: usize) -> Result<Vec<Vec<String>>> {
    let content = std::fs::read_to_string(path)?;
    let mut partitions = vec![Vec::new(); folds];
    let mut seen = std::collections::HashSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseLine {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, got {}", fields.len())));
        }
        let part: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad partition index {:?}", fields[1])))?;
        if part >= folds {
            return Err(err(format!("partition {part} out of range for {folds} folds")));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::DuplicateQueryId(fields[0].to_string()));
        }
        partitions[part].push(fields[0].to_string());
    }
    Ok(partitions)
}

#[derive(Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub test_lists: Vec<ScoredList>,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    /// test-fold rankings from all folds, sorted by query id
    pub combined: Vec<ScoredList>,
}

/// Full cross-validation: per fold, train a fresh model (identical seed
/// initialization), select the best checkpoint by validation nDCG@20, and
/// re-rank the fold's test queries with it.
pub fn cross_validate(
    config: &ModelConfig,
    dataset: &TrainDataset,
    qrels: &Qrels,
    variant: Variant,
    train_cfg: &TrainConfig,
    folds: &[CvFold],
) -> Result<CvOutcome> {
    let mut fold_results = Vec::with_capacity(folds.len());
    let mut combined = Vec::new();
    for (fi, fold) in folds.iter().enumerate() {
        let train_set = dataset.subset(&fold.train);
        let val_set = dataset.subset(&fold.validation);
        let test_set = dataset.subset(&fold.test);
        let mut model = CoBertModel::<f64>::new(config.clone())?;
        let outcome = train(&mut model, &train_set, &val_set, qrels, variant, train_cfg)?;
        let test_lists = rerank_dataset(&model, &test_set, variant)?;
        combined.extend(test_lists.iter().cloned());
        fold_results.push(FoldResult {
            fold: fi,
            outcome,
            test_lists,
        });
    }
    combined.sort_by(|a, b| natural_qid_cmp(&a.query_id, &b.query_id));
    Ok(CvOutcome {
        folds: fold_results,
        combined,
    })
}

/// Checkpoint files: one metadata line, then the parameter snapshot.
pub const CHECKPOINT_HEADER: &str = "corank-checkpoint";

pub fn save_checkpoint(
    path: &Path,
    snapshot: &[u8],
    epoch: usize,
    val_ndcg20: f64,
) -> Result<()> {
    let mut bytes = format!("{CHECKPOINT_HEADER} epoch={epoch} val_ndcg20={val_ndcg20}\n")
        .into_bytes();
    bytes.extend_from_slice(snapshot);
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_ndcg20: f64,
}

/// Load either a checkpoint (header line + snapshot) or a bare snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f64>, Option<CheckpointMeta>)> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(CHECKPOINT_HEADER.as_bytes()) {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidSnapshot("checkpoint header is unterminated".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::InvalidSnapshot("checkpoint header is not UTF-8".into()))?;
        let mut epoch = None;
        let mut val = None;
        for field in header.split_whitespace().skip(1) {
            if let Some(v) = field.strip_prefix("epoch=") {
                epoch = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("val_ndcg20=") {
                val = v.parse::<f64>().ok();
            }
        }
        let meta = CheckpointMeta {
            epoch: epoch
                .ok_or_else(|| Error::InvalidSnapshot("checkpoint header lacks epoch".into()))?,
            val_ndcg20: val
                .ok_or_else(|| Error::InvalidSnapshot("checkpoint header lacks val_ndcg20".into()))?,
        };
        Ok((ParamSet::from_snapshot_bytes(&bytes[newline + 1..])?, Some(meta)))
    } else {
        Ok((ParamSet::from_snapshot_bytes(&bytes)?, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_perfect_predictions_vanish() {
        let l = loss(&[1.0 - 1e-13, 1e-13], &[1.0, 0.0], &[true, true]).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    #[test]
    fn loss_symmetric_case_is_two_ln_two() {
        let l = loss(&[0.5, 0.5], &[1.0, 0.0], &[true, true]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_per_term_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let len = rng.random_range(1..20);
            let pr: Vec<f64> = (0..len).map(|_| rng.random_range(0.001..0.999)).collect();
            let labels: Vec<f64> = (0..len)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let mask: Vec<bool> = (0..len).map(|_| rng.random::<f64>() > 0.2).collect();
            let got = loss(&pr, &labels, &mask).unwrap();
            let mut expected = 0.0;
            for i in 0..len {
                if mask[i] {
                    expected -= if labels[i] == 1.0 {
                        pr[i].ln()
                    } else {
                        (1.0 - pr[i]).ln()
                    };
                }
            }
            assert!((got - expected).abs() < 1e-12);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn loss_rejects_fractional_labels() {
        assert!(loss(&[0.5], &[0.5], &[true]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(to_probability(0.0), 0.5);
        assert!((to_probability(1.0) - 0.731059).abs() < 1e-6);
        assert!(to_probability(40.0) > 1.0 - 1e-12);
        assert!(to_probability(-40.0) < 1e-12);
    }

    #[test]
    fn sigmoid_is_strictly_monotone() {
        let mut prev = to_probability(-6.0);
        let mut x = -6.0 + 0.25;
        while x <= 6.0 {
            let p = to_probability(x);
            assert!(p > prev);
            prev = p;
            x += 0.25;
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        // paper-like defaults: 10% warmup
        let total = 1000;
        let base = 3e-6;
        let warmup = 100;
        assert_eq!(lr_schedule(0, total, base, 0.10), 0.0);
        assert_eq!(lr_schedule(warmup, total, base, 0.10), base);
        assert_eq!(lr_schedule(total, total, base, 0.10), 0.0);
        // midpoint of the decay span is exactly half the base rate
        let mid = (warmup + total) / 2;
        assert!((lr_schedule(mid, total, base, 0.10) - base / 2.0).abs() < 1e-15 * base);
        // monotone up then down
        assert!(lr_schedule(50, total, base, 0.10) < base);
        assert!(lr_schedule(550, total, base, 0.10) < base);
    }

    #[test]
    fn select_model_prefers_earliest_tie() {
        let cp = |epoch, val| Checkpoint {
            epoch,
            val_ndcg20: val,
            snapshot: Vec::new(),
        };
        assert_eq!(select_model(&[cp(1, 0.3)]).unwrap(), 0);
        assert_eq!(select_model(&[cp(1, 0.3), cp(2, 0.5), cp(3, 0.4)]).unwrap(), 1);
        assert_eq!(select_model(&[cp(1, 0.5), cp(2, 0.5)]).unwrap(), 0);
    }

    #[test]
    fn round_robin_150_ids_gives_five_by_thirty() {
        let ids: Vec<String> = (1..=150).map(|i| i.to_string()).collect();
        let folds = cv_split_round_robin(&ids, 5).unwrap();
        assert_eq!(folds.len(), 5);
        let mut test_seen = std::collections::HashSet::new();
        for fold in &folds {
            assert_eq!(fold.test.len(), 30);
            assert_eq!(fold.validation.len(), 30);
            assert_eq!(fold.train.len(), 90);
            for q in &fold.test {
                assert!(test_seen.insert(q.clone()), "{q} tested twice");
            }
        }
        assert_eq!(test_seen.len(), 150);
    }

    #[test]
    fn round_robin_minimal_and_uneven() {
        let ids: Vec<String> = (1..=5).map(|i| format!("q{i}")).collect();
        let folds = cv_split_round_robin(&ids, 5).unwrap();
        for fold in &folds {
            assert_eq!(fold.test.len(), 1);
            assert_eq!(fold.validation.len(), 1);
            assert_eq!(fold.train.len(), 3);
        }

        // q1..q7 into 5 partitions: sizes [2,2,1,1,1]
        let ids: Vec<String> = (1..=7).map(|i| format!("q{i}")).collect();
        let folds = cv_split_round_robin(&ids, 5).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        // round robin on lexicographic q1..q7: partition 0 gets q1, q6
        assert_eq!(folds[0].test, vec!["q1".to_string(), "q6".to_string()]);
        assert_eq!(folds[1].test, vec!["q2".to_string(), "q7".to_string()]);
    }

    #[test]
    fn round_robin_sorts_numeric_ids_numerically() {
        let ids: Vec<String> = vec!["10".into(), "2".into(), "1".into(), "30".into(), "4".into()];
        let folds = cv_split_round_robin(&ids, 5).unwrap();
        // sorted order 1,2,4,10,30 -> partition i gets sorted[i]
        assert_eq!(folds[0].test, vec!["1".to_string()]);
        assert_eq!(folds[1].test, vec!["2".to_string()]);
        assert_eq!(folds[2].test, vec!["4".to_string()]);
    }

    #[test]
    fn round_robin_rejects_duplicates() {
        let ids: Vec<String> = vec!["a".into(), "b".into(), "a".into(), "c".into(), "d".into()];
        assert!(matches!(
            cv_split_round_robin(&ids, 2),
            Err(Error::DuplicateQueryId(_))
        ));
    }

    #[test]
    fn fold_partitions_are_disjoint_and_complete() {
        let ids: Vec<String> = (0..23).map(|i| format!("{i:02}")).collect();
        let folds = cv_split_round_robin(&ids, 5).unwrap();
        for fold in &folds {
            let mut all: Vec<&String> = fold
                .train
                .iter()
                .chain(&fold.validation)
                .chain(&fold.test)
                .collect();
            all.sort();
            let before = all.len();
            all.dedup();
            assert_eq!(before, all.len());
            assert_eq!(all.len(), ids.len());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut ps = ParamSet::<f64>::new();
        ps.insert(
            "x",
            crate::tensor::Tensor::from_vec(vec![1, 2], vec![1.5, -2.25]).unwrap(),
            true,
        )
        .unwrap();
        save_checkpoint(&path, &ps.to_snapshot_bytes(), 3, 0.54321).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        let meta = meta.unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(meta.val_ndcg20, 0.54321);
        assert_eq!(back.to_snapshot_bytes(), ps.to_snapshot_bytes());

        // bare snapshots load too
        let bare = dir.path().join("bare.params");
        ps.save(&bare).unwrap();
        let (back, meta) = load_checkpoint(&bare).unwrap();
        assert!(meta.is_none());
        assert_eq!(back.to_snapshot_bytes(), ps.to_snapshot_bytes());
    }
}
