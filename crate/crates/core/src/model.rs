//! The full ranking model: shared interaction encoder, feedback calibrator,
//! groupwise scorer, and the scoring heads, with the two-pass inference
//! pipeline and the per-batch forward used in training.

use crate::calibrator::{build_prototypes, calibrate, PrototypeSet};
use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::group::{merge_scores, schedule_groups, score_group, ScoredList};
use crate::interaction::{build_sequence, fnv1a, interaction_vector, tokenize, TokenSequence};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamBinder, ParamSet, Tensor};

pub const PROTO_W: &str = "heads.proto_w";
pub const PROTO_B: &str = "heads.proto_b";
pub const GROUP_W: &str = "heads.group_w";
pub const GROUP_B: &str = "heads.group_b";
pub const REL_W: &str = "heads.rel_w";
pub const REL_B: &str = "heads.rel_b";

/// Which parts of the second pass are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// calibration + groupwise scorer
    Full,
    /// calibration, then the pointwise head on each calibrated vector
    PrfOnly,
    /// groupwise scorer directly over uncalibrated vectors
    GroupOnly,
}

impl Variant {
    pub fn uses_prototypes(&self) -> bool {
        matches!(self, Variant::Full | Variant::PrfOnly)
    }

    pub fn uses_group_scorer(&self) -> bool {
        matches!(self, Variant::Full | Variant::GroupOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "prf-only" => Ok(Variant::PrfOnly),
            "group-only" => Ok(Variant::GroupOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant {other:?} (expected full, prf-only, or group-only)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::PrfOnly => "prf-only",
            Variant::GroupOnly => "group-only",
        })
    }
}

/// A candidate document prepared for ranking: all of its passages,
/// tokenized, in window order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateDoc {
    pub doc_id: String,
    pub passages: Vec<Vec<u32>>,
}

/// One row of the model-scored first pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPassEntry {
    pub doc_id: String,
    /// index into the candidate's passage list (its best passage)
    pub passage_index: usize,
    pub score: f64,
}

pub struct CoBertModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
    base: Encoder,
    calib: Encoder,
    scorer: Encoder,
}

impl<S: Scalar> CoBertModel<S> {
    /// Fresh model with deterministic seed-derived initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let base = Encoder::new(config.base_encoder_config(), "base")?;
        let calib = Encoder::new(config.calib_encoder_config(), "calibrator")?;
        let scorer = Encoder::new(config.group_encoder_config(), "scorer")?;

        let mut params = ParamSet::new();
        base.init_params(derive_seed(config.seed, "base"), &mut params)?;
        calib.init_params(derive_seed(config.seed, "calibrator"), &mut params)?;
        scorer.init_params(derive_seed(config.seed, "scorer"), &mut params)?;
        init_heads(&config, derive_seed(config.seed, "heads"), &mut params)?;

        Ok(Self {
            config,
            params,
            base,
            calib,
            scorer,
        })
    }

    /// Wrap existing parameters (e.g. a loaded checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let base = Encoder::new(config.base_encoder_config(), "base")?;
        let calib = Encoder::new(config.calib_encoder_config(), "calibrator")?;
        let scorer = Encoder::new(config.group_encoder_config(), "scorer")?;
        for name in [PROTO_W, PROTO_B, GROUP_W, GROUP_B, REL_W, REL_B] {
            if params.get(name).is_none() {
                return Err(Error::Invalid(format!("parameter set is missing {name}")));
            }
        }
        Ok(Self {
            config,
            params,
            base,
            calib,
            scorer,
        })
    }

    /// Element-type conversion, e.g. f64 training weights to f32 inference.
    pub fn cast<T: Scalar>(&self) -> Result<CoBertModel<T>> {
        CoBertModel::from_params(self.config.clone(), self.params.cast::<T>())
    }

    pub fn base_encoder(&self) -> &Encoder {
        &self.base
    }

    pub fn calib_encoder(&self) -> &Encoder {
        &self.calib
    }

    pub fn group_encoder(&self) -> &Encoder {
        &self.scorer
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.config.vocab_size)
    }

    pub fn sequence(&self, query_tokens: &[u32], passage_tokens: &[u32]) -> Result<TokenSequence> {
        build_sequence(query_tokens, passage_tokens, self.config.max_seq_len)
    }

    /// First-pass relevance of one prepared sequence: the pointwise head
    /// over the CLS interaction vector.
    pub fn score_sequence_pointwise(&self, seq: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.params, false);
        let r = interaction_vector(&mut g, &mut binder, &self.base, seq)?;
        let w = binder.bind(&mut g, REL_W)?;
        let b = binder.bind(&mut g, REL_B)?;
        let s = g.matmul(r, w)?;
        let s = g.add_row(s, b)?;
        Ok(g.value(s)[0].as_f64())
    }

    /// Model-scored first pass: every passage of every candidate is scored
    /// pointwise, each document keeps its best passage, and documents are
    /// ranked by that score (ties by doc id).
    pub fn first_pass(
        &self,
        query_tokens: &[u32],
        candidates: &[CandidateDoc],
    ) -> Result<Vec<FirstPassEntry>> {
        let mut entries = Vec::with_capacity(candidates.len());
        for doc in candidates {
            if doc.passages.is_empty() {
                return Err(Error::Invalid(format!(
                    "candidate {} has no passages",
                    doc.doc_id
                )));
            }
            let mut best_idx = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (pi, passage) in doc.passages.iter().enumerate() {
                let seq = self.sequence(query_tokens, passage)?;
                let score = self.score_sequence_pointwise(&seq)?;
                if score > best_score {
                    best_idx = pi;
                    best_score = score;
                }
            }
            entries.push(FirstPassEntry {
                doc_id: doc.doc_id.clone(),
                passage_index: best_idx,
                score: best_score,
            });
        }
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        Ok(entries)
    }

    /// Two-pass re-ranking of one query's candidate pool.
    pub fn rerank_query(
        &self,
        query_id: &str,
        query_tokens: &[u32],
        candidates: &[CandidateDoc],
        variant: Variant,
    ) -> Result<ScoredList> {
        if candidates.is_empty() {
            return Ok(ScoredList {
                query_id: query_id.to_string(),
                entries: Vec::new(),
            });
        }
        let by_id: std::collections::HashMap<&str, &CandidateDoc> = candidates
            .iter()
            .map(|c| (c.doc_id.as_str(), c))
            .collect();
        if by_id.len() != candidates.len() {
            return Err(Error::Invalid("candidate doc ids must be unique".into()));
        }

        let ranking = self.first_pass(query_tokens, candidates)?;
        let seqs: Vec<TokenSequence> = ranking
            .iter()
            .map(|e| self.sequence(query_tokens, &by_id[e.doc_id.as_str()].passages[e.passage_index]))
            .collect::<Result<_>>()?;

        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.params, false);

        let protos = if variant.uses_prototypes() {
            let m = self.config.m;
            if ranking.len() < m {
                return Err(Error::Invalid(format!(
                    "query {query_id}: {} candidates but m={m} prototypes required",
                    ranking.len()
                )));
            }
            let prf: Vec<(String, TokenSequence)> = ranking[..m]
                .iter()
                .zip(&seqs)
                .map(|(e, s)| (e.doc_id.clone(), s.clone()))
                .collect();
            Some(build_prototypes(&mut g, &mut binder, &self.base, query_id, &prf)?)
        } else {
            None
        };

        // interaction vector per ranked document, then per-variant scoring
        let mut vectors = Vec::with_capacity(ranking.len());
        for seq in &seqs {
            let r = interaction_vector(&mut g, &mut binder, &self.base, seq)?;
            let v = match &protos {
                Some(p) => calibrate(
                    &mut g,
                    &mut binder,
                    &self.calib,
                    p,
                    r,
                    PROTO_W,
                    PROTO_B,
                    self.config.residual,
                )?,
                None => r,
            };
            vectors.push(v);
        }

        if !variant.uses_group_scorer() {
            let stacked = g.stack_rows(&vectors)?;
            let w = binder.bind(&mut g, REL_W)?;
            let b = binder.bind(&mut g, REL_B)?;
            let scores = g.matmul(stacked, w)?;
            let scores = g.add_row(scores, b)?;
            let values = g.value(scores);
            let entries = ranking
                .iter()
                .enumerate()
                .map(|(i, e)| (e.doc_id.clone(), values[i].as_f64(), 0))
                .collect();
            return Ok(ScoredList::from_scores(query_id, entries));
        }

        let schedule = schedule_groups(ranking.len(), self.config.n, self.config.o)?;
        let hidden = self.config.hidden;
        let mut per_group = Vec::with_capacity(schedule.groups.len());
        for group in &schedule.groups {
            let mut slot_vectors = Vec::with_capacity(group.padded_len());
            for &rank_pos in &group.indices {
                slot_vectors.push(vectors[rank_pos - 1]);
            }
            for _ in group.indices.len()..group.padded_len() {
                slot_vectors.push(g.zeros_leaf(1, hidden));
            }
            let scores = score_group(
                &mut g,
                &mut binder,
                &self.scorer,
                &slot_vectors,
                &group.pad_mask,
                GROUP_W,
                GROUP_B,
            )?;
            per_group.push(g.value(scores).iter().map(|v| v.as_f64()).collect());
        }
        let doc_ids: Vec<String> = ranking.iter().map(|e| e.doc_id.clone()).collect();
        merge_scores(query_id, &per_group, &schedule, &doc_ids)
    }

    /// Forward pass over one training batch: prototypes, per-slot candidate
    /// vectors, variant scores, and first-pass pointwise scores. Slots are
    /// `None` on padding.
    pub fn batch_forward(
        &self,
        g: &mut Graph<S>,
        binder: &mut ParamBinder<S>,
        prototypes: &[(String, TokenSequence)],
        slots: &[Option<TokenSequence>],
        variant: Variant,
    ) -> Result<BatchForward> {
        let hidden = self.config.hidden;
        let pad_mask: Vec<bool> = slots.iter().map(|s| s.is_some()).collect();

        let protos: Option<PrototypeSet> = if variant.uses_prototypes() {
            Some(build_prototypes(g, binder, &self.base, "batch", prototypes)?)
        } else {
            None
        };

        let mut r_rows = Vec::with_capacity(slots.len());
        let mut v_rows = Vec::with_capacity(slots.len());
        for slot in slots {
            match slot {
                Some(seq) => {
                    let r = interaction_vector(g, binder, &self.base, seq)?;
                    let v = match &protos {
                        Some(p) => calibrate(
                            g,
                            binder,
                            &self.calib,
                            p,
                            r,
                            PROTO_W,
                            PROTO_B,
                            self.config.residual,
                        )?,
                        None => r,
                    };
                    r_rows.push(r);
                    v_rows.push(v);
                }
                None => {
                    let zero = g.zeros_leaf(1, hidden);
                    r_rows.push(zero);
                    v_rows.push(zero);
                }
            }
        }

        let scores = if variant.uses_group_scorer() {
            score_group(g, binder, &self.scorer, &v_rows, &pad_mask, GROUP_W, GROUP_B)?
        } else {
            let stacked = g.stack_rows(&v_rows)?;
            let w = binder.bind(g, REL_W)?;
            let b = binder.bind(g, REL_B)?;
            let s = g.matmul(stacked, w)?;
            g.add_row(s, b)?
        };

        let first_pass_scores = {
            let stacked = g.stack_rows(&r_rows)?;
            let w = binder.bind(g, REL_W)?;
            let b = binder.bind(g, REL_B)?;
            let s = g.matmul(stacked, w)?;
            g.add_row(s, b)?
        };

        Ok(BatchForward {
            scores,
            first_pass_scores,
            pad_mask,
        })
    }
}

/// Nodes produced by one training batch forward.
pub struct BatchForward {
    /// n x 1 variant scores (padding slots carry no meaning)
    pub scores: NodeId,
    /// n x 1 pointwise scores over the uncalibrated vectors
    pub first_pass_scores: NodeId,
    pub pad_mask: Vec<bool>,
}

fn init_heads<S: Scalar>(config: &ModelConfig, seed: u64, params: &mut ParamSet<S>) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let h = config.hidden;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut head = |params: &mut ParamSet<S>, w_name: &str, b_name: &str| -> Result<()> {
        let data: Vec<S> = (0..h)
            .map(|_| {
                // match the encoder init scale
                let z = loop {
                    let u1: f64 = rng.random();
                    let u2: f64 = rng.random();
                    if u1 <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    if z.abs() <= 2.0 {
                        break z;
                    }
                };
                S::from_f64(z * 0.02)
            })
            .collect();
        params.insert(w_name, Tensor::from_vec(vec![h, 1], data)?, true)?;
        params.insert(b_name, Tensor::zeros(vec![1, 1]), true)?;
        Ok(())
    };
    head(params, PROTO_W, PROTO_B)?;
    head(params, GROUP_W, GROUP_B)?;
    head(params, REL_W, REL_B)?;
    Ok(())
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a(tag.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            base_layers: 1,
            calib_layers: 1,
            group_layers: 1,
            vocab_size: 500,
            max_seq_len: 24,
            window: 16,
            stride: 8,
            m: 2,
            n: 4,
            o: 1,
            k: 20,
            residual: true,
            seed: 7,
        }
    }

    fn docs(texts: &[&str], cfg: &ModelConfig) -> Vec<CandidateDoc> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| CandidateDoc {
                doc_id: format!("d{i:02}"),
                passages: vec![tokenize(t, cfg.vocab_size)],
            })
            .collect()
    }

    #[test]
    fn model_init_is_deterministic() {
        let a = CoBertModel::<f64>::new(tiny_config()).unwrap();
        let b = CoBertModel::<f64>::new(tiny_config()).unwrap();
        assert_eq!(a.params.to_snapshot_bytes(), b.params.to_snapshot_bytes());

        let mut cfg = tiny_config();
        cfg.seed = 8;
        let c = CoBertModel::<f64>::new(cfg).unwrap();
        assert_ne!(a.params.to_snapshot_bytes(), c.params.to_snapshot_bytes());
    }

    #[test]
    fn rerank_scores_every_candidate_once() {
        let cfg = tiny_config();
        let model = CoBertModel::<f64>::new(cfg.clone()).unwrap();
        let cands = docs(
            &[
                "apple pie recipe",
                "banana bread",
                "apple tart with cinnamon",
                "pears and cream",
                "apple apple apple",
                "cherry cake",
                "plum pudding",
            ],
            &cfg,
        );
        for variant in [Variant::Full, Variant::PrfOnly, Variant::GroupOnly] {
            let list = model
                .rerank_query("q1", &model.tokenize("apple recipe"), &cands, variant)
                .unwrap();
            assert_eq!(list.entries.len(), cands.len(), "{variant}");
            let mut ids: Vec<&str> = list.entries.iter().map(|e| e.doc_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), cands.len(), "{variant}");
            for w in list.entries.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn rerank_is_deterministic() {
        let cfg = tiny_config();
        let model = CoBertModel::<f64>::new(cfg.clone()).unwrap();
        let cands = docs(&["alpha beta", "beta gamma", "alpha alpha", "delta"], &cfg);
        let q = model.tokenize("alpha");
        let a = model.rerank_query("q", &q, &cands, Variant::Full).unwrap();
        let b = model.rerank_query("q", &q, &cands, Variant::Full).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_only_ignores_prototype_count() {
        let mut cfg_a = tiny_config();
        cfg_a.m = 1;
        let mut cfg_b = tiny_config();
        cfg_b.m = 3;
        let model_a = CoBertModel::<f64>::new(cfg_a.clone()).unwrap();
        let model_b = CoBertModel::<f64>::new(cfg_b).unwrap();
        let cands = docs(
            &["one two", "two three", "three four", "four five", "five six"],
            &cfg_a,
        );
        let q = model_a.tokenize("two three");
        let a = model_a
            .rerank_query("q", &q, &cands, Variant::GroupOnly)
            .unwrap();
        let b = model_b
            .rerank_query("q", &q, &cands, Variant::GroupOnly)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prototype_of_identical_doc_matches_candidate_vector() {
        // a feedback document identical to a candidate yields bitwise equal
        // interaction vectors (same encoder, same weights)
        let cfg = tiny_config();
        let model = CoBertModel::<f64>::new(cfg.clone()).unwrap();
        let q = model.tokenize("same words");
        let seq = model.sequence(&q, &model.tokenize("identical doc")).unwrap();

        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&model.params, false);
        let protos = build_prototypes(
            &mut g,
            &mut binder,
            &model.base,
            "q",
            &[("p".into(), seq.clone())],
        )
        .unwrap();
        let r = interaction_vector(&mut g, &mut binder, &model.base, &seq).unwrap();
        assert_eq!(g.value(protos.vectors[0]), g.value(r));
    }

    #[test]
    fn f32_cast_reranks_close_to_f64() {
        let cfg = tiny_config();
        let model = CoBertModel::<f64>::new(cfg.clone()).unwrap();
        let model32: CoBertModel<f32> = model.cast().unwrap();
        let cands = docs(&["red green", "green blue", "blue red", "black"], &cfg);
        let q = model.tokenize("green");
        let a = model.rerank_query("q", &q, &cands, Variant::Full).unwrap();
        let q32 = model32.tokenize("green");
        let b = model32.rerank_query("q", &q32, &cands, Variant::Full).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x.score - y.score).abs() < 1e-3, "{} vs {}", x.score, y.score);
        }
    }
}
