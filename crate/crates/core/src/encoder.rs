//! Configurable transformer encoder stack.
//!
//! One implementation serves three roles: the interaction encoder over
//! `[CLS] query [SEP] passage [SEP]` token sequences, the two-layer
//! calibration encoder over pairs of interaction vectors, and the
//! groupwise scorer encoder over stacks of candidate vectors with
//! positional embeddings disabled.
//!
//! Layers follow the post-LN ordering: attention, residual add, layer norm,
//! feed-forward (GELU), residual add, layer norm. Masked positions receive a
//! -1e30 attention bias, so they are neither attended to nor able to change
//! any unmasked output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamBinder, ParamSet, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const MASK_BIAS: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub use_positional: bool,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub use_segments: bool,
    /// true when the encoder consumes token/segment ids; false when it is
    /// fed pre-embedded hidden vectors
    pub token_inputs: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("hidden and heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::InvalidConfig("ffn_dim must be positive".into()));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidConfig("max_positions must be positive".into()));
        }
        if self.token_inputs && self.vocab_size < 1 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// An encoder stack bound to a parameter name prefix.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    fn layer_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.layer{}.{}", self.prefix, layer, suffix)
    }

    /// Deterministic initialization: weights and embedding tables from a
    /// truncated normal (std 0.02, cut at two sigma), biases zero, layer
    /// norm gamma one and beta zero.
    pub fn init_params<S: Scalar>(&self, seed: u64, params: &mut ParamSet<S>) -> Result<()> {
        let cfg = &self.config;
        let h = cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| -> Tensor<S> {
            let data = (0..rows * cols)
                .map(|_| S::from_f64(truncated_normal(&mut rng) * INIT_STD))
                .collect();
            Tensor::from_vec(vec![rows, cols], data).expect("sized by construction")
        };

        if cfg.token_inputs {
            params.insert(&self.name("embed.token"), normal(cfg.vocab_size, h), true)?;
            if cfg.use_segments {
                params.insert(&self.name("embed.segment"), normal(2, h), true)?;
            }
            if cfg.use_positional {
                params.insert(&self.name("embed.position"), normal(cfg.max_positions, h), true)?;
            }
            params.insert(&self.name("embed.ln_gamma"), ones_row(h), true)?;
            params.insert(&self.name("embed.ln_beta"), zeros_row(h), true)?;
        } else if cfg.use_positional {
            params.insert(&self.name("embed.position"), normal(cfg.max_positions, h), true)?;
        }

        for l in 0..cfg.layers {
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                params.insert(&self.layer_name(l, w), normal(h, h), true)?;
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                params.insert(&self.layer_name(l, b), zeros_row(h), true)?;
            }
            params.insert(&self.layer_name(l, "attn.ln_gamma"), ones_row(h), true)?;
            params.insert(&self.layer_name(l, "attn.ln_beta"), zeros_row(h), true)?;
            params.insert(&self.layer_name(l, "ffn.w1"), normal(h, cfg.ffn_dim), true)?;
            params.insert(&self.layer_name(l, "ffn.b1"), zeros_row(cfg.ffn_dim), true)?;
            params.insert(&self.layer_name(l, "ffn.w2"), normal(cfg.ffn_dim, h), true)?;
            params.insert(&self.layer_name(l, "ffn.b2"), zeros_row(h), true)?;
            params.insert(&self.layer_name(l, "ffn.ln_gamma"), ones_row(h), true)?;
            params.insert(&self.layer_name(l, "ffn.ln_beta"), zeros_row(h), true)?;
        }
        Ok(())
    }

    /// Number of stored values across this stack's parameters.
    pub fn param_count(&self) -> usize {
        let cfg = &self.config;
        let h = cfg.hidden;
        let mut count = 0;
        if cfg.token_inputs {
            count += cfg.vocab_size * h;
            if cfg.use_segments {
                count += 2 * h;
            }
            if cfg.use_positional {
                count += cfg.max_positions * h;
            }
            count += 2 * h;
        } else if cfg.use_positional {
            count += cfg.max_positions * h;
        }
        let per_layer = 4 * h * h + 4 * h   // attention projections
            + 2 * h                          // attention layer norm
            + h * cfg.ffn_dim + cfg.ffn_dim  // ffn in
            + cfg.ffn_dim * h + h            // ffn out
            + 2 * h; // ffn layer norm
        count + cfg.layers * per_layer
    }

    /// Encode a token/segment id sequence. Returns the s x H output node.
    pub fn encode_tokens<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binder: &mut ParamBinder<S>,
        token_ids: &[u32],
        segment_ids: &[u8],
        mask: &[bool],
    ) -> Result<NodeId> {
        if !self.config.token_inputs {
            return Err(Error::InvalidConfig(format!(
                "encoder {} takes pre-embedded inputs",
                self.prefix
            )));
        }
        let s = token_ids.len();
        self.check_seq(s, mask)?;
        if segment_ids.len() != s {
            return Err(Error::ShapeMismatch(format!(
                "segment ids {} vs tokens {s}",
                segment_ids.len()
            )));
        }

        let tok_table = binder.bind(g, &self.name("embed.token"))?;
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let mut x = g.embed(tok_table, &ids)?;
        if self.config.use_segments {
            let seg_table = binder.bind(g, &self.name("embed.segment"))?;
            let segs: Vec<usize> = segment_ids.iter().map(|&t| t as usize).collect();
            let seg = g.embed(seg_table, &segs)?;
            x = g.add(x, seg)?;
        }
        if self.config.use_positional {
            let pos_table = binder.bind(g, &self.name("embed.position"))?;
            let positions: Vec<usize> = (0..s).collect();
            let pos = g.embed(pos_table, &positions)?;
            x = g.add(x, pos)?;
        }
        let gamma = binder.bind(g, &self.name("embed.ln_gamma"))?;
        let beta = binder.bind(g, &self.name("embed.ln_beta"))?;
        x = g.layer_norm_rows(x, gamma, beta, S::from_f64(LAYER_NORM_EPS))?;

        self.run_layers(g, binder, x, mask)
    }

    /// Encode a pre-embedded s x H sequence. Returns the s x H output node.
    pub fn encode_embedded<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binder: &mut ParamBinder<S>,
        input: NodeId,
        mask: &[bool],
    ) -> Result<NodeId> {
        if self.config.token_inputs {
            return Err(Error::InvalidConfig(format!(
                "encoder {} takes token inputs",
                self.prefix
            )));
        }
        let (s, h) = g.shape(input);
        if h != self.config.hidden {
            return Err(Error::ShapeMismatch(format!(
                "input hidden {h} vs config {}",
                self.config.hidden
            )));
        }
        self.check_seq(s, mask)?;

        let mut x = input;
        if self.config.use_positional {
            let pos_table = binder.bind(g, &self.name("embed.position"))?;
            let positions: Vec<usize> = (0..s).collect();
            let pos = g.embed(pos_table, &positions)?;
            x = g.add(x, pos)?;
        }
        self.run_layers(g, binder, x, mask)
    }

    fn check_seq(&self, s: usize, mask: &[bool]) -> Result<()> {
        if s == 0 {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        if s > self.config.max_positions {
            return Err(Error::ExceedsMaxPositions {
                len: s,
                max: self.config.max_positions,
            });
        }
        if mask.len() != s {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs sequence {s}",
                mask.len()
            )));
        }
        Ok(())
    }

    fn run_layers<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        binder: &mut ParamBinder<S>,
        mut x: NodeId,
        mask: &[bool],
    ) -> Result<NodeId> {
        let s = mask.len();
        let h = self.config.hidden;
        let d = self.config.head_dim();
        let eps = S::from_f64(LAYER_NORM_EPS);
        let scale = S::from_f64(1.0 / (d as f64).sqrt());

        // additive bias: masked keys get -1e30 in every row
        let mut mask_bias = vec![S::zero(); s * s];
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                let bias = S::from_f64(MASK_BIAS);
                for r in 0..s {
                    mask_bias[r * s + j] = bias;
                }
            }
        }

        for l in 0..self.config.layers {
            let wq = binder.bind(g, &self.layer_name(l, "attn.wq"))?;
            let bq = binder.bind(g, &self.layer_name(l, "attn.bq"))?;
            let wk = binder.bind(g, &self.layer_name(l, "attn.wk"))?;
            let bk = binder.bind(g, &self.layer_name(l, "attn.bk"))?;
            let wv = binder.bind(g, &self.layer_name(l, "attn.wv"))?;
            let bv = binder.bind(g, &self.layer_name(l, "attn.bv"))?;
            let wo = binder.bind(g, &self.layer_name(l, "attn.wo"))?;
            let bo = binder.bind(g, &self.layer_name(l, "attn.bo"))?;

            let q = g.matmul(x, wq)?;
            let q = g.add_row(q, bq)?;
            let k = g.matmul(x, wk)?;
            let k = g.add_row(k, bk)?;
            let v = g.matmul(x, wv)?;
            let v = g.add_row(v, bv)?;

            let mut head_outputs = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let qh = g.slice_cols(q, head * d, d)?;
                let kh = g.slice_cols(k, head * d, d)?;
                let vh = g.slice_cols(v, head * d, d)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let scores = g.add_const(scores, &mask_bias)?;
                let probs = g.softmax_rows(scores);
                head_outputs.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&head_outputs)?;
            let attn = g.matmul(ctx, wo)?;
            let attn = g.add_row(attn, bo)?;

            let res = g.add(x, attn)?;
            let ln1_g = binder.bind(g, &self.layer_name(l, "attn.ln_gamma"))?;
            let ln1_b = binder.bind(g, &self.layer_name(l, "attn.ln_beta"))?;
            x = g.layer_norm_rows(res, ln1_g, ln1_b, eps)?;

            let w1 = binder.bind(g, &self.layer_name(l, "ffn.w1"))?;
            let b1 = binder.bind(g, &self.layer_name(l, "ffn.b1"))?;
            let w2 = binder.bind(g, &self.layer_name(l, "ffn.w2"))?;
            let b2 = binder.bind(g, &self.layer_name(l, "ffn.b2"))?;
            let ff = g.matmul(x, w1)?;
            let ff = g.add_row(ff, b1)?;
            let ff = g.gelu(ff);
            let ff = g.matmul(ff, w2)?;
            let ff = g.add_row(ff, b2)?;

            let res2 = g.add(x, ff)?;
            let ln2_g = binder.bind(g, &self.layer_name(l, "ffn.ln_gamma"))?;
            let ln2_b = binder.bind(g, &self.layer_name(l, "ffn.ln_beta"))?;
            x = g.layer_norm_rows(res2, ln2_g, ln2_b, eps)?;
        }
        let _ = h;
        Ok(x)
    }
}

fn ones_row<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::from_vec(vec![1, n], vec![S::one(); n]).expect("sized by construction")
}

fn zeros_row<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(vec![1, n])
}

/// Standard normal sample, rejected outside two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
