//! Interaction calibration with feedback prototypes.
//!
//! The top-m documents of the first-pass ranking provide m prototype
//! interaction vectors t_i. Each candidate vector r_j is paired with every
//! prototype as a two-token sequence through a shallow encoder; the m
//! calibrated outputs are combined by softmax weights derived from the
//! prototypes themselves, and optionally averaged with the original r_j
//! (the residual connection).

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::interaction::{interaction_vector, TokenSequence};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamBinder};

/// Prototype vectors for one query, live in a computation graph.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub query_id: String,
    pub source_doc_ids: Vec<String>,
    /// m nodes of shape 1 x H
    pub vectors: Vec<NodeId>,
}

impl PrototypeSet {
    pub fn m(&self) -> usize {
        self.vectors.len()
    }
}

/// Encode each feedback document with the shared interaction encoder and
/// collect the CLS vectors as prototypes.
pub fn build_prototypes<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    base: &Encoder,
    query_id: &str,
    prf_docs: &[(String, TokenSequence)],
) -> Result<PrototypeSet> {
    if prf_docs.is_empty() {
        return Err(Error::EmptyPrototypes);
    }
    let mut seen = std::collections::HashSet::new();
    for (doc_id, _) in prf_docs {
        if !seen.insert(doc_id.clone()) {
            return Err(Error::Invalid(format!(
                "feedback documents must be distinct, saw {doc_id} twice"
            )));
        }
    }
    let mut vectors = Vec::with_capacity(prf_docs.len());
    for (_, seq) in prf_docs {
        vectors.push(interaction_vector(g, binder, base, seq)?);
    }
    Ok(PrototypeSet {
        query_id: query_id.to_string(),
        source_doc_ids: prf_docs.iter().map(|(d, _)| d.clone()).collect(),
        vectors,
    })
}

/// Softmax weights over the prototypes: one scalar logit per prototype from
/// a shared H->1 projection, normalized across the m prototypes.
/// Returns a 1 x m node.
pub fn prototype_weights<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    protos: &PrototypeSet,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId> {
    if protos.m() == 0 {
        return Err(Error::EmptyPrototypes);
    }
    let stacked = g.stack_rows(&protos.vectors)?; // m x H
    let w = binder.bind(g, w_name)?; // H x 1
    let b = binder.bind(g, b_name)?; // 1 x 1
    let logits = g.matmul(stacked, w)?; // m x 1
    let logits = g.add_row(logits, b)?;
    let row = g.reshape(logits, 1, protos.m())?;
    Ok(g.softmax_rows(row))
}

/// Calibrate one candidate interaction vector (1 x H) against the
/// prototypes. Every (t_i, r_j) pair runs through the shared two-layer
/// encoder; the output at r_j's slot is the calibrated representation, and
/// the weighted average over prototypes gives r'. With `residual` the
/// result is (r + r')/2, otherwise r' itself.
pub fn calibrate<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    calib_encoder: &Encoder,
    protos: &PrototypeSet,
    r: NodeId,
    w_name: &str,
    b_name: &str,
    residual: bool,
) -> Result<NodeId> {
    let weights = prototype_weights(g, binder, protos, w_name, b_name)?;
    let r_prime = calibrated_average(g, binder, calib_encoder, protos, r, weights)?;
    if residual {
        let sum = g.add(r, r_prime)?;
        Ok(g.scale(sum, S::from_f64(0.5)))
    } else {
        Ok(r_prime)
    }
}

/// The weighted average of calibrated representations, before any residual.
fn calibrated_average<S: Scalar>(
    g: &mut Graph<S>,
    binder: &mut ParamBinder<S>,
    calib_encoder: &Encoder,
    protos: &PrototypeSet,
    r: NodeId,
    weights: NodeId,
) -> Result<NodeId> {
    let mask = [true, true];
    let mut calibrated = Vec::with_capacity(protos.m());
    for &t in &protos.vectors {
        let pair = g.stack_rows(&[t, r])?; // 2 x H
        let encoded = calib_encoder.encode_embedded(g, binder, pair, &mask)?;
        calibrated.push(g.slice_rows(encoded, 1, 1)?); // r_j's slot
    }
    let stacked = g.stack_rows(&calibrated)?; // m x H
    g.matmul(weights, stacked) // 1 x H
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::ParamSet;

    fn calib_encoder(h: usize) -> Encoder {
        Encoder::new(
            EncoderConfig {
                layers: 2,
                hidden: h,
                heads: 2,
                ffn_dim: 4 * h,
                use_positional: true,
                max_positions: 2,
                vocab_size: 1,
                use_segments: false,
                token_inputs: false,
            },
            "calibrator",
        )
        .unwrap()
    }

    fn setup(h: usize, seed: u64) -> (Encoder, ParamSet<f64>) {
        let enc = calib_encoder(h);
        let mut params = ParamSet::new();
        enc.init_params(seed, &mut params).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x9e37);
        let w: Vec<f64> = (0..h).map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5)).collect();
        params
            .insert("heads.proto_w", crate::tensor::Tensor::from_vec(vec![h, 1], w).unwrap(), true)
            .unwrap();
        params
            .insert("heads.proto_b", crate::tensor::Tensor::scalar(0.25), true)
            .unwrap();
        (enc, params)
    }

    fn random_rows(g: &mut Graph<f64>, count: usize, h: usize, seed: u64) -> Vec<NodeId> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let data: Vec<f64> = (0..h)
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect();
                g.leaf_from(1, h, data, false).unwrap()
            })
            .collect()
    }

    fn protos_from(vectors: Vec<NodeId>) -> PrototypeSet {
        PrototypeSet {
            query_id: "q".into(),
            source_doc_ids: (0..vectors.len()).map(|i| format!("d{i}")).collect(),
            vectors,
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let h = 8;
        let (_enc, params) = setup(h, 1);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        for m in [1usize, 2, 5] {
            let protos = protos_from(random_rows(&mut g, m, h, m as u64));
            let w = prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
                .unwrap();
            let sum: f64 = g.value(w).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn singleton_prototype_weight_is_one_and_r_prime_is_rt() {
        let h = 8;
        let (enc, params) = setup(h, 2);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let protos = protos_from(random_rows(&mut g, 1, h, 3));
        let r = random_rows(&mut g, 1, h, 4)[0];

        let w = prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
            .unwrap();
        assert_eq!(g.value(w), &[1.0]);

        let r_prime = calibrate(
            &mut g, &mut binder, &enc, &protos, r, "heads.proto_w", "heads.proto_b", false,
        )
        .unwrap();
        // recompute rt_1j by hand: encode (t_1, r) and take the second row
        let pair = g.stack_rows(&[protos.vectors[0], r]).unwrap();
        let encoded = enc
            .encode_embedded(&mut g, &mut binder, pair, &[true, true])
            .unwrap();
        let rt = g.slice_rows(encoded, 1, 1).unwrap();
        assert_eq!(g.value(r_prime), g.value(rt));
    }

    #[test]
    fn identical_prototypes_get_uniform_weights() {
        let h = 8;
        let (_enc, params) = setup(h, 5);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let base = random_rows(&mut g, 1, h, 6)[0];
        for m in [2usize, 3, 4] {
            let protos = protos_from(vec![base; m]);
            let w = prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
                .unwrap();
            for &x in g.value(w) {
                assert!((x - 1.0 / m as f64).abs() < 1e-12, "m={m}");
            }
        }
    }

    #[test]
    fn bias_shift_leaves_weights_unchanged() {
        let h = 8;
        let (_enc, mut params) = setup(h, 7);
        let mut g = Graph::new();
        let protos = protos_from(random_rows(&mut g, 3, h, 8));
        let w1 = {
            let mut binder = ParamBinder::new(&params, false);
            prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
                .map(|n| g.value(n).to_vec())
                .unwrap()
        };
        params.get_mut("heads.proto_b").unwrap().tensor.data_mut()[0] = -17.5;
        let w2 = {
            let mut binder = ParamBinder::new(&params, false);
            prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
                .map(|n| g.value(n).to_vec())
                .unwrap()
        };
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_weights() {
        let h = 8;
        let (_enc, mut params) = setup(h, 9);
        for v in params.get_mut("heads.proto_w").unwrap().tensor.data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let protos = protos_from(random_rows(&mut g, 4, h, 10));
        let w = prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
            .unwrap();
        for &x in g.value(w) {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_averages_with_the_original() {
        let h = 8;
        let (enc, params) = setup(h, 11);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let protos = protos_from(random_rows(&mut g, 3, h, 12));
        let r = random_rows(&mut g, 1, h, 13)[0];
        let no_res = calibrate(
            &mut g, &mut binder, &enc, &protos, r, "heads.proto_w", "heads.proto_b", false,
        )
        .unwrap();
        let with_res = calibrate(
            &mut g, &mut binder, &enc, &protos, r, "heads.proto_w", "heads.proto_b", true,
        )
        .unwrap();
        // 2 r_hat - r' = r, elementwise
        let rv = g.value(r).to_vec();
        let rp = g.value(no_res).to_vec();
        let rh = g.value(with_res).to_vec();
        for i in 0..h {
            assert!((2.0 * rh[i] - rp[i] - rv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_prototypes_permutes_weights_and_keeps_r_prime() {
        let h = 8;
        let (enc, params) = setup(h, 14);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let rows = random_rows(&mut g, 4, h, 15);
        let r = random_rows(&mut g, 1, h, 16)[0];

        let protos = protos_from(rows.clone());
        let w = prototype_weights(&mut g, &mut binder, &protos, "heads.proto_w", "heads.proto_b")
            .unwrap();
        let rp = calibrate(
            &mut g, &mut binder, &enc, &protos, r, "heads.proto_w", "heads.proto_b", false,
        )
        .unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<NodeId> = perm.iter().map(|&i| rows[i]).collect();
        let protos_p = protos_from(permuted);
        let w_p = prototype_weights(&mut g, &mut binder, &protos_p, "heads.proto_w", "heads.proto_b")
            .unwrap();
        let rp_p = calibrate(
            &mut g, &mut binder, &enc, &protos_p, r, "heads.proto_w", "heads.proto_b", false,
        )
        .unwrap();

        let wv = g.value(w);
        let wv_p = g.value(w_p);
        for (slot, &src) in perm.iter().enumerate() {
            assert!((wv_p[slot] - wv[src]).abs() < 1e-12);
        }
        for (a, b) in g.value(rp).iter().zip(g.value(rp_p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_prototypes_are_rejected() {
        let h = 8;
        let (enc, params) = setup(h, 17);
        let mut g: Graph<f64> = Graph::new();
        let mut binder = ParamBinder::new(&params, false);
        let err = build_prototypes(&mut g, &mut binder, &enc, "q", &[]).unwrap_err();
        assert!(err.to_string().contains("m >= 1"));
    }
}
