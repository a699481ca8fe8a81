//! Training behavior: batch assembly and feeding orders, gradient flow
//! into every parameter group, convergence on a tiny separable dataset,
//! and seed determinism.

use corank_core::config::ModelConfig;
use corank_core::evalkit::Qrels;
use corank_core::model::{CoBertModel, Variant};
use corank_core::trainer::{
    make_batches, train, OrderMode, TrainConfig, TrainDataset, TrainDoc, TrainQuery,
};

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        base_layers: 1,
        calib_layers: 1,
        group_layers: 1,
        vocab_size: 128,
        max_seq_len: 16,
        window: 12,
        stride: 6,
        m: 2,
        n: 4,
        o: 1,
        k: 10,
        residual: true,
        seed: 5,
    }
}

fn train_config(epochs: usize, lr: f64, order: OrderMode) -> TrainConfig {
    TrainConfig {
        epochs,
        n: 4,
        m: 2,
        o: 1,
        base_lr: lr,
        warmup_fraction: 0.10,
        order_mode: order,
        seed: 11,
    }
}

/// Two queries, eight docs each; relevant docs repeat the query terms.
fn tiny_dataset(cfg: &ModelConfig) -> (TrainDataset, Qrels) {
    let mut qrels = Qrels::new();
    let mut queries = Vec::new();
    let specs: [(&str, &str, [&str; 8]); 2] = [
        (
            "1",
            "apple orchard",
            [
                "apple orchard apple fruit",
                "apple orchard harvest",
                "pear tree garden",
                "banana plantation",
                "apple orchard orchard",
                "grape vineyard wine",
                "orange grove sun",
                "kiwi farm south",
            ],
        ),
        (
            "2",
            "river delta",
            [
                "river delta water",
                "river delta flood plain",
                "mountain peak snow",
                "desert dune sand",
                "river delta silt",
                "forest canopy shade",
                "city street lamp",
                "meadow flower bee",
            ],
        ),
    ];
    for (qid, qtext, docs) in specs {
        let mut train_docs = Vec::new();
        for (i, text) in docs.iter().enumerate() {
            let doc_id = format!("q{qid}d{i}");
            let qwords = corank_core::interaction::words(qtext);
            let dwords = corank_core::interaction::words(text);
            let relevant = qwords.iter().all(|w| dwords.contains(w));
            qrels.insert(qid, &doc_id, u32::from(relevant));
            train_docs.push(TrainDoc {
                doc_id,
                passages: vec![corank_core::interaction::tokenize(text, cfg.vocab_size)],
                train_passage: 0,
                relevant,
            });
        }
        queries.push(TrainQuery {
            query_id: qid.to_string(),
            query_tokens: corank_core::interaction::tokenize(qtext, cfg.vocab_size),
            docs: train_docs,
        });
    }
    (
        TrainDataset {
            queries,
            skipped: Vec::new(),
        },
        qrels,
    )
}

fn ten_doc_dataset(cfg: &ModelConfig) -> TrainDataset {
    let docs: Vec<TrainDoc> = (0..10)
        .map(|i| TrainDoc {
            doc_id: format!("d{i}"),
            passages: vec![corank_core::interaction::tokenize(
                &format!("word{i} filler"),
                cfg.vocab_size,
            )],
            train_passage: 0,
            relevant: i % 3 == 0,
        })
        .collect();
    TrainDataset {
        queries: vec![TrainQuery {
            query_id: "q".into(),
            query_tokens: corank_core::interaction::tokenize("word0", cfg.vocab_size),
            docs,
        }],
        skipped: Vec::new(),
    }
}

#[test]
fn initial_order_follows_the_ranking_windows() {
    let cfg = toy_model_config();
    let dataset = ten_doc_dataset(&cfg);
    let batches = make_batches(&dataset, &train_config(1, 1e-3, OrderMode::Initial), 1).unwrap();
    assert_eq!(batches.len(), 3);
    assert_eq!(batches[0].candidate_ranks, vec![1, 2, 3, 4]);
    assert_eq!(batches[1].candidate_ranks, vec![4, 5, 6, 7]);
    assert_eq!(batches[2].candidate_ranks, vec![7, 8, 9, 10]);
    // overlap docs are carried as context
    assert!(batches[0].context_ids.is_empty());
    assert_eq!(batches[1].context_ids, vec!["d3".to_string()]);
    assert_eq!(batches[2].context_ids, vec!["d6".to_string()]);
    // prototypes are the top-m of the ranking for every batch
    for b in &batches {
        assert_eq!(b.prototype_ids, vec!["d0".to_string(), "d1".to_string()]);
    }
}

#[test]
fn reversed_order_flips_group_order() {
    let cfg = toy_model_config();
    let dataset = ten_doc_dataset(&cfg);
    let batches = make_batches(&dataset, &train_config(1, 1e-3, OrderMode::Reversed), 1).unwrap();
    let ranks: Vec<&Vec<usize>> = batches.iter().map(|b| &b.candidate_ranks).collect();
    assert_eq!(
        ranks,
        vec![&vec![7, 8, 9, 10], &vec![4, 5, 6, 7], &vec![1, 2, 3, 4]]
    );
}

#[test]
fn shuffled_order_is_a_seeded_permutation_of_the_same_multiset() {
    let cfg = toy_model_config();
    let (dataset, _) = tiny_dataset(&cfg);
    let tc = train_config(1, 1e-3, OrderMode::Shuffled);
    let a = make_batches(&dataset, &tc, 1).unwrap();
    let b = make_batches(&dataset, &tc, 1).unwrap();
    assert_eq!(a, b, "same epoch seed gives the same order");
    let c = make_batches(&dataset, &tc, 2).unwrap();
    let key = |b: &corank_core::trainer::TrainBatch| (b.query_id.clone(), b.group_index);
    let mut ka: Vec<_> = a.iter().map(key).collect();
    let mut kc: Vec<_> = c.iter().map(key).collect();
    assert_ne!(ka, kc, "different epochs shuffle differently");
    ka.sort();
    kc.sort();
    assert_eq!(ka, kc, "only the order differs");

    // multiset identical across order modes
    for mode in [OrderMode::Initial, OrderMode::Reversed] {
        let other = make_batches(&dataset, &train_config(1, 1e-3, mode), 1).unwrap();
        let mut ko: Vec<_> = other.iter().map(key).collect();
        ko.sort();
        assert_eq!(ka, ko, "{mode}");
    }
}

#[test]
fn padding_slots_are_masked_and_unlabeled() {
    let cfg = toy_model_config();
    let (dataset, _) = tiny_dataset(&cfg); // 8 docs, n=4, o=1 -> last group padded
    let batches = make_batches(&dataset, &train_config(1, 1e-3, OrderMode::Initial), 1).unwrap();
    let per_query = 3; // ceil((8-1)/3) = 3 groups
    assert_eq!(batches.len(), 2 * per_query);
    let last = &batches[per_query - 1];
    assert_eq!(last.candidate_ranks, vec![7, 8]);
    assert_eq!(last.pad_mask, vec![true, true, false, false]);
    assert_eq!(last.labels.len(), 4);
    assert_eq!(last.labels[2], 0.0);
    assert_eq!(last.labels[3], 0.0);
}

#[test]
fn one_step_updates_every_parameter_group() {
    let cfg = toy_model_config();
    let (dataset, qrels) = tiny_dataset(&cfg);
    let mut model = CoBertModel::<f64>::new(cfg).unwrap();
    let before = model.params.clone();
    let tc = train_config(1, 1e-3, OrderMode::Shuffled);
    let empty = TrainDataset::default();
    train(&mut model, &dataset, &empty, &qrels, Variant::Full, &tc).unwrap();

    let mut changed: std::collections::BTreeMap<&str, bool> = Default::default();
    for p in model.params.iter() {
        let group = if p.name.starts_with("base.") {
            "base"
        } else if p.name.starts_with("calibrator.") {
            "calibrator"
        } else if p.name.starts_with("scorer.") {
            "scorer"
        } else {
            "heads"
        };
        let b = before.get(&p.name).unwrap();
        let any = p
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .any(|(x, y)| x != y);
        *changed.entry(group).or_insert(false) |= any;
    }
    for group in ["base", "calibrator", "scorer", "heads"] {
        assert!(changed[group], "no update reached group {group}");
    }
}

#[test]
fn training_is_seed_deterministic() {
    let cfg = toy_model_config();
    let (dataset, qrels) = tiny_dataset(&cfg);
    let tc = train_config(3, 1e-3, OrderMode::Shuffled);
    let run = || {
        let mut model = CoBertModel::<f64>::new(toy_model_config()).unwrap();
        train(
            &mut model,
            &dataset,
            &dataset,
            &qrels,
            Variant::Full,
            &tc,
        )
        .unwrap();
        model.params.to_snapshot_bytes()
    };
    let _ = &cfg;
    assert_eq!(run(), run());
}

#[test]
fn overfits_a_separable_two_query_dataset() {
    let cfg = toy_model_config();
    let (dataset, qrels) = tiny_dataset(&cfg);
    let mut model = CoBertModel::<f64>::new(cfg).unwrap();
    let tc = train_config(60, 5e-3, OrderMode::Shuffled);
    let empty = TrainDataset::default();
    let outcome = train(&mut model, &dataset, &empty, &qrels, Variant::Full, &tc).unwrap();
    let final_loss = outcome.history.last().unwrap().mean_loss;
    assert!(
        final_loss < 0.05,
        "final epoch mean loss {final_loss} (history: {:?})",
        outcome
            .history
            .iter()
            .map(|h| h.mean_loss)
            .collect::<Vec<_>>()
    );
}

#[test]
fn degenerate_datasets_are_rejected() {
    let cfg = toy_model_config();
    let (mut dataset, qrels) = tiny_dataset(&cfg);
    for q in &mut dataset.queries {
        for d in &mut q.docs {
            d.relevant = false;
        }
    }
    let mut model = CoBertModel::<f64>::new(cfg).unwrap();
    let tc = train_config(1, 1e-3, OrderMode::Shuffled);
    let empty = TrainDataset::default();
    let err = train(&mut model, &dataset, &empty, &qrels, Variant::Full, &tc).unwrap_err();
    assert!(err.to_string().contains("degenerate training set"));
}

#[test]
fn best_checkpoint_is_restored() {
    let cfg = toy_model_config();
    let (dataset, qrels) = tiny_dataset(&cfg);
    let mut model = CoBertModel::<f64>::new(cfg).unwrap();
    let tc = train_config(3, 2e-3, OrderMode::Shuffled);
    let outcome = train(&mut model, &dataset, &dataset, &qrels, Variant::Full, &tc).unwrap();
    let best = outcome
        .checkpoints
        .iter()
        .find(|c| c.epoch == outcome.best_epoch)
        .unwrap();
    assert_eq!(model.params.to_snapshot_bytes(), best.snapshot);
    let max_val = outcome
        .checkpoints
        .iter()
        .map(|c| c.val_ndcg20)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.val_ndcg20, max_val);
}
