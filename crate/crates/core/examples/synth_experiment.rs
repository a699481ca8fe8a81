//! Scratch harness for the synthetic effectiveness experiment.
//!
//! Usage: synth_experiment <variant> <seed> [queries] [epochs] [lr]

use std::time::Instant;

use corank_core::config::ModelConfig;
use corank_core::evalkit::ndcg_at;
use corank_core::firststage::{bm25_search, InvertedIndex};
use corank_core::model::{CoBertModel, Variant};
use corank_core::synthetic::{generate, SyntheticSpec};
use corank_core::trainer::{
    build_dataset, evaluate_ndcg20, run_from_lists, rerank_dataset, train, OrderMode, TrainConfig,
    TrainDataset,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(Variant::Full);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let queries: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-3);

    let t0 = Instant::now();
    let spec = SyntheticSpec {
        queries,
        docs_per_query: 200,
        seed,
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let index = InvertedIndex::build(&data.corpus).unwrap();

    let hidden: usize = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(16);
    let base_layers: usize = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(1);
    let config = ModelConfig {
        hidden,
        heads: if hidden >= 32 { 4 } else { 2 },
        base_layers,
        calib_layers: 2,
        group_layers: 4,
        vocab_size: 32768,
        max_seq_len: 48,
        window: 40,
        stride: 20,
        m: 4,
        n: 25,
        o: 4,
        k: 200,
        residual: true,
        seed,
    };

    // initial BM25 run over the whole corpus
    let mut lists = Vec::new();
    for (qid, text) in &data.queries {
        let ranked = bm25_search(&index, qid, text, config.k);
        lists.push(corank_core::group::ScoredList::from_scores(
            qid,
            ranked.entries.into_iter().map(|(d, s)| (d, s, 0)).collect(),
        ));
    }
    let run = run_from_lists(&lists);
    let dataset = build_dataset(&data.corpus, &index, &data.queries, &run, &data.qrels, &config)
        .unwrap();
    println!("prep: {:?} ({} queries)", t0.elapsed(), dataset.queries.len());

    // split: 30/8/12 proportions
    let qids = dataset.query_ids();
    let n_train = queries * 3 / 5;
    let n_val = queries / 6;
    let train_set = dataset.subset(&qids[..n_train]);
    let val_set = dataset.subset(&qids[n_train..n_train + n_val]);
    let test_set = dataset.subset(&qids[n_train + n_val..]);

    // untrained baseline sanity: BM25 nDCG on test queries
    let bm25_metric = ndcg_at(&run, &data.qrels, 20).unwrap();
    let bm25_test: f64 = test_set
        .query_ids()
        .iter()
        .map(|q| bm25_metric.per_query[q])
        .sum::<f64>()
        / test_set.queries.len() as f64;
    println!("bm25 test nDCG@20: {bm25_test:.4}");

    let tc = TrainConfig {
        epochs,
        n: config.n,
        m: config.m,
        o: config.o,
        base_lr: lr,
        warmup_fraction: 0.10,
        order_mode: OrderMode::Shuffled,
        seed,
    };
    let mut model = CoBertModel::<f64>::new(config).unwrap();
    let t1 = Instant::now();
    let outcome = train(&mut model, &train_set, &val_set, &data.qrels, variant, &tc).unwrap();
    println!("train: {:?}", t1.elapsed());
    for h in &outcome.history {
        println!(
            "  epoch {}: loss {:.4} (variant {:.4} fp {:.4}) val nDCG@20 {:.4}",
            h.epoch, h.mean_loss, h.mean_variant_loss, h.mean_first_pass_loss, h.val_ndcg20
        );
    }
    let t2 = Instant::now();
    let test_ndcg = evaluate_ndcg20(&model, &test_set, &data.qrels, variant).unwrap();

    // first-pass-only quality on the same test queries
    let mut fp_lists = Vec::new();
    for q in &test_set.queries {
        let entries: Vec<(String, f64, usize)> = model
            .first_pass(&q.query_tokens, &q.candidate_docs())
            .unwrap()
            .into_iter()
            .map(|e| (e.doc_id, e.score, 0))
            .collect();
        fp_lists.push(corank_core::group::ScoredList::from_scores(&q.query_id, entries));
    }
    let fp_metric = ndcg_at(&run_from_lists(&fp_lists), &data.qrels, 20).unwrap();
    let fp_ndcg: f64 = test_set
        .query_ids()
        .iter()
        .map(|q| fp_metric.per_query[q])
        .sum::<f64>()
        / test_set.queries.len() as f64;

    println!(
        "variant {variant} seed {seed}: test nDCG@20 {test_ndcg:.4} firstpass {fp_ndcg:.4} (best epoch {}, rerank {:?}, total {:?})",
        outcome.best_epoch,
        t2.elapsed(),
        t0.elapsed()
    );

    // mean final rank per document kind over the test queries
    let lists = rerank_dataset(&model, &test_set, variant).unwrap();
    let mut by_kind: std::collections::BTreeMap<corank_core::synthetic::DocKind, (f64, usize)> =
        Default::default();
    for list in &lists {
        for (rank, e) in list.entries.iter().enumerate() {
            let kind = data.kinds[&e.doc_id];
            let entry = by_kind.entry(kind).or_insert((0.0, 0));
            entry.0 += (rank + 1) as f64;
            entry.1 += 1;
        }
    }
    for (kind, (sum, count)) in &by_kind {
        println!("  mean rank {:?}: {:.1}", kind, sum / *count as f64);
    }
    let _ = rerank_dataset(&model, &TrainDataset::default(), variant);
}
