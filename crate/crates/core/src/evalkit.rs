//! TREC-style evaluation: qrels and run file I/O, precision, nDCG, mean
//! average precision, and the paired two-tailed t-test.
//!
//! Metric means run over the queries present in the qrels; a judged query
//! missing from a run contributes zero. Queries that appear only in the run
//! are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::group::ScoredList;

/// Relevance judgments: (query, doc) -> grade >= 0. Unjudged pairs read as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.grades
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.grades.keys()
    }

    pub fn judged_docs(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    /// Number of judged-relevant documents (grade >= 1) for a query.
    pub fn relevant_count(&self, query_id: &str) -> usize {
        self.grades
            .get(query_id)
            .map(|m| m.values().filter(|&&g| g >= 1).count())
            .unwrap_or(0)
    }
}

/// Parsed run rows grouped per query and ordered by rank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    per_query: BTreeMap<String, Vec<RunRow>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub query_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

impl RunFile {
    /// Assemble from per-query rows already ordered by rank.
    pub fn from_parts(per_query: BTreeMap<String, Vec<RunRow>>) -> Self {
        Self { per_query }
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[RunRow]> {
        self.per_query.get(query_id).map(|v| v.as_slice())
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.per_query.keys()
    }

    pub fn rows(&self) -> impl Iterator<Item = &RunRow> {
        self.per_query.values().flatten()
    }
}

/// Parse `qid 0 docid grade` lines.
pub fn parse_qrels(path: &Path) -> Result<Qrels> {
    let content = fs::read_to_string(path)?;
    let mut qrels = Qrels::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| Error::ParseLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if fields.len() != 4 {
            return Err(err(&format!("expected 4 fields, got {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| err(&format!("bad relevance grade {:?}", fields[3])))?;
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

/// Parse `qid Q0 docid rank score tag` lines; per query, ranks must be
/// 1..R consecutive with non-increasing scores.
pub fn parse_run(path: &Path) -> Result<RunFile> {
    let content = fs::read_to_string(path)?;
    let mut per_query: BTreeMap<String, Vec<RunRow>> = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::ParseLine {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", fields.len())));
        }
        let rank: u32 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad score {:?}", fields[4])))?;
        per_query.entry(fields[0].to_string()).or_default().push(RunRow {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    for (qid, rows) in &mut per_query {
        rows.sort_by_key(|r| r.rank);
        for (i, row) in rows.iter().enumerate() {
            if row.rank != i as u32 + 1 {
                return Err(Error::Invalid(format!(
                    "run for query {qid}: ranks are not consecutive at rank {}",
                    row.rank
                )));
            }
        }
        for w in rows.windows(2) {
            if w[1].score > w[0].score {
                return Err(Error::Invalid(format!(
                    "run for query {qid}: score increases at rank {}",
                    w[1].rank
                )));
            }
        }
    }
    Ok(RunFile { per_query })
}

/// Write scored lists in TREC format. Scores use the shortest decimal form
/// that round-trips, so parse(write(x)) is loss-free.
pub fn write_run(lists: &[ScoredList], tag: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            out.push_str(&format!(
                "{} Q0 {} {} {} {}\n",
                list.query_id,
                e.doc_id,
                i + 1,
                e.score,
                tag
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-query metric values over the qrels query set, plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

fn summarize(per_query: BTreeMap<String, f64>) -> MetricResult {
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricResult { per_query, mean }
}

/// Fraction of the top `cutoff` ranks holding a relevant document; the
/// denominator stays `cutoff` even when fewer documents were retrieved.
pub fn precision_at(run: &RunFile, qrels: &Qrels, cutoff: usize) -> Result<MetricResult> {
    if cutoff == 0 {
        return Err(Error::Invalid("cutoff must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for qid in qrels.query_ids() {
        let hits = run
            .ranking(qid)
            .map(|rows| {
                rows.iter()
                    .take(cutoff)
                    .filter(|r| qrels.grade(qid, &r.doc_id) >= 1)
                    .count()
            })
            .unwrap_or(0);
        per_query.insert(qid.clone(), hits as f64 / cutoff as f64);
    }
    Ok(summarize(per_query))
}

/// nDCG with linear gain and log2(rank+1) discount. Queries without any
/// relevant document score zero.
pub fn ndcg_at(run: &RunFile, qrels: &Qrels, cutoff: usize) -> Result<MetricResult> {
    if cutoff == 0 {
        return Err(Error::Invalid("cutoff must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for qid in qrels.query_ids() {
        let mut grades: Vec<u32> = qrels
            .judged_docs(qid)
            .map(|m| m.values().copied().filter(|&g| g > 0).collect())
            .unwrap_or_default();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(cutoff)
            .enumerate()
            .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
            .sum();
        if idcg == 0.0 {
            per_query.insert(qid.clone(), 0.0);
            continue;
        }
        let dcg: f64 = run
            .ranking(qid)
            .map(|rows| {
                rows.iter()
                    .take(cutoff)
                    .enumerate()
                    .map(|(i, r)| qrels.grade(qid, &r.doc_id) as f64 / ((i + 2) as f64).log2())
                    .sum()
            })
            .unwrap_or(0.0);
        per_query.insert(qid.clone(), dcg / idcg);
    }
    Ok(summarize(per_query))
}

/// Average precision at a cutoff; the denominator is the total number of
/// judged-relevant documents for the query, retrieved or not.
pub fn map_at(run: &RunFile, qrels: &Qrels, cutoff: usize) -> Result<MetricResult> {
    if cutoff == 0 {
        return Err(Error::Invalid("cutoff must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for qid in qrels.query_ids() {
        let total_relevant = qrels.relevant_count(qid);
        if total_relevant == 0 {
            per_query.insert(qid.clone(), 0.0);
            continue;
        }
        let mut sum = 0.0;
        let mut hits = 0usize;
        if let Some(rows) = run.ranking(qid) {
            for (i, r) in rows.iter().take(cutoff).enumerate() {
                if qrels.grade(qid, &r.doc_id) >= 1 {
                    hits += 1;
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
        }
        per_query.insert(qid.clone(), sum / total_relevant as f64);
    }
    Ok(summarize(per_query))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
}

/// Paired two-tailed t-test over per-query values; sd uses the n-1
/// denominator, and p comes from the Student t distribution. All-zero
/// differences give t = 0, p = 1.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired_t_test: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("paired_t_test needs at least 2 pairs".into()));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let dof = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, dof }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                dof,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let x = dof as f64 / (dof as f64 + t * t);
    let p = incomplete_beta(dof as f64 / 2.0, 0.5, x);
    Ok(TTest { t, p, dof })
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}
