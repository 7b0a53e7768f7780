//! Full-catalog ranking metrics, the SKNN baseline and the cross-validation
//! driver.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::brm::{self, BrmConfig, BrmError, BrmParams, Scorer, TrainReport};
use crate::counterfactual::{jaccard, CocoConfig, CocoModel, NeighborIndex};
use crate::ingest::FoldSplit;
use crate::numerics::CompensatedSum;
use crate::session::{expand_events, Dataset, ItemId, ItemSet, PredictionEvent, Session, SessionId};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no events to evaluate")]
    NoEvents,
    #[error("rank must be >= 1")]
    ZeroRank,
}

/// 1-based rank of `target` under descending score, ties to the smaller id.
pub fn rank_of_target(scores: &[f64], target: ItemId) -> usize {
    let t = target as usize;
    let s = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(v, &x)| x > s || (x == s && v < t))
        .count()
}

/// The `k` best items by descending score, ties to the smaller id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(ItemId, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(scores.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_by(by_rank);
    idx.truncate(k);
    idx.into_iter().map(|v| (v as ItemId, scores[v])).collect()
}

fn check(ranks: &[usize]) -> Result<(), EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::NoEvents);
    }
    if ranks.contains(&0) {
        return Err(EvalError::ZeroRank);
    }
    Ok(())
}

/// Fraction of events whose target ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over events with `rank <= k` (0 otherwise);
/// the ideal DCG of a single relevant item is 1.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks)?;
    let sum: CompensatedSum = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .collect();
    Ok(sum.value() / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub label: String,
    pub n_events: usize,
    pub at: Vec<MetricAtK>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n_events: usize,
    pub at: Vec<MetricAtK>,
    pub by_length: Vec<LengthBucket>,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }

    /// Metrics from per-event `(rank, session_length)` pairs.
    pub fn from_ranks(ranked: &[(usize, usize)], ks: &[usize]) -> Result<Self, EvalError> {
        let ranks: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        let at = metrics_at(&ranks, ks)?;
        let mut buckets: Vec<(usize, Vec<usize>)> = Vec::new();
        for &(rank, len) in ranked {
            let key = length_bucket(len);
            match buckets.iter_mut().find(|b| b.0 == key) {
                Some(b) => b.1.push(rank),
                None => buckets.push((key, vec![rank])),
            }
        }
        buckets.sort_by_key(|b| b.0);
        let by_length = buckets
            .into_iter()
            .map(|(key, r)| {
                Ok(LengthBucket { label: length_label(key), n_events: r.len(), at: metrics_at(&r, ks)? })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self { n_events: ranks.len(), at, by_length })
    }

    /// Unweighted mean over folds.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let at = first
            .at
            .iter()
            .map(|m| {
                let recall: CompensatedSum = reports.iter().filter_map(|r| r.recall(m.k)).collect();
                let ndcg: CompensatedSum = reports.iter().filter_map(|r| r.ndcg(m.k)).collect();
                MetricAtK { k: m.k, recall: recall.value() / n, ndcg: ndcg.value() / n }
            })
            .collect();
        Some(Self { n_events: reports.iter().map(|r| r.n_events).sum(), at, by_length: Vec::new() })
    }
}

fn metrics_at(ranks: &[usize], ks: &[usize]) -> Result<Vec<MetricAtK>, EvalError> {
    ks.iter()
        .map(|&k| Ok(MetricAtK { k, recall: recall_at_k(ranks, k)?, ndcg: ndcg_at_k(ranks, k)? }))
        .collect()
}

fn length_bucket(len: usize) -> usize {
    len.min(10)
}

fn length_label(bucket: usize) -> String {
    if bucket >= 10 {
        "10-20".into()
    } else {
        bucket.to_string()
    }
}

/// Session-kNN baseline: neighbors by Jaccard similarity between the
/// context's item set and each training session's item set.
#[derive(Debug, Clone)]
pub struct SknnIndex {
    n_items: usize,
    sessions: Vec<(SessionId, ItemSet)>,
    postings: HashMap<ItemId, Vec<usize>>,
}

impl SknnIndex {
    pub fn new<'a>(train: impl IntoIterator<Item = &'a Session>, n_items: usize) -> Self {
        let mut sessions: Vec<(SessionId, ItemSet)> = train.into_iter().map(|s| (s.id, s.items.iter().copied().collect())).collect();
        sessions.sort_by_key(|s| s.0);
        let mut postings: HashMap<ItemId, Vec<usize>> = HashMap::new();
        for (i, (_, items)) in sessions.iter().enumerate() {
            for v in items.iter() {
                postings.entry(v).or_default().push(i);
            }
        }
        Self { n_items, sessions, postings }
    }

    /// `score(v) = sum of similarities of the top-k neighbors containing v`.
    pub fn score(&self, context: &[ItemId], k_neighbors: usize) -> Vec<f64> {
        let query: ItemSet = context.iter().copied().collect();
        let mut touched: Vec<usize> = query.iter().filter_map(|v| self.postings.get(&v)).flatten().copied().collect();
        touched.sort_unstable();
        touched.dedup();
        let mut scored: Vec<(usize, f64)> = touched.into_iter().map(|i| (i, jaccard(&query, &self.sessions[i].1))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k_neighbors);
        let mut scores = vec![0.0; self.n_items];
        for (i, sim) in scored {
            for v in self.sessions[i].1.iter() {
                scores[v as usize] += sim;
            }
        }
        scores
    }
}

/// Prediction events of one fold, with recent sets from the full dataset.
#[derive(Debug, Clone)]
pub struct FoldEvents<'a> {
    pub fold: usize,
    pub train_sessions: Vec<&'a Session>,
    pub train: Vec<PredictionEvent>,
    pub validation: Vec<PredictionEvent>,
    pub test: Vec<PredictionEvent>,
}

impl<'a> FoldEvents<'a> {
    pub fn new(dataset: &Dataset, sessions: &'a [Session], split: &FoldSplit, recent_cap: usize) -> Self {
        let by_id: HashMap<SessionId, &Session> = sessions.iter().map(|s| (s.id, s)).collect();
        let pick = |ids: &[SessionId]| -> Vec<Session> { ids.iter().map(|id| by_id[id].clone()).collect() };
        let train_sessions: Vec<&Session> = split.train.iter().map(|id| by_id[id]).collect();
        Self {
            fold: split.index,
            train: expand_events(&pick(&split.train), dataset, recent_cap),
            validation: expand_events(&pick(&split.validation), dataset, recent_cap),
            test: expand_events(&pick(&split.test), dataset, recent_cap),
            train_sessions,
        }
    }

    pub fn neighbor_index(&self, dataset: &Dataset, recent_cap: usize) -> NeighborIndex {
        NeighborIndex::from_sessions(self.train_sessions.iter().copied(), dataset, recent_cap)
    }

    pub fn sknn_index(&self, n_items: usize) -> SknnIndex {
        SknnIndex::new(self.train_sessions.iter().copied(), n_items)
    }

    pub fn train_brm(&self, dataset: &Dataset, config: &BrmConfig) -> Result<brm::TrainOutcome, BrmError> {
        brm::train(dataset.n_users(), dataset.n_items(), &dataset.histories, &self.train, &self.validation, config)
    }
}

/// Rank every event's target under `score(index, event)`, fanning out over
/// `threads` workers. Results keep event order, so the thread count never
/// changes them.
pub fn rank_events<F>(events: &[PredictionEvent], threads: usize, score: F) -> Result<Vec<(usize, usize)>, BrmError>
where
    F: Fn(usize, &PredictionEvent) -> Result<Vec<f64>, BrmError> + Sync,
{
    let rank_one = |i: usize, e: &PredictionEvent| score(i, e).map(|s| (rank_of_target(&s, e.target), e.session_len));
    if threads <= 1 || events.len() < 2 {
        return events.iter().enumerate().map(|(i, e)| rank_one(i, e)).collect();
    }
    let chunk = events.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let rank_one = &rank_one;
        let handles: Vec<_> = events
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter().enumerate().map(|(i, e)| rank_one(c * chunk + i, e)).collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(events.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Coco,
    Brm,
    Sknn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Coco => "coco",
            ModelKind::Brm => "brm",
            ModelKind::Sknn => "sknn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coco" => Ok(ModelKind::Coco),
            "brm" => Ok(ModelKind::Brm),
            "sknn" => Ok(ModelKind::Sknn),
            other => Err(format!("unknown model '{other}' (expected coco, brm or sknn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub model: ModelKind,
    pub brm: BrmConfig,
    pub coco: CocoConfig,
    pub ks: Vec<usize>,
    pub k_neighbors: usize,
    pub threads: usize,
    /// When set, epsilon is chosen per fold from this grid by validation
    /// Recall@20 instead of using `coco.epsilon`.
    pub epsilon_grid: Option<Vec<f64>>,
    /// Restrict to these fold indices.
    pub folds: Option<Vec<usize>>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Coco,
            brm: BrmConfig::default(),
            coco: CocoConfig::default(),
            ks: vec![5, 20],
            k_neighbors: 500,
            threads: 1,
            epsilon_grid: None,
            folds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricReport,
    pub train_report: Option<TrainReport>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub model: ModelKind,
    pub folds: Vec<FoldResult>,
    pub mean: Option<MetricReport>,
    pub failures: Vec<(usize, String)>,
}

/// Pick the epsilon with the best validation Recall@20 (ties to the smaller).
pub fn select_epsilon(model: &CocoModel<'_>, validation: &[PredictionEvent], grid: &[f64], threads: usize) -> Result<f64, BrmError> {
    let aggregated: Vec<Vec<f64>> = validation.iter().map(|e| model.aggregate(e)).collect::<Result<_, _>>()?;
    let mut best = (f64::NEG_INFINITY, model.config.epsilon);
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    for eps in grid {
        let ranks: Vec<(usize, usize)> = rank_events(validation, threads, |i, e| {
            Ok(crate::counterfactual::boost(&aggregated[i], e, eps))
        })?;
        let r: Vec<usize> = ranks.iter().map(|x| x.0).collect();
        let recall = recall_at_k(&r, 20).unwrap_or(0.0);
        if recall > best.0 {
            best = (recall, eps);
        }
    }
    Ok(best.1)
}

/// Evaluate one model on one prepared fold.
pub fn evaluate_fold(dataset: &Dataset, fold: &FoldEvents<'_>, config: &CvConfig) -> Result<FoldResult, BrmError> {
    let ks = &config.ks;
    let metrics = |ranked: Vec<(usize, usize)>| MetricReport::from_ranks(&ranked, ks).map_err(|_| BrmError::NoTrainingEvents);
    match config.model {
        ModelKind::Sknn => {
            let index = fold.sknn_index(dataset.n_items());
            let ranked = rank_events(&fold.test, config.threads, |_, e| Ok(index.score(&e.context, config.k_neighbors)))?;
            Ok(FoldResult { fold: fold.fold, report: metrics(ranked)?, train_report: None, epsilon: None })
        }
        ModelKind::Brm | ModelKind::Coco => {
            let trained = fold.train_brm(dataset, &config.brm)?;
            evaluate_trained(dataset, fold, &trained.params, config).map(|mut r| {
                r.train_report = Some(trained.report);
                r
            })
        }
    }
}

/// Evaluate BRM or COCO with already-trained parameters.
pub fn evaluate_trained(dataset: &Dataset, fold: &FoldEvents<'_>, params: &BrmParams, config: &CvConfig) -> Result<FoldResult, BrmError> {
    let metrics = |ranked: Vec<(usize, usize)>| MetricReport::from_ranks(&ranked, &config.ks).map_err(|_| BrmError::NoTrainingEvents);
    match config.model {
        ModelKind::Brm => {
            let scorer = Scorer::new(params);
            let ranked = rank_events(&fold.test, config.threads, |_, e| {
                let isc = scorer.isc(&e.context)?;
                Ok(scorer.logits(&isc, &scorer.osc(e.user, &e.recent)))
            })?;
            Ok(FoldResult { fold: fold.fold, report: metrics(ranked)?, train_report: None, epsilon: None })
        }
        ModelKind::Coco => {
            let index = fold.neighbor_index(dataset, config.brm.recent_cap);
            let mut model = CocoModel::new(params, index, config.coco.clone());
            let epsilon = match &config.epsilon_grid {
                Some(grid) if !fold.validation.is_empty() => select_epsilon(&model, &fold.validation, grid, config.threads)?,
                _ => config.coco.epsilon,
            };
            model.config.epsilon = epsilon;
            let ranked = rank_events(&fold.test, config.threads, |_, e| model.predict(e))?;
            Ok(FoldResult { fold: fold.fold, report: metrics(ranked)?, train_report: None, epsilon: Some(epsilon) })
        }
        ModelKind::Sknn => unreachable!("sknn has no trained parameters"),
    }
}

/// Cross-validate `config.model` over the given folds. A failing fold is
/// recorded and skipped.
pub fn run_cv(dataset: &Dataset, sessions: &[Session], folds: &[FoldSplit], config: &CvConfig) -> CvReport {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for split in folds {
        if let Some(only) = &config.folds {
            if !only.contains(&split.index) {
                continue;
            }
        }
        let fold = FoldEvents::new(dataset, sessions, split, config.brm.recent_cap);
        match evaluate_fold(dataset, &fold, config) {
            Ok(r) => {
                log::info!("fold {}: {} R@20 {:?}", split.index, config.model.name(), r.report.recall(20));
                results.push(r);
            }
            Err(e) => {
                log::error!("fold {} failed: {e}", split.index);
                failures.push((split.index, e.to_string()));
            }
        }
    }
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report.clone()).collect();
    CvReport { model: config.model, mean: MetricReport::mean(&reports), folds: results, failures }
}

impl CvReport {
    /// Rows `model,fold,K,recall,ndcg,n_events,length_bucket`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,fold,K,recall,ndcg,n_events,length_bucket\n");
        let model = self.model.name();
        let mut row = |fold: &str, m: &MetricAtK, n: usize, bucket: &str| {
            let _ = writeln!(out, "{model},{fold},{},{:.6},{:.6},{n},{bucket}", m.k, m.recall, m.ndcg);
        };
        for f in &self.folds {
            for m in &f.report.at {
                row(&f.fold.to_string(), m, f.report.n_events, "all");
            }
            for b in &f.report.by_length {
                for m in &b.at {
                    row(&f.fold.to_string(), m, b.n_events, &b.label);
                }
            }
        }
        if let Some(mean) = &self.mean {
            for m in &mean.at {
                row("mean", m, mean.n_events, "all");
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# model: {}", self.model.name());
        let _ = writeln!(out, "# validation sessions are drawn from each test fold; early stopping sees part of the test data");
        let _ = writeln!(out, "{:<6} {:>4} {:>9} {:>9} {:>9}", "fold", "K", "recall", "ndcg", "events");
        let mut line = |fold: &str, m: &MetricAtK, n: usize| {
            let _ = writeln!(out, "{fold:<6} {:>4} {:>9.4} {:>9.4} {n:>9}", m.k, m.recall, m.ndcg);
        };
        for f in &self.folds {
            for m in &f.report.at {
                line(&f.fold.to_string(), m, f.report.n_events);
            }
        }
        if let Some(mean) = &self.mean {
            for m in &mean.at {
                line("mean", m, mean.n_events);
            }
        }
        for (fold, err) in &self.failures {
            let _ = writeln!(out, "# fold {fold} failed: {err}");
        }
        out
    }
}
