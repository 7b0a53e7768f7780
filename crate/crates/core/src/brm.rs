//! Base recommendation model.
//!
//! Two attention encoders produce an outer-session representation `h_N`
//! (user embedding attending over the recent items) and an inner-session
//! representation `h_M` (mean context embedding attending over the context).
//! A sigmoid gate `lambda_v = sigmoid(W . (h_M | h_N | e_v) + b)` mixes them
//! per candidate item `v`, and candidates are scored by `e_v . h_v` with
//! `h_v = lambda_v h_N + (1 - lambda_v) h_M`.
//!
//! Training minimizes `l1 + beta * l2`, where `l1` is a cross entropy over
//! the in-batch items and `l2` a binary cross entropy pulling `lambda` at the
//! true target toward pseudo-labels derived from the user's history and the
//! session context. All gradients are derived by hand.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{
    adam_step, attention, attention_backward, axpy, dot, sgd_step, sigmoid, softmax_backward, softmax_in_place,
    xavier_with, AdamState, AttnTrace, Mat, NumericsError, Optimizer,
};
use crate::session::{Interaction, ItemId, ItemSet, PredictionEvent, UserId};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Gate bias used to pin lambda at 0 or 1 for single-cause ablations.
const PINNED_GATE_BIAS: f64 = 40.0;

#[derive(Debug, Error)]
pub enum BrmError {
    #[error("empty session context")]
    EmptyContext,
    #[error("empty candidate set")]
    NoCandidates,
    #[error("target item {0} not among the candidates")]
    TargetNotCandidate(ItemId),
    #[error("no training events")]
    NoTrainingEvents,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize, report: TrainReport },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which cause the gate is allowed to express.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    /// lambda pinned at 0: inner-session representation only.
    IscOnly,
    /// lambda pinned at 1: outer-session representation only.
    OscOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrmConfig {
    pub dim: usize,
    pub lr: f64,
    pub beta: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub recent_cap: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    pub gate: GateMode,
    pub seed: u64,
}

impl Default for BrmConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            lr: 0.01,
            beta: 1.0,
            max_epochs: 50,
            batch_size: 128,
            recent_cap: 10,
            patience: 5,
            optimizer: Optimizer::default(),
            gate: GateMode::Learned,
            seed: 42,
        }
    }
}

impl BrmConfig {
    pub fn validate(&self) -> Result<(), BrmError> {
        if self.dim == 0 {
            return Err(BrmError::Config("dim must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(BrmError::Config("lr must be > 0".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(BrmError::Config("beta must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(BrmError::Config("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the optimizer touches. `gate_w` has length `3 * dim` and is
/// laid out as `[W_M | W_N | W_E]`, matching the concatenation
/// `h_M | h_N | e_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrmParams {
    pub dim: usize,
    pub user_emb: Mat,
    pub item_emb: Mat,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
}

impl BrmParams {
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_emb = xavier_with(n_users, dim, &mut rng);
        let item_emb = xavier_with(n_items, dim, &mut rng);
        let gate_w = xavier_with(1, 3 * dim, &mut rng).as_slice().to_vec();
        Self { dim, user_emb, item_emb, gate_w, gate_b: 0.0 }
    }

    pub fn zeros_like(other: &BrmParams) -> Self {
        Self {
            dim: other.dim,
            user_emb: Mat::zeros(other.user_emb.rows(), other.dim),
            item_emb: Mat::zeros(other.item_emb.rows(), other.dim),
            gate_w: vec![0.0; 3 * other.dim],
            gate_b: 0.0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn user(&self, u: UserId) -> &[f64] {
        self.user_emb.row(u as usize)
    }

    pub fn item(&self, v: ItemId) -> &[f64] {
        self.item_emb.row(v as usize)
    }

    fn w_m(&self) -> &[f64] {
        &self.gate_w[..self.dim]
    }

    fn w_n(&self) -> &[f64] {
        &self.gate_w[self.dim..2 * self.dim]
    }

    fn w_e(&self) -> &[f64] {
        &self.gate_w[2 * self.dim..]
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite() && self.item_emb.is_finite() && self.gate_w.iter().all(|x| x.is_finite()) && self.gate_b.is_finite()
    }

    /// All parameters as one vector: user_emb, item_emb, gate_w, gate_b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.user_emb.as_slice().len() + self.item_emb.as_slice().len() + 3 * self.dim + 1);
        out.extend_from_slice(self.user_emb.as_slice());
        out.extend_from_slice(self.item_emb.as_slice());
        out.extend_from_slice(&self.gate_w);
        out.push(self.gate_b);
        out
    }

    /// Inverse of [`BrmParams::to_flat`] using `self` for the shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let nu = self.user_emb.as_slice().len();
        let ni = self.item_emb.as_slice().len();
        let mut out = self.clone();
        out.user_emb.as_mut_slice().copy_from_slice(&flat[..nu]);
        out.item_emb.as_mut_slice().copy_from_slice(&flat[nu..nu + ni]);
        out.gate_w.copy_from_slice(&flat[nu + ni..nu + ni + 3 * self.dim]);
        out.gate_b = flat[nu + ni + 3 * self.dim];
        out
    }

    fn pin_gate(&mut self, mode: GateMode) {
        match mode {
            GateMode::Learned => {}
            GateMode::IscOnly => {
                self.gate_w.fill(0.0);
                self.gate_b = -PINNED_GATE_BIAS;
            }
            GateMode::OscOnly => {
                self.gate_w.fill(0.0);
                self.gate_b = PINNED_GATE_BIAS;
            }
        }
    }
}

/// Outer-session representation and, when the recent set is non-empty, the
/// attention trace that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct OscEncoding {
    pub h: Vec<f64>,
    pub attn: Option<AttnTrace>,
    user: UserId,
    recent: Vec<ItemId>,
}

/// `h_N = attention(e_u, E(R), E(R))`, or `e_u` when `R` is empty.
pub fn encode_osc(params: &BrmParams, user: UserId, recent: &ItemSet) -> OscEncoding {
    let query = params.user(user);
    if recent.is_empty() {
        return OscEncoding { h: query.to_vec(), attn: None, user, recent: Vec::new() };
    }
    let rows = Mat::gather(&params.item_emb, recent.as_slice());
    let attn = attention(query, rows.clone(), rows).expect("non-empty keys of width dim");
    OscEncoding { h: attn.output.clone(), attn: Some(attn), user, recent: recent.as_slice().to_vec() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IscEncoding {
    pub h: Vec<f64>,
    pub attn: AttnTrace,
    context: Vec<ItemId>,
}

/// `h_M = attention(avg(E(c)), E(c), E(c))`.
pub fn encode_isc(params: &BrmParams, context: &[ItemId]) -> Result<IscEncoding, BrmError> {
    if context.is_empty() {
        return Err(BrmError::EmptyContext);
    }
    let rows = Mat::gather(&params.item_emb, context);
    let mut mean = vec![0.0; params.dim];
    for i in 0..rows.rows() {
        axpy(1.0 / context.len() as f64, rows.row(i), &mut mean);
    }
    let attn = attention(&mean, rows.clone(), rows)?;
    Ok(IscEncoding { h: attn.output.clone(), attn, context: context.to_vec() })
}

/// `sigmoid(W . (h_M | h_N | e_v) + b)`.
pub fn gate_lambda(params: &BrmParams, h_m: &[f64], h_n: &[f64], item: ItemId) -> f64 {
    sigmoid(dot(params.w_m(), h_m) + dot(params.w_n(), h_n) + dot(params.w_e(), params.item(item)) + params.gate_b)
}

/// Per-candidate gate values, logits and softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub candidates: Vec<ItemId>,
    pub lambdas: Vec<f64>,
    /// `e_v . h_N` per candidate.
    pub osc_dots: Vec<f64>,
    /// `e_v . h_M` per candidate.
    pub isc_dots: Vec<f64>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn score_items(params: &BrmParams, h_m: &[f64], h_n: &[f64], candidates: &[ItemId]) -> Result<ScoreTrace, BrmError> {
    if candidates.is_empty() {
        return Err(BrmError::NoCandidates);
    }
    let shared = dot(params.w_m(), h_m) + dot(params.w_n(), h_n) + params.gate_b;
    let n = candidates.len();
    let mut trace = ScoreTrace {
        candidates: candidates.to_vec(),
        lambdas: Vec::with_capacity(n),
        osc_dots: Vec::with_capacity(n),
        isc_dots: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        probs: Vec::new(),
    };
    for &v in candidates {
        let e = params.item(v);
        let lambda = sigmoid(shared + dot(params.w_e(), e));
        let on = dot(e, h_n);
        let om = dot(e, h_m);
        trace.lambdas.push(lambda);
        trace.osc_dots.push(on);
        trace.isc_dots.push(om);
        trace.scores.push(lambda * on + (1.0 - lambda) * om);
    }
    trace.probs = trace.scores.clone();
    softmax_in_place(&mut trace.probs);
    Ok(trace)
}

/// Full forward pass for one event over a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub osc: OscEncoding,
    pub isc: IscEncoding,
    pub scores: ScoreTrace,
}

impl ForwardTrace {
    pub fn h_n(&self) -> &[f64] {
        &self.osc.h
    }

    pub fn h_m(&self) -> &[f64] {
        &self.isc.h
    }
}

pub fn forward(params: &BrmParams, event: &PredictionEvent, candidates: &[ItemId]) -> Result<ForwardTrace, BrmError> {
    let osc = encode_osc(params, event.user, &event.recent);
    let isc = encode_isc(params, &event.context)?;
    let scores = score_items(params, &isc.h, &osc.h, candidates)?;
    Ok(ForwardTrace { osc, isc, scores })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-event cross entropy: `-[log p(v+) + sum_{v' != v+} log(1 - p(v'))]`.
pub fn loss_l1(probs: &[f64], target_index: usize) -> f64 {
    let mut loss = -clamp_prob(probs[target_index]).ln();
    for (j, &p) in probs.iter().enumerate() {
        if j != target_index {
            loss -= (1.0 - clamp_prob(p)).ln();
        }
    }
    loss
}

fn loss_l1_grad(probs: &[f64], target_index: usize) -> Vec<f64> {
    let inside = |p: f64| p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| match (j == target_index, inside(p)) {
            (_, false) => 0.0,
            (true, true) => -1.0 / p,
            (false, true) => 1.0 / (1.0 - p),
        })
        .collect()
}

/// Self-supervision targets for the gate at the true next item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoLabels {
    /// The user interacted with the target in an earlier session.
    pub y_n: bool,
    /// The target is in the session context.
    pub y_m: bool,
}

pub fn pseudo_labels(event: &PredictionEvent, history: &[Interaction]) -> PseudoLabels {
    let session_start = event.history_pos.saturating_sub(event.context.len());
    let seen = &history[..session_start.min(history.len())];
    PseudoLabels {
        y_n: seen.iter().any(|x| x.item == event.target),
        y_m: event.context.contains(&event.target),
    }
}

/// `-[y log x + (1 - y) log(1 - x)]` with `x` clamped.
pub fn bce(x: f64, y: bool) -> f64 {
    let x = clamp_prob(x);
    if y {
        -x.ln()
    } else {
        -(1.0 - x).ln()
    }
}

/// `BCE(lambda, y_N) + BCE(1 - lambda, y_M)`.
pub fn loss_l2(lambda: f64, labels: PseudoLabels) -> f64 {
    bce(lambda, labels.y_n) + bce(1.0 - lambda, labels.y_m)
}

fn loss_l2_grad(lambda: f64, labels: PseudoLabels) -> f64 {
    if !(lambda > PROB_CLAMP && lambda < 1.0 - PROB_CLAMP) {
        return 0.0;
    }
    let mut g = if labels.y_n { -1.0 / lambda } else { 1.0 / (1.0 - lambda) };
    g += if labels.y_m { 1.0 / (1.0 - lambda) } else { -1.0 / lambda };
    g
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// A mini-batch of events with their pseudo-labels and the in-batch
/// candidate set (targets plus context items, deduplicated and sorted).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub events: Vec<&'a PredictionEvent>,
    pub labels: Vec<PseudoLabels>,
    pub candidates: Vec<ItemId>,
}

impl<'a> Batch<'a> {
    pub fn new(events: Vec<&'a PredictionEvent>, labels: Vec<PseudoLabels>) -> Self {
        let candidates: ItemSet = events
            .iter()
            .flat_map(|e| e.context.iter().copied().chain(std::iter::once(e.target)))
            .collect();
        Self { events, labels, candidates: candidates.as_slice().to_vec() }
    }
}

/// Mean batch loss and, if requested, its gradient with respect to every
/// parameter.
pub fn batch_loss(
    params: &BrmParams,
    batch: &Batch<'_>,
    beta: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<BrmParams>), BrmError> {
    let n = batch.events.len();
    if n == 0 {
        return Err(BrmError::NoTrainingEvents);
    }
    let inv_n = 1.0 / n as f64;
    let mut grads = want_grad.then(|| BrmParams::zeros_like(params));
    let (mut l1_sum, mut l2_sum) = (0.0, 0.0);

    for (event, &labels) in batch.events.iter().zip(&batch.labels) {
        let target_index = batch
            .candidates
            .binary_search(&event.target)
            .map_err(|_| BrmError::TargetNotCandidate(event.target))?;
        let trace = forward(params, event, &batch.candidates)?;
        let probs = &trace.scores.probs;
        l1_sum += loss_l1(probs, target_index);
        let lambda_t = trace.scores.lambdas[target_index];
        l2_sum += loss_l2(lambda_t, labels);

        if let Some(g) = grads.as_mut() {
            let d_probs: Vec<f64> = loss_l1_grad(probs, target_index).iter().map(|x| x * inv_n).collect();
            let d_scores = softmax_backward(probs, &d_probs);
            let mut d_lambda: Vec<f64> = d_scores
                .iter()
                .zip(trace.scores.osc_dots.iter().zip(&trace.scores.isc_dots))
                .map(|(dz, (on, om))| dz * (on - om))
                .collect();
            d_lambda[target_index] += beta * inv_n * loss_l2_grad(lambda_t, labels);
            backward_event(params, &trace, &d_scores, &d_lambda, g);
        }
    }

    let l1 = l1_sum * inv_n;
    let l2 = l2_sum * inv_n;
    Ok((LossBreakdown { l1, l2, total: l1 + beta * l2 }, grads))
}

/// Accumulate gradients for one event given `dL/dscore` and the direct
/// `dL/dlambda` per candidate (the score path's lambda term is included by
/// the caller).
fn backward_event(params: &BrmParams, trace: &ForwardTrace, d_scores: &[f64], d_lambda: &[f64], g: &mut BrmParams) {
    let d = params.dim;
    let h_n = trace.h_n();
    let h_m = trace.h_m();
    let mut d_hn = vec![0.0; d];
    let mut d_hm = vec![0.0; d];
    let mut d_gate_pre_sum = 0.0;

    for (j, &v) in trace.scores.candidates.iter().enumerate() {
        let lambda = trace.scores.lambdas[j];
        let dz = d_scores[j];
        let da = d_lambda[j] * lambda * (1.0 - lambda);
        let e = params.item(v);
        {
            let ge = g.item_emb.row_mut(v as usize);
            axpy(dz * lambda, h_n, ge);
            axpy(dz * (1.0 - lambda), h_m, ge);
            axpy(da, params.w_e(), ge);
        }
        axpy(dz * lambda, e, &mut d_hn);
        axpy(dz * (1.0 - lambda), e, &mut d_hm);
        axpy(da, e, &mut g.gate_w[2 * d..]);
        d_gate_pre_sum += da;
    }
    axpy(d_gate_pre_sum, h_m, &mut g.gate_w[..d]);
    axpy(d_gate_pre_sum, h_n, &mut g.gate_w[d..2 * d]);
    g.gate_b += d_gate_pre_sum;
    axpy(d_gate_pre_sum, params.w_m(), &mut d_hm);
    axpy(d_gate_pre_sum, params.w_n(), &mut d_hn);

    match &trace.osc.attn {
        None => axpy(1.0, &d_hn, g.user_emb.row_mut(trace.osc.user as usize)),
        Some(attn) => {
            let ag = attention_backward(attn, &d_hn).expect("shapes from forward");
            axpy(1.0, &ag.d_query, g.user_emb.row_mut(trace.osc.user as usize));
            for (i, &v) in trace.osc.recent.iter().enumerate() {
                let row = g.item_emb.row_mut(v as usize);
                axpy(1.0, ag.d_keys.row(i), row);
                axpy(1.0, ag.d_values.row(i), row);
            }
        }
    }

    let ag = attention_backward(&trace.isc.attn, &d_hm).expect("shapes from forward");
    let share = 1.0 / trace.isc.context.len() as f64;
    for (i, &v) in trace.isc.context.iter().enumerate() {
        let row = g.item_emb.row_mut(v as usize);
        axpy(share, &ag.d_query, row);
        axpy(1.0, ag.d_keys.row(i), row);
        axpy(1.0, ag.d_values.row(i), row);
    }
}

/// Inner-session state reused across many outer-session encodings when
/// scoring the full catalog.
#[derive(Debug, Clone)]
pub struct IscScores {
    pub h_m: Vec<f64>,
    item_dots: Vec<f64>,
    gate_m: f64,
}

/// Frozen-parameter scorer over the full catalog.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    params: &'a BrmParams,
    item_gate: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a BrmParams) -> Self {
        let item_gate = (0..params.n_items()).map(|v| dot(params.w_e(), params.item(v as ItemId))).collect();
        Self { params, item_gate }
    }

    pub fn params(&self) -> &BrmParams {
        self.params
    }

    pub fn osc(&self, user: UserId, recent: &ItemSet) -> Vec<f64> {
        encode_osc(self.params, user, recent).h
    }

    pub fn isc(&self, context: &[ItemId]) -> Result<IscScores, BrmError> {
        let h_m = encode_isc(self.params, context)?.h;
        let item_dots = (0..self.params.n_items()).map(|v| dot(self.params.item(v as ItemId), &h_m)).collect();
        let gate_m = dot(self.params.w_m(), &h_m);
        Ok(IscScores { h_m, item_dots, gate_m })
    }

    /// Full-catalog logits for a given inner-session state and `h_N`.
    pub fn logits(&self, isc: &IscScores, h_n: &[f64]) -> Vec<f64> {
        let shared = isc.gate_m + dot(self.params.w_n(), h_n) + self.params.gate_b;
        (0..self.params.n_items())
            .map(|v| {
                let lambda = sigmoid(shared + self.item_gate[v]);
                let on = dot(self.params.item(v as ItemId), h_n);
                lambda * on + (1.0 - lambda) * isc.item_dots[v]
            })
            .collect()
    }

    pub fn probs(&self, isc: &IscScores, h_n: &[f64]) -> Vec<f64> {
        let mut p = self.logits(isc, h_n);
        softmax_in_place(&mut p);
        p
    }

    pub fn lambda(&self, isc: &IscScores, h_n: &[f64], item: ItemId) -> f64 {
        sigmoid(isc.gate_m + dot(self.params.w_n(), h_n) + self.params.gate_b + self.item_gate[item as usize])
    }

    /// The model's own prediction `p(v | ISC(s), OSC(s))` over the catalog.
    pub fn predict(&self, event: &PredictionEvent) -> Result<Vec<f64>, BrmError> {
        let isc = self.isc(&event.context)?;
        Ok(self.probs(&isc, &self.osc(event.user, &event.recent)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_recall: Option<f64>,
    pub early_stopped: bool,
}

impl std::fmt::Display for TrainReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "epoch\tl1\tl2\ttotal\tval_recall@20")?;
        for e in &self.epochs {
            let val = e.val_recall.map_or("-".to_owned(), |r| format!("{r:.6}"));
            writeln!(f, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", e.epoch, e.l1, e.l2, e.total, val)?;
        }
        write!(f, "best_epoch\t{}\nearly_stopped\t{}", self.best_epoch, self.early_stopped)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BrmParams,
    pub report: TrainReport,
}

/// Recall@`k` of the model's own full-catalog prediction.
pub fn validation_recall(params: &BrmParams, events: &[PredictionEvent], k: usize) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    let scorer = Scorer::new(params);
    let hits = events
        .iter()
        .filter(|e| {
            let logits = scorer.isc(&e.context).map(|isc| scorer.logits(&isc, &scorer.osc(e.user, &e.recent)));
            logits.map(|l| crate::eval::rank_of_target(&l, e.target) <= k).unwrap_or(false)
        })
        .count();
    hits as f64 / events.len() as f64
}

struct OptimizerState {
    blocks: [AdamState; 4],
}

fn apply_update(params: &mut BrmParams, grads: &BrmParams, state: &mut OptimizerState, config: &BrmConfig) -> Result<(), NumericsError> {
    let mut gate_b = [params.gate_b];
    let update_gate = config.gate == GateMode::Learned;
    let blocks: [(&mut [f64], &[f64], bool); 4] = [
        (params.user_emb.as_mut_slice(), grads.user_emb.as_slice(), true),
        (params.item_emb.as_mut_slice(), grads.item_emb.as_slice(), true),
        (&mut params.gate_w, &grads.gate_w, update_gate),
        (&mut gate_b, std::slice::from_ref(&grads.gate_b), update_gate),
    ];
    let mut first_err = None;
    for ((p, g, active), st) in blocks.into_iter().zip(state.blocks.iter_mut()) {
        if !active {
            continue;
        }
        let res = match config.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => adam_step(p, g, st, config.lr, (beta1, beta2), eps),
            Optimizer::Sgd => sgd_step(p, g, config.lr),
        };
        if let Err(e) = res {
            first_err.get_or_insert(e);
        }
    }
    params.gate_b = gate_b[0];
    first_err.map_or(Ok(()), Err)
}

/// Mini-batch training with early stopping on validation Recall@20.
///
/// `histories` are the per-user chronological interaction lists used for
/// the pseudo-labels. Returns the parameters of the best validation epoch
/// (or the last epoch when there are no validation events).
pub fn train(
    n_users: usize,
    n_items: usize,
    histories: &[Vec<Interaction>],
    train_events: &[PredictionEvent],
    val_events: &[PredictionEvent],
    config: &BrmConfig,
) -> Result<TrainOutcome, BrmError> {
    config.validate()?;
    if train_events.is_empty() {
        return Err(BrmError::NoTrainingEvents);
    }
    let labels: Vec<PseudoLabels> = train_events.iter().map(|e| pseudo_labels(e, &histories[e.user as usize])).collect();

    let mut params = BrmParams::init(n_users, n_items, config.dim, config.seed);
    params.pin_gate(config.gate);
    let mut state = OptimizerState {
        blocks: [
            AdamState::new(params.user_emb.as_slice().len()),
            AdamState::new(params.item_emb.as_slice().len()),
            AdamState::new(params.gate_w.len()),
            AdamState::new(1),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..train_events.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, BrmParams)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut l1, mut l2, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::new(
                chunk.iter().map(|&i| &train_events[i]).collect(),
                chunk.iter().map(|&i| labels[i]).collect(),
            );
            let (loss, grads) = batch_loss(&params, &batch, config.beta, true)?;
            if !loss.total.is_finite() {
                return Err(BrmError::Diverged { epoch, report });
            }
            let w = chunk.len() as f64 / train_events.len() as f64;
            l1 += loss.l1 * w;
            l2 += loss.l2 * w;
            total += loss.total * w;
            if let Err(e) = apply_update(&mut params, &grads.expect("requested"), &mut state, config) {
                log::warn!("epoch {epoch}: skipped a parameter block update: {e}");
            }
        }

        let val_recall = (!val_events.is_empty()).then(|| validation_recall(&params, val_events, 20));
        report.epochs.push(EpochStats { epoch, l1, l2, total, val_recall });
        log::debug!("epoch {epoch}: l1 {l1:.4} l2 {l2:.4} val R@20 {val_recall:?}");

        if let Some(r) = val_recall {
            if best.as_ref().map_or(true, |(b, _)| r > *b) {
                best = Some((r, params.clone()));
                report.best_epoch = epoch;
                report.best_val_recall = Some(r);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    report.early_stopped = true;
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }

    let params = best.map_or(params, |(_, p)| p);
    Ok(TrainOutcome { params, report })
}
