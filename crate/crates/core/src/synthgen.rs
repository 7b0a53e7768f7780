//! Synthetic session logs with planted causes.
//!
//! Every generated interaction is produced by exactly one mechanism:
//!
//! * **OSC**: the user picks from their own long-term preference, a Zipf
//!   distribution over the core items of their home cluster, skipping items
//!   already in the session.
//! * **ISC**: the pick follows the session: either a transition partner of
//!   the previous item or, optionally, a repeat of a context item.
//!   Partners are complement items of the same cluster (phone, then case).
//! * **CONFOUND**: a time-limited promotion makes unrelated items (one per
//!   cluster, two by default) popular at once, so they get picked together
//!   only while the promotion runs.
//!
//! Sessions are laid out on a global timeline far enough apart that
//! gap-based sessionization recovers them exactly.

use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::brm::{BrmParams, Scorer};
use crate::ingest::{sessionize, IngestConfig};
use crate::session::{Dataset, Interaction, ItemId, PredictionEvent, Session, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Config(String),
    #[error("cause labels are all identical; AUC undefined")]
    SingleClass,
    #[error("no events")]
    NoEvents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CauseLabel {
    Isc,
    Osc,
    Confound,
}

impl CauseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CauseLabel::Isc => "ISC",
            CauseLabel::Osc => "OSC",
            CauseLabel::Confound => "CONFOUND",
        }
    }
}

impl fmt::Display for CauseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CauseLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ISC" => Ok(CauseLabel::Isc),
            "OSC" => Ok(CauseLabel::Osc),
            "CONFOUND" => Ok(CauseLabel::Confound),
            other => Err(format!("unknown cause label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_sessions: usize,
    /// Share of next-item picks driven by an active promotion.
    pub confound_rate: f64,
    /// Share of next-item picks driven by the session itself.
    pub isc_rate: f64,
    /// Share of next-item picks driven by the user's preference.
    pub osc_rate: f64,
    pub n_item_clusters: usize,
    /// Share of the catalog made of complement items, the only targets of
    /// transitions. The rest are core items that users prefer.
    pub complement_share: f64,
    pub n_confounder_events: usize,
    /// Items promoted together by one confounder event, each from a
    /// different cluster.
    pub promoted_per_event: usize,
    /// Transition partners per item.
    pub partners_per_item: usize,
    /// Chance that an inner-session pick repeats a context item.
    pub isc_repeat_prob: f64,
    /// Zipf exponent of each user's preference over their home cluster.
    pub preference_skew: f64,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            n_sessions: 5000,
            confound_rate: 0.3,
            isc_rate: 0.4,
            osc_rate: 0.3,
            n_item_clusters: 10,
            complement_share: 0.3,
            n_confounder_events: 25,
            promoted_per_event: 2,
            partners_per_item: 2,
            isc_repeat_prob: 0.0,
            preference_skew: 1.0,
            min_session_len: 2,
            max_session_len: 8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_owned()));
        if self.n_users == 0 || self.n_items == 0 || self.n_sessions == 0 {
            return err("counts must be >= 1");
        }
        let rates = [self.confound_rate, self.isc_rate, self.osc_rate];
        if rates.iter().any(|r| !(*r >= 0.0)) || (rates.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err("rates must be non-negative and sum to 1");
        }
        if self.n_item_clusters == 0 || self.n_item_clusters > self.n_items {
            return err("need 1 <= n_item_clusters <= n_items");
        }
        if !(0.0..1.0).contains(&self.complement_share) {
            return err("complement_share must be in [0, 1)");
        }
        let n_complements = (self.n_items as f64 * self.complement_share).round() as usize;
        let pool = if n_complements == 0 { self.n_items } else { n_complements };
        if self.isc_rate > 0.0 && pool / self.n_item_clusters < self.partners_per_item + 1 {
            return err("too few items per cluster for the requested partners");
        }
        if self.n_items - n_complements < self.n_item_clusters {
            return err("every cluster needs at least one core item");
        }
        if self.confound_rate > 0.0
            && (self.n_confounder_events == 0 || self.promoted_per_event < 2 || self.promoted_per_event > self.n_item_clusters)
        {
            return err("confounding needs at least one event promoting 2..=n_item_clusters items");
        }
        if self.isc_rate > 0.0 && self.partners_per_item == 0 {
            return err("inner-session picks need at least one partner per item");
        }
        if self.min_session_len < 2 || self.max_session_len < self.min_session_len || self.max_session_len > 20 {
            return err("session lengths must satisfy 2 <= min <= max <= 20");
        }
        if !(0.0..=1.0).contains(&self.isc_repeat_prob) || !(self.preference_skew >= 0.0) {
            return err("isc_repeat_prob must be in [0, 1] and preference_skew >= 0");
        }
        Ok(())
    }
}

/// Generated dataset with one cause label per interaction.
///
/// `labels[u][i]` is the cause of `dataset.histories[u][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub sessions: Vec<Session>,
    pub labels: Vec<Vec<CauseLabel>>,
    /// Items promoted together by each confounder event, in time order.
    pub promotions: Vec<Vec<ItemId>>,
    pub item_cluster: Vec<usize>,
    pub is_complement: Vec<bool>,
}

impl SynthDataset {
    pub fn label(&self, session: &Session, position: usize) -> CauseLabel {
        self.labels[session.user as usize][session.offset + position]
    }

    pub fn event_label(&self, event: &PredictionEvent) -> CauseLabel {
        self.labels[event.user as usize][event.history_pos]
    }

    /// Sidecar lines `session_id,position,cause_label`.
    pub fn label_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            for p in 0..s.len() {
                out.push_str(&format!("{},{},{}\n", s.id, p, self.label(s, p)));
            }
        }
        out
    }
}

const BASE_TIME: i64 = 1_600_000_000;
const SESSION_SPACING: i64 = 12 * 3600;
const START_JITTER: i64 = 3600;
const MAX_ITEM_GAP: i64 = 900;

struct World {
    item_cluster: Vec<usize>,
    is_complement: Vec<bool>,
    partners: Vec<Vec<ItemId>>,
    user_pref: Vec<(Vec<ItemId>, WeightedIndex<f64>)>,
    promotions: Vec<Vec<ItemId>>,
}

fn build_world(config: &SynthConfig, rng: &mut ChaCha8Rng) -> World {
    let n_clusters = config.n_item_clusters;
    let mut order: Vec<ItemId> = (0..config.n_items as ItemId).collect();
    order.shuffle(rng);
    let n_complements = (config.n_items as f64 * config.complement_share).round() as usize;
    let mut core = vec![Vec::new(); n_clusters];
    let mut complements = vec![Vec::new(); n_clusters];
    let mut item_cluster = vec![0; config.n_items];
    let mut is_complement = vec![false; config.n_items];
    for (i, &v) in order.iter().enumerate() {
        let c = i % n_clusters;
        item_cluster[v as usize] = c;
        if i < n_complements {
            is_complement[v as usize] = true;
            complements[c].push(v);
        } else {
            core[c].push(v);
        }
    }

    let partners = (0..config.n_items)
        .map(|v| {
            let c = item_cluster[v];
            let pool: Vec<ItemId> = if complements[c].is_empty() { core[c].clone() } else { complements[c].clone() };
            let mut pool: Vec<ItemId> = pool.into_iter().filter(|&p| p as usize != v).collect();
            pool.shuffle(rng);
            pool.truncate(config.partners_per_item);
            pool
        })
        .collect::<Vec<_>>();

    let user_pref = (0..config.n_users)
        .map(|_| {
            let mut items = core[rng.gen_range(0..n_clusters)].clone();
            items.shuffle(rng);
            let weights: Vec<f64> = (0..items.len()).map(|r| 1.0 / ((r + 1) as f64).powf(config.preference_skew)).collect();
            (items, WeightedIndex::new(weights).expect("positive weights"))
        })
        .collect();

    let promotions = (0..config.n_confounder_events)
        .map(|_| {
            let mut clusters: Vec<usize> = (0..n_clusters).collect();
            clusters.shuffle(rng);
            clusters[..config.promoted_per_event].iter().map(|&c| *core[c].choose(rng).expect("core items exist")).collect()
        })
        .collect();

    World { item_cluster, is_complement, partners, user_pref, promotions }
}

/// Produce a synthetic log, its sessions and per-interaction cause labels.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = build_world(config, &mut rng);

    let next_cause = WeightedIndex::new([config.osc_rate, config.isc_rate, config.confound_rate]).expect("rates validated");
    let first_cause = (config.osc_rate + config.confound_rate > 0.0)
        .then(|| WeightedIndex::new([config.osc_rate, config.confound_rate]).expect("positive total"));

    let mut histories: Vec<Vec<Interaction>> = vec![Vec::new(); config.n_users];
    let mut labels: Vec<Vec<CauseLabel>> = vec![Vec::new(); config.n_users];

    for k in 0..config.n_sessions {
        let user = rng.gen_range(0..config.n_users);
        let len = rng.gen_range(config.min_session_len..=config.max_session_len);
        let event = (k * config.n_confounder_events.max(1) / config.n_sessions).min(world.promotions.len().saturating_sub(1));
        let mut t = BASE_TIME + k as i64 * SESSION_SPACING + rng.gen_range(0..START_JITTER);
        let mut items: Vec<ItemId> = Vec::with_capacity(len);

        for pos in 0..len {
            let cause = if pos == 0 {
                match &first_cause {
                    Some(d) => [CauseLabel::Osc, CauseLabel::Confound][d.sample(&mut rng)],
                    None => CauseLabel::Isc,
                }
            } else {
                [CauseLabel::Osc, CauseLabel::Isc, CauseLabel::Confound][next_cause.sample(&mut rng)]
            };
            let item = match cause {
                CauseLabel::Osc => {
                    let (prefs, dist) = &world.user_pref[user];
                    let fresh = prefs.iter().any(|v| !items.contains(v));
                    loop {
                        let v = prefs[dist.sample(&mut rng)];
                        if !fresh || !items.contains(&v) {
                            break v;
                        }
                    }
                }
                CauseLabel::Isc => match items.last() {
                    Some(&prev) => {
                        if rng.gen_bool(config.isc_repeat_prob) {
                            *items.choose(&mut rng).expect("non-empty context")
                        } else {
                            *world.partners[prev as usize].choose(&mut rng).expect("partners exist")
                        }
                    }
                    // only reachable when osc and confound rates are both zero
                    None => rng.gen_range(0..config.n_items) as ItemId,
                },
                CauseLabel::Confound => {
                    let promoted = &world.promotions[event];
                    let fresh: Vec<ItemId> = promoted.iter().copied().filter(|v| !items.contains(v)).collect();
                    *if fresh.is_empty() { promoted.choose(&mut rng) } else { fresh.choose(&mut rng) }.expect("promotions are non-empty")
                }
            };
            items.push(item);
            histories[user].push(Interaction { user: user as u32, item, timestamp: t });
            labels[user].push(cause);
            t += rng.gen_range(30..=MAX_ITEM_GAP);
        }
    }

    let users = Vocab::from_names((0..config.n_users).map(|u| format!("u{u}")));
    let items = Vocab::from_names((0..config.n_items).map(|v| format!("i{v}")));
    let dataset = Dataset { users, items, histories };
    let ingest = IngestConfig { max_session_len: 20, ..IngestConfig::default() };
    let sessions = sessionize(&dataset, &ingest);
    Ok(SynthDataset {
        dataset,
        sessions,
        labels,
        promotions: world.promotions,
        item_cluster: world.item_cluster,
        is_complement: world.is_complement,
    })
}

/// Ranking AUC (Mann-Whitney, ties averaged) of `scores` against binary labels.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64, SynthError> {
    if scores.is_empty() {
        return Err(SynthError::NoEvents);
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SynthError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += idx[i..=j].iter().filter(|&&x| positive[x]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of the gate value at each event's true target against the planted
/// cause (outer-session or confounded = 1, inner-session = 0).
pub fn cause_auc(params: &BrmParams, synth: &SynthDataset, events: &[PredictionEvent]) -> Result<f64, SynthError> {
    let scorer = Scorer::new(params);
    let mut lambdas = Vec::with_capacity(events.len());
    let mut truth = Vec::with_capacity(events.len());
    for e in events {
        let isc = scorer.isc(&e.context).map_err(|_| SynthError::NoEvents)?;
        lambdas.push(scorer.lambda(&isc, &scorer.osc(e.user, &e.recent), e.target));
        truth.push(synth.event_label(e) != CauseLabel::Isc);
    }
    auc(&lambdas, &truth)
}
