//! Counterfactual collaborative inference on top of a trained BRM.
//!
//! For a target event, neighbor sessions are retrieved by Jaccard similarity
//! of their recent-item sets. Each neighbor's outer-session representation
//! is combined with the target's inner-session representation ("what would
//! this other user pick in this context"), the resulting distributions are
//! averaged with similarity weights, and finally items the target user has
//! recently seen get an additive boost.

use std::collections::HashMap;

use crate::brm::{BrmError, BrmParams, IscScores, Scorer};
use crate::eval::top_k;
pub use crate::session::ItemSet;
use crate::session::{recent_items, Dataset, ItemId, PredictionEvent, Session, SessionId, UserId};

/// `|A ∩ B| / |A ∪ B|`, and 0 when both sets are empty.
pub fn jaccard(a: &ItemSet, b: &ItemSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoConfig {
    /// Number of neighbor sessions.
    pub pi: usize,
    /// Additive boost for items in the recent set or context.
    pub epsilon: f64,
    /// Skip neighbor sessions that belong to the target's own user.
    pub exclude_same_user: bool,
}

impl Default for CocoConfig {
    fn default() -> Self {
        Self { pi: 10, epsilon: 0.1, exclude_same_user: false }
    }
}

impl CocoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pi == 0 {
            return Err("pi must be >= 1".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err("epsilon must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// A candidate neighbor: a session in the pool, keyed by its recent set.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub session_id: SessionId,
    pub user: UserId,
    pub recent: ItemSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub session_id: SessionId,
    pub user: UserId,
    pub recent: ItemSet,
    pub similarity: f64,
}

/// Neighbors of one target session, by similarity descending then session id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub target: SessionId,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }
}

/// Inverted index from recent items to pool sessions.
#[derive(Debug, Clone, Default)]
pub struct NeighborIndex {
    entries: Vec<PoolEntry>,
    postings: HashMap<ItemId, Vec<usize>>,
}

impl NeighborIndex {
    pub fn new(entries: Vec<PoolEntry>) -> Self {
        let mut postings: HashMap<ItemId, Vec<usize>> = HashMap::new();
        for (i, entry) in entries.iter().enumerate() {
            for item in entry.recent.iter() {
                postings.entry(item).or_default().push(i);
            }
        }
        Self { entries, postings }
    }

    /// Pool of `sessions` with recent sets taken from `dataset`.
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a Session>, dataset: &Dataset, recent_cap: usize) -> Self {
        let entries = sessions
            .into_iter()
            .map(|s| PoolEntry {
                session_id: s.id,
                user: s.user,
                recent: recent_items(dataset.history(s.user), s.offset, recent_cap),
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    fn neighbor_indices(&self, session: SessionId, user: UserId, recent: &ItemSet, pi: usize, exclude_same_user: bool) -> Vec<(usize, f64)> {
        let mut touched: Vec<usize> = recent.iter().filter_map(|v| self.postings.get(&v)).flatten().copied().collect();
        touched.sort_unstable();
        touched.dedup();
        let mut scored: Vec<(usize, f64)> = touched
            .into_iter()
            .filter(|&i| {
                let e = &self.entries[i];
                e.session_id != session && !(exclude_same_user && e.user == user)
            })
            .map(|i| (i, jaccard(recent, &self.entries[i].recent)))
            .filter(|&(_, sim)| sim > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then(self.entries[a.0].session_id.cmp(&self.entries[b.0].session_id))
        });
        scored.truncate(pi);
        scored
    }

    /// Top-`pi` pool sessions by Jaccard similarity of recent sets, excluding
    /// the target session itself and zero-similarity sessions.
    pub fn find_neighbors(&self, event: &PredictionEvent, pi: usize, exclude_same_user: bool) -> NeighborSet {
        let neighbors = self
            .neighbor_indices(event.session_id, event.user, &event.recent, pi, exclude_same_user)
            .into_iter()
            .map(|(i, similarity)| {
                let e = &self.entries[i];
                Neighbor { session_id: e.session_id, user: e.user, recent: e.recent.clone(), similarity }
            })
            .collect();
        NeighborSet { target: event.session_id, neighbors }
    }
}

/// `p(v | ISC(s), OSC(s'))`: the target's context with the neighbor's user
/// and recent set, over the full catalog.
pub fn action(params: &BrmParams, event: &PredictionEvent, neighbor: &Neighbor) -> Result<Vec<f64>, BrmError> {
    let scorer = Scorer::new(params);
    let isc = scorer.isc(&event.context)?;
    Ok(scorer.probs(&isc, &scorer.osc(neighbor.user, &neighbor.recent)))
}

/// Similarity-weighted mean of the action outputs, or the BRM's own
/// prediction when there are no neighbors.
pub fn aggregate(params: &BrmParams, event: &PredictionEvent, neighbors: &NeighborSet) -> Result<Vec<f64>, BrmError> {
    let scorer = Scorer::new(params);
    let isc = scorer.isc(&event.context)?;
    let encoded: Vec<(f64, Vec<f64>)> = neighbors.neighbors.iter().map(|n| (n.similarity, scorer.osc(n.user, &n.recent))).collect();
    let weighted = encoded.iter().map(|(sim, h)| (*sim, h.as_slice()));
    Ok(weighted_mix(&scorer, &isc, weighted).unwrap_or_else(|| scorer.probs(&isc, &scorer.osc(event.user, &event.recent))))
}

fn weighted_mix<'h>(scorer: &Scorer<'_>, isc: &IscScores, weighted_osc: impl IntoIterator<Item = (f64, &'h [f64])>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut norm = 0.0;
    for (sim, h_n) in weighted_osc {
        let p = scorer.probs(isc, h_n);
        let acc = acc.get_or_insert_with(|| vec![0.0; p.len()]);
        for (a, x) in acc.iter_mut().zip(&p) {
            *a += sim * x;
        }
        norm += sim;
    }
    let mut acc = acc?;
    for a in acc.iter_mut() {
        *a /= norm;
    }
    Some(acc)
}

/// `(p(v) + eps * 1[v in R(s) ∪ c]) / (1 + eps * |R(s) ∪ c|)`.
pub fn boost(p_coco: &[f64], event: &PredictionEvent, epsilon: f64) -> Vec<f64> {
    let seen = boosted_items(event);
    let norm = 1.0 + epsilon * seen.iter().filter(|&v| (v as usize) < p_coco.len()).count() as f64;
    let mut out: Vec<f64> = p_coco.to_vec();
    for v in seen.iter() {
        if let Some(p) = out.get_mut(v as usize) {
            *p += epsilon;
        }
    }
    for p in out.iter_mut() {
        *p /= norm;
    }
    out
}

/// `R(s) ∪ c`
pub fn boosted_items(event: &PredictionEvent) -> ItemSet {
    event.recent.iter().chain(event.context.iter().copied()).collect()
}

/// Top-`k` items of the boosted counterfactual distribution.
pub fn recommend(
    params: &BrmParams,
    event: &PredictionEvent,
    index: &NeighborIndex,
    config: &CocoConfig,
    k: usize,
) -> Result<Vec<(ItemId, f64)>, BrmError> {
    let neighbors = index.find_neighbors(event, config.pi, config.exclude_same_user);
    let p = boost(&aggregate(params, event, &neighbors)?, event, config.epsilon);
    Ok(top_k(&p, k))
}

/// Trained BRM plus neighbor index with every pool session's outer-session
/// representation precomputed.
#[derive(Debug, Clone)]
pub struct CocoModel<'a> {
    scorer: Scorer<'a>,
    index: NeighborIndex,
    pool_osc: Vec<Vec<f64>>,
    pub config: CocoConfig,
}

impl<'a> CocoModel<'a> {
    pub fn new(params: &'a BrmParams, index: NeighborIndex, config: CocoConfig) -> Self {
        let scorer = Scorer::new(params);
        let pool_osc = index.entries().iter().map(|e| scorer.osc(e.user, &e.recent)).collect();
        Self { scorer, index, pool_osc, config }
    }

    pub fn scorer(&self) -> &Scorer<'a> {
        &self.scorer
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    pub fn neighbors(&self, event: &PredictionEvent) -> NeighborSet {
        self.index.find_neighbors(event, self.config.pi, self.config.exclude_same_user)
    }

    /// Unboosted counterfactual distribution, with `pi` overriding the config.
    pub fn aggregate_with(&self, event: &PredictionEvent, pi: usize) -> Result<Vec<f64>, BrmError> {
        let isc = self.scorer.isc(&event.context)?;
        let picks = self.index.neighbor_indices(event.session_id, event.user, &event.recent, pi, self.config.exclude_same_user);
        let weighted = picks.iter().map(|&(i, sim)| (sim, self.pool_osc[i].as_slice()));
        Ok(weighted_mix(&self.scorer, &isc, weighted)
            .unwrap_or_else(|| self.scorer.probs(&isc, &self.scorer.osc(event.user, &event.recent))))
    }

    pub fn aggregate(&self, event: &PredictionEvent) -> Result<Vec<f64>, BrmError> {
        self.aggregate_with(event, self.config.pi)
    }

    /// Final boosted distribution over the catalog.
    pub fn predict(&self, event: &PredictionEvent) -> Result<Vec<f64>, BrmError> {
        Ok(boost(&self.aggregate(event)?, event, self.config.epsilon))
    }

    pub fn recommend(&self, event: &PredictionEvent, k: usize) -> Result<Vec<(ItemId, f64)>, BrmError> {
        Ok(top_k(&self.predict(event)?, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use proptest::prelude::*;

    fn set(items: &[ItemId]) -> ItemSet {
        items.iter().copied().collect()
    }

    fn event(session_id: SessionId, user: UserId, recent: &[ItemId], context: &[ItemId]) -> PredictionEvent {
        PredictionEvent {
            session_id,
            user,
            context: context.to_vec(),
            recent: set(recent),
            target: 0,
            history_pos: 0,
            session_len: context.len() + 1,
        }
    }

    fn toy_params() -> BrmParams {
        let mut p = BrmParams::init(3, 5, 2, 17);
        p.gate_w = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25];
        p.gate_b = 0.05;
        p
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[2, 1])), 1.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[])), 0.0);
    }

    fn pool(entries: &[(SessionId, UserId, &[ItemId])]) -> NeighborIndex {
        NeighborIndex::new(entries.iter().map(|&(session_id, user, r)| PoolEntry { session_id, user, recent: set(r) }).collect())
    }

    #[test]
    fn full_overlap_ranks_first() {
        let idx = pool(&[(1, 0, &[9]), (2, 1, &[1, 2, 3]), (3, 2, &[1, 2, 3, 4])]);
        let n = idx.find_neighbors(&event(0, 0, &[1, 2, 3], &[1]), 10, false);
        assert_eq!(n.neighbors[0].session_id, 2);
        assert_eq!(n.neighbors[0].similarity, 1.0);
        assert_eq!(n.len(), 2, "zero-similarity session dropped");
    }

    #[test]
    fn disjoint_pool_is_empty() {
        let idx = pool(&[(1, 0, &[7, 8]), (2, 1, &[])]);
        assert!(idx.find_neighbors(&event(0, 0, &[1, 2], &[1]), 10, false).is_empty());
    }

    #[test]
    fn ties_broken_by_session_id() {
        // sims against {1, 2}: s5 = 1/2, s3 = 1/2, s4 = 1/5
        let idx = pool(&[(5, 0, &[1]), (3, 1, &[2]), (4, 2, &[1, 7, 8, 9])]);
        let target = event(0, 9, &[1, 2], &[1]);
        // brute-force oracle over the pool
        let mut brute: Vec<(f64, SessionId)> = idx.entries().iter().map(|e| (jaccard(&target.recent, &e.recent), e.session_id)).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n = idx.find_neighbors(&target, 2, false);
        let got: Vec<(f64, SessionId)> = n.neighbors.iter().map(|x| (x.similarity, x.session_id)).collect();
        assert_eq!(got, brute[..2].to_vec());
        assert_eq!(got, vec![(0.5, 3), (0.5, 5)]);
    }

    #[test]
    fn excludes_self_and_optionally_same_user() {
        let idx = pool(&[(0, 0, &[1]), (1, 0, &[1]), (2, 1, &[1])]);
        let e = event(0, 0, &[1], &[1]);
        let ids: Vec<SessionId> = idx.find_neighbors(&e, 10, false).neighbors.iter().map(|n| n.session_id).collect();
        assert_eq!(ids, vec![1, 2]);
        let ids: Vec<SessionId> = idx.find_neighbors(&e, 10, true).neighbors.iter().map(|n| n.session_id).collect();
        assert_eq!(ids, vec![2]);
    }

    #[test]
    fn action_with_own_osc_is_brm_prediction() {
        let p = toy_params();
        let e = event(0, 1, &[2, 3], &[0, 4]);
        let clone = Neighbor { session_id: 99, user: 1, recent: e.recent.clone(), similarity: 0.3 };
        let direct = Scorer::new(&p).predict(&e).unwrap();
        assert_eq!(action(&p, &e, &clone).unwrap(), direct);
        let other = Neighbor { session_id: 98, user: 2, recent: set(&[1]), similarity: 0.3 };
        assert!((action(&p, &e, &other).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn action_matches_hand_assembled_forward() {
        let p = toy_params();
        let e = event(0, 0, &[1], &[2, 3]);
        let n = Neighbor { session_id: 1, user: 2, recent: set(&[0, 4]), similarity: 1.0 };
        let h_m = crate::brm::encode_isc(&p, &e.context).unwrap().h;
        let h_n = crate::brm::encode_osc(&p, 2, &n.recent).h;
        let all: Vec<ItemId> = (0..5).collect();
        let oracle = crate::brm::score_items(&p, &h_m, &h_n, &all).unwrap().probs;
        for (a, b) in action(&p, &e, &n).unwrap().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn neighbors(list: &[(UserId, &[ItemId], f64)]) -> NeighborSet {
        NeighborSet {
            target: 0,
            neighbors: list
                .iter()
                .enumerate()
                .map(|(i, &(user, r, similarity))| Neighbor { session_id: i as u32 + 1, user, recent: set(r), similarity })
                .collect(),
        }
    }

    #[test]
    fn aggregate_identities() {
        let p = toy_params();
        let e = event(0, 0, &[1], &[2, 3]);
        let one = neighbors(&[(2, &[0, 4], 0.37)]);
        let single = aggregate(&p, &e, &one).unwrap();
        for (a, b) in single.iter().zip(&action(&p, &e, &one.neighbors[0]).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }

        let two = neighbors(&[(2, &[0, 4], 0.5), (1, &[3], 0.5)]);
        let mean = aggregate(&p, &e, &two).unwrap();
        let a0 = action(&p, &e, &two.neighbors[0]).unwrap();
        let a1 = action(&p, &e, &two.neighbors[1]).unwrap();
        for i in 0..5 {
            assert!((mean[i] - 0.5 * (a0[i] + a1[i])).abs() < 1e-12);
        }

        let empty = aggregate(&p, &e, &NeighborSet::default()).unwrap();
        assert_eq!(empty, Scorer::new(&p).predict(&e).unwrap());
    }

    #[test]
    fn boost_cases() {
        let e = event(0, 0, &[], &[2]);
        let uniform = vec![0.25; 4];
        assert_eq!(boost(&uniform, &e, 0.0), uniform);
        let b = boost(&uniform, &e, 0.1);
        assert!((b[2] - 0.35 / 1.1).abs() < 1e-12);
        assert!((b[2] - 0.31818).abs() < 1e-5);
        assert!((b[0] - 0.25 / 1.1).abs() < 1e-12);
        assert!((b[0] - 0.22727).abs() < 1e-5);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recommend_is_deterministic_permutation() {
        let p = toy_params();
        let idx = pool(&[(1, 1, &[1, 2]), (2, 2, &[2])]);
        let e = event(0, 0, &[2], &[3]);
        let config = CocoConfig::default();
        let recs = recommend(&p, &e, &idx, &config, 5).unwrap();
        let mut ids: Vec<ItemId> = recs.iter().map(|r| r.0).collect();
        assert_eq!(recs, recommend(&p, &e, &idx, &config, 5).unwrap());
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(recommend(&p, &e, &idx, &config, 2).unwrap(), recs[..2].to_vec());
    }

    #[test]
    fn model_matches_free_functions() {
        let p = toy_params();
        let idx = pool(&[(1, 1, &[1, 2]), (2, 2, &[2, 4]), (3, 0, &[0])]);
        let e = event(0, 0, &[2, 4], &[3, 1]);
        let config = CocoConfig { pi: 2, epsilon: 0.2, exclude_same_user: false };
        let model = CocoModel::new(&p, idx.clone(), config.clone());
        let n = idx.find_neighbors(&e, 2, false);
        let expected = boost(&aggregate(&p, &e, &n).unwrap(), &e, 0.2);
        for (a, b) in model.predict(&e).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(model.recommend(&e, 5).unwrap(), recommend(&p, &e, &idx, &config, 5).unwrap());
    }

    fn random_params(seed: u64) -> BrmParams {
        let mut p = BrmParams::init(4, 6, 3, seed);
        p.gate_w = Mat::from_vec(1, 9, (0..9).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect()).unwrap().as_slice().to_vec();
        p
    }

    proptest! {
        #[test]
        fn aggregate_convex_and_scale_free(
            seed in 0u64..200,
            sims in proptest::collection::vec(0.01f64..1.0, 1..4),
            scale in 0.1f64..10.0,
        ) {
            let p = random_params(seed);
            let e = event(0, 0, &[1, 2], &[(seed % 6) as u32, 3]);
            let list: Vec<(UserId, Vec<ItemId>, f64)> = sims.iter().enumerate().map(|(i, &s)| ((i % 4) as u32, vec![i as u32, 5], s)).collect();
            let build = |k: f64| NeighborSet {
                target: 0,
                neighbors: list.iter().enumerate().map(|(i, (u, r, s))| Neighbor { session_id: i as u32 + 1, user: *u, recent: set(r), similarity: s * k }).collect(),
            };
            let base = aggregate(&p, &e, &build(1.0)).unwrap();
            let scaled = aggregate(&p, &e, &build(scale)).unwrap();
            prop_assert!((base.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let outputs: Vec<Vec<f64>> = build(1.0).neighbors.iter().map(|n| action(&p, &e, n).unwrap()).collect();
            for v in 0..6 {
                let lo = outputs.iter().map(|o| o[v]).fold(f64::INFINITY, f64::min);
                let hi = outputs.iter().map(|o| o[v]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(base[v] >= lo - 1e-12 && base[v] <= hi + 1e-12);
            }
        }

        #[test]
        fn boost_preserves_order_within_groups(
            raw in proptest::collection::vec(0.001f64..1.0, 8),
            eps in 0.0f64..2.0,
            ctx in proptest::collection::vec(0u32..8, 1..4),
            rec in proptest::collection::vec(0u32..8, 0..4),
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut e = event(0, 0, &rec, &ctx);
            e.context = ctx.clone();
            let b = boost(&p, &e, eps);
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let seen = boosted_items(&e);
            for i in 0..8u32 {
                for j in 0..8u32 {
                    if seen.contains(i) == seen.contains(j) && p[i as usize] < p[j as usize] {
                        prop_assert!(b[i as usize] < b[j as usize]);
                    }
                }
            }
        }
    }
}
