//! Interactions, sessions, prediction events and the id spaces they live in.

use std::collections::HashMap;

pub type UserId = u32;
pub type ItemId = u32;
pub type SessionId = u32;

/// One user-item event. Ids are dense indices into the dataset vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

/// A gap-delimited run of one user's interactions.
///
/// `offset` is the index of the first item in the user's chronological
/// history, so item `k` of the session is interaction `offset + k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: SessionId,
    pub user: UserId,
    pub items: Vec<ItemId>,
    pub start_time: i64,
    pub end_time: i64,
    pub offset: usize,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A sorted, deduplicated set of items.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ItemSet(Vec<ItemId>);

impl ItemSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[ItemId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.0.binary_search(&item).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.0.iter().copied()
    }

    /// Size of the intersection, by merging the two sorted lists.
    pub fn intersection_len(&self, other: &ItemSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(&self, other: &ItemSet) -> ItemSet {
        self.iter().chain(other.iter()).collect()
    }
}

impl FromIterator<ItemId> for ItemSet {
    fn from_iter<I: IntoIterator<Item = ItemId>>(iter: I) -> Self {
        let mut items: Vec<ItemId> = iter.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        Self(items)
    }
}

/// Bijection between external string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut vocab = Self::new();
        for name in names {
            vocab.intern(&name);
        }
        vocab
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Batch-loaded interaction log with dense vocabularies.
///
/// `histories[u]` holds user `u`'s interactions in chronological order; ties
/// keep input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub users: Vocab,
    pub items: Vocab,
    pub histories: Vec<Vec<Interaction>>,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    pub fn history(&self, user: UserId) -> &[Interaction] {
        &self.histories[user as usize]
    }
}

/// The unit of training and evaluation: predict `target` from `context`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionEvent {
    pub session_id: SessionId,
    pub user: UserId,
    pub context: Vec<ItemId>,
    pub recent: ItemSet,
    pub target: ItemId,
    /// Index of the target interaction in the user's history.
    pub history_pos: usize,
    pub session_len: usize,
}

/// Deduplicated items of the last `cap` interactions before `before`.
pub fn recent_items(history: &[Interaction], before: usize, cap: usize) -> ItemSet {
    let end = before.min(history.len());
    let start = end.saturating_sub(cap);
    history[start..end].iter().map(|x| x.item).collect()
}

/// One event per session position `k >= 1` (0-based), with the first `k`
/// items as context.
pub fn expand_events(sessions: &[Session], dataset: &Dataset, recent_cap: usize) -> Vec<PredictionEvent> {
    let mut events = Vec::new();
    for session in sessions {
        let history = dataset.history(session.user);
        let recent = recent_items(history, session.offset, recent_cap);
        for k in 1..session.items.len() {
            events.push(PredictionEvent {
                session_id: session.id,
                user: session.user,
                context: session.items[..k].to_vec(),
                recent: recent.clone(),
                target: session.items[k],
                history_pos: session.offset + k,
                session_len: session.items.len(),
            });
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Dataset, Vec<Session>) {
        let mut users = Vocab::new();
        users.intern("u0");
        users.intern("u1");
        let items = Vocab::from_names((0..6).map(|i| format!("i{i}")));
        let h0 = [(0, 0), (1, 10), (2, 100_000), (3, 100_010), (4, 100_020)]
            .iter()
            .map(|&(item, t)| Interaction { user: 0, item, timestamp: t })
            .collect();
        let h1 = [(5, 0), (4, 5)]
            .iter()
            .map(|&(item, t)| Interaction { user: 1, item, timestamp: t })
            .collect();
        let ds = Dataset { users, items, histories: vec![h0, h1] };
        let sessions = vec![
            Session { id: 0, user: 0, items: vec![0, 1], start_time: 0, end_time: 10, offset: 0 },
            Session { id: 1, user: 0, items: vec![2, 3, 4], start_time: 100_000, end_time: 100_020, offset: 2 },
            Session { id: 2, user: 1, items: vec![5, 4], start_time: 0, end_time: 5, offset: 0 },
        ];
        (ds, sessions)
    }

    #[test]
    fn three_item_session_yields_two_events() {
        let (ds, sessions) = toy();
        let events = expand_events(&sessions[1..2], &ds, 10);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].context, vec![2]);
        assert_eq!(events[0].target, 3);
        assert_eq!(events[1].context, vec![2, 3]);
        assert_eq!(events[1].target, 4);
        assert_eq!(events[1].history_pos, 4);
    }

    #[test]
    fn minimal_session_yields_one_event() {
        let (ds, sessions) = toy();
        assert_eq!(expand_events(&sessions[2..3], &ds, 10).len(), 1);
    }

    #[test]
    fn first_session_has_empty_recent_set() {
        let (ds, sessions) = toy();
        let events = expand_events(&sessions[..1], &ds, 10);
        assert!(events[0].recent.is_empty());
        let later = expand_events(&sessions[1..2], &ds, 10);
        assert_eq!(later[0].recent.as_slice(), &[0, 1]);
    }

    #[test]
    fn recent_cap_applies_before_dedup() {
        let h: Vec<Interaction> = [1, 2, 2, 2, 3]
            .iter()
            .enumerate()
            .map(|(t, &item)| Interaction { user: 0, item, timestamp: t as i64 })
            .collect();
        assert_eq!(recent_items(&h, 5, 3).as_slice(), &[2, 3]);
        assert_eq!(recent_items(&h, 5, 10).as_slice(), &[1, 2, 3]);
        assert!(recent_items(&h, 0, 10).is_empty());
    }

    #[test]
    fn item_set_ops() {
        let a: ItemSet = [3, 1, 2, 2].into_iter().collect();
        let b: ItemSet = [4, 3, 2].into_iter().collect();
        assert_eq!(a.as_slice(), &[1, 2, 3]);
        assert_eq!(a.intersection_len(&b), 2);
        assert_eq!(a.union(&b).len(), 4);
        assert!(a.contains(1) && !a.contains(4));
    }

    #[test]
    fn vocab_is_bijective() {
        let mut v = Vocab::new();
        assert_eq!(v.intern("x"), 0);
        assert_eq!(v.intern("y"), 1);
        assert_eq!(v.intern("x"), 0);
        assert_eq!(v.name(1), "y");
        assert_eq!(v.id("y"), Some(1));
        assert_eq!(v.len(), 2);
    }
}
