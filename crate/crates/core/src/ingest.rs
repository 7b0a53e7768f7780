//! Raw log parsing, inactive-entity filtering, gap sessionization and
//! cross-validation folds.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::session::{Dataset, Interaction, Session, SessionId, Vocab};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid interaction rows ({skipped} skipped)")]
    NoRows { skipped: usize },
    #[error("filtering removed every interaction")]
    EmptyAfterFilter,
    #[error("no sessions to split into folds")]
    NoSessions,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub gap_hours: f64,
    pub min_interactions: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            gap_hours: 6.0,
            min_interactions: 10,
            min_session_len: 2,
            max_session_len: 20,
            n_folds: 5,
            seed: 42,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.gap_hours > 0.0) {
            return Err(IngestError::Config(format!("gap_hours must be > 0, got {}", self.gap_hours)));
        }
        if self.min_session_len < 2 {
            return Err(IngestError::Config("min_session_len must be >= 2".into()));
        }
        if self.max_session_len < self.min_session_len {
            return Err(IngestError::Config("max_session_len below min_session_len".into()));
        }
        if self.n_folds < 2 {
            return Err(IngestError::Config("n_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn gap_seconds(&self) -> i64 {
        (self.gap_hours * 3600.0).round() as i64
    }
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub dataset: Dataset,
    pub skipped: usize,
}

pub fn parse_log(path: impl AsRef<Path>) -> Result<ParseOutcome, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    parse_reader(BufReader::new(file)).map_err(|e| match e {
        IngestError::Io { source, .. } => IngestError::Io { path: path.display().to_string(), source },
        other => other,
    })
}

/// Parse `user, item, unix_seconds` rows. The separator (tab or comma) is
/// taken from the first non-empty line; a first line whose timestamp does
/// not parse is treated as a header.
pub fn parse_reader<R: BufRead>(reader: R) -> Result<ParseOutcome, IngestError> {
    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut histories: Vec<Vec<Interaction>> = Vec::new();
    let mut separator = None;
    let mut skipped = 0;
    let mut first = true;

    for line in reader.lines() {
        let line = line.map_err(|source| IngestError::Io { path: "<input>".into(), source })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let sep = *separator.get_or_insert(if line.contains('\t') { '\t' } else { ',' });
        let is_first = std::mem::replace(&mut first, false);
        let Some((user, item, ts)) = parse_row(line, sep) else {
            if !is_first {
                skipped += 1;
            }
            continue;
        };
        let u = users.intern(user);
        let i = items.intern(item);
        if u as usize == histories.len() {
            histories.push(Vec::new());
        }
        histories[u as usize].push(Interaction { user: u, item: i, timestamp: ts });
    }

    if histories.is_empty() {
        return Err(IngestError::NoRows { skipped });
    }
    for h in &mut histories {
        h.sort_by_key(|x| x.timestamp);
    }
    Ok(ParseOutcome { dataset: Dataset { users, items, histories }, skipped })
}

fn parse_row(line: &str, sep: char) -> Option<(&str, &str, i64)> {
    let mut fields = line.split(sep).map(str::trim);
    let user = fields.next().filter(|s| !s.is_empty())?;
    let item = fields.next().filter(|s| !s.is_empty())?;
    let ts = fields.next()?;
    let ts = ts.parse::<i64>().ok().or_else(|| {
        ts.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| x.floor() as i64)
    })?;
    Some((user, item, ts))
}

/// Drop users and items with fewer than `min_interactions` interactions,
/// repeating until no entity falls below the threshold, then re-densify ids.
pub fn filter_inactive(dataset: &Dataset, min_interactions: usize) -> Result<Dataset, IngestError> {
    let mut rows: Vec<Interaction> = dataset.histories.iter().flatten().copied().collect();
    loop {
        let mut user_count = vec![0usize; dataset.n_users()];
        let mut item_count = vec![0usize; dataset.n_items()];
        for r in &rows {
            user_count[r.user as usize] += 1;
            item_count[r.item as usize] += 1;
        }
        let before = rows.len();
        rows.retain(|r| user_count[r.user as usize] >= min_interactions && item_count[r.item as usize] >= min_interactions);
        if rows.len() == before {
            break;
        }
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyAfterFilter);
    }

    let kept_users: BTreeSet<u32> = rows.iter().map(|r| r.user).collect();
    let kept_items: BTreeSet<u32> = rows.iter().map(|r| r.item).collect();
    let user_map: HashMap<u32, u32> = kept_users.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();
    let item_map: HashMap<u32, u32> = kept_items.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();
    let users = Vocab::from_names(kept_users.iter().map(|&u| dataset.users.name(u).to_owned()));
    let items = Vocab::from_names(kept_items.iter().map(|&i| dataset.items.name(i).to_owned()));

    let mut histories = vec![Vec::new(); users.len()];
    // rows are still grouped per user in chronological order
    for r in rows {
        let user = user_map[&r.user];
        histories[user as usize].push(Interaction { user, item: item_map[&r.item], timestamp: r.timestamp });
    }
    Ok(Dataset { users, items, histories })
}

/// Cut each user's history wherever consecutive interactions are at least
/// `gap_hours` apart, then keep sessions whose length is within bounds.
pub fn sessionize(dataset: &Dataset, config: &IngestConfig) -> Vec<Session> {
    let gap = config.gap_seconds();
    let mut sessions = Vec::new();
    for (user, history) in dataset.histories.iter().enumerate() {
        let mut start = 0;
        for i in 1..=history.len() {
            let boundary = i == history.len() || history[i].timestamp - history[i - 1].timestamp >= gap;
            if !boundary {
                continue;
            }
            let len = i - start;
            if (config.min_session_len..=config.max_session_len).contains(&len) {
                sessions.push(Session {
                    id: sessions.len() as SessionId,
                    user: user as u32,
                    items: history[start..i].iter().map(|x| x.item).collect(),
                    start_time: history[start].timestamp,
                    end_time: history[i - 1].timestamp,
                    offset: start,
                });
            }
            start = i;
        }
    }
    sessions
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub index: usize,
    pub train: Vec<SessionId>,
    pub test: Vec<SessionId>,
    pub validation: Vec<SessionId>,
    /// Sessions moved from test to train to cover every user and item.
    pub reassigned: usize,
}

/// Random partition of session ids into `n_folds` parts whose sizes differ by
/// at most one.
pub fn partition(sessions: &[Session], n_folds: usize, seed: u64) -> Vec<Vec<SessionId>> {
    let mut ids: Vec<SessionId> = sessions.iter().map(|s| s.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    (0..n_folds)
        .map(|f| {
            let mut part = ids[f * n / n_folds..(f + 1) * n / n_folds].to_vec();
            part.sort_unstable();
            part
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Entity {
    User(u32),
    Item(u32),
}

fn entities(s: &Session) -> impl Iterator<Item = Entity> + '_ {
    std::iter::once(Entity::User(s.user)).chain(s.items.iter().map(|&i| Entity::Item(i)))
}

/// Build `n_folds` train/test/validation splits. Test sessions holding a user
/// or item unseen in train are moved to train, rarest entity first.
pub fn make_folds(sessions: &[Session], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>, IngestError> {
    if sessions.is_empty() {
        return Err(IngestError::NoSessions);
    }
    if n_folds < 2 {
        return Err(IngestError::Config("n_folds must be >= 2".into()));
    }
    let by_id: HashMap<SessionId, &Session> = sessions.iter().map(|s| (s.id, s)).collect();
    let mut global: HashMap<Entity, usize> = HashMap::new();
    for s in sessions {
        for e in entities(s) {
            *global.entry(e).or_default() += 1;
        }
    }

    let parts = partition(sessions, n_folds, seed);
    let mut folds = Vec::with_capacity(n_folds);
    for (f, test_part) in parts.iter().enumerate() {
        let mut in_train: HashMap<Entity, usize> = HashMap::new();
        let mut train: BTreeSet<SessionId> = BTreeSet::new();
        for (g, part) in parts.iter().enumerate() {
            if g == f {
                continue;
            }
            for &id in part {
                train.insert(id);
                for e in entities(by_id[&id]) {
                    *in_train.entry(e).or_default() += 1;
                }
            }
        }
        let mut test: BTreeSet<SessionId> = test_part.iter().copied().collect();

        let mut missing: Vec<Entity> = test
            .iter()
            .flat_map(|id| entities(by_id[id]))
            .filter(|e| !in_train.contains_key(e))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        missing.sort_by_key(|e| (global[e], *e));

        let mut reassigned = 0;
        for e in missing {
            if in_train.contains_key(&e) {
                continue;
            }
            let id = *test
                .iter()
                .find(|id| entities(by_id[id]).any(|x| x == e))
                .expect("missing entity comes from a test session");
            test.remove(&id);
            train.insert(id);
            for x in entities(by_id[&id]) {
                *in_train.entry(x).or_default() += 1;
            }
            reassigned += 1;
        }
        if reassigned > 0 {
            log::info!("fold {f}: moved {reassigned} test sessions to train for coverage");
        }

        let test: Vec<SessionId> = test.into_iter().collect();
        let mut shuffled = test.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(f as u64 + 1));
        shuffled.shuffle(&mut rng);
        let mut validation = shuffled[..test.len() / 2].to_vec();
        validation.sort_unstable();

        folds.push(FoldSplit { index: f, train: train.into_iter().collect(), test, validation, reassigned });
    }
    Ok(folds)
}

/// Dataset profile as a statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub sessions: usize,
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub interactions_per_user: f64,
    pub interactions_per_session: f64,
    pub sessions_per_user: f64,
}

impl DatasetStats {
    pub fn from_sessions(sessions: &[Session]) -> Self {
        let interactions: usize = sessions.iter().map(Session::len).sum();
        let users: BTreeSet<u32> = sessions.iter().map(|s| s.user).collect();
        let items: BTreeSet<u32> = sessions.iter().flat_map(|s| s.items.iter().copied()).collect();
        let per = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            sessions: sessions.len(),
            interactions,
            users: users.len(),
            items: items.len(),
            interactions_per_user: per(interactions, users.len()),
            interactions_per_session: per(interactions, sessions.len()),
            sessions_per_user: per(sessions.len(), users.len()),
        }
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "#sessions                  {:>10}", self.sessions)?;
        writeln!(f, "#interactions              {:>10}", self.interactions)?;
        writeln!(f, "#users                     {:>10}", self.users)?;
        writeln!(f, "#items                     {:>10}", self.items)?;
        writeln!(f, "#interactions per user     {:>10.2}", self.interactions_per_user)?;
        writeln!(f, "#interactions per session  {:>10.2}", self.interactions_per_session)?;
        write!(f, "#sessions per user         {:>10.2}", self.sessions_per_user)
    }
}

/// Everything `prepare` produces from a raw log.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub dataset: Dataset,
    pub sessions: Vec<Session>,
    pub folds: Vec<FoldSplit>,
    pub skipped_rows: usize,
}

/// parse -> filter_inactive -> sessionize (with length filter) -> make_folds
pub fn prepare(parsed: ParseOutcome, config: &IngestConfig) -> Result<Prepared, IngestError> {
    config.validate()?;
    let dataset = filter_inactive(&parsed.dataset, config.min_interactions)?;
    let sessions = sessionize(&dataset, config);
    let folds = make_folds(&sessions, config.n_folds, config.seed)?;
    Ok(Prepared { dataset, sessions, folds, skipped_rows: parsed.skipped })
}
