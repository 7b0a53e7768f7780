//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! The plain functions are what the page calls through the `#[wasm_bindgen]`
//! wrappers; they stay usable from native tests.

use cocorec::brm::{BrmConfig, Scorer};
use cocorec::counterfactual::{self, boost, NeighborIndex};
use cocorec::eval::FoldEvents;
use cocorec::ingest::make_folds;
use cocorec::numerics::{attention, Mat};
use cocorec::session::recent_items;
use cocorec::synthgen::{generate, SynthConfig, SynthDataset};
use cocorec::{BrmParams, CocoConfig, ItemId, ItemSet, PredictionEvent};
use wasm_bindgen::prelude::*;

/// Attention weights followed by the attended output, for a query of length
/// d and `keys` holding n rows of d values (also used as values).
pub fn attention_weights(query: &[f64], keys: &[f64]) -> Result<Vec<f64>, String> {
    let d = query.len();
    if d == 0 || keys.len() % d != 0 {
        return Err(format!("{} key values do not split into rows of {d}", keys.len()));
    }
    let k = Mat::from_vec(keys.len() / d, d, keys.to_vec()).map_err(|e| e.to_string())?;
    let trace = attention(query, k.clone(), k).map_err(|e| e.to_string())?;
    Ok(trace.alpha.into_iter().chain(trace.output).collect())
}

/// Boosted distribution for `probs` when `seen` holds the recent and context items.
pub fn boost_preview(probs: &[f64], seen: &[u32], epsilon: f64) -> Result<Vec<f64>, String> {
    if !(epsilon >= 0.0) {
        return Err("epsilon must be >= 0".into());
    }
    if let Some(&v) = seen.iter().find(|&&v| v as usize >= probs.len()) {
        return Err(format!("item {v} is outside the {} candidates", probs.len()));
    }
    let event = PredictionEvent {
        session_id: 0,
        user: 0,
        context: Vec::new(),
        recent: seen.iter().copied().collect(),
        target: 0,
        history_pos: 0,
        session_len: 1,
    };
    Ok(boost(probs, &event, epsilon))
}

pub struct Recommendation {
    pub item: ItemId,
    pub score: f64,
    /// Gate weight on the outer-session side for this item.
    pub lambda: f64,
}

/// A small synthetic world with a base model trained on one fold.
#[wasm_bindgen]
pub struct Demo {
    synth: SynthDataset,
    params: BrmParams,
    index: NeighborIndex,
    recent_cap: usize,
    summary: String,
}

impl Demo {
    pub fn train(seed: u64, beta: f64) -> Result<Demo, String> {
        let config = SynthConfig {
            n_users: 30,
            n_items: 60,
            n_sessions: 400,
            n_item_clusters: 4,
            n_confounder_events: 8,
            seed,
            ..SynthConfig::default()
        };
        let synth = generate(&config).map_err(|e| e.to_string())?;
        let folds = make_folds(&synth.sessions, 5, seed).map_err(|e| e.to_string())?;
        let brm = BrmConfig { dim: 16, beta, max_epochs: 15, seed, ..BrmConfig::default() };
        let events = FoldEvents::new(&synth.dataset, &synth.sessions, &folds[0], brm.recent_cap);
        let trained = events.train_brm(&synth.dataset, &brm).map_err(|e| e.to_string())?;
        let index = NeighborIndex::from_sessions(&synth.sessions, &synth.dataset, brm.recent_cap);
        let summary = format!(
            "{} users, {} items, {} sessions; best epoch {} of {}, validation R@20 {:.3}",
            synth.dataset.n_users(),
            synth.dataset.n_items(),
            synth.sessions.len(),
            trained.report.best_epoch,
            trained.report.epochs.len(),
            trained.report.best_val_recall.unwrap_or(f64::NAN),
        );
        Ok(Demo { synth, params: trained.params, index, recent_cap: brm.recent_cap, summary })
    }

    /// Item ids from comma-separated names.
    pub fn parse_context(&self, context: &str) -> Result<Vec<ItemId>, String> {
        let items = &self.synth.dataset.items;
        let ids: Vec<ItemId> = context
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|n| items.id(n).ok_or_else(|| format!("unknown item '{n}'")))
            .collect::<Result<_, _>>()?;
        if ids.is_empty() {
            return Err("context needs at least one item".into());
        }
        Ok(ids)
    }

    pub fn top(&self, user: u32, context: Vec<ItemId>, k: usize, pi: usize, epsilon: f64) -> Result<Vec<Recommendation>, String> {
        if user as usize >= self.synth.dataset.n_users() {
            return Err(format!("no user {user}"));
        }
        let history = self.synth.dataset.history(user);
        let event = PredictionEvent {
            session_id: u32::MAX,
            user,
            recent: recent_items(history, history.len(), self.recent_cap),
            target: context[0],
            history_pos: history.len() + context.len(),
            session_len: context.len() + 1,
            context,
        };
        let config = CocoConfig { pi, epsilon, ..CocoConfig::default() };
        let top = counterfactual::recommend(&self.params, &event, &self.index, &config, k).map_err(|e| e.to_string())?;
        let scorer = Scorer::new(&self.params);
        let isc = scorer.isc(&event.context).map_err(|e| e.to_string())?;
        let h_n = scorer.osc(user, &event.recent);
        Ok(top
            .into_iter()
            .map(|(item, score)| Recommendation { item, score, lambda: scorer.lambda(&isc, &h_n, item) })
            .collect())
    }

    pub fn recent(&self, user: u32) -> ItemSet {
        let history = self.synth.dataset.history(user);
        recent_items(history, history.len(), self.recent_cap)
    }
}

fn js_err(msg: String) -> JsError {
    JsError::new(&msg)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, beta: f64) -> Result<Demo, JsError> {
        Demo::train(seed as u64, beta).map_err(js_err)
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }

    pub fn n_users(&self) -> u32 {
        self.synth.dataset.n_users() as u32
    }

    pub fn user_name(&self, user: u32) -> String {
        self.synth.dataset.users.name(user).to_owned()
    }

    /// Item names in the user's recent set, comma-separated.
    pub fn recent_names(&self, user: u32) -> String {
        let items = &self.synth.dataset.items;
        self.recent(user).iter().map(|v| items.name(v)).collect::<Vec<_>>().join(",")
    }

    /// Item names with their cluster and role, one per line.
    pub fn catalog(&self) -> String {
        let items = &self.synth.dataset.items;
        (0..items.len() as u32)
            .map(|v| {
                let role = if self.synth.is_complement[v as usize] { "complement" } else { "core" };
                format!("{} cluster {} {role}", items.name(v), self.synth.item_cluster[v as usize])
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// `rank,item,score,lambda` lines.
    pub fn recommend(&self, user: u32, context: &str, k: u32, pi: u32, epsilon: f64) -> Result<String, JsError> {
        let ctx = self.parse_context(context).map_err(js_err)?;
        let top = self.top(user, ctx, k as usize, pi as usize, epsilon).map_err(js_err)?;
        let items = &self.synth.dataset.items;
        Ok(top
            .iter()
            .enumerate()
            .map(|(r, rec)| format!("{},{},{:.5},{:.3}", r + 1, items.name(rec.item), rec.score, rec.lambda))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_weights_js(query: &[f64], keys: &[f64]) -> Result<Vec<f64>, JsError> {
    attention_weights(query, keys).map_err(js_err)
}

#[wasm_bindgen(js_name = boostPreview)]
pub fn boost_preview_js(probs: &[f64], seen: &[u32], epsilon: f64) -> Result<Vec<f64>, JsError> {
    boost_preview(probs, seen, epsilon).map_err(js_err)
}
