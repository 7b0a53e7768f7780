//! Resolved run configuration: defaults, then a key=value file, then flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cocorec::brm::GateMode;
use cocorec::eval::CvConfig;
use cocorec::ingest::IngestConfig;
use cocorec::numerics::Optimizer;
use cocorec::synthgen::SynthConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ingest: IngestConfig,
    pub cv: CvConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut config = Self { ingest: IngestConfig::default(), cv: CvConfig::default(), synth: SynthConfig::default(), seed: 42 };
        config.set_seed(42);
        config
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| anyhow!("invalid value '{value}' for '{key}'"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ingest.seed = seed;
        self.cv.brm.seed = seed;
        self.synth.seed = seed;
    }

    /// Apply one setting. Keys use underscores; dashes are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let brm = &mut self.cv.brm;
        let synth = &mut self.synth;
        match k {
            "seed" => self.set_seed(parse(k, value)?),
            "gap_hours" => self.ingest.gap_hours = parse(k, value)?,
            "min_interactions" => self.ingest.min_interactions = parse(k, value)?,
            "min_session_len" => self.ingest.min_session_len = parse(k, value)?,
            "max_session_len" => self.ingest.max_session_len = parse(k, value)?,
            "n_folds" => self.ingest.n_folds = parse(k, value)?,
            "dim" => brm.dim = parse(k, value)?,
            "lr" => brm.lr = parse(k, value)?,
            "beta" => brm.beta = parse(k, value)?,
            "max_epochs" => brm.max_epochs = parse(k, value)?,
            "batch_size" => brm.batch_size = parse(k, value)?,
            "recent_cap" => brm.recent_cap = parse(k, value)?,
            "patience" => brm.patience = parse(k, value)?,
            "optimizer" => {
                brm.optimizer = match value.trim() {
                    "adam" => Optimizer::default(),
                    "sgd" => Optimizer::Sgd,
                    other => bail!("unknown optimizer '{other}' (expected adam or sgd)"),
                }
            }
            "gate" => {
                brm.gate = match value.trim() {
                    "learned" => GateMode::Learned,
                    "isc_only" => GateMode::IscOnly,
                    "osc_only" => GateMode::OscOnly,
                    other => bail!("unknown gate '{other}' (expected learned, isc_only or osc_only)"),
                }
            }
            "pi" => self.cv.coco.pi = parse(k, value)?,
            "epsilon" => self.cv.coco.epsilon = parse(k, value)?,
            "exclude_same_user" => self.cv.coco.exclude_same_user = parse(k, value)?,
            "epsilon_grid" => {
                self.cv.epsilon_grid = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse_list(k, v)?),
                }
            }
            "model" => self.cv.model = value.trim().parse().map_err(|e: String| anyhow!(e))?,
            "k_neighbors" => self.cv.k_neighbors = parse(k, value)?,
            "threads" => self.cv.threads = parse(k, value)?,
            "ks" => self.cv.ks = parse_list(k, value)?,
            "n_users" => synth.n_users = parse(k, value)?,
            "n_items" => synth.n_items = parse(k, value)?,
            "n_sessions" => synth.n_sessions = parse(k, value)?,
            "confound_rate" => synth.confound_rate = parse(k, value)?,
            "isc_rate" => synth.isc_rate = parse(k, value)?,
            "osc_rate" => synth.osc_rate = parse(k, value)?,
            "n_item_clusters" => synth.n_item_clusters = parse(k, value)?,
            "complement_share" => synth.complement_share = parse(k, value)?,
            "n_confounder_events" => synth.n_confounder_events = parse(k, value)?,
            "promoted_per_event" => synth.promoted_per_event = parse(k, value)?,
            "partners_per_item" => synth.partners_per_item = parse(k, value)?,
            "isc_repeat_prob" => synth.isc_repeat_prob = parse(k, value)?,
            "preference_skew" => synth.preference_skew = parse(k, value)?,
            "synth_min_session_len" => synth.min_session_len = parse(k, value)?,
            "synth_max_session_len" => synth.max_session_len = parse(k, value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file. `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))?;
            self.set(key, value).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.ingest.validate()?;
        self.cv.brm.validate()?;
        self.cv.coco.validate().map_err(|e| anyhow!(e))?;
        if self.cv.threads == 0 || self.cv.k_neighbors == 0 || self.cv.ks.is_empty() {
            bail!("threads, k_neighbors and ks must be positive");
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let (b, c, s) = (&self.cv.brm, &self.cv.coco, &self.synth);
        let optimizer = match b.optimizer {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd => "sgd",
        };
        let gate = match b.gate {
            GateMode::Learned => "learned",
            GateMode::IscOnly => "isc_only",
            GateMode::OscOnly => "osc_only",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("gap_hours", self.ingest.gap_hours.to_string()),
            ("min_interactions", self.ingest.min_interactions.to_string()),
            ("min_session_len", self.ingest.min_session_len.to_string()),
            ("max_session_len", self.ingest.max_session_len.to_string()),
            ("n_folds", self.ingest.n_folds.to_string()),
            ("dim", b.dim.to_string()),
            ("lr", b.lr.to_string()),
            ("beta", b.beta.to_string()),
            ("max_epochs", b.max_epochs.to_string()),
            ("batch_size", b.batch_size.to_string()),
            ("recent_cap", b.recent_cap.to_string()),
            ("patience", b.patience.to_string()),
            ("optimizer", optimizer.into()),
            ("gate", gate.into()),
            ("pi", c.pi.to_string()),
            ("epsilon", c.epsilon.to_string()),
            ("exclude_same_user", c.exclude_same_user.to_string()),
            ("epsilon_grid", self.cv.epsilon_grid.as_deref().map(join).unwrap_or_else(|| "none".into())),
            ("model", self.cv.model.name().into()),
            ("k_neighbors", self.cv.k_neighbors.to_string()),
            ("threads", self.cv.threads.to_string()),
            ("ks", join(&self.cv.ks)),
            ("n_users", s.n_users.to_string()),
            ("n_items", s.n_items.to_string()),
            ("n_sessions", s.n_sessions.to_string()),
            ("confound_rate", s.confound_rate.to_string()),
            ("isc_rate", s.isc_rate.to_string()),
            ("osc_rate", s.osc_rate.to_string()),
            ("n_item_clusters", s.n_item_clusters.to_string()),
            ("complement_share", s.complement_share.to_string()),
            ("n_confounder_events", s.n_confounder_events.to_string()),
            ("promoted_per_event", s.promoted_per_event.to_string()),
            ("partners_per_item", s.partners_per_item.to_string()),
            ("isc_repeat_prob", s.isc_repeat_prob.to_string()),
            ("preference_skew", s.preference_skew.to_string()),
            ("synth_min_session_len", s.min_session_len.to_string()),
            ("synth_max_session_len", s.max_session_len.to_string()),
        ]
    }
}

/// The resolved configuration as `# key = value` lines, which is also a
/// valid config file once the `# ` prefixes are stripped.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "# {k} = {v}")?;
        }
        Ok(())
    }
}
