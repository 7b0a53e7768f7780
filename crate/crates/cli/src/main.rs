mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use cocorec::counterfactual::NeighborIndex;
use cocorec::eval::{evaluate_trained, run_cv, CvReport, FoldEvents, ModelKind};
use cocorec::ingest::{make_folds, parse_log, prepare, DatasetStats, Prepared};
use cocorec::session::recent_items;
use cocorec::snapshot::{read_checkpoint, read_data, write_checkpoint, write_data, Checkpoint};
use cocorec::synthgen::generate;
use cocorec::{gradcheck, CocoModel, PredictionEvent};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cocorec", version, about = "Counterfactual session-based recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value config file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    gap_hours: Option<f64>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    pi: Option<usize>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    k_neighbors: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// coco, brm or sknn
    #[arg(long, global = true)]
    model: Option<String>,
    /// Any other config key, e.g. `--set max_epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, sessionize and split a raw log into a data snapshot.
    Prepare {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the base model on one fold and write a checkpoint plus report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Defaults to `<output>.report.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cross-validate a model, or evaluate a checkpoint on one fold.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Metric CSV destination.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// With --checkpoint: the fold it was trained on. Otherwise: restrict
        /// cross-validation to these folds.
        #[arg(long, value_delimiter = ',')]
        fold: Vec<usize>,
    },
    /// Print the top-k next items for a user and a session context.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: String,
        /// Comma-separated item names, oldest first.
        #[arg(long)]
        context: String,
        #[arg(short, long, default_value_t = 20)]
        k: usize,
    },
    /// Generate a synthetic snapshot and its cause-label sidecar.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        /// Defaults to `<output>.labels.csv`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradient on random toys.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

impl Cli {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("gap_hours", self.gap_hours.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("pi", self.pi.map(|v| v.to_string())),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("k_neighbors", self.k_neighbors.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("model", self.model.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_data(path: &Path) -> Result<Prepared> {
    let file = File::open(path).with_context(|| format!("opening snapshot {}", path.display()))?;
    read_data(BufReader::new(file)).with_context(|| format!("reading snapshot {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    read_checkpoint(&mut BufReader::new(file)).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn cmd_prepare(config: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let parsed = parse_log(input)?;
    let prepared = prepare(parsed, &config.ingest)?;
    let mut out = create(output)?;
    write_data(&mut out, &prepared)?;
    out.flush()?;
    println!("{}", DatasetStats::from_sessions(&prepared.sessions));
    println!("skipped rows               {:>10}", prepared.skipped_rows);
    Ok(())
}

fn fold_split<'a>(prepared: &'a Prepared, fold: usize) -> Result<&'a cocorec::ingest::FoldSplit> {
    prepared
        .folds
        .iter()
        .find(|f| f.index == fold)
        .ok_or_else(|| anyhow!("snapshot has no fold {fold} ({} folds)", prepared.folds.len()))
}

fn cmd_train(config: &RunConfig, data: &Path, fold: usize, output: &Path, report: Option<&Path>) -> Result<()> {
    let prepared = load_data(data)?;
    let split = fold_split(&prepared, fold)?;
    let events = FoldEvents::new(&prepared.dataset, &prepared.sessions, split, config.cv.brm.recent_cap);
    log::info!("fold {fold}: {} train events, {} validation events", events.train.len(), events.validation.len());
    let trained = events.train_brm(&prepared.dataset, &config.cv.brm)?;

    let mut out = create(output)?;
    write_checkpoint(&mut out, &trained.params, &prepared.dataset.users, &prepared.dataset.items)?;
    out.flush()?;

    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(output, ".report.txt"));
    let mut r = create(&report_path)?;
    write!(r, "{config}# fold = {fold}\n{}\n", trained.report)?;
    r.flush()?;
    println!("best epoch {} of {}, validation R@20 {:?}", trained.report.best_epoch, trained.report.epochs.len(), trained.report.best_val_recall);
    println!("checkpoint {}, report {}", output.display(), report_path.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig, data: &Path, output: Option<&Path>, checkpoint: Option<&Path>, folds: &[usize]) -> Result<()> {
    let prepared = load_data(data)?;
    let report = match checkpoint {
        Some(path) => {
            if config.cv.model == ModelKind::Sknn {
                bail!("sknn has no checkpoint; drop --checkpoint");
            }
            let &[fold] = folds else { bail!("--checkpoint needs exactly one --fold") };
            let ck = load_checkpoint(path)?;
            if ck.items != prepared.dataset.items || ck.users != prepared.dataset.users {
                bail!("checkpoint vocabularies do not match the snapshot");
            }
            let events = FoldEvents::new(&prepared.dataset, &prepared.sessions, fold_split(&prepared, fold)?, config.cv.brm.recent_cap);
            let result = evaluate_trained(&prepared.dataset, &events, &ck.params, &config.cv)?;
            CvReport { model: config.cv.model, mean: Some(result.report.clone()), folds: vec![result], failures: Vec::new() }
        }
        None => {
            let mut cv = config.cv.clone();
            if !folds.is_empty() {
                cv.folds = Some(folds.to_vec());
            }
            run_cv(&prepared.dataset, &prepared.sessions, &prepared.folds, &cv)
        }
    };
    print!("{config}{}", report.to_table());
    if let Some(path) = output {
        let mut out = create(path)?;
        out.write_all(report.to_csv().as_bytes())?;
        out.flush()?;
    }
    if report.folds.is_empty() {
        bail!("every fold failed");
    }
    Ok(())
}

fn cmd_recommend(config: &RunConfig, checkpoint: &Path, data: &Path, user: &str, context: &str, k: usize) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let prepared = load_data(data)?;
    if ck.items != prepared.dataset.items || ck.users != prepared.dataset.users {
        bail!("checkpoint vocabularies do not match the snapshot");
    }
    let n_items = ck.items.len();
    if k == 0 || k > n_items {
        bail!("k must be in 1..={n_items}");
    }
    let user_id = ck.users.id(user).ok_or_else(|| anyhow!("unknown user '{user}'"))?;
    let context: Vec<u32> = context
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| ck.items.id(name).ok_or_else(|| anyhow!("unknown item '{name}'")))
        .collect::<Result<_>>()?;
    if context.is_empty() {
        bail!("context must name at least one item");
    }
    let history = prepared.dataset.history(user_id);
    let recent_cap = config.cv.brm.recent_cap;
    let event = PredictionEvent {
        // not a pool session, so no neighbor is excluded as "self"
        session_id: u32::MAX,
        user: user_id,
        recent: recent_items(history, history.len(), recent_cap),
        target: context[0],
        history_pos: history.len() + context.len(),
        session_len: context.len() + 1,
        context,
    };
    let index = NeighborIndex::from_sessions(&prepared.sessions, &prepared.dataset, recent_cap);
    let scores = match config.cv.model {
        ModelKind::Coco => CocoModel::new(&ck.params, index, config.cv.coco.clone()).recommend(&event, k)?,
        ModelKind::Brm => {
            let scorer = cocorec::brm::Scorer::new(&ck.params);
            let probs = scorer.probs(&scorer.isc(&event.context)?, &scorer.osc(event.user, &event.recent));
            cocorec::eval::top_k(&probs, k)
        }
        ModelKind::Sknn => bail!("recommend supports coco and brm"),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (rank, (item, score)) in scores.iter().enumerate() {
        writeln!(out, "{},{},{score:.6}", rank + 1, ck.items.name(*item))?;
    }
    Ok(())
}

fn cmd_synth(config: &RunConfig, output: &Path, labels: Option<&Path>) -> Result<()> {
    let synth = generate(&config.synth)?;
    let folds = make_folds(&synth.sessions, config.ingest.n_folds, config.seed)?;
    let prepared = Prepared { dataset: synth.dataset.clone(), sessions: synth.sessions.clone(), folds, skipped_rows: 0 };
    let mut out = create(output)?;
    write_data(&mut out, &prepared)?;
    out.flush()?;
    let labels_path = labels.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(output, ".labels.csv"));
    let mut l = create(&labels_path)?;
    l.write_all(synth.label_lines().as_bytes())?;
    l.flush()?;
    println!("{}", DatasetStats::from_sessions(&prepared.sessions));
    println!("snapshot {}, labels {}", output.display(), labels_path.display());
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig, cases: usize) -> Result<()> {
    let results = gradcheck::run_suite(cases, config.seed)?;
    let mut failed = 0;
    for case in &results {
        let ok = case.max_error() <= 1e-4;
        failed += usize::from(!ok);
        println!("{} {case}", if ok { "ok  " } else { "FAIL" });
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks exceeded 1e-4", results.len());
    }
    println!("all {} gradient checks within 1e-4", results.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = cli.resolve()?;
    match &cli.command {
        Command::Prepare { input, output } => cmd_prepare(&config, input, output),
        Command::Train { data, fold, output, report } => cmd_train(&config, data, *fold, output, report.as_deref()),
        Command::Eval { data, output, checkpoint, fold } => cmd_eval(&config, data, output.as_deref(), checkpoint.as_deref(), fold),
        Command::Recommend { checkpoint, data, user, context, k } => cmd_recommend(&config, checkpoint, data, user, context, *k),
        Command::Synth { output, labels } => cmd_synth(&config, output, labels.as_deref()),
        Command::Gradcheck { cases } => cmd_gradcheck(&config, *cases),
    }
}
