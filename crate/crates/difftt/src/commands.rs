//! The pipeline steps behind each subcommand.
//!
//! Every step writes its artifacts and the fully resolved configuration
//! into a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use difftt_core::data::{generate_synthetic, Dataset};
use difftt_core::metrics::{delta_msle, CascadeRow, DeltaRow, EvalReport};
use difftt_core::model::{ModelState, Phase, UserTableValues};
use difftt_core::train::{evaluate_one, joint_train, meta_train, Corpus, EvalOptions, Sample, TttSettings};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_dataset_dir, write_dataset_dir, write_file};
use crate::report;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const JOINT_CHECKPOINT: &str = "joint.ckpt";
pub const META_CHECKPOINT: &str = "meta.ckpt";
pub const THREADS_ENV: &str = "DIFFTT_THREADS";

/// `<root>/<UTC timestamp>-seed<seed>`, suffixed if already taken.
pub fn new_run_dir(root: &Path, seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

/// Worker count from the environment, else the available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn write_resolved(cfg: &RunConfig, run: &Path) -> Result<()> {
    write_file(&run.join(RESOLVED_CONFIG), &cfg.resolved())
}

/// Synthesizes a dataset into `out`.
pub fn generate(cfg: &RunConfig, out: &Path, run: &Path) -> Result<Dataset> {
    cfg.validate()?;
    write_resolved(cfg, run)?;
    let (graph, cascades) = generate_synthetic(&cfg.synth)?;
    let ds = Dataset::identity_labeled(graph, cascades);
    write_dataset_dir(&ds, out)?;
    let total: usize = ds.cascades.iter().map(|c| c.len()).sum();
    let mut s = String::new();
    writeln!(s, "users = {}", ds.num_users()).unwrap();
    writeln!(s, "edges = {}", ds.graph.edges().len()).unwrap();
    writeln!(s, "cascades = {}", ds.cascades.len()).unwrap();
    writeln!(s, "shifted_cascades = {}", cfg.synth.shifted_count()).unwrap();
    writeln!(s, "mean_length = {:?}", total as f64 / ds.cascades.len().max(1) as f64).unwrap();
    write_file(&run.join("generate_summary.txt"), &s)?;
    log::info!("wrote {} cascades over {} users to {}", ds.cascades.len(), ds.num_users(), out.display());
    Ok(ds)
}

/// Loaded data with its training corpus.
pub struct Data {
    pub dataset: Dataset,
    pub corpus: Corpus,
}

pub fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Data> {
    let (dataset, rep) = load_dataset_dir(dir, cfg.directed)?;
    if rep.dropped_duplicates > 0 || rep.truncated_events > 0 {
        log::warn!(
            "{}: dropped {} repeated adoptions, truncated {} events",
            dir.display(),
            rep.dropped_duplicates,
            rep.truncated_events
        );
    }
    let corpus = Corpus::new(&dataset, cfg.split, cfg.intervals, cfg.observed_fraction)?;
    log::info!(
        "{}: {} users, split {}/{}/{}",
        dir.display(),
        dataset.num_users(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(Data { dataset, corpus })
}

/// Loads a checkpoint whose architecture must match `cfg`; forward-pass
/// options (seen-user masking, popularity pooling) follow `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path, num_users: usize) -> Result<ModelState> {
    let mut state = checkpoint::load(path)?;
    let want = cfg.model_config(num_users);
    state.config.mask_seen = want.mask_seen;
    state.config.macro_pooling = want.macro_pooling;
    if state.config != want {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint architecture {:?} does not match the run configuration {:?}",
            path.display(),
            state.config,
            want
        )));
    }
    Ok(state)
}

pub fn train_joint(cfg: &RunConfig, data: &Path, run: &Path) -> Result<ModelState> {
    cfg.validate()?;
    write_resolved(cfg, run)?;
    let d = load_data(cfg, data)?;
    let mut state = ModelState::new(cfg.model_config(d.dataset.num_users()), cfg.train.seed)?;
    let rep = joint_train(&mut state, &d.corpus, &cfg.train)?;
    write_file(&run.join("joint_epochs.csv"), &report::joint_epochs_csv(&rep))?;
    checkpoint::save(&state, &run.join(JOINT_CHECKPOINT))?;
    Ok(state)
}

pub fn train_meta(cfg: &RunConfig, data: &Path, joint: &Path, run: &Path) -> Result<ModelState> {
    cfg.validate()?;
    write_resolved(cfg, run)?;
    let d = load_data(cfg, data)?;
    let mut state = load_model(cfg, joint, d.dataset.num_users())?;
    if state.phase != Phase::Joint {
        return Err(Error::Checkpoint(format!(
            "{}: meta-training needs a joint checkpoint, this one is tagged `{}`",
            joint.display(),
            state.phase.name()
        )));
    }
    let rep = meta_train(&mut state, &d.corpus, &cfg.train)?;
    write_file(&run.join("meta_epochs.csv"), &report::meta_epochs_csv(&rep))?;
    let mut it = String::from("iteration,mean_meta\n");
    for (i, v) in rep.iterations.iter().enumerate() {
        writeln!(it, "{i},{v:?}").unwrap();
    }
    write_file(&run.join("meta_iterations.csv"), &it)?;
    checkpoint::save(&state, &run.join(META_CHECKPOINT))?;
    Ok(state)
}

/// Evaluates `samples` on `threads` workers. Each worker handles a
/// contiguous block and rows are concatenated in input order, so the
/// result does not depend on the thread count.
pub fn evaluate_parallel(
    state: &ModelState,
    tables: &UserTableValues,
    samples: &[Sample],
    ttt: Option<&TttSettings>,
    opts: &EvalOptions,
    threads: usize,
) -> Result<EvalReport> {
    let threads = threads.clamp(1, samples.len().max(1));
    let block = samples.len().div_ceil(threads).max(1);
    let rows: Vec<CascadeRow> = if threads == 1 {
        samples
            .iter()
            .map(|s| evaluate_one(state, tables, s, ttt, opts))
            .collect::<difftt_core::Result<_>>()?
    } else {
        let parts: Vec<difftt_core::Result<Vec<CascadeRow>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(block)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|s| evaluate_one(state, tables, s, ttt, opts))
                            .collect::<difftt_core::Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut rows = Vec::with_capacity(samples.len());
        for p in parts {
            rows.extend(p?);
        }
        rows
    };
    Ok(EvalReport::from_rows(rows, &opts.ks, opts.averaging)?)
}

fn write_eval(run: &Path, prefix: &str, r: &EvalReport) -> Result<()> {
    write_file(&run.join(format!("{prefix}_cascades.csv")), &report::cascades_csv(r))?;
    write_file(&run.join(format!("{prefix}_positions.csv")), &report::positions_csv(r))?;
    write_file(&run.join(format!("{prefix}_summary.txt")), &report::eval_summary(r))
}

fn export_embeddings(run: &Path, ds: &Dataset, tables: &UserTableValues) -> Result<()> {
    for (name, t) in [("social", &tables.social), ("diffusion", &tables.diffusion)] {
        let mut s = String::from("user");
        for j in 0..t.shape()[1] {
            write!(s, ",x{j}").unwrap();
        }
        s.push('\n');
        for (i, label) in ds.user_labels.iter().enumerate() {
            write!(s, "{label}").unwrap();
            for v in t.row(i) {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        write_file(&run.join(format!("embeddings_{name}.csv")), &s)?;
    }
    Ok(())
}

/// Test-set evaluation without adaptation.
pub fn evaluate(cfg: &RunConfig, data: &Path, ckpt: &Path, run: &Path, embeddings: bool) -> Result<EvalReport> {
    cfg.validate()?;
    write_resolved(cfg, run)?;
    let d = load_data(cfg, data)?;
    let state = load_model(cfg, ckpt, d.dataset.num_users())?;
    let tables = state.user_tables(&d.corpus.graph, &d.corpus.ops)?;
    if embeddings {
        export_embeddings(run, &d.dataset, &tables)?;
    }
    let r = evaluate_parallel(&state, &tables, &d.corpus.test, None, &cfg.eval_options(), worker_threads()?)?;
    write_eval(run, "eval", &r)?;
    log::info!("test msle {:.6}, {:?}", r.msle, r.ranking);
    Ok(r)
}

/// Outcome of a test-time-training evaluation.
pub struct TttOutcome {
    pub baseline: EvalReport,
    /// One report per requested step count, in request order.
    pub adapted: Vec<(usize, EvalReport)>,
    /// Per-cascade change against the baseline for the first step count.
    pub delta: Vec<DeltaRow>,
}

/// Test-set evaluation with per-cascade adaptation for each step count in
/// `steps`, plus the unadapted baseline and the paired ΔMSLE table.
pub fn ttt_eval(cfg: &RunConfig, data: &Path, ckpt: &Path, run: &Path, steps: &[usize]) -> Result<TttOutcome> {
    cfg.validate()?;
    let steps: Vec<usize> = if steps.is_empty() { vec![cfg.ttt().steps] } else { steps.to_vec() };
    let mut resolved = cfg.clone();
    resolved.ttt_steps = Some(steps[0]);
    write_resolved(&resolved, run)?;
    let d = load_data(cfg, data)?;
    let state = load_model(cfg, ckpt, d.dataset.num_users())?;
    let tables = state.user_tables(&d.corpus.graph, &d.corpus.ops)?;
    let threads = worker_threads()?;
    let opts = cfg.eval_options();
    let baseline = evaluate_parallel(&state, &tables, &d.corpus.test, None, &opts, threads)?;
    write_eval(run, "eval", &baseline)?;
    let mut adapted = Vec::new();
    for &n in &steps {
        let ttt = TttSettings { steps: n, ..cfg.ttt() };
        let r = evaluate_parallel(&state, &tables, &d.corpus.test, Some(&ttt), &opts, threads)?;
        log::info!("ttt steps {n}: test msle {:.6} (without {:.6})", r.msle, baseline.msle);
        write_eval(run, &format!("ttt_d{n}"), &r)?;
        adapted.push((n, r));
    }
    let delta = delta_msle(&adapted[0].1, &baseline)?;
    write_file(&run.join("delta.csv"), &report::delta_csv(&delta))?;
    write_file(&run.join("delta_summary.txt"), &report::delta_summary(&delta))?;
    write_file(&run.join("delta_histogram.svg"), &report::delta_histogram_svg(&delta, 20))?;
    if steps.len() > 1 {
        let points: Vec<(usize, f64)> = adapted.iter().map(|(n, r)| (*n, r.msle)).collect();
        write_file(&run.join("sweep.csv"), &report::sweep_csv(&points))?;
        write_file(&run.join("sweep.svg"), &report::sweep_svg(&points))?;
    }
    Ok(TttOutcome {
        baseline,
        adapted,
        delta,
    })
}

/// Reads the per-cascade table written by `evaluate` or `ttt-eval`.
pub fn read_cascades_csv(path: &Path) -> Result<EvalReport> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("column {} is missing or not a number", j + 1),
                })
        };
        rows.push(CascadeRow {
            id: rec.get(0).unwrap_or_default().to_string(),
            truth: field(1)?,
            pred: field(2)?,
            sq_log_err: field(3)?,
            ranks: Vec::new(),
            skipped: 0,
        });
    }
    Ok(EvalReport::from_rows(rows, &[], Default::default())?)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        },
    }
}

/// ΔMSLE table, summary and histogram from two per-cascade tables.
pub fn report(with: &Path, without: &Path, run: &Path) -> Result<Vec<DeltaRow>> {
    let a = read_cascades_csv(with)?;
    let b = read_cascades_csv(without)?;
    let delta = delta_msle(&a, &b)?;
    let mut summary = report::delta_summary(&delta);
    writeln!(summary, "msle_with = {:?}", a.msle).unwrap();
    writeln!(summary, "msle_without = {:?}", b.msle).unwrap();
    write_file(&run.join("delta.csv"), &report::delta_csv(&delta))?;
    write_file(&run.join("delta_summary.txt"), &summary)?;
    write_file(&run.join("delta_histogram.svg"), &report::delta_histogram_svg(&delta, 20))?;
    Ok(delta)
}

/// Parses `key = value` lines, as written in summary files.
pub fn read_summary(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
