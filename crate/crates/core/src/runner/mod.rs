//! Experiment orchestration: the configuration × seed matrix, its on-disk
//! result store, report rendering and the attention inspector.

mod inspect;
mod matrix;
mod report;

pub use inspect::{inspect_attention, BlockShare, InspectReport, LayerBreakdown, QueryPosition};
pub use matrix::{ExperimentMatrix, MatrixConfig, DEFAULT_SEEDS};
pub use report::{format_gap, format_ratio, render_report, ConfigRow, PairedRow, ReportBundle, ReportFormat};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use crate::corpus::{split_corpus, Splits, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::ModelParams;
use crate::partition::PartitionMethod;
use crate::train::{corpus_hash, train_model, PartitionPlan, RunResult, RunSpec, TrainOutcome};

/// Stored outcome of one (configuration, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub seed: u64,
    pub fingerprint: String,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: String,
    pub reference_hash: Option<String>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub matrix: ExperimentMatrix,
    pub provenance: Provenance,
    pub cells: Vec<CellRecord>,
    /// Cells trained by this invocation, as `label@seed`.
    #[serde(skip)]
    pub trained: Vec<String>,
}

impl ExperimentResult {
    pub fn is_complete(&self) -> bool {
        self.matrix.configs.len() * self.matrix.seeds.len() == self.cells.len()
            && self.cells.iter().all(|c| c.result.is_some())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.result.is_none())
    }

    pub fn get(&self, label: &str, seed: u64) -> Option<&RunResult> {
        self.cells
            .iter()
            .find(|c| c.label == label && c.seed == seed)
            .and_then(|c| c.result.as_ref())
    }

    /// Per-seed results of one configuration, in matrix seed order.
    pub fn runs(&self, label: &str) -> Result<Vec<&RunResult>> {
        self.matrix
            .seeds
            .iter()
            .map(|&s| {
                self.get(label, s)
                    .ok_or_else(|| Error::IncompleteResult(format!("missing {label} seed {s}")))
            })
            .collect()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("experiment.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Maps `f` over `items` on at most `jobs` threads, preserving order.
fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|o| o.unwrap()).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Store {
    results: PathBuf,
    checkpoints: PathBuf,
}

impl Store {
    fn open(out: &Path) -> Result<Self> {
        let s = Self {
            results: out.join("results"),
            checkpoints: out.join("checkpoints"),
        };
        for d in [&s.results, &s.checkpoints] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(s)
    }

    fn result_path(&self, label: &str, seed: u64) -> PathBuf {
        self.results.join(format!("{label}__s{seed}.json"))
    }

    fn checkpoint_path(&self, label: &str, seed: u64) -> PathBuf {
        self.checkpoints.join(format!("{label}__s{seed}.ckpt"))
    }

    fn cached(&self, label: &str, seed: u64, fingerprint: &str) -> Option<CellRecord> {
        let text = std::fs::read_to_string(self.result_path(label, seed)).ok()?;
        let rec: CellRecord = serde_json::from_str(&text).ok()?;
        (rec.fingerprint == fingerprint && rec.result.is_some()).then_some(rec)
    }

    fn write(&self, rec: &CellRecord) -> Result<()> {
        let json = serde_json::to_vec_pretty(rec)?;
        write_atomic(&self.result_path(&rec.label, rec.seed), &json)
    }
}

/// A cell whose training finished but whose evaluation waits for its
/// partition plan.
struct Trained {
    spec: RunSpec,
    outcome: Result<TrainOutcome>,
}

fn train_spec(spec: &RunSpec, splits: &Splits, plan: Option<&PartitionPlan>) -> Result<TrainOutcome> {
    let source = plan.and_then(|p| p.train.as_ref());
    if !spec.schedule.is_inactive() && source.is_none() {
        return Err(Error::InvalidPartition("no training partition available".into()));
    }
    train_model(&spec.model, &spec.train, &spec.schedule, spec.metric, &splits.train, source, |_, _| {})
}

fn finish(
    spec: &RunSpec,
    fingerprint: String,
    outcome: Result<TrainOutcome>,
    plan: std::result::Result<&PartitionPlan, &str>,
    splits: &Splits,
    checkpoint: &Path,
) -> CellRecord {
    let result = outcome.and_then(|o| {
        let plan = plan.map_err(|e| Error::InvalidPartition(e.to_string()))?;
        save_checkpoint(&o.params, checkpoint)?;
        let metrics = evaluate(&o.params, &splits.test, spec.train.context_length, &plan.test)?;
        Ok(RunResult::from_parts(fingerprint.clone(), spec, &o, metrics))
    });
    let (result, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    CellRecord {
        label: spec.label.clone(),
        seed: spec.train.seed,
        fingerprint,
        result,
        error,
    }
}

/// Runs every (configuration, seed) cell, reusing stored results whose
/// fingerprint still matches. Cells run on up to `jobs` threads; each run
/// is single-threaded and deterministic.
pub fn run_experiment(
    matrix: &ExperimentMatrix,
    corpus: &TokenSequence,
    out: &Path,
    jobs: usize,
    log: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentResult> {
    matrix.validate()?;
    let started = unix_now();
    let splits = split_corpus(corpus, &matrix.splits, matrix.train.context_length)?;
    let chash = corpus_hash(&splits);
    let store = Store::open(out)?;
    write_atomic(&out.join("matrix.json"), &serde_json::to_vec_pretty(matrix)?)?;
    let mut trained = Vec::new();

    // Phase 1: the pinned reference baseline, then the other baseline seeds.
    let baseline = matrix.baseline();
    let ref_seed = matrix.reference_seed;
    let ref_spec = matrix.run_spec(baseline, ref_seed);
    let ref_ckpt = store.checkpoint_path(&baseline.label, ref_seed);
    let ref_train_fp = ref_spec.fingerprint(&chash, None);
    let fp_path = ref_ckpt.with_extension("fingerprint");
    let mut pending: Vec<Trained> = Vec::new();
    let reference: Result<ModelParams<f32>> = match (
        std::fs::read_to_string(&fp_path).ok(),
        load_checkpoint(&ref_ckpt),
    ) {
        (Some(fp), Ok(params)) if fp.trim() == ref_train_fp => Ok(params),
        _ => {
            log(&format!("training reference {}@{ref_seed}", baseline.label));
            trained.push(format!("{}@{ref_seed}", baseline.label));
            let outcome = train_spec(&ref_spec, &splits, None);
            let params = outcome.as_ref().map(|o| o.params.clone()).map_err(|e| Error::Parse(e.to_string()));
            if let Ok(p) = &params {
                save_checkpoint(p, &ref_ckpt)?;
                write_atomic(&fp_path, ref_train_fp.as_bytes())?;
            }
            pending.push(Trained { spec: ref_spec.clone(), outcome });
            params
        }
    };
    let pinned_hash = reference.as_ref().ok().map(checkpoint_hash).transpose()?;

    let mut external: BTreeMap<String, Result<ModelParams<f32>>> = BTreeMap::new();
    for c in &matrix.configs {
        if let PartitionMethod::Semantic { reference: Some(path), .. } = &c.partition {
            external.entry(path.clone()).or_insert_with(|| load_checkpoint(path));
        }
    }
    let reference_key = |method: &PartitionMethod| -> Option<String> {
        match method {
            PartitionMethod::Fixed { .. } => None,
            PartitionMethod::Semantic { reference: None, .. } => {
                Some(pinned_hash.clone().unwrap_or_else(|| "unavailable".into()))
            }
            PartitionMethod::Semantic { reference: Some(path), .. } => Some(
                external[path]
                    .as_ref()
                    .ok()
                    .and_then(|p| checkpoint_hash(p).ok())
                    .unwrap_or_else(|| "unavailable".into()),
            ),
        }
    };
    let cell_fp = |spec: &RunSpec| spec.fingerprint(&chash, reference_key(&spec.partition).as_deref());

    let mut records: BTreeMap<(String, u64), CellRecord> = BTreeMap::new();
    let mut todo_baseline = Vec::new();
    for &seed in &matrix.seeds {
        let spec = matrix.run_spec(baseline, seed);
        if let Some(rec) = store.cached(&spec.label, seed, &cell_fp(&spec)) {
            records.insert((spec.label.clone(), seed), rec);
        } else if !pending.iter().any(|t| t.spec.train.seed == seed) {
            todo_baseline.push(spec);
        }
    }
    pending.retain(|t| !records.contains_key(&(t.spec.label.clone(), t.spec.train.seed)));
    for spec in &todo_baseline {
        log(&format!("training {}@{}", spec.label, spec.train.seed));
        trained.push(format!("{}@{}", spec.label, spec.train.seed));
    }
    let outcomes = parallel_map(&todo_baseline, jobs, |spec| train_spec(spec, &splits, None));
    pending.extend(todo_baseline.into_iter().zip(outcomes).map(|(spec, outcome)| Trained { spec, outcome }));

    // Phase 2: partition plans, built only for methods with work to do.
    let mut todo = Vec::new();
    for c in matrix.configs.iter().filter(|c| !c.is_baseline()) {
        for &seed in &matrix.seeds {
            let spec = matrix.run_spec(c, seed);
            match store.cached(&spec.label, seed, &cell_fp(&spec)) {
                Some(rec) => {
                    records.insert((spec.label.clone(), seed), rec);
                }
                None => todo.push(spec),
            }
        }
    }
    let mut plans: BTreeMap<String, std::result::Result<PartitionPlan, String>> = BTreeMap::new();
    for spec in pending.iter().map(|t| &t.spec).chain(&todo) {
        let key = spec.partition.to_string();
        if plans.contains_key(&key) {
            continue;
        }
        let need_train = todo
            .iter()
            .any(|s| s.partition == spec.partition && !s.schedule.is_inactive());
        let reference = match &spec.partition {
            PartitionMethod::Fixed { .. } => Ok(None),
            PartitionMethod::Semantic { reference: None, .. } => reference.as_ref().map(Some).map_err(|e| e.to_string()),
            PartitionMethod::Semantic { reference: Some(p), .. } => {
                external[p].as_ref().map(Some).map_err(|e| e.to_string())
            }
        };
        log(&format!("building {key} partitions"));
        let plan = reference.and_then(|r| {
            PartitionPlan::build(&spec.partition, &splits, r, need_train).map_err(|e| e.to_string())
        });
        if let Ok(PartitionPlan { test: crate::partition::PartitionSource::Global(p), .. }) = &plan {
            let dir = out.join("partitions");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            p.save(dir.join(format!("{}_test.txt", key.replace([':', '/', '\\'], "_"))))?;
        }
        plans.insert(key, plan);
    }
    let plan_for = |spec: &RunSpec| plans[&spec.partition.to_string()].as_ref().map_err(String::as_str);

    // Phase 3: evaluate the baselines, then train everything else.
    for t in pending {
        let fp = cell_fp(&t.spec);
        let ckpt = store.checkpoint_path(&t.spec.label, t.spec.train.seed);
        let rec = finish(&t.spec, fp, t.outcome, plan_for(&t.spec), &splits, &ckpt);
        store.write(&rec)?;
        records.insert((rec.label.clone(), rec.seed), rec);
    }
    for spec in &todo {
        log(&format!("training {}@{}", spec.label, spec.train.seed));
        trained.push(format!("{}@{}", spec.label, spec.train.seed));
    }
    let done = parallel_map(&todo, jobs, |spec| {
        let outcome = match plan_for(spec) {
            Ok(plan) => train_spec(spec, &splits, Some(plan)),
            Err(e) => Err(Error::InvalidPartition(e.to_string())),
        };
        let ckpt = store.checkpoint_path(&spec.label, spec.train.seed);
        let rec = finish(spec, cell_fp(spec), outcome, plan_for(spec), &splits, &ckpt);
        store.write(&rec).map(|_| rec)
    });
    for rec in done {
        let rec = rec?;
        if let Some(e) = &rec.error {
            log(&format!("{}@{} failed: {e}", rec.label, rec.seed));
        }
        records.insert((rec.label.clone(), rec.seed), rec);
    }

    let mut cells = Vec::new();
    for c in &matrix.configs {
        for &seed in &matrix.seeds {
            if let Some(rec) = records.remove(&(c.label.clone(), seed)) {
                cells.push(rec);
            }
        }
    }
    let result = ExperimentResult {
        matrix: matrix.clone(),
        provenance: Provenance {
            corpus_hash: chash,
            reference_hash: pinned_hash,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: started,
            finished_unix: unix_now(),
        },
        cells,
        trained,
    };
    write_atomic(&out.join("experiment.json"), &serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}
