//! Run configuration, run-directory layout and the stage drivers behind the
//! command-line tool.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{load_policy, load_trajnet, save_policy, save_trajnet, PolicyCheckpoint, TrajNetCheckpoint};
use crate::data::{Dataset, NormStats};
use crate::envs::{CollectorConfig, EnvSpec};
use crate::error::{Error, Result};
use crate::eval::{aggregate_seeds, best_of_last_k, evaluate_agent, EvalConfig, EvalEvent, EvalReport, RunRecord};
use crate::policy::{train_policy, PolicyConfig, PolicyEvent};
use crate::trajnet::{model_dims, train_trajnet, TrainEvent, TrajNetConfig};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.json";
pub const CHECKPOINTS: &str = "checkpoints";
pub const BEST_MARKER: &str = "best";
pub const TRAJNET_CKPT: &str = "trajnet.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the dataset's environment when given.
    pub env: Option<EnvSpec>,
    pub data: CollectorConfig,
    pub trajnet: TrajNetConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: None,
            data: CollectorConfig::default(),
            trajnet: TrajNetConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(key) {
                    Some(slot) if slot.is_object() && value.is_object() => merge(slot, value),
                    _ => {
                        b.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl RunConfig {
    /// Module defaults with the window lengths suited to `env`: (10, 40)
    /// for mazes, (5, 20) for LineRun.
    pub fn defaults_for(env: &EnvSpec) -> Self {
        let (k, p) = match env {
            EnvSpec::Minimaze { .. } => (10, 40),
            EnvSpec::Linerun => (5, 20),
        };
        RunConfig {
            env: Some(env.clone()),
            trajnet: TrajNetConfig { k, p, ..Default::default() },
            ..Default::default()
        }
    }

    /// Overlay a user document on the defaults for `env`. Unknown keys are
    /// rejected.
    pub fn resolve(user: &Value, env: &EnvSpec) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::Config("run config must be a JSON object".into()));
        }
        let mut doc = serde_json::to_value(Self::defaults_for(env)).expect("config serializes");
        merge(&mut doc, user);
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("run config: {e}")))?;
        if config.env.as_ref().is_some_and(|e| e != env) {
            return Err(Error::Incompatible(format!(
                "config env {:?} does not match dataset env {env:?}",
                config.env.as_ref().expect("checked")
            )));
        }
        config.trajnet.validate()?;
        config.policy.validate()?;
        config.eval.validate()?;
        Ok(RunConfig { env: Some(env.clone()), ..config })
    }

    pub fn load(path: Option<&Path>, env: &EnvSpec) -> Result<Self> {
        let user = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::resolve(&user, env)
    }
}

/// Default reconstruction dims: the goal subspace when there is one, all
/// state dims otherwise.
pub fn default_recon_dims(ds: &Dataset) -> Vec<usize> {
    if ds.meta.goal_subspace.is_empty() {
        (0..ds.meta.state_dim).collect()
    } else {
        ds.meta.goal_subspace.clone()
    }
}

/// `{resolved-config.json, checkpoints/, metrics.jsonl, report.json}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let ckpts = root.join(CHECKPOINTS);
        fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(CHECKPOINTS).is_dir() {
            return Err(Error::Data(format!("{} is not a run directory (no {CHECKPOINTS}/)", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINTS)
    }

    pub fn trajnet_path(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("trajnet-epoch-{epoch:03}.ckpt"))
    }

    pub fn policy_path(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("policy-epoch-{epoch:03}.ckpt"))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.root.join(name);
        let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn metrics(&self) -> Result<MetricsLog> {
        let path = self.root.join(METRICS);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog { path, out: BufWriter::new(file) })
    }

    /// Record `epoch` as the best TrajNet checkpoint and copy it to
    /// `trajnet.ckpt` at the run root.
    pub fn mark_best_trajnet(&self, epoch: usize) -> Result<PathBuf> {
        let src = self.trajnet_path(epoch);
        let name = src.file_name().expect("file name").to_string_lossy().to_string();
        let marker = self.checkpoints().join(BEST_MARKER);
        fs::write(&marker, format!("{name}\n")).map_err(|e| Error::io(&marker, e))?;
        let dst = self.root.join(TRAJNET_CKPT);
        fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        Ok(dst)
    }

    /// Policy checkpoints present, ordered by epoch.
    pub fn policy_checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let dir = self.checkpoints();
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            if let Some(epoch) = name.strip_prefix("policy-epoch-").and_then(|r| r.strip_suffix(".ckpt")) {
                if let Ok(e) = epoch.parse() {
                    out.push((e, path));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn append(&mut self, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::json(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajNetSummary {
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub first_validation_loss: f64,
    pub final_validation_loss: f64,
    pub checkpoint: PathBuf,
}

/// Stage 1: train, checkpoint every epoch, log metrics and record the
/// lowest-validation-loss epoch as best.
pub fn run_train_trajnet(config: &RunConfig, ds: &Dataset, seed: u64, out: &Path) -> Result<TrajNetSummary> {
    let run = RunDir::create(out)?;
    run.write_json(RESOLVED_CONFIG, config)?;
    let stats = NormStats::compute(&ds.meta, ds.train_trajectories())?;
    let dims = model_dims(ds, &config.trajnet, &default_recon_dims(ds))?;
    let mut log = run.metrics()?;
    let outcome = train_trajnet(ds, &stats, &config.trajnet, dims, seed, |event| match event {
        TrainEvent::Step { epoch, step, loss } => log.append(&serde_json::json!({
            "phase": "trajnet-step", "seed": seed, "epoch": epoch, "step": step, "loss": loss,
        })),
        TrainEvent::Epoch { report, model, adam } => {
            log.append(&serde_json::json!({
                "phase": "trajnet-epoch", "seed": seed, "epoch": report.epoch,
                "train_loss": report.train_loss, "validation_loss": report.validation_loss,
            }))?;
            save_trajnet(
                &run.trajnet_path(report.epoch),
                &TrajNetCheckpoint {
                    model: model.clone(),
                    adam: Some(adam.clone()),
                    stats: stats.clone(),
                    dataset: ds.meta.clone(),
                    epoch: report.epoch,
                },
            )
        }
    })?;
    log.flush()?;
    let checkpoint = run.mark_best_trajnet(outcome.best_epoch)?;
    Ok(TrajNetSummary {
        best_epoch: outcome.best_epoch,
        best_validation_loss: outcome.best().validation_loss,
        first_validation_loss: outcome.history[0].validation_loss,
        final_validation_loss: outcome.history.last().expect("at least one epoch").validation_loss,
        checkpoint,
    })
}

fn check_compatible(ckpt: &TrajNetCheckpoint, ds: &Dataset) -> Result<()> {
    let d = &ckpt.model.dims;
    let m = &ds.meta;
    if d.state_dim != m.state_dim || d.action_dim != m.action_dim || d.goal_dim != m.goal_dim() {
        return Err(Error::Incompatible(format!(
            "TrajNet checkpoint expects state/action/goal dims {}/{}/{}, dataset has {}/{}/{}",
            d.state_dim,
            d.action_dim,
            d.goal_dim,
            m.state_dim,
            m.action_dim,
            m.goal_dim()
        )));
    }
    if ckpt.dataset.env_id != m.env_id || ckpt.dataset.goal_mode != m.goal_mode {
        return Err(Error::Incompatible(format!(
            "TrajNet checkpoint was trained on {} ({:?}), dataset is {} ({:?})",
            ckpt.dataset.env_id, ckpt.dataset.goal_mode, m.env_id, m.goal_mode
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub epochs: usize,
    pub first_train_loss: f64,
    pub final_train_loss: f64,
    pub retained: Vec<PathBuf>,
}

/// Stage 2: train against a frozen TrajNet (none for the `none`
/// conditioning), keeping the newest `keep` epoch checkpoints.
pub fn run_train_policy(
    config: &RunConfig,
    ds: &Dataset,
    trajnet: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<PolicySummary> {
    let needs = config.policy.conditioning.needs_trajnet();
    let loaded = match (needs, trajnet) {
        (true, Some(p)) => {
            let ckpt = load_trajnet(p)?;
            check_compatible(&ckpt, ds)?;
            Some(ckpt)
        }
        (true, None) => {
            return Err(Error::Config(format!("{:?} conditioning needs --trajnet", config.policy.conditioning)))
        }
        (false, _) => None,
    };
    let run = RunDir::create(out)?;
    let mut resolved = config.clone();
    if let Some(c) = &loaded {
        resolved.trajnet = c.model.config.clone();
    }
    run.write_json(RESOLVED_CONFIG, &resolved)?;
    let stats = match &loaded {
        Some(c) => c.stats.clone(),
        None => NormStats::compute(&ds.meta, ds.train_trajectories())?,
    };
    let keep = config.eval.last_k;
    let mut log = run.metrics()?;
    let mut written: Vec<PathBuf> = Vec::new();
    let frozen = loaded.as_ref().map(|c| &c.model);
    let outcome = train_policy(ds, &stats, frozen, &config.policy, seed, |event| match event {
        PolicyEvent::Step { epoch, step, loss } => log.append(&serde_json::json!({
            "phase": "policy-step", "seed": seed, "epoch": epoch, "step": step, "loss": loss,
        })),
        PolicyEvent::Epoch { report, policy, adam } => {
            log.append(&serde_json::json!({
                "phase": "policy-epoch", "seed": seed, "epoch": report.epoch,
                "train_loss": report.train_loss, "validation_loss": report.validation_loss,
            }))?;
            let path = run.policy_path(report.epoch);
            let agent = crate::policy::Agent { trajnet: frozen.cloned(), policy: policy.clone(), stats: stats.clone() };
            save_policy(
                &path,
                &PolicyCheckpoint { agent, adam: Some(adam.clone()), dataset: ds.meta.clone(), epoch: report.epoch },
            )?;
            written.push(path);
            while written.len() > keep {
                let old = written.remove(0);
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
            Ok(())
        }
    })?;
    log.flush()?;
    Ok(PolicySummary {
        epochs: outcome.history.len(),
        first_train_loss: outcome.history[0].train_loss,
        final_train_loss: outcome.history.last().expect("at least one epoch").train_loss,
        retained: written,
    })
}

/// Evaluate the newest `last_k` policy checkpoints of every run under every
/// evaluation seed. Each (run, seed) pair yields one record whose chosen
/// score is the best of those checkpoints; the report aggregates all
/// records. Eval events are appended to the first run's metrics log and
/// the report written to `out` (the first run when absent).
pub fn run_eval(
    runs: &[PathBuf],
    seeds: &[u64],
    config: &EvalConfig,
    threads: usize,
    out: Option<&Path>,
) -> Result<EvalReport> {
    config.validate()?;
    if runs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("eval needs at least one run and one seed".into()));
    }
    let mut jobs = Vec::new();
    for run in runs {
        let dir = RunDir::open(run)?;
        let ckpts = dir.policy_checkpoints()?;
        if ckpts.is_empty() {
            return Err(Error::Data(format!("no policy checkpoints in {}", dir.checkpoints().display())));
        }
        let start = ckpts.len().saturating_sub(config.last_k);
        for &seed in seeds {
            for (epoch, path) in &ckpts[start..] {
                jobs.push((run.clone(), seed, *epoch, path.clone()));
            }
        }
    }
    let scores = run_jobs(&jobs, threads.max(1), |(_, seed, _, path)| {
        let ckpt = load_policy(path)?;
        evaluate_agent(&ckpt.agent, &ckpt.dataset, config, *seed)
    })?;
    let out_dir = RunDir { root: out.map_or_else(|| runs[0].clone(), Path::to_path_buf) };
    fs::create_dir_all(&out_dir.root).map_err(|e| Error::io(&out_dir.root, e))?;
    let mut log = out_dir.metrics()?;
    let mut records: Vec<RunRecord> = Vec::new();
    for ((run, seed, epoch, _), score) in jobs.iter().zip(&scores) {
        log.append(&EvalEvent {
            phase: "eval".into(),
            seed: *seed,
            epoch: *epoch,
            score: score.score,
            n_episodes: score.n_episodes,
        })?;
        let name = run.display().to_string();
        match records.last_mut() {
            Some(r) if r.run == name && r.seed == *seed => {
                r.epochs.push(*epoch);
                r.scores.push(score.score);
            }
            _ => records.push(RunRecord { run: name, seed: *seed, epochs: vec![*epoch], scores: vec![score.score], chosen: 0.0 }),
        }
    }
    log.flush()?;
    for r in &mut records {
        r.chosen = best_of_last_k(&r.scores, config.last_k)?;
    }
    let aggregate = aggregate_seeds(&records.iter().map(|r| r.chosen).collect::<Vec<_>>())?;
    let report = EvalReport { records, aggregate };
    out_dir.write_json(REPORT, &report)?;
    Ok(report)
}

/// Map `f` over `jobs` on up to `threads` scoped threads; results keep job
/// order.
fn run_jobs<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Thread cap from `GCPC_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("GCPC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("GCPC_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}
