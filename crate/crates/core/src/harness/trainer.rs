//! The training loop, run directories, metrics log and resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{td_error_probe, TdErrorReport};
use crate::envs::{make_env, EnvSpec, Environment};
use crate::numerics::Rng;
use crate::replay::{collection_scheduler, Collector, ReplayBuffer};

use super::acting::{episode_seed, evaluate, probe_episodes, run_episode, TargetInput};
use super::checkpoint::{export_learner, import_learner, Checkpoint};
use super::config::RunConfig;
use super::learner::{Learner, UpdateReport};
use super::HarnessError;
use crate::numerics::SampleMode;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "SCAFFOLDER_RUN_ROOT";

const MANIFEST_FILE: &str = "manifest.json";
const METRICS_FILE: &str = "metrics.csv";
const METRICS_HEADER: &str = "step,split,key,value\n";
const CHECKPOINT_DIR: &str = "checkpoints";

const STREAM_INIT: u64 = 0;
const STREAM_COLLECT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const SEED_COLLECT: u64 = 10;
const SEED_EVAL: u64 = 11;
const SEED_PROBE: u64 = 12;

/// Root for new run directories: `$SCAFFOLDER_RUN_ROOT` or `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Write through a sibling temporary file and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Run metadata stored next to the metrics. Written before training; the
/// completion record is filled in once when the budget is reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub created_unix: u64,
    pub variant: String,
    pub env: EnvSpec,
    pub seed: u64,
    pub components: Vec<String>,
    /// Fully resolved configuration, one `key = value` line per field.
    pub config: String,
    pub completion: Option<Completion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub env_steps: u64,
    pub episodes: u64,
    pub exploration_episodes: u64,
    pub updates: u64,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self, HarnessError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self) -> Result<RunConfig, HarnessError> {
        RunConfig::resolve(&self.config, &[])
    }
}

/// One `step,split,key,value` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub key: String,
    pub value: f64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>, HarnessError> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || HarnessError::Invalid(format!("metrics line {}: `{line}`", i + 2));
            let mut parts = line.splitn(4, ',');
            let step = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let split = parts.next().ok_or_else(bad)?.to_string();
            let key = parts.next().ok_or_else(bad)?.to_string();
            let value = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok(MetricRow { step, split, key, value })
        })
        .collect()
}

/// In-memory metrics text mirrored to `metrics.csv` on flush.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    text: String,
    flushed: usize,
    path: Option<PathBuf>,
}

impl MetricsLog {
    fn new(path: Option<PathBuf>) -> Self {
        Self {
            text: METRICS_HEADER.to_string(),
            flushed: 0,
            path,
        }
    }

    pub fn push(&mut self, step: u64, split: &str, key: &str, value: f64) {
        self.text.push_str(&format!("{step},{split},{key},{value}\n"));
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        let Some(path) = &self.path else {
            self.flushed = self.text.len();
            return Ok(());
        };
        use std::io::Write;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        file.write_all(&self.text.as_bytes()[self.flushed..])
            .map_err(|e| HarnessError::io(path, e))?;
        self.flushed = self.text.len();
        Ok(())
    }
}

/// Headline numbers of a finished (or resumed and finished) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub scores: Vec<(u64, f64)>,
    pub td_reports: Vec<TdErrorReport>,
    pub env_steps: u64,
    pub episodes: u64,
    pub exploration_episodes: u64,
}

impl RunSummary {
    pub fn final_score(&self) -> Option<f64> {
        self.scores.last().map(|(_, s)| *s)
    }

    /// Rebuild from the metrics text.
    pub fn from_metrics(text: &str, counters: &Counters) -> Result<Self, HarnessError> {
        let rows = parse_metrics(text)?;
        let scores = rows
            .iter()
            .filter(|r| r.split == "eval" && r.key == "score")
            .map(|r| (r.step, r.value))
            .collect();
        let mut td: BTreeMap<u64, BTreeMap<&str, f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.split == "eval" && r.key.starts_with("td/")) {
            td.entry(r.step).or_default().insert(&r.key[3..], r.value);
        }
        let td_reports = td
            .into_iter()
            .map(|(step, m)| {
                let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
                TdErrorReport {
                    checkpoint_step: step,
                    target_mae: get("target_mae"),
                    scaffolded_mae: get("scaffolded_mae"),
                    advantage: get("advantage"),
                    advantage_se: get("advantage_se"),
                    n_transitions: get("transitions") as usize,
                }
            })
            .collect();
        Ok(Self {
            scores,
            td_reports,
            env_steps: counters.env_steps,
            episodes: counters.episodes,
            exploration_episodes: counters.exploration_episodes,
        })
    }
}

/// Loop counters saved in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub exploration_episodes: u64,
    pub updates: u64,
    /// Environment steps not yet paid for with updates.
    pub update_credit: u64,
    pub evals: u64,
    pub probes: u64,
}

impl Counters {
    fn to_pairs(&self) -> Vec<(String, u64)> {
        [
            ("env_steps", self.env_steps),
            ("episodes", self.episodes),
            ("exploration_episodes", self.exploration_episodes),
            ("updates", self.updates),
            ("update_credit", self.update_credit),
            ("evals", self.evals),
            ("probes", self.probes),
        ]
        .into_iter()
        .map(|(k, v)| (format!("loop/{k}"), v))
        .collect()
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, HarnessError> {
        let get = |k: &str| {
            ckpt.counter(&format!("loop/{k}"))
                .ok_or_else(|| HarnessError::Invalid(format!("checkpoint lacks counter `{k}`")))
        };
        Ok(Self {
            env_steps: get("env_steps")?,
            episodes: get("episodes")?,
            exploration_episodes: get("exploration_episodes")?,
            updates: get("updates")?,
            update_credit: get("update_credit")?,
            evals: get("evals")?,
            probes: get("probes")?,
        })
    }
}

/// Grid points in `(from, to]`: multiples of `every`, plus `budget` itself.
fn grid_points(from: u64, to: u64, every: u64, budget: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if every > 0 {
        let mut g = (from / every + 1) * every;
        while g <= to && g <= budget {
            out.push(g);
            g += every;
        }
    }
    if from < budget && budget <= to && out.last() != Some(&budget) {
        out.push(budget);
    }
    out
}

pub struct Trainer {
    pub config: RunConfig,
    pub learner: Learner,
    pub replay: ReplayBuffer,
    pub counters: Counters,
    pub metrics: MetricsLog,
    collect_rng: Rng,
    train_rng: Rng,
    env: Box<dyn Environment + Send>,
    eval_env: Box<dyn Environment + Send>,
    run_dir: Option<PathBuf>,
    created_unix: u64,
}

impl Trainer {
    /// Fresh run. With a directory, the manifest and metrics files are
    /// created there; the directory must not already hold a run.
    pub fn new(config: RunConfig, run_dir: Option<&Path>) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut trainer = Self::build(config, run_dir)?;
        if let Some(dir) = &trainer.run_dir {
            if dir.join(MANIFEST_FILE).exists() {
                return Err(HarnessError::Invalid(format!(
                    "{} already holds a run; resume it or pick another directory",
                    dir.display()
                )));
            }
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| HarnessError::io(dir, e))?;
            let metrics = dir.join(METRICS_FILE);
            if metrics.exists() {
                fs::remove_file(&metrics).map_err(|e| HarnessError::io(&metrics, e))?;
            }
            trainer.metrics.flush()?;
            trainer.write_manifest()?;
        }
        Ok(trainer)
    }

    fn build(config: RunConfig, run_dir: Option<&Path>) -> Result<Self, HarnessError> {
        let env = make_env(&config.run.env, config.run.obs_noise)?;
        let eval_env = make_env(&config.run.env, config.run.obs_noise)?;
        let spec = env.spec().clone();
        let seed = config.run.seed;
        let mut init = Rng::with_stream(seed, STREAM_INIT);
        let learner = Learner::new(&config.variant, &spec, &config.wm, &config.ac, config.train.imag_starts, &mut init);
        let run_dir = run_dir.map(Path::to_path_buf);
        Ok(Self {
            replay: ReplayBuffer::new(config.train.replay_capacity),
            learner,
            counters: Counters::default(),
            metrics: MetricsLog::new(run_dir.as_ref().map(|d| d.join(METRICS_FILE))),
            collect_rng: Rng::with_stream(seed, STREAM_COLLECT),
            train_rng: Rng::with_stream(seed, STREAM_TRAIN),
            env,
            eval_env,
            run_dir,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config,
        })
    }

    /// Restore from a checkpoint (the latest one when `checkpoint` is None).
    /// The metrics file is cut back to the checkpoint's position.
    pub fn resume(run_dir: &Path, checkpoint: Option<&Path>) -> Result<Self, HarnessError> {
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => latest_checkpoint(run_dir)?
                .ok_or_else(|| HarnessError::Invalid(format!("no checkpoints under {}", run_dir.display())))?,
        };
        let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let config = RunConfig::resolve(&ckpt.manifest, &[])?;
        let mut trainer = Self::build(config, Some(run_dir))?;
        trainer.restore(&ckpt)?;
        let metrics_len = ckpt
            .counter("loop/metrics_bytes")
            .ok_or_else(|| HarnessError::Invalid("checkpoint lacks the metrics position".into()))? as usize;
        let metrics_path = run_dir.join(METRICS_FILE);
        let mut text = fs::read_to_string(&metrics_path).map_err(|e| HarnessError::io(&metrics_path, e))?;
        if text.len() < metrics_len {
            return Err(HarnessError::Invalid(format!(
                "{} is shorter than the checkpoint expects",
                metrics_path.display()
            )));
        }
        text.truncate(metrics_len);
        atomic_write(&metrics_path, text.as_bytes())?;
        trainer.metrics.text = text;
        trainer.metrics.flushed = metrics_len;
        if let Ok(m) = Manifest::read(run_dir) {
            trainer.created_unix = m.created_unix;
        }
        Ok(trainer)
    }

    /// Load a checkpoint's learner only, e.g. for offline evaluation.
    pub fn from_checkpoint_file(path: &Path) -> Result<Self, HarnessError> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let config = RunConfig::resolve(&ckpt.manifest, &[])?;
        let mut trainer = Self::build(config, None)?;
        trainer.restore(&ckpt)?;
        Ok(trainer)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), HarnessError> {
        import_learner(&mut self.learner, ckpt)?;
        self.replay = ReplayBuffer::from_bytes(&ckpt.replay)?;
        self.counters = Counters::from_checkpoint(ckpt)?;
        let rng = |name: &str| {
            ckpt.rng(name)
                .map(Rng::from_state)
                .ok_or_else(|| HarnessError::Invalid(format!("checkpoint lacks generator `{name}`")))
        };
        self.collect_rng = rng("collect")?;
        self.train_rng = rng("train")?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint {
            manifest: self.config.to_toml(),
            replay: self.replay.to_bytes(),
            rngs: vec![
                ("collect".into(), self.collect_rng.state()),
                ("train".into(), self.train_rng.state()),
            ],
            counters: self.counters.to_pairs(),
            ..Checkpoint::default()
        };
        ckpt.counters.push(("loop/metrics_bytes".into(), self.metrics.text.len() as u64));
        export_learner(&self.learner, &mut ckpt);
        ckpt
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            artifact_version: ARTIFACT_VERSION.to_string(),
            created_unix: self.created_unix,
            variant: self.config.run.variant.clone(),
            env: self.learner.spec.clone(),
            seed: self.config.run.seed,
            components: self.learner.components().into_iter().map(String::from).collect(),
            config: self.config.to_toml(),
            completion: self.finished().then(|| Completion {
                env_steps: self.counters.env_steps,
                episodes: self.counters.episodes,
                exploration_episodes: self.counters.exploration_episodes,
                updates: self.counters.updates,
            }),
        }
    }

    fn write_manifest(&self) -> Result<(), HarnessError> {
        if let Some(dir) = &self.run_dir {
            let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes") + "\n";
            atomic_write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        }
        Ok(())
    }

    /// Flush metrics, then write a checkpoint for the current env step.
    pub fn save_checkpoint(&mut self) -> Result<Option<PathBuf>, HarnessError> {
        self.metrics.flush()?;
        let Some(dir) = &self.run_dir else {
            return Ok(None);
        };
        let path = dir
            .join(CHECKPOINT_DIR)
            .join(format!("step_{:08}.ckpt", self.counters.env_steps));
        atomic_write(&path, &self.checkpoint().to_bytes())?;
        Ok(Some(path))
    }

    pub fn finished(&self) -> bool {
        self.counters.env_steps >= self.config.run.steps
    }

    /// Train to the step budget and write the final checkpoint.
    pub fn run(&mut self) -> Result<RunSummary, HarnessError> {
        while !self.finished() {
            if let Err(e) = self.step_episode() {
                self.metrics.flush()?;
                return Err(e);
            }
        }
        self.save_checkpoint()?;
        self.write_manifest()?;
        self.summary()
    }

    pub fn summary(&self) -> Result<RunSummary, HarnessError> {
        RunSummary::from_metrics(&self.metrics.text, &self.counters)
    }

    fn privileged_keep(&self) -> Result<f64, HarnessError> {
        Ok(self
            .learner
            .variant
            .privileged_keep(self.counters.env_steps, self.config.run.steps)?)
    }

    /// One collection episode, the evaluations and probes it crosses, its
    /// update cycles and any due checkpoint.
    pub fn step_episode(&mut self) -> Result<(), HarnessError> {
        let cfg = self.config.clone();
        let ep = self.counters.episodes;
        let collector = if ep < cfg.train.warmup_episodes {
            Collector::Scripted
        } else {
            collection_scheduler(ep - cfg.train.warmup_episodes, self.learner.variant.exploration_policy)
        };
        let keep = self.privileged_keep()?;
        let input = TargetInput::for_learner(&self.learner, keep, false);
        let seed = episode_seed(cfg.run.seed, SEED_COLLECT, ep);
        let outcome = run_episode(
            &self.learner,
            self.env.as_mut(),
            collector,
            seed,
            input,
            SampleMode::Sample,
            &mut self.collect_rng,
        )?;
        let before = self.counters.env_steps;
        let length = outcome.record.len() as u64;
        let after = before + length;

        for g in grid_points(before, after, cfg.eval.every, cfg.run.steps) {
            let eval_seed = episode_seed(cfg.run.seed, SEED_EVAL, self.counters.evals);
            let scores = evaluate(&self.learner, self.eval_env.as_mut(), cfg.eval.episodes, eval_seed)?;
            self.counters.evals += 1;
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            self.metrics.push(g, "eval", "score", mean);
        }
        if self.learner.variant.needs_probe_critic() && self.learner.scaffolded_wm.is_some() {
            let probe_grid = if cfg.probe.every == 0 {
                Vec::new()
            } else {
                grid_points(before, after, cfg.probe.every, cfg.run.steps)
            };
            for g in probe_grid {
                self.probe_at(g)?;
            }
        }

        self.counters.env_steps = after;
        self.counters.episodes += 1;
        if collector == Collector::ExplorationPolicy {
            self.counters.exploration_episodes += 1;
        }
        self.metrics.push(after, "train", "episode/return", outcome.record.total_reward());
        self.metrics.push(after, "train", "episode/length", length as f64);
        self.metrics.push(after, "train", "episode/score", outcome.score);
        let collector_code = match collector {
            Collector::Scripted => 0.0,
            Collector::TargetPolicy => 1.0,
            Collector::ExplorationPolicy => 2.0,
        };
        self.metrics.push(after, "train", "episode/collector", collector_code);
        self.replay.push(outcome.record)?;

        self.counters.update_credit += length;
        let mut sums: UpdateReport = BTreeMap::new();
        let mut cycles = 0u64;
        while self.counters.update_credit >= cfg.train.every {
            self.counters.update_credit -= cfg.train.every;
            let batch = self
                .replay
                .sample_sequences(cfg.train.batch, cfg.train.seq_len, &mut self.train_rng)?;
            let report = self
                .learner
                .update(&batch, keep, &mut self.train_rng)
                .map_err(|e| self.divergence(e))?;
            if let Some((k, v)) = report.iter().find(|(_, v)| !v.is_finite()) {
                return Err(HarnessError::Diverged {
                    step: after,
                    detail: format!("`{k}` = {v}"),
                });
            }
            for (k, v) in report {
                *sums.entry(k).or_insert(0.0) += v;
            }
            cycles += 1;
            self.counters.updates += 1;
        }
        if cycles > 0 {
            for (k, v) in &sums {
                self.metrics.push(after, "train", k, v / cycles as f64);
            }
            self.metrics.push(after, "train", "updates", self.counters.updates as f64);
        }

        let ck = cfg.checkpoint.every;
        if ck > 0 && after / ck > before / ck && !self.finished() {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn divergence(&self, e: HarnessError) -> HarnessError {
        if e.is_divergence() && !matches!(e, HarnessError::Diverged { .. }) {
            HarnessError::Diverged {
                step: self.counters.env_steps,
                detail: e.to_string(),
            }
        } else {
            e
        }
    }

    /// TD-error probe of the current learner, logged at `step`.
    pub fn probe_at(&mut self, step: u64) -> Result<TdErrorReport, HarnessError> {
        let seed = episode_seed(self.config.run.seed, SEED_PROBE, self.counters.probes);
        self.counters.probes += 1;
        let report = self.probe_report(step, seed)?;
        self.metrics.push(step, "eval", "td/target_mae", report.target_mae);
        self.metrics.push(step, "eval", "td/scaffolded_mae", report.scaffolded_mae);
        self.metrics.push(step, "eval", "td/advantage", report.advantage);
        self.metrics.push(step, "eval", "td/advantage_se", report.advantage_se);
        self.metrics.push(step, "eval", "td/transitions", report.n_transitions as f64);
        Ok(report)
    }

    /// TD-error probe without logging.
    pub fn probe_report(&mut self, step: u64, seed: u64) -> Result<TdErrorReport, HarnessError> {
        let eps = probe_episodes(&self.learner, self.eval_env.as_mut(), self.config.probe.transitions, seed)?;
        Ok(td_error_probe(step, &eps, self.config.ac.gamma, self.config.ac.lambda)?)
    }

    /// Mode-action evaluation without logging.
    pub fn evaluate(&mut self, episodes: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
        evaluate(&self.learner, self.eval_env.as_mut(), episodes, seed)
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }
}

/// Checkpoint with the highest step in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>, HarnessError> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    Ok(paths.pop())
}

/// Checkpoints in a run directory, by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>, HarnessError> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut out: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let step = p.file_stem()?.to_str()?.strip_prefix("step_")?.parse().ok()?;
            (p.extension()? == "ckpt").then_some((step, p))
        })
        .collect();
    out.sort();
    Ok(out)
}
