//! Command-line entry point: training, evaluation and analysis of runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use scaffolder::analysis::{
    aggregate_curves, aggregate_csv, curves_csv, normalize_score, td_report_csv, EvalCurve, ScoreSummary,
};
use scaffolder::envs::{env_spec, ENV_NAMES};
use scaffolder::harness::{
    atomic_write, list_checkpoints, parse_metrics, run_root, HarnessError, Manifest, RunConfig, Trainer,
};
use scaffolder::variants::{make_variant, VARIANT_NAMES};

#[derive(Parser)]
#[command(name = "scaffolder", version, about = "Privileged-sensor model-based RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant on an environment.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Run directory (default: `$SCAFFOLDER_RUN_ROOT/<variant>-<env>-s<seed>`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue the run in `--run-dir` from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Further overrides as `--section.key=value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Mode-action evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Must match the checkpoint's environment when given.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 15)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// TD-error probe over every checkpoint of a run; writes td_report.csv.
    AnalyzeTd {
        run_dir: PathBuf,
        #[arg(long)]
        transitions: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect evaluation curves of runs; writes curves.csv and curves_summary.csv.
    Curves {
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
    },
    /// Normalize final scores by a lower and an upper reference run.
    Normalize {
        curves: PathBuf,
        #[arg(long)]
        lower: PathBuf,
        #[arg(long)]
        upper: PathBuf,
        #[arg(long, default_value = "normalized.csv")]
        out: PathBuf,
    },
    ListVariants,
    ListEnvs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<HarnessError>())
                .map(HarnessError::exit_code)
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            variant,
            env,
            seed,
            steps,
            run_dir,
            resume,
            overrides,
        } => train(config, variant, env, seed, steps, run_dir, resume, &overrides),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
        } => eval(&checkpoint, env, episodes, seed),
        Command::AnalyzeTd {
            run_dir,
            transitions,
            seed,
        } => analyze_td(&run_dir, transitions, seed),
        Command::Curves { run_dirs, out } => curves(&run_dirs, &out),
        Command::Normalize {
            curves,
            lower,
            upper,
            out,
        } => normalize(&curves, &lower, &upper, &out),
        Command::ListVariants => {
            for name in VARIANT_NAMES {
                let v = make_variant(name)?;
                println!("{name}\timagination={:?} privileged_critic={}", v.wm_for_imagination, v.critic_privileged);
            }
            Ok(())
        }
        Command::ListEnvs => {
            for name in ENV_NAMES {
                let s = env_spec(name)?;
                println!(
                    "{name}\ttarget_dim={} privileged_dim={} max_steps={}",
                    s.target_dim, s.privileged_dim, s.max_episode_steps
                );
            }
            Ok(())
        }
    }
}

/// Split `--key=value` arguments.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, HarnessError> {
    raw.iter()
        .map(|arg| {
            let body = arg.strip_prefix("--").unwrap_or(arg);
            body.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| HarnessError::config(arg, "overrides take the form --key=value".into()))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    variant: Option<String>,
    env: Option<String>,
    seed: Option<u64>,
    steps: Option<u64>,
    run_dir: Option<PathBuf>,
    resume: bool,
    overrides: &[String],
) -> Result<()> {
    if resume {
        let dir = run_dir.context("--resume needs --run-dir")?;
        let mut trainer = Trainer::resume(&dir, None)?;
        eprintln!("resuming {} at env step {}", dir.display(), trainer.counters.env_steps);
        return finish(trainer.run()?, &dir);
    }
    let text = match &config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut pairs = Vec::new();
    if let Some(v) = variant {
        pairs.push(("run.variant".to_string(), format!("{v:?}")));
    }
    if let Some(e) = env {
        pairs.push(("run.env".to_string(), format!("{e:?}")));
    }
    if let Some(s) = seed {
        pairs.push(("run.seed".to_string(), s.to_string()));
    }
    if let Some(s) = steps {
        pairs.push(("run.steps".to_string(), s.to_string()));
    }
    pairs.extend(parse_overrides(overrides)?);
    let cfg = RunConfig::resolve(&text, &pairs)?;
    let dir = run_dir.unwrap_or_else(|| {
        run_root().join(format!("{}-{}-s{}", cfg.run.variant, cfg.run.env, cfg.run.seed))
    });
    let mut trainer = Trainer::new(cfg, Some(&dir))?;
    finish(trainer.run()?, &dir)
}

fn finish(summary: scaffolder::harness::RunSummary, dir: &Path) -> Result<()> {
    println!("run_dir\t{}", dir.display());
    println!("env_steps\t{}", summary.env_steps);
    println!("exploration_episodes\t{}", summary.exploration_episodes);
    if let Some(score) = summary.final_score() {
        println!("final_score\t{score}");
    }
    Ok(())
}

fn eval(checkpoint: &Path, env: Option<String>, episodes: usize, seed: u64) -> Result<()> {
    let mut trainer = Trainer::from_checkpoint_file(checkpoint)?;
    if let Some(env) = env {
        let spec = env_spec(&env)?;
        let own = &trainer.learner.spec;
        if spec.target_dim != own.target_dim
            || spec.privileged_dim != own.privileged_dim
            || spec.action_space != own.action_space
        {
            return Err(HarnessError::config(
                "env",
                format!("checkpoint was trained on `{}`, whose dimensions differ from `{env}`", own.name),
            )
            .into());
        }
    }
    let scores = trainer.evaluate(episodes, seed)?;
    for (i, s) in scores.iter().enumerate() {
        println!("episode {i}\t{s}");
    }
    let summary = ScoreSummary::new(&scores, None).map_err(HarnessError::from)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("mean\t{mean}");
    println!("median\t{}", summary.median);

    // Append to the run's metrics when the checkpoint sits in a run directory.
    if let Some(run_dir) = checkpoint.parent().and_then(Path::parent) {
        let metrics = run_dir.join("metrics.csv");
        if metrics.exists() {
            let step = trainer.counters.env_steps;
            let mut text = fs::read_to_string(&metrics)?;
            text.push_str(&format!("{step},eval,offline/score_mean,{mean}\n"));
            text.push_str(&format!("{step},eval,offline/score_median,{}\n", summary.median));
            atomic_write(&metrics, text.as_bytes())?;
        }
    }
    Ok(())
}

fn analyze_td(run_dir: &Path, transitions: Option<usize>, seed: u64) -> Result<()> {
    let checkpoints = list_checkpoints(run_dir).map_err(|_| empty_run(run_dir))?;
    if checkpoints.is_empty() {
        return Err(empty_run(run_dir).into());
    }
    let mut reports = Vec::new();
    for (step, path) in checkpoints {
        let mut trainer = Trainer::from_checkpoint_file(&path)?;
        if let Some(n) = transitions {
            trainer.config.probe.transitions = n;
        }
        let report = trainer.probe_report(step, seed)?;
        println!(
            "step {step}\tscaffolded_mae={:.4} target_mae={:.4} advantage={:.4}",
            report.scaffolded_mae, report.target_mae, report.advantage
        );
        reports.push(report);
    }
    let out = run_dir.join("td_report.csv");
    atomic_write(&out, td_report_csv(&reports).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn empty_run(dir: &Path) -> HarnessError {
    HarnessError::config("run_dir", format!("{} holds no checkpoints", dir.display()))
}

fn load_curve(dir: &Path) -> Result<EvalCurve> {
    let manifest = Manifest::read(dir).map_err(|_| empty_run(dir))?;
    let text = fs::read_to_string(dir.join("metrics.csv")).map_err(|_| empty_run(dir))?;
    let points = parse_metrics(&text)?
        .into_iter()
        .filter(|r| r.split == "eval" && r.key == "score")
        .map(|r| (r.step, r.value))
        .collect();
    Ok(EvalCurve {
        run: dir.display().to_string(),
        method: manifest.variant,
        seed: manifest.seed,
        points,
    })
}

fn curves(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(HarnessError::config("run_dirs", "give at least one run directory".into()).into());
    }
    let curves = run_dirs.iter().map(|d| load_curve(d)).collect::<Result<Vec<_>>>()?;
    let interval = run_dirs
        .first()
        .map(|d| Manifest::read(d).and_then(|m| m.run_config()))
        .transpose()?
        .map(|c| c.eval.every)
        .unwrap_or(0);
    atomic_write(out, curves_csv(&curves).as_bytes())?;
    let aggregate = aggregate_curves(&curves, interval).map_err(HarnessError::from)?;
    let summary_path = out.with_file_name(format!(
        "{}_summary.csv",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("curves")
    ));
    atomic_write(&summary_path, aggregate_csv(&aggregate).as_bytes())?;
    println!("wrote {} and {}", out.display(), summary_path.display());
    Ok(())
}

/// `method,seed,step,score` rows from a curves file.
fn read_curves(path: &Path) -> Result<Vec<(String, u64, u64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                bail!("malformed curves row `{line}`");
            }
            Ok((f[0].to_string(), f[1].parse()?, f[2].parse()?, f[3].parse()?))
        })
        .collect()
}

fn final_score(dir: &Path) -> Result<f64> {
    load_curve(dir)?
        .points
        .last()
        .map(|(_, s)| *s)
        .ok_or_else(|| empty_run(dir).into())
}

fn normalize(curves: &Path, lower: &Path, upper: &Path, out: &Path) -> Result<()> {
    let lo = final_score(lower)?;
    let hi = final_score(upper)?;
    let rows = read_curves(curves)?;
    let mut last: std::collections::BTreeMap<(String, u64), (u64, f64)> = Default::default();
    for (method, seed, step, score) in rows {
        let e = last.entry((method, seed)).or_insert((step, score));
        if step >= e.0 {
            *e = (step, score);
        }
    }
    let mut text = String::from("method,seed,step,score,normalized\n");
    for ((method, seed), (step, score)) in last {
        let n = normalize_score(score, lo, hi).map_err(HarnessError::from)?;
        text.push_str(&format!("{method},{seed},{step},{score},{n}\n"));
    }
    atomic_write(out, text.as_bytes())?;
    println!("lower={lo} upper={hi}; wrote {}", out.display());
    Ok(())
}
