//! Monte-Carlo ground truth, the TD-error probe, score normalization and
//! learning-curve aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{td_lambda, AgentError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("degenerate score bounds: lower = upper = {0}")]
    DegenerateBounds(f64),
    #[error("need at least one sample")]
    Empty,
    #[error("evaluation grids are misaligned: {}", runs.join(", "))]
    Misaligned { runs: Vec<String> },
    #[error("TD probe needs both scaffolded and target-side estimates: {0}")]
    MissingProbe(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// `R_t = Σ_{k≥t} γ^{k−t} r_k`, computed backward.
pub fn monte_carlo_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Model-side estimates along one real episode. Entry `t` describes the
/// transition out of visited state `t`: predicted reward and continuation
/// at the next state and the critic value of that state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReturnEstimate {
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
    pub values: Vec<f64>,
}

/// One probed episode: the true rewards and both sides' estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeEpisode {
    pub rewards: Vec<f64>,
    pub scaffolded: ReturnEstimate,
    pub target: ReturnEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdErrorReport {
    pub checkpoint_step: u64,
    pub target_mae: f64,
    pub scaffolded_mae: f64,
    pub advantage: f64,
    /// Standard error of the per-state difference of absolute errors.
    pub advantage_se: f64,
    pub n_transitions: usize,
}

impl TdErrorReport {
    pub fn new(checkpoint_step: u64, target_mae: f64, scaffolded_mae: f64, advantage_se: f64, n_transitions: usize) -> Self {
        Self {
            checkpoint_step,
            target_mae,
            scaffolded_mae,
            advantage: target_mae - scaffolded_mae,
            advantage_se,
            n_transitions,
        }
    }
}

/// Compare both sides' λ-returns to the Monte-Carlo return at every visited state.
pub fn td_error_probe(
    checkpoint_step: u64,
    episodes: &[ProbeEpisode],
    gamma: f64,
    lambda: f64,
) -> Result<TdErrorReport, AnalysisError> {
    let mut diffs = Vec::new();
    let (mut t_sum, mut s_sum) = (0.0, 0.0);
    for ep in episodes {
        if ep.rewards.is_empty() {
            continue;
        }
        let truth = monte_carlo_returns(&ep.rewards, gamma);
        let est = |e: &ReturnEstimate| td_lambda(&e.rewards, &e.continues, &e.values, gamma, lambda);
        let s = est(&ep.scaffolded)?;
        let t = est(&ep.target)?;
        if s.len() != truth.len() || t.len() != truth.len() {
            return Err(AnalysisError::Agent(AgentError::LengthMismatch {
                rewards: truth.len(),
                continues: s.len(),
                values: t.len(),
            }));
        }
        for k in 0..truth.len() {
            let te = (t[k] - truth[k]).abs();
            let se = (s[k] - truth[k]).abs();
            t_sum += te;
            s_sum += se;
            diffs.push(te - se);
        }
    }
    let n = diffs.len();
    if n == 0 {
        return Err(AnalysisError::Empty);
    }
    let se = standard_error(&diffs).unwrap_or(0.0);
    Ok(TdErrorReport::new(checkpoint_step, t_sum / n as f64, s_sum / n as f64, se, n))
}

/// `(raw − lower) / (upper − lower)`, unclamped.
pub fn normalize_score(raw: f64, lower: f64, upper: f64) -> Result<f64, AnalysisError> {
    if upper == lower {
        return Err(AnalysisError::DegenerateBounds(lower));
    }
    Ok((raw - lower) / (upper - lower))
}

pub fn median(values: &[f64]) -> Result<f64, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Sample standard deviation over `√n`; absent for fewer than two values.
pub fn standard_error(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub scores: Vec<f64>,
    pub median: f64,
    pub standard_error: Option<f64>,
    pub normalized_median: Option<f64>,
}

impl ScoreSummary {
    pub fn new(scores: &[f64], bounds: Option<(f64, f64)>) -> Result<Self, AnalysisError> {
        let m = median(scores)?;
        let normalized_median = match bounds {
            Some((lo, hi)) => Some(normalize_score(m, lo, hi)?),
            None => None,
        };
        Ok(Self {
            scores: scores.to_vec(),
            median: m,
            standard_error: standard_error(scores),
            normalized_median,
        })
    }

    /// `[median − SE, median + SE]`, collapsing to the median without an SE.
    pub fn band(&self) -> (f64, f64) {
        let se = self.standard_error.unwrap_or(0.0);
        (self.median - se, self.median + se)
    }
}

/// One evaluation curve: `(step, score)` pairs for a method and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub points: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub median: f64,
    pub standard_error: Option<f64>,
    pub seeds: usize,
}

/// Per-method median and SE at every evaluation step. All runs of a method
/// must share the grid, and every grid point must be a multiple of
/// `eval_interval` (steps are compared after rounding down to the grid).
pub fn aggregate_curves(curves: &[EvalCurve], eval_interval: u64) -> Result<BTreeMap<String, Vec<CurvePoint>>, AnalysisError> {
    let mut by_method: BTreeMap<&str, Vec<&EvalCurve>> = BTreeMap::new();
    for c in curves {
        by_method.entry(&c.method).or_default().push(c);
    }
    let grid_of = |c: &EvalCurve| -> Vec<u64> {
        c.points
            .iter()
            .map(|(s, _)| if eval_interval > 0 { s / eval_interval * eval_interval } else { *s })
            .collect()
    };
    let mut out = BTreeMap::new();
    for (method, runs) in by_method {
        let reference = grid_of(runs[0]);
        let bad: Vec<String> = runs
            .iter()
            .filter(|c| grid_of(c) != reference)
            .map(|c| c.run.clone())
            .collect();
        if !bad.is_empty() {
            return Err(AnalysisError::Misaligned { runs: bad });
        }
        let series = reference
            .iter()
            .enumerate()
            .map(|(i, &step)| {
                let vals: Vec<f64> = runs.iter().map(|c| c.points[i].1).collect();
                Ok(CurvePoint {
                    step,
                    median: median(&vals)?,
                    standard_error: standard_error(&vals),
                    seeds: vals.len(),
                })
            })
            .collect::<Result<Vec<_>, AnalysisError>>()?;
        out.insert(method.to_string(), series);
    }
    Ok(out)
}

/// `method,seed,step,score` rows.
pub fn curves_csv(curves: &[EvalCurve]) -> String {
    let mut s = String::from("method,seed,step,score\n");
    for c in curves {
        for (step, score) in &c.points {
            let _ = writeln!(s, "{},{},{},{}", c.method, c.seed, step, score);
        }
    }
    s
}

/// `method,step,median,se,seeds` rows; a missing SE is left empty.
pub fn aggregate_csv(agg: &BTreeMap<String, Vec<CurvePoint>>) -> String {
    let mut s = String::from("method,step,median,se,seeds\n");
    for (method, points) in agg {
        for p in points {
            let se = p.standard_error.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", method, p.step, p.median, se, p.seeds);
        }
    }
    s
}

/// `step,target_mae,scaffolded_mae,advantage,n` rows.
pub fn td_report_csv(reports: &[TdErrorReport]) -> String {
    let mut s = String::from("step,target_mae,scaffolded_mae,advantage,n\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.checkpoint_step, r.target_mae, r.scaffolded_mae, r.advantage, r.n_transitions
        );
    }
    s
}
