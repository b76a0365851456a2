//! Final report: rankings, visit counts, the entropy trajectory of
//! `p(m | c)` and scatter data. Contains nothing time-dependent, so equal
//! runs give byte-identical documents.

use poolmix::mixture::{sort_candidates, Candidate, MixtureState};
use poolmix::search_space::Catalog;
use poolmix::surrogate::{kendall_tau, BenchmarkTable};
use poolmix::PoolingConfig;
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::records::RunRecord;

/// Entropy samples taken over a run.
pub const ENTROPY_POINTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub rank: usize,
    pub config: PoolingConfig,
    pub config_id: usize,
    pub best_model: usize,
    pub score: f64,
    pub visits: u64,
    pub visits_per_model: Vec<u64>,
    pub unvisited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub step: u64,
    pub tau: f64,
    /// Mean over configurations of `H(p(m | c))`, in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub config: PoolingConfig,
    pub estimated: Option<f64>,
    pub proxy: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub backend: BackendKind,
    pub seed: u64,
    pub models: usize,
    pub space: String,
    pub steps: u64,
    pub selected: RankedConfig,
    pub top_k: Vec<RankedConfig>,
    /// Full-evaluation ranking when one was run, otherwise the proxy ranking.
    pub ranking: Vec<RankedConfig>,
    pub proxy_ranking: Vec<RankedConfig>,
    pub kendall_tau: Option<f64>,
    pub proxy_kendall_tau: Option<f64>,
    pub entropy_trajectory: Vec<EntropyPoint>,
    pub scatter: Vec<ScatterPoint>,
    /// Mean pairwise distance between weight-set histories (surrogate only).
    pub history_diversity: Option<f64>,
}

/// Scores from the post-training evaluation of every configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEvaluation {
    pub scores: Vec<Candidate>,
    /// Method-specific pick overriding the top of the ranking.
    pub selected: Option<usize>,
}

struct Replay {
    ema: Vec<f64>,
    best_model: Vec<usize>,
    entropy: Vec<EntropyPoint>,
}

/// Rebuilds the accuracy table from the records. Baselines collapse onto a
/// single model row per configuration.
fn replay(cfg: &ExperimentConfig, n: usize, records: &[RunRecord], steps: u64) -> Result<Replay> {
    let balanced = cfg.method == Method::Balanced;
    let m = if balanced { cfg.models } else { 1 };
    let params = cfg.mixture_params();
    let mut state = MixtureState::new(n, m, steps, &params)?;
    let stride = (steps / ENTROPY_POINTS).max(1);
    let mut entropy = Vec::new();
    let mut sample = |state: &MixtureState| -> Result<()> {
        if balanced && m > 1 {
            let joint = state.balanced_joint(&params)?;
            entropy.push(EntropyPoint {
                step: state.step(),
                tau: state.temperature_at(state.step()),
                entropy: joint.mean_conditional_entropy(),
            });
        }
        Ok(())
    };
    sample(&state)?;
    for r in records {
        let model = if balanced { r.model } else { 0 };
        state.update_accuracy(r.config_id, model, r.accuracy)?;
        if state.step() % stride == 0 || state.step() == records.len() as u64 {
            sample(&state)?;
        }
    }
    let best_model = match cfg.method {
        Method::Balanced => {
            let joint = state.balanced_joint(&params)?;
            (0..n).map(|c| joint.best_model(c)).collect()
        }
        Method::Bruteforce => (0..n).collect(),
        _ => vec![0; n],
    };
    let ema = (0..n)
        .map(|c| state.ema_acc().get(c, best_model[c].min(m - 1)))
        .collect();
    Ok(Replay {
        ema,
        best_model,
        entropy,
    })
}

fn rank(catalog: &Catalog, mut cands: Vec<Candidate>, visits: &[Vec<u64>]) -> Vec<RankedConfig> {
    sort_candidates(&mut cands);
    // unvisited configurations go last, keeping score order among them
    cands.sort_by_key(|c| visits[c.config].iter().sum::<u64>() == 0);
    cands
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let v: u64 = visits[c.config].iter().sum();
            RankedConfig {
                rank: i + 1,
                config: catalog.config(c.config).clone(),
                config_id: c.config,
                best_model: c.model,
                score: c.score,
                visits: v,
                visits_per_model: visits[c.config].clone(),
                unvisited: v == 0,
            }
        })
        .collect()
}

fn tau_against(table: Option<&BenchmarkTable>, scores: &[f64]) -> Option<f64> {
    table.and_then(|t| kendall_tau(scores, &t.means()).ok())
}

/// Builds the report from a finished run. `eval` carries the full
/// evaluation scores when one was run; `table` enables the rank
/// correlations and the ground-truth column of the scatter data.
pub fn rank_and_report(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    records: &[RunRecord],
    eval: Option<&FinalEvaluation>,
    table: Option<&BenchmarkTable>,
) -> Result<Report> {
    let n = catalog.len();
    if let Some(t) = table {
        if t.catalog().configs() != catalog.configs() {
            return Err(HarnessError::Data(
                "benchmark table covers a different space".into(),
            ));
        }
    }
    let models = cfg.backend_models(n);
    let mut visits = vec![vec![0u64; models]; n];
    for r in records {
        if r.config_id >= n || r.model >= models {
            return Err(HarnessError::Data(format!(
                "record at step {} names pair ({}, {}) outside {n} x {models}",
                r.step, r.config_id, r.model
            )));
        }
        visits[r.config_id][r.model] += 1;
    }
    let steps = cfg.total_steps(n) as u64;
    let rep = replay(cfg, n, records, steps)?;

    let proxy_cands: Vec<Candidate> = (0..n)
        .map(|c| Candidate {
            config: c,
            model: rep.best_model[c],
            score: rep.ema[c],
        })
        .collect();
    let proxy_ranking = rank(catalog, proxy_cands, &visits);

    let mut full_scores: Option<Vec<f64>> = None;
    if let Some(e) = eval {
        let mut s = vec![f64::NAN; n];
        for c in &e.scores {
            s[c.config] = c.score;
        }
        if s.iter().any(|v| v.is_nan()) {
            return Err(HarnessError::Data(
                "full evaluation misses configurations".into(),
            ));
        }
        full_scores = Some(s);
    }
    let ranking = match eval {
        Some(e) => rank(catalog, e.scores.clone(), &visits),
        None => proxy_ranking.clone(),
    };
    let selected = eval
        .and_then(|e| e.selected)
        .and_then(|id| ranking.iter().find(|r| r.config_id == id))
        .unwrap_or(&ranking[0])
        .clone();
    let top_k = ranking.iter().take(cfg.top_k.min(n)).cloned().collect();

    let scatter = (0..n)
        .map(|c| ScatterPoint {
            config: catalog.config(c).clone(),
            estimated: full_scores.as_ref().map(|s| s[c]),
            proxy: rep.ema[c],
            truth: table.map(|t| t.mean(c)),
        })
        .collect();

    Ok(Report {
        method: cfg.method,
        backend: cfg.backend,
        seed: cfg.seed,
        models,
        space: catalog.space().fingerprint(),
        steps: records.len() as u64,
        selected,
        top_k,
        kendall_tau: full_scores.as_deref().and_then(|s| tau_against(table, s)),
        proxy_kendall_tau: tau_against(table, &rep.ema),
        ranking,
        proxy_ranking,
        entropy_trajectory: rep.entropy,
        scatter,
        history_diversity: None,
    })
}
