//! Balanced mixture of SuperNets.
//!
//! `M` independent weight sets share the training budget. For every
//! (configuration `c`, model `m`) pair the controller keeps an exponential
//! moving average `a[c][m]` of validation-minibatch accuracy. A temperature
//! softmax over the whole `C x M` table gives a joint distribution `p(c, m)`,
//! which is then rescaled with iterative proportional fitting (IPF) until
//! both marginals are uniform. Training samples `c` uniformly and routes it
//! to a model drawn from `p(m | c)`; as the temperature falls each
//! configuration settles on the weight set that serves it best, while every
//! weight set keeps receiving an equal share of iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

/// Exponents below this are clamped so that every joint entry stays a
/// positive normal `f64` (exp(-700) ~ 1e-304).
const LOG_FLOOR: f64 = -700.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidParameter(
                "matrix rows must be non-empty and of equal length".into(),
            ));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// Hyper-parameters of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureParams {
    /// EMA smoothing of the accuracy table.
    pub beta: f64,
    pub tau_init: f64,
    /// Floor of the temperature schedule; `None` means `1 / (100 M)`.
    pub tau_min: Option<f64>,
    /// KL threshold (nats) on the model marginal that stops IPF.
    pub delta: f64,
    pub max_ipf_iters: usize,
    /// Initial value of every accuracy-table entry.
    pub init_acc: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            beta: 0.9,
            tau_init: 1.0,
            tau_min: None,
            delta: 1e-4,
            max_ipf_iters: 10_000,
            init_acc: 0.5,
        }
    }
}

/// Mutable controller state: accuracy table, visit counts and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    ema_acc: Matrix,
    visit_counts: Vec<u64>,
    beta: f64,
    num_configs: usize,
    num_models: usize,
    step: u64,
    total_steps: u64,
    tau_init: f64,
    tau_min: f64,
}

impl MixtureState {
    pub fn new(
        num_configs: usize,
        num_models: usize,
        total_steps: u64,
        params: &MixtureParams,
    ) -> Result<Self> {
        if num_configs == 0 || num_models == 0 {
            return Err(Error::InvalidParameter(
                "need at least one configuration and one model".into(),
            ));
        }
        if !(0.0..1.0).contains(&params.beta) && params.beta != 1.0 {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in [0, 1], got {}",
                params.beta
            )));
        }
        if !(0.0..=1.0).contains(&params.init_acc) {
            return Err(Error::AccuracyRange(params.init_acc));
        }
        let tau_min = params.tau_min.unwrap_or(1.0 / (100.0 * num_models as f64));
        for t in [params.tau_init, tau_min] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Temperature(t));
            }
        }
        if tau_min > params.tau_init {
            return Err(Error::InvalidParameter(format!(
                "tau_min {tau_min} exceeds tau_init {}",
                params.tau_init
            )));
        }
        Ok(Self {
            ema_acc: Matrix::filled(num_configs, num_models, params.init_acc),
            visit_counts: vec![0; num_configs * num_models],
            beta: params.beta,
            num_configs,
            num_models,
            step: 0,
            total_steps,
            tau_init: params.tau_init,
            tau_min,
        })
    }

    pub fn ema_acc(&self) -> &Matrix {
        &self.ema_acc
    }

    pub fn visits(&self, config: usize, model: usize) -> u64 {
        self.visit_counts[config * self.num_models + model]
    }

    pub fn config_visits(&self, config: usize) -> u64 {
        (0..self.num_models).map(|m| self.visits(config, m)).sum()
    }

    pub fn num_configs(&self) -> usize {
        self.num_configs
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    /// `a[c][m] <- beta a[c][m] + (1 - beta) acc`; also bumps the visit count
    /// of the pair and the global step.
    pub fn update_accuracy(&mut self, config: usize, model: usize, acc: f64) -> Result<()> {
        self.check_pair(config, model)?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::AccuracyRange(acc));
        }
        let old = self.ema_acc.get(config, model);
        let new = self.beta * old + (1.0 - self.beta) * acc;
        self.ema_acc.set(config, model, new.clamp(0.0, 1.0));
        self.visit_counts[config * self.num_models + model] += 1;
        self.step += 1;
        Ok(())
    }

    /// Linear decay from `tau_init` at step 0 to `tau_min` at `total_steps`,
    /// constant afterwards.
    pub fn temperature_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.tau_min;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.tau_init + (self.tau_min - self.tau_init) * frac
    }

    /// Balanced joint distribution at the current step's temperature.
    pub fn balanced_joint(&self, params: &MixtureParams) -> Result<JointDistribution> {
        let tau = self.temperature_at(self.step);
        let joint = joint_from_accuracies(&self.ema_acc, tau)?;
        balance_ipf(&joint, params.delta, params.max_ipf_iters)
    }

    fn check_pair(&self, config: usize, model: usize) -> Result<()> {
        if config >= self.num_configs {
            return Err(Error::IndexOutOfRange {
                name: "config",
                index: config,
                len: self.num_configs,
            });
        }
        if model >= self.num_models {
            return Err(Error::IndexOutOfRange {
                name: "model",
                index: model,
                len: self.num_models,
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, fingerprint: &str, params: &MixtureParams) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            fingerprint: fingerprint.to_string(),
            num_configs: self.num_configs,
            num_models: self.num_models,
            beta: self.beta,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            delta: params.delta,
            max_ipf_iters: params.max_ipf_iters,
            step: self.step,
            total_steps: self.total_steps,
            ema_acc: self.ema_acc.to_rows(),
            visit_counts: self
                .visit_counts
                .chunks(self.num_models)
                .map(<[u64]>::to_vec)
                .collect(),
        }
    }

    /// Restores a state saved by [`to_checkpoint`](Self::to_checkpoint);
    /// the fingerprint must match the current search space.
    pub fn from_checkpoint(ck: &Checkpoint, fingerprint: &str) -> Result<(Self, MixtureParams)> {
        if ck.version != Checkpoint::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {})",
                ck.version,
                Checkpoint::VERSION
            )));
        }
        if ck.fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "search space mismatch: checkpoint {} vs current {}",
                ck.fingerprint, fingerprint
            )));
        }
        let ema_acc = Matrix::from_rows(&ck.ema_acc)?;
        if ema_acc.rows() != ck.num_configs || ema_acc.cols() != ck.num_models {
            return Err(Error::Checkpoint("accuracy table shape mismatch".into()));
        }
        if ck.visit_counts.len() != ck.num_configs
            || ck.visit_counts.iter().any(|r| r.len() != ck.num_models)
        {
            return Err(Error::Checkpoint("visit count shape mismatch".into()));
        }
        let visit_counts = ck.visit_counts.concat();
        if visit_counts.iter().sum::<u64>() != ck.step {
            return Err(Error::Checkpoint("visit counts do not sum to step".into()));
        }
        let params = MixtureParams {
            beta: ck.beta,
            tau_init: ck.tau_init,
            tau_min: Some(ck.tau_min),
            delta: ck.delta,
            max_ipf_iters: ck.max_ipf_iters,
            init_acc: 0.5,
        };
        Ok((
            Self {
                ema_acc,
                visit_counts,
                beta: ck.beta,
                num_configs: ck.num_configs,
                num_models: ck.num_models,
                step: ck.step,
                total_steps: ck.total_steps,
                tau_init: ck.tau_init,
                tau_min: ck.tau_min,
            },
            params,
        ))
    }
}

/// Serialized controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub num_configs: usize,
    pub num_models: usize,
    pub beta: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub delta: f64,
    pub max_ipf_iters: usize,
    pub step: u64,
    pub total_steps: u64,
    pub ema_acc: Vec<Vec<f64>>,
    pub visit_counts: Vec<Vec<u64>>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// `C x M` joint probability table `p(c, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    probs: Matrix,
}

impl JointDistribution {
    /// Wraps a positive matrix, normalising it to unit mass.
    pub fn from_matrix(mut probs: Matrix) -> Result<Self> {
        check_positive(&probs)?;
        let total = probs.sum();
        probs.data.iter_mut().for_each(|p| *p /= total);
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn num_configs(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_models(&self) -> usize {
        self.probs.cols()
    }

    pub fn get(&self, config: usize, model: usize) -> f64 {
        self.probs.get(config, model)
    }

    pub fn config_marginal(&self) -> Vec<f64> {
        self.probs.row_sums()
    }

    pub fn model_marginal(&self) -> Vec<f64> {
        self.probs.col_sums()
    }

    /// `p(m | c) = p(c, m) / sum_k p(c, k)`.
    pub fn conditional_model_dist(&self, config: usize) -> Vec<f64> {
        let row = self.probs.row(config);
        let total: f64 = row.iter().sum();
        row.iter().map(|p| p / total).collect()
    }

    /// Model with the highest `p(m | c)`; ties go to the lowest index.
    pub fn best_model(&self, config: usize) -> usize {
        argmax(self.probs.row(config))
    }

    /// Mean over configurations of the entropy (nats) of `p(m | c)`.
    pub fn mean_conditional_entropy(&self) -> f64 {
        let c = self.num_configs();
        (0..c)
            .map(|i| entropy(&self.conditional_model_dist(i)))
            .sum::<f64>()
            / c as f64
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `KL(p || uniform)` in nats.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * n).ln())
        .sum()
}

fn check_positive(m: &Matrix) -> Result<()> {
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveEntry {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Temperature softmax over the whole accuracy table:
/// `p(c, m) = exp(a[c][m] / tau) / sum exp(a / tau)`, stabilised by
/// subtracting the table maximum.
pub fn joint_from_accuracies(ema_acc: &Matrix, tau: f64) -> Result<JointDistribution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Temperature(tau));
    }
    if ema_acc.as_slice().iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidParameter(
            "accuracy table has non-finite entries".into(),
        ));
    }
    let max = ema_acc
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = ema_acc.clone();
    let mut total = 0.0;
    for p in probs.data.iter_mut() {
        *p = ((*p - max) / tau).max(LOG_FLOOR).exp();
        total += *p;
    }
    probs.data.iter_mut().for_each(|p| *p /= total);
    Ok(JointDistribution { probs })
}

/// Rescales `joint` to uniform marginals with iterative proportional fitting.
///
/// One iteration normalises every model column to mass `1/M` and then every
/// configuration row to `1/C`. After each iteration the KL divergence of the
/// model marginal from uniform is measured, and iteration stops once it is
/// below `delta`. The configuration marginal is exact at that point because
/// the row pass runs last. Scaling rows and columns leaves every cross-ratio
/// `p(c,m) p(c',m') / (p(c,m') p(c',m))` unchanged.
pub fn balance_ipf(
    joint: &JointDistribution,
    delta: f64,
    max_iters: usize,
) -> Result<JointDistribution> {
    check_positive(&joint.probs)?;
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "KL threshold must be positive, got {delta}"
        )));
    }
    let mut p = joint.probs.clone();
    let (rows, cols) = (p.rows(), p.cols());
    let row_target = 1.0 / rows as f64;
    let col_target = 1.0 / cols as f64;
    let mut kl = f64::INFINITY;
    let mut col_scale = vec![0.0; cols];
    for _ in 0..max_iters {
        for (s, sum) in col_scale.iter_mut().zip(p.col_sums()) {
            *s = col_target / sum;
        }
        for r in 0..rows {
            let row = p.row_mut(r);
            for (v, s) in row.iter_mut().zip(&col_scale) {
                *v *= s;
            }
            let sum: f64 = row.iter().sum();
            let s = row_target / sum;
            row.iter_mut().for_each(|v| *v *= s);
        }
        kl = kl_to_uniform(&p.col_sums());
        if kl < delta {
            let total = p.sum();
            p.data.iter_mut().for_each(|v| *v /= total);
            return Ok(JointDistribution { probs: p });
        }
    }
    Err(Error::IpfNotConverged {
        iters: max_iters,
        kl,
    })
}

/// Random streams for drawing (configuration, model) pairs.
///
/// Configurations and models come from separate substreams, so the
/// configuration sequence depends only on the seed and never on the number
/// of models; with `M = 1` it is exactly the uniform single-path sequence.
#[derive(Debug, Clone)]
pub struct PairSampler {
    config_rng: Stream,
    model_rng: Stream,
}

impl PairSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            config_rng: Stream::new(seed, Purpose::ConfigSampling),
            model_rng: Stream::new(seed, Purpose::ModelSampling),
        }
    }

    /// Uniform `c`, then `m ~ p(m | c)`.
    pub fn sample_pair(&mut self, joint: &JointDistribution) -> (usize, usize) {
        let c = self.config_rng.index(joint.num_configs());
        let m = self.model_rng.categorical(joint.probs.row(c));
        (c, m)
    }
}

/// How [`select_candidates`] scores each configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Evaluate each configuration with its most probable model.
    Full,
    /// Rank by the accuracy table entry of the most probable pair; no
    /// re-evaluation. Meant for spaces too large to evaluate exhaustively.
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: usize,
    pub model: usize,
    pub score: f64,
}

/// Ranks configurations after training and keeps the best `k`.
///
/// Output is sorted by descending score, ties broken by configuration id.
/// In full mode `evaluate(c, m)` is called once per configuration with its
/// best model; failures are reported with the offending pair.
pub fn select_candidates<E>(
    state: &MixtureState,
    joint: &JointDistribution,
    k: usize,
    mode: SelectionMode,
    mut evaluate: E,
) -> Result<Vec<Candidate>>
where
    E: FnMut(usize, usize) -> Result<f64>,
{
    let c_total = joint.num_configs();
    if k > c_total {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds the {c_total} configurations"
        )));
    }
    if state.num_configs() != c_total || state.num_models() != joint.num_models() {
        return Err(Error::InvalidParameter(
            "state and joint distribution shapes differ".into(),
        ));
    }
    let mut out = Vec::with_capacity(c_total);
    for c in 0..c_total {
        let m = joint.best_model(c);
        let score = match mode {
            SelectionMode::Full => evaluate(c, m).map_err(|e| Error::Evaluation {
                config: c,
                model: m,
                reason: e.to_string(),
            })?,
            SelectionMode::Proxy => state.ema_acc().get(c, m),
        };
        out.push(Candidate {
            config: c,
            model: m,
            score,
        });
    }
    sort_candidates(&mut out);
    out.truncate(k);
    Ok(out)
}

/// Descending score, ascending configuration id on ties.
pub fn sort_candidates(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.config.cmp(&b.config))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(c: usize, m: usize, total: u64) -> MixtureState {
        MixtureState::new(c, m, total, &MixtureParams::default()).unwrap()
    }

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn update_examples() {
        let p = MixtureParams {
            init_acc: 0.0,
            ..MixtureParams::default()
        };
        let mut s = MixtureState::new(2, 2, 10, &p).unwrap();
        s.update_accuracy(0, 1, 1.0).unwrap();
        assert!(approx(s.ema_acc().get(0, 1), 0.1, 1e-15));
        assert_eq!(s.ema_acc().get(0, 0), 0.0);
        assert_eq!(s.visits(0, 1), 1);
        assert_eq!(s.step(), 1);

        let p = MixtureParams {
            beta: 1.0,
            ..MixtureParams::default()
        };
        let mut s = MixtureState::new(1, 1, 10, &p).unwrap();
        s.update_accuracy(0, 0, 0.0).unwrap();
        assert_eq!(s.ema_acc().get(0, 0), 0.5);

        let p = MixtureParams {
            init_acc: 0.8,
            ..MixtureParams::default()
        };
        let mut s = MixtureState::new(1, 1, 10, &p).unwrap();
        s.update_accuracy(0, 0, 0.9).unwrap();
        assert!(approx(s.ema_acc().get(0, 0), 0.81, 1e-15));
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut s = state(2, 2, 10);
        assert_eq!(s.update_accuracy(0, 0, 1.5), Err(Error::AccuracyRange(1.5)));
        assert_eq!(
            s.update_accuracy(0, 0, -0.1),
            Err(Error::AccuracyRange(-0.1))
        );
        assert!(s.update_accuracy(2, 0, 0.5).is_err());
        assert!(s.update_accuracy(0, 2, 0.5).is_err());
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn joint_examples() {
        let uniform = Matrix::filled(3, 2, 0.7);
        for tau in [1e-3, 0.5, 10.0] {
            let j = joint_from_accuracies(&uniform, tau).unwrap();
            for &p in j.probs().as_slice() {
                assert!(approx(p, 1.0 / 6.0, 1e-15));
            }
        }
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let j = joint_from_accuracies(&a, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!(approx(j.get(0, 0), e / (e + 3.0), 1e-12));
        assert!(approx(j.get(0, 1), 1.0 / (e + 3.0), 1e-12));
        assert!(approx(j.get(0, 0), 0.4754, 1e-4));
        assert!(approx(j.get(1, 1), 0.1749, 1e-4));
        let j = joint_from_accuracies(&a, 0.01).unwrap();
        assert!(j.get(0, 0) > 0.999);
        assert!(joint_from_accuracies(&a, 0.0).is_err());
        assert!(joint_from_accuracies(&a, -1.0).is_err());
    }

    #[test]
    fn joint_stays_positive_at_tiny_temperature() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let j = joint_from_accuracies(&a, 1e-4).unwrap();
        assert!(j.probs().as_slice().iter().all(|&p| p > 0.0));
        assert!(approx(j.probs().sum(), 1.0, 1e-12));
    }

    #[test]
    fn ipf_fixed_point() {
        let m = Matrix::filled(2, 2, 0.25);
        let j = JointDistribution::from_matrix(m.clone()).unwrap();
        let b = balance_ipf(&j, 1e-4, 100).unwrap();
        assert_eq!(b.probs(), &m);
    }

    #[test]
    fn ipf_two_by_two_closed_form() {
        // Both marginals 1/2 and cross-ratio 0.4*0.3/(0.1*0.2) = 6 force
        // [[x, 1/2 - x], [1/2 - x, x]] with x / (1/2 - x) = sqrt(6).
        let m = Matrix::from_rows(&[vec![0.4, 0.1], vec![0.2, 0.3]]).unwrap();
        let j = JointDistribution::from_matrix(m).unwrap();
        // KL ~ dev^2, so delta = 1e-15 pins entries to ~1e-7
        let b = balance_ipf(&j, 1e-15, 10_000).unwrap();
        let s6 = 6f64.sqrt();
        let x = 0.5 * s6 / (1.0 + s6);
        assert!(approx(b.get(0, 0), x, 1e-6));
        assert!(approx(b.get(1, 1), x, 1e-6));
        assert!(approx(b.get(0, 1), 0.5 - x, 1e-6));
        let cr = b.get(0, 0) * b.get(1, 1) / (b.get(0, 1) * b.get(1, 0));
        assert!(approx(cr, 6.0, 1e-9));
    }

    #[test]
    fn ipf_rejects_zero_entries() {
        let m = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.25, 0.25]]).unwrap();
        assert!(matches!(
            JointDistribution::from_matrix(m.clone()),
            Err(Error::NonPositiveEntry { row: 0, col: 1, .. })
        ));
        let j = JointDistribution { probs: m };
        assert!(matches!(
            balance_ipf(&j, 1e-4, 100),
            Err(Error::NonPositiveEntry { .. })
        ));
    }

    #[test]
    fn ipf_reports_non_convergence() {
        let m = Matrix::from_rows(&[vec![0.7, 0.1], vec![0.1, 0.1]]).unwrap();
        let j = JointDistribution::from_matrix(m).unwrap();
        match balance_ipf(&j, 1e-300, 3) {
            Err(Error::IpfNotConverged { iters: 3, kl }) => assert!(kl > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conditional_examples() {
        let j = JointDistribution::from_matrix(Matrix::filled(3, 4, 1.0)).unwrap();
        for c in 0..3 {
            for p in j.conditional_model_dist(c) {
                assert!(approx(p, 0.25, 1e-15));
            }
        }
        let j = JointDistribution::from_matrix(
            Matrix::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.3]]).unwrap(),
        )
        .unwrap();
        let d = j.conditional_model_dist(0);
        assert!(approx(d[0], 0.75, 1e-15) && approx(d[1], 0.25, 1e-15));
        let j = JointDistribution::from_matrix(Matrix::filled(5, 1, 0.2)).unwrap();
        assert_eq!(j.conditional_model_dist(3), vec![1.0]);
    }

    #[test]
    fn temperature_schedule() {
        let s = state(36, 4, 1000);
        assert_eq!(s.temperature_at(0), 1.0);
        assert!(approx(s.temperature_at(1000), 0.0025, 1e-15));
        assert!(approx(s.temperature_at(500), 0.50125, 1e-15));
        assert!(approx(s.temperature_at(5000), 0.0025, 1e-15));
        let t: Vec<f64> = (0..=1000)
            .step_by(50)
            .map(|i| s.temperature_at(i))
            .collect();
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sampler_with_degenerate_conditional() {
        let eps = 1e-10;
        let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![1.0 - eps, eps]).collect();
        let j = JointDistribution::from_matrix(Matrix::from_rows(&rows).unwrap()).unwrap();
        let mut s = PairSampler::new(5);
        for _ in 0..10_000 {
            assert_eq!(s.sample_pair(&j).1, 0);
        }
    }

    #[test]
    fn select_uniform_is_id_order() {
        let s = state(5, 3, 10);
        let j = s.balanced_joint(&MixtureParams::default()).unwrap();
        let full = select_candidates(&s, &j, 5, SelectionMode::Full, |_, _| Ok(0.5)).unwrap();
        assert_eq!(
            full.iter().map(|c| c.config).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(full.iter().all(|c| c.model == 0));
        let proxy =
            select_candidates(&s, &j, 3, SelectionMode::Proxy, |_, _| unreachable!()).unwrap();
        assert_eq!(
            proxy.iter().map(|c| c.config).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn select_proxy_dominant_entry() {
        let mut s = state(6, 3, 100);
        // drive a single pair well above the rest
        for _ in 0..50 {
            s.update_accuracy(4, 2, 1.0).unwrap();
        }
        let j = s.balanced_joint(&MixtureParams::default()).unwrap();
        let top =
            select_candidates(&s, &j, 1, SelectionMode::Proxy, |_, _| unreachable!()).unwrap();
        assert_eq!(top[0].config, 4);
        assert_eq!(top[0].model, 2);
    }

    #[test]
    fn select_propagates_failures() {
        let s = state(3, 2, 10);
        let j = s.balanced_joint(&MixtureParams::default()).unwrap();
        let err = select_candidates(&s, &j, 3, SelectionMode::Full, |c, _| {
            if c == 1 {
                Err(Error::InvalidParameter("boom".into()))
            } else {
                Ok(0.3)
            }
        })
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Evaluation {
                config: 1,
                model: 0,
                ..
            }
        ));
        assert!(select_candidates(&s, &j, 4, SelectionMode::Proxy, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let params = MixtureParams::default();
        let mut s = state(4, 2, 100);
        s.update_accuracy(1, 1, 0.77).unwrap();
        s.update_accuracy(3, 0, 0.1).unwrap();
        let ck = s.to_checkpoint("space-a", &params);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        let (restored, _) = MixtureState::from_checkpoint(&back, "space-a").unwrap();
        assert_eq!(restored, s);
        assert!(MixtureState::from_checkpoint(&back, "space-b").is_err());
        let mut bad = back.clone();
        bad.version = 99;
        assert!(MixtureState::from_checkpoint(&bad, "space-a").is_err());
    }
}
