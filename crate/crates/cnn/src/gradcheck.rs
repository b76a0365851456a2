//! Central finite-difference checks of analytic gradients.

use poolmix::rng::Stream;

/// A scalar function of a flat parameter vector with an analytic gradient.
///
/// `value` also returns a signature of the non-differentiable choices made
/// at `theta` (ReLU masks, max-pool winners). Coordinates whose perturbation
/// changes the signature straddle a kink and are excluded from the check.
pub trait Objective {
    fn point(&self) -> &[f64];
    fn value(&mut self, theta: &[f64]) -> (f64, u64);
    fn gradient(&mut self, theta: &[f64]) -> Vec<f64>;
}

/// [`Objective`] built from two closures.
pub struct FnObjective<V, G> {
    theta: Vec<f64>,
    value: V,
    gradient: G,
}

impl<V, G> FnObjective<V, G>
where
    V: FnMut(&[f64]) -> (f64, u64),
    G: FnMut(&[f64]) -> Vec<f64>,
{
    pub fn new(theta: Vec<f64>, value: V, gradient: G) -> Self {
        Self {
            theta,
            value,
            gradient,
        }
    }
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&[f64]) -> (f64, u64),
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn point(&self) -> &[f64] {
        &self.theta
    }

    fn value(&mut self, theta: &[f64]) -> (f64, u64) {
        (self.value)(theta)
    }

    fn gradient(&mut self, theta: &[f64]) -> Vec<f64> {
        (self.gradient)(theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates excluded because a perturbation crossed a kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with `(f(θ+ε) - f(θ-ε)) / 2ε` on every
/// coordinate, or on `max_coords` of them drawn without replacement.
pub fn check_objective<O: Objective>(
    mut obj: O,
    epsilon: f64,
    max_coords: usize,
    rng: &mut Stream,
) -> GradCheckReport {
    let theta = obj.point().to_vec();
    let analytic = obj.gradient(&theta);
    assert_eq!(analytic.len(), theta.len(), "gradient length");
    let (_, base_sig) = obj.value(&theta);
    let mut coords: Vec<usize> = (0..theta.len()).collect();
    if coords.len() > max_coords {
        for i in 0..max_coords {
            let j = i + rng.index(coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = theta.clone();
    for &i in &coords {
        probe[i] = theta[i] + epsilon;
        let (fp, sp) = obj.value(&probe);
        probe[i] = theta[i] - epsilon;
        let (fm, sm) = obj.value(&probe);
        probe[i] = theta[i];
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(i);
        }
    }
    report
}

/// Single linear layer with softmax cross-entropy; parameters are
/// `[W (k x d, row-major), b (k)]`.
#[derive(Debug, Clone)]
pub struct LinearSoftmaxToy {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
    pub theta: Vec<f64>,
}

impl LinearSoftmaxToy {
    pub fn random(samples: usize, dim: usize, classes: usize, rng: &mut Stream) -> Self {
        let inputs = (0..samples * dim).map(|_| rng.standard_normal()).collect();
        let labels = (0..samples).map(|_| rng.index(classes)).collect();
        let theta = (0..classes * (dim + 1))
            .map(|_| 0.5 * rng.standard_normal())
            .collect();
        Self {
            inputs,
            labels,
            dim,
            classes,
            theta,
        }
    }

    fn logits(&self, theta: &[f64], s: usize) -> Vec<f64> {
        let (d, k) = (self.dim, self.classes);
        let x = &self.inputs[s * d..(s + 1) * d];
        (0..k)
            .map(|j| theta[k * d + j] + (0..d).map(|i| theta[j * d + i] * x[i]).sum::<f64>())
            .collect()
    }

    fn log_sum_exp(z: &[f64]) -> f64 {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }

    fn probs(&self, theta: &[f64], s: usize) -> Vec<f64> {
        let z = self.logits(theta, s);
        let lse = Self::log_sum_exp(&z);
        z.into_iter().map(|v| (v - lse).exp()).collect()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.labels.len();
        (0..n)
            .map(|s| {
                let z = self.logits(theta, s);
                Self::log_sum_exp(&z) - z[self.labels[s]]
            })
            .sum::<f64>()
            / n as f64
    }

    /// `dL/dz = (softmax - onehot) / n`, pushed through the affine map.
    pub fn analytic_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (d, k, n) = (self.dim, self.classes, self.labels.len());
        let mut g = vec![0.0; theta.len()];
        for s in 0..n {
            let mut p = self.probs(theta, s);
            p[self.labels[s]] -= 1.0;
            let x = &self.inputs[s * d..(s + 1) * d];
            for j in 0..k {
                let r = p[j] / n as f64;
                g[k * d + j] += r;
                for i in 0..d {
                    g[j * d + i] += r * x[i];
                }
            }
        }
        g
    }

    /// Plain gradient step; returns the loss before the step.
    pub fn sgd_step(&mut self, lr: f64) -> f64 {
        let before = self.loss(&self.theta);
        let g = self.analytic_gradient(&self.theta);
        for (t, gi) in self.theta.iter_mut().zip(g) {
            *t -= lr * gi;
        }
        before
    }
}

impl Objective for LinearSoftmaxToy {
    fn point(&self) -> &[f64] {
        &self.theta
    }

    fn value(&mut self, theta: &[f64]) -> (f64, u64) {
        (self.loss(theta), 0)
    }

    fn gradient(&mut self, theta: &[f64]) -> Vec<f64> {
        self.analytic_gradient(theta)
    }
}
