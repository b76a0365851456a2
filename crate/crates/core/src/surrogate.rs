//! Desk-scale evaluation backend.
//!
//! The ground truth is the exhaustive table of independently trained
//! ResNet20 accuracies over the 36 pooling configurations. On top of it, an
//! interference model reproduces the weight-sharing effect that makes a
//! single SuperNet a poor proxy: a weight set that was recently trained on
//! configurations far from `c` (in pooling-position distance) scores `c`
//! lower than it should.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::search_space::{config_to_positions, Catalog, PoolingConfig, SearchSpace};

/// The shipped ResNet20 / CIFAR-10 table (percent, two decimals).
pub const RESNET20_CIFAR10: &str = include_str!("../data/resnet20_cifar10.txt");

/// Ground-truth accuracy per configuration, indexed by catalog id.
#[derive(Debug, Clone)]
pub struct BenchmarkTable {
    catalog: Catalog,
    /// Hundredths of a percent, kept so the text form round-trips exactly.
    mean_bp: Vec<u32>,
    std_bp: Vec<u32>,
    positions: Vec<Vec<u32>>,
    max_distance: u32,
}

impl BenchmarkTable {
    /// The 36-row ResNet20 / CIFAR-10 table.
    pub fn resnet20_cifar10() -> Self {
        Self::parse(RESNET20_CIFAR10, SearchSpace::resnet20_cifar10())
            .expect("shipped table is valid")
    }

    /// Parses the text format: one `config mean std` record per line,
    /// percentages with up to two decimals, `#` starts a comment. The
    /// records must cover `space` exactly once each.
    pub fn parse(text: &str, space: SearchSpace) -> Result<Self> {
        let catalog = Catalog::new(space)?;
        let n = catalog.len();
        let mut mean_bp: Vec<Option<u32>> = vec![None; n];
        let mut std_bp = vec![0u32; n];
        let mut unknown = Vec::new();
        let mut duplicate = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Benchmark(format!("line {}: {why}: {raw:?}", lineno + 1));
            let close = line.find(']').ok_or_else(|| bad("missing configuration"))?;
            let config: PoolingConfig = line[..=close]
                .parse()
                .map_err(|e: Error| bad(&e.to_string()))?;
            let fields: Vec<&str> = line[close + 1..].split_whitespace().collect();
            if fields.len() != 2 {
                return Err(bad("expected mean and std"));
            }
            let mean = parse_hundredths(fields[0]).ok_or_else(|| bad("bad mean"))?;
            let std = parse_hundredths(fields[1]).ok_or_else(|| bad("bad std"))?;
            if mean > 10_000 || std > 10_000 {
                return Err(bad("percentage above 100"));
            }
            match catalog.id_of(&config) {
                None => unknown.push(config.to_string()),
                Some(id) if mean_bp[id].is_some() => duplicate.push(config.to_string()),
                Some(id) => {
                    mean_bp[id] = Some(mean);
                    std_bp[id] = std;
                }
            }
        }
        let missing: Vec<String> = mean_bp
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(i, _)| catalog.config(i).to_string())
            .collect();
        if !(missing.is_empty() && unknown.is_empty() && duplicate.is_empty()) {
            let mut msg = String::new();
            for (label, list) in [
                ("missing", &missing),
                ("not in space", &unknown),
                ("duplicate", &duplicate),
            ] {
                if !list.is_empty() {
                    let _ = write!(msg, "{label}: {}; ", list.join(" "));
                }
            }
            return Err(Error::Benchmark(msg.trim_end_matches("; ").to_string()));
        }
        let mean_bp: Vec<u32> = mean_bp.into_iter().map(Option::unwrap).collect();
        for (i, (&m, &s)) in mean_bp.iter().zip(&std_bp).enumerate() {
            if m < 3 * s || m + 3 * s > 10_000 {
                return Err(Error::Benchmark(format!(
                    "{}: mean +- 3 std leaves [0, 100]",
                    catalog.config(i)
                )));
            }
        }
        let positions = catalog.configs().iter().map(config_to_positions).collect();
        let space = catalog.space();
        let max_distance = space.num_poolings() * (space.total_blocks() - 1 - space.fixed_prefix());
        Ok(Self {
            catalog,
            mean_bp,
            std_bp,
            positions,
            max_distance: max_distance.max(1),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn len(&self) -> usize {
        self.mean_bp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_bp.is_empty()
    }

    /// Mean accuracy as a fraction.
    pub fn mean(&self, id: usize) -> f64 {
        f64::from(self.mean_bp[id]) / 10_000.0
    }

    pub fn std(&self, id: usize) -> f64 {
        f64::from(self.std_bp[id]) / 10_000.0
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }

    pub fn lookup(&self, config: &PoolingConfig) -> Option<(f64, f64)> {
        self.catalog
            .id_of(config)
            .map(|i| (self.mean(i), self.std(i)))
    }

    /// Configuration id with the highest mean (lowest id on ties).
    pub fn best(&self) -> usize {
        crate::mixture::argmax(&self.means())
    }

    /// Pooling-position L1 distance between two configurations, divided by
    /// `p (L - 1 - prefix)`: each of the `p` positions ranges over
    /// `[prefix, L - 1]`.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let d: u32 = self.positions[a]
            .iter()
            .zip(&self.positions[b])
            .map(|(x, y)| x.abs_diff(*y))
            .sum();
        f64::from(d) / f64::from(self.max_distance)
    }

    pub fn max_distance(&self) -> u32 {
        self.max_distance
    }

    /// Text form accepted by [`parse`](Self::parse), in ascending config order.
    pub fn to_text(&self) -> String {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.sort_by(|&a, &b| self.catalog.config(a).cmp(self.catalog.config(b)));
        let mut out = String::from("# config   mean    std\n");
        for id in ids {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>6}",
                self.catalog.config(id).to_string(),
                fmt_hundredths(self.mean_bp[id]),
                fmt_hundredths(self.std_bp[id])
            );
        }
        out
    }
}

fn parse_hundredths(s: &str) -> Option<u32> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int.is_empty() || frac.len() > 2 || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int: u32 = int.parse().ok()?;
    let frac: u32 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<2}").parse().ok()?
    };
    int.checked_mul(100)?.checked_add(frac)
}

fn fmt_hundredths(v: u32) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

/// Per-model ring buffers of recently trained configurations plus the
/// interference strength and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceState {
    histories: Vec<VecDeque<usize>>,
    capacity: usize,
    /// Accuracy penalty at maximal mean distance.
    pub lambda: f64,
    /// Standard deviation of minibatch evaluation noise.
    pub sigma: f64,
}

impl InterferenceState {
    pub fn new(num_models: usize, capacity: usize, lambda: f64, sigma: f64) -> Result<Self> {
        if num_models == 0 || capacity == 0 {
            return Err(Error::InvalidParameter(
                "interference needs at least one model and a positive history".into(),
            ));
        }
        if !(lambda >= 0.0 && sigma >= 0.0 && lambda.is_finite() && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda and sigma must be non-negative, got {lambda}, {sigma}"
            )));
        }
        Ok(Self {
            histories: vec![VecDeque::with_capacity(capacity); num_models],
            capacity,
            lambda,
            sigma,
        })
    }

    pub fn history(&self, model: usize) -> &VecDeque<usize> {
        &self.histories[model]
    }

    pub fn num_models(&self) -> usize {
        self.histories.len()
    }

    /// Appends `config` to `model`'s history, evicting the oldest entry
    /// beyond capacity.
    pub fn register_training(&mut self, model: usize, config: usize) {
        let h = &mut self.histories[model];
        if h.len() == self.capacity {
            h.pop_front();
        }
        h.push_back(config);
    }

    /// Mean normalised distance between `config` and `model`'s history
    /// (zero for an empty history).
    pub fn mean_distance(&self, table: &BenchmarkTable, config: usize, model: usize) -> f64 {
        let h = &self.histories[model];
        if h.is_empty() {
            return 0.0;
        }
        h.iter().map(|&o| table.distance(config, o)).sum::<f64>() / h.len() as f64
    }

    /// Mean pairwise distance within each history, averaged over models
    /// whose history holds at least two entries.
    pub fn diversity(&self, table: &BenchmarkTable) -> f64 {
        let mut total = 0.0;
        let mut counted = 0;
        for h in &self.histories {
            if h.len() < 2 {
                continue;
            }
            let v: Vec<usize> = h.iter().copied().collect();
            let mut sum = 0.0;
            let mut pairs = 0;
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    sum += table.distance(v[i], v[j]);
                    pairs += 1;
                }
            }
            total += sum / f64::from(pairs);
            counted += 1;
        }
        if counted == 0 {
            0.0
        } else {
            total / f64::from(counted)
        }
    }
}

/// One simulated minibatch accuracy of `config` under weight set `model`:
/// `clamp(mean(c) - lambda * dbar(c, history_m) + sigma * z, 0, 1)` with a
/// fresh standard normal `z`. One normal is always drawn, even when
/// `sigma = 0`, so the noise stream advances identically.
pub fn simulate_eval(
    table: &BenchmarkTable,
    config: usize,
    model: usize,
    interference: &InterferenceState,
    rng: &mut Stream,
) -> f64 {
    let z = rng.standard_normal();
    let penalty = interference.lambda * interference.mean_distance(table, config, model);
    (table.mean(config) - penalty + interference.sigma * z).clamp(0.0, 1.0)
}

/// Kendall's tau-b between two score vectors.
///
/// `(concordant - discordant) / sqrt((P - T_a) (P - T_b))` with
/// `P = n (n - 1) / 2` and `T_x` the pairs tied in `x`. Exact O(n^2) pair
/// counting; intended for `n <= 1000`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidParameter(format!(
            "rankings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two items".into(),
        ));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN score".into()));
    }
    let n = a.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tied_a, mut tied_b) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).expect("not NaN");
            let db = b[i].partial_cmp(&b[j]).expect("not NaN");
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {
                    tied_a += 1;
                    tied_b += 1;
                }
                (Equal, _) => tied_a += 1,
                (_, Equal) => tied_b += 1,
                (x, y) if x == y => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    if tied_a == pairs || tied_b == pairs {
        return Err(Error::UndefinedCorrelation(
            "one ranking is constant".into(),
        ));
    }
    let denom = (((pairs - tied_a) as f64) * ((pairs - tied_b) as f64)).sqrt();
    Ok((concordant - discordant) as f64 / denom)
}

/// Tuning knobs of the surrogate backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParams {
    pub lambda: f64,
    pub sigma: f64,
    pub history: usize,
    /// Minibatches averaged by a full-validation evaluation. The default is
    /// a 25,000-image validation half read in batches of 256.
    pub eval_batches: usize,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            sigma: 0.01,
            history: 64,
            eval_batches: 98,
        }
    }
}

/// [`Backend`] over a [`BenchmarkTable`] with interference and noise.
#[derive(Debug, Clone)]
pub struct SurrogateBackend {
    table: BenchmarkTable,
    interference: InterferenceState,
    noise: Stream,
    eval_batches: usize,
}

impl SurrogateBackend {
    pub fn new(
        table: BenchmarkTable,
        num_models: usize,
        params: SurrogateParams,
        seed: u64,
    ) -> Result<Self> {
        if params.eval_batches == 0 {
            return Err(Error::InvalidParameter(
                "eval_batches must be positive".into(),
            ));
        }
        let interference =
            InterferenceState::new(num_models, params.history, params.lambda, params.sigma)?;
        Ok(Self {
            table,
            interference,
            noise: Stream::new(seed, Purpose::EvalNoise),
            eval_batches: params.eval_batches,
        })
    }

    pub fn table(&self) -> &BenchmarkTable {
        &self.table
    }

    pub fn interference(&self) -> &InterferenceState {
        &self.interference
    }

    fn check(&self, config: usize, model: usize) -> Result<()> {
        if config >= self.table.len() {
            return Err(Error::IndexOutOfRange {
                name: "config",
                index: config,
                len: self.table.len(),
            });
        }
        if model >= self.interference.num_models() {
            return Err(Error::IndexOutOfRange {
                name: "model",
                index: model,
                len: self.interference.num_models(),
            });
        }
        Ok(())
    }
}

impl Backend for SurrogateBackend {
    fn num_configs(&self) -> usize {
        self.table.len()
    }

    fn num_models(&self) -> usize {
        self.interference.num_models()
    }

    fn train(
        &mut self,
        config: usize,
        model: usize,
        _step: usize,
        _total: usize,
    ) -> Result<Option<f64>> {
        self.check(config, model)?;
        self.interference.register_training(model, config);
        Ok(None)
    }

    fn validate_minibatch(&mut self, config: usize, model: usize) -> Result<f64> {
        self.check(config, model)?;
        Ok(simulate_eval(
            &self.table,
            config,
            model,
            &self.interference,
            &mut self.noise,
        ))
    }

    fn evaluate_full(&mut self, config: usize, model: usize) -> Result<f64> {
        self.check(config, model)?;
        let total: f64 = (0..self.eval_batches)
            .map(|_| {
                simulate_eval(
                    &self.table,
                    config,
                    model,
                    &self.interference,
                    &mut self.noise,
                )
            })
            .sum();
        Ok(total / self.eval_batches as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(t: &BenchmarkTable, s: &str) -> usize {
        t.catalog().id_of(&s.parse().unwrap()).unwrap()
    }

    #[test]
    fn shipped_rows() {
        let t = BenchmarkTable::resnet20_cifar10();
        assert_eq!(t.len(), 36);
        assert_eq!(
            t.lookup(&"[4,3,3]".parse().unwrap()),
            Some((0.9052, 0.0015))
        );
        assert_eq!(
            t.lookup(&"[7,1,2]".parse().unwrap()),
            Some((0.9201, 0.0018))
        );
        assert_eq!(
            t.lookup(&"[1,1,8]".parse().unwrap()),
            Some((0.8745, 0.0006))
        );
        assert_eq!(t.catalog().config(t.best()).to_string(), "[7,1,2]");
    }

    #[test]
    fn text_roundtrip() {
        let t = BenchmarkTable::resnet20_cifar10();
        let text = t.to_text();
        let back = BenchmarkTable::parse(&text, SearchSpace::resnet20_cifar10()).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.means(), t.means());
    }

    #[test]
    fn load_errors_list_offenders() {
        let space = SearchSpace::resnet20_cifar10();
        let lines: Vec<&str> = RESNET20_CIFAR10
            .lines()
            .filter(|l| l.starts_with('['))
            .collect();
        let missing = lines[1..].join("\n");
        let err = BenchmarkTable::parse(&missing, space.clone()).unwrap_err();
        assert!(err.to_string().contains("missing: [1,1,8]"), "{err}");

        let dup = format!("{}\n{}", lines.join("\n"), lines[3]);
        let err = BenchmarkTable::parse(&dup, space.clone()).unwrap_err();
        assert!(err.to_string().contains("duplicate: [1,4,5]"), "{err}");

        let extra = format!("{}\n[5,5,1] 90.00 0.10", lines.join("\n"));
        let err = BenchmarkTable::parse(&extra, space.clone()).unwrap_err();
        assert!(err.to_string().contains("not in space: [5,5,1]"), "{err}");

        let garbage = format!("{}\n[4,3,3] ninety 0.1", lines[1..].join("\n"));
        assert!(BenchmarkTable::parse(&garbage, space).is_err());
    }

    #[test]
    fn hundredths() {
        assert_eq!(parse_hundredths("90.52"), Some(9052));
        assert_eq!(parse_hundredths("0.1"), Some(10));
        assert_eq!(parse_hundredths("88"), Some(8800));
        assert_eq!(parse_hundredths("1.234"), None);
        assert_eq!(parse_hundredths("-1"), None);
        assert_eq!(fmt_hundredths(10), "0.10");
    }

    #[test]
    fn simulate_noise_free() {
        let t = BenchmarkTable::resnet20_cifar10();
        let mut inter = InterferenceState::new(2, 8, 0.0, 0.0).unwrap();
        let mut rng = Stream::new(1, Purpose::EvalNoise);
        inter.register_training(0, 3);
        for c in 0..t.len() {
            assert_eq!(simulate_eval(&t, c, 0, &inter, &mut rng), t.mean(c));
        }
    }

    #[test]
    fn simulate_self_history_has_no_penalty() {
        let t = BenchmarkTable::resnet20_cifar10();
        let c = id(&t, "[4,3,3]");
        let mut inter = InterferenceState::new(1, 8, 0.5, 0.0).unwrap();
        for _ in 0..5 {
            inter.register_training(0, c);
        }
        let mut rng = Stream::new(1, Purpose::EvalNoise);
        assert_eq!(simulate_eval(&t, c, 0, &inter, &mut rng), t.mean(c));
    }

    #[test]
    fn simulate_far_history_penalty() {
        let t = BenchmarkTable::resnet20_cifar10();
        assert_eq!(t.max_distance(), 16);
        let c = id(&t, "[1,1,8]");
        let far = id(&t, "[8,1,1]");
        assert_eq!(t.distance(c, far), 14.0 / 16.0);
        let mut inter = InterferenceState::new(1, 8, 0.05, 0.0).unwrap();
        inter.register_training(0, far);
        let mut rng = Stream::new(1, Purpose::EvalNoise);
        let acc = simulate_eval(&t, c, 0, &inter, &mut rng);
        assert!((acc - (0.8745 - 0.05 * 14.0 / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn ring_buffer() {
        let mut s = InterferenceState::new(2, 2, 0.0, 0.0).unwrap();
        s.register_training(0, 7);
        assert_eq!(s.history(0).iter().copied().collect::<Vec<_>>(), vec![7]);
        s.register_training(0, 8);
        s.register_training(1, 1);
        s.register_training(0, 9);
        assert_eq!(s.history(0).iter().copied().collect::<Vec<_>>(), vec![8, 9]);
        assert_eq!(s.history(1).iter().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
        assert!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn backend_full_eval_averages() {
        let t = BenchmarkTable::resnet20_cifar10();
        let params = SurrogateParams {
            lambda: 0.0,
            sigma: 0.0,
            ..SurrogateParams::default()
        };
        let mut b = SurrogateBackend::new(t.clone(), 2, params, 3).unwrap();
        b.train(5, 1, 0, 1).unwrap();
        assert!((b.evaluate_full(5, 1).unwrap() - t.mean(5)).abs() < 1e-12);
        assert!(b.train(36, 0, 0, 1).is_err());
        assert!(b.validate_minibatch(0, 2).is_err());
    }
}
