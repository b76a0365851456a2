//! The constrained space of pooling placements.
//!
//! A network has `L` movable basic blocks (residual blocks, counting the
//! fixed-resolution stem as block 0) and `p` factor-two downsampling layers.
//! Downsampling is never applied to the raw input and never followed by
//! upsampling, so a placement is fully described by how many blocks run at
//! each of the `p + 1` resolutions: `[n0, n1, ..., np]` with every `ni >= 1`
//! and `sum(ni) = L`. The equivalent position form lists the block counts
//! after which each pooling is applied (`[4,3,3]` <-> `[4,7]`).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Default upper bound on the number of configurations [`SearchSpace::enumerate`]
/// will materialise.
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;

/// Shape of the search: depth, number of poolings and the stage resolutions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchSpace {
    total_blocks: u32,
    num_poolings: u32,
    resolutions: Vec<u32>,
    fixed_prefix: u32,
}

impl SearchSpace {
    /// Space whose stage resolutions halve from `input_size`.
    pub fn new(total_blocks: u32, num_poolings: u32, input_size: u32) -> Result<Self> {
        let mut resolutions = Vec::with_capacity(num_poolings as usize + 1);
        let mut size = input_size;
        resolutions.push(size);
        for _ in 0..num_poolings {
            if size < 2 || !size.is_multiple_of(2) {
                return Err(Error::InvalidSpace(format!(
                    "input size {input_size} cannot be halved {num_poolings} times"
                )));
            }
            size /= 2;
            resolutions.push(size);
        }
        Self::with_resolutions(total_blocks, num_poolings, resolutions, 1)
    }

    /// Space with explicit stage resolutions and fixed full-resolution prefix.
    pub fn with_resolutions(
        total_blocks: u32,
        num_poolings: u32,
        resolutions: Vec<u32>,
        fixed_prefix: u32,
    ) -> Result<Self> {
        if num_poolings == 0 {
            return Err(Error::InvalidSpace(
                "at least one pooling is required".into(),
            ));
        }
        if fixed_prefix == 0 {
            return Err(Error::InvalidSpace(
                "fixed prefix must be at least 1".into(),
            ));
        }
        // positions live in [fixed_prefix, total_blocks - 1]
        if u64::from(fixed_prefix) + u64::from(num_poolings) > u64::from(total_blocks) {
            return Err(Error::InvalidSpace(format!(
                "{num_poolings} poolings do not fit in {total_blocks} blocks with a fixed prefix of {fixed_prefix}"
            )));
        }
        if resolutions.len() != num_poolings as usize + 1 {
            return Err(Error::InvalidSpace(format!(
                "expected {} resolutions, got {}",
                num_poolings + 1,
                resolutions.len()
            )));
        }
        if resolutions.contains(&0) {
            return Err(Error::InvalidSpace("resolutions must be positive".into()));
        }
        for w in resolutions.windows(2) {
            if w[1] * 2 != w[0] {
                return Err(Error::InvalidSpace(format!(
                    "resolutions must halve at every stage, got {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self {
            total_blocks,
            num_poolings,
            resolutions,
            fixed_prefix,
        })
    }

    /// The ResNet20 / CIFAR-10 space: 10 blocks, 2 poolings, 32/16/8 px.
    pub fn resnet20_cifar10() -> Self {
        Self::new(10, 2, 32).expect("static space is valid")
    }

    pub fn total_blocks(&self) -> u32 {
        self.total_blocks
    }

    pub fn num_poolings(&self) -> u32 {
        self.num_poolings
    }

    pub fn num_stages(&self) -> usize {
        self.num_poolings as usize + 1
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn fixed_prefix(&self) -> u32 {
        self.fixed_prefix
    }

    /// Number of valid configurations, `C(L - prefix, p)`; with the default
    /// prefix of one block this is `C(L - 1, p)`.
    pub fn size(&self) -> Result<u64> {
        binomial(
            u64::from(self.total_blocks - self.fixed_prefix),
            u64::from(self.num_poolings),
        )
    }

    /// All configurations, lexicographically descending on `n0`, then `n1`, ...
    pub fn enumerate(&self) -> Result<Vec<PoolingConfig>> {
        self.enumerate_capped(DEFAULT_ENUMERATION_CAP)
    }

    pub fn enumerate_capped(&self, cap: u64) -> Result<Vec<PoolingConfig>> {
        let size = self.size()?;
        if size > cap {
            return Err(Error::EnumerationCap { size, cap });
        }
        let mut out = Vec::with_capacity(size as usize);
        let mut prefix = Vec::with_capacity(self.num_stages());
        self.compose(&mut prefix, self.total_blocks, &mut out);
        debug_assert_eq!(out.len() as u64, size);
        Ok(out)
    }

    fn compose(&self, prefix: &mut Vec<u32>, remaining: u32, out: &mut Vec<PoolingConfig>) {
        let stages_left = (self.num_stages() - prefix.len()) as u32;
        if stages_left == 1 {
            prefix.push(remaining);
            out.push(PoolingConfig(prefix.clone()));
            prefix.pop();
            return;
        }
        let min_here = if prefix.is_empty() {
            self.fixed_prefix
        } else {
            1
        };
        let max_here = remaining - (stages_left - 1);
        for n in (min_here..=max_here).rev() {
            prefix.push(n);
            self.compose(prefix, remaining - n, out);
            prefix.pop();
        }
    }

    /// Uniformly random configuration, for spaces too large to enumerate.
    pub fn sample(&self, rng: &mut Stream) -> PoolingConfig {
        // Floyd's algorithm for a uniform p-subset of the admissible positions.
        let lo = self.fixed_prefix;
        let n = self.total_blocks - lo;
        let k = self.num_poolings;
        let mut chosen: Vec<u32> = Vec::with_capacity(k as usize);
        for j in (n - k)..n {
            let t = rng.index(j as usize + 1) as u32;
            if chosen.contains(&t) {
                chosen.push(j);
            } else {
                chosen.push(t);
            }
        }
        chosen.sort_unstable();
        let positions: Vec<u32> = chosen.into_iter().map(|x| x + lo).collect();
        positions_to_config(&positions, self.total_blocks).expect("sampled positions are valid")
    }

    /// Short identity string stored in checkpoints and reports.
    pub fn fingerprint(&self) -> String {
        let res: Vec<String> = self.resolutions.iter().map(u32::to_string).collect();
        format!(
            "L{}-p{}-r{}-f{}",
            self.total_blocks,
            self.num_poolings,
            res.join("/"),
            self.fixed_prefix
        )
    }
}

/// Exact binomial coefficient; overflow of `u64` is an error.
pub fn binomial(n: u64, k: u64) -> Result<u64> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc
            .checked_mul(u128::from(n - i))
            .ok_or(Error::CountOverflow { n, k })?
            / u128::from(i + 1);
        if acc > u128::from(u64::MAX) {
            return Err(Error::CountOverflow { n, k });
        }
    }
    Ok(acc as u64)
}

/// Blocks per resolution stage, e.g. `[4,3,3]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PoolingConfig(Vec<u32>);

impl PoolingConfig {
    pub fn new(blocks_per_stage: Vec<u32>) -> Self {
        Self(blocks_per_stage)
    }

    pub fn blocks_per_stage(&self) -> &[u32] {
        &self.0
    }

    pub fn num_stages(&self) -> usize {
        self.0.len()
    }

    pub fn total_blocks(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Resolution stage (0 = full resolution) of block `index`.
    pub fn stage_of_block(&self, index: u32) -> usize {
        let mut end = 0;
        for (stage, &n) in self.0.iter().enumerate() {
            end += n;
            if index < end {
                return stage;
            }
        }
        self.0.len().saturating_sub(1)
    }
}

impl fmt::Display for PoolingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{n}")?;
        }
        f.write_str("]")
    }
}

impl FromStr for PoolingConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let syntax = |reason: &str| Error::ConfigSyntax {
            text: s.to_string(),
            reason: reason.to_string(),
        };
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| syntax("expected brackets"))?;
        if inner.trim().is_empty() {
            return Err(syntax("empty configuration"));
        }
        let blocks = inner
            .split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|e| syntax(&e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(blocks))
    }
}

impl TryFrom<String> for PoolingConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PoolingConfig> for String {
    fn from(c: PoolingConfig) -> String {
        c.to_string()
    }
}

/// Block counts after which each pooling is applied: prefix sums of all
/// stages but the last.
pub fn config_to_positions(config: &PoolingConfig) -> Vec<u32> {
    let stages = config.blocks_per_stage();
    stages
        .iter()
        .take(stages.len().saturating_sub(1))
        .scan(0u32, |acc, &n| {
            *acc += n;
            Some(*acc)
        })
        .collect()
}

/// Inverse of [`config_to_positions`] for a network of `total_blocks` blocks.
pub fn positions_to_config(positions: &[u32], total_blocks: u32) -> Result<PoolingConfig> {
    if positions.is_empty() {
        return Err(Error::InvalidPositions("no pooling positions".into()));
    }
    let mut prev = 0u32;
    let mut blocks = Vec::with_capacity(positions.len() + 1);
    for &pos in positions {
        if pos < 1 || pos >= total_blocks {
            return Err(Error::InvalidPositions(format!(
                "position {pos} outside [1, {}]",
                total_blocks - 1
            )));
        }
        if pos <= prev {
            return Err(Error::InvalidPositions(format!(
                "positions must be strictly increasing, got {positions:?}"
            )));
        }
        blocks.push(pos - prev);
        prev = pos;
    }
    blocks.push(total_blocks - prev);
    Ok(PoolingConfig(blocks))
}

/// A way in which a configuration falls outside a space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    StageCount { expected: usize, got: usize },
    BlockSum { expected: u32, got: u32 },
    EmptyStage { stage: usize },
    FixedPrefix { required: u32, got: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::StageCount { expected, got } => {
                write!(f, "expected {expected} stages, got {got}")
            }
            Self::BlockSum { expected, got } => {
                write!(f, "block counts sum to {got}, expected {expected}")
            }
            Self::EmptyStage { stage } => write!(f, "stage {stage} has no blocks"),
            Self::FixedPrefix { required, got } => write!(
                f,
                "first stage has {got} blocks, the fixed prefix needs {required}"
            ),
        }
    }
}

/// Checks every configuration invariant against `space`; never panics.
pub fn validate_config(config: &PoolingConfig, space: &SearchSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    let stages = config.blocks_per_stage();
    if stages.len() != space.num_stages() {
        out.push(Violation::StageCount {
            expected: space.num_stages(),
            got: stages.len(),
        });
    }
    let sum: u64 = stages.iter().map(|&n| u64::from(n)).sum();
    if sum != u64::from(space.total_blocks()) {
        out.push(Violation::BlockSum {
            expected: space.total_blocks(),
            got: sum.min(u64::from(u32::MAX)) as u32,
        });
    }
    for (stage, &n) in stages.iter().enumerate() {
        if n == 0 {
            out.push(Violation::EmptyStage { stage });
        }
    }
    if let Some(&first) = stages.first() {
        if first > 0 && first < space.fixed_prefix() {
            out.push(Violation::FixedPrefix {
                required: space.fixed_prefix(),
                got: first,
            });
        }
    }
    out
}

/// Convenience wrapper turning violations into an error.
pub fn ensure_valid(config: &PoolingConfig, space: &SearchSpace) -> Result<()> {
    let v = validate_config(config, space);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(
            v.iter().map(|x| x.to_string()).collect(),
        ))
    }
}

/// An enumerated space with stable configuration ids (the enumeration order).
#[derive(Debug, Clone)]
pub struct Catalog {
    space: SearchSpace,
    configs: Vec<PoolingConfig>,
    ids: HashMap<PoolingConfig, usize>,
}

impl Catalog {
    pub fn new(space: SearchSpace) -> Result<Self> {
        let configs = space.enumerate()?;
        let ids = configs
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(Self {
            space,
            configs,
            ids,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn configs(&self) -> &[PoolingConfig] {
        &self.configs
    }

    pub fn get(&self, id: usize) -> Option<&PoolingConfig> {
        self.configs.get(id)
    }

    pub fn config(&self, id: usize) -> &PoolingConfig {
        &self.configs[id]
    }

    pub fn id_of(&self, config: &PoolingConfig) -> Option<usize> {
        self.ids.get(config).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: &[u32]) -> PoolingConfig {
        PoolingConfig::new(v.to_vec())
    }

    #[test]
    fn size_examples() {
        assert_eq!(SearchSpace::new(10, 2, 32).unwrap().size().unwrap(), 36);
        assert_eq!(SearchSpace::new(17, 3, 32).unwrap().size().unwrap(), 560);
        assert_eq!(SearchSpace::new(2, 1, 32).unwrap().size().unwrap(), 1);
    }

    #[test]
    fn binomial_overflow_is_an_error() {
        assert_eq!(binomial(62, 31).unwrap(), 465_428_353_255_261_088);
        assert!(matches!(
            binomial(200, 100),
            Err(Error::CountOverflow { .. })
        ));
        assert_eq!(binomial(3, 5).unwrap(), 0);
    }

    #[test]
    fn enumerate_small() {
        let s = SearchSpace::new(4, 2, 32).unwrap();
        assert_eq!(
            s.enumerate().unwrap(),
            vec![cfg(&[2, 1, 1]), cfg(&[1, 2, 1]), cfg(&[1, 1, 2])]
        );
        let s = SearchSpace::new(3, 2, 32).unwrap();
        assert_eq!(s.enumerate().unwrap(), vec![cfg(&[1, 1, 1])]);
    }

    #[test]
    fn enumerate_cap() {
        let s = SearchSpace::new(40, 6, 256).unwrap();
        assert!(matches!(
            s.enumerate(),
            Err(Error::EnumerationCap {
                size: 3_262_623,
                ..
            })
        ));
    }

    #[test]
    fn positions_examples() {
        assert_eq!(config_to_positions(&cfg(&[4, 3, 3])), vec![4, 7]);
        assert_eq!(config_to_positions(&cfg(&[7, 1, 2])), vec![7, 8]);
        assert_eq!(config_to_positions(&cfg(&[1, 1, 8])), vec![1, 2]);
        assert_eq!(positions_to_config(&[4, 7], 10).unwrap(), cfg(&[4, 3, 3]));
        assert_eq!(positions_to_config(&[1, 2], 10).unwrap(), cfg(&[1, 1, 8]));
        assert!(positions_to_config(&[9, 9], 10).is_err());
        assert!(positions_to_config(&[0, 3], 10).is_err());
        assert!(positions_to_config(&[3, 10], 10).is_err());
    }

    #[test]
    fn validate_examples() {
        let s = SearchSpace::resnet20_cifar10();
        assert!(validate_config(&cfg(&[4, 3, 3]), &s).is_empty());
        assert_eq!(
            validate_config(&cfg(&[4, 3, 2]), &s),
            vec![Violation::BlockSum {
                expected: 10,
                got: 9
            }]
        );
        assert_eq!(
            validate_config(&cfg(&[5, 0, 5]), &s),
            vec![Violation::EmptyStage { stage: 1 }]
        );
        assert_eq!(
            validate_config(&cfg(&[5, 5]), &s),
            vec![Violation::StageCount {
                expected: 3,
                got: 2
            }]
        );
    }

    #[test]
    fn parse_and_print() {
        let c: PoolingConfig = "[4,3,3]".parse().unwrap();
        assert_eq!(c, cfg(&[4, 3, 3]));
        assert_eq!(c.to_string(), "[4,3,3]");
        assert_eq!(
            " [ 7, 1 ,2 ] "
                .parse::<PoolingConfig>()
                .unwrap()
                .to_string(),
            "[7,1,2]"
        );
        assert!("4,3,3".parse::<PoolingConfig>().is_err());
        assert!("[]".parse::<PoolingConfig>().is_err());
        assert!("[4,x]".parse::<PoolingConfig>().is_err());
    }

    #[test]
    fn resolutions_must_halve() {
        assert!(SearchSpace::with_resolutions(10, 2, vec![32, 16, 4], 1).is_err());
        assert!(SearchSpace::new(10, 3, 12).is_err());
        let food = SearchSpace::new(16, 3, 56).unwrap();
        assert_eq!(food.resolutions(), &[56, 28, 14, 7]);
        assert!(SearchSpace::new(3, 3, 32).is_err());
    }

    #[test]
    fn stage_of_block() {
        let c = cfg(&[4, 3, 3]);
        let stages: Vec<usize> = (0..10).map(|i| c.stage_of_block(i)).collect();
        assert_eq!(stages, vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn sampled_configs_are_valid() {
        let s = SearchSpace::new(40, 6, 256).unwrap();
        let mut rng = Stream::new(1, crate::rng::Purpose::ConfigSampling);
        for _ in 0..500 {
            let c = s.sample(&mut rng);
            assert!(validate_config(&c, &s).is_empty(), "{c}");
        }
    }

    #[test]
    fn catalog_ids() {
        let cat = Catalog::new(SearchSpace::resnet20_cifar10()).unwrap();
        assert_eq!(cat.len(), 36);
        assert_eq!(cat.config(0), &cfg(&[8, 1, 1]));
        assert_eq!(cat.config(35), &cfg(&[1, 1, 8]));
        assert_eq!(cat.id_of(&cfg(&[8, 1, 1])), Some(0));
        assert_eq!(cat.id_of(&cfg(&[4, 3, 2])), None);
    }
}
