use poolmix::baselines::{spos_sample, BseState};
use poolmix::mixture::{JointDistribution, Matrix, MixtureParams, MixtureState, PairSampler};
use poolmix::rng::{Purpose, Stream};

const DRAWS: usize = 36_000;
/// Upper 0.1% point of chi-square with 35 degrees of freedom.
const CHI2_35_999: f64 = 66.62;

fn chi_square(counts: &[u64]) -> f64 {
    let expected = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum()
}

#[test]
fn spos_is_uniform() {
    for seed in 0..3 {
        let mut rng = Stream::new(seed, Purpose::ConfigSampling);
        let mut counts = vec![0u64; 36];
        for _ in 0..DRAWS {
            counts[spos_sample(36, &mut rng)] += 1;
        }
        assert!(chi_square(&counts) < CHI2_35_999, "seed {seed}: {counts:?}");
        // 1000 expected per cell; six standard deviations is about 190
        assert!(
            counts.iter().all(|&c| (810..=1190).contains(&c)),
            "{counts:?}"
        );
    }
}

#[test]
fn balanced_pairs_have_uniform_config_marginal() {
    let mut rows = Vec::new();
    let mut rng = Stream::new(9, Purpose::Init);
    for _ in 0..36 {
        rows.push((0..4).map(|_| rng.uniform()).collect::<Vec<_>>());
    }
    let mut state = MixtureState::new(36, 4, 1000, &MixtureParams::default()).unwrap();
    for (c, row) in rows.iter().enumerate() {
        for (m, &a) in row.iter().enumerate() {
            state.update_accuracy(c, m, a).unwrap();
        }
    }
    let joint = state.balanced_joint(&MixtureParams::default()).unwrap();
    let mut sampler = PairSampler::new(3);
    let mut configs = vec![0u64; 36];
    let mut models = vec![0u64; 4];
    for _ in 0..DRAWS {
        let (c, m) = sampler.sample_pair(&joint);
        configs[c] += 1;
        models[m] += 1;
    }
    assert!(chi_square(&configs) < CHI2_35_999, "{configs:?}");
    // 3 degrees of freedom, 0.1% point 16.27
    assert!(chi_square(&models) < 16.27, "{models:?}");
}

#[test]
fn routing_follows_the_conditional() {
    let joint = JointDistribution::from_matrix(
        Matrix::from_rows(&[vec![0.1, 0.4], vec![0.4, 0.1]]).unwrap(),
    )
    .unwrap();
    let mut sampler = PairSampler::new(0);
    let mut hits = [[0u64; 2]; 2];
    for _ in 0..20_000 {
        let (c, m) = sampler.sample_pair(&joint);
        hits[c][m] += 1;
    }
    for (c, row) in hits.iter().enumerate() {
        let frac = row[1 - c] as f64 / (row[0] + row[1]) as f64;
        assert!((frac - 0.8).abs() < 0.02, "config {c}: {frac}");
    }
}

#[test]
fn bse_with_equal_rewards_is_uniform() {
    let bse = BseState::new(36, 1.0, 100.0, 0.9, 0.5, 1000).unwrap();
    let mut rng = Stream::new(5, Purpose::ConfigSampling);
    let mut counts = vec![0u64; 36];
    for _ in 0..DRAWS {
        counts[bse.sample(&mut rng)] += 1;
    }
    assert!(chi_square(&counts) < CHI2_35_999, "{counts:?}");
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let params = MixtureParams::default();
    let drive = |state: &mut MixtureState, rng: &mut Stream, steps: usize| {
        for _ in 0..steps {
            let (c, m) = (rng.index(10), rng.index(3));
            state.update_accuracy(c, m, rng.uniform()).unwrap();
        }
    };
    let mut straight = MixtureState::new(10, 3, 400, &params).unwrap();
    let mut rng = Stream::new(1, Purpose::EvalNoise);
    drive(&mut straight, &mut rng, 400);

    let mut first = MixtureState::new(10, 3, 400, &params).unwrap();
    let mut rng = Stream::new(1, Purpose::EvalNoise);
    drive(&mut first, &mut rng, 150);
    let json = first.to_checkpoint("test-space", &params).to_json();
    let ck = poolmix::mixture::Checkpoint::from_json(&json).unwrap();
    let (mut resumed, restored) = MixtureState::from_checkpoint(&ck, "test-space").unwrap();
    assert_eq!(restored.delta, params.delta);
    drive(&mut resumed, &mut rng, 250);

    assert_eq!(resumed, straight);
    assert_eq!(
        resumed.balanced_joint(&restored).unwrap(),
        straight.balanced_joint(&params).unwrap()
    );
    assert!(MixtureState::from_checkpoint(&ck, "other-space").is_err());
}
