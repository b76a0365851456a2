use poolmix::baselines::ResolutionTree;
use poolmix::mixture::{
    argmax, entropy, joint_from_accuracies, Matrix, MixtureParams, MixtureState,
};
use poolmix::rng::{Purpose, Stream};
use poolmix::search_space::{binomial, config_to_positions, positions_to_config, Catalog};
use poolmix::{PoolingConfig, SearchSpace};
use proptest::prelude::*;

fn space() -> impl Strategy<Value = SearchSpace> {
    (1u32..=4).prop_flat_map(|p| {
        (p + 2..=13).prop_map(move |l| SearchSpace::new(l, p, 1 << (p + 2)).unwrap())
    })
}

fn acc_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..12, 1usize..6)
        .prop_flat_map(|(c, m)| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, m), c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_matches_binomial(space in space()) {
        let configs = space.enumerate().unwrap();
        let free = u64::from(space.total_blocks() - space.fixed_prefix());
        prop_assert_eq!(configs.len() as u64, binomial(free, u64::from(space.num_poolings())).unwrap());
        let mut sorted = configs.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), configs.len());
        for c in &configs {
            prop_assert_eq!(c.total_blocks(), space.total_blocks());
            prop_assert_eq!(c.num_stages(), space.num_stages());
        }
    }

    #[test]
    fn positions_and_text_round_trip(space in space(), pick in any::<prop::sample::Index>()) {
        let configs = space.enumerate().unwrap();
        let c = &configs[pick.index(configs.len())];
        let back = positions_to_config(&config_to_positions(c), space.total_blocks()).unwrap();
        prop_assert_eq!(&back, c);
        let parsed: PoolingConfig = c.to_string().parse().unwrap();
        prop_assert_eq!(&parsed, c);
        let catalog = Catalog::new(space).unwrap();
        prop_assert_eq!(catalog.config(catalog.id_of(c).unwrap()), c);
    }

    #[test]
    fn ema_stays_within_observed_range(accs in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let mut state = MixtureState::new(1, 1, 200, &MixtureParams::default()).unwrap();
        let (mut lo, mut hi) = (0.5f64, 0.5f64);
        for a in &accs {
            state.update_accuracy(0, 0, *a).unwrap();
            lo = lo.min(*a);
            hi = hi.max(*a);
            let v = state.ema_acc().get(0, 0);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        prop_assert_eq!(state.step(), accs.len() as u64);
    }

    #[test]
    fn softmax_keeps_row_argmax(rows in acc_matrix(), tau in 0.001f64..5.0) {
        let joint = joint_from_accuracies(&Matrix::from_rows(&rows).unwrap(), tau).unwrap();
        for (c, row) in rows.iter().enumerate() {
            let best = argmax(row);
            let p = joint.conditional_model_dist(c);
            prop_assert!(p[best] >= p[argmax(&p)] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn conditional_entropy_grows_with_temperature(rows in acc_matrix(), t1 in 0.001f64..2.0, t2 in 0.001f64..2.0) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let m = Matrix::from_rows(&rows).unwrap();
        let cold = joint_from_accuracies(&m, lo).unwrap();
        let warm = joint_from_accuracies(&m, hi).unwrap();
        for c in 0..rows.len() {
            let (hc, hw) = (entropy(&cold.conditional_model_dist(c)), entropy(&warm.conditional_model_dist(c)));
            prop_assert!(hc <= hw + 1e-9, "row {c}: {hc} > {hw}");
        }
    }

    #[test]
    fn tree_visits_sum_over_children(seed in any::<u64>(), steps in 1usize..300, explore in 0.0f64..3.0) {
        let catalog = Catalog::new(SearchSpace::new(7, 2, 16).unwrap()).unwrap();
        let mut tree = ResolutionTree::build(&catalog).unwrap();
        let mut rng = Stream::new(seed, Purpose::ConfigSampling);
        for _ in 0..steps {
            let path = tree.select_path(explore, false, &mut rng).unwrap();
            let reward = rng.uniform();
            tree.backpropagate(&path, reward).unwrap();
        }
        prop_assert_eq!(tree.root().visits, steps as u64);
        for node in tree.nodes() {
            if !node.is_leaf() {
                let below: u64 = node.children.iter().flatten().map(|&i| tree.node(i).visits).sum();
                prop_assert_eq!(below, node.visits);
            }
        }
        let leaf_visits: u64 = tree.leaf_ranking().iter().map(|l| l.1).sum();
        prop_assert_eq!(leaf_visits, steps as u64);
    }
}
