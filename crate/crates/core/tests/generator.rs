use warm_core::episode::{split_fg_bg, Benchmark, GeneratorConfig, Split, BACKGROUND};
use warm_core::metrics::{dispersion_metrics, mean_pair_distance, DispersionSample};
use warm_core::trainer::{init_params, TrainConfig};
use warm_core::Rng;

#[test]
fn clouds_respect_shape_and_foreground_floor() {
    let cfg = GeneratorConfig::default();
    let bench = Benchmark::new(cfg.clone()).unwrap();
    for seed in 0..1000 {
        let ep = bench.episode(Split::Base, &mut Rng::new(seed)).unwrap();
        ep.validate().unwrap();
        for cloud in ep.support.iter().chain(&ep.query) {
            assert_eq!(cloud.len(), cfg.points_per_cloud);
            assert_eq!(cloud.dim(), cfg.feature_dim);
            assert!(cloud.count(1) >= cfg.min_fg_points, "seed {seed}");
            assert!(cloud.count(BACKGROUND) > 0);
        }
    }
}

#[test]
fn splits_are_disjoint() {
    let bench = Benchmark::new(GeneratorConfig { n_way: 2, ..Default::default() }).unwrap();
    for seed in 0..200 {
        let base = bench.episode(Split::Base, &mut Rng::new(seed)).unwrap();
        let novel = bench.episode(Split::Novel, &mut Rng::new(seed)).unwrap();
        assert!(base.class_ids.iter().all(|c| bench.classes(Split::Base).contains(c)));
        assert!(novel.class_ids.iter().all(|c| bench.classes(Split::Novel).contains(c)));
        assert_ne!(base.class_ids[0], base.class_ids[1]);
    }
}

#[test]
fn same_seed_same_episode() {
    let bench = Benchmark::new(GeneratorConfig::default()).unwrap();
    let a = bench.episode(Split::Novel, &mut Rng::new(42)).unwrap();
    let b = Benchmark::new(GeneratorConfig::default()).unwrap().episode(Split::Novel, &mut Rng::new(42)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, bench.episode(Split::Novel, &mut Rng::new(43)).unwrap());
}

#[test]
fn features_are_clustered_by_class_and_far_from_tokens() {
    let cfg = GeneratorConfig::default();
    let bench = Benchmark::new(cfg.clone()).unwrap();
    let mut fg = Vec::new();
    for seed in 0..60 {
        let ep = bench.episode(Split::Base, &mut Rng::new(seed)).unwrap();
        fg.push((ep.class_ids[0], split_fg_bg(&ep.support[0], 1).unwrap().fg));
    }
    let samples: Vec<DispersionSample> =
        fg.iter().map(|(c, f)| DispersionSample { class_id: *c, features: f }).collect();
    let d = dispersion_metrics(&samples).unwrap();
    let (intra, inter) = (d.d_intra.unwrap(), d.d_inter.unwrap());
    assert!(inter > intra && intra > 0.0, "inter {inter}, intra {intra}");

    let tokens = init_params(&TrainConfig::default(), cfg.feature_dim).tokens;
    let token_spread = mean_pair_distance(&tokens, &tokens);
    assert!(d.d_instance > 10.0 * token_spread, "instance {} tokens {token_spread}", d.d_instance);
}
