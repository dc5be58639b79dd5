use proptest::prelude::*;
use warm_core::fps::{farthest_point_sampling, farthest_point_sampling_from, min_dist_classify};
use warm_core::{Matrix, Rng};

/// Brute-force selection: at each step scan every unselected row and keep the
/// first one whose minimum distance to the selection is largest.
fn oracle(f: &Matrix, count: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..f.rows() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn random(rows: usize, cols: usize, rng: &mut Rng, grid: bool) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| if grid { rng.index(3) as f64 } else { rng.gaussian() })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn greedy_steps_match_exhaustive_oracle() {
    let mut rng = Rng::new(2024);
    let mut steps = 0usize;
    for instance in 0..500 {
        let l = 1 + rng.index(8);
        let d = 1 + rng.index(3);
        // every fifth instance sits on a small grid to force distance ties
        let f = random(l, d, &mut rng, instance % 5 == 0);
        for start in 0..l {
            for count in 1..=l {
                let got = farthest_point_sampling_from(&f, count, start).unwrap();
                assert_eq!(got.indices, oracle(&f, count, start), "instance {instance}, start {start}");
                steps += count;
            }
        }
    }
    assert!(steps > 5000);
}

#[test]
fn one_dimensional_example() {
    let f = Matrix::from_rows(&[&[0.0], &[1.0], &[10.0]]).unwrap();
    assert_eq!(farthest_point_sampling_from(&f, 2, 0).unwrap().indices, vec![0, 2]);
}

#[test]
fn too_many_samples_is_an_error() {
    let f = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
    assert!(farthest_point_sampling(&f, 3, &mut Rng::new(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn subset_matches_indices_and_is_distinct(seed in any::<u64>(), l in 1usize..30, d in 1usize..5, t in 1usize..30) {
        let mut rng = Rng::new(seed);
        let f = random(l, d, &mut rng, false);
        let t = t.min(l);
        let r = farthest_point_sampling(&f, t, &mut rng).unwrap();
        prop_assert_eq!(r.indices.len(), t);
        let mut sorted = r.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), t);
        for (k, &i) in r.indices.iter().enumerate() {
            prop_assert_eq!(r.subset.row(k), f.row(i));
        }
    }

    #[test]
    fn fixed_seed_is_deterministic(seed in any::<u64>()) {
        let f = random(25, 3, &mut Rng::new(seed ^ 1), false);
        let a = farthest_point_sampling(&f, 7, &mut Rng::new(seed)).unwrap();
        let b = farthest_point_sampling(&f, 7, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn row_permutation_selects_same_points(seed in any::<u64>(), l in 2usize..20, start in 0usize..20) {
        let mut rng = Rng::new(seed);
        let f = random(l, 2, &mut rng, false);
        let start = start % l;
        let mut perm: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut perm);
        let g = f.select_rows(&perm);
        let new_start = perm.iter().position(|&p| p == start).unwrap();
        let t = 1 + rng.index(l);
        let a = farthest_point_sampling_from(&f, t, start).unwrap();
        let b = farthest_point_sampling_from(&g, t, new_start).unwrap();
        let rows = |m: &Matrix| {
            let mut v: Vec<Vec<u64>> = m.row_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
            v.sort();
            v
        };
        prop_assert_eq!(rows(&a.subset), rows(&b.subset));
    }

    #[test]
    fn classification_ignores_prototype_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = random(15, 3, &mut rng, false);
        let protos: Vec<Matrix> = (0..3).map(|_| random(4, 3, &mut rng, false)).collect();
        let shuffled: Vec<Matrix> = protos
            .iter()
            .map(|p| {
                let mut perm: Vec<usize> = (0..p.rows()).collect();
                rng.shuffle(&mut perm);
                p.select_rows(&perm)
            })
            .collect();
        prop_assert_eq!(min_dist_classify(&q, &protos).unwrap(), min_dist_classify(&q, &shuffled).unwrap());
    }
}

#[test]
fn classification_examples() {
    let q = Matrix::from_rows(&[&[1.0], &[5.0], &[9.0]]).unwrap();
    let protos = [Matrix::from_rows(&[&[0.0]]).unwrap(), Matrix::from_rows(&[&[10.0]]).unwrap()];
    assert_eq!(min_dist_classify(&q, &protos).unwrap(), vec![0, 0, 1]);
    assert!(min_dist_classify(&q, &[]).is_err());
    assert!(min_dist_classify(&q, &[Matrix::zeros(0, 1)]).is_err());
}
