use std::collections::HashSet;

use prefrank_core::dataset::{
    cosine_similarity, enumerate_ids, select_diverse, CandidatePool, ItemId, PairSet, PoolEntry,
};
use prefrank_core::face::{ActuatorVector, FaceImage};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entry(id: ItemId, pixels: Vec<f64>) -> PoolEntry {
    let n = pixels.len();
    PoolEntry { id, actuators: ActuatorVector::neutral(4), image: FaceImage::new(n, 1, pixels).unwrap() }
}

fn min_distance(vs: &[&[f64]]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let dot: f64 = vs[i].iter().zip(vs[j]).map(|(a, b)| a * b).sum();
            let na: f64 = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = vs[j].iter().map(|b| b * b).sum::<f64>().sqrt();
            m = m.min(1.0 - dot / (na * nb));
        }
    }
    m
}

#[test]
fn diverse_subsets_beat_random_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (trials, n, k, dim) = (120, 40, 8, 16);
    let (mut greedy_sum, mut random_sum, mut wins) = (0.0, 0.0, 0);
    for _ in 0..trials {
        let vectors: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>().powi(3)).collect()).collect();
        let pool = CandidatePool::new(vectors.iter().enumerate().map(|(i, v)| entry(i as ItemId, v.clone())).collect())
            .unwrap();
        let chosen = select_diverse(&pool, k).unwrap();
        let g: Vec<&[f64]> = chosen.ids().iter().map(|&id| vectors[id as usize].as_slice()).collect();
        let r: Vec<&[f64]> = sample(&mut rng, n, k).into_iter().map(|i| vectors[i].as_slice()).collect();
        let (dg, dr) = (min_distance(&g), min_distance(&r));
        greedy_sum += dg;
        random_sum += dr;
        wins += usize::from(dg >= dr);
    }
    assert!(greedy_sum > random_sum, "greedy {greedy_sum} random {random_sum}");
    assert!(wins * 10 >= trials * 9, "greedy won {wins}/{trials}");
}

#[test]
fn pairs_biject_onto_ordered_index_pairs() {
    let ids: Vec<ItemId> = vec![17, 3, 99, 42, 5, 8, 61];
    let set = enumerate_ids(&ids);
    assert_eq!(set.len(), ids.len() * (ids.len() - 1) / 2);
    let unique: HashSet<_> = set.pairs.iter().collect();
    assert_eq!(unique.len(), set.len());
    for &a in &ids {
        for &b in &ids {
            if a < b {
                assert!(unique.contains(&(a, b)));
            }
        }
    }
    assert!(set.pairs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(PairSet::from_csv(&set.to_csv()).unwrap(), set);
    assert_eq!(enumerate_ids(&(0..100).collect::<Vec<_>>()).len(), 4950);
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        a in prop::collection::vec(0.01f64..1.0, 1..40),
        seed in any::<u64>(),
        lambda in 0.001f64..1000.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(b.iter().any(|&x| x != 0.0));
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
        let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let nonneg: Vec<f64> = b.iter().map(|x| x.abs()).collect();
        let s = cosine_similarity(&a, &nonneg).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn pair_count_is_k_choose_two(k in 2usize..60) {
        let ids: Vec<ItemId> = (0..k as ItemId).map(|i| i * 3 + 1).collect();
        prop_assert_eq!(enumerate_ids(&ids).len(), k * (k - 1) / 2);
    }
}
