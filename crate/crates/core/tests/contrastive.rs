//! Contrastive loss against a straight-line oracle, plus its symmetries.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cclx_core::objectives::contrastive_loss_value;

mod common;

use common::{contrastive_graph as graph_loss, contrastive_oracle as oracle};

fn random_batch(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn fifty_random_batches_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let t = 2 + case % 7;
        let tau = [0.05, 0.07, 1.0][case % 3];
        let a = random_batch(&mut rng, t, 6);
        let b = random_batch(&mut rng, t, 6);
        let want = oracle(&a, &b, tau);
        let got = graph_loss(&a, &b, tau);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
        assert!((contrastive_loss_value(&a, &b, tau).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn single_pair_batch_is_exactly_zero() {
    let a = vec![vec![0.3, -1.2, 4.0]];
    let b = vec![vec![-2.0, 0.5, 0.1]];
    assert_eq!(graph_loss(&a, &b, 0.07), 0.0);
    assert_eq!(contrastive_loss_value(&a, &b, 0.07).unwrap(), 0.0);
}

#[test]
fn orthogonal_pair_of_two_hand_case() {
    let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((want - 0.6266).abs() < 1e-4);
    assert!((graph_loss(&a, &a, 1.0) - want).abs() < 1e-12);
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..7, 2usize..6).prop_flat_map(|(t, d)| {
        let rows = prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), t);
        (rows.clone(), rows)
    })
}

fn nondegenerate(xs: &[Vec<f64>]) -> bool {
    xs.iter().all(|x| x.iter().map(|v| v * v).sum::<f64>() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swapping_languages_leaves_loss_unchanged((a, b) in batch_strategy(), tau in 0.05f64..2.0) {
        prop_assume!(nondegenerate(&a) && nondegenerate(&b));
        let x = graph_loss(&a, &b, tau);
        let y = graph_loss(&b, &a, tau);
        prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    }

    #[test]
    fn joint_permutation_leaves_loss_unchanged((a, b) in batch_strategy(), shift in 1usize..6) {
        prop_assume!(nondegenerate(&a) && nondegenerate(&b));
        let t = a.len();
        let pa: Vec<_> = (0..t).map(|i| a[(i + shift) % t].clone()).collect();
        let pb: Vec<_> = (0..t).map(|i| b[(i + shift) % t].clone()).collect();
        let x = graph_loss(&a, &b, 0.07);
        let y = graph_loss(&pa, &pb, 0.07);
        prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    }

    #[test]
    fn loss_is_nonnegative_and_matches_oracle((a, b) in batch_strategy(), tau in 0.05f64..2.0) {
        prop_assume!(nondegenerate(&a) && nondegenerate(&b));
        let got = graph_loss(&a, &b, tau);
        prop_assert!(got >= -1e-12);
        let want = oracle(&a, &b, tau);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn tighter_positives_lower_the_loss(t in 2usize..7, th1 in 0.0f64..0.78, th2 in 0.0f64..0.78, tau in 0.05f64..2.0) {
        prop_assume!((th1 - th2).abs() > 1e-3);
        // Orthonormal anchors; each partner leans toward the next anchor by `theta`.
        let anchors: Vec<Vec<f64>> = (0..t).map(|i| (0..t).map(|k| f64::from(u8::from(k == i))).collect()).collect();
        let partners = |th: f64| -> Vec<Vec<f64>> {
            (0..t).map(|i| (0..t).map(|k| {
                if k == i { th.cos() } else if k == (i + 1) % t { th.sin() } else { 0.0 }
            }).collect()).collect()
        };
        let (lo, hi) = if th1 < th2 { (th1, th2) } else { (th2, th1) };
        prop_assert!(graph_loss(&anchors, &partners(lo), tau) < graph_loss(&anchors, &partners(hi), tau));
    }
}
