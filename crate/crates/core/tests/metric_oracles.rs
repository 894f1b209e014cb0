//! Retrieval metrics against definitions written in terms of item ranks.

use pdlab_core::metrics::{average_precision, cmc_at_k, inverse_negative_penalty, m_inp, mean_ap, rank_gallery, MetricsReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    sim: Vec<Vec<f64>>,
    qids: Vec<usize>,
    gids: Vec<usize>,
}

/// Similarities on a coarse grid so ties are common.
fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = rng.gen_range(1..=50);
    let g = rng.gen_range(1..=50);
    let people = rng.gen_range(1..=g.min(8));
    let gids: Vec<usize> = (0..g).map(|j| if j < people { j } else { rng.gen_range(0..people) }).collect();
    let qids = (0..q).map(|_| rng.gen_range(0..people)).collect();
    let levels = rng.gen_range(2..=20);
    let sim = (0..q)
        .map(|_| (0..g).map(|_| rng.gen_range(0..levels) as f64 / levels as f64 - 0.5).collect())
        .collect();
    Instance { sim, qids, gids }
}

/// 1-based position of gallery item `j`: items scoring higher, or equal with
/// a smaller index, come first.
fn rank_of(row: &[f64], j: usize) -> usize {
    1 + (0..row.len())
        .filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j))
        .count()
}

struct Oracle {
    rank1: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
    minp: f64,
}

fn oracle(inst: &Instance) -> Oracle {
    let n = inst.qids.len();
    let (mut hits1, mut hits5, mut hits10) = (0usize, 0usize, 0usize);
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    for (row, &qid) in inst.sim.iter().zip(&inst.qids) {
        let mut ranks: Vec<usize> = (0..row.len())
            .filter(|&j| inst.gids[j] == qid)
            .map(|j| rank_of(row, j))
            .collect();
        ranks.sort_unstable();
        let best = ranks[0];
        hits1 += usize::from(best <= 1);
        hits5 += usize::from(best <= 5);
        hits10 += usize::from(best <= 10);
        let mut ap = 0.0;
        for &r in &ranks {
            let above = ranks.iter().filter(|&&o| o <= r).count();
            ap += above as f64 / r as f64;
        }
        ap_sum += ap / ranks.len() as f64;
        inp_sum += ranks.len() as f64 / *ranks.last().unwrap() as f64;
    }
    let pct = |x: f64| x / n as f64 * 100.0;
    Oracle {
        rank1: pct(hits1 as f64),
        rank5: pct(hits5 as f64),
        rank10: pct(hits10 as f64),
        map: pct(ap_sum),
        minp: pct(inp_sum),
    }
}

pub fn check_random_instances() {
    for seed in 0..200 {
        let inst = instance(seed);
        let ranked = rank_gallery(&inst.sim, &inst.qids, &inst.gids).unwrap();
        let want = oracle(&inst);
        assert_eq!(cmc_at_k(&ranked, 1), want.rank1, "rank1 seed {seed}");
        assert_eq!(cmc_at_k(&ranked, 5), want.rank5, "rank5 seed {seed}");
        assert_eq!(cmc_at_k(&ranked, 10), want.rank10, "rank10 seed {seed}");
        assert_eq!(mean_ap(&ranked), want.map, "mAP seed {seed}");
        assert_eq!(m_inp(&ranked), want.minp, "mINP seed {seed}");
        let report = MetricsReport::from_ranking(&ranked, inst.gids.len());
        assert_eq!((report.rank1, report.map, report.minp), (want.rank1, want.map, want.minp));
    }
}

#[test]
fn two_hundred_random_instances_match_exactly() {
    check_random_instances();
}

pub fn check_hand_case() {
    let rel = [false, true, true, false];
    // (1/2 + 2/3) / 2 rounds differently from 7/12 in the last bit.
    assert!((average_precision(&rel) - 7.0 / 12.0).abs() < 1e-15);
    assert_eq!(inverse_negative_penalty(&rel), 2.0 / 3.0);
}

#[test]
fn hand_case_relevant_at_ranks_two_and_three() {
    check_hand_case();
}

#[test]
fn single_relevant_at_rank_one_is_perfect() {
    let ranked = rank_gallery(&[vec![0.9, 0.1, 0.2]], &[4], &[4, 5, 6]).unwrap();
    assert_eq!(cmc_at_k(&ranked, 1), 100.0);
    assert_eq!(mean_ap(&ranked), 100.0);
    assert_eq!(m_inp(&ranked), 100.0);
}

#[test]
fn ties_break_by_gallery_index() {
    let ranked = rank_gallery(&[vec![0.5, 0.5, 0.5]], &[1], &[0, 1, 1]).unwrap();
    assert_eq!(ranked.order[0], vec![0, 1, 2]);
    assert_eq!(cmc_at_k(&ranked, 1), 0.0);
}

#[test]
fn query_without_match_is_an_error() {
    assert!(rank_gallery(&[vec![0.1, 0.2]], &[9], &[0, 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_rescaling_keeps_every_metric(seed in 0u64..10_000, scale in 0.01f64..100.0, shift in -5.0f64..5.0) {
        let inst = instance(seed);
        // Affine maps preserve order but can merge nearby floats; use an
        // exactly representable scale to keep ties intact.
        let s = scale.log2().round().exp2();
        let moved: Vec<Vec<f64>> = inst.sim.iter().map(|r| r.iter().map(|v| v * s + shift.round()).collect()).collect();
        let a = rank_gallery(&inst.sim, &inst.qids, &inst.gids).unwrap();
        let b = rank_gallery(&moved, &inst.qids, &inst.gids).unwrap();
        prop_assert_eq!(&a.order, &b.order);
        prop_assert_eq!(MetricsReport::from_ranking(&a, 0), MetricsReport::from_ranking(&b, 0));
    }

    #[test]
    fn metrics_stay_in_range_and_are_ordered(seed in 0u64..10_000) {
        let inst = instance(seed);
        let ranked = rank_gallery(&inst.sim, &inst.qids, &inst.gids).unwrap();
        let (r1, r5, r10) = (cmc_at_k(&ranked, 1), cmc_at_k(&ranked, 5), cmc_at_k(&ranked, 10));
        prop_assert!(0.0 <= r1 && r1 <= r5 && r5 <= r10 && r10 <= 100.0);
        let (map, minp) = (mean_ap(&ranked), m_inp(&ranked));
        prop_assert!((0.0..=100.0).contains(&map) && (0.0..=100.0).contains(&minp));
        // Both reach 100 exactly when every query lists all its matches first.
        prop_assert_eq!(map == 100.0, minp == 100.0);
    }
}
