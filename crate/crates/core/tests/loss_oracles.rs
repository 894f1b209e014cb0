//! Vectorized losses against direct per-element evaluation of the formulas.

use pdlab_autograd::{Graph, ParamStore, Tensor, Var};
use pdlab_core::objectives::{
    id_loss, infonce, init_classifier, l_i2t, l_itc, l_t2i, total_loss_stage2, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Rows {
    (0..b)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Each anchor: softmax over the whole gallery, averaged `-log p` over the
/// gallery items sharing its id; then the mean over anchors.
fn oracle_directional(anchors: &Rows, gallery: &Rows, ids: &[usize], scale: f64) -> f64 {
    let b = ids.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|a| scale * cos(&anchors[i], &gallery[a])).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let mut acc = 0.0;
        let mut count = 0;
        for p in 0..b {
            if ids[p] == ids[i] {
                acc += logits[p] - log_z;
                count += 1;
            }
        }
        total += -acc / count as f64;
    }
    total / b as f64
}

fn oracle_id(text: &Rows, image: &Rows, ids: &[usize], w: &[f64], bias: &[f64], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for feats in [text, image] {
        for (f, &y) in feats.iter().zip(ids) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| bias[c] + f.iter().enumerate().map(|(k, x)| x * w[k * classes + c]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += log_z - logits[y];
            n += 1;
        }
    }
    total / n as f64
}

fn input(g: &mut Graph, rows: &Rows) -> Var {
    g.input(Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap())
}

struct Batch {
    text: Rows,
    image: Rows,
    ids: Vec<usize>,
    scale: f64,
    classes: usize,
}

fn random_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..=16);
    let d = rng.gen_range(2..=12);
    let classes = rng.gen_range(1..=6);
    Batch {
        text: unit_rows(&mut rng, b, d),
        image: unit_rows(&mut rng, b, d),
        ids: (0..b).map(|_| rng.gen_range(0..classes)).collect(),
        scale: rng.gen_range(0.5..30.0),
        classes,
    }
}

fn classifier(b: &Batch, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_classifier(&mut store, b.text[0].len(), b.classes, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for v in store.get_mut(CLASSIFIER_BIAS).unwrap().data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    store
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

pub fn check_random_batches() {
    for seed in 0..100 {
        let b = random_batch(seed);
        let store = classifier(&b, seed);
        let mut g = Graph::new();
        let (t, i) = (input(&mut g, &b.text), input(&mut g, &b.image));
        let s = g.scalar(b.scale);

        let want_t2i = oracle_directional(&b.text, &b.image, &b.ids, b.scale);
        let want_i2t = oracle_directional(&b.image, &b.text, &b.ids, b.scale);
        let w = store.get(CLASSIFIER_WEIGHT).unwrap().data().to_vec();
        let bias = store.get(CLASSIFIER_BIAS).unwrap().data().to_vec();
        let want_id = oracle_id(&b.text, &b.image, &b.ids, &w, &bias, b.classes);
        let diag: Vec<usize> = (0..b.ids.len()).collect();
        let want_nce = oracle_directional(&b.text, &b.image, &diag, b.scale)
            + oracle_directional(&b.image, &b.text, &diag, b.scale);

        let got_t2i = l_t2i(&mut g, t, i, &b.ids, s).unwrap();
        let got_i2t = l_i2t(&mut g, t, i, &b.ids, s).unwrap();
        let got_itc = l_itc(&mut g, t, i, &b.ids, s).unwrap();
        let got_id = id_loss(&mut g, &store, t, i, &b.ids).unwrap();
        let got_total = total_loss_stage2(&mut g, &store, t, i, &b.ids, s, 0.1).unwrap();
        let got_nce = infonce(&mut g, t, i, s).unwrap();

        assert!(close(value(&g, got_t2i), want_t2i, 1e-10), "t2i seed {seed}");
        assert!(close(value(&g, got_i2t), want_i2t, 1e-10), "i2t seed {seed}");
        assert!(close(value(&g, got_itc), want_t2i + want_i2t, 1e-10), "itc seed {seed}");
        assert!(close(value(&g, got_id), want_id, 1e-10), "id seed {seed}");
        assert!(
            close(value(&g, got_total.total), want_t2i + want_i2t + 0.1 * want_id, 1e-10),
            "total seed {seed}"
        );
        assert!(close(value(&g, got_nce), want_nce, 1e-10), "infonce seed {seed}");
    }
}

#[test]
fn hundred_random_batches_match_the_oracles() {
    check_random_batches();
}

pub fn check_infonce_on_unique_ids() {
    for seed in 0..50 {
        let mut b = random_batch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct but arbitrary labels
        let n = b.ids.len();
        b.ids = rand::seq::index::sample(&mut rng, 1000, n).into_vec();
        let mut g = Graph::new();
        let (t, i) = (input(&mut g, &b.text), input(&mut g, &b.image));
        let s = g.scalar(b.scale);
        let itc = l_itc(&mut g, t, i, &b.ids, s).unwrap();
        let nce = infonce(&mut g, t, i, s).unwrap();
        assert_eq!(value(&g, itc), value(&g, nce), "seed {seed}");
    }
}

#[test]
fn infonce_equals_itc_exactly_when_ids_are_unique() {
    check_infonce_on_unique_ids();
}

#[test]
fn symmetric_similarities_give_equal_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = unit_rows(&mut rng, 6, 5);
    let ids = [0, 0, 1, 2, 2, 2];
    let mut g = Graph::new();
    let (t, i) = (input(&mut g, &feats), input(&mut g, &feats));
    let s = g.scalar(7.0);
    let a = l_t2i(&mut g, t, i, &ids, s).unwrap();
    let b = l_i2t(&mut g, t, i, &ids, s).unwrap();
    assert!((value(&g, a) - value(&g, b)).abs() < 1e-12);
}

#[test]
fn total_is_itc_plus_weighted_id() {
    let b = random_batch(11);
    let store = classifier(&b, 3);
    let mut g = Graph::new();
    let (t, i) = (input(&mut g, &b.text), input(&mut g, &b.image));
    let s = g.scalar(b.scale);
    let parts = total_loss_stage2(&mut g, &store, t, i, &b.ids, s, 0.1).unwrap();
    let itc = value(&g, parts.itc.unwrap());
    let id = value(&g, parts.id.unwrap());
    assert!((value(&g, parts.total) - (itc + 0.1 * id)).abs() < 1e-12);
}

#[test]
fn saturated_identity_similarity_drives_infonce_to_zero() {
    let eye: Rows = (0..4).map(|r| (0..4).map(|c| f64::from(r == c)).collect()).collect();
    let mut g = Graph::new();
    let (t, i) = (input(&mut g, &eye), input(&mut g, &eye));
    let s = g.scalar(200.0);
    let l = infonce(&mut g, t, i, s).unwrap();
    assert!(value(&g, l) < 1e-12);
}

#[test]
fn empty_positive_set_is_impossible_for_aligned_batches() {
    // Every anchor's own pair is a positive, so aligned ids always pass.
    let b = random_batch(2);
    let mut g = Graph::new();
    let (t, i) = (input(&mut g, &b.text), input(&mut g, &b.image));
    let s = g.scalar(1.0);
    assert!(l_t2i(&mut g, t, i, &b.ids, s).is_ok());
    assert!(l_t2i(&mut g, t, i, &b.ids[1..], s).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000) {
        let b = random_batch(seed);
        let store = classifier(&b, seed);
        let mut g = Graph::new();
        let (t, i) = (input(&mut g, &b.text), input(&mut g, &b.image));
        let s = g.scalar(b.scale);
        let p = total_loss_stage2(&mut g, &store, t, i, &b.ids, s, 0.1).unwrap();
        let nce = infonce(&mut g, t, i, s).unwrap();
        for v in [p.total, p.itc.unwrap(), p.id.unwrap(), nce] {
            prop_assert!(value(&g, v) >= -1e-12);
        }
    }

    #[test]
    fn batch_order_does_not_change_any_loss(seed in 0u64..10_000) {
        let b = random_batch(seed);
        let store = classifier(&b, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..b.ids.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = Batch {
            text: perm.iter().map(|&k| b.text[k].clone()).collect(),
            image: perm.iter().map(|&k| b.image[k].clone()).collect(),
            ids: perm.iter().map(|&k| b.ids[k]).collect(),
            scale: b.scale,
            classes: b.classes,
        };
        let eval = |x: &Batch| -> [f64; 3] {
            let mut g = Graph::new();
            let (t, i) = (input(&mut g, &x.text), input(&mut g, &x.image));
            let s = g.scalar(x.scale);
            let p = total_loss_stage2(&mut g, &store, t, i, &x.ids, s, 0.1).unwrap();
            let nce = infonce(&mut g, t, i, s).unwrap();
            [value(&g, p.total), value(&g, p.id.unwrap()), value(&g, nce)]
        };
        let (a, c) = (eval(&b), eval(&permuted));
        for k in 0..3 {
            prop_assert!((a[k] - c[k]).abs() < 1e-12, "{} vs {}", a[k], c[k]);
        }
    }
}
