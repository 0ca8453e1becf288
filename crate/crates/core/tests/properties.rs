//! Property tests for quantization, serialization, the exemplar store,
//! stream ordering and the statistics helpers.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use common::*;
use crumb::codebook::{Codebook, Geometry, IndexMap, IndexWidth};
use crumb::eval::{batch_paired_ttest, filter_runs, top1, FILTER_THRESHOLDS};
use crumb::nn::softmax_cross_entropy;
use crumb::replay::{capacity_from_budget, Exemplar, ExemplarStore, Payload, PayloadKind};
use crumb::stream::{build_tasks, Protocol, Sample};
use crumb::Tensor;
use proptest::prelude::*;

fn geometry_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    // (block_dim, chunk_slots, width, height)
    (1usize..6, 1usize..4, 1usize..5, 1usize..5)
}

fn book_from_rows(rows: &[Vec<f32>]) -> Codebook {
    let d = rows[0].len();
    Codebook::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()).unwrap()
}

fn nonzero_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-2.0f32..2.0, d), n)
        .prop_filter("zero row", |rows| rows.iter().all(|r| r.iter().any(|&v| v != 0.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantize_matches_brute_force(
        (d, slots, w, h) in geometry_strategy(),
        n in 1usize..40,
        dup in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let geom = Geometry::new(d * slots, w, h, d).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..n)
            .map(|_| random_tensor(&[d], &mut r).into_data())
            .collect();
        for row in rows.iter_mut() {
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
        }
        if dup && n > 1 {
            // exact duplicates force ties
            rows[n - 1] = rows[0].clone();
        }
        let book = book_from_rows(&rows);
        let z = random_tensor(&[d * slots, w, h], &mut r);
        let (m, zt) = book.quantize(&z, &geom).unwrap();
        let expected = brute_force_indices(&z, &rows, d);
        prop_assert_eq!(m.indices(), expected.as_slice());
        let rebuilt = ref_reconstruct(&m, &book);
        prop_assert_eq!(zt.data(), rebuilt.as_slice());
        prop_assert_eq!(&book.reconstruct(&m).unwrap(), &zt);
        if dup && n > 1 {
            prop_assert!(m.indices().iter().all(|&k| k as usize != n - 1));
        }
    }

    #[test]
    fn reconstruction_chunks_are_codebook_rows(
        (d, slots, w, h) in geometry_strategy(),
        rows in (1usize..6).prop_flat_map(|d| (Just(d), 1usize..20)).prop_flat_map(|(d, n)| nonzero_rows(n, d)),
        seed in any::<u64>(),
    ) {
        let d_rows = rows[0].len();
        let _ = d;
        let geom = Geometry::new(d_rows * slots, w, h, d_rows).unwrap();
        let book = book_from_rows(&rows);
        let z = random_tensor(&geom.shape(), &mut rng(seed));
        let (_, zt) = book.quantize(&z, &geom).unwrap();
        let zs = zt.data();
        for f in 0..slots {
            for x in 0..w {
                for y in 0..h {
                    let chunk: Vec<f32> = (0..d_rows).map(|i| zs[((f * d_rows + i) * w + x) * h + y]).collect();
                    prop_assert!(rows.iter().any(|r| r.iter().zip(&chunk).all(|(a, b)| a.to_bits() == b.to_bits())));
                }
            }
        }
    }

    #[test]
    fn index_map_record_round_trip(
        (d, slots, w, h) in geometry_strategy(),
        wide in any::<bool>(),
        label in any::<u32>(),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let geom = Geometry::new(d * slots, w, h, d).unwrap();
        let n = if wide { 300 } else { 256 };
        let width = IndexWidth::for_blocks(n);
        prop_assert_eq!(width, if wide { IndexWidth::U16 } else { IndexWidth::U8 });
        let mut r = rng(seed);
        let idx: Vec<u16> = (0..geom.positions()).map(|_| r.random_range(0..n as u16)).collect();
        let m = IndexMap::new(idx, width, geom).unwrap();
        prop_assert_eq!(m.byte_size(), geom.positions() * if wide { 2 } else { 1 });
        let mut buf = Vec::new();
        m.write_record(&mut buf, label).unwrap();
        let (back, l) = IndexMap::read_record(&mut buf.as_slice(), d, Path::new("mem")).unwrap();
        prop_assert_eq!(l, label);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn capacity_formula(
        n_r in 0u64..500, side in 1u64..300, b in 0u64..2048, d in 1u64..64,
        s_mult in 1u64..64, w in 1u64..20, h in 1u64..20,
    ) {
        let s = d * s_mult;
        let budget = (n_r * 3 * side * side) as f64 - (b * d) as f64;
        let per = (s * w * h / d) as f64;
        let expected = if budget <= 0.0 { 0 } else { (budget / per).floor() as u64 };
        prop_assert_eq!(capacity_from_budget(n_r, side, side, b, d, s, w, h).unwrap(), expected);
    }

    #[test]
    fn cross_entropy_matches_reference(logits in prop::collection::vec(-30.0f32..30.0, 2..12), t in 0usize..12) {
        let t = t % logits.len();
        let (loss, grad) = softmax_cross_entropy(&Tensor::from_slice(&logits), t).unwrap();
        let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let reference = ref_cross_entropy(&l64, t);
        prop_assert!((loss as f64 - reference).abs() <= 1e-5 * reference.abs().max(1.0));
        let total: f64 = grad.data().iter().map(|&g| g as f64).sum();
        prop_assert!(total.abs() < 1e-5);
    }

    #[test]
    fn tensor_container_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let t = random_tensor(&shape, &mut rng(seed));
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }
}

/// Rows whose pairwise cosine stays below `limit`.
fn well_separated(rows: &[Vec<f32>], limit: f64) -> bool {
    let norm = |r: &[f32]| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    rows.iter().enumerate().all(|(i, a)| {
        rows[i + 1..].iter().all(|b| {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            dot / (norm(a) * norm(b)) < limit
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reconstruct_then_quantize_is_identity(
        d in 2usize..6, slots in 1usize..4, w in 1usize..5, h in 1usize..5,
        n in 1usize..24, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| random_tensor(&[d], &mut r).into_data()).collect();
        prop_assume!(rows.iter().all(|row| row.iter().any(|&v| v != 0.0)));
        prop_assume!(well_separated(&rows, 0.999));
        let book = book_from_rows(&rows);
        let geom = Geometry::new(d * slots, w, h, d).unwrap();
        let idx: Vec<u16> = (0..geom.positions()).map(|_| r.random_range(0..n as u16)).collect();
        let m = IndexMap::new(idx, book.index_width(), geom).unwrap();
        let (back, _) = book.quantize(&book.reconstruct(&m).unwrap(), &geom).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Insert(u32),
    Sample(usize),
    Rebalance,
}

fn op_strategy(classes: u32) -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => (0..classes).prop_map(Op::Insert),
        2 => (1usize..8).prop_map(Op::Sample),
        1 => Just(Op::Rebalance),
    ]
}

fn features(id: u32) -> Payload {
    Payload::Features(Tensor::from_slice(&[id as f32]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_respects_capacity_and_balance(
        capacity in 0usize..40,
        classes in 1u32..8,
        ops in prop::collection::vec(op_strategy(8), 1..400),
        seed in any::<u64>(),
    ) {
        let mut store = ExemplarStore::new(capacity, PayloadKind::Features, seed);
        // classes that lost an exemplar since the last rebalance
        let mut evicted: BTreeSet<u32> = BTreeSet::new();
        for (step, op) in ops.iter().enumerate() {
            match *op {
                Op::Insert(c) => {
                    let c = c % classes;
                    let before = store.class_counts();
                    store.insert(Exemplar { label: c, payload: features(step as u32) }).unwrap();
                    let after = store.class_counts();
                    for (cls, &n) in &before {
                        let now = after.get(cls).copied().unwrap_or(0);
                        if now < n || (*cls == c && now == n) {
                            evicted.insert(*cls);
                        }
                    }
                }
                Op::Sample(b) => {
                    if store.is_empty() {
                        prop_assert!(store.sample_batch(b).is_err());
                    } else {
                        prop_assert_eq!(store.sample_batch(b).unwrap().len(), b);
                    }
                }
                Op::Rebalance => {
                    store.rebalance();
                    if let Some(quota) = capacity.checked_div(store.seen_classes().len()) {
                        let bound = quota + 1;
                        for (cls, n) in store.class_counts() {
                            prop_assert!(n <= bound, "class {} holds {} > {}", cls, n, bound);
                        }
                    }
                    evicted.clear();
                }
            }
            prop_assert!(store.len() <= capacity);
            prop_assert_eq!(store.len(), store.iter().count());
            let counts = store.class_counts();
            let max = counts.values().copied().max().unwrap_or(0);
            for cls in &evicted {
                let n = counts.get(cls).copied().unwrap_or(0);
                prop_assert!(n + 1 >= max, "evicted class {} holds {} while the largest holds {}", cls, n, max);
            }
        }
    }

    #[test]
    fn rebalance_never_empties_a_class(capacity in 1usize..60, classes in 1u32..10, per_class in 1usize..12, seed in any::<u64>()) {
        let mut store = ExemplarStore::new(capacity, PayloadKind::Features, seed);
        for c in 0..classes {
            for i in 0..per_class {
                store.insert(Exemplar { label: c, payload: features(i as u32) }).unwrap();
            }
        }
        store.rebalance();
        let base = capacity / store.seen_classes().len();
        for (cls, n) in store.class_counts() {
            prop_assert!(n <= base + 1);
            if base >= 1 {
                prop_assert!(n >= 1, "class {} emptied", cls);
            }
        }
    }
}

fn synthetic_samples(clips: &[(u32, u32, u32)]) -> Vec<Sample> {
    // (class, object, frames): one instance per object
    let mut out = Vec::new();
    for &(class, object, frames) in clips {
        for f in 0..frames {
            out.push(Sample {
                image: Tensor::from_slice(&[f as f32]),
                class_id: class,
                object_id: object,
                instance_id: 0,
                frame_index: f,
            });
        }
    }
    out
}

fn clip_strategy() -> impl Strategy<Value = Vec<(u32, u32, u32)>> {
    prop::collection::vec((0u32..6, 1u32..6), 2..16).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (c, frames))| (c, i as u32, frames))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedule_invariants(clips in clip_strategy(), per_task in 1usize..3, epochs in 1usize..4, seed in any::<u64>()) {
        let mut samples = synthetic_samples(&clips);
        // present clips in scrambled storage order
        samples.reverse();
        let distinct: BTreeSet<u32> = samples.iter().map(|s| s.class_id).collect();
        prop_assume!(distinct.len() >= per_task);
        let inst = build_tasks(&samples, per_task, Protocol::ClassInstance, epochs, seed).unwrap();
        let iid = build_tasks(&samples, per_task, Protocol::ClassIid, epochs, seed).unwrap();
        prop_assert_eq!(inst.tasks.len(), iid.tasks.len());
        let mut covered = BTreeSet::new();
        for (t, (a, b)) in inst.tasks.iter().zip(&iid.tasks).enumerate() {
            prop_assert_eq!(&a.classes, &b.classes);
            let mut sa = a.order.clone();
            let mut sb = b.order.clone();
            sa.sort_unstable();
            sb.sort_unstable();
            prop_assert_eq!(&sa, &sb);
            let reps = if t == 0 { epochs } else { 1 };
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &a.order {
                *counts.entry(i).or_default() += 1;
                prop_assert!(a.classes.contains(&samples[i].class_id));
            }
            prop_assert!(counts.values().all(|&c| c == reps));
            covered.extend(counts.keys().copied());

            // frames of a clip appear in temporal order within each epoch
            let epoch_len = a.order.len() / reps;
            for epoch in a.order.chunks(epoch_len) {
                let mut last: BTreeMap<u32, u32> = BTreeMap::new();
                let mut finished: BTreeSet<u32> = BTreeSet::new();
                let mut current: Option<u32> = None;
                for &i in epoch {
                    let s = &samples[i];
                    if current != Some(s.object_id) {
                        if let Some(prev) = current {
                            finished.insert(prev);
                        }
                        prop_assert!(!finished.contains(&s.object_id), "clip split");
                        current = Some(s.object_id);
                    }
                    if let Some(&prev) = last.get(&s.object_id) {
                        prop_assert!(s.frame_index > prev);
                    }
                    last.insert(s.object_id, s.frame_index);
                }
            }
        }
        prop_assert_eq!(covered.len(), samples.len());
    }

    #[test]
    fn accuracy_is_order_invariant(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..200), seed in any::<u64>()) {
        let (p, l): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        crumb::stream::fisher_yates(&mut idx, &mut rng(seed));
        let p2: Vec<u32> = idx.iter().map(|&i| p[i]).collect();
        let l2: Vec<u32> = idx.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(top1(&p, &l).unwrap(), top1(&p2, &l2).unwrap());
    }

    #[test]
    fn ttest_is_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let b: Vec<f64> = a.iter().map(|_| r.random_range(0.0..1.0)).collect();
        let x = batch_paired_ttest(&a, &b).unwrap();
        let y = batch_paired_ttest(&b, &a).unwrap();
        prop_assert_eq!(x.t, -y.t);
        prop_assert_eq!(x.p, y.p);
        prop_assert!((0.0..=1.0).contains(&x.p));
        prop_assert_eq!(batch_paired_ttest(&a, &a).unwrap().p, 1.0);
    }

    #[test]
    fn filter_keeps_something(acc in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let kept = filter_runs(&acc, &FILTER_THRESHOLDS);
        prop_assert!(!kept.is_empty());
        let threshold = FILTER_THRESHOLDS.iter().copied().find(|&t| acc.iter().any(|&a| a >= t));
        match threshold {
            Some(t) => prop_assert!(kept.iter().all(|&i| acc[i] >= t)),
            None => prop_assert_eq!(kept.len(), acc.len()),
        }
    }
}

#[test]
fn null_pvalues_are_not_anticonservative() {
    use rand::Rng;
    let mut r = rng(2024);
    let mut small = 0;
    for _ in 0..200 {
        // per-batch accuracies of two chance-level classifiers on 100-image batches
        let series = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..30)
                .map(|_| (0..100).filter(|_| r.random_range(0..10) == 0).count() as f64 / 100.0)
                .collect()
        };
        let a = series(&mut r);
        let b = series(&mut r);
        if batch_paired_ttest(&a, &b).unwrap().p < 0.01 {
            small += 1;
        }
    }
    assert!(small as f64 / 200.0 <= 0.03, "{small} of 200 null p-values below 0.01");
}
