use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::max_rel_error;
use crate::ndgrad::softmax_lastdim;

/// Every permutation in lexicographic order; the first strict minimum wins,
/// so ties resolve to the lexicographically smallest assignment.
pub(crate) fn brute_force(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    fn rec(cost: &[f64], n: usize, prefix: &mut Vec<usize>, used: &mut [bool], best: &mut (Vec<usize>, f64)) {
        if prefix.len() == n {
            let c: f64 = prefix.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            if c < best.1 {
                *best = (prefix.clone(), c);
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(cost, n, prefix, used, best);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    rec(cost, n, &mut Vec::new(), &mut vec![false; n], &mut best);
    best
}

fn item(class: Action, a: [f64; 2]) -> GroundTruthItem {
    GroundTruthItem {
        class: Some(class),
        modality: Some(a),
    }
}

fn onehot(c: usize) -> Vec<f64> {
    let mut p = vec![0.0; NUM_CLASSES];
    p[c] = 1.0;
    p
}

/// Random normalized class rows and modality rows for `rows` slots.
fn random_slots(rng: &mut ChaCha8Rng, rows: usize) -> (Tensor, Tensor) {
    let logits = Tensor::new(
        vec![rows, NUM_CLASSES],
        (0..rows * NUM_CLASSES).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let modal = Tensor::new(vec![rows, 2], (0..rows * 2).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    (softmax_lastdim(&logits).unwrap(), modal)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<GroundTruthItem> {
    let real = rng.gen_range(0..=n.min(3));
    let mut items: Vec<GroundTruthItem> = (0..real)
        .map(|_| {
            let w = rng.gen_range(0.0..1.0);
            item(Action::from_index(rng.gen_range(0..4)).unwrap(), [w, 1.0 - w])
        })
        .collect();
    items.resize(n, GroundTruthItem::NULL);
    items.shuffle(rng);
    items
}

fn loss_value(sets: &[Vec<GroundTruthItem>], probs: &Tensor, modal: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (p, m) = (tape.constant(probs.clone()), tape.constant(modal.clone()));
    let (l, _) = matching_loss(&mut tape, sets, p, m).unwrap();
    tape.value(l).item()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(t.len());
    for &i in perm {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn gt_set_pads_and_scores_distance() {
    let plan = OraclePlan {
        actions: vec![Action::MoveForward],
        geodesic: 6,
    };
    let set = build_gt_set(&plan, 1, 10.0, 4);
    assert_eq!(set.len(), 4);
    assert_eq!(set[0], item(Action::MoveForward, [0.5, 0.5]));
    assert!(set[1..].iter().all(GroundTruthItem::is_null));

    let adjacent = OraclePlan {
        actions: vec![Action::Stop],
        geodesic: 1,
    };
    assert_eq!(build_gt_set(&adjacent, 1, 10.0, 2)[0], item(Action::Stop, [0.0, 1.0]));
    let far = OraclePlan {
        actions: vec![Action::TurnLeft, Action::TurnRight],
        geodesic: 11,
    };
    let set = build_gt_set(&far, 1, 10.0, 2);
    assert_eq!(set[1], item(Action::TurnRight, [1.0, 0.0]));
    let truncated = build_gt_set(&far, 1, 10.0, 1);
    assert_eq!(truncated, vec![item(Action::TurnLeft, [1.0, 0.0])]);
}

#[test]
fn pair_cost_examples() {
    let gt = item(Action::TurnLeft, [0.3, 0.7]);
    assert_eq!(pair_cost(&gt, &onehot(1), &[0.3, 0.7]).unwrap(), -1.0);
    assert_eq!(pair_cost(&GroundTruthItem::NULL, &onehot(2), &[0.9, 0.1]).unwrap(), 0.0);
    let probs = [0.1, 0.5, 0.2, 0.1, 0.1];
    let c = pair_cost(&gt, &probs, &[0.5, 0.5]).unwrap();
    assert!((c - (-0.3)).abs() < 1e-15, "{c}");
    assert!(matches!(
        pair_cost(&gt, &[0.5, 0.5, 0.5, 0.0, 0.0], &[0.0, 1.0]),
        Err(MatchError::Numeric(_))
    ));
    assert!(matches!(pair_cost(&gt, &onehot(0), &[0.0]), Err(MatchError::Shape(_))));
}

#[test]
fn hungarian_small_cases() {
    let m = hungarian(&[3.5], 1).unwrap();
    assert_eq!((m.assignment, m.cost), (vec![0], 3.5));
    let m = hungarian(&[1.0, 2.0, 2.0, 1.0], 2).unwrap();
    assert_eq!((m.assignment, m.cost), (vec![0, 1], 2.0));
    let m = hungarian(&[0.0; 16], 4).unwrap();
    assert_eq!(m.assignment, vec![0, 1, 2, 3]);
    let m = hungarian(&[5.0, 1.0, 1.0, 5.0], 2).unwrap();
    assert_eq!((m.assignment, m.cost), (vec![1, 0], 2.0));
    assert!(matches!(hungarian(&[1.0, f64::NAN, 0.0, 0.0], 2), Err(MatchError::Numeric(_))));
    assert!(matches!(hungarian(&[1.0, 2.0, 3.0], 2), Err(MatchError::Shape(_))));
    assert!(matches!(hungarian(&[], 0), Err(MatchError::Shape(_))));
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let cost: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = hungarian(&cost, 6).unwrap();
        let (perm, best) = brute_force(&cost, 6);
        assert_eq!(m.assignment, perm);
        assert_eq!(m.cost, best);
    }
}

#[test]
fn ties_resolve_to_lexicographically_smallest() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 2..=6 {
        for _ in 0..100 {
            let cost: Vec<f64> = (0..n * n).map(|_| f64::from(rng.gen_range(0..3))).collect();
            let m = hungarian(&cost, n).unwrap();
            assert_eq!((m.assignment, m.cost), brute_force(&cost, n), "{cost:?}");
        }
    }
}

proptest! {
    #[test]
    fn hungarian_never_beaten(n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let m = hungarian(&cost, n).unwrap();
        let mut sorted = m.assignment.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(m.cost <= brute_force(&cost, n).1 + 1e-12);
    }

    #[test]
    fn loss_is_order_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=5);
        let b = rng.gen_range(1..=3);
        let sets: Vec<_> = (0..b).map(|_| random_set(&mut rng, n)).collect();
        let (probs, modal) = random_slots(&mut rng, b * n);
        let base = loss_value(&sets, &probs, &modal);

        let mut perm: Vec<usize> = Vec::new();
        for s in 0..b {
            let mut p: Vec<usize> = (s * n..(s + 1) * n).collect();
            p.shuffle(&mut rng);
            perm.extend(p);
        }
        let slots = loss_value(&sets, &permute_rows(&probs, &perm), &permute_rows(&modal, &perm));
        prop_assert_eq!(slots.to_bits(), base.to_bits());

        let mut reordered = sets.clone();
        for s in &mut reordered {
            s.shuffle(&mut rng);
        }
        prop_assert_eq!(loss_value(&reordered, &probs, &modal).to_bits(), base.to_bits());
    }
}

#[test]
fn all_null_sets_give_zero_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (probs, modal) = random_slots(&mut rng, 6);
    let mut tape = Tape::new();
    let (p, m) = (tape.leaf(probs), tape.leaf(modal));
    let sets = vec![vec![GroundTruthItem::NULL; 3]; 2];
    let (l, diag) = matching_loss(&mut tape, &sets, p, m).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    assert_eq!(diag.null_fraction, 1.0);
    tape.backward(l).unwrap();
    for v in [p, m] {
        assert!(tape.grad(v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn perfect_slots_score_minus_item_count() {
    let sets = vec![vec![
        GroundTruthItem::NULL,
        item(Action::TurnRight, [0.2, 0.8]),
        item(Action::MoveForward, [0.2, 0.8]),
    ]];
    // Slots listed in a different order than the items.
    let mut probs = onehot(0);
    probs.extend(onehot(4));
    probs.extend(onehot(2));
    let probs = Tensor::new(vec![3, NUM_CLASSES], probs).unwrap();
    let modal = Tensor::new(vec![3, 2], vec![0.2, 0.8, 0.5, 0.5, 0.2, 0.8]).unwrap();
    assert_eq!(loss_value(&sets, &probs, &modal), -2.0);

    let mut tape = Tape::new();
    let (p, m) = (tape.constant(probs), tape.constant(modal));
    let (_, diag) = matching_loss(&mut tape, &sets, p, m).unwrap();
    assert_eq!(diag, MatchDiagnostics { mean_cost: -2.0, null_fraction: 1.0 / 3.0 });
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sets: Vec<_> = (0..2)
        .map(|_| {
            let mut s = vec![
                item(Action::MoveForward, [0.3, 0.7]),
                item(Action::TurnLeft, [0.9, 0.1]),
            ];
            s.push(GroundTruthItem::NULL);
            s
        })
        .collect();
    let logits = Tensor::new(vec![6, NUM_CLASSES], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let raw = Tensor::new(vec![6, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let err = max_rel_error(&[logits, raw], |t, v| {
        let p = t.softmax(v[0])?;
        let m = t.sigmoid(v[1])?;
        let (l, _) = matching_loss(t, &sets, p, m).map_err(|e| match e {
            MatchError::Grad(g) => g,
            other => GradError::Training(other.to_string()),
        })?;
        Ok(l)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn raising_matched_probability_never_raises_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = 4;
        let sets = vec![random_set(&mut rng, n)];
        let (probs, modal) = random_slots(&mut rng, n);
        let cost = cost_matrix(&sets[0], probs.data(), modal.data()).unwrap();
        let m = hungarian(&cost, n).unwrap();
        let Some(i) = sets[0].iter().position(|g| !g.is_null()) else { continue };
        let (slot, c) = (m.assignment[i], sets[0][i].class.unwrap().index());
        let mut raised = probs.clone();
        let row = &mut raised.data_mut()[slot * NUM_CLASSES..(slot + 1) * NUM_CLASSES];
        let gain = rng.gen_range(0.0..1.0) * (1.0 - row[c]);
        let rest = 1.0 - row[c];
        for (k, p) in row.iter_mut().enumerate() {
            if k == c {
                *p += gain;
            } else if rest > 0.0 {
                *p *= (rest - gain) / rest;
            }
        }
        assert!(loss_value(&sets, &raised, &modal) <= loss_value(&sets, &probs, &modal) + 1e-12);
    }
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (probs, modal) = random_slots(&mut rng, 4);
    let mut tape = Tape::new();
    let (p, m) = (tape.constant(probs), tape.constant(modal));
    let sets = vec![vec![GroundTruthItem::NULL; 3]];
    assert!(matches!(matching_loss(&mut tape, &sets, p, m), Err(MatchError::Shape(_))));
    assert!(matches!(matching_loss(&mut tape, &[], p, m), Err(MatchError::Shape(_))));
}


#[test]
fn tied_matchings_sum_identically() {
    // Both items share a class and both slots sit below the targets on the
    // audio axis, so the two assignments tie exactly.
    let items = vec![item(Action::Stop, [0.809, 0.191]), item(Action::Stop, [0.985, 0.015])];
    let mut probs = vec![0.1, 0.1, 0.1, 0.6, 0.1];
    probs.extend([0.2, 0.1, 0.1, 0.4, 0.2]);
    let probs = Tensor::new(vec![2, NUM_CLASSES], probs).unwrap();
    let modal = Tensor::new(vec![2, 2], vec![0.31, 0.69, 0.07, 0.93]).unwrap();
    let base = loss_value(std::slice::from_ref(&items), &probs, &modal);
    let swapped_items = vec![items[1], items[0]];
    let swapped_slots = (permute_rows(&probs, &[1, 0]), permute_rows(&modal, &[1, 0]));
    assert_eq!(loss_value(std::slice::from_ref(&swapped_items), &probs, &modal).to_bits(), base.to_bits());
    assert_eq!(loss_value(&[items], &swapped_slots.0, &swapped_slots.1).to_bits(), base.to_bits());
    assert_eq!(
        loss_value(&[swapped_items], &swapped_slots.0, &swapped_slots.1).to_bits(),
        base.to_bits()
    );
}
