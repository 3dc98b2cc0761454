use lightkg_repro as common;

use std::collections::HashSet;

use lightkg::ckg::INTERACT_NAME;
use lightkg::dataset::SplitDataset;
use lightkg::model::{propagate, score};
use lightkg::objective::TripletBatch;
use lightkg::synthetic::random_bipartite;
use lightkg::trainer::{bpr_layer0_gradient, train_with_validator, TrainConfig};
use lightkg::{CollaborativeKG, EvalSplit, Evaluator, Matrix, ModelConfig, NodeId, NodeSpace, Parameters, RelationScalars, Triplet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// BPR gradient of a LightGCN model written against dense matrices:
/// `dL/dE0 = 1/(L+1) * sum_l (A_hat^T)^l dL/dE*`.
fn reference_bpr_gradient(
    n: usize,
    interactions: &[(NodeId, NodeId)],
    e0: &DMatrix<f64>,
    layers: usize,
    triplets: &[(NodeId, NodeId, NodeId)],
) -> DMatrix<f64> {
    let per_layer = common::lightgcn_layers(n, interactions, e0, layers);
    let mut e_star = DMatrix::zeros(n, e0.ncols());
    for m in &per_layer {
        e_star += m;
    }
    e_star /= (layers + 1) as f64;
    let mut g_star = DMatrix::zeros(n, e0.ncols());
    let m = triplets.len() as f64;
    for &(u, p, q) in triplets {
        let (eu, ep, eq) = (e_star.row(u.index()), e_star.row(p.index()), e_star.row(q.index()));
        let x = eu.dot(&ep) - eu.dot(&eq);
        let c = -1.0 / (1.0 + x.exp()) / m;
        let diff = ep - eq;
        let eu = eu.into_owned();
        let mut r = g_star.row_mut(u.index());
        r += c * diff;
        let mut r = g_star.row_mut(p.index());
        r += c * &eu;
        let mut r = g_star.row_mut(q.index());
        r -= c * &eu;
    }
    // A_hat is symmetric; propagate the upstream gradient layer by layer
    let mut basis = DMatrix::identity(n, n);
    let eye = basis.clone();
    let probe = common::lightgcn_layers(n, interactions, &eye, 1);
    let a_hat = &probe[1];
    let mut total = DMatrix::zeros(n, e0.ncols());
    for _ in 0..=layers {
        total += &basis * &g_star;
        basis = a_hat.transpose() * basis;
    }
    total / (layers + 1) as f64
}

#[test]
fn lightgcn_bpr_gradient_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20 {
        let users = rng.gen_range(2..15);
        let items = rng.gen_range(2..15);
        let edges = rng.gen_range(1..users * items);
        let g = random_bipartite(&mut rng, users, items, edges).unwrap();
        let n = g.num_nodes();
        let layers = trial % 4;
        let params = Parameters {
            layer0: Matrix::from_fn(n, 5, |_, _| rng.gen_range(-1.0..1.0)),
            scalars: RelationScalars::constant(1, 1.0),
        };
        let space = g.space();
        let triplets: Vec<_> = (0..10)
            .map(|_| {
                (
                    space.user(rng.gen_range(0..users)),
                    space.item(rng.gen_range(0..items)),
                    space.item(rng.gen_range(0..items)),
                )
            })
            .collect();
        let got = bpr_layer0_gradient(&g, &params, layers, &TripletBatch { entries: triplets.clone() }).unwrap();
        let inter: Vec<_> = g.interactions().collect();
        let want = reference_bpr_gradient(n, &inter, &common::to_dense(&params.layer0), layers, &triplets);
        let err = common::frobenius_rel_error(&common::to_dense(&got), &want);
        assert!(err < 1e-6, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn evaluator_matches_naive_ranking_on_integer_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let users = rng.gen_range(1..20);
        let items = rng.gen_range(2..40);
        let space = NodeSpace::new(users, items, 0);
        let mut all = HashSet::new();
        for _ in 0..rng.gen_range(1..users * items) {
            all.insert((space.user(rng.gen_range(0..users)), space.item(rng.gen_range(0..items))));
        }
        let mut split = SplitDataset { train: vec![], validation: vec![], test: vec![], seed: 0, total_interactions: all.len() };
        for p in all {
            match rng.gen_range(0..10) {
                0..=5 => split.train.push(p),
                6 | 7 => split.validation.push(p),
                _ => split.test.push(p),
            }
        }
        // small integers keep every dot product exact in any summation order
        let e = Matrix::from_fn(space.len(), 3, |_, _| rng.gen_range(-3..=3) as f64);
        let k = rng.gen_range(1..12);
        let ev = Evaluator::new(space, &split);
        for which in [EvalSplit::Validation, EvalSplit::Test] {
            let relevant_pairs = if which == EvalSplit::Test { &split.test } else { &split.validation };
            let mut naive = Vec::new();
            for u in 0..users {
                let un = space.user(u);
                let relevant: HashSet<usize> = relevant_pairs.iter().filter(|p| p.0 == un).map(|p| p.1.index() - users).collect();
                if relevant.is_empty() {
                    continue;
                }
                let mut masked: HashSet<usize> = split.train.iter().filter(|p| p.0 == un).map(|p| p.1.index() - users).collect();
                if which == EvalSplit::Test {
                    masked.extend(split.validation.iter().filter(|p| p.0 == un).map(|p| p.1.index() - users));
                }
                if masked.len() >= items {
                    continue;
                }
                let scores: Vec<f64> = (0..items).map(|j| score(&e, space, un, space.item(j)).unwrap()).collect();
                naive.push((common::naive_top_k(&scores, &masked, k), relevant));
            }
            match ev.evaluate(&e, which, k) {
                Ok(report) => {
                    let (r, m) = common::naive_metrics(&naive);
                    assert_eq!(report.recall_at_k, r);
                    assert_eq!(report.mrr_at_k, m);
                    assert_eq!(report.num_users_evaluated, naive.len());
                }
                Err(lightkg::Error::Empty(_)) => assert!(naive.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

/// Users 0-2 only touch items 0-2 and users 3-4 only items 3-4. One in-block
/// item per user is held out; the trained model should score it above every
/// out-of-block item.
#[test]
fn planted_blocks_rank_in_block_items_first() {
    let space = NodeSpace::new(5, 5, 0);
    let block = |u: usize| if u < 3 { 0..3 } else { 3..5 };
    let mut wins = 0;
    let mut cases = 0;
    for (shift_a, shift_b) in (0..3).flat_map(|a| (0..2).map(move |b| (a, b))) {
        let held = |u: usize| if u < 3 { (u + shift_a) % 3 } else { 3 + (u - 3 + shift_b) % 2 };
        let train: Vec<_> = (0..5)
            .flat_map(|u| block(u).filter(move |&i| i != held(u)).map(move |i| (space.user(u), space.item(i))))
            .collect();
        let g = CollaborativeKG::new(space, vec![INTERACT_NAME.into()], train.clone(), std::iter::empty::<Triplet>()).unwrap();
        for seed in 0..5u64 {
            let model = ModelConfig { dim: 8, layers: 2, init_seed: seed };
            let cfg = TrainConfig {
                learning_rate: 0.05,
                batch_size: 4,
                max_epochs: 150,
                stopping_patience: 1,
                beta_u: 0.0,
                beta_i: 0.0,
                seed: seed + 100,
                ..TrainConfig::default()
            };
            // always "improving" so the final epoch is kept
            let mut epoch = 0.0;
            let mut v = |_: &CollaborativeKG, _: &Parameters, _: usize| {
                epoch += 1.0;
                Ok((epoch, 0.0))
            };
            let out = train_with_validator(&g, &train, &model, &cfg, &mut v, None).unwrap();
            let e = propagate(&g, &out.params.layer0, &out.params.scalars, 2).unwrap();
            for u in 0..5 {
                let h = score(e.combined(), space, space.user(u), space.item(held(u))).unwrap();
                for o in (0..5).filter(|i| !block(u).contains(i)) {
                    cases += 1;
                    if h > score(e.combined(), space, space.user(u), space.item(o)).unwrap() {
                        wins += 1;
                    }
                }
            }
        }
    }
    let rate = wins as f64 / cases as f64;
    assert!(rate >= 0.9, "in-block ranked first in {wins}/{cases} cases");
}
