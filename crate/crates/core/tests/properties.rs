use proptest::prelude::*;
use rand::Rng;

use fedra::allocation::{generate_allocation, StrategyKind};
use fedra::federation::{aggregate_lora, layer_weights, ClientUpdate, MissingLayerStrategy};
use fedra::model::{extract_submodel, forward, ModelDims, StackModel};
use fedra::nn::{softmax_cross_entropy, DenseParams, LoraAdapter, Matrix};
use fedra::rng::seeded;
use fedra::theory::{lr_feasible_interval, mask_deviation_alpha, theorem1_bound, BoundInputs};

fn small_dims(layers: usize, width: usize, rank: usize) -> ModelDims {
    ModelDims {
        layers,
        input_dim: width,
        width,
        classes: 3,
        rank,
        ..ModelDims::default()
    }
}

fn updates_for(
    seed: u64,
    kind: StrategyKind,
    layers: usize,
    caps: &[usize],
) -> (StackModel, fedra::allocation::AllocationMatrix, Vec<ClientUpdate>) {
    let mut rng = seeded(seed);
    let d = small_dims(layers, 2, 1);
    let global = StackModel::build(&d, seed).unwrap();
    let caps: Vec<usize> = caps.iter().map(|&c| c.min(layers)).collect();
    let m = generate_allocation(kind, &caps, layers, &mut rng).unwrap();
    let updates = (0..caps.len())
        .map(|i| {
            let selected: Vec<usize> = (0..layers).filter(|&j| m.row(i)[j] == 1).collect();
            ClientUpdate {
                client: i,
                adapters: selected
                    .iter()
                    .map(|_| LoraAdapter::new(Matrix::gaussian(1, 2, 1.0, &mut rng), Matrix::gaussian(2, 1, 1.0, &mut rng), 1.0).unwrap())
                    .collect(),
                selected,
                head: DenseParams::new(Matrix::gaussian(3, 2, 1.0, &mut rng), vec![0.0; 3]).unwrap(),
                n_samples: rng.random_range(1..1000),
                last_epoch_loss: 0.0,
                steps: 1,
            }
        })
        .collect();
    (global, m, updates)
}

fn bound_inputs(t: f64, gamma: f64, eta: f64) -> BoundInputs {
    BoundInputs {
        h: 1.0,
        sigma2: 0.3,
        delta2: 0.2,
        alpha: 0.05,
        n: 2.0,
        j: 8.0,
        t,
        eta,
        gamma_star: gamma,
        f1: 1.5,
        sum_r_norm2: 2.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn layer_weights_sum_to_one(seed in any::<u64>(), layers in 1usize..6, caps in prop::collection::vec(1usize..6, 1..5)) {
        let (_, m, updates) = updates_for(seed, StrategyKind::RandomUniform, layers, &caps);
        for (j, &sum) in m.column_sums().iter().enumerate() {
            match layer_weights(&updates, j).unwrap() {
                Some(w) => {
                    prop_assert!(sum > 0);
                    let total: f64 = w.iter().map(|(_, v)| v).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-15);
                }
                None => prop_assert_eq!(sum, 0),
            }
        }
    }

    #[test]
    fn all_large_equals_fedavg(seed in any::<u64>(), layers in 1usize..5, n in 1usize..5) {
        let (global, m, updates) = updates_for(seed, StrategyKind::AllLarge, layers, &vec![layers; n]);
        let out = aggregate_lora(&global, &updates, &m, MissingLayerStrategy::CarryForward).unwrap();
        let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        for j in 0..layers {
            for e in 0..2 {
                let expect: f64 = updates.iter().map(|u| u.n_samples as f64 / total * u.adapters[j].down.as_slice()[e]).sum();
                let got = out.blocks[j].adapter.down.as_slice()[e];
                prop_assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn carry_forward_keeps_unselected_layers(seed in any::<u64>(), layers in 2usize..6, caps in prop::collection::vec(1usize..3, 1..4)) {
        let (global, m, updates) = updates_for(seed, StrategyKind::RandomUniform, layers, &caps);
        let out = aggregate_lora(&global, &updates, &m, MissingLayerStrategy::CarryForward).unwrap();
        for (j, &s) in m.column_sums().iter().enumerate() {
            if s == 0 {
                prop_assert_eq!(&out.blocks[j].adapter, &global.blocks[j].adapter);
            }
        }
    }

    #[test]
    fn full_selection_identity(seed in any::<u64>(), layers in 1usize..6, xs in prop::collection::vec(-2.0f64..2.0, 3)) {
        let d = small_dims(layers, 3, 2);
        let mut model = StackModel::build(&d, seed).unwrap();
        let mut rng = seeded(seed ^ 1);
        for b in &mut model.blocks {
            b.adapter.up = Matrix::gaussian(3, 2, 0.5, &mut rng);
        }
        let all: Vec<usize> = (0..layers).collect();
        let sub = forward(&extract_submodel(&model, &all).unwrap(), &xs).unwrap();
        let full = forward(&model, &xs).unwrap();
        prop_assert_eq!(sub, full);
    }

    #[test]
    fn loss_is_finite_for_huge_logits(logits in prop::collection::vec(-1e6f64..1e6, 2..12), pick in any::<prop::sample::Index>()) {
        let label = pick.index(logits.len());
        let (loss, grad) = softmax_cross_entropy(&logits, label).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn alpha_is_tight(r in prop::collection::vec(-5.0f64..5.0, 1..20), bits in any::<u32>()) {
        prop_assume!(r.iter().any(|v| *v != 0.0));
        let mask: Vec<f64> = (0..r.len()).map(|k| f64::from((bits >> (k % 32)) & 1)).collect();
        let alpha = mask_deviation_alpha(&r, &mask).unwrap();
        let dev: f64 = r.iter().zip(&mask).map(|(a, m)| (a - a * m).powi(2)).sum::<f64>().sqrt();
        let norm2: f64 = r.iter().map(|a| a * a).sum();
        prop_assert!((dev - alpha * norm2).abs() <= 1e-12 * dev.max(1.0));
    }

    #[test]
    fn bound_decreases_in_rounds_and_gamma(t in 1.0f64..1e4, g in 1u32..20, u in 0.05f64..1.0) {
        let g = f64::from(g);
        let iv = lr_feasible_interval(2.0, 8.0, 1.0, g).unwrap();
        prop_assume!(!iv.is_empty());
        let eta = iv.lo + u * (iv.hi - iv.lo);
        let base = theorem1_bound(&bound_inputs(t, g, eta)).unwrap().bound;
        prop_assert!(theorem1_bound(&bound_inputs(t * 1.5, g, eta)).unwrap().bound < base);
        // The interval only widens as gamma grows, so eta stays admissible.
        prop_assert!(theorem1_bound(&bound_inputs(t, g + 1.0, eta)).unwrap().bound < base);
    }

    #[test]
    fn bound_rejects_exactly_outside_interval(g in 1u32..10, eta in 0.0f64..0.5) {
        let g = f64::from(g);
        let iv = lr_feasible_interval(2.0, 8.0, 1.0, g).unwrap();
        let res = theorem1_bound(&bound_inputs(10.0, g, eta));
        if eta > iv.lo && eta <= iv.hi {
            prop_assert!(res.is_ok());
        } else {
            prop_assert!(res.is_err());
        }
    }
}
