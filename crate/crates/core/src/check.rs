//! Built-in invariant suite behind the `check` subcommand.
//!
//! Every module invariant has one entry in [`registry`]; [`REQUIRED`] is the
//! manifest the registry is tested against.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::allocation::{generate_allocation, repair_empty_columns, AllocationMatrix, StrategyKind};
use crate::data::{
    build_federation_scenario, dirichlet_partition_indices, make_synthetic_domains, mean_pairwise_label_tv,
    LabeledDataset, PartitionMode, SyntheticConfig,
};
use crate::federation::{
    aggregate_lora, layer_weights, local_train, run_federation, ClientUpdate, MissingLayerStrategy, RoundConfig,
    ServerState, TrainContext,
};
use crate::harness::{self, ExperimentConfig, Method, Preset};
use crate::model::{extract_submodel, forward, ModelDims, StackModel};
use crate::nn::{
    batch_gradient, finite_diff_gradcheck, sgd_step, softmax_cross_entropy, DenseParams, LoraAdapter, Matrix,
};
use crate::rng::seeded;
use crate::theory::{gamma_star, lr_feasible_interval, mask_deviation_alpha, theorem1_bound, BoundInputs};

pub type CheckResult = std::result::Result<String, String>;

#[derive(Clone, Copy)]
pub struct Check {
    pub id: &'static str,
    pub module: &'static str,
    pub summary: &'static str,
    pub run: fn() -> CheckResult,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub id: &'static str,
    pub module: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

/// Invariant ids the suite must cover.
pub const REQUIRED: &[&str] = &[
    "nn.gradient_fidelity",
    "nn.zero_adapter_neutrality",
    "nn.loss_stability",
    "nn.sgd_determinism",
    "model.mask_equivalence",
    "model.copy_isolation",
    "model.order_preservation",
    "model.full_selection_identity",
    "allocation.row_sums",
    "allocation.uniformity",
    "allocation.coverage",
    "allocation.repair_conservative",
    "federation.frozen_base_conservation",
    "federation.weights_sum_to_one",
    "federation.aggregation_oracle",
    "federation.fedavg_reduction",
    "federation.carry_forward",
    "federation.subset_convergence",
    "data.partition_complete_disjoint",
    "data.stratified_split",
    "data.determinism",
    "data.monotone_skew",
    "theory.bound_monotone",
    "theory.interval_consistency",
    "theory.gamma_link",
    "theory.alpha_tightness",
    "harness.reproducibility",
    "harness.preset_fidelity",
];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        {
            // Bound first so a NaN comparison fails the check.
            let holds: bool = $cond;
            if !holds {
                return Err(format!($($fmt)+));
            }
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn registry() -> Vec<Check> {
    macro_rules! c {
        ($id:literal, $module:literal, $summary:literal, $f:ident) => {
            Check {
                id: $id,
                module: $module,
                summary: $summary,
                run: $f,
            }
        };
    }
    vec![
        c!("nn.gradient_fidelity", "nn_core", "finite differences agree with backprop on 100 2-block models", gradient_fidelity),
        c!("nn.zero_adapter_neutrality", "nn_core", "up = 0 leaves the dense output bitwise unchanged", zero_adapter_neutrality),
        c!("nn.loss_stability", "nn_core", "cross-entropy is finite for logits up to 1e6", loss_stability),
        c!("nn.sgd_determinism", "nn_core", "same seed and data give the same SGD trajectory", sgd_determinism),
        c!("model.mask_equivalence", "model", "submodel forward equals the zero-masked full forward", mask_equivalence),
        c!("model.copy_isolation", "model", "training a submodel never mutates the source model", copy_isolation),
        c!("model.order_preservation", "model", "selection order does not change the forward", order_preservation),
        c!("model.full_selection_identity", "model", "selecting every layer reproduces the full model", full_selection_identity),
        c!("allocation.row_sums", "allocation", "row sums equal capacities on 10k draws per strategy", row_sums),
        c!("allocation.uniformity", "allocation", "RandomUniform subsets pass chi-square at 0.001", uniformity),
        c!("allocation.coverage", "allocation", "RandomConstrained covers every column", coverage),
        c!("allocation.repair_conservative", "allocation", "repair keeps row sums and moves one entry per empty column", repair_conservative),
        c!("federation.frozen_base_conservation", "federation", "frozen parameters are bitwise constant over a run", frozen_base_conservation),
        c!("federation.weights_sum_to_one", "federation", "per-layer aggregation weights sum to 1", weights_sum_to_one),
        c!("federation.aggregation_oracle", "federation", "aggregation matches a brute-force weighted mean", aggregation_oracle),
        c!("federation.fedavg_reduction", "federation", "AllLarge with full participation is FedAvg", fedavg_reduction),
        c!("federation.carry_forward", "federation", "never-selected layers stay bitwise constant", carry_forward),
        c!("federation.subset_convergence", "federation", "random-subset training improves with subset size", subset_convergence),
        c!("data.partition_complete_disjoint", "data", "Dirichlet parts cover every index exactly once", partition_complete_disjoint),
        c!("data.stratified_split", "data", "test sets are class-balanced within one sample", stratified_split),
        c!("data.determinism", "data", "same seed gives the same scenario", data_determinism),
        c!("data.monotone_skew", "data", "label skew shrinks as alpha grows", monotone_skew),
        c!("theory.bound_monotone", "theory", "bound strictly decreases in T and gamma*", bound_monotone),
        c!("theory.interval_consistency", "theory", "bound rejects exactly the excluded learning rates", interval_consistency),
        c!("theory.gamma_link", "theory", "constrained allocation reaches at least the depth-prefix gamma*", gamma_link),
        c!("theory.alpha_tightness", "theory", "returned alpha makes the mask inequality tight", alpha_tightness),
        c!("harness.reproducibility", "harness", "repeated runs emit byte-identical metrics", reproducibility),
        c!("harness.preset_fidelity", "harness", "presets have the documented client layouts", preset_fidelity),
    ]
}

/// Runs every check whose id starts with `filter` (all when empty).
pub fn run_checks(filter: &str) -> Vec<CheckOutcome> {
    registry()
        .into_iter()
        .filter(|c| c.id.starts_with(filter))
        .map(|c| {
            let start = Instant::now();
            let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match result {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                id: c.id,
                module: c.module,
                passed,
                detail,
                millis: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

fn small_dims(layers: usize, input_dim: usize, width: usize, classes: usize, rank: usize) -> ModelDims {
    ModelDims {
        layers,
        input_dim,
        width,
        classes,
        rank,
        ..ModelDims::default()
    }
}

/// Model with nonzero adapters so every parameter group is exercised.
fn random_model<R: Rng>(rng: &mut R, layers: usize, max_dim: usize) -> StackModel {
    let width = rng.random_range(2..=max_dim);
    let dims = small_dims(
        layers,
        rng.random_range(1..=max_dim),
        width,
        rng.random_range(2..=max_dim),
        rng.random_range(1..=width),
    );
    let mut m = StackModel::build(&dims, rng.random()).expect("valid dims");
    for b in &mut m.blocks {
        b.adapter.up = Matrix::gaussian(b.adapter.up.rows(), b.adapter.up.cols(), 0.3, rng);
    }
    m.head.weight = Matrix::gaussian(m.head.weight.rows(), m.head.weight.cols(), 0.5, rng);
    m
}

fn random_input<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn random_selection<R: Rng>(rng: &mut R, layers: usize) -> Vec<usize> {
    let k = rng.random_range(1..=layers);
    let mut all: Vec<usize> = (0..layers).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

fn gradient_fidelity() -> CheckResult {
    let mut rng = seeded(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = random_model(&mut rng, 2, 8);
        let x = random_input(&mut rng, m.dims.input_dim);
        let label = rng.random_range(0..m.dims.classes);
        worst = worst.max(ok(finite_diff_gradcheck(&m, &x, label, 1e-5))?);
    }
    ensure!(worst <= 1e-4, "max relative error {worst:e} > 1e-4");
    Ok(format!("max relative error {worst:.2e}"))
}

fn zero_adapter_neutrality() -> CheckResult {
    let mut rng = seeded(12);
    for _ in 0..200 {
        let (i, o) = (rng.random_range(1..8), rng.random_range(1..8));
        let rank = rng.random_range(1..=i.min(o));
        let params = ok(DenseParams::new(Matrix::gaussian(o, i, 1.0, &mut rng), random_input(&mut rng, o)))?;
        let adapter = ok(LoraAdapter::zero_delta(i, o, rank, rng.random_range(0.1..4.0), &mut rng))?;
        let x = random_input(&mut rng, i);
        let a = ok(crate::nn::lora_delta_apply(&adapter, &params, &x))?;
        let b = ok(crate::nn::dense_forward(&params, &x))?;
        ensure!(
            a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()),
            "outputs differ: {a:?} vs {b:?}"
        );
    }
    Ok("200 random layers bitwise equal".into())
}

fn loss_stability() -> CheckResult {
    let mut rng = seeded(13);
    for _ in 0..1000 {
        let c = rng.random_range(2..12);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-1e6..1e6)).collect();
        let label = rng.random_range(0..c);
        let (loss, grad) = ok(softmax_cross_entropy(&logits, label))?;
        ensure!(
            loss.is_finite() && grad.iter().all(|g| g.is_finite()),
            "non-finite loss for {logits:?}"
        );
    }
    Ok("1000 extreme logit vectors".into())
}

fn tiny_scenario(caps: &[usize], seed: u64) -> std::result::Result<crate::data::FederationScenario, String> {
    let cfg = SyntheticConfig {
        num_domains: caps.len(),
        num_classes: 3,
        input_dim: 6,
        samples_per_domain: 60,
        ..SyntheticConfig::default()
    };
    let corpus = ok(make_synthetic_domains(&cfg, &mut seeded(seed)))?;
    ok(build_federation_scenario(PartitionMode::FeatureSkew, caps, &corpus, &mut seeded(seed + 1)))
}

fn tiny_round_cfg(kind: StrategyKind, n: usize) -> RoundConfig {
    RoundConfig {
        lr: 0.05,
        local_epochs: 1,
        batch_size: 8,
        clients_per_round: n,
        strategy: crate::allocation::AllocationStrategy::fixed(kind),
        missing: MissingLayerStrategy::CarryForward,
    }
}

fn sgd_determinism() -> CheckResult {
    let sc = tiny_scenario(&[3], 5)?;
    let data = &sc.clients[0].data;
    let dims = small_dims(3, 6, 8, 3, 2);
    let trajectory = || -> std::result::Result<Vec<String>, String> {
        let mut m = ok(StackModel::build(&dims, 4))?;
        let mut out = Vec::new();
        for step in 0..20 {
            let batch = (step * 4..step * 4 + 4).map(|i| {
                let k = i % data.len();
                (data.features[k].as_slice(), data.labels[k])
            });
            let (_, g) = ok(batch_gradient(&m, batch))?;
            ok(sgd_step(&mut m, &g, 0.1))?;
            out.push(m.digest());
        }
        Ok(out)
    };
    ensure!(trajectory()? == trajectory()?, "trajectories differ");
    Ok("20-step trajectories identical".into())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mask_equivalence() -> CheckResult {
    let mut rng = seeded(14);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let layers = rng.random_range(1..=6);
        let m = random_model(&mut rng, layers, 6);
        let sel = random_selection(&mut rng, layers);
        let sub = ok(extract_submodel(&m, &sel))?;
        let masked = ok(m.masked(&sel))?;
        let x = random_input(&mut rng, m.dims.input_dim);
        worst = worst.max(max_abs_diff(&ok(forward(&sub, &x))?, &ok(forward(&masked, &x))?));
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("1000 triples, max deviation {worst:.1e}"))
}

fn copy_isolation() -> CheckResult {
    let sc = tiny_scenario(&[3], 6)?;
    let model = ok(StackModel::build(&small_dims(4, 6, 8, 3, 2), 6))?;
    let before = model.digest();
    let sub = ok(extract_submodel(&model, &[0, 2, 3]))?;
    let cfg = tiny_round_cfg(StrategyKind::RandomUniform, 1);
    ok(local_train(sub, &sc.clients[0].data, &cfg, &mut seeded(1), TrainContext::default()))?;
    ensure!(model.digest() == before, "source checksum changed");
    Ok("checksum unchanged after local training".into())
}

fn order_preservation() -> CheckResult {
    let mut rng = seeded(15);
    for _ in 0..200 {
        let layers = rng.random_range(2..=6);
        let m = random_model(&mut rng, layers, 6);
        let mut sel = random_selection(&mut rng, layers);
        let x = random_input(&mut rng, m.dims.input_dim);
        let a = ok(forward(&ok(extract_submodel(&m, &sel))?, &x))?;
        sel.shuffle(&mut rng);
        let b = ok(forward(&ok(extract_submodel(&m, &sel))?, &x))?;
        ensure!(a == b, "permuted selection {sel:?} changed the output");
    }
    Ok("200 permuted selections".into())
}

fn full_selection_identity() -> CheckResult {
    let mut rng = seeded(16);
    for _ in 0..200 {
        let layers = rng.random_range(1..=6);
        let m = random_model(&mut rng, layers, 6);
        let all: Vec<usize> = (0..layers).collect();
        let x = random_input(&mut rng, m.dims.input_dim);
        ensure!(
            ok(forward(&ok(extract_submodel(&m, &all))?, &x))? == ok(forward(&m, &x))?,
            "full selection differs from the model"
        );
    }
    Ok("200 models".into())
}

const ALL_KINDS: [StrategyKind; 5] = [
    StrategyKind::RandomUniform,
    StrategyKind::RandomConstrained,
    StrategyKind::DepthPrefix,
    StrategyKind::AllLarge,
    StrategyKind::AllSmall,
];

fn row_sums() -> CheckResult {
    let mut rng = seeded(17);
    let caps = [8, 6, 5, 4, 3, 2];
    for kind in ALL_KINDS {
        for _ in 0..10_000 {
            let m = ok(generate_allocation(kind, &caps, 8, &mut rng))?;
            let expected: Vec<usize> = match kind {
                StrategyKind::AllLarge => vec![8; 6],
                StrategyKind::AllSmall => vec![2; 6],
                _ => caps.to_vec(),
            };
            ensure!(
                (0..6).map(|i| m.row_sum(i)).collect::<Vec<_>>() == expected,
                "{kind:?} row sums wrong"
            );
        }
    }
    Ok("10k draws x 5 strategies".into())
}

/// Chi-square p-value of subset counts against the uniform distribution.
pub fn subset_uniformity_p(layers: usize, capacity: usize, draws: usize, seed: u64) -> std::result::Result<f64, String> {
    let mut rng = seeded(seed);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        let m = ok(generate_allocation(StrategyKind::RandomUniform, &[capacity], layers, &mut rng))?;
        *counts.entry(m.selected(0)).or_default() += 1;
    }
    let cells = binomial(layers, capacity);
    ensure!(counts.len() == cells, "{} of {cells} subsets observed", counts.len());
    if cells == 1 {
        return Ok(1.0);
    }
    let expected = draws as f64 / cells as f64;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let chi = ok(ChiSquared::new((cells - 1) as f64))?;
    Ok(1.0 - chi.cdf(stat))
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn uniformity() -> CheckResult {
    let mut worst = 1.0f64;
    for (k, (l, c)) in [(5, 2), (5, 3), (4, 1), (4, 2)].into_iter().enumerate() {
        let p = subset_uniformity_p(l, c, 100_000, 18 + k as u64)?;
        ensure!(p >= 0.001, "L={l}, L_i={c}: p = {p:e}");
        worst = worst.min(p);
    }
    Ok(format!("smallest p-value {worst:.3}"))
}

fn coverage() -> CheckResult {
    let mut rng = seeded(19);
    for _ in 0..10_000 {
        let n = rng.random_range(1..6);
        let l = rng.random_range(1..9);
        let mut caps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=l)).collect();
        while caps.iter().sum::<usize>() < l {
            let i = rng.random_range(0..n);
            caps[i] = (caps[i] + 1).min(l);
        }
        let m = ok(generate_allocation(StrategyKind::RandomConstrained, &caps, l, &mut rng))?;
        ensure!(m.empty_columns().is_empty(), "uncovered columns for {caps:?}");
        ensure!(m.rows_consistent(), "row sums broken for {caps:?}");
    }
    Ok("10k random feasible profiles".into())
}

fn repair_conservative() -> CheckResult {
    let mut rng = seeded(20);
    let mut repaired = 0;
    for _ in 0..5_000 {
        let n = rng.random_range(1..6);
        let l = rng.random_range(1..9);
        let caps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=l)).collect();
        if caps.iter().sum::<usize>() < l {
            continue;
        }
        let m = ok(generate_allocation(StrategyKind::RandomUniform, &caps, l, &mut rng))?;
        let empty = m.empty_columns().len();
        let r = ok(repair_empty_columns(&m))?;
        ensure!(r.empty_columns().is_empty(), "repair left empty columns");
        ensure!((0..n).all(|i| r.row_sum(i) == caps[i]), "repair changed row sums");
        let changed = (0..n)
            .flat_map(|i| (0..l).map(move |j| (i, j)))
            .filter(|&(i, j)| m.get(i, j) != r.get(i, j))
            .count();
        ensure!(changed <= 2 * empty, "{changed} entries changed for {empty} empty columns");
        repaired += usize::from(empty > 0);
    }
    Ok(format!("{repaired} matrices needed repair"))
}

fn frozen_base_conservation() -> CheckResult {
    let sc = tiny_scenario(&[4, 3, 2, 1], 21)?;
    let mut state = ServerState::new(ok(StackModel::build(&small_dims(4, 6, 8, 3, 2), 21))?);
    let digest = state.model.frozen_digest();
    let cfg = tiny_round_cfg(StrategyKind::RandomUniform, 4);
    let mut rounds = 0;
    ok(run_federation(&mut state, &sc, &cfg, 10, 21, |st, _| {
        rounds += 1;
        if st.model.frozen_digest() == digest {
            Ok(())
        } else {
            Err(crate::Error::Invariant("frozen digest changed".into()))
        }
    }))?;
    Ok(format!("SHA-256 constant over {rounds} rounds"))
}

/// Random aggregation instance with `N ≤ 4`, `L ≤ 4`.
struct AggInstance {
    global: StackModel,
    updates: Vec<ClientUpdate>,
    m: AllocationMatrix,
}

fn random_agg_instance<R: Rng>(rng: &mut R, kind: StrategyKind) -> AggInstance {
    let layers = rng.random_range(1..=4);
    let n = rng.random_range(1..=4);
    let width = rng.random_range(1..=3);
    let dims = small_dims(layers, width, width, 2, rng.random_range(1..=width));
    let global = random_model_with(rng, &dims);
    let caps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=layers)).collect();
    let m = generate_allocation(kind, &caps, layers, rng).expect("valid profile");
    let updates = (0..n)
        .map(|i| {
            let selected = m.selected(i);
            let adapters = selected
                .iter()
                .map(|&j| {
                    let a = &global.blocks[j].adapter;
                    LoraAdapter {
                        down: Matrix::gaussian(a.down.rows(), a.down.cols(), 1.0, rng),
                        up: Matrix::gaussian(a.up.rows(), a.up.cols(), 1.0, rng),
                        scale: a.scale,
                    }
                })
                .collect();
            ClientUpdate {
                client: i,
                selected,
                adapters,
                head: DenseParams {
                    weight: Matrix::gaussian(2, width, 1.0, rng),
                    bias: random_input(rng, 2),
                },
                n_samples: rng.random_range(1..1000),
                last_epoch_loss: 0.0,
                steps: 1,
            }
        })
        .collect();
    AggInstance { global, updates, m }
}

fn random_model_with<R: Rng>(rng: &mut R, dims: &ModelDims) -> StackModel {
    let mut g = StackModel::build(dims, rng.random()).expect("valid dims");
    for b in &mut g.blocks {
        b.adapter.up = Matrix::gaussian(b.adapter.up.rows(), b.adapter.up.cols(), 1.0, rng);
    }
    g
}

/// Element-wise weighted mean over holders, previous value when none.
fn oracle_layer(inst: &AggInstance, j: usize, pick: fn(&LoraAdapter) -> &Matrix) -> Vec<f64> {
    let prev = pick(&inst.global.blocks[j].adapter).as_slice();
    let mut num = vec![0.0; prev.len()];
    let mut den = 0.0;
    for (i, u) in inst.updates.iter().enumerate() {
        if !inst.m.get(i, j) {
            continue;
        }
        let k = u.selected.iter().position(|&s| s == j).expect("selected layer");
        for (acc, v) in num.iter_mut().zip(pick(&u.adapters[k]).as_slice()) {
            *acc += u.n_samples as f64 * v;
        }
        den += u.n_samples as f64;
    }
    if den == 0.0 {
        return prev.to_vec();
    }
    num.into_iter().map(|v| v / den).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn weights_sum_to_one() -> CheckResult {
    let mut rng = seeded(22);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let inst = random_agg_instance(&mut rng, StrategyKind::RandomUniform);
        for j in 0..inst.m.layers() {
            match ok(layer_weights(&inst.updates, j))? {
                Some(w) => worst = worst.max((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs()),
                None => ensure!(inst.m.column_sum(j) == 0, "layer {j} has holders but no weights"),
            }
        }
    }
    ensure!(worst <= 1e-15, "weight sum off by {worst:e}");
    Ok(format!("max |sum - 1| = {worst:.1e}"))
}

fn aggregation_oracle() -> CheckResult {
    let mut rng = seeded(23);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let inst = random_agg_instance(&mut rng, StrategyKind::RandomUniform);
        let out = ok(aggregate_lora(&inst.global, &inst.updates, &inst.m, MissingLayerStrategy::CarryForward))?;
        for j in 0..inst.m.layers() {
            worst = worst.max(rel_err(out.blocks[j].adapter.down.as_slice(), &oracle_layer(&inst, j, |a| &a.down)));
            worst = worst.max(rel_err(out.blocks[j].adapter.up.as_slice(), &oracle_layer(&inst, j, |a| &a.up)));
        }
    }
    ensure!(worst <= 1e-12, "relative error {worst:e}");
    Ok(format!("1000 instances, max relative error {worst:.1e}"))
}

fn fedavg_reduction() -> CheckResult {
    let mut rng = seeded(24);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = random_agg_instance(&mut rng, StrategyKind::AllLarge);
        let out = ok(aggregate_lora(&inst.global, &inst.updates, &inst.m, MissingLayerStrategy::CarryForward))?;
        let total: f64 = inst.updates.iter().map(|u| u.n_samples as f64).sum();
        for j in 0..inst.m.layers() {
            let mut down = vec![0.0; inst.global.blocks[j].adapter.down.as_slice().len()];
            for u in &inst.updates {
                for (d, v) in down.iter_mut().zip(u.adapters[j].down.as_slice()) {
                    *d += u.n_samples as f64 / total * v;
                }
            }
            worst = worst.max(rel_err(out.blocks[j].adapter.down.as_slice(), &down));
        }
    }
    ensure!(worst <= 1e-12, "relative error {worst:e}");
    Ok(format!("100 instances, max relative error {worst:.1e}"))
}

fn carry_forward() -> CheckResult {
    // Capacity 2 of 4 under DepthPrefix: layers 2 and 3 are never selected.
    let sc = tiny_scenario(&[2, 2, 1], 25)?;
    let mut state = ServerState::new(ok(StackModel::build(&small_dims(4, 6, 8, 3, 2), 25))?);
    let frozen: Vec<LoraAdapter> = state.model.blocks[2..].iter().map(|b| b.adapter.clone()).collect();
    let cfg = tiny_round_cfg(StrategyKind::DepthPrefix, 3);
    ok(run_federation(&mut state, &sc, &cfg, 100, 25, |st, _| {
        let same = st.model.blocks[2..]
            .iter()
            .zip(&frozen)
            .all(|(b, f)| bitwise_eq(&b.adapter, f));
        if same {
            Ok(())
        } else {
            Err(crate::Error::Invariant("unselected adapter moved".into()))
        }
    }))?;
    Ok("layers 2..4 bitwise constant over 100 rounds".into())
}

pub fn bitwise_eq(a: &LoraAdapter, b: &LoraAdapter) -> bool {
    let eq = |x: &Matrix, y: &Matrix| {
        x.shape() == y.shape() && x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    eq(&a.down, &b.down) && eq(&a.up, &b.up) && a.scale.to_bits() == b.scale.to_bits()
}

fn subset_convergence() -> CheckResult {
    let cfg = ExperimentConfig::default();
    let trend = ok(harness::subset_trend(&cfg, &[0, 1, 2]))?;
    ensure!(trend.converged, "some subset size did not converge: {:?}", trend.medians);
    ensure!(trend.non_decreasing(), "median final accuracy not monotone: {:?}", trend.medians);
    let medians: Vec<String> = trend.medians.iter().map(|m| format!("{m:.3}")).collect();
    Ok(format!("median final accuracy by size {:?}: [{}]", trend.sizes, medians.join(", ")))
}

fn partition_complete_disjoint() -> CheckResult {
    let mut rng = seeded(26);
    for _ in 0..1000 {
        let classes = rng.random_range(1..6);
        let n = rng.random_range(1..200);
        let parts = rng.random_range(1..=n.min(8));
        let alpha = [0.05, 0.5, 1.0, 100.0][rng.random_range(0..4)];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let split = ok(dirichlet_partition_indices(&labels, classes, alpha, parts, &mut rng))?;
        ensure!(split.len() == parts && split.iter().all(|p| !p.is_empty()), "empty part");
        let mut all: Vec<usize> = split.into_iter().flatten().collect();
        all.sort_unstable();
        ensure!(all == (0..n).collect::<Vec<_>>(), "indices lost or duplicated");
    }
    Ok("1000 random configurations".into())
}

fn stratified_split() -> CheckResult {
    let cfg = SyntheticConfig {
        samples_per_domain: 737,
        ..SyntheticConfig::default()
    };
    let corpus = ok(make_synthetic_domains(&cfg, &mut seeded(27)))?;
    for t in &corpus.test {
        let counts = t.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        ensure!(hi - lo <= 1, "test class counts {counts:?}");
    }
    Ok(format!("{} test sets balanced", corpus.test.len()))
}

fn data_determinism() -> CheckResult {
    let cfg = ExperimentConfig::from_preset(Preset::Table2Desk);
    let (_, a) = ok(harness::build_scenario(&cfg, 28))?;
    let (_, b) = ok(harness::build_scenario(&cfg, 28))?;
    ensure!(a.train_indices == b.train_indices, "partitions differ");
    let same = a
        .clients
        .iter()
        .zip(&b.clients)
        .all(|(x, y)| x.data == y.data && x.capacity == y.capacity);
    ensure!(same && a.test_sets == b.test_sets, "client data differs");
    Ok(format!("{} clients identical", a.num_clients()))
}

fn monotone_skew() -> CheckResult {
    let mut rng = seeded(29);
    let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let data = ok(LabeledDataset::new(vec![vec![0.0]; 2000], labels.clone(), 10, 0))?;
    let mut tv = Vec::new();
    for alpha in [0.1, 0.5, 100.0] {
        let mut acc = 0.0;
        for _ in 0..20 {
            let split = ok(dirichlet_partition_indices(&labels, 10, alpha, 5, &mut rng))?;
            let parts: Vec<LabeledDataset> = split.iter().map(|ix| data.subset(ix)).collect();
            acc += mean_pairwise_label_tv(&parts);
        }
        tv.push(acc / 20.0);
    }
    ensure!(tv[0] > tv[1] && tv[1] > tv[2], "TV not decreasing: {tv:?}");
    Ok(format!("mean pairwise TV {tv:.3?} at alpha 0.1, 0.5, 100"))
}

fn feasible_inputs(t: f64, gamma: f64) -> BoundInputs {
    BoundInputs {
        h: 1.0,
        sigma2: 0.5,
        delta2: 0.25,
        alpha: 0.1,
        n: 1.0,
        j: 4.0,
        t,
        eta: 0.06,
        gamma_star: gamma,
        f1: 2.0,
        sum_r_norm2: 3.0,
    }
}

fn bound_monotone() -> CheckResult {
    let grid_t = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0, 1000.0];
    let grid_g = [1.0, 2.0, 3.0, 5.0, 8.0];
    for &g in &grid_g {
        let b: Vec<f64> = grid_t
            .iter()
            .map(|&t| theorem1_bound(&feasible_inputs(t, g)).map(|r| r.bound))
            .collect::<crate::Result<_>>()
            .map_err(|e| e.to_string())?;
        ensure!(b.windows(2).all(|w| w[1] < w[0]), "not decreasing in T at gamma* = {g}: {b:?}");
    }
    for &t in &grid_t {
        let b: Vec<f64> = grid_g
            .iter()
            .map(|&g| theorem1_bound(&feasible_inputs(t, g)).map(|r| r.bound))
            .collect::<crate::Result<_>>()
            .map_err(|e| e.to_string())?;
        ensure!(b.windows(2).all(|w| w[1] < w[0]), "not decreasing in gamma* at T = {t}: {b:?}");
    }
    Ok(format!("{}x{} grid", grid_t.len(), grid_g.len()))
}

fn interval_consistency() -> CheckResult {
    let mut checked = 0;
    for (n, j, h, g) in [(1.0, 4.0, 1.0, 1.0), (6.0, 10.0, 1.0, 6.0), (2.0, 8.0, 0.5, 2.0), (1.0, 1.0, 1.0, 1.0)] {
        let iv = ok(lr_feasible_interval(n, j, h, g))?;
        for k in 0..=400 {
            let eta = 1e-4 + k as f64 * (iv.hi * 1.5) / 400.0;
            let inputs = BoundInputs {
                n,
                j,
                h,
                gamma_star: g,
                eta,
                ..feasible_inputs(10.0, g)
            };
            let accepted = theorem1_bound(&inputs).is_ok();
            // Δ1 vanishes exactly at the lower endpoint, which is rejected too.
            let expected = iv.contains(eta) && inputs.delta1() > 0.0;
            ensure!(accepted == expected, "eta = {eta} (interval [{}, {}]): accepted = {accepted}", iv.lo, iv.hi);
            ensure!(!iv.contains(eta) || eta == iv.lo || inputs.delta1() > 0.0, "interior eta with delta1 <= 0");
            checked += 1;
        }
    }
    Ok(format!("{checked} learning rates"))
}

fn gamma_link() -> CheckResult {
    let mut rng = seeded(30);
    let l = 8;
    for _ in 0..200 {
        let n = rng.random_range(1..7);
        let mut caps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=l)).collect();
        caps[0] = l;
        let hist = |kind, rng: &mut _| -> std::result::Result<Vec<AllocationMatrix>, String> {
            (0..20).map(|_| ok(generate_allocation(kind, &caps, l, rng))).collect()
        };
        let constrained = hist(StrategyKind::RandomConstrained, &mut rng)?;
        let depth = hist(StrategyKind::DepthPrefix, &mut rng)?;
        let (gc, gd) = (ok(gamma_star(&constrained))?, ok(gamma_star(&depth))?);
        ensure!(gc >= gd, "constrained gamma* {gc} < depth-prefix {gd} for {caps:?}");
        ensure!(constrained.iter().all(|m| m.empty_columns().is_empty()), "uncovered column");
    }
    let depth = ok(generate_allocation(StrategyKind::DepthPrefix, &[12, 10, 8, 6, 4, 3], 12, &mut rng))?;
    ensure!(ok(gamma_star(&[depth]))? == 1, "depth-prefix gamma* for [12,10,8,6,4,3] is not 1");
    Ok("200 profiles with a full-capacity client".into())
}

fn alpha_tightness() -> CheckResult {
    let mut rng = seeded(31);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let alpha = ok(mask_deviation_alpha(&r, &mask))?;
        let lhs = r
            .iter()
            .zip(&mask)
            .map(|(v, m)| (v - v * m).powi(2))
            .sum::<f64>()
            .sqrt();
        let rhs = alpha * r.iter().map(|v| v * v).sum::<f64>();
        ensure!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0), "lhs {lhs} vs alpha*|r|^2 {rhs}");
    }
    Ok("1000 random (r, m) pairs".into())
}

fn reproducibility() -> CheckResult {
    let mut cfg = ExperimentConfig::default();
    cfg.training.rounds = 2;
    cfg.scenario.data.samples_per_domain = 120;
    cfg.probe.enabled = false;
    let dir = ok(tempfile::tempdir())?;
    let mut bytes = Vec::new();
    for sub in ["a", "b"] {
        let root = dir.path().join(sub);
        ok(harness::run_cell(&cfg, Method::FedRA, 4, &root))?;
        bytes.push(ok(std::fs::read(harness::run_dir(&root, Method::FedRA, 4).join(harness::METRICS_FILE)))?);
    }
    ensure!(bytes[0] == bytes[1], "metrics CSV differs between identical runs");
    Ok(format!("{} identical bytes", bytes[0].len()))
}

fn preset_fidelity() -> CheckResult {
    let t1 = ExperimentConfig::from_preset(Preset::Table1Desk);
    let c = &t1.scenario.capacities;
    ensure!(c.len() == 6 && c.windows(2).all(|w| w[0] > w[1]), "table1-desk capacities {c:?}");
    let t2 = ExperimentConfig::from_preset(Preset::Table2Desk);
    let c = &t2.scenario.capacities;
    ensure!(
        c.len() == 30 && c.chunks(5).all(|g| g.iter().all(|&x| x == g[0])),
        "table2-desk capacities {c:?}"
    );
    let groups: std::collections::BTreeSet<usize> = c.iter().copied().collect();
    ensure!(groups.len() == 6, "table2-desk has {} capacity groups", groups.len());
    let t3 = ExperimentConfig::from_preset(Preset::Table3Desk);
    ensure!(
        t3.scenario.capacities.iter().all(|&x| x < t3.model.layers),
        "table3-desk capacities {:?}",
        t3.scenario.capacities
    );
    ensure!(ExperimentConfig::from_preset(Preset::Table4Desk).scenario.dynamic, "table4-desk is not dynamic");
    Ok("4 presets".into())
}
