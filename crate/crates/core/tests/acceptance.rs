//! Acceptance gate: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use fedra::allocation::{generate_allocation, AllocationMatrix, StrategyKind};
use fedra::federation::{aggregate_lora, run_federation, ClientUpdate, MissingLayerStrategy, ServerState};
use fedra::harness::{self, ExperimentConfig, Method, Preset, RunOptions, RunOutput};
use fedra::model::{extract_submodel, forward, ModelDims, StackModel};
use fedra::nn::{finite_diff_gradcheck, DenseParams, LoraAdapter, Matrix};
use fedra::rng::seeded;
use fedra::theory::{gamma_star, lr_feasible_interval, theorem1_bound, BoundInputs};

/// Whether the criterion holds, plus the measured values.
type Verdict = (bool, String);

fn dims(layers: usize, input_dim: usize, width: usize, classes: usize, rank: usize) -> ModelDims {
    ModelDims {
        layers,
        input_dim,
        width,
        classes,
        rank,
        ..ModelDims::default()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn preset_runs(cfg: &ExperimentConfig, method: Method) -> Vec<RunOutput> {
    SEEDS
        .iter()
        .map(|&s| harness::run_experiment(cfg, method, s, &RunOptions::default()).unwrap())
        .collect()
}

fn mean_average(runs: &[RunOutput]) -> f64 {
    100.0 * runs.iter().map(RunOutput::average_accuracy).sum::<f64>() / runs.len() as f64
}

fn preset(p: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_preset(p);
    cfg.probe.enabled = false;
    cfg
}

fn criterion_01_allocation_statistics() -> Verdict {
    let start = Instant::now();
    let caps = [8usize, 6, 5, 4, 3, 2];
    let l = 8;
    let draws = 100_000;
    let mut rng = seeded(2024);
    let mut counts = vec![vec![0usize; l]; caps.len()];
    let mut rows_exact = true;
    for _ in 0..draws {
        let m = generate_allocation(StrategyKind::RandomUniform, &caps, l, &mut rng).unwrap();
        for (i, &c) in caps.iter().enumerate() {
            rows_exact &= m.row(i).iter().map(|&v| v as usize).sum::<usize>() == c;
            for (j, count) in counts[i].iter_mut().enumerate() {
                *count += m.row(i)[j] as usize;
            }
        }
    }
    let mut worst_z = 0.0f64;
    let mut within = true;
    for (i, &c) in caps.iter().enumerate() {
        let p = c as f64 / l as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &k in &counts[i] {
            let dev = (k as f64 - draws as f64 * p).abs();
            if sd == 0.0 {
                within &= dev == 0.0;
            } else {
                worst_z = worst_z.max(dev / sd);
                within &= dev <= 3.0 * sd;
            }
        }
    }
    let mut covered = true;
    for _ in 0..draws {
        let m = generate_allocation(StrategyKind::RandomConstrained, &caps, l, &mut rng).unwrap();
        covered &= (0..l).all(|j| (0..caps.len()).any(|i| m.row(i)[j] == 1));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        within && rows_exact && covered && secs < 30.0,
        format!("max |z| = {worst_z:.2} (<= 3), rows exact = {rows_exact}, constrained covered = {covered}, {secs:.1} s (< 30 s)"),
    )
}

/// Random instance with `N ≤ 4`, `L ≤ 4` and arbitrary adapter values.
fn random_instance<R: Rng>(rng: &mut R, kind: StrategyKind) -> (StackModel, AllocationMatrix, Vec<ClientUpdate>) {
    let layers = rng.random_range(1..=4);
    let n = rng.random_range(1..=4);
    let width = rng.random_range(1..=3);
    let d = dims(layers, width, width, 2, rng.random_range(1..=width));
    let mut global = StackModel::build(&d, rng.random()).unwrap();
    for b in &mut global.blocks {
        b.adapter.up = Matrix::gaussian(width, b.adapter.rank(), 1.0, rng);
    }
    let caps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=layers)).collect();
    let m = generate_allocation(kind, &caps, layers, rng).unwrap();
    let updates = (0..n)
        .map(|i| {
            let selected: Vec<usize> = (0..layers).filter(|&j| m.row(i)[j] == 1).collect();
            let adapters = selected
                .iter()
                .map(|_| LoraAdapter {
                    down: Matrix::gaussian(d.rank, width, 2.0, rng),
                    up: Matrix::gaussian(width, d.rank, 2.0, rng),
                    scale: d.lora_scale,
                })
                .collect();
            ClientUpdate {
                client: i,
                selected,
                adapters,
                head: DenseParams::new(Matrix::gaussian(2, width, 1.0, rng), vec![rng.random(), rng.random()]).unwrap(),
                n_samples: rng.random_range(1..5000),
                last_epoch_loss: 0.0,
                steps: 1,
            }
        })
        .collect();
    (global, m, updates)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn criterion_02_aggregation_oracle() -> Verdict {
    let mut rng = seeded(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (global, m, updates) = random_instance(&mut rng, StrategyKind::RandomUniform);
        let out = aggregate_lora(&global, &updates, &m, MissingLayerStrategy::CarryForward).unwrap();
        for j in 0..m.layers() {
            let holders: Vec<&ClientUpdate> = updates.iter().filter(|u| u.selected.contains(&j)).collect();
            for (which, got) in [(0, &out.blocks[j].adapter.down), (1, &out.blocks[j].adapter.up)] {
                for e in 0..got.as_slice().len() {
                    let expected = if holders.is_empty() {
                        let prev = &global.blocks[j].adapter;
                        [&prev.down, &prev.up][which].as_slice()[e]
                    } else {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for u in &holders {
                            let k = u.selected.iter().position(|&s| s == j).unwrap();
                            let a = &u.adapters[k];
                            num += u.n_samples as f64 * [&a.down, &a.up][which].as_slice()[e];
                            den += u.n_samples as f64;
                        }
                        num / den
                    };
                    worst = worst.max(rel(got.as_slice()[e], expected));
                }
            }
        }
    }

    // Capacity-2 depth prefix on 5 layers: layers 2..5 are never selected.
    let mut cfg = preset(Preset::Table1Desk);
    cfg.model.layers = 5;
    cfg.scenario.capacities = vec![2; 6];
    cfg.scenario.data.samples_per_domain = 100;
    let (_, scenario) = harness::build_scenario(&cfg, 3).unwrap();
    let mut state = ServerState::new(StackModel::build(&cfg.model, 3).unwrap());
    let bits = |s: &ServerState| -> Vec<u64> {
        s.model.blocks[2..]
            .iter()
            .flat_map(|b| b.adapter.down.as_slice().iter().chain(b.adapter.up.as_slice()))
            .map(|v| v.to_bits())
            .collect()
    };
    let before = bits(&state);
    let mut constant = true;
    run_federation(&mut state, &scenario, &cfg.round_config(Method::DepthPrefix), 100, 3, |s, _| {
        constant &= bits(s) == before;
        Ok(())
    })
    .unwrap();
    (
        worst <= 1e-12 && constant,
        format!("max relative error {worst:.1e} (<= 1e-12) over 1000 instances; unselected layers bitwise constant over 100 rounds = {constant}"),
    )
}

fn criterion_03_fedavg_reduction() -> Verdict {
    let mut rng = seeded(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (global, m, updates) = random_instance(&mut rng, StrategyKind::AllLarge);
        let out = aggregate_lora(&global, &updates, &m, MissingLayerStrategy::CarryForward).unwrap();
        // Standard FedAvg over the flattened adapter vectors.
        let flat = |blocks: &[LoraAdapter]| -> Vec<f64> {
            blocks
                .iter()
                .flat_map(|a| a.down.as_slice().iter().chain(a.up.as_slice()).copied())
                .collect()
        };
        let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        let mut avg = vec![0.0; flat(&updates[0].adapters).len()];
        for u in &updates {
            for (a, v) in avg.iter_mut().zip(flat(&u.adapters)) {
                *a += u.n_samples as f64 / total * v;
            }
        }
        let got = flat(&out.blocks.iter().map(|b| b.adapter.clone()).collect::<Vec<_>>());
        for (g, e) in got.iter().zip(&avg) {
            worst = worst.max(rel(*g, *e));
        }
    }
    (worst <= 1e-12, format!("max relative error {worst:.1e} (<= 1e-12) over 100 instances"))
}

fn criterion_04_gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let width = rng.random_range(2..=8);
        let d = dims(2, rng.random_range(1..=8), width, rng.random_range(2..=8), rng.random_range(1..=width));
        let mut m = StackModel::build(&d, rng.random()).unwrap();
        for b in &mut m.blocks {
            b.adapter.up = Matrix::gaussian(width, d.rank, 0.3, &mut rng);
        }
        m.head.weight = Matrix::gaussian(d.classes, width, 0.5, &mut rng);
        let x: Vec<f64> = (0..d.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = rng.random_range(0..d.classes);
        worst = worst.max(finite_diff_gradcheck(&m, &x, label, 1e-5).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} (<= 1e-4), {secs:.2} s (< 60 s)"),
    )
}

fn criterion_05_mask_equivalence() -> Verdict {
    let mut rng = seeded(10);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let layers = rng.random_range(1..=6);
        let width = rng.random_range(1..=6);
        let d = dims(layers, rng.random_range(1..=6), width, rng.random_range(2..=5), rng.random_range(1..=width));
        let mut m = StackModel::build(&d, rng.random()).unwrap();
        for b in &mut m.blocks {
            b.adapter.up = Matrix::gaussian(width, d.rank, 0.5, &mut rng);
        }
        m.head.weight = Matrix::gaussian(d.classes, width, 1.0, &mut rng);
        let mut all: Vec<usize> = (0..layers).collect();
        all.shuffle(&mut rng);
        all.truncate(rng.random_range(1..=layers));
        let x: Vec<f64> = (0..d.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sub = forward(&extract_submodel(&m, &all).unwrap(), &x).unwrap();
        // Independent masking: zero every parameter of the excluded blocks.
        let mut masked = m.clone();
        for (j, b) in masked.blocks.iter_mut().enumerate() {
            if !all.contains(&j) {
                b.base.weight.fill(0.0);
                b.base.bias.iter_mut().for_each(|v| *v = 0.0);
                b.adapter.down.fill(0.0);
                b.adapter.up.fill(0.0);
            }
        }
        let full = forward(&masked, &x).unwrap();
        for (a, b) in sub.iter().zip(&full) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst <= 1e-12, format!("max |sub - masked| = {worst:.1e} (<= 1e-12) over 1000 triples"))
}

fn criterion_06_table1_ordering() -> Verdict {
    let start = Instant::now();
    let cfg = preset(Preset::Table1Desk);
    assert_eq!(cfg.training.rounds, 60);
    let acc: Vec<(Method, f64)> = [Method::AllLarge, Method::FedRA, Method::DepthPrefix, Method::AllSmall]
        .into_iter()
        .map(|m| (m, mean_average(&preset_runs(&cfg, m))))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let [large, fedra, depth, small] = [acc[0].1, acc[1].1, acc[2].1, acc[3].1];
    let ordered = large > fedra && fedra > depth && depth > small;
    let gap = fedra - depth;
    (
        ordered && gap >= 3.0 && secs < 600.0,
        format!(
            "AllLarge {large:.2} > FedRA {fedra:.2} > DepthPrefix {depth:.2} > AllSmall {small:.2}: {ordered}; \
             FedRA - DepthPrefix = {gap:.2} (>= 3); {secs:.0} s (< 600 s)"
        ),
    )
}

fn criterion_07_extreme_heterogeneity() -> Verdict {
    let cfg = preset(Preset::Table3Desk);
    let l = cfg.model.layers;
    let max_cap = *cfg.scenario.capacities.iter().max().unwrap();
    assert!(max_cap <= l - 2);
    let fedra = mean_average(&preset_runs(&cfg, Method::FedRA));
    let depth_runs = preset_runs(&cfg, Method::DepthPrefix);
    let depth = mean_average(&depth_runs);
    let untouched = depth_runs.iter().all(|r| {
        let init = StackModel::build(&cfg.model, r.seed).unwrap();
        (max_cap..l).all(|j| {
            let (a, b) = (&r.model.blocks[j].adapter, &init.blocks[j].adapter);
            a.down.as_slice().iter().zip(b.down.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.up.as_slice().iter().zip(b.up.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    let gap = fedra - depth;
    (
        gap >= 10.0 && untouched,
        format!(
            "capacities {:?} of L = {l}: FedRA {fedra:.2} - DepthPrefix {depth:.2} = {gap:.2} (>= 10); \
             DepthPrefix layers {max_cap}..{l} bitwise untrained = {untouched}",
            cfg.scenario.capacities
        ),
    )
}

fn criterion_08_dynamic_heterogeneity() -> Verdict {
    let cfg = preset(Preset::Table4Desk);
    assert!(cfg.scenario.dynamic);
    let fedra = mean_average(&preset_runs(&cfg, Method::FedRA));
    let depth = mean_average(&preset_runs(&cfg, Method::DepthPrefix));
    (
        fedra >= depth - 1.0,
        format!("dynamic capacities: FedRA {fedra:.2} >= DepthPrefix {depth:.2} - 1"),
    )
}

fn criterion_09_subset_convergence() -> Verdict {
    let cfg = preset(Preset::Table1Desk);
    assert_eq!(cfg.subset.sizes, vec![2, 4, 8]);
    let trend = harness::subset_trend(&cfg, &SEEDS).unwrap();
    let medians: Vec<String> = trend.medians.iter().map(|m| format!("{:.2}", 100.0 * m)).collect();
    (
        trend.converged && trend.non_decreasing(),
        format!(
            "sizes {:?}: median final accuracy [{}], converged = {}, non-decreasing = {}",
            trend.sizes,
            medians.join(", "),
            trend.converged,
            trend.non_decreasing()
        ),
    )
}

fn criterion_10_bound_evaluator() -> Verdict {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let iv = lr_feasible_interval(1.0, 1.0, 1.0, 1.0).unwrap();
    // 3/16 + 1/6 = 17/48 and 1/4
    let mut ok = close(iv.lo, 17.0 / 48.0) && close(iv.hi, 0.25);
    let iv = lr_feasible_interval(6.0, 10.0, 1.0, 6.0).unwrap();
    ok &= close(iv.lo, 3.0 / 1600.0 + 1.0 / 60.0) && close(iv.hi, 1.0 / 40.0);

    let inputs = |t: f64, g: f64| BoundInputs {
        h: 1.0,
        sigma2: 0.5,
        delta2: 0.25,
        alpha: 0.1,
        n: 1.0,
        j: 4.0,
        t,
        eta: 0.06,
        gamma_star: g,
        f1: 2.0,
        sum_r_norm2: 3.0,
    };
    // Δ1 = 4·0.06/2 − 3/(32·4) − 1/12
    let d1 = 0.12 - 3.0 / 128.0 - 1.0 / 12.0;
    ok &= close(theorem1_bound(&inputs(10.0, 1.0)).unwrap().delta1, d1);
    let mut monotone = true;
    for g in [1.0, 2.0, 4.0, 8.0] {
        let b: Vec<f64> = [1.0, 10.0, 100.0, 1000.0]
            .iter()
            .map(|&t| theorem1_bound(&inputs(t, g)).unwrap().bound)
            .collect();
        monotone &= b.windows(2).all(|w| w[1] < w[0]);
    }
    for t in [1.0, 10.0, 100.0] {
        let b: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&g| theorem1_bound(&inputs(t, g)).unwrap().bound)
            .collect();
        monotone &= b.windows(2).all(|w| w[1] < w[0]);
    }

    let mut rng = seeded(11);
    let depth = generate_allocation(StrategyKind::DepthPrefix, &[12, 10, 8, 6, 4, 3], 12, &mut rng).unwrap();
    let depth_gamma = gamma_star(&[depth]).unwrap();

    let mut cfg = preset(Preset::Table1Desk);
    cfg.training.rounds = 10;
    let run = harness::run_experiment(&cfg, Method::FedRAConstrained, 0, &RunOptions::default()).unwrap();
    let measured = gamma_star(&run.allocations()).unwrap();
    let covered = run.history.iter().all(|r| r.gamma.iter().all(|&g| g >= 1));
    (
        ok && monotone && depth_gamma == 1 && measured >= 1 && covered,
        format!(
            "interval/delta1 hand values match = {ok}; bound strictly decreasing in T and gamma* = {monotone}; \
             DepthPrefix gamma* = {depth_gamma} (== 1); FedRA-Constrained measured gamma* = {measured} (>= 1), every column covered = {covered}"
        ),
    )
}

fn criterion_11_missing_layer_parity() -> Verdict {
    let cfg = preset(Preset::Table3Desk);
    let carry = mean_average(&preset_runs(&cfg, Method::FedRA));
    let constrain = mean_average(&preset_runs(&cfg, Method::FedRAConstrained));
    let diff = (carry - constrain).abs();
    (
        diff <= 3.0,
        format!("carry-forward {carry:.2} vs constrained {constrain:.2}: |diff| = {diff:.2} (<= 3)"),
    )
}

fn criterion_12_reproducible_metrics() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_fedra");
    let mut outputs = Vec::new();
    for sub in ["first", "second"] {
        let out = dir.path().join(sub);
        let status = std::process::Command::new(exe)
            .args(["run", "--preset", "table1-desk", "--seed", "5", "--rounds", "3", "--out"])
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        let csv = std::fs::read(harness::run_dir(&out, Method::FedRA, 5).join(harness::METRICS_FILE)).unwrap();
        outputs.push(csv);
    }
    let identical = outputs[0] == outputs[1] && !outputs[0].is_empty();
    (
        identical,
        format!("two `run` invocations, same config and seed: metrics CSV byte-identical = {identical} ({} bytes)", outputs[0].len()),
    )
}

fn main() -> ExitCode {
    let criteria: [fn() -> Verdict; 12] = [
        criterion_01_allocation_statistics,
        criterion_02_aggregation_oracle,
        criterion_03_fedavg_reduction,
        criterion_04_gradient_fidelity,
        criterion_05_mask_equivalence,
        criterion_06_table1_ordering,
        criterion_07_extreme_heterogeneity,
        criterion_08_dynamic_heterogeneity,
        criterion_09_subset_convergence,
        criterion_10_bound_evaluator,
        criterion_11_missing_layer_parity,
        criterion_12_reproducible_metrics,
    ];
    let mut failed = 0;
    for (k, run) in criteria.iter().enumerate() {
        let (pass, detail) = panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!("criterion {:>2} {}: {detail}", k + 1, if pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
