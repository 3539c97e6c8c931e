//! Convergence-bound evaluation for random layer allocation, plus the
//! empirical quantities it consumes (mask deviation α, minimum layer
//! coverage Γ*, and proxy estimates of the smoothness, noise and
//! heterogeneity constants).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationMatrix;
use crate::data::FederationScenario;
use crate::error::{Error, Result};
use crate::model::StackModel;
use crate::nn::{batch_gradient, GradRecord, Network};
use crate::rng::{derive_rng, stream};

/// Admissible client learning rates `[lo, hi]`; empty when `lo > hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrInterval {
    pub lo: f64,
    pub hi: f64,
}

impl LrInterval {
    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, eta: f64) -> bool {
        self.lo <= eta && eta <= self.hi
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} = {v} must be finite and > 0")))
    }
}

/// `lo = 3N/(16J²hΓ*) + N/(6JhΓ*)`, `hi = 1/(4Jh)`.
pub fn lr_feasible_interval(clients: f64, local_steps: f64, h: f64, gamma_star: f64) -> Result<LrInterval> {
    positive("N", clients)?;
    positive("J", local_steps)?;
    positive("h", h)?;
    positive("gamma*", gamma_star)?;
    let (n, j) = (clients, local_steps);
    Ok(LrInterval {
        lo: 3.0 * n / (16.0 * j * j * h * gamma_star) + n / (6.0 * j * h * gamma_star),
        hi: 1.0 / (4.0 * j * h),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Lipschitz constant of the gradient.
    pub h: f64,
    pub sigma2: f64,
    pub delta2: f64,
    pub alpha: f64,
    pub n: f64,
    /// Local update steps per round.
    pub j: f64,
    /// Rounds.
    pub t: f64,
    pub eta: f64,
    pub gamma_star: f64,
    /// Expected global objective at the first round.
    pub f1: f64,
    /// Σ_t E‖r_t‖².
    pub sum_r_norm2: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        let all = [
            ("h", self.h),
            ("sigma2", self.sigma2),
            ("delta2", self.delta2),
            ("alpha", self.alpha),
            ("N", self.n),
            ("J", self.j),
            ("T", self.t),
            ("eta", self.eta),
            ("gamma*", self.gamma_star),
            ("F1", self.f1),
            ("sum_r_norm2", self.sum_r_norm2),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Precondition(format!("{name} = {v} is not finite")));
        }
        for (name, v) in [("sigma2", self.sigma2), ("delta2", self.delta2), ("alpha", self.alpha), ("sum_r_norm2", self.sum_r_norm2)] {
            if v < 0.0 {
                return Err(Error::Precondition(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.gamma_star < 1.0 {
            return Err(Error::Precondition(format!("gamma* = {} must be >= 1", self.gamma_star)));
        }
        if self.j < 1.0 || self.t < 1.0 {
            return Err(Error::Precondition("J and T must be >= 1".into()));
        }
        positive("h", self.h)?;
        positive("N", self.n)?;
        positive("eta", self.eta)
    }

    /// `Δ1 = Jη/2 − 3N/(32JhΓ*) − N/(12hΓ*)`
    pub fn delta1(&self) -> f64 {
        let (n, j, h, g) = (self.n, self.j, self.h, self.gamma_star);
        j * self.eta / 2.0 - 3.0 * n / (32.0 * j * h * g) - n / (12.0 * h * g)
    }
}

/// The four right-hand-side summands of the bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `F1 / (TΔ1)`
    pub initial_gap: f64,
    /// `hNα / (TΔ1Γ*) · Σ‖r_t‖²`
    pub mask_deviation: f64,
    /// `17N / (64JhΔ1Γ*) · σ²`
    pub gradient_noise: f64,
    /// `(1/3 + 3/(32J)) · N / (hΔ1Γ*) · δ²`
    pub heterogeneity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta1: f64,
    pub bound: f64,
    pub terms: BoundTerms,
    pub feasible: bool,
    pub interval: LrInterval,
}

/// Upper bound on the average squared gradient norm over trained layers.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let interval = lr_feasible_interval(inputs.n, inputs.j, inputs.h, inputs.gamma_star)?;
    if !interval.contains(inputs.eta) {
        return Err(Error::Precondition(format!(
            "eta = {} outside the admissible interval [{}, {}]",
            inputs.eta, interval.lo, interval.hi
        )));
    }
    let delta1 = inputs.delta1();
    if delta1 <= 0.0 {
        return Err(Error::Infeasible(format!("delta1 = {delta1} is not positive")));
    }
    let BoundInputs {
        h,
        sigma2,
        delta2,
        alpha,
        n,
        j,
        t,
        gamma_star: g,
        f1,
        sum_r_norm2,
        ..
    } = *inputs;
    let terms = BoundTerms {
        initial_gap: f1 / (t * delta1),
        mask_deviation: h * n * alpha / (t * delta1 * g) * sum_r_norm2,
        gradient_noise: 17.0 * n / (64.0 * j * h * delta1 * g) * sigma2,
        heterogeneity: (1.0 / 3.0 + 3.0 / (32.0 * j)) * n / (h * delta1 * g) * delta2,
    };
    Ok(BoundReport {
        delta1,
        bound: terms.initial_gap + terms.mask_deviation + terms.gradient_noise + terms.heterogeneity,
        terms,
        feasible: true,
        interval,
    })
}

/// Tight α in `‖r − r⊙m‖ ≤ α‖r‖²`: `α = ‖r − r⊙m‖ / ‖r‖²`. The inequality
/// mixes a norm with a squared norm; it is evaluated as written.
pub fn mask_deviation_alpha(r: &[f64], mask: &[f64]) -> Result<f64> {
    if r.len() != mask.len() {
        return Err(Error::Shape(format!("{} parameters, {} mask entries", r.len(), mask.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Precondition("mask entries must be 0 or 1".into()));
    }
    let norm2: f64 = r.iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return Err(Error::Numeric("mask deviation is undefined for r = 0".into()));
    }
    let dropped: f64 = r
        .iter()
        .zip(mask)
        .map(|(v, m)| if *m == 0.0 { v * v } else { 0.0 })
        .sum();
    Ok(dropped.sqrt() / norm2)
}

/// `Γ* = min_{t, l ∈ S^t} Γ_t^l`, where `S^t` holds the layers with a
/// nonzero column sum in round `t`.
pub fn gamma_star(history: &[AllocationMatrix]) -> Result<usize> {
    let first = history
        .first()
        .ok_or_else(|| Error::Precondition("empty allocation history".into()))?;
    let layers = first.layers();
    let mut best: Option<usize> = None;
    for m in history {
        if m.layers() != layers {
            return Err(Error::Shape(format!("{}-layer matrix in a {layers}-layer history", m.layers())));
        }
        if let Some(g) = m.column_sums().into_iter().filter(|&g| g > 0).min() {
            best = Some(best.map_or(g, |b| b.min(g)));
        }
    }
    best.ok_or_else(|| Error::Precondition("no layer was trained in any round".into()))
}

/// Proxy estimates of the assumption constants. None of these carry
/// statistical guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    /// Largest observed `‖∇F(a) − ∇F(b)‖ / ‖a − b‖` over probe pairs.
    pub h: f64,
    /// Mean squared deviation of minibatch gradients from the full gradient.
    pub sigma2: f64,
    /// Sample-weighted mean of `‖∇F_n − ∇F‖²` over clients.
    pub delta2: f64,
    pub label: &'static str,
}

/// Per-client gradients, their sample weights and the weighted global gradient.
struct FullGradient {
    per_client: Vec<Vec<f64>>,
    weights: Vec<f64>,
    global: Vec<f64>,
}

fn full_gradient(model: &StackModel, scenario: &FederationScenario, max_per_client: usize) -> Result<FullGradient> {
    let per_client: Vec<(Vec<f64>, f64)> = scenario
        .clients
        .par_iter()
        .map(|c| {
            let n = c.n_samples().min(max_per_client);
            let batch = (0..n).map(|i| (c.data.features[i].as_slice(), c.data.labels[i]));
            batch_gradient(model, batch).map(|(_, g)| (g.flatten(), c.n_samples() as f64))
        })
        .collect::<Result<_>>()?;
    let total: f64 = per_client.iter().map(|p| p.1).sum();
    let dim = per_client[0].0.len();
    let mut global = vec![0.0; dim];
    for (g, w) in &per_client {
        for (a, b) in global.iter_mut().zip(g) {
            *a += w / total * b;
        }
    }
    let weights = per_client.iter().map(|p| p.1 / total).collect();
    Ok(FullGradient {
        per_client: per_client.into_iter().map(|p| p.0).collect(),
        weights,
        global,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Estimates `h`, `σ²` and `δ²` around `model` on the scenario's client data.
pub fn estimate_constants(
    model: &StackModel,
    scenario: &FederationScenario,
    batch_size: usize,
    probes: usize,
    seed: u64,
) -> Result<EmpiricalConstants> {
    const MAX_PER_CLIENT: usize = 256;
    if scenario.clients.is_empty() || batch_size == 0 {
        return Err(Error::Precondition("need clients and a positive batch size".into()));
    }
    let FullGradient {
        per_client: client_grads,
        weights,
        global,
    } = full_gradient(model, scenario, MAX_PER_CLIENT)?;
    let delta2 = client_grads
        .iter()
        .zip(&weights)
        .map(|(g, w)| w * dist2(g, &global))
        .sum();

    let mut rng = derive_rng(seed, &[stream::PROBE]);
    let mut sigma_acc = 0.0;
    let mut sigma_n = 0usize;
    for (c, client_grad) in scenario.clients.iter().zip(&client_grads) {
        let n = c.n_samples().min(MAX_PER_CLIENT);
        for _ in 0..probes.max(1) {
            let batch = (0..batch_size.min(n)).map(|_| {
                let i = rng.random_range(0..n);
                (c.data.features[i].as_slice(), c.data.labels[i])
            });
            let (_, g) = batch_gradient(model, batch)?;
            sigma_acc += dist2(&g.flatten(), client_grad);
            sigma_n += 1;
        }
    }

    let mut h = 0.0f64;
    for _ in 0..probes.max(1) {
        let mut shifted = model.clone();
        let mut step2 = 0.0;
        for slice in crate::nn::trainable_slices_mut(&mut shifted) {
            for v in slice.iter_mut() {
                let d = rng.random_range(-1e-3..1e-3);
                *v += d;
                step2 += d * d;
            }
        }
        let g2 = full_gradient(&shifted, scenario, MAX_PER_CLIENT)?.global;
        h = h.max((dist2(&global, &g2) / step2).sqrt());
    }
    Ok(EmpiricalConstants {
        h,
        sigma2: sigma_acc / sigma_n as f64,
        delta2,
        label: "empirical proxy",
    })
}

/// Squared norm of the global-objective gradient restricted to the adapters
/// of `trained` layers (the measurable left-hand side of the bound).
pub fn trained_layer_grad_norm2(model: &StackModel, scenario: &FederationScenario, trained: &[usize]) -> Result<f64> {
    let grads: Vec<(GradRecord, f64)> = scenario
        .clients
        .par_iter()
        .map(|c| batch_gradient(model, c.data.iter()).map(|(_, g)| (g, c.n_samples() as f64)))
        .collect::<Result<_>>()?;
    let total: f64 = grads.iter().map(|g| g.1).sum();
    let mut global = GradRecord::zeros_like(model);
    for (g, w) in &grads {
        global.add_scaled(w / total, g)?;
    }
    Ok(trained
        .iter()
        .filter(|&&j| j < model.blocks().len())
        .map(|&j| global.adapter_norm2(j))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{generate_allocation, StrategyKind};
    use crate::rng::seeded;

    fn base_inputs() -> BoundInputs {
        // N=6, J=10, h=1, Γ*=6 → η ∈ [0.0185416.., 0.025]
        BoundInputs {
            h: 1.0,
            sigma2: 0.5,
            delta2: 0.25,
            alpha: 0.1,
            n: 6.0,
            j: 10.0,
            t: 100.0,
            eta: 0.024,
            gamma_star: 6.0,
            f1: 2.3,
            sum_r_norm2: 4.0,
        }
    }

    #[test]
    fn interval_examples() {
        let i = lr_feasible_interval(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((i.lo - (3.0 / 16.0 + 1.0 / 6.0)).abs() < 1e-12);
        assert!((i.lo - 0.354_166_666_666_666_7).abs() < 1e-12);
        assert!((i.hi - 0.25).abs() < 1e-12);
        assert!(i.is_empty());

        let a = lr_feasible_interval(6.0, 10.0, 1.0, 3.0).unwrap();
        assert!((a.lo - (0.00375 + 6.0 / 180.0)).abs() < 1e-12);
        assert!((a.hi - 0.025).abs() < 1e-12);
        assert!(a.is_empty());
        let b = lr_feasible_interval(6.0, 10.0, 1.0, 6.0).unwrap();
        assert!((b.lo - (0.001875 + 6.0 / 360.0)).abs() < 1e-12);
        assert!(!b.is_empty());
        assert!((a.lo / b.lo - 2.0).abs() < 1e-12);
        assert_eq!(a.hi, b.hi);

        assert!(matches!(lr_feasible_interval(0.0, 1.0, 1.0, 1.0), Err(Error::Precondition(_))));
        assert!(lr_feasible_interval(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn bound_is_sum_of_terms() {
        let r = theorem1_bound(&base_inputs()).unwrap();
        let t = r.terms;
        let sum = t.initial_gap + t.mask_deviation + t.gradient_noise + t.heterogeneity;
        assert!((r.bound - sum).abs() <= 1e-15 * sum.abs().max(1.0));
        let expected_delta1 = 10.0 * 0.024 / 2.0 - 18.0 / 1920.0 - 6.0 / 72.0;
        assert!((r.delta1 - expected_delta1).abs() < 1e-12);
    }

    #[test]
    fn noiseless_bound_decays_in_t() {
        let mut inp = BoundInputs {
            sigma2: 0.0,
            delta2: 0.0,
            alpha: 0.0,
            ..base_inputs()
        };
        let mut last = f64::INFINITY;
        for t in [1.0, 10.0, 100.0] {
            inp.t = t;
            let r = theorem1_bound(&inp).unwrap();
            assert!((r.bound - inp.f1 / (t * r.delta1)).abs() < 1e-12);
            assert!(r.bound < last);
            last = r.bound;
        }
    }

    #[test]
    fn bound_decreases_in_gamma() {
        let mut inp = BoundInputs {
            n: 1.0,
            j: 4.0,
            eta: 0.06,
            ..base_inputs()
        };
        let mut last = f64::INFINITY;
        for g in [1.0, 2.0, 4.0, 8.0] {
            inp.gamma_star = g;
            let b = theorem1_bound(&inp).unwrap().bound;
            assert!(b < last, "gamma {g}: {b} vs {last}");
            last = b;
        }
    }

    #[test]
    fn bound_rejections() {
        let inp = BoundInputs {
            eta: 0.5,
            ..base_inputs()
        };
        assert!(matches!(theorem1_bound(&inp), Err(Error::Precondition(_))));
        let inp = BoundInputs {
            gamma_star: 0.5,
            ..base_inputs()
        };
        assert!(theorem1_bound(&inp).is_err());
        let iv = lr_feasible_interval(6.0, 10.0, 1.0, 6.0).unwrap();
        let at_lo = BoundInputs {
            eta: iv.lo,
            ..base_inputs()
        };
        // Δ1 vanishes at the lower end of the interval
        assert!(theorem1_bound(&at_lo).is_err());
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(mask_deviation_alpha(&[1.0, -2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((mask_deviation_alpha(&[3.0, 4.0], &[1.0, 0.0]).unwrap() - 0.16).abs() < 1e-15);
        let a = mask_deviation_alpha(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let b = mask_deviation_alpha(&[4.0, 3.0, 2.0, 1.0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(mask_deviation_alpha(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
        assert!(mask_deviation_alpha(&[1.0], &[0.5]).is_err());
    }

    #[test]
    fn gamma_star_examples() {
        let mut rng = seeded(1);
        let big = generate_allocation(StrategyKind::AllLarge, &[3; 6], 4, &mut rng).unwrap();
        assert_eq!(gamma_star(&[big]).unwrap(), 6);

        let dp = generate_allocation(StrategyKind::DepthPrefix, &[12, 10, 8, 6, 4, 3], 12, &mut rng).unwrap();
        assert_eq!(gamma_star(&[dp]).unwrap(), 1);

        let with_gap = AllocationMatrix::from_selections(&[vec![0, 1], vec![0, 1]], 3).unwrap();
        assert_eq!(gamma_star(&[with_gap]).unwrap(), 2);
        assert!(gamma_star(&[]).is_err());
    }
}
