//! Round orchestration: allocate layers, dispatch submodels, train locally,
//! and merge adapters layer by layer with dataset-size weights.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{generate_allocation, resample_capacities, AllocationMatrix, AllocationStrategy, StrategyKind};
use crate::data::{FederationScenario, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, extract_submodel, EvalResult, StackModel, SubModel};
use crate::nn::{batch_gradient, sgd_step, DenseParams, LoraAdapter, Matrix};
use crate::rng::{derive_rng, stream, SimRng};
use crate::theory::mask_deviation_alpha;

#[derive(Clone, Debug)]
pub struct ClientProfile {
    pub id: usize,
    pub capacity: usize,
    pub domain: usize,
    pub data: Arc<LabeledDataset>,
}

impl ClientProfile {
    pub fn new(id: usize, capacity: usize, domain: usize, data: Arc<LabeledDataset>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Precondition(format!("client {id} has no training data")));
        }
        if capacity == 0 {
            return Err(Error::Precondition(format!("client {id} has zero capacity")));
        }
        Ok(ClientProfile {
            id,
            capacity,
            domain,
            data,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }
}

/// Trained adapters for the client's selected layers plus its head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub selected: Vec<usize>,
    pub adapters: Vec<LoraAdapter>,
    pub head: DenseParams,
    pub n_samples: usize,
    /// Mean minibatch loss over the last local epoch.
    pub last_epoch_loss: f64,
    pub steps: usize,
}

impl ClientUpdate {
    pub fn adapter_for(&self, layer: usize) -> Option<&LoraAdapter> {
        self.selected
            .binary_search(&layer)
            .ok()
            .map(|k| &self.adapters[k])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingLayerStrategy {
    /// A layer nobody trained this round keeps last round's adapter.
    #[default]
    CarryForward,
    /// Allocation guarantees every layer has at least one client.
    ConstrainAllocation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub clients_per_round: usize,
    pub strategy: AllocationStrategy,
    pub missing: MissingLayerStrategy,
}

impl RoundConfig {
    /// Constrained missing-layer handling upgrades random allocation to its
    /// covering variant.
    pub fn effective_kind(&self) -> StrategyKind {
        match (self.missing, self.strategy.kind) {
            (MissingLayerStrategy::ConstrainAllocation, StrategyKind::RandomUniform) => StrategyKind::RandomConstrained,
            (_, k) => k,
        }
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("local epochs and batch size must be >= 1".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return Err(Error::Config(format!(
                "{} clients per round out of {num_clients}",
                self.clients_per_round
            )));
        }
        if self.missing == MissingLayerStrategy::ConstrainAllocation
            && !matches!(self.effective_kind(), StrategyKind::RandomConstrained | StrategyKind::AllLarge)
        {
            return Err(Error::Config(format!(
                "constrained allocation is incompatible with {:?}",
                self.strategy.kind
            )));
        }
        Ok(())
    }
}

/// Round/client identifiers attached to divergence errors.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainContext {
    pub round: usize,
    pub client: usize,
}

/// Minibatch SGD over adapters and head for `cfg.local_epochs` shuffled
/// passes. Frozen parameters are never touched.
pub fn local_train(
    mut sub: SubModel,
    data: &LabeledDataset,
    cfg: &RoundConfig,
    rng: &mut SimRng,
    ctx: TrainContext,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::Precondition(format!("client {} has no data", ctx.client)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut last_epoch_loss = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| (data.features[i].as_slice(), data.labels[i]));
            let (loss, grads) = batch_gradient(&sub, batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    round: ctx.round,
                    client: ctx.client,
                    step,
                    loss,
                });
            }
            sgd_step(&mut sub, &grads, cfg.lr)?;
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
    }
    Ok(ClientUpdate {
        client: ctx.client,
        adapters: sub.blocks.iter().map(|b| b.adapter.clone()).collect(),
        selected: sub.selected,
        head: sub.head,
        n_samples: data.len(),
        last_epoch_loss,
        steps: step,
    })
}

fn check_updates_match(updates: &[ClientUpdate], m: &AllocationMatrix) -> Result<()> {
    if updates.len() != m.clients() {
        return Err(Error::Precondition(format!(
            "{} updates for {} allocation rows",
            updates.len(),
            m.clients()
        )));
    }
    for (i, u) in updates.iter().enumerate() {
        if u.selected != m.selected(i) {
            return Err(Error::Precondition(format!(
                "update of client {} covers {:?}, allocation row {i} is {:?}",
                u.client,
                u.selected,
                m.selected(i)
            )));
        }
        if u.adapters.len() != u.selected.len() {
            return Err(Error::Precondition(format!(
                "client {} sent {} adapters for {} layers",
                u.client,
                u.adapters.len(),
                u.selected.len()
            )));
        }
    }
    Ok(())
}

/// Layer-wise weighted average of the collected adapters:
/// `r_j = Σ_{i: M_ij=1} |D_i|·r_j^i / Σ_i M_ij·|D_i|`, applied to the `down`
/// and `up` factors separately. Layers with no client keep their previous
/// adapter under carry-forward. `updates[i]` must correspond to row `i`.
pub fn aggregate_lora(
    global: &StackModel,
    updates: &[ClientUpdate],
    m: &AllocationMatrix,
    missing: MissingLayerStrategy,
) -> Result<StackModel> {
    check_updates_match(updates, m)?;
    if m.layers() != global.layers() {
        return Err(Error::Shape(format!(
            "{}-layer allocation for a {}-layer model",
            m.layers(),
            global.layers()
        )));
    }
    let mut out = global.clone();
    for (j, block) in out.blocks.iter_mut().enumerate() {
        let Some((weights, total)) = layer_holders(updates, j)? else {
            match missing {
                MissingLayerStrategy::CarryForward => continue,
                MissingLayerStrategy::ConstrainAllocation => {
                    return Err(Error::Invariant(format!(
                        "layer {j} has no client under constrained allocation"
                    )))
                }
            }
        };
        if let [(k, _)] = weights[..] {
            let a = updates[k].adapter_for(j).expect("holder has the layer");
            block.adapter.down = a.down.clone();
            block.adapter.up = a.up.clone();
            continue;
        }
        let mut down = Matrix::zeros(block.adapter.down.rows(), block.adapter.down.cols());
        let mut up = Matrix::zeros(block.adapter.up.rows(), block.adapter.up.cols());
        for (k, w) in weights {
            let a = updates[k].adapter_for(j).expect("holder has the layer");
            down.axpy(w, &a.down)?;
            up.axpy(w, &a.up)?;
        }
        // One division per entry after summing keeps the weighted mean within
        // a rounding of the exact value.
        for v in down.as_mut_slice().iter_mut().chain(up.as_mut_slice()) {
            *v /= total;
        }
        block.adapter.down = down;
        block.adapter.up = up;
    }
    out.head = aggregate_head(updates)?;
    Ok(out)
}

/// `(update index, |D_i|)` pairs and their total.
type Holders = (Vec<(usize, f64)>, f64);

/// Holders of layer `j`; `None` when nobody trained it.
fn layer_holders(updates: &[ClientUpdate], j: usize) -> Result<Option<Holders>> {
    let holders: Vec<(usize, f64)> = updates
        .iter()
        .enumerate()
        .filter(|(_, u)| u.adapter_for(j).is_some())
        .map(|(k, u)| (k, u.n_samples as f64))
        .collect();
    if holders.is_empty() {
        return Ok(None);
    }
    let total: f64 = holders.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::Precondition(format!("zero aggregation weight for layer {j}")));
    }
    Ok(Some((holders, total)))
}

/// Normalized aggregation weights `(update index, |D_i| / Σ|D|)` of the
/// clients holding layer `j`; `None` when nobody trained it.
pub fn layer_weights(updates: &[ClientUpdate], j: usize) -> Result<Option<Vec<(usize, f64)>>> {
    Ok(layer_holders(updates, j)?.map(|(holders, total)| holders.into_iter().map(|(k, w)| (k, w / total)).collect()))
}

/// Dataset-size-weighted mean of the participants' heads.
pub fn aggregate_head(updates: &[ClientUpdate]) -> Result<DenseParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Precondition("no client updates to aggregate".into()))?;
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut head = DenseParams::zeros(first.head.out_dim(), first.head.in_dim());
    for u in updates {
        let w = u.n_samples as f64;
        head.weight.axpy(w, &u.head.weight)?;
        if u.head.bias.len() != head.bias.len() {
            return Err(Error::Shape("head bias length differs across clients".into()));
        }
        for (b, v) in head.bias.iter_mut().zip(&u.head.bias) {
            *b += w * v;
        }
    }
    for v in head.weight.as_mut_slice().iter_mut().chain(head.bias.iter_mut()) {
        *v /= total;
    }
    Ok(head)
}

/// Server-side state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub model: StackModel,
    /// Index of the next round to run.
    pub round: usize,
}

impl ServerState {
    pub fn new(model: StackModel) -> Self {
        ServerState { model, round: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// Participating client ids, ascending; row `i` of `allocation` is `clients[i]`.
    pub clients: Vec<usize>,
    pub allocation: AllocationMatrix,
    /// Γ_t per layer (column sums of `allocation`).
    pub gamma: Vec<usize>,
    /// Smallest nonzero Γ_t, i.e. the minimum over layers trained this round.
    pub gamma_min: Option<usize>,
    /// Tight mask-deviation coefficient of the dispatched submodels.
    pub alpha_measured: f64,
    /// ‖r_t‖² of the global adapters at the start of the round.
    pub adapter_norm2: f64,
    /// Sample-weighted mean of the clients' last-epoch training losses.
    pub train_loss: f64,
    /// Local SGD steps per participant.
    pub local_steps: Vec<usize>,
    pub domain_metrics: Vec<EvalResult>,
    pub average_accuracy: f64,
    pub wall_time_ms: f64,
}

/// Mean of per-domain accuracies (the "Average" column).
pub fn average_accuracy(metrics: &[EvalResult]) -> f64 {
    metrics.iter().map(|m| m.accuracy).sum::<f64>() / metrics.len().max(1) as f64
}

pub fn evaluate_domains(model: &StackModel, test_sets: &[LabeledDataset]) -> Result<Vec<EvalResult>> {
    test_sets.par_iter().map(|t| evaluate(model, t)).collect()
}

/// Allocation for round `round` exactly as [`run_round`] draws it.
pub fn round_allocation(
    scenario: &FederationScenario,
    cfg: &RoundConfig,
    layers: usize,
    seed: u64,
    round: usize,
) -> Result<(Vec<usize>, AllocationMatrix)> {
    let n = scenario.num_clients();
    let t = round as u64;
    let participants: Vec<usize> = if cfg.clients_per_round == n {
        (0..n).collect()
    } else {
        let mut rng = derive_rng(seed, &[stream::SAMPLING, t]);
        let mut p = index::sample(&mut rng, n, cfg.clients_per_round).into_vec();
        p.sort_unstable();
        p
    };
    let capacities: Vec<usize> = if cfg.strategy.dynamic {
        let mut rng = derive_rng(seed, &[stream::CAPACITY, t]);
        resample_capacities(participants.len(), layers, &mut rng)
    } else {
        participants
            .iter()
            .map(|&i| scenario.clients[i].capacity)
            .collect()
    };
    let mut rng = derive_rng(seed, &[stream::ALLOCATION, t]);
    let m = generate_allocation(cfg.effective_kind(), &capacities, layers, &mut rng)?;
    Ok((participants, m))
}

/// Per-scalar mask over [`StackModel::adapter_vector`] for a layer selection.
pub fn adapter_mask(model: &StackModel, selected: &[usize]) -> Vec<f64> {
    model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(j, b)| {
            let keep = if selected.binary_search(&j).is_ok() { 1.0 } else { 0.0 };
            std::iter::repeat_n(keep, b.adapter.num_params())
        })
        .collect()
}

/// One full round: sample → allocate → extract → train → aggregate → evaluate.
pub fn run_round(
    state: &mut ServerState,
    scenario: &FederationScenario,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<RoundReport> {
    let round = state.round;
    let started = Instant::now();
    cfg.validate(scenario.num_clients()).map_err(|e| e.in_round(round))?;
    let layers = state.model.layers();
    let (participants, allocation) =
        round_allocation(scenario, cfg, layers, seed, round).map_err(|e| e.in_round(round))?;

    let r = state.model.adapter_vector();
    let adapter_norm2: f64 = r.iter().map(|v| v * v).sum();
    let mut alpha_measured = 0.0f64;
    if adapter_norm2 > 0.0 {
        for i in 0..participants.len() {
            let mask = adapter_mask(&state.model, &allocation.selected(i));
            alpha_measured = alpha_measured.max(mask_deviation_alpha(&r, &mask)?);
        }
    }

    let updates: Vec<ClientUpdate> = participants
        .par_iter()
        .enumerate()
        .map(|(row, &id)| {
            let client = &scenario.clients[id];
            let sub = extract_submodel(&state.model, &allocation.selected(row))?;
            let mut rng = derive_rng(seed, &[stream::LOCAL_TRAIN, round as u64, id as u64]);
            local_train(sub, &client.data, cfg, &mut rng, TrainContext { round, client: id })
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_round(round))?;

    let next = aggregate_lora(&state.model, &updates, &allocation, cfg.missing).map_err(|e| e.in_round(round))?;
    let domain_metrics = evaluate_domains(&next, &scenario.test_sets).map_err(|e| e.in_round(round))?;

    let total_samples: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let train_loss = updates
        .iter()
        .map(|u| u.last_epoch_loss * u.n_samples as f64)
        .sum::<f64>()
        / total_samples;

    state.model = next;
    state.round += 1;

    let gamma = allocation.column_sums();
    let gamma_min = gamma.iter().copied().filter(|&g| g > 0).min();
    Ok(RoundReport {
        round,
        clients: participants,
        gamma,
        gamma_min,
        alpha_measured,
        adapter_norm2,
        train_loss,
        local_steps: updates.iter().map(|u| u.steps).collect(),
        average_accuracy: average_accuracy(&domain_metrics),
        domain_metrics,
        allocation,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs `rounds` sequential rounds, calling `on_round` after each.
pub fn run_federation<F>(
    state: &mut ServerState,
    scenario: &FederationScenario,
    cfg: &RoundConfig,
    rounds: usize,
    seed: u64,
    mut on_round: F,
) -> Result<Vec<RoundReport>>
where
    F: FnMut(&ServerState, &RoundReport) -> Result<()>,
{
    if rounds == 0 {
        return Err(Error::Precondition("at least one round".into()));
    }
    cfg.validate(scenario.num_clients())?;
    let mut history = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let report = run_round(state, scenario, cfg, seed)?;
        on_round(state, &report)?;
        history.push(report);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetEpoch {
    pub epoch: usize,
    pub selected: Vec<usize>,
    pub train_loss: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Single-machine training where every epoch trains a random `subset_size`
/// layer subset of the full model and writes its adapters (and the head)
/// back. Returns per-epoch evaluation of the full model on `test`.
pub fn run_subset_training(
    model: &mut StackModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    subset_size: usize,
    epochs: usize,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<Vec<SubsetEpoch>> {
    let layers = model.layers();
    if subset_size == 0 || subset_size > layers {
        return Err(Error::Precondition(format!("subset size {subset_size} of {layers} layers")));
    }
    let one_epoch = RoundConfig {
        local_epochs: 1,
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = derive_rng(seed, &[stream::SUBSET, epoch as u64]);
        let m = generate_allocation(StrategyKind::RandomUniform, &[subset_size], layers, &mut rng)?;
        let selected = m.selected(0);
        let sub = extract_submodel(model, &selected)?;
        let mut train_rng = derive_rng(seed, &[stream::LOCAL_TRAIN, epoch as u64]);
        let update = local_train(sub, train, &one_epoch, &mut train_rng, TrainContext { round: epoch, client: 0 })?;
        for (&j, a) in update.selected.iter().zip(&update.adapters) {
            model.blocks[j].adapter = a.clone();
        }
        model.head = update.head;
        let eval = evaluate(model, test)?;
        out.push(SubsetEpoch {
            epoch,
            selected,
            train_loss: update.last_epoch_loss,
            accuracy: eval.accuracy,
            loss: eval.mean_loss,
        });
    }
    Ok(out)
}

/// Weighted training loss of `model` over every client's data.
pub fn global_train_loss(model: &StackModel, scenario: &FederationScenario) -> Result<f64> {
    let parts: Vec<(f64, usize)> = scenario
        .clients
        .par_iter()
        .map(|c| evaluate(model, &c.data).map(|e| (e.mean_loss * c.n_samples() as f64, c.n_samples())))
        .collect::<Result<_>>()?;
    let n: usize = parts.iter().map(|p| p.1).sum();
    Ok(parts.iter().map(|p| p.0).sum::<f64>() / n as f64)
}
