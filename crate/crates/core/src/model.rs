//! Residual stack with per-layer adapters, client submodels, evaluation and
//! text checkpoints.
//!
//! Layer indices are zero-based everywhere in this crate.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    dense_forward, forward_trace, lora_delta_apply, softmax_cross_entropy, Activation, DenseParams,
    LoraAdapter, Matrix, Network, TrainableNetwork,
};
use crate::rng::{derive_rng, stream};

/// `h ↦ h + act((W + s·U·D) h + b)` on a `width`-dimensional residual stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub base: DenseParams,
    pub adapter: LoraAdapter,
    pub activation: Activation,
}

impl ResidualBlock {
    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        let z = lora_delta_apply(&self.adapter, &self.base, h)?;
        Ok(h.iter()
            .zip(z)
            .map(|(&hv, zv)| hv + self.activation.apply(zv))
            .collect())
    }

    pub fn width(&self) -> usize {
        self.base.in_dim()
    }

    /// Zeroes base, bias and adapter; the block becomes the identity map.
    pub fn zero_out(&mut self) {
        self.base.zero_out();
        self.adapter.zero_out();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub layers: usize,
    pub input_dim: usize,
    pub width: usize,
    pub classes: usize,
    pub rank: usize,
    pub lora_scale: f64,
    pub activation: Activation,
    /// Multiplier on the `1/√d` standard deviation of the frozen base layers.
    pub base_gain: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            layers: 8,
            input_dim: 32,
            width: 32,
            classes: 10,
            rank: 4,
            lora_scale: 1.0,
            activation: Activation::Relu,
            base_gain: 0.6,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.width == 0 || self.classes == 0 {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.rank == 0 || self.rank > self.width {
            return Err(Error::Precondition(format!(
                "adapter rank {} must lie in [1, {}]",
                self.rank, self.width
            )));
        }
        if !(self.lora_scale.is_finite() && self.lora_scale > 0.0) {
            return Err(Error::Config(format!("lora scale {} must be > 0", self.lora_scale)));
        }
        if !(self.base_gain.is_finite() && self.base_gain > 0.0) {
            return Err(Error::Config(format!("base gain {} must be > 0", self.base_gain)));
        }
        Ok(())
    }
}

/// The global model: frozen input projection and base layers, trainable
/// adapters and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    pub dims: ModelDims,
    pub input_proj: DenseParams,
    pub blocks: Vec<ResidualBlock>,
    pub head: DenseParams,
}

impl StackModel {
    /// Builds the frozen surrogate foundation model for `seed`. Base weights
    /// and biases have standard deviation `base_gain/√d` with `d` the fan-in,
    /// the input projection `1/√input_dim`. Adapters start with a zero delta
    /// and the head at zero.
    pub fn build(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = derive_rng(seed, &[stream::MODEL_INIT]);
        let in_std = 1.0 / (dims.input_dim as f64).sqrt();
        let std = dims.base_gain / (dims.width as f64).sqrt();
        let input_proj = DenseParams::new(
            Matrix::gaussian(dims.width, dims.input_dim, in_std, &mut rng),
            vec![0.0; dims.width],
        )?;
        let mut blocks = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            let weight = Matrix::gaussian(dims.width, dims.width, std, &mut rng);
            let bias = Matrix::gaussian(1, dims.width, std, &mut rng).as_slice().to_vec();
            let adapter = LoraAdapter::zero_delta(dims.width, dims.width, dims.rank, dims.lora_scale, &mut rng)?;
            blocks.push(ResidualBlock {
                base: DenseParams::new(weight, bias)?,
                adapter,
                activation: dims.activation,
            });
        }
        Ok(StackModel {
            dims: dims.clone(),
            input_proj,
            blocks,
            head: DenseParams::zeros(dims.classes, dims.width),
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Copy of the model with every parameter of blocks outside `selected`
    /// zeroed. With `act(0) = 0` those blocks become identities.
    pub fn masked(&self, selected: &[usize]) -> Result<StackModel> {
        let keep = normalize_selection(selected, self.layers())?;
        let mut out = self.clone();
        for (j, block) in out.blocks.iter_mut().enumerate() {
            if keep.binary_search(&j).is_err() {
                block.zero_out();
            }
        }
        Ok(out)
    }

    /// All trainable scalars: adapters block by block, then head.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b.adapter.down.as_slice());
            out.extend_from_slice(b.adapter.up.as_slice());
        }
        out.extend_from_slice(self.head.weight.as_slice());
        out.extend_from_slice(&self.head.bias);
        out
    }

    /// Adapter scalars only, block by block.
    pub fn adapter_vector(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.adapter
                    .down
                    .as_slice()
                    .iter()
                    .chain(b.adapter.up.as_slice())
                    .copied()
            })
            .collect()
    }

    /// SHA-256 over the frozen parameters (input projection and base layers).
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        hash_dense(&mut h, &self.input_proj);
        for b in &self.blocks {
            hash_dense(&mut h, &b.base);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, values) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let dense = |prefix: &str, p: &DenseParams, out: &mut Vec<_>| {
            out.push((
                format!("{prefix}.weight"),
                vec![p.weight.rows(), p.weight.cols()],
                p.weight.as_slice().to_vec(),
            ));
            out.push((format!("{prefix}.bias"), vec![p.bias.len()], p.bias.clone()));
        };
        dense("input_proj", &self.input_proj, &mut out);
        for (j, b) in self.blocks.iter().enumerate() {
            dense(&format!("blocks.{j}.base"), &b.base, &mut out);
            for (name, m) in [("down", &b.adapter.down), ("up", &b.adapter.up)] {
                out.push((
                    format!("blocks.{j}.adapter.{name}"),
                    vec![m.rows(), m.cols()],
                    m.as_slice().to_vec(),
                ));
            }
        }
        dense("head", &self.head, &mut out);
        out
    }

    /// Structured-text checkpoint: a header, then one `tensor NAME SHAPE...`
    /// line per array followed by its values in 17 significant digits.
    pub fn to_checkpoint_text(&self, round: usize) -> String {
        let d = &self.dims;
        let mut s = String::new();
        writeln!(s, "fedra-checkpoint 1").unwrap();
        writeln!(s, "round {round}").unwrap();
        writeln!(
            s,
            "dims layers={} input_dim={} width={} classes={} rank={} lora_scale={:.16e} base_gain={:.16e} activation={}",
            d.layers,
            d.input_dim,
            d.width,
            d.classes,
            d.rank,
            d.lora_scale,
            d.base_gain,
            match d.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }
        )
        .unwrap();
        for (name, shape, values) in self.named_tensors() {
            let shape: Vec<String> = shape.iter().map(ToString::to_string).collect();
            writeln!(s, "tensor {name} {}", shape.join(" ")).unwrap();
            let vals: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
        s
    }

    /// Inverse of [`StackModel::to_checkpoint_text`]; returns the model and round.
    pub fn from_checkpoint_text(text: &str) -> Result<(StackModel, usize)> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        if lines.next() != Some("fedra-checkpoint 1") {
            return Err(bad("missing header"));
        }
        let round = lines
            .next()
            .and_then(|l| l.strip_prefix("round "))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad("missing round"))?;
        let dims_line = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .ok_or_else(|| bad("missing dims"))?;
        let mut dims = ModelDims::default();
        for kv in dims_line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
            let num = || v.parse::<usize>().map_err(|_| bad(kv));
            match k {
                "layers" => dims.layers = num()?,
                "input_dim" => dims.input_dim = num()?,
                "width" => dims.width = num()?,
                "classes" => dims.classes = num()?,
                "rank" => dims.rank = num()?,
                "lora_scale" => dims.lora_scale = v.parse().map_err(|_| bad(kv))?,
                "base_gain" => dims.base_gain = v.parse().map_err(|_| bad(kv))?,
                "activation" => {
                    dims.activation = match v {
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        _ => return Err(bad(kv)),
                    }
                }
                _ => return Err(bad(kv)),
            }
        }
        dims.validate()?;

        let mut tensors = TensorTable::new();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(bad(header));
            }
            let name = parts.next().ok_or_else(|| bad(header))?.to_string();
            let shape: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| bad(header)))
                .collect::<Result<_>>()?;
            let body = lines.next().ok_or_else(|| bad("truncated tensor"))?;
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(v)))
                .collect::<Result<_>>()?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} has {} values", values.len())));
            }
            tensors.insert(name, (shape, values));
        }
        let input_proj = take_dense(&mut tensors, "input_proj")?;
        let mut blocks = Vec::with_capacity(dims.layers);
        for j in 0..dims.layers {
            let base = take_dense(&mut tensors, &format!("blocks.{j}.base"))?;
            let down = take_matrix(&mut tensors, &format!("blocks.{j}.adapter.down"))?;
            let up = take_matrix(&mut tensors, &format!("blocks.{j}.adapter.up"))?;
            blocks.push(ResidualBlock {
                base,
                adapter: LoraAdapter::new(down, up, dims.lora_scale)?,
                activation: dims.activation,
            });
        }
        let head = take_dense(&mut tensors, "head")?;
        let model = StackModel {
            dims,
            input_proj,
            blocks,
            head,
        };
        model.check_shapes()?;
        Ok((model, round))
    }

    fn check_shapes(&self) -> Result<()> {
        let d = &self.dims;
        let ok = self.input_proj.weight.shape() == (d.width, d.input_dim)
            && self.head.weight.shape() == (d.classes, d.width)
            && self.blocks.iter().all(|b| {
                b.base.weight.shape() == (d.width, d.width)
                    && b.adapter.down.shape() == (d.rank, d.width)
                    && b.adapter.up.shape() == (d.width, d.rank)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("tensor shapes disagree with model dims".into()))
        }
    }
}

type TensorTable = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn take_tensor(t: &mut TensorTable, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    t.remove(name)
        .ok_or_else(|| Error::Parse(format!("checkpoint: missing {name}")))
}

fn take_matrix(t: &mut TensorTable, name: &str) -> Result<Matrix> {
    let (shape, values) = take_tensor(t, name)?;
    if shape.len() != 2 {
        return Err(Error::Parse(format!("checkpoint: {name} is not 2-d")));
    }
    Matrix::from_vec(shape[0], shape[1], values)
}

fn take_dense(t: &mut TensorTable, prefix: &str) -> Result<DenseParams> {
    let weight = take_matrix(t, &format!("{prefix}.weight"))?;
    let (_, bias) = take_tensor(t, &format!("{prefix}.bias"))?;
    DenseParams::new(weight, bias)
}

fn hash_dense(h: &mut Sha256, p: &DenseParams) {
    for v in p.weight.as_slice().iter().chain(&p.bias) {
        h.update(v.to_le_bytes());
    }
}

impl Network for StackModel {
    fn input_proj(&self) -> &DenseParams {
        &self.input_proj
    }
    fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }
    fn head(&self) -> &DenseParams {
        &self.head
    }
}

impl TrainableNetwork for StackModel {
    fn parts_mut(&mut self) -> (&mut [ResidualBlock], &mut DenseParams) {
        (&mut self.blocks, &mut self.head)
    }
}

/// Sorts a layer selection and rejects duplicates or out-of-range indices.
pub fn normalize_selection(selected: &[usize], layers: usize) -> Result<Vec<usize>> {
    let mut s = selected.to_vec();
    s.sort_unstable();
    if let Some(&j) = s.iter().find(|&&j| j >= layers) {
        return Err(Error::Index(format!("layer {j} in a {layers}-layer model")));
    }
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Index(format!("duplicate layer in selection {selected:?}")));
    }
    Ok(s)
}

/// A client's copy of the selected layers, applied in ascending global order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubModel {
    pub selected: Vec<usize>,
    pub input_proj: DenseParams,
    pub blocks: Vec<ResidualBlock>,
    pub head: DenseParams,
}

impl SubModel {
    /// Writes this submodel's adapters and head back into `model`.
    pub fn write_back(&self, model: &mut StackModel) -> Result<()> {
        for (&j, block) in self.selected.iter().zip(&self.blocks) {
            let slot = model
                .blocks
                .get_mut(j)
                .ok_or_else(|| Error::Index(format!("layer {j}")))?;
            slot.adapter = block.adapter.clone();
        }
        model.head = self.head.clone();
        Ok(())
    }

    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        hash_dense(&mut h, &self.input_proj);
        for b in &self.blocks {
            hash_dense(&mut h, &b.base);
        }
        hex::encode(h.finalize())
    }
}

impl Network for SubModel {
    fn input_proj(&self) -> &DenseParams {
        &self.input_proj
    }
    fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }
    fn head(&self) -> &DenseParams {
        &self.head
    }
}

impl TrainableNetwork for SubModel {
    fn parts_mut(&mut self) -> (&mut [ResidualBlock], &mut DenseParams) {
        (&mut self.blocks, &mut self.head)
    }
}

/// Deep-copies the layers in `selected` (any order) plus input projection
/// and head.
pub fn extract_submodel(model: &StackModel, selected: &[usize]) -> Result<SubModel> {
    if selected.is_empty() {
        return Err(Error::Precondition("empty layer selection".into()));
    }
    let selected = normalize_selection(selected, model.layers())?;
    Ok(SubModel {
        blocks: selected.iter().map(|&j| model.blocks[j].clone()).collect(),
        selected,
        input_proj: model.input_proj.clone(),
        head: model.head.clone(),
    })
}

pub fn forward<N: Network + ?Sized>(net: &N, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != net.input_proj().in_dim() {
        return Err(Error::Shape(format!(
            "input of length {} for input dim {}",
            x.len(),
            net.input_proj().in_dim()
        )));
    }
    let mut h = dense_forward(net.input_proj(), x)?;
    for block in net.blocks() {
        h = block.forward(&h)?;
    }
    dense_forward(net.head(), &h)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn evaluate<N: Network + ?Sized>(net: &N, data: &LabeledDataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Precondition("evaluation on an empty dataset".into()));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (x, y) in data.iter() {
        let logits = forward_trace(net, x)?.logits;
        loss += softmax_cross_entropy(&logits, y)?.0;
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    let total = data.len();
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        mean_loss: loss / total as f64,
        correct,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn dims(layers: usize) -> ModelDims {
        ModelDims {
            layers,
            input_dim: 5,
            width: 6,
            classes: 3,
            rank: 2,
            ..ModelDims::default()
        }
    }

    /// A model whose adapters and head are non-trivial.
    fn trained_like(layers: usize, seed: u64) -> StackModel {
        let mut m = StackModel::build(&dims(layers), seed).unwrap();
        let mut rng = seeded(seed ^ 0xABCD);
        for b in &mut m.blocks {
            b.adapter.up = Matrix::gaussian(6, 2, 0.3, &mut rng);
        }
        m.head.weight = Matrix::gaussian(3, 6, 0.5, &mut rng);
        m
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let d = ModelDims {
            layers: 12,
            width: 16,
            input_dim: 8,
            ..ModelDims::default()
        };
        let a = StackModel::build(&d, 42).unwrap();
        let b = StackModel::build(&d, 42).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.blocks.len(), 12);
        assert!(a.blocks.iter().all(|b| b.base.weight.shape() == (16, 16)));
        assert_ne!(a.digest(), StackModel::build(&d, 43).unwrap().digest());
    }

    #[test]
    fn build_rejects_bad_dims() {
        assert!(matches!(StackModel::build(&dims(0), 1), Err(Error::Config(_))));
        let d = ModelDims { rank: 7, ..dims(2) };
        assert!(matches!(StackModel::build(&d, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_init_adapters_are_neutral() {
        let m = StackModel::build(&dims(3), 5).unwrap();
        let mut no_adapter = m.clone();
        for b in &mut no_adapter.blocks {
            b.adapter.down.fill(0.0);
        }
        let x = [0.2, -0.3, 1.0, 0.4, -0.9];
        let a = forward(&m, &x).unwrap();
        let b = forward(&no_adapter, &x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn full_selection_matches_full_model() {
        let m = trained_like(4, 1);
        let sub = extract_submodel(&m, &[0, 1, 2, 3]).unwrap();
        let x = [0.5, 0.1, -0.2, 0.3, 0.0];
        assert_eq!(forward(&sub, &x).unwrap(), forward(&m, &x).unwrap());
    }

    #[test]
    fn extraction_picks_exact_blocks_in_order() {
        let m = trained_like(6, 2);
        let sub = extract_submodel(&m, &[4, 1]).unwrap();
        assert_eq!(sub.selected, vec![1, 4]);
        assert_eq!(sub.blocks[0], m.blocks[1]);
        assert_eq!(sub.blocks[1], m.blocks[4]);
        let prefix = extract_submodel(&m, &[0, 1, 2]).unwrap();
        assert_eq!(prefix.blocks, m.blocks[..3].to_vec());
    }

    #[test]
    fn extraction_errors() {
        let m = trained_like(3, 2);
        assert!(matches!(extract_submodel(&m, &[3]), Err(Error::Index(_))));
        assert!(matches!(extract_submodel(&m, &[1, 1]), Err(Error::Index(_))));
        assert!(matches!(extract_submodel(&m, &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn submodel_mutation_is_isolated() {
        let m = trained_like(3, 3);
        let before = m.digest();
        let mut sub = extract_submodel(&m, &[0, 2]).unwrap();
        sub.blocks[0].adapter.up.fill(9.0);
        sub.head.bias[0] = 4.0;
        assert_eq!(m.digest(), before);
    }

    #[test]
    fn zero_blocks_reduce_to_head_of_projection() {
        let mut m = trained_like(3, 4);
        for b in &mut m.blocks {
            b.zero_out();
        }
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let direct = dense_forward(&m.head, &dense_forward(&m.input_proj, &x).unwrap()).unwrap();
        assert_eq!(forward(&m, &x).unwrap(), direct);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = trained_like(2, 4);
        assert!(matches!(forward(&m, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn uniform_logits_evaluate_to_chance() {
        let m = StackModel::build(&ModelDims { classes: 10, ..dims(2) }, 1).unwrap();
        let mut rng = seeded(3);
        let features: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let data = LabeledDataset::new(features, labels, 10, 0).unwrap();
        let r = evaluate(&m, &data).unwrap();
        // zero head: every prediction is class 0
        assert!((r.accuracy - 0.1).abs() < 1e-12);
        assert!((r.mean_loss - 10f64.ln()).abs() < 1e-12);

        let empty = LabeledDataset::new(vec![], vec![], 10, 0).unwrap();
        assert!(matches!(evaluate(&m, &empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let m = trained_like(3, 9);
        let text = m.to_checkpoint_text(17);
        let (back, round) = StackModel::from_checkpoint_text(&text).unwrap();
        assert_eq!(round, 17);
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        assert!(StackModel::from_checkpoint_text("garbage").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_equivalence(seed in any::<u64>(), layers in 1usize..7, mask in any::<u8>(), xs in prop::collection::vec(-3.0f64..3.0, 5)) {
            let m = trained_like(layers, seed);
            let mut sel: Vec<usize> = (0..layers).filter(|j| mask >> j & 1 == 1).collect();
            if sel.is_empty() {
                sel.push(seed as usize % layers);
            }
            let sub = extract_submodel(&m, &sel).unwrap();
            let masked = m.masked(&sel).unwrap();
            let a = forward(&sub, &xs).unwrap();
            let b = forward(&masked, &xs).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }

        #[test]
        fn selection_order_is_irrelevant(seed in any::<u64>(), xs in prop::collection::vec(-3.0f64..3.0, 5)) {
            let m = trained_like(5, seed);
            let a = forward(&extract_submodel(&m, &[0, 2, 4]).unwrap(), &xs).unwrap();
            let b = forward(&extract_submodel(&m, &[4, 0, 2]).unwrap(), &xs).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
