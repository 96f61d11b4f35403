//! Layered feed-forward models with named parameter tensors grouped into
//! blocks, and checkpoints of their parameters.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "SURGIFT-CKPT-1";

/// Which block a parameter belongs to. Hidden blocks are numbered from the
/// input side; `Last` is the final classifier layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BlockId {
    Hidden(usize),
    Last,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Hidden(i) => write!(f, "block{i}"),
            BlockId::Last => f.write_str("last"),
        }
    }
}

impl From<BlockId> for String {
    fn from(b: BlockId) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for BlockId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(BlockId::Last);
        }
        s.strip_prefix("block")
            .unwrap_or(s)
            .parse()
            .map(BlockId::Hidden)
            .map_err(|_| Error::UnknownBlock(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    /// `y = x W^T + b` with `W` stored as `[out, in]`.
    Linear {
        in_dim: usize,
        out_dim: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Activation(Activation),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub block: BlockId,
}

/// Architecture of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Number of hidden blocks. Hidden layers are split into this many equal
    /// contiguous groups; the output layer forms the extra "last" block.
    pub blocks: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_bias() -> bool {
    true
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize, blocks: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            blocks,
            activation: Activation::Relu,
            bias: true,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.blocks == 0 && !self.hidden.is_empty() {
            return Err(Error::invalid("at least one hidden block is required"));
        }
        if self.hidden.len() < self.blocks {
            return Err(Error::invalid(format!(
                "{} hidden layers cannot fill {} blocks",
                self.hidden.len(),
                self.blocks
            )));
        }
        Ok(())
    }

    /// Block of hidden layer `i` under the equal contiguous partition.
    fn block_of(&self, i: usize) -> usize {
        i * self.blocks / self.hidden.len()
    }
}

/// A feed-forward network `f = f_n ∘ … ∘ f_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: Vec<NamedTensor>,
    blocks: Vec<BlockId>,
}

/// Parameter leaves of a model recorded on a tape, in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl Model {
    /// Builds a model with weights `~ N(0, 1/fan_in)` and zero biases.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut in_dim = spec.input_dim;
        let mut per_block = vec![0usize; spec.blocks];

        let with_bias = spec.bias;
        let push_linear = |in_dim: usize, out_dim: usize, prefix: String, block: BlockId, rng: &mut R, params: &mut Vec<NamedTensor>| {
            let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
            let weight = params.len();
            params.push(NamedTensor {
                name: format!("{prefix}.weight"),
                tensor: Tensor::from_parts(vec![out_dim, in_dim], w),
                block,
            });
            let bias = with_bias.then(|| {
                params.push(NamedTensor {
                    name: format!("{prefix}.bias"),
                    tensor: Tensor::zeros(vec![out_dim]),
                    block,
                });
                weight + 1
            });
            Layer::Linear {
                in_dim,
                out_dim,
                weight,
                bias,
            }
        };

        for (i, &width) in spec.hidden.iter().enumerate() {
            let b = spec.block_of(i);
            let j = per_block[b];
            per_block[b] += 1;
            let layer = push_linear(in_dim, width, format!("block{b}.layer{j}"), BlockId::Hidden(b), rng, &mut params);
            layers.push(layer);
            layers.push(Layer::Activation(spec.activation));
            in_dim = width;
        }
        let layer = push_linear(in_dim, spec.output_dim, "last".to_string(), BlockId::Last, rng, &mut params);
        layers.push(layer);

        let mut blocks: Vec<BlockId> = (0..spec.blocks).map(BlockId::Hidden).collect();
        blocks.push(BlockId::Last);
        Ok(Self {
            spec,
            layers,
            params,
            blocks,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    /// Blocks in input-to-output order, ending with [`BlockId::Last`].
    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.tensor.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Forward pass on a tape. `x` must be `[batch, input_dim]`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Layer {
                layer: self.layer_name(i),
                source: Box::new(e),
            };
            h = match *layer {
                Layer::Linear { weight, bias, .. } => {
                    let wt = tape.transpose(bound.vars[weight]).map_err(wrap)?;
                    let z = tape.matmul(h, wt).map_err(wrap)?;
                    match bias {
                        Some(b) => tape.add_bias(z, bound.vars[b]).map_err(wrap)?,
                        None => z,
                    }
                }
                Layer::Activation(Activation::Relu) => tape.relu(h).map_err(wrap)?,
                Layer::Activation(Activation::Identity) => tape.identity(h).map_err(wrap)?,
            };
        }
        Ok(h)
    }

    /// Evaluates the network on a batch `[batch, input_dim]`, returning
    /// `[batch, output_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.input_dim {
            return Err(Error::Layer {
                layer: self.layer_name(0),
                source: Box::new(Error::ShapeMismatch {
                    op: "forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![x.rows(), self.spec.input_dim],
                }),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward_on(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    fn bind_constants(&self, tape: &mut Tape) -> Result<BoundParams> {
        self.bind_masked(tape, &vec![false; self.params.len()])
    }

    /// Like [`Model::bind`], but tensors with `differentiable[i] == false` are
    /// recorded as constants and receive no gradient.
    pub fn bind_masked(&self, tape: &mut Tape, differentiable: &[bool]) -> Result<BoundParams> {
        if differentiable.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "mask has {} entries for {} tensors",
                differentiable.len(),
                self.params.len()
            )));
        }
        let vars = self
            .params
            .iter()
            .zip(differentiable)
            .map(|(p, &d)| {
                if d {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    fn layer_name(&self, i: usize) -> String {
        match &self.layers[i] {
            Layer::Linear { weight, .. } => self.params[*weight]
                .name
                .trim_end_matches(".weight")
                .to_string(),
            Layer::Activation(a) => format!("activation{i}({a:?})"),
        }
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        Ok((0..out.rows()).map(|i| argmax(out.row(i))).collect())
    }

    /// SHA-256 over every parameter's name, shape and value bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            meta,
        }
    }

    /// Overwrites every parameter from a checkpoint of the same architecture.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                ckpt.params.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(&ckpt.params) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match model tensor `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(ckpt.spec.clone(), &mut rng)?;
        m.restore(ckpt)?;
        Ok(m)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    // First maximum wins on ties.
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub source_loss: Option<f64>,
}

/// Snapshot of all parameter values plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    meta: CheckpointMeta,
    spec: ModelSpec,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            meta: self.meta.clone(),
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic `{}`", file.magic)));
        }
        let params = file
            .params
            .into_iter()
            .map(|r| Ok((r.name, Tensor::new(r.shape, r.values)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: file.spec,
            params,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn set(model: &mut Model, name: &str, data: Vec<f64>) {
        let i = model.param_index(name).unwrap();
        let shape = model.params[i].tensor.shape().to_vec();
        model.params[i].tensor = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn names_and_blocks() {
        let m = Model::new(ModelSpec::mlp(4, vec![8, 8, 8, 8, 8, 8], 3, 3), &mut rng()).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "block0.layer0.weight");
        assert_eq!(names[2], "block0.layer1.weight");
        assert_eq!(names[4], "block1.layer0.weight");
        assert_eq!(names.last().copied(), Some("last.bias"));
        assert_eq!(m.blocks(), &[BlockId::Hidden(0), BlockId::Hidden(1), BlockId::Hidden(2), BlockId::Last]);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn too_few_hidden_layers_for_blocks() {
        assert!(Model::new(ModelSpec::mlp(4, vec![8], 3, 3), &mut rng()).is_err());
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = Model::new(ModelSpec::mlp(2, vec![], 2, 0), &mut rng()).unwrap();
        set(&mut m, "last.weight", vec![1.0, 0.0, 0.0, 1.0]);
        let out = m.forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_layer_relu_hand_evaluation() {
        let mut m = Model::new(ModelSpec::mlp(2, vec![2], 1, 1), &mut rng()).unwrap();
        set(&mut m, "block0.layer0.weight", vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut m, "last.weight", vec![1.0, 1.0]);
        let out = m.forward(&Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn empty_batch_forward() {
        let m = Model::new(ModelSpec::mlp(3, vec![5, 5], 4, 2), &mut rng()).unwrap();
        let out = m.forward(&Tensor::matrix(0, 3, vec![]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[0, 4]);
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let m = Model::new(ModelSpec::mlp(3, vec![5], 4, 1), &mut rng()).unwrap();
        let err = m.forward(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("block0.layer0"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::new(ModelSpec::mlp(3, vec![5, 5], 4, 2), &mut rng()).unwrap();
        let ckpt = m.checkpoint(CheckpointMeta { seed: 1, step: 2, source_loss: Some(0.1) });
        let text = ckpt.to_json().unwrap();
        assert!(text.starts_with("{\"magic\":\"SURGIFT-CKPT-1\""));
        let back = Checkpoint::from_json(&text).unwrap();
        let restored = Model::from_checkpoint(&back).unwrap();
        assert_eq!(restored.param_hash(), m.param_hash());
        let x = Tensor::matrix(2, 3, vec![0.1, -0.3, 2.0, 1.5, 0.0, -1.0]).unwrap();
        assert!(restored.forward(&x).unwrap().bit_eq(&m.forward(&x).unwrap()));
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let m = Model::new(ModelSpec::mlp(3, vec![], 2, 0), &mut rng()).unwrap();
        let text = m.checkpoint(CheckpointMeta::default()).to_json().unwrap();
        let bad = text.replace(CHECKPOINT_MAGIC, "NOPE");
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn block_id_parse() {
        assert_eq!("last".parse::<BlockId>().unwrap(), BlockId::Last);
        assert_eq!("block2".parse::<BlockId>().unwrap(), BlockId::Hidden(2));
        assert_eq!("1".parse::<BlockId>().unwrap(), BlockId::Hidden(1));
        assert!("foo".parse::<BlockId>().is_err());
    }
}
