//! Mean-pooled bag-of-embeddings classifier with a one-hidden-layer tanh head.
//!
//! The same architecture serves as the main model and as the biased model;
//! the biased model just sees a restricted [`InputView`].

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 5] = [
    "embedding",
    "hidden_weights",
    "hidden_bias",
    "output_weights",
    "output_bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    dims: ModelDims,
    /// `[V, d]`
    pub embedding: Tensor,
    /// `[d, h]`
    pub hidden_weights: Tensor,
    /// `[1, h]`
    pub hidden_bias: Tensor,
    /// `[h, Y]`
    pub output_weights: Tensor,
    /// `[1, Y]`
    pub output_bias: Tensor,
}

/// Which positions of a token sequence the model may look at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputView {
    token_ids: Vec<usize>,
    visible: Vec<bool>,
}

impl InputView {
    /// Every position visible.
    pub fn full(token_ids: Vec<usize>) -> Result<Self> {
        let visible = vec![true; token_ids.len()];
        InputView::masked(token_ids, visible)
    }

    pub fn masked(token_ids: Vec<usize>, visible: Vec<bool>) -> Result<Self> {
        if token_ids.len() != visible.len() {
            return Err(Error::Shape {
                op: "input_view",
                lhs: vec![token_ids.len()],
                rhs: vec![visible.len()],
            });
        }
        if !visible.iter().any(|&v| v) {
            return Err(Error::domain("input_view", "no visible positions"));
        }
        Ok(InputView { token_ids, visible })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn pooling_weights(&self) -> Vec<f64> {
        let n = self.visible.iter().filter(|&&v| v).count() as f64;
        self.visible
            .iter()
            .map(|&v| if v { 1.0 / n } else { 0.0 })
            .collect()
    }
}

/// Graph handles produced by [`ClassifierParams::build`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub params: [Var; 5],
    /// Gathered input embeddings, `[L, d]`.
    pub embedded: Var,
    /// `[1, Y]`
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct InputGradient {
    pub logits: Tensor,
    /// Input embeddings, `[L, d]`.
    pub embeddings: Tensor,
    /// Gradient of the chosen class logit w.r.t. `embeddings`.
    pub grad_embeddings: Tensor,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, values).expect("shape matches sample count")
}

impl ClassifierParams {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            num_classes: y,
        } = dims;
        Ok(ClassifierParams {
            dims,
            embedding: normal_tensor(vec![v, d], 1.0, rng),
            hidden_weights: normal_tensor(vec![d, h], (d as f64).sqrt().recip(), rng),
            hidden_bias: Tensor::zeros(vec![1, h])?,
            output_weights: normal_tensor(vec![h, y], (h as f64).sqrt().recip(), rng),
            output_bias: Tensor::zeros(vec![1, y])?,
        })
    }

    /// Assembles parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(dims: ModelDims, tensors: [Tensor; 5]) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            num_classes: y,
        } = dims;
        let expected = [vec![v, d], vec![d, h], vec![1, h], vec![h, y], vec![1, y]];
        for ((t, want), name) in tensors.iter().zip(&expected).zip(PARAM_NAMES) {
            if t.shape() != want.as_slice() {
                return Err(Error::Shape {
                    op: name,
                    lhs: want.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::domain(
                    "parameters",
                    format!("{name} has non-finite values"),
                ));
            }
        }
        let [embedding, hidden_weights, hidden_bias, output_weights, output_bias] = tensors;
        Ok(ClassifierParams {
            dims,
            embedding,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.embedding,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.embedding,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn bit_eq(&self, other: &ClassifierParams) -> bool {
        self.dims == other.dims
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Records the forward pass on `g`; all parameters are graph variables.
    pub fn build(&self, g: &mut Graph, input: &InputView) -> Result<ForwardVars> {
        let params = [
            g.variable(&self.embedding),
            g.variable(&self.hidden_weights),
            g.variable(&self.hidden_bias),
            g.variable(&self.output_weights),
            g.variable(&self.output_bias),
        ];
        let [table, w1, b1, w2, b2] = params;
        let embedded = g.embedding_gather(table, input.token_ids())?;
        let weights = g.constant_values(vec![1, input.len()], input.pooling_weights())?;
        let pooled = g.matmul(weights, embedded)?;
        let pre = g.matmul(pooled, w1)?;
        let pre = g.add(pre, b1)?;
        let hidden = g.tanh(pre);
        let out = g.matmul(hidden, w2)?;
        let logits = g.add(out, b2)?;
        Ok(ForwardVars {
            params,
            embedded,
            logits,
        })
    }

    /// Class logits, shape `[Y]`.
    pub fn forward(&self, input: &InputView) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.build(&mut g, input)?;
        g.tensor(vars.logits).reshape(vec![self.dims.num_classes])
    }

    pub fn predict(&self, input: &InputView) -> Result<usize> {
        Ok(argmax(self.forward(input)?.values()))
    }

    /// Logits plus the gradient of logit `class_index` w.r.t. the gathered
    /// input embeddings.
    pub fn forward_with_input_grad(
        &self,
        input: &InputView,
        class_index: usize,
    ) -> Result<InputGradient> {
        if class_index >= self.dims.num_classes {
            return Err(Error::Index {
                what: "class index",
                index: class_index,
                bound: self.dims.num_classes,
            });
        }
        let mut g = Graph::new();
        let vars = self.build(&mut g, input)?;
        let target = g.pick(vars.logits, class_index)?;
        let grads = g.backward(target)?;
        Ok(InputGradient {
            logits: g.tensor(vars.logits).reshape(vec![self.dims.num_classes])?,
            embeddings: g.tensor(vars.embedded),
            grad_embeddings: grads.get(vars.embedded),
        })
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            tensors: PARAM_NAMES
                .iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&file).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        };
        let file: CheckpointFile =
            serde_json::from_slice(bytes).map_err(|e| parse(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(parse(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.tensors.len() != PARAM_NAMES.len() {
            return Err(parse(format!(
                "expected 5 tensors, found {}",
                file.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(5);
        for (nt, want) in file.tensors.into_iter().zip(PARAM_NAMES) {
            if nt.name != want {
                return Err(parse(format!(
                    "expected tensor `{want}`, found `{}`",
                    nt.name
                )));
            }
            tensors.push(Tensor::new(nt.shape, nt.values)?);
        }
        let tensors: [Tensor; 5] = tensors.try_into().expect("length checked above");
        ClassifierParams::from_tensors(file.dims, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ClassifierParams::from_checkpoint_bytes(&bytes, path)
    }
}

const CHECKPOINT_FORMAT: &str = "debias-lab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    dims: ModelDims,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}
