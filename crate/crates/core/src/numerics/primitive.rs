use super::graph::{Graph, Var};
use super::NumericsError;

/// Named primitive with its attributes, for table-driven graph construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv1d { kernel: usize },
    LayerNorm { eps: f64 },
    MultiHeadAttention { heads: usize },
    Relu,
    Sigmoid,
    Softmax,
    Dropout { rate: f64, key: String },
    Add,
    Concat,
    MeanSquareError,
}

impl Primitive {
    /// Looks up an attribute-free primitive by its name; attributed kinds get defaults.
    pub fn from_name(name: &str) -> Result<Self, NumericsError> {
        Ok(match name {
            "matmul" => Self::MatMul,
            "conv1d" => Self::Conv1d { kernel: 3 },
            "layer_norm" => Self::LayerNorm { eps: super::LAYER_NORM_EPS },
            "multi_head_attention" => Self::MultiHeadAttention { heads: 1 },
            "relu" => Self::Relu,
            "sigmoid" => Self::Sigmoid,
            "softmax" => Self::Softmax,
            "dropout" => Self::Dropout { rate: 0.1, key: "dropout".into() },
            "add" => Self::Add,
            "concat" => Self::Concat,
            "mean_square_error" => Self::MeanSquareError,
            other => return Err(NumericsError::UnsupportedPrimitive(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Conv1d { .. } => "conv1d",
            Self::LayerNorm { .. } => "layer_norm",
            Self::MultiHeadAttention { .. } => "multi_head_attention",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
            Self::Dropout { .. } => "dropout",
            Self::Add => "add",
            Self::Concat => "concat",
            Self::MeanSquareError => "mean_square_error",
        }
    }
}

impl Graph<'_> {
    /// Applies `kind` to `inputs`, checking arity.
    ///
    /// Arity: conv1d takes `(x, w)` or `(x, w, b)`; layer_norm `(x, gamma, beta)`;
    /// attention `(q, k, v)`; concat any positive count.
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var, NumericsError> {
        let arity = |n: usize| -> Result<(), NumericsError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(NumericsError::Shape {
                    op: "apply",
                    detail: format!("{} takes {n} inputs, got {}", kind.name(), inputs.len()),
                })
            }
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Conv1d { kernel } => {
                if inputs.len() == 2 {
                    self.conv1d(inputs[0], inputs[1], None, *kernel)
                } else {
                    arity(3)?;
                    self.conv1d(inputs[0], inputs[1], Some(inputs[2]), *kernel)
                }
            }
            Primitive::LayerNorm { eps } => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], *eps)
            }
            Primitive::MultiHeadAttention { heads } => {
                arity(3)?;
                self.attention(inputs[0], inputs[1], inputs[2], *heads)
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            Primitive::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            Primitive::Dropout { rate, key } => {
                arity(1)?;
                self.dropout(inputs[0], *rate, key)
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Concat => self.concat_cols(inputs),
            Primitive::MeanSquareError => {
                arity(2)?;
                self.mse(inputs[0], inputs[1])
            }
        }
    }
}
