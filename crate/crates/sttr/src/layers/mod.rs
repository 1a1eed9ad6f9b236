//! Network sublayers: graph and temporal convolutions, spatial and temporal
//! self-attention, and the convolution/attention hybrids.
//!
//! Convolutional sublayers compute `relu(bn(op(x)) + shortcut(x))`;
//! attention sublayers compute `attn(bn(x)) + shortcut(x)` with the
//! normalization in front and no output activation. Each sublayer owns its
//! weights and registers them on the tape by name every forward pass.

mod attention;
mod augmented;
mod conv;

pub use attention::{
    drop_attention, tsa_block_partition, AttnCore, SelfAttentionConfig, SsaLayer, TsaLayer,
    ValueDim, MASKED,
};
pub use augmented::{AugSpatialLayer, AugTemporalLayer};
pub use conv::{AgcnLayer, AgcnOptions, GcnCore, GcnLayer, TcnCore, TcnLayer};

use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{init, Mode, Parameterized, Real, Tensor};

/// Which axis an attention sublayer attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Joints,
    Frames,
}

/// Post-softmax, pre-dropout scores recorded during a forward pass.
/// Joint attention stores (N, T, H, V, V); frame attention (N, V, H, T, T).
#[derive(Debug, Clone)]
pub struct AttentionRecord<F: Real> {
    pub layer: String,
    pub axis: AttentionAxis,
    pub map: Tensor<F>,
}

/// Per-forward context: train/eval mode, randomness for attention dropout,
/// and an optional sink collecting attention maps.
pub struct LayerCtx<'a, F: Real> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub capture: Option<&'a mut Vec<AttentionRecord<F>>>,
}

impl<'a, F: Real> LayerCtx<'a, F> {
    pub fn eval() -> LayerCtx<'static, F> {
        LayerCtx { mode: Mode::Eval, rng: None, capture: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        LayerCtx { mode: Mode::Train, rng: Some(rng), capture: None }
    }

    pub fn capturing(sink: &'a mut Vec<AttentionRecord<F>>) -> Self {
        LayerCtx { mode: Mode::Eval, rng: None, capture: Some(sink) }
    }
}

/// Shortcut path of a sublayer: identity, or a learned 1x1 projection when
/// the sublayer changes channel count or temporal stride. Strided sublayers
/// subsample the input before calling this.
pub struct Residual<F: Real> {
    name: String,
    proj: Option<Tensor<F>>,
}

impl<F: Real> Residual<F> {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        strided: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj =
            (strided || c_in != c_out).then(|| init::fan_in_uniform(&[c_out, c_in], c_in, rng));
        Self { name: name.into(), proj }
    }

    pub fn forward(&self, tape: &mut GradTape<F>, x: Var) -> Result<Var, TensorError> {
        match &self.proj {
            None => Ok(x),
            Some(w) => {
                let wv = tape.param(&format!("{}.w", self.name), w);
                tape.channel_map(x, wv)
            }
        }
    }

    pub fn is_projected(&self) -> bool {
        self.proj.is_some()
    }
}

impl<F: Real> Parameterized<F> for Residual<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        if let Some(w) = &self.proj {
            f(&format!("{}.w", self.name), w);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        if let Some(w) = &mut self.proj {
            f(&format!("{}.w", self.name), w);
        }
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    if shape.len() != 4 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected (N, C, T, V)".into(),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}
