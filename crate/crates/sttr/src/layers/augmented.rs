//! Hybrid sublayers that run a convolutional branch and an attention branch
//! side by side and concatenate along channels: 3/4 of the output channels
//! come from the convolution, 1/4 from attention with half the head count.

use rand_chacha::ChaCha8Rng;

use super::attention::{AttnCore, SelfAttentionConfig, ValueDim};
use super::conv::{GcnCore, TcnCore};
use super::{AttentionAxis, LayerCtx, Residual};
use crate::error::{ConfigError, TensorError};
use crate::graph::AdjacencySet;
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{BatchNorm, Parameterized, Real, Tensor};

/// (conv channels, attention channels) = (3/4, 1/4) of the output width.
pub(crate) fn split_channels(c_out: usize) -> Result<(usize, usize), ConfigError> {
    if c_out % 4 != 0 {
        return Err(ConfigError(format!(
            "hybrid layer output channels must be divisible by 4, got {c_out}"
        )));
    }
    Ok((c_out / 4 * 3, c_out / 4))
}

/// The narrow attention branch keeps per-head width by halving the heads.
pub(crate) fn wide_heads(heads: usize) -> Result<usize, ConfigError> {
    if heads < 2 || heads % 2 != 0 {
        return Err(ConfigError(format!(
            "hybrid layer needs an even head count of at least 2, got {heads}"
        )));
    }
    Ok(heads / 2)
}

fn branch_cfg(
    c_in: usize,
    c_attn: usize,
    heads: usize,
    drop_rate: f64,
) -> Result<SelfAttentionConfig, ConfigError> {
    SelfAttentionConfig::new(c_in, c_attn, wide_heads(heads)?, ValueDim::FullOutput, drop_rate)
}

/// Spatial hybrid: graph convolution alongside joint self-attention.
pub struct AugSpatialLayer<F: Real> {
    conv: GcnCore<F>,
    attn: AttnCore<F>,
    bn: BatchNorm<F>,
    res: Residual<F>,
}

impl<F: Real> AugSpatialLayer<F> {
    pub fn new(
        name: &str,
        adj: &AdjacencySet,
        c_in: usize,
        c_out: usize,
        heads: usize,
        drop_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ConfigError> {
        let (c_conv, c_attn) = split_channels(c_out)?;
        Ok(Self {
            conv: GcnCore::new(format!("{name}.gcn"), adj, c_in, c_conv, rng),
            attn: AttnCore::new(
                format!("{name}.attn"),
                branch_cfg(c_in, c_attn, heads, drop_rate)?,
                rng,
            ),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            res: Residual::new(format!("{name}.res"), c_in, c_out, false, rng),
        })
    }

    /// Both branches applied to the raw input, before concat and BN.
    pub fn forward_branches(
        &self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<(Var, Var), TensorError> {
        let conv = self.conv.forward(tape, x)?;
        let attn = self.attn.forward(tape, x, AttentionAxis::Joints, None, ctx)?;
        Ok((conv, attn))
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let (conv, attn) = self.forward_branches(tape, x, ctx)?;
        let cat = tape.concat(&[conv, attn], 1)?;
        let y = self.bn.forward(tape, cat, ctx.mode)?;
        let r = self.res.forward(tape, x)?;
        let y = tape.add(y, r)?;
        Ok(tape.relu(y))
    }

    pub fn attn_mut(&mut self) -> &mut AttnCore<F> {
        &mut self.attn
    }
}

impl<F: Real> Parameterized<F> for AugSpatialLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.conv.visit_params(f);
        self.attn.visit_params(f);
        self.bn.visit_params(f);
        self.res.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.conv.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.res.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn.visit_state_mut(f);
    }
}

/// Temporal hybrid: strided temporal convolution alongside frame
/// self-attention on the subsampled sequence.
pub struct AugTemporalLayer<F: Real> {
    conv: TcnCore<F>,
    attn: AttnCore<F>,
    bn: BatchNorm<F>,
    res: Residual<F>,
    stride: usize,
}

impl<F: Real> AugTemporalLayer<F> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        heads: usize,
        drop_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ConfigError> {
        let (c_conv, c_attn) = split_channels(c_out)?;
        Ok(Self {
            conv: TcnCore::new(format!("{name}.tcn"), c_in, c_conv, kernel, stride, rng)?,
            attn: AttnCore::new(
                format!("{name}.attn"),
                branch_cfg(c_in, c_attn, heads, drop_rate)?,
                rng,
            ),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            res: Residual::new(format!("{name}.res"), c_in, c_out, stride > 1, rng),
            stride,
        })
    }

    /// Conv branch on the raw input (it carries the stride); attention
    /// branch on the subsampled frames so widths line up for concat.
    pub fn forward_branches(
        &self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<(Var, Var, Var), TensorError> {
        let conv = self.conv.forward(tape, x)?;
        let xs = if self.stride > 1 { tape.subsample(x, 2, self.stride)? } else { x };
        let attn = self.attn.forward(tape, xs, AttentionAxis::Frames, None, ctx)?;
        Ok((conv, attn, xs))
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape<F>,
        x: Var,
        ctx: &mut LayerCtx<'_, F>,
    ) -> Result<Var, TensorError> {
        let (conv, attn, xs) = self.forward_branches(tape, x, ctx)?;
        let cat = tape.concat(&[conv, attn], 1)?;
        let y = self.bn.forward(tape, cat, ctx.mode)?;
        let r = self.res.forward(tape, xs)?;
        let y = tape.add(y, r)?;
        Ok(tape.relu(y))
    }

    pub fn attn_mut(&mut self) -> &mut AttnCore<F> {
        &mut self.attn
    }
}

impl<F: Real> Parameterized<F> for AugTemporalLayer<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.conv.visit_params(f);
        self.attn.visit_params(f);
        self.bn.visit_params(f);
        self.res.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.conv.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.res.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.bn.visit_state_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AdjacencySet, PartitionStrategy, SkeletonTopology};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn line3() -> AdjacencySet {
        let topo = SkeletonTopology::new(3, vec![(0, 1), (1, 2)], 1).unwrap();
        AdjacencySet::build(&topo, PartitionStrategy::Spatial).unwrap()
    }

    #[test]
    fn channel_split_and_heads() {
        assert_eq!(split_channels(256).unwrap(), (192, 64));
        assert_eq!(split_channels(64).unwrap(), (48, 16));
        assert!(split_channels(10).is_err());
        assert_eq!(wide_heads(8).unwrap(), 4);
        assert!(wide_heads(1).is_err());
        assert!(wide_heads(3).is_err());
    }

    #[test]
    fn spatial_branches_have_split_widths() {
        let layer = AugSpatialLayer::<f64>::new("h", &line3(), 8, 32, 4, 0.0, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[2, 8, 4, 3], |ix| (ix[1] + ix[2] + ix[3]) as f64 * 0.1);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let (conv, attn) =
            layer.forward_branches(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
        assert_eq!(tape.shape(conv), &[2, 24, 4, 3]);
        assert_eq!(tape.shape(attn), &[2, 8, 4, 3]);
    }

    #[test]
    fn zeroed_attention_branch_leaves_conv_channels() {
        let mut layer =
            AugSpatialLayer::<f64>::new("h", &line3(), 8, 32, 4, 0.0, &mut rng()).unwrap();
        // Zero the attention output projection: attention channels go dark.
        layer.attn.visit_params_mut(&mut |name, t| {
            if name.ends_with(".wo") {
                t.data_mut().fill(0.0);
            }
        });
        let x = Tensor::from_fn(&[1, 8, 4, 3], |ix| (ix[1] * 2 + ix[3]) as f64 * 0.2);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let (conv, attn) =
            layer.forward_branches(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
        let cat = tape.concat(&[conv, attn], 1).unwrap();
        let got = tape.value(cat);
        assert_eq!(got.shape(), &[1, 32, 4, 3]);
        let conv_vals = tape.value(conv).clone();
        let (per_c, conv_len) = (4 * 3, 24 * 4 * 3);
        assert_eq!(&got.data()[..conv_len], conv_vals.data());
        assert!(got.data()[conv_len..conv_len + 8 * per_c].iter().all(|&z| z == 0.0));
    }

    #[test]
    fn temporal_hybrid_strides_both_branches() {
        let mut layer =
            AugTemporalLayer::<f64>::new("h", 8, 32, 3, 2, 4, 0.0, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[1, 8, 6, 3], |ix| (ix[1] + ix[2] * 2 + ix[3]) as f64 * 0.1);
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let y = layer.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 3, 3]);
    }

    #[test]
    fn indivisible_widths_are_rejected() {
        assert!(AugSpatialLayer::<f64>::new("h", &line3(), 8, 10, 4, 0.0, &mut rng()).is_err());
        assert!(AugTemporalLayer::<f64>::new("h", 8, 16, 3, 1, 3, 0.0, &mut rng()).is_err());
    }
}