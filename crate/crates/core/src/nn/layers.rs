//! Building blocks shared by every sub-network.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu => x.maximum(&(x * 0.2)?)?,
        })
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu => 2f64.sqrt(),
            Activation::LeakyRelu => (2.0 / (1.0 + 0.04f64)).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = p.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Scaled { gain, fan_in })?;
        let bias = if bias {
            Some(p.get("bias", &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Per-sample, per-channel normalization over the spatial axes with an
/// affine correction.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl InstanceNorm {
    const EPS: f64 = 1e-5;

    pub fn new(p: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("gamma", &[channels], Init::Const(1.0))?,
            beta: p.get("beta", &[channels], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let centered = flat.broadcast_sub(&flat.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Convolution, optional instance norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
    act: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: NormKind,
        act: Activation,
    ) -> Result<Self> {
        let with_norm = norm == NormKind::Instance;
        // A bias in front of instance norm would be cancelled by the mean
        // subtraction and never receive gradient.
        let conv = Conv2d::new(&mut p.pp("conv"), in_ch, out_ch, kernel, stride, padding, !with_norm, act.gain())?;
        let norm = if with_norm {
            Some(InstanceNorm::new(&mut p.pp("norm"), out_ch)?)
        } else {
            None
        };
        Ok(Self { conv, norm, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y)?;
        }
        self.act.apply(&y)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    first: ConvBlock,
    second: Conv2d,
    norm: Option<InstanceNorm>,
}

impl ResBlock {
    pub fn new(p: &mut ParamBuilder<'_>, ch: usize, norm: NormKind, act: Activation) -> Result<Self> {
        let with_norm = norm == NormKind::Instance;
        Ok(Self {
            first: ConvBlock::new(&mut p.pp("c1"), ch, ch, 3, 1, 1, norm, act)?,
            second: Conv2d::new(&mut p.pp("c2"), ch, ch, 3, 1, 1, !with_norm, 0.5)?,
            norm: if with_norm {
                Some(InstanceNorm::new(&mut p.pp("n2"), ch)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.second.forward(&self.first.forward(x)?)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y)?;
        }
        Ok((x + y)?)
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    super::conv::upsample2(x)
}
