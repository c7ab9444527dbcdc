//! Parameterized layers bound to a [`Session`].
//!
//! Each layer owns the parameters under one name prefix: `<prefix>.w`,
//! `<prefix>.b`, and so on.

use crate::error::{Error, Result};
use crate::numerics::{Activation, Scalar, Var};
use crate::params::{Init, ParamStore, Session};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape of a 2-D convolution. Weights are stored `[kh, kw, in / groups, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Dense `k×k` convolution with "same" padding for stride 1.
    pub fn dense(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    /// Channel-wise (depthwise) `k×k` convolution.
    pub fn channel_wise(channels: usize, k: usize) -> Self {
        Conv2dSpec {
            groups: channels,
            ..Self::dense(channels, channels, k, 1)
        }
    }

    pub fn point_wise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.dilation,
            self.groups,
        ];
        if fields.contains(&0) {
            return Err(Error::contract(format!("conv spec has a zero field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::contract(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn is_channel_wise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_point_wise(&self) -> bool {
        self.kernel == (1, 1) && self.groups == 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.kernel.0,
            self.kernel.1,
            self.in_channels / self.groups,
            self.out_channels,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Number of input pixels one output pixel sees along each axis.
    pub fn receptive_span(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.receptive_span();
        let ph = (h + 2 * self.padding).checked_sub(sh)?;
        let pw = (w + 2 * self.padding).checked_sub(sw)?;
        Some((ph / self.stride + 1, pw / self.stride + 1))
    }
}

pub fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &Conv2dSpec,
    bias: bool,
    seed: u64,
) -> Result<()> {
    spec.validate()?;
    let fan_in = spec.kernel.0 * spec.kernel.1 * spec.in_channels / spec.groups;
    store.init(format!("{prefix}.w"), &spec.weight_shape(), Init::Kaiming(fan_in), seed)?;
    if bias {
        store.init(format!("{prefix}.b"), &[spec.out_channels], Init::Zeros, seed)?;
    }
    Ok(())
}

pub fn conv2d<T: Scalar>(
    sess: &mut Session<T>,
    x: Var,
    prefix: &str,
    spec: &Conv2dSpec,
) -> Result<Var> {
    let shape = sess.graph.shape(x);
    if shape.len() != 4 || shape[3] != spec.in_channels {
        return Err(Error::shape("conv2d input", shape, &[spec.in_channels]));
    }
    let w = sess.param(&format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = if sess.store().contains(&bname) {
        Some(sess.param(&bname)?)
    } else {
        None
    };
    sess.graph
        .conv2d(x, w, b, spec.stride, spec.padding, spec.dilation, spec.groups)
}

pub fn register_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_features: usize,
    out_features: usize,
    bias: bool,
    init: Init,
    seed: u64,
) -> Result<()> {
    store.init(format!("{prefix}.w"), &[in_features, out_features], init, seed)?;
    if bias {
        store.init(format!("{prefix}.b"), &[out_features], Init::Zeros, seed)?;
    }
    Ok(())
}

/// Affine map over the last axis with weights `[in, out]`.
pub fn linear<T: Scalar>(sess: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = if sess.store().contains(&bname) {
        Some(sess.param(&bname)?)
    } else {
        None
    };
    linear_vars(sess, x, w, b)
}

pub fn linear_vars<T: Scalar>(
    sess: &mut Session<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let shape = sess.graph.shape(x).to_vec();
    let (cin, cout) = {
        let ws = sess.graph.shape(w);
        (ws[0], ws[1])
    };
    if shape.last() != Some(&cin) {
        return Err(Error::shape("linear", &shape, sess.graph.shape(w)));
    }
    let rows = shape.iter().product::<usize>() / cin;
    let flat = sess.graph.reshape(x, &[rows, cin])?;
    let mut y = sess.graph.matmul(flat, w)?;
    if let Some(b) = b {
        y = sess.graph.add(y, b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = cout;
    sess.graph.reshape(y, &out_shape)
}

pub fn register_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.init(format!("{prefix}.gamma"), &[c], Init::Ones, 0)?;
    store.init(format!("{prefix}.beta"), &[c], Init::Zeros, 0)
}

pub fn layer_norm<T: Scalar>(sess: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.param(&format!("{prefix}.gamma"))?;
    let b = sess.param(&format!("{prefix}.beta"))?;
    sess.graph.layer_norm(x, g, b, T::c(LN_EPS))
}

pub fn register_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.init(format!("{prefix}.gamma"), &[c], Init::Ones, 0)?;
    store.init(format!("{prefix}.beta"), &[c], Init::Zeros, 0)?;
    store.set_buffer(format!("{prefix}.running_mean"), crate::Tensor::zeros(&[c]));
    store.set_buffer(format!("{prefix}.running_var"), crate::Tensor::ones(&[c]));
    Ok(())
}

/// Batch normalization; the session decides between batch and running
/// statistics. Batch statistics are recorded for a later running update.
pub fn batch_norm<T: Scalar>(sess: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.param(&format!("{prefix}.gamma"))?;
    let b = sess.param(&format!("{prefix}.beta"))?;
    if sess.uses_batch_stats() {
        let batch = sess.graph.shape(x)[0];
        if batch < 2 {
            return Err(Error::contract(
                "training-mode batch_norm needs a batch of at least 2",
            ));
        }
        let (y, stats) = sess.graph.batch_norm(x, g, b, None, T::c(BN_EPS))?;
        if let Some(stats) = stats {
            sess.record_batch_stats(prefix.to_string(), stats);
        }
        Ok(y)
    } else {
        let mean = sess.store().buffer(&format!("{prefix}.running_mean"))?.data().to_vec();
        let var = sess.store().buffer(&format!("{prefix}.running_var"))?.data().to_vec();
        let (y, _) = sess.graph.batch_norm(x, g, b, Some((&mean, &var)), T::c(BN_EPS))?;
        Ok(y)
    }
}

pub fn activation<T: Scalar>(sess: &mut Session<T>, x: Var, kind: Activation) -> Var {
    sess.graph.activation(x, kind)
}

/// Bilinear upsampling of `[B, H, W, C]` by an integer factor.
pub fn upsample_bilinear<T: Scalar>(sess: &mut Session<T>, x: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(Error::contract("upsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x);
    }
    let s = sess.graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("upsample", &s, &[4]));
    }
    sess.graph.resize(x, s[1] * factor, s[2] * factor)
}
