//! Domain-adaptive convolution, the heatmap decoder, and the guidance network.

use crate::encoder::{EncoderConfig, STAGES};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dSpec};
use crate::numerics::{Scalar, Var};
use crate::params::{domain_name, shared_name, ParamStore, Session};

/// Channel-wise 3×3 convolution per domain, then a shared point-wise
/// convolution, batch normalization, and ReLU.
#[derive(Clone, Debug)]
pub struct Dac {
    pub path: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Dac {
    pub fn new(path: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Dac {
            path: path.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn channel_wise_spec(&self) -> Conv2dSpec {
        Conv2dSpec::channel_wise(self.in_channels, 3)
    }

    pub fn point_wise_spec(&self) -> Conv2dSpec {
        Conv2dSpec::point_wise(self.in_channels, self.out_channels)
    }

    fn channel_wise_prefix(&self, domain: &str) -> String {
        domain_name(domain, &format!("{}/dw", self.path))
    }

    pub fn register_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let pw = shared_name(&format!("{}/pw", self.path));
        nn::register_conv(store, &pw, &self.point_wise_spec(), true, seed)?;
        nn::register_batch_norm(store, &shared_name(&format!("{}/bn", self.path)), self.out_channels)
    }

    pub fn register_domain<T: Scalar>(&self, store: &mut ParamStore<T>, domain: &str, seed: u64) -> Result<()> {
        nn::register_conv(
            store,
            &self.channel_wise_prefix(domain),
            &self.channel_wise_spec(),
            true,
            seed,
        )
    }

    /// Values one domain adds: `9 * C_in` weights plus `C_in` biases.
    pub fn domain_param_count(&self) -> usize {
        self.channel_wise_spec().weight_count() + self.in_channels
    }

    pub fn shared_param_count(&self) -> usize {
        self.point_wise_spec().weight_count() + self.out_channels + 2 * self.out_channels
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var, domain: &str) -> Result<Var> {
        let dw = self.channel_wise_prefix(domain);
        if !sess.store().contains(&format!("{dw}.w")) {
            return Err(Error::UnknownDomain(domain.to_string()));
        }
        let x = nn::conv2d(sess, x, &dw, &self.channel_wise_spec())?;
        let x = nn::conv2d(sess, x, &shared_name(&format!("{}/pw", self.path)), &self.point_wise_spec())?;
        let x = nn::batch_norm(sess, x, &shared_name(&format!("{}/bn", self.path)))?;
        Ok(sess.graph.relu(x))
    }
}

/// U-Net style decoder over the encoder pyramid.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub patch_size: usize,
    /// Two DACs per level, deepest-but-one level first.
    pub levels: Vec<(Dac, Dac)>,
    pub head_in: usize,
}

impl Decoder {
    pub fn new(enc: &EncoderConfig) -> Self {
        let levels = (0..STAGES - 1)
            .rev()
            .map(|s| {
                let cin = enc.stage_dim(s + 1) + enc.stage_dim(s);
                let c = enc.stage_dim(s);
                (
                    Dac::new(format!("dec/l{s}/dac0"), cin, c),
                    Dac::new(format!("dec/l{s}/dac1"), c, c),
                )
            })
            .collect();
        Decoder {
            patch_size: enc.patch_size,
            levels,
            head_in: enc.stage_dim(0),
        }
    }

    fn dacs(&self) -> impl Iterator<Item = &Dac> {
        self.levels.iter().flat_map(|(a, b)| [a, b])
    }

    fn head_spec(&self, landmarks: usize) -> Conv2dSpec {
        Conv2dSpec::point_wise(self.head_in, landmarks)
    }

    pub fn register_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.dacs().try_for_each(|d| d.register_shared(store, seed))
    }

    pub fn register_domain<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        domain: &str,
        landmarks: usize,
        seed: u64,
    ) -> Result<()> {
        self.dacs().try_for_each(|d| d.register_domain(store, domain, seed))?;
        nn::register_conv(
            store,
            &domain_name(domain, "dec/head"),
            &self.head_spec(landmarks),
            true,
            seed,
        )
    }

    pub fn dac_domain_param_count(&self) -> usize {
        self.dacs().map(Dac::domain_param_count).sum()
    }

    pub fn head_param_count(&self, landmarks: usize) -> usize {
        self.head_spec(landmarks).weight_count() + landmarks
    }

    /// Fine heatmap `[B, H, W, N]` with values in `(0, 1)`.
    ///
    /// The 1×1 head runs before the final upsampling; both are linear and
    /// bilinear weights sum to one, so the order does not change the result.
    pub fn decode<T: Scalar>(&self, sess: &mut Session<T>, pyramid: &[Var], domain: &str) -> Result<Var> {
        if pyramid.len() != STAGES {
            return Err(Error::contract(format!(
                "decoder needs {STAGES} feature maps, got {}",
                pyramid.len()
            )));
        }
        let mut x = pyramid[STAGES - 1];
        for ((dac0, dac1), &skip) in self.levels.iter().zip(pyramid[..STAGES - 1].iter().rev()) {
            x = nn::upsample_bilinear(sess, x, 2)?;
            x = sess.graph.concat(x, skip)?;
            x = dac0.forward(sess, x, domain)?;
            x = dac1.forward(sess, x, domain)?;
        }
        let head = domain_name(domain, "dec/head");
        let w = sess.store().get(&format!("{head}.w"))?;
        let landmarks = w.shape()[3];
        let x = nn::conv2d(sess, x, &head, &self.head_spec(landmarks))?;
        let x = nn::upsample_bilinear(sess, x, self.patch_size)?;
        Ok(sess.graph.sigmoid(x))
    }
}

/// Per-domain dilated-convolution branch producing the guidance heatmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceConfig {
    pub width: usize,
    pub dilations: Vec<usize>,
    pub downsample: usize,
}

impl GuidanceConfig {
    /// Rates shrunk to the 16×16 guidance map of a 64×64 input.
    pub fn toy() -> Self {
        GuidanceConfig {
            width: 16,
            dilations: vec![1, 1, 1, 1, 2],
            downsample: 4,
        }
    }

    pub fn paper() -> Self {
        GuidanceConfig {
            width: 64,
            dilations: vec![1, 2, 4, 8, 16],
            downsample: 4,
        }
    }

    /// Low-resolution pixels spanned by the stacked 3×3 dilated convolutions.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug)]
pub struct Guidance {
    pub config: GuidanceConfig,
    pub in_channels: usize,
}

impl Guidance {
    pub fn new(config: GuidanceConfig, in_channels: usize) -> Self {
        Guidance {
            config,
            in_channels,
        }
    }

    fn conv_specs(&self) -> Vec<Conv2dSpec> {
        let w = self.config.width;
        self.config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2dSpec::dense(if i == 0 { self.in_channels } else { w }, w, 3, d))
            .collect()
    }

    fn head_spec(&self, landmarks: usize) -> Conv2dSpec {
        Conv2dSpec::point_wise(self.config.width, landmarks)
    }

    pub fn register_domain<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        domain: &str,
        landmarks: usize,
        seed: u64,
    ) -> Result<()> {
        for (i, spec) in self.conv_specs().iter().enumerate() {
            nn::register_conv(store, &domain_name(domain, &format!("guide/conv{i}")), spec, true, seed)?;
        }
        nn::register_conv(
            store,
            &domain_name(domain, "guide/head"),
            &self.head_spec(landmarks),
            true,
            seed,
        )
    }

    pub fn domain_param_count(&self, landmarks: usize) -> usize {
        self.conv_specs()
            .iter()
            .chain(std::iter::once(&self.head_spec(landmarks)))
            .map(|s| s.weight_count() + s.out_channels)
            .sum()
    }

    /// Guidance heatmap `[B, H, W, N]` computed at `1/downsample` resolution.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, image: Var, domain: &str) -> Result<Var> {
        let s = sess.graph.shape(image).to_vec();
        let f = self.config.downsample;
        if s.len() != 4 || s[1] % f != 0 || s[2] % f != 0 {
            return Err(Error::shape("guidance", &s, &[f]));
        }
        let head = domain_name(domain, "guide/head");
        let landmarks = match sess.store().get(&format!("{head}.w")) {
            Ok(w) => w.shape()[3],
            Err(_) => return Err(Error::UnknownDomain(domain.to_string())),
        };
        let mut x = sess.graph.resize(image, s[1] / f, s[2] / f)?;
        for (i, spec) in self.conv_specs().iter().enumerate() {
            x = nn::conv2d(sess, x, &domain_name(domain, &format!("guide/conv{i}")), spec)?;
            x = sess.graph.relu(x);
        }
        let x = nn::conv2d(sess, x, &head, &self.head_spec(landmarks))?;
        let x = sess.graph.sigmoid(x);
        sess.graph.resize(x, s[1], s[2])
    }
}
