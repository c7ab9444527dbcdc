//! Four-stage hierarchical encoder of domain-adaptive transformer blocks.

use std::sync::Arc;

use crate::attention::{BlockKind, TransformerBlock};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Scalar, Var};
use crate::params::{shared_name, Init, ParamStore, Session};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub window: usize,
}

impl EncoderConfig {
    /// CPU-sized configuration used by the synthetic experiments.
    pub fn toy() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 1,
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            window: 4,
        }
    }

    /// Full-size configuration: widths 128..1024, depths 2/2/18/2.
    pub fn paper() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 1,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 8,
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Spatial stride of stage `stage` relative to the input.
    pub fn stage_stride(&self, stage: usize) -> usize {
        self.patch_size << stage
    }

    /// Input extents must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        self.stage_stride(STAGES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.window == 0 || self.in_channels == 0 {
            return Err(Error::contract("encoder sizes must be positive"));
        }
        if self.depths.contains(&0) {
            return Err(Error::contract("every encoder stage needs at least one block"));
        }
        for s in 0..STAGES {
            if self.heads[s] == 0 || self.stage_dim(s) % self.heads[s] != 0 {
                return Err(Error::contract(format!(
                    "stage {s}: {} heads do not divide width {}",
                    self.heads[s],
                    self.stage_dim(s)
                )));
            }
        }
        Ok(())
    }

    /// Checks that an `h×w` input tiles into every stage's windows.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = self.required_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::contract(format!(
                "input {h}x{w} must be a multiple of {div} on both axes"
            )));
        }
        for s in 0..STAGES {
            let (sh, sw) = (h / self.stage_stride(s), w / self.stage_stride(s));
            let win = self.window.min(sh).min(sw);
            if sh % win != 0 || sw % win != 0 {
                return Err(Error::contract(format!(
                    "stage {s} map {sh}x{sw} does not tile into windows of {win}"
                )));
            }
        }
        Ok(())
    }
}

/// Encoder layout: block list per stage plus patch embedding and merging.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Vec<TransformerBlock>>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stages = (0..STAGES)
            .map(|s| {
                (0..config.depths[s])
                    .map(|b| {
                        let shift = if b % 2 == 1 { config.window / 2 } else { 0 };
                        TransformerBlock::new(
                            format!("enc/s{s}/b{b}"),
                            config.stage_dim(s),
                            config.heads[s],
                            config.window,
                            shift,
                            BlockKind::DomainAdaptive,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { config, stages })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.stages.iter().flatten()
    }

    pub fn register_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let c = &self.config;
        let patch_in = c.patch_size * c.patch_size * c.in_channels;
        nn::register_linear(
            store,
            &shared_name("enc/patch_embed"),
            patch_in,
            c.embed_dim,
            true,
            Init::TruncNormal(0.02),
            seed,
        )?;
        nn::register_layer_norm(store, &shared_name("enc/patch_norm"), c.embed_dim)?;
        for block in self.blocks() {
            block.register_shared(store, seed)?;
        }
        for s in 0..STAGES - 1 {
            let dim = c.stage_dim(s);
            nn::register_layer_norm(store, &shared_name(&format!("enc/merge{s}/norm")), 4 * dim)?;
            nn::register_linear(
                store,
                &shared_name(&format!("enc/merge{s}/reduction")),
                4 * dim,
                2 * dim,
                false,
                Init::TruncNormal(0.02),
                seed,
            )?;
        }
        Ok(())
    }

    pub fn register_domain<T: Scalar>(&self, store: &mut ParamStore<T>, domain: &str, seed: u64) -> Result<()> {
        self.blocks()
            .try_for_each(|b| b.register_domain(store, domain, seed))
    }

    pub fn domain_param_count(&self) -> usize {
        self.blocks().map(TransformerBlock::domain_param_count).sum()
    }

    /// Splits `[B, H, W, C]` into `p×p` patches and projects each to the
    /// embedding width, followed by layer normalization.
    pub fn patch_embed<T: Scalar>(&self, sess: &mut Session<T>, image: Var) -> Result<Var> {
        let s = sess.graph.shape(image).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[3] != c.in_channels {
            return Err(Error::shape("patch_embed", &s, &[c.in_channels]));
        }
        c.check_input(s[1], s[2])?;
        let (b, h, w, p) = (s[0], s[1], s[2], c.patch_size);
        let (ph, pw) = (h / p, w / p);
        let mut index = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for i in 0..ph {
                for j in 0..pw {
                    for py in 0..p {
                        for px in 0..p {
                            index.push((bi * h + i * p + py) * w + j * p + px);
                        }
                    }
                }
            }
        }
        let patches = sess.graph.gather(
            image,
            Arc::new(index),
            c.in_channels,
            &[b, ph, pw, p * p * c.in_channels],
        )?;
        let tokens = nn::linear(sess, patches, &shared_name("enc/patch_embed"))?;
        nn::layer_norm(sess, tokens, &shared_name("enc/patch_norm"))
    }

    /// Concatenates each 2×2 neighbourhood, normalizes, and halves the width
    /// back down: `[B, h, w, C] -> [B, h/2, w/2, 2C]`.
    pub fn patch_merge<T: Scalar>(&self, sess: &mut Session<T>, x: Var, stage: usize) -> Result<Var> {
        let s = sess.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::contract(format!("patch_merge needs even extents, got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        index.push((bi * h + 2 * i + dy) * w + 2 * j + dx);
                    }
                }
            }
        }
        let merged = sess.graph.gather(x, Arc::new(index), c, &[b, h / 2, w / 2, 4 * c])?;
        let normed = nn::layer_norm(sess, merged, &shared_name(&format!("enc/merge{stage}/norm")))?;
        nn::linear(sess, normed, &shared_name(&format!("enc/merge{stage}/reduction")))
    }

    /// Multi-scale features, one per stage, each taken before merging.
    pub fn encode<T: Scalar>(&self, sess: &mut Session<T>, image: Var, domain: &str) -> Result<Vec<Var>> {
        let mut x = self.patch_embed(sess, image)?;
        let mut pyramid = Vec::with_capacity(STAGES);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(sess, x, Some(domain))?;
            }
            pyramid.push(x);
            if s + 1 < STAGES {
                x = self.patch_merge(sess, x, s)?;
            }
        }
        Ok(pyramid)
    }
}
