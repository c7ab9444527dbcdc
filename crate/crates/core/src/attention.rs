//! Windowed multi-head self-attention and the two transformer blocks built on it.
//!
//! The basic block computes
//!
//! ```text
//! y_hat = MSA(LN(x)) + x
//! y     = MLP(LN(y_hat)) + y_hat
//! ```
//!
//! and the domain-adaptive block swaps in a per-domain query projection and
//! two per-domain diagonal scalings:
//!
//! ```text
//! y_hat = D1_d * MSA_{Q_d}(LN(x)) + x
//! y     = D2_d * (MLP(LN(y_hat)) + y_hat)
//! ```
//!
//! The diagonals are stored as vectors and act on the channel axis.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{AttentionMask, Scalar, Var};
use crate::params::{domain_name, shared_name, Init, ParamStore, Session};

/// Index maps and mask for one `(batch, h, w, window, shift)` combination.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    /// Token gather from image order into window order.
    pub partition: Arc<Vec<usize>>,
    /// Token gather from window order back to image order.
    pub reverse: Arc<Vec<usize>>,
    /// Allowed pairs `[windows, window², window²]`; `None` when unshifted.
    pub mask: Option<Arc<Vec<bool>>>,
}

impl WindowPlan {
    pub fn new(batch: usize, height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::contract(format!(
                "window {window} does not divide spatial extent {height}x{width}"
            )));
        }
        if shift >= window {
            return Err(Error::contract(format!("shift {shift} must be below window {window}")));
        }
        let (nwh, nww) = (height / window, width / window);
        let tokens = window * window;
        let mut partition = Vec::with_capacity(batch * height * width);
        let mut reverse = vec![0; batch * height * width];
        for b in 0..batch {
            for wy in 0..nwh {
                for wx in 0..nww {
                    for ty in 0..window {
                        for tx in 0..window {
                            let i = (wy * window + ty + shift) % height;
                            let j = (wx * window + tx + shift) % width;
                            let src = (b * height + i) * width + j;
                            reverse[src] = partition.len();
                            partition.push(src);
                        }
                    }
                }
            }
        }
        let mask = (shift > 0).then(|| {
            let region = |p: usize, extent: usize| {
                if p < extent - window {
                    0
                } else if p < extent - shift {
                    1
                } else {
                    2
                }
            };
            let mut allowed = Vec::with_capacity(nwh * nww * tokens * tokens);
            for wy in 0..nwh {
                for wx in 0..nww {
                    let label = |t: usize| {
                        let (ty, tx) = (t / window, t % window);
                        3 * region(wy * window + ty, height) + region(wx * window + tx, width)
                    };
                    for p in 0..tokens {
                        for q in 0..tokens {
                            allowed.push(label(p) == label(q));
                        }
                    }
                }
            }
            Arc::new(allowed)
        });
        Ok(WindowPlan {
            batch,
            height,
            width,
            window,
            shift,
            partition: Arc::new(partition),
            reverse: Arc::new(reverse),
            mask,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }
}

/// Cyclically shifts `x: [B, H, W, C]` by `(-shift, -shift)` and tiles it into
/// `[B * nW, window², C]`.
pub fn window_partition<T: Scalar>(
    sess: &mut Session<T>,
    x: Var,
    window: usize,
    shift: usize,
) -> Result<(Var, WindowPlan)> {
    let s = sess.graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("window_partition", &s, &[4]));
    }
    let plan = WindowPlan::new(s[0], s[1], s[2], window, shift)?;
    let out_shape = [s[0] * plan.windows_per_image(), plan.tokens(), s[3]];
    let w = sess.graph.gather(x, plan.partition.clone(), s[3], &out_shape)?;
    Ok((w, plan))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(sess: &mut Session<T>, windows: Var, plan: &WindowPlan) -> Result<Var> {
    let c = *sess.graph.shape(windows).last().unwrap();
    sess.graph.gather(
        windows,
        plan.reverse.clone(),
        c,
        &[plan.batch, plan.height, plan.width, c],
    )
}

/// Relative-position lookup `[tokens, tokens]` into a `(2w-1)²` table,
/// for a window of `eff` tokens per side inside a table sized for `window`.
fn relative_index(window: usize, eff: usize) -> Vec<usize> {
    let side = 2 * window - 1;
    let t = eff * eff;
    let mut idx = Vec::with_capacity(t * t);
    for p in 0..t {
        for q in 0..t {
            let dy = (p / eff) as isize - (q / eff) as isize + window as isize - 1;
            let dx = (p % eff) as isize - (q % eff) as isize + window as isize - 1;
            idx.push(dy as usize * side + dx as usize);
        }
    }
    idx
}

/// Whether a block reads the shared query or its domain's own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    DomainAdaptive,
}

/// Names and sizes of one attention module.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// Path below the namespace prefix, e.g. `enc/s0/b1/attn`.
    pub path: String,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl AttentionParams {
    pub fn new(path: impl Into<String>, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide dim {dim}")));
        }
        Ok(AttentionParams {
            path: path.into(),
            dim,
            heads,
            window,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn shared(&self, leaf: &str) -> String {
        shared_name(&format!("{}/{leaf}", self.path))
    }

    /// Query projection prefix: the domain's own when `domain` is given.
    pub fn query_prefix(&self, domain: Option<&str>) -> String {
        match domain {
            Some(d) => domain_name(d, &format!("{}/q", self.path)),
            None => self.shared("q"),
        }
    }

    /// Registers K, V, output projection, and the position-bias table.
    pub fn register_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let init = Init::TruncNormal(0.02);
        for leaf in ["k", "v", "proj"] {
            nn::register_linear(store, &self.shared(leaf), self.dim, self.dim, true, init, seed)?;
        }
        let side = 2 * self.window - 1;
        store.init(self.shared("rel_bias"), &[side * side, self.heads], init, seed)
    }

    pub fn register_query<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        domain: Option<&str>,
        seed: u64,
    ) -> Result<()> {
        nn::register_linear(
            store,
            &self.query_prefix(domain),
            self.dim,
            self.dim,
            true,
            Init::TruncNormal(0.02),
            seed,
        )
    }

    /// Values a domain adds: query weight and bias.
    pub fn query_count(&self) -> usize {
        self.dim * self.dim + self.dim
    }
}

/// Multi-head attention over windows `[B * nW, T, C]`.
///
/// Logits are scaled by `1 / sqrt(head_dim)` and offset by the shared
/// relative-position bias; masked pairs get zero weight.
pub fn msa<T: Scalar>(
    sess: &mut Session<T>,
    x: Var,
    params: &AttentionParams,
    domain: Option<&str>,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<Var> {
    let s = sess.graph.shape(x).to_vec();
    if s.len() != 3 || s[2] != params.dim {
        return Err(Error::shape("msa", &s, &[params.dim]));
    }
    let (bn, t, c) = (s[0], s[1], s[2]);
    let eff = (t as f64).sqrt().round() as usize;
    if eff * eff != t || eff > params.window {
        return Err(Error::contract(format!(
            "{t} tokens do not form a window of side <= {}",
            params.window
        )));
    }
    let (heads, hd) = (params.heads, params.head_dim());
    if let Some(m) = mask {
        if m.len() % (t * t) != 0 || bn % (m.len() / (t * t)) != 0 {
            return Err(Error::shape("msa mask", &s, &[m.len()]));
        }
    }

    let q = nn::linear(sess, x, &params.query_prefix(domain))?;
    let k = nn::linear(sess, x, &params.shared("k"))?;
    let v = nn::linear(sess, x, &params.shared("v"))?;

    // [bn, t, heads, hd] -> [bn, heads, t, hd]
    let split: Arc<Vec<usize>> = Arc::new(
        (0..bn)
            .flat_map(|b| (0..heads).flat_map(move |h| (0..t).map(move |i| (b * t + i) * heads + h)))
            .collect(),
    );
    let split_shape = [bn, heads, t, hd];
    let q = sess.graph.gather(q, split.clone(), hd, &split_shape)?;
    let q = sess.graph.scale(q, T::one() / T::c(hd as f64).sqrt());
    let k = sess.graph.gather(k, split.clone(), hd, &split_shape)?;
    let v = sess.graph.gather(v, split, hd, &split_shape)?;

    let logits = sess.graph.matmul_nt(q, k)?;
    let table = sess.param(&params.shared("rel_bias"))?;
    let rel = relative_index(params.window, eff);
    let bias_index: Arc<Vec<usize>> = Arc::new(
        (0..heads)
            .flat_map(|h| rel.iter().map(move |&r| r * heads + h))
            .collect(),
    );
    let bias = sess.graph.gather(table, bias_index, 1, &[heads, t, t])?;
    let logits = sess.graph.add(logits, bias)?;
    let attn_mask = mask.map(|m| AttentionMask {
        allowed: m.clone(),
        windows: m.len() / (t * t),
        heads,
        tokens: t,
    });
    let attn = sess.graph.softmax(logits, attn_mask)?;
    let out = sess.graph.matmul(attn, v)?;

    // [bn, heads, t, hd] -> [bn, t, heads * hd]
    let merge: Arc<Vec<usize>> = Arc::new(
        (0..bn)
            .flat_map(|b| (0..t).flat_map(move |i| (0..heads).map(move |h| (b * heads + h) * t + i)))
            .collect(),
    );
    let out = sess.graph.gather(out, merge, hd, &[bn, t, c])?;
    nn::linear(sess, out, &params.shared("proj"))
}

/// One transformer block at a fixed stage width.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub path: String,
    pub attn: AttentionParams,
    pub shift: usize,
    pub mlp_ratio: usize,
    pub kind: BlockKind,
}

impl TransformerBlock {
    pub fn new(
        path: impl Into<String>,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        kind: BlockKind,
    ) -> Result<Self> {
        let path = path.into();
        Ok(TransformerBlock {
            attn: AttentionParams::new(format!("{path}/attn"), dim, heads, window)?,
            path,
            shift,
            mlp_ratio: 4,
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }

    fn shared(&self, leaf: &str) -> String {
        shared_name(&format!("{}/{leaf}", self.path))
    }

    fn dam(&self, domain: &str, which: u8) -> String {
        domain_name(domain, &format!("{}/dam{which}", self.path))
    }

    /// Registers everything shared, plus the basic query for `Basic` blocks.
    pub fn register_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let c = self.dim();
        let hidden = self.mlp_ratio * c;
        let init = Init::TruncNormal(0.02);
        self.attn.register_shared(store, seed)?;
        nn::register_layer_norm(store, &self.shared("norm1"), c)?;
        nn::register_layer_norm(store, &self.shared("norm2"), c)?;
        nn::register_linear(store, &self.shared("mlp/fc1"), c, hidden, true, init, seed)?;
        nn::register_linear(store, &self.shared("mlp/fc2"), hidden, c, true, init, seed)?;
        if self.kind == BlockKind::Basic {
            self.attn.register_query(store, None, seed)?;
        }
        Ok(())
    }

    /// Registers the query projection and identity diagonals for `domain`.
    pub fn register_domain<T: Scalar>(&self, store: &mut ParamStore<T>, domain: &str, seed: u64) -> Result<()> {
        self.attn.register_query(store, Some(domain), seed)?;
        store.init(self.dam(domain, 1), &[self.dim()], Init::Ones, seed)?;
        store.init(self.dam(domain, 2), &[self.dim()], Init::Ones, seed)
    }

    /// Values one domain adds to this block: `|Q| + |Q bias| + 2C`.
    pub fn domain_param_count(&self) -> usize {
        self.attn.query_count() + 2 * self.dim()
    }

    /// Applies the block to `x: [B, h, w, C]`.
    ///
    /// `domain` must be given for domain-adaptive blocks and is ignored by
    /// basic ones. Windows larger than the map shrink to it, and shifting is
    /// skipped when a single window covers the map.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var, domain: Option<&str>) -> Result<Var> {
        let s = sess.graph.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.dim() {
            return Err(Error::shape("transformer block", &s, &[self.dim()]));
        }
        let domain = match (self.kind, domain) {
            (BlockKind::Basic, _) => None,
            (BlockKind::DomainAdaptive, Some(d)) => Some(d),
            (BlockKind::DomainAdaptive, None) => {
                return Err(Error::contract("domain-adaptive block needs a domain"))
            }
        };
        if let Some(d) = domain {
            if !sess.store().contains(&self.dam(d, 1)) {
                return Err(Error::UnknownDomain(d.to_string()));
            }
        }
        let window = self.attn.window.min(s[1]).min(s[2]);
        let shift = if window < self.attn.window { 0 } else { self.shift };

        let normed = nn::layer_norm(sess, x, &self.shared("norm1"))?;
        let (windows, plan) = window_partition(sess, normed, window, shift)?;
        let attended = msa(sess, windows, &self.attn, domain, plan.mask.as_ref())?;
        let mut branch = window_reverse(sess, attended, &plan)?;
        if let Some(d) = domain {
            let d1 = sess.param(&self.dam(d, 1))?;
            branch = sess.graph.mul(branch, d1)?;
        }
        let y_hat = sess.graph.add(branch, x)?;

        let normed = nn::layer_norm(sess, y_hat, &self.shared("norm2"))?;
        let h = nn::linear(sess, normed, &self.shared("mlp/fc1"))?;
        let h = sess.graph.gelu(h);
        let h = nn::linear(sess, h, &self.shared("mlp/fc2"))?;
        let mut y = sess.graph.add(h, y_hat)?;
        if let Some(d) = domain {
            let d2 = sess.param(&self.dam(d, 2))?;
            y = sess.graph.mul(y, d2)?;
        }
        Ok(y)
    }
}
