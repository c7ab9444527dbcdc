//! Full detector: encoder, decoder, guidance branch, heatmap fusion, and the
//! target/decoding utilities around it.

use std::fmt;
use std::str::FromStr;

use crate::decoder::{Decoder, Guidance, GuidanceConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamStore, Session};

/// How pixel distances convert to reported units.
#[derive(Clone, Debug, PartialEq)]
pub enum SpacingRule {
    /// Millimetres per pixel.
    Fixed(f64),
    /// Spacing `50 / |p - q|` from two landmark indices (0-based).
    Wrist(usize, usize),
    Pixel,
}

impl fmt::Display for SpacingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpacingRule::Fixed(mm) => write!(f, "fixed:{mm}"),
            SpacingRule::Wrist(a, b) => write!(f, "wrist:{a},{b}"),
            SpacingRule::Pixel => f.write_str("pixel"),
        }
    }
}

impl FromStr for SpacingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("bad spacing rule `{s}`"));
        let s = s.trim();
        if s == "pixel" {
            return Ok(SpacingRule::Pixel);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let mm: f64 = v.trim().parse().map_err(|_| bad())?;
            if !(mm > 0.0 && mm.is_finite()) {
                return Err(bad());
            }
            return Ok(SpacingRule::Fixed(mm));
        }
        if let Some(v) = s.strip_prefix("wrist:") {
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            if a == b {
                return Err(bad());
            }
            return Ok(SpacingRule::Wrist(a, b));
        }
        Err(bad())
    }
}

/// Static description of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub id: usize,
    pub landmarks: usize,
    pub spacing: SpacingRule,
    pub sdr_thresholds: Vec<f64>,
    pub id_threshold: f64,
}

impl DomainSpec {
    pub fn new(
        name: impl Into<String>,
        landmarks: usize,
        spacing: SpacingRule,
        sdr_thresholds: Vec<f64>,
        id_threshold: f64,
    ) -> Result<Self> {
        let spec = DomainSpec {
            name: name.into(),
            id: 0,
            landmarks,
            spacing,
            sdr_thresholds,
            id_threshold,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cephalometric preset: 19 landmarks at 0.1 mm per pixel.
    pub fn head() -> Self {
        Self::new("head", 19, SpacingRule::Fixed(0.1), vec![2.0, 2.5, 3.0, 4.0], 2.0).unwrap()
    }

    /// Hand preset: 37 landmarks, spacing from the wrist endpoints.
    pub fn hand() -> Self {
        Self::new("hand", 37, SpacingRule::Wrist(0, 4), vec![2.0, 4.0, 10.0], 2.0).unwrap()
    }

    pub fn chest() -> Self {
        Self::new("chest", 6, SpacingRule::Pixel, vec![3.0, 6.0, 9.0], 20.0).unwrap()
    }

    /// Synthetic domain measured in pixels.
    pub fn synthetic(name: impl Into<String>, landmarks: usize) -> Self {
        Self::new(name, landmarks, SpacingRule::Pixel, vec![1.0, 2.0, 3.0, 4.0], 3.0).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let name_ok = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !name_ok {
            return Err(Error::contract(format!("bad domain name `{}`", self.name)));
        }
        if self.landmarks == 0 {
            return Err(Error::contract("a domain needs at least one landmark"));
        }
        let t = &self.sdr_thresholds;
        if t.is_empty() || t[0] <= 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract(format!(
                "thresholds must be positive and strictly increasing: {t:?}"
            )));
        }
        if !(self.id_threshold > 0.0) {
            return Err(Error::contract("identification threshold must be positive"));
        }
        if let SpacingRule::Wrist(a, b) = self.spacing {
            if a >= self.landmarks || b >= self.landmarks {
                return Err(Error::contract(format!(
                    "wrist indices {a},{b} out of range for {} landmarks",
                    self.landmarks
                )));
            }
        }
        Ok(())
    }

    pub fn thresholds_text(&self) -> String {
        join(&self.sdr_thresholds)
    }
}

pub(crate) fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Image height and width in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Self {
        Geometry { height, width }
    }

    fn contains(&self, (r, c): (f64, f64)) -> bool {
        r >= 0.0 && c >= 0.0 && r < self.height as f64 && c < self.width as f64
    }
}

/// Ordered `(row, col)` landmark coordinates on a stated geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    coords: Vec<(f64, f64)>,
    geometry: Geometry,
}

impl LandmarkSet {
    pub fn new(coords: Vec<(f64, f64)>, geometry: Geometry) -> Result<Self> {
        if let Some((n, &p)) = coords.iter().enumerate().find(|(_, &p)| !geometry.contains(p)) {
            return Err(Error::contract(format!(
                "landmark {} at {p:?} outside {}x{}",
                n + 1,
                geometry.height,
                geometry.width
            )));
        }
        Ok(LandmarkSet { coords, geometry })
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The same landmarks expressed on another geometry.
    pub fn rescaled(&self, to: Geometry) -> LandmarkSet {
        let coords = rescale_coords(&self.coords, self.geometry, to)
            .into_iter()
            .map(|(r, c)| {
                (
                    r.clamp(0.0, to.height as f64 - 1.0),
                    c.clamp(0.0, to.width as f64 - 1.0),
                )
            })
            .collect();
        LandmarkSet {
            coords,
            geometry: to,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapRole {
    Guidance,
    Fine,
    Fused,
    Target,
}

/// `[H, W, N]` scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub role: HeatmapRole,
    pub data: Tensor<f64>,
}

impl HeatmapStack {
    pub fn new(role: HeatmapRole, data: Tensor<f64>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::shape("heatmap", data.shape(), &[3]));
        }
        Ok(HeatmapStack { role, data })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.data.shape()[0], self.data.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Values of channel `n` in row-major order.
    pub fn channel(&self, n: usize) -> Vec<f64> {
        let c = self.channels();
        self.data.data().iter().skip(n).step_by(c).copied().collect()
    }

    /// Bilinear resize to another geometry.
    pub fn resized(&self, to: Geometry) -> Result<HeatmapStack> {
        let g = self.geometry();
        let mut graph = Graph::<f64>::new();
        let x = graph.constant(self.data.clone().reshape(&[1, g.height, g.width, self.channels()])?);
        let y = graph.resize(x, to.height, to.width)?;
        let data = graph.value(y).clone().reshape(&[to.height, to.width, self.channels()])?;
        HeatmapStack::new(self.role, data)
    }
}

/// Peak of the unnormalized Gaussian target: `1 / (sqrt(2π) σ)`.
pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// One Gaussian channel per landmark on the integer pixel grid.
///
/// `normalize_peak` rescales every channel so its analytic peak is 1.
pub fn gaussian_target(
    landmarks: &LandmarkSet,
    geometry: Geometry,
    sigma: f64,
    normalize_peak: bool,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if landmarks.is_empty() {
        return Err(Error::contract("no landmarks to render"));
    }
    if let Some(p) = landmarks.coords().iter().find(|&&p| !geometry.contains(p)) {
        return Err(Error::contract(format!(
            "landmark {p:?} outside {}x{}",
            geometry.height, geometry.width
        )));
    }
    let n = landmarks.len();
    let amp = if normalize_peak { 1.0 } else { gaussian_peak(sigma) };
    let denom = 2.0 * sigma * sigma;
    let mut data = vec![0.0; geometry.height * geometry.width * n];
    for i in 0..geometry.height {
        for j in 0..geometry.width {
            let base = (i * geometry.width + j) * n;
            for (k, &(li, lj)) in landmarks.coords().iter().enumerate() {
                let d2 = (i as f64 - li).powi(2) + (j as f64 - lj).powi(2);
                data[base + k] = amp * (-d2 / denom).exp();
            }
        }
    }
    HeatmapStack::new(
        HeatmapRole::Target,
        Tensor::new(&[geometry.height, geometry.width, n], data)?,
    )
}

/// Per-channel argmax; ties go to the smallest row, then the smallest column.
pub fn decode_landmarks(heatmap: &HeatmapStack) -> LandmarkSet {
    let g = heatmap.geometry();
    let n = heatmap.channels();
    let mut best = vec![(f64::NEG_INFINITY, 0usize); n];
    for (idx, px) in heatmap.data.data().chunks_exact(n).enumerate() {
        for (b, &v) in best.iter_mut().zip(px) {
            if v > b.0 {
                *b = (v, idx);
            }
        }
    }
    let coords = best
        .into_iter()
        .map(|(_, idx)| ((idx / g.width) as f64, (idx % g.width) as f64))
        .collect();
    LandmarkSet {
        coords,
        geometry: g,
    }
}

/// Maps pixel-center positions between geometries: `(i + 0.5) * s - 0.5`.
pub fn rescale_coords(coords: &[(f64, f64)], from: Geometry, to: Geometry) -> Vec<(f64, f64)> {
    let sr = to.height as f64 / from.height as f64;
    let sc = to.width as f64 / from.width as f64;
    coords
        .iter()
        .map(|&(r, c)| ((r + 0.5) * sr - 0.5, (c + 0.5) * sc - 0.5))
        .collect()
}

/// Architecture plus input geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub guidance: GuidanceConfig,
    pub input: Geometry,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            guidance: GuidanceConfig::toy(),
            input: Geometry::new(64, 64),
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            guidance: GuidanceConfig::paper(),
            input: Geometry::new(512, 512),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::contract(format!("unknown preset `{other}`"))),
        }
    }

    /// Canonical `key=value` lines, one per field, in fixed order.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_height={}\ninput_width={}\npatch_size={}\nin_channels={}\nembed_dim={}\n\
             depths={}\nheads={}\nwindow={}\nguidance_width={}\nguidance_dilations={}\n\
             guidance_downsample={}\n",
            self.input.height,
            self.input.width,
            e.patch_size,
            e.in_channels,
            e.embed_dim,
            list(&e.depths),
            list(&e.heads),
            e.window,
            self.guidance.width,
            list(&self.guidance.dilations),
            self.guidance.downsample,
        )
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::contract(format!("bad value `{value}` for `{key}`"));
        let one = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let list = |v: &str| {
            v.split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()
        };
        let four = |v: &str| -> Result<[usize; 4]> { list(v)?.try_into().map_err(|_| bad()) };
        match key {
            "input_height" => self.input.height = one(value)?,
            "input_width" => self.input.width = one(value)?,
            "input_size" => {
                let s = one(value)?;
                self.input = Geometry::new(s, s);
            }
            "patch_size" => self.encoder.patch_size = one(value)?,
            "in_channels" => self.encoder.in_channels = one(value)?,
            "embed_dim" => self.encoder.embed_dim = one(value)?,
            "depths" => self.encoder.depths = four(value)?,
            "heads" => self.encoder.heads = four(value)?,
            "window" => self.encoder.window = one(value)?,
            "guidance_width" => self.guidance.width = one(value)?,
            "guidance_dilations" => self.guidance.dilations = list(value)?,
            "guidance_downsample" => self.guidance.downsample = one(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
            if !cfg.apply(k.trim(), v)? {
                return Err(Error::Format(format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.check_input(self.input.height, self.input.width)?;
        let g = &self.guidance;
        if g.width == 0 || g.dilations.is_empty() || g.dilations.contains(&0) || g.downsample == 0 {
            return Err(Error::contract("guidance sizes must be positive"));
        }
        if self.input.height % g.downsample != 0 || self.input.width % g.downsample != 0 {
            return Err(Error::contract(format!(
                "input {}x{} not divisible by guidance downsample {}",
                self.input.height, self.input.width, g.downsample
            )));
        }
        Ok(())
    }
}

/// Forward-pass results, each `[B, H, W, N]`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub fused: Var,
    pub fine: Var,
    pub guidance: Var,
}

/// The assembled detector. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Datr {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub guidance: Guidance,
    domains: Vec<DomainSpec>,
}

impl Datr {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let decoder = Decoder::new(&config.encoder);
        let guidance = Guidance::new(config.guidance.clone(), config.encoder.in_channels);
        Ok(Datr {
            config,
            encoder,
            decoder,
            guidance,
            domains: Vec::new(),
        })
    }

    pub fn init_shared<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.encoder.register_shared(store, seed)?;
        self.decoder.register_shared(store, seed)
    }

    /// Adds a domain and its freshly initialized parameters. The id is
    /// assigned in registration order.
    pub fn register_domain<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        mut spec: DomainSpec,
        seed: u64,
    ) -> Result<()> {
        spec.validate()?;
        if self.domain(&spec.name).is_ok() {
            return Err(Error::DuplicateDomain(spec.name));
        }
        self.encoder.register_domain(store, &spec.name, seed)?;
        self.decoder.register_domain(store, &spec.name, spec.landmarks, seed)?;
        self.guidance.register_domain(store, &spec.name, spec.landmarks, seed)?;
        spec.id = self.domains.len();
        self.domains.push(spec);
        Ok(())
    }

    /// Records a domain whose parameters are already in the store.
    pub fn attach_domain(&mut self, mut spec: DomainSpec) -> Result<()> {
        spec.validate()?;
        if self.domain(&spec.name).is_ok() {
            return Err(Error::DuplicateDomain(spec.name));
        }
        spec.id = self.domains.len();
        self.domains.push(spec);
        Ok(())
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    /// Parameters one domain adds, from the configuration alone.
    pub fn domain_param_count(&self, landmarks: usize) -> usize {
        self.encoder.domain_param_count()
            + self.decoder.dac_domain_param_count()
            + self.decoder.head_param_count(landmarks)
            + self.guidance.domain_param_count(landmarks)
    }

    /// `image` is `[B, H, W, C]` at the model input geometry.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, image: Var, domain: &str) -> Result<Outputs> {
        self.domain(domain)?;
        let s = sess.graph.shape(image).to_vec();
        let g = self.config.input;
        if s.len() != 4 || s[1] != g.height || s[2] != g.width {
            return Err(Error::shape("model input", &s, &[g.height, g.width]));
        }
        let pyramid = self.encoder.encode(sess, image, domain)?;
        let fine = self.decoder.decode(sess, &pyramid, domain)?;
        let guidance = self.guidance.forward(sess, image, domain)?;
        let fused = sess.graph.mul(guidance, fine)?;
        Ok(Outputs {
            fused,
            fine,
            guidance,
        })
    }

    /// Inference on a batch; returns `(fused, fine, guidance)` per image.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        domain: &str,
    ) -> Result<Vec<[HeatmapStack; 3]>> {
        let mut sess = Session::inference(store);
        let x = sess.graph.constant(images.clone());
        let out = self.forward(&mut sess, x, domain)?;
        let split = |v: Var, role| -> Result<Vec<HeatmapStack>> {
            let t = sess.graph.value(v);
            let s = t.shape();
            let per = s[1] * s[2] * s[3];
            t.data()
                .chunks_exact(per)
                .map(|c| {
                    let d = c.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                    HeatmapStack::new(role, Tensor::new(&s[1..], d)?)
                })
                .collect()
        };
        let fused = split(out.fused, HeatmapRole::Fused)?;
        let fine = split(out.fine, HeatmapRole::Fine)?;
        let guide = split(out.guidance, HeatmapRole::Guidance)?;
        Ok(fused
            .into_iter()
            .zip(fine)
            .zip(guide)
            .map(|((a, b), c)| [a, b, c])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_rule_round_trip() {
        for s in ["fixed:0.1", "wrist:0,4", "pixel"] {
            assert_eq!(s.parse::<SpacingRule>().unwrap().to_string(), s);
        }
        assert!("wrist:2,2".parse::<SpacingRule>().is_err());
        assert!("fixed:-1".parse::<SpacingRule>().is_err());
    }

    #[test]
    fn domain_spec_validation() {
        assert!(DomainSpec::new("a", 0, SpacingRule::Pixel, vec![1.0], 1.0).is_err());
        assert!(DomainSpec::new("a", 2, SpacingRule::Pixel, vec![2.0, 2.0], 1.0).is_err());
        assert!(DomainSpec::new("a b", 2, SpacingRule::Pixel, vec![2.0], 1.0).is_err());
        DomainSpec::head();
        DomainSpec::hand();
        DomainSpec::chest();
    }

    #[test]
    fn gaussian_values() {
        let g = Geometry::new(32, 32);
        let l = LandmarkSet::new(vec![(10.0, 12.0)], g).unwrap();
        let t = gaussian_target(&l, g, 3.0, false).unwrap();
        let at = |i: usize, j: usize| t.data.data()[i * 32 + j];
        assert!((at(10, 12) - 0.132_980_760_1).abs() < 1e-9);
        assert!((at(13, 12) - at(10, 12) * (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(at(12, 14), at(8, 10));
        let n = gaussian_target(&l, g, 3.0, true).unwrap();
        assert_eq!(n.data.data()[10 * 32 + 12], 1.0);
    }

    #[test]
    fn constant_channel_decodes_to_origin() {
        let h = HeatmapStack::new(HeatmapRole::Fused, Tensor::full(&[4, 5, 2], 0.3)).unwrap();
        assert_eq!(decode_landmarks(&h).coords(), &[(0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn center_mapping() {
        let out = rescale_coords(&[(10.0, 20.0)], Geometry::new(64, 64), Geometry::new(128, 128));
        assert_eq!(out, vec![(20.5, 40.5)]);
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [ModelConfig::toy(), ModelConfig::paper()] {
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
