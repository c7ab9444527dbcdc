//! Dataset layout on disk, synthetic domains, and the mixed-domain sampler.
//!
//! ```text
//! root/<domain>/domain.cfg
//! root/<domain>/{train,val,test}/imgNNN.png   (or .pgm)
//! root/<domain>/{train,val,test}/imgNNN.csv   "n,row,col" per landmark
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{join, DomainSpec, Geometry, LandmarkSet};
use crate::numerics::{Graph, Tensor};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split `{s}`"))),
        }
    }
}

/// One grayscale image (values in `[0, 1]`, shape `[H, W, 1]`) and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub domain: String,
    pub path: PathBuf,
}

impl Sample {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.image.shape()[0], self.image.shape()[1])
    }

    /// Image resized to `to` and labels mapped onto it.
    pub fn resized(&self, to: Geometry) -> Result<(Tensor<f32>, LandmarkSet)> {
        Ok((resize_image(&self.image, to)?, self.landmarks.rescaled(to)))
    }
}

/// Bilinear resize of an `[H, W, C]` image.
pub fn resize_image(image: &Tensor<f32>, to: Geometry) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s[0] == to.height && s[1] == to.width {
        return Ok(image.clone());
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = g.resize(x, to.height, to.width)?;
    g.value(y).clone().reshape(&[to.height, to.width, s[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: DomainSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Published train/test sizes of the three reference datasets.
pub fn paper_split_sizes(domain: &str) -> Option<(usize, usize)> {
    match domain {
        "head" => Some((150, 250)),
        "hand" => Some((609, 300)),
        "chest" => Some((229, 50)),
        _ => None,
    }
}

pub fn parse_domain_cfg(text: &str, path: &Path) -> Result<DomainSpec> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(path, format!("bad line `{line}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::data(path, format!("missing `{k}`")));
    let bad = |k: &str| Error::data(path, format!("bad value for `{k}`"));
    let landmarks = get("num_landmarks")?.parse().map_err(|_| bad("num_landmarks"))?;
    let spacing = get("spacing_rule")?
        .parse()
        .map_err(|e: Error| Error::data(path, e.to_string()))?;
    let sdr_thresholds = get("sdr_thresholds")?
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad("sdr_thresholds")))
        .collect::<Result<Vec<f64>>>()?;
    let id_threshold = get("id_threshold")?.parse().map_err(|_| bad("id_threshold"))?;
    DomainSpec::new(get("name")?, landmarks, spacing, sdr_thresholds, id_threshold)
        .map_err(|e| Error::data(path, e.to_string()))
}

pub fn domain_cfg_text(spec: &DomainSpec) -> String {
    format!(
        "name={}\nnum_landmarks={}\nspacing_rule={}\nsdr_thresholds={}\nid_threshold={}\n",
        spec.name,
        spec.landmarks,
        spec.spacing,
        join(&spec.sdr_thresholds),
        spec.id_threshold
    )
}

fn parse_labels(text: &str, path: &Path, n: usize, geometry: Geometry) -> Result<LandmarkSet> {
    let mut coords = vec![None; n];
    let mut rows = 0;
    for line in text.split('\n').filter(|l| !l.trim().is_empty()) {
        rows += 1;
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        let parsed = match f.as_slice() {
            [i, r, c] => i
                .trim()
                .parse::<usize>()
                .ok()
                .zip(r.trim().parse::<f64>().ok())
                .zip(c.trim().parse::<f64>().ok()),
            _ => None,
        };
        let ((i, r), c) = parsed.ok_or_else(|| Error::data(path, format!("bad label row `{line}`")))?;
        if i == 0 || i > n {
            return Err(Error::data(path, format!("landmark index {i} outside 1..={n}")));
        }
        if coords[i - 1].replace((r, c)).is_some() {
            return Err(Error::data(path, format!("landmark {i} listed twice")));
        }
    }
    if rows != n {
        return Err(Error::data(path, format!("expected {n} landmarks, found {rows}")));
    }
    let coords: Vec<(f64, f64)> = coords.into_iter().map(|c| c.unwrap()).collect();
    LandmarkSet::new(coords, geometry).map_err(|e| Error::data(path, e.to_string()))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Tensor::new(&[h as usize, w as usize, 1], data)
}

/// Writes a `[H, W, 1]` image in `[0, 1]` as 16-bit grayscale PNG.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(s[1] as u32, s[0] as u32, raw)
        .ok_or_else(|| Error::data(path, "image buffer size mismatch"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_split(dir: &Path, spec: &DomainSpec) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut labels: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    labels.sort();
    labels
        .into_iter()
        .map(|csv| {
            let image_path = ["png", "pgm"]
                .iter()
                .map(|e| csv.with_extension(e))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::data(&csv, "no matching .png or .pgm image"))?;
            let image = load_image(&image_path)?;
            let geometry = Geometry::new(image.shape()[0], image.shape()[1]);
            let landmarks = parse_labels(&fs::read_to_string(&csv)?, &csv, spec.landmarks, geometry)?;
            Ok(Sample {
                name: csv.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image,
                landmarks,
                domain: spec.name.clone(),
                path: image_path,
            })
        })
        .collect()
}

/// Loads one domain directory.
pub fn load_domain(dir: &Path) -> Result<DatasetManifest> {
    let cfg = dir.join("domain.cfg");
    let text = fs::read_to_string(&cfg).map_err(|e| Error::data(&cfg, e.to_string()))?;
    let spec = parse_domain_cfg(&text, &cfg)?;
    let manifest = DatasetManifest {
        train: load_split(&dir.join("train"), &spec)?,
        val: load_split(&dir.join("val"), &spec)?,
        test: load_split(&dir.join("test"), &spec)?,
        spec,
    };
    if manifest.is_empty() {
        return Err(Error::data(dir, "dataset has no labelled images"));
    }
    Ok(manifest)
}

/// Loads every domain under `root`, ordered by directory name.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetManifest>> {
    let entries = fs::read_dir(root).map_err(|e| Error::data(root, e.to_string()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("domain.cfg").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no domain directories (expected <domain>/domain.cfg)"));
    }
    dirs.iter().map(|d| load_domain(d)).collect()
}

/// Writes a manifest in the on-disk layout under `root/<domain>`.
pub fn write_domain(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let dir = root.join(&manifest.spec.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("domain.cfg"), domain_cfg_text(&manifest.spec))?;
    for split in SPLITS {
        let samples = manifest.split(split);
        if samples.is_empty() {
            continue;
        }
        let sd = dir.join(split.dir());
        fs::create_dir_all(&sd)?;
        for s in samples {
            save_image(&sd.join(format!("{}.png", s.name)), &s.image)?;
            fs::write(sd.join(format!("{}.csv", s.name)), labels_csv(s.landmarks.coords()))?;
        }
    }
    Ok(dir)
}

pub fn labels_csv(coords: &[(f64, f64)]) -> String {
    coords
        .iter()
        .enumerate()
        .map(|(i, (r, c))| format!("{},{r},{c}\n", i + 1))
        .collect()
}

/// Options for [`gen_synthetic`].
#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub size: usize,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            size: 64,
            val_fraction: 0.2,
            noise: 0.15,
        }
    }
}

const MOTIF_RADIUS: usize = 8;

/// Intensity of motif `n` of `total` at offset `(dy, dx)` from its centre.
///
/// Even indices draw a bar through the centre, odd indices two parallel bars
/// beside it; each pair of indices gets its own orientation. A bright dot
/// marks the centre of every motif.
fn motif(n: usize, total: usize, dy: f64, dx: f64) -> f64 {
    let rounds = total.div_ceil(2).max(1);
    let theta = std::f64::consts::PI * (n / 2) as f64 / rounds as f64;
    let (s, c) = theta.sin_cos();
    let along = dy * c + dx * s;
    let across = -dy * s + dx * c;
    let line = |off: f64| (-(along * along) / 20.0 - (across - off).powi(2) / 0.8).exp();
    let body = if n % 2 == 0 {
        line(0.0)
    } else {
        line(-2.5).max(line(2.5))
    };
    (0.8 * body).max((-(dy * dy + dx * dx) / 1.2).exp())
}

/// Deterministic synthetic domain. Labels are integer pixel centres of the
/// rendered motifs; `count` images are split into train and validation.
pub fn gen_synthetic(spec: &DomainSpec, count: usize, seed: u64, opts: SynthOptions) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::contract("synthetic dataset needs at least one image"));
    }
    let size = opts.size;
    let margin = 6usize;
    if size < 2 * margin + 4 {
        return Err(Error::contract(format!("synthetic images must be at least {} px", 2 * margin + 4)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(&spec.name));
    let geometry = Geometry::new(size, size);
    let min_sep = ((size * size) as f64 / (spec.landmarks as f64 * 8.0)).sqrt().clamp(10.0, 16.0);
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let mut coords: Vec<(f64, f64)> = Vec::with_capacity(spec.landmarks);
        let mut tries = 0;
        while coords.len() < spec.landmarks {
            let p = (
                rng.random_range(margin..size - margin) as f64,
                rng.random_range(margin..size - margin) as f64,
            );
            tries += 1;
            if tries > 10_000 || coords.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= min_sep) {
                coords.push(p);
            }
        }
        let mut img: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>() * opts.noise).collect();
        for (n, &(r, c)) in coords.iter().enumerate() {
            let (r, c) = (r as usize, c as usize);
            for i in r.saturating_sub(MOTIF_RADIUS)..(r + MOTIF_RADIUS + 1).min(size) {
                for j in c.saturating_sub(MOTIF_RADIUS)..(c + MOTIF_RADIUS + 1).min(size) {
                    let v = motif(n, spec.landmarks, i as f64 - r as f64, j as f64 - c as f64);
                    let px = &mut img[i * size + j];
                    *px = px.max(v);
                }
            }
        }
        let data = img
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as f32 / 65535.0)
            .collect();
        samples.push(Sample {
            name: format!("img{k:03}"),
            image: Tensor::new(&[size, size, 1], data)?,
            landmarks: LandmarkSet::new(coords, geometry)?,
            domain: spec.name.clone(),
            path: PathBuf::new(),
        });
    }
    let n_val = if count >= 2 {
        ((count as f64 * opts.val_fraction).round() as usize).clamp(1, count - 1)
    } else {
        0
    };
    let val = samples.split_off(count - n_val);
    Ok(DatasetManifest {
        spec: spec.clone(),
        train: samples,
        val,
        test: Vec::new(),
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interleave {
    /// Domain picked with probability proportional to its remaining batches.
    Proportional,
    /// Uniform over domains that still have batches.
    Uniform,
}

/// One single-domain batch: the domain's position and sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub domain: usize,
    pub indices: Vec<usize>,
}

/// Batches for one epoch over domains with `sizes[d]` training samples.
///
/// Each domain is shuffled and chunked; a trailing batch of one sample is
/// dropped because training-mode batch normalization needs two.
pub fn mixed_sampler(sizes: &[usize], batch_size: usize, seed: u64, epoch: u64, mode: Interleave) -> Result<Vec<Batch>> {
    if sizes.is_empty() {
        return Err(Error::contract("sampler needs at least one domain"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = sizes
        .iter()
        .map(|&n| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.chunks(batch_size)
                .filter(|c| c.len() >= 2 || batch_size == 1)
                .map(<[usize]>::to_vec)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let weights: Vec<usize> = queues
            .iter()
            .map(|q| match mode {
                Interleave::Proportional => q.len(),
                Interleave::Uniform => usize::from(!q.is_empty()),
            })
            .collect();
        let total: usize = weights.iter().sum();
        if total == 0 {
            break;
        }
        let mut pick = rng.random_range(0..total);
        let d = weights
            .iter()
            .position(|&w| {
                if pick < w {
                    true
                } else {
                    pick -= w;
                    false
                }
            })
            .unwrap();
        let indices = queues[d].pop_front().unwrap();
        out.push(Batch { domain: d, indices });
    }
    Ok(out)
}
