//! Binary checkpoint container.
//!
//! ```text
//! "DATRCKPT"  u32 version
//! then sections, each: 4-byte tag, u64 payload length, payload
//!   CONF  text: architecture key=value lines, then one `domain=` line per domain
//!   PARM  u32 count, parameter records
//!   BUFF  u32 count, buffer records (running statistics)
//!   ADAM  u32 count, each: name, u64 step, first-moment body, second-moment body
//!   META  text: sorted key=value lines
//! record: u32 name length, name, tensor body
//! tensor body: u8 bytes per value (4 or 8), u32 rank, u32 dims..., values
//! ```
//! All integers and values are little-endian. Records are sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{AdamSlot, AdamState};
use crate::error::{Error, Result};
use crate::model::{join, Datr, DomainSpec, ModelConfig};
use crate::numerics::{Scalar, Tensor};
use crate::params::{ParamStore, SHARED};

pub const MAGIC: &[u8; 8] = b"DATRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub domains: Vec<DomainSpec>,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Rebuilds the model with every stored domain attached.
    pub fn build_model(&self) -> Result<Datr> {
        let mut model = Datr::new(self.model.clone())?;
        for d in &self.domains {
            model.attach_domain(d.clone())?;
        }
        Ok(model)
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key)?.parse().ok()
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key)?.parse().ok()
    }

    /// Parameter section payload.
    pub fn param_section(&self) -> Vec<u8> {
        records(self.params.iter())
    }

    /// SHA-256 over the shared parameter records, hex encoded.
    pub fn shared_checksum(&self) -> String {
        shared_checksum(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut conf = self.model.to_text();
        for d in &self.domains {
            conf.push_str(&format!("domain={}\n", domain_line(d)));
        }
        section(&mut out, b"CONF", conf.as_bytes());
        section(&mut out, b"PARM", &self.param_section());
        section(&mut out, b"BUFF", &records(self.params.buffers()));
        let mut adam = (self.adam.slots.len() as u32).to_le_bytes().to_vec();
        for (name, slot) in &self.adam.slots {
            put_name(&mut adam, name);
            adam.extend_from_slice(&slot.step.to_le_bytes());
            put_tensor(&mut adam, &slot.m);
            put_tensor(&mut adam, &slot.v);
        }
        section(&mut out, b"ADAM", &adam);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        section(&mut out, b"META", meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut sections = BTreeMap::new();
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            sections.insert(tag, r.take(len)?);
        }
        let get = |tag: &[u8; 4]| {
            sections
                .get(tag)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
        };
        let text = |tag| -> Result<String> {
            String::from_utf8(get(tag)?.to_vec()).map_err(|_| Error::Format("section is not UTF-8".into()))
        };

        let conf = text(b"CONF")?;
        let (arch, doms): (Vec<&str>, Vec<&str>) = conf.lines().partition(|l| !l.starts_with("domain="));
        let model = ModelConfig::from_text(&arch.join("\n"))?;
        let domains = doms
            .iter()
            .map(|l| parse_domain_line(&l["domain=".len()..]))
            .collect::<Result<Vec<_>>>()?;

        let mut params = ParamStore::new();
        let mut pr = Reader { bytes: get(b"PARM")?, pos: 0 };
        for _ in 0..pr.u32()? {
            let name = pr.name()?;
            params.insert(name, pr.tensor()?)?;
        }
        let mut br = Reader { bytes: get(b"BUFF")?, pos: 0 };
        for _ in 0..br.u32()? {
            let name = br.name()?;
            params.set_buffer(name, br.tensor()?);
        }
        let mut adam = AdamState::default();
        let mut ar = Reader { bytes: get(b"ADAM")?, pos: 0 };
        for _ in 0..ar.u32()? {
            let name = ar.name()?;
            let step = ar.u64()?;
            let (m, v) = (ar.tensor()?, ar.tensor()?);
            adam.slots.insert(name, AdamSlot { step, m, v });
        }
        let meta = text(b"META")?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Checkpoint {
            model,
            domains,
            params,
            adam,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn shared_checksum<T: Scalar>(store: &ParamStore<T>) -> String {
    let bytes = records(store.iter().filter(|(n, _)| n.starts_with(SHARED)));
    hex::encode(Sha256::digest(&bytes))
}

fn domain_line(d: &DomainSpec) -> String {
    format!(
        "{};{};{};{};{}",
        d.name,
        d.landmarks,
        d.spacing,
        join(&d.sdr_thresholds),
        d.id_threshold
    )
}

fn parse_domain_line(line: &str) -> Result<DomainSpec> {
    let bad = || Error::Format(format!("bad domain entry `{line}`"));
    let f: Vec<&str> = line.split(';').collect();
    let [name, n, spacing, thr, id] = f.as_slice() else {
        return Err(bad());
    };
    let thresholds = thr
        .split(',')
        .map(|t| t.parse().map_err(|_| bad()))
        .collect::<Result<Vec<f64>>>()?;
    DomainSpec::new(
        *name,
        n.parse().map_err(|_| bad())?,
        spacing.parse()?,
        thresholds,
        id.parse().map_err(|_| bad())?,
    )
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn records<'a, T: Scalar + 'a>(items: impl Iterator<Item = (&'a String, &'a Tensor<T>)>) -> Vec<u8> {
    let items: Vec<_> = items.collect();
    let mut out = (items.len() as u32).to_le_bytes().to_vec();
    for (name, t) in items {
        put_name(&mut out, name);
        put_tensor(&mut out, t);
    }
    out
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let width = self.take(1)?[0] as usize;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Format("oversized record".into()))?)?;
        let data = match width {
            4 => raw.chunks_exact(4).map(f32::read_le).collect(),
            8 => raw.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
            w => return Err(Error::Format(format!("unsupported value width {w}"))),
        };
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}
