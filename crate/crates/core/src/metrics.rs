//! Radial error, MRE, SDR, and the per-domain spacing rules.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{DomainSpec, LandmarkSet, SpacingRule};

/// Euclidean distance per landmark, multiplied by `spacing`.
pub fn radial_errors(pred: &LandmarkSet, truth: &LandmarkSet, spacing: f64) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "landmark count mismatch: {} predicted vs {} labelled",
            pred.len(),
            truth.len()
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::contract(format!("spacing must be positive, got {spacing}")));
    }
    Ok(pred
        .coords()
        .iter()
        .zip(truth.coords())
        .map(|(&(a, b), &(c, d))| (a - c).hypot(b - d) * spacing)
        .collect())
}

/// Mean and population standard deviation.
pub fn mre(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::contract("MRE of an empty error list"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Percentage of errors strictly below `threshold`.
pub fn sdr(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::contract("SDR of an empty error list"));
    }
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("threshold must be positive, got {threshold}")));
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Millimetres per pixel from the two wrist endpoints: `50 / |p - q|`.
pub fn hand_spacing(p: (f64, f64), q: (f64, f64)) -> Result<f64> {
    let d = (p.0 - q.0).hypot(p.1 - q.1);
    if d == 0.0 {
        return Err(Error::contract("wrist endpoints coincide"));
    }
    Ok(50.0 / d)
}

/// Spacing for one labelled image under `rule`.
pub fn spacing_for(rule: &SpacingRule, truth: &LandmarkSet) -> Result<f64> {
    match *rule {
        SpacingRule::Fixed(mm) => Ok(mm),
        SpacingRule::Pixel => Ok(1.0),
        SpacingRule::Wrist(a, b) => {
            let c = truth.coords();
            match (c.get(a), c.get(b)) {
                (Some(&p), Some(&q)) => hand_spacing(p, q),
                _ => Err(Error::contract(format!("wrist indices {a},{b} out of range"))),
            }
        }
    }
}

/// Evaluation summary for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domain: String,
    pub unit: &'static str,
    pub mre: f64,
    pub std: f64,
    /// `(threshold, percent)` pairs in increasing threshold order.
    pub sdr: Vec<(f64, f64)>,
    pub id_threshold: f64,
    pub id_rate: f64,
    /// Errors per image, per landmark.
    pub errors: Vec<Vec<f64>>,
}

impl EvalReport {
    /// Compares predictions with labels (both in original geometry).
    pub fn compute(spec: &DomainSpec, pairs: &[(LandmarkSet, LandmarkSet)]) -> Result<Self> {
        let errors = pairs
            .iter()
            .map(|(pred, truth)| radial_errors(pred, truth, spacing_for(&spec.spacing, truth)?))
            .collect::<Result<Vec<_>>>()?;
        let flat: Vec<f64> = errors.iter().flatten().copied().collect();
        let (mre, std) = mre(&flat)?;
        let sdr = spec
            .sdr_thresholds
            .iter()
            .map(|&t| Ok((t, sdr(&flat, t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            domain: spec.name.clone(),
            unit: match spec.spacing {
                SpacingRule::Pixel => "px",
                _ => "mm",
            },
            mre,
            std,
            sdr,
            id_threshold: spec.id_threshold,
            id_rate: self::sdr(&flat, spec.id_threshold)?,
            errors,
        })
    }

    /// One table row: `domain | MRE ± std | SDR... | ID`.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = String::new();
        for r in reports {
            let _ = write!(out, "{:<12} MRE {:>8.3} ± {:<8.3} {}", r.domain, r.mre, r.std, r.unit);
            for (t, p) in &r.sdr {
                let _ = write!(out, "  SDR@{t}{}: {p:6.2}%", r.unit);
            }
            let _ = writeln!(out, "  ID@{}{}: {:6.2}%", r.id_threshold, r.unit, r.id_rate);
        }
        out
    }

    pub fn key_values(&self) -> String {
        let d = &self.domain;
        let mut out = format!("{d}.unit={}\n{d}.mre={}\n{d}.std={}\n", self.unit, self.mre, self.std);
        for (t, p) in &self.sdr {
            let _ = writeln!(out, "{d}.sdr@{t}={p}");
        }
        let _ = writeln!(out, "{d}.id@{}={}", self.id_threshold, self.id_rate);
        let _ = writeln!(out, "{d}.images={}", self.errors.len());
        out
    }
}
