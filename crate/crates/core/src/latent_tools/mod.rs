//! Operations on the learned latent space: traversal, the two extra color controls
//! built by channel swapping, interpolation between materials, and the 2D manifold.
//!
//! Dimension indices in this module are 1-based, as they are shown to users.

mod manifold;

pub use manifold::{fit_ab, fit_manifold, GridSample, InverseResult, ManifoldConfig, ManifoldModel};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merl_io::MerlBrdf;
use crate::metrics::{compare_tables, MetricReport};
use crate::preprocess::{expand_slices, SliceTable, ValidityMask, N_SLICES, PLANE_SIZE};
use crate::vae_model::LatentCode;

pub const DEFAULT_TRAVERSAL_RANGE: [f64; 2] = [-3.0, 3.0];
pub const AUGMENTED_VERSION: u32 = 1;

/// Learned code followed by two color controls: a green-diffuse value that replaces
/// dimension 1 and a green-specular value that replaces the last learned dimension
/// when the green channel is decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCode(pub Vec<f64>);

#[derive(Serialize, Deserialize)]
struct AugmentedJson {
    version: u32,
    code: Vec<f64>,
}

impl AugmentedCode {
    /// Extends a learned code so that the green channel decodes like the red one.
    pub fn from_latent(code: &LatentCode) -> Self {
        let mut v = code.0.clone();
        v.push(code.0[0]);
        v.push(code.0[code.0.len() - 1]);
        AugmentedCode(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.0.len() != latent_dim + 2 {
            return Err(Error::Precondition(format!(
                "augmented code must have length {}, got {}",
                latent_dim + 2,
                self.0.len()
            )));
        }
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("augmented code has non-finite values".into()));
        }
        Ok(())
    }

    /// The learned part (`V1`).
    pub fn base(&self) -> LatentCode {
        LatentCode(self.0[..self.0.len() - 2].to_vec())
    }

    /// `V1` with the first and last learned dimensions replaced by the two color controls.
    pub fn green_code(&self) -> LatentCode {
        let n = self.0.len() - 2;
        let mut v = self.0[..n].to_vec();
        v[0] = self.0[n];
        v[n - 1] = self.0[n + 1];
        LatentCode(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&AugmentedJson {
            version: AUGMENTED_VERSION,
            code: self.0.clone(),
        })
        .expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: AugmentedJson = serde_json::from_str(s)?;
        if j.version != AUGMENTED_VERSION {
            return Err(Error::Format(format!(
                "unsupported augmented code version {}",
                j.version
            )));
        }
        Ok(AugmentedCode(j.code))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalSpec {
    pub base: LatentCode,
    /// 1-based dimension.
    pub dim: usize,
    pub range: [f64; 2],
    pub steps: usize,
}

impl TraversalSpec {
    pub fn new(base: LatentCode, dim: usize) -> Self {
        TraversalSpec {
            base,
            dim,
            range: DEFAULT_TRAVERSAL_RANGE,
            steps: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > self.base.dim() {
            return Err(Error::Precondition(format!(
                "dimension {} outside 1..={}",
                self.dim,
                self.base.dim()
            )));
        }
        if !(self.range[0] < self.range[1]) {
            return Err(Error::Precondition(format!(
                "traversal range [{}, {}] is empty",
                self.range[0], self.range[1]
            )));
        }
        if self.steps < 2 {
            return Err(Error::Precondition("traversal needs at least 2 steps".into()));
        }
        Ok(())
    }
}

/// Codes equal to `base` except that dimension `dim` sweeps the range linearly.
pub fn traverse(spec: &TraversalSpec) -> Result<Vec<LatentCode>> {
    spec.validate()?;
    let [a, b] = spec.range;
    let last = spec.steps - 1;
    Ok((0..spec.steps)
        .map(|j| {
            let mut c = spec.base.clone();
            c.0[spec.dim - 1] = if j == last {
                b
            } else {
                a + j as f64 * (b - a) / last as f64
            };
            c
        })
        .collect())
}

/// Decodes an augmented code on the retained slices: red and blue come from
/// `decode(V1)`, green is the red channel of `decode(V2)`.
pub fn decode_augmented_slices(checkpoint: &Checkpoint, v: &AugmentedCode) -> Result<SliceTable> {
    v.validate(checkpoint.latent_dim())?;
    let m1 = checkpoint.decode_slices(&v.base())?;
    let m2 = checkpoint.decode_slices(&v.green_code())?;
    Ok(swap_green(m1, &m2))
}

/// Replaces the green channel of `m1` with the red channel of `m2`.
pub fn swap_green(mut m1: SliceTable, m2: &SliceTable) -> SliceTable {
    let block = N_SLICES * PLANE_SIZE;
    m1.values[block..2 * block].copy_from_slice(&m2.values[..block]);
    m1
}

/// Full 90 x 90 x 180 table for an augmented code.
pub fn decode_augmented(
    checkpoint: &Checkpoint,
    v: &AugmentedCode,
    name: &str,
) -> Result<MerlBrdf> {
    expand_slices(&decode_augmented_slices(checkpoint, v)?, name)
}

/// Takes the 1-based dimensions in `dims_from_a` from `za`, the rest from `zb`.
pub fn interpolate_selective(
    za: &AugmentedCode,
    zb: &AugmentedCode,
    dims_from_a: &BTreeSet<usize>,
) -> Result<AugmentedCode> {
    if za.len() != zb.len() {
        return Err(Error::Precondition("codes differ in length".into()));
    }
    if let Some(d) = dims_from_a.iter().find(|d| **d == 0 || **d > za.len()) {
        return Err(Error::Precondition(format!(
            "dimension {d} outside 1..={}",
            za.len()
        )));
    }
    Ok(AugmentedCode(
        za.0.iter()
            .zip(&zb.0)
            .enumerate()
            .map(|(i, (a, b))| if dims_from_a.contains(&(i + 1)) { *a } else { *b })
            .collect(),
    ))
}

/// `(1 - t) * za + t * zb`.
pub fn interpolate_linear(za: &AugmentedCode, zb: &AugmentedCode, t: f64) -> Result<AugmentedCode> {
    if za.len() != zb.len() {
        return Err(Error::Precondition("codes differ in length".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t = {t} outside [0, 1]")));
    }
    Ok(AugmentedCode(
        za.0.iter()
            .zip(&zb.0)
            .map(|(a, b)| if a == b { *a } else { (1.0 - t) * a + t * b })
            .collect(),
    ))
}

/// Grid search over the two color controls that minimizes RelAE against `reference`.
/// The learned part of `base` is kept fixed.
pub fn tune_color_parameters(
    checkpoint: &Checkpoint,
    base: &LatentCode,
    reference: &MerlBrdf,
    mask: &ValidityMask,
    grid: &[f64],
) -> Result<(AugmentedCode, MetricReport)> {
    if grid.is_empty() {
        return Err(Error::Precondition("empty search grid".into()));
    }
    let m1 = checkpoint.decode_slices(base)?;
    let target = SliceTable::restrict(reference);
    let mut best: Option<(AugmentedCode, MetricReport)> = None;
    for &g9 in grid {
        for &g10 in grid {
            let mut v = AugmentedCode::from_latent(base);
            let n = base.dim();
            v.0[n] = g9;
            v.0[n + 1] = g10;
            let m2 = checkpoint.decode_slices(&v.green_code())?;
            let rec = swap_green(m1.clone(), &m2);
            let report = compare_tables(&reference.name, &rec, &target, mask)?;
            if best.as_ref().is_none_or(|(_, b)| report.rel_ae_ratio < b.rel_ae_ratio) {
                best = Some((v, report));
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: &[f64]) -> LatentCode {
        LatentCode(v.to_vec())
    }

    #[test]
    fn traversal_examples() {
        let base = code(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let mut spec = TraversalSpec::new(base.clone(), 3);
        spec.steps = 5;
        let codes = traverse(&spec).unwrap();
        let swept: Vec<f64> = codes.iter().map(|c| c.0[2]).collect();
        assert_eq!(swept, vec![-3.0, -1.5, 0.0, 1.5, 3.0]);
        for c in &codes {
            for i in (0..8).filter(|i| *i != 2) {
                assert_eq!(c.0[i].to_bits(), base.0[i].to_bits());
            }
        }
        spec.steps = 2;
        spec.range = [-0.7, 1.3];
        let ends = traverse(&spec).unwrap();
        assert_eq!((ends[0].0[2], ends[1].0[2]), (-0.7, 1.3));
    }

    #[test]
    fn traversal_rejects_bad_specs() {
        let base = code(&[0.0; 8]);
        for (dim, range, steps) in [(0, [-1.0, 1.0], 3), (9, [-1.0, 1.0], 3), (1, [1.0, 1.0], 3), (1, [-1.0, 1.0], 1)] {
            let spec = TraversalSpec { base: base.clone(), dim, range, steps };
            assert!(traverse(&spec).is_err());
        }
    }

    #[test]
    fn augmented_parts() {
        let v = AugmentedCode((1..=10).map(f64::from).collect());
        assert_eq!(v.base().0, vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(v.green_code().0, vec![9., 2., 3., 4., 5., 6., 7., 10.]);
        let plain = AugmentedCode::from_latent(&v.base());
        assert_eq!(plain.green_code(), plain.base());
        assert!(AugmentedCode(vec![0.0; 9]).validate(8).is_err());
        assert!(AugmentedCode(vec![f64::NAN; 10]).validate(8).is_err());
    }

    #[test]
    fn augmented_json() {
        let v = AugmentedCode(vec![0.5; 10]);
        let s = v.to_json();
        assert!(s.contains("\"version\":1"));
        assert_eq!(AugmentedCode::from_json(&s).unwrap(), v);
        assert!(AugmentedCode::from_json(r#"{"version":2,"code":[]}"#).is_err());
    }

    #[test]
    fn interpolation_extremes() {
        let a = AugmentedCode((0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
        let b = AugmentedCode((0..10).map(|i| 2.0 - i as f64 * 0.17).collect());
        let all: BTreeSet<usize> = (1..=10).collect();
        assert_eq!(interpolate_selective(&a, &b, &all).unwrap(), a);
        assert_eq!(interpolate_selective(&a, &b, &BTreeSet::new()).unwrap(), b);
        assert_eq!(interpolate_linear(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_linear(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate_linear(&a, &b, 0.5).unwrap();
        for i in 0..10 {
            assert!((mid.0[i] - 0.5 * (a.0[i] + b.0[i])).abs() < 1e-15);
        }
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert_eq!(interpolate_linear(&a, &a, t).unwrap(), a);
        }
        let color: BTreeSet<usize> = [1, 8, 9, 10].into();
        let mixed = interpolate_selective(&a, &b, &color).unwrap();
        assert_eq!(mixed.0[0], a.0[0]);
        assert_eq!(mixed.0[1], b.0[1]);
        assert!(interpolate_selective(&a, &b, &[11].into()).is_err());
        assert!(interpolate_linear(&a, &b, 1.5).is_err());
    }
}
