//! Labeled synthetic minutia sets: random identity templates and perturbed
//! impressions of them.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{wrap_angle, Minutia};
use crate::numeric::canonical_sum;
use crate::rng::{self, StreamRng};

/// Minimum spatial spacing between template minutiae.
pub const MIN_SPACING: f64 = 0.02;
/// Rejection-sampling budget per minutia.
pub const PLACEMENT_ATTEMPTS: usize = 1000;
/// Templates are placed inside `[MARGIN, 1 - MARGIN]²`.
const MARGIN: f64 = 0.1;
const DROPOUT_REDRAWS: usize = 64;

/// Impression noise model. Angles are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    pub rotation_deg: f64,
    pub translation: f64,
    pub jitter: f64,
    pub orientation_jitter_deg: f64,
    pub dropout: f64,
    pub spurious_min: usize,
    pub spurious_max: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            rotation_deg: 15.0,
            translation: 0.05,
            jitter: 0.01,
            orientation_jitter_deg: 5.0,
            dropout: 0.1,
            spurious_min: 0,
            spurious_max: 3,
        }
    }
}

impl PerturbSpec {
    /// No perturbation at all.
    pub fn none() -> Self {
        PerturbSpec {
            rotation_deg: 0.0,
            translation: 0.0,
            jitter: 0.0,
            orientation_jitter_deg: 0.0,
            dropout: 0.0,
            spurious_min: 0,
            spurious_max: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("jitter", self.jitter),
            ("orientation_jitter_deg", self.orientation_jitter_deg),
            ("dropout", self.dropout),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "perturb.{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.rotation_deg > 180.0 {
            return Err(Error::Validation(format!(
                "perturb.rotation_deg must be at most 180, got {}",
                self.rotation_deg
            )));
        }
        if self.dropout > 1.0 {
            return Err(Error::Validation(format!(
                "perturb.dropout must be a probability, got {}",
                self.dropout
            )));
        }
        if self.spurious_min > self.spurious_max {
            return Err(Error::Validation(format!(
                "perturb.spurious_min {} exceeds spurious_max {}",
                self.spurious_min, self.spurious_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub identities: usize,
    pub impressions: usize,
    pub min_minutiae: usize,
    pub max_minutiae: usize,
    pub perturb: PerturbSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            identities: 100,
            impressions: 4,
            min_minutiae: 24,
            max_minutiae: 40,
            perturb: PerturbSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Validation(format!(
                "identities must be at least 2, got {}",
                self.identities
            )));
        }
        if self.impressions < 2 {
            return Err(Error::Validation(format!(
                "impressions must be at least 2 so every identity has a positive pair, got {}",
                self.impressions
            )));
        }
        if self.min_minutiae < 8 {
            return Err(Error::Validation(format!(
                "min_minutiae must be at least 8, got {}",
                self.min_minutiae
            )));
        }
        if self.min_minutiae > self.max_minutiae {
            return Err(Error::Validation(format!(
                "min_minutiae {} exceeds max_minutiae {}",
                self.min_minutiae, self.max_minutiae
            )));
        }
        self.perturb.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTemplate {
    pub identity_id: u64,
    pub minutiae: Vec<Minutia>,
}

/// One fingerprint of the dataset. Serializes to the line format
/// `{"identity_id":..,"impression_id":..,"minutiae":[[x,y,d],..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub identity_id: u64,
    pub impression_id: u64,
    pub minutiae: Vec<Minutia>,
}

/// Samples a template: count uniform in `[min, max]`, positions by rejection
/// sampling with [`MIN_SPACING`], orientations uniform in `[0, 2π)`.
pub fn gen_identity(r: &mut StreamRng, spec: &DatasetSpec, identity_id: u64) -> Result<IdentityTemplate> {
    let count = r.random_range(spec.min_minutiae..=spec.max_minutiae);
    let mut minutiae: Vec<Minutia> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = r.random_range(MARGIN..1.0 - MARGIN);
            let y = r.random_range(MARGIN..1.0 - MARGIN);
            if minutiae.iter().all(|m| (m.x - x).hypot(m.y - y) >= MIN_SPACING) {
                let d = r.random_range(0.0..TAU);
                minutiae.push(Minutia { x, y, d });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Density {
                spacing: MIN_SPACING,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(IdentityTemplate { identity_id, minutiae })
}

/// Centroid of the positions, independent of minutia order.
pub fn centroid(minutiae: &[Minutia]) -> (f64, f64) {
    let n = minutiae.len().max(1) as f64;
    let mut xs: Vec<f64> = minutiae.iter().map(|m| m.x).collect();
    let mut ys: Vec<f64> = minutiae.iter().map(|m| m.y).collect();
    (canonical_sum(&mut xs) / n, canonical_sum(&mut ys) / n)
}

/// Rotates positions about `center` and shifts orientations by the same
/// angle.
pub fn rotate(minutiae: &mut [Minutia], center: (f64, f64), angle: f64) {
    let (s, c) = angle.sin_cos();
    for m in minutiae.iter_mut() {
        let (dx, dy) = (m.x - center.0, m.y - center.1);
        m.x = center.0 + c * dx - s * dy;
        m.y = center.1 + s * dx + c * dy;
        m.d = wrap_angle(m.d + angle);
    }
}

/// One perturbed impression of a template. Results are clamped to the unit
/// square and always keep at least two minutiae.
pub fn gen_impression(template: &IdentityTemplate, perturb: &PerturbSpec, r: &mut StreamRng) -> Vec<Minutia> {
    let mut out = template.minutiae.clone();
    if perturb.rotation_deg > 0.0 {
        let max = perturb.rotation_deg.to_radians();
        let angle = r.random_range(-max..=max);
        let center = centroid(&out);
        rotate(&mut out, center, angle);
    }
    if perturb.translation > 0.0 {
        let t = perturb.translation;
        let (tx, ty) = (r.random_range(-t..=t), r.random_range(-t..=t));
        for m in out.iter_mut() {
            m.x += tx;
            m.y += ty;
        }
    }
    if perturb.jitter > 0.0 {
        let normal = Normal::new(0.0, perturb.jitter).expect("validated sigma");
        for m in out.iter_mut() {
            m.x += normal.sample(r);
            m.y += normal.sample(r);
        }
    }
    if perturb.orientation_jitter_deg > 0.0 {
        let normal = Normal::new(0.0, perturb.orientation_jitter_deg.to_radians()).expect("validated sigma");
        for m in out.iter_mut() {
            m.d = wrap_angle(m.d + normal.sample(r));
        }
    }
    let spurious = if perturb.spurious_max > 0 {
        r.random_range(perturb.spurious_min..=perturb.spurious_max)
    } else {
        0
    };
    let mut kept = out.clone();
    if perturb.dropout > 0.0 {
        let mut attempt = 0;
        loop {
            kept = out
                .iter()
                .filter(|_| r.random::<f64>() >= perturb.dropout)
                .copied()
                .collect();
            if kept.len() + spurious >= 2 {
                break;
            }
            attempt += 1;
            if attempt == DROPOUT_REDRAWS {
                // certain dropout: keep the first two perturbed minutiae
                kept = out.iter().take(2).copied().collect();
                break;
            }
        }
    }
    for _ in 0..spurious {
        kept.push(Minutia {
            x: r.random_range(0.0..1.0),
            y: r.random_range(0.0..1.0),
            d: r.random_range(0.0..TAU),
        });
    }
    for m in kept.iter_mut() {
        m.x = m.x.clamp(0.0, 1.0);
        m.y = m.y.clamp(0.0, 1.0);
    }
    kept
}

/// `identities × impressions` records, identity-major, deterministic under
/// `spec.seed`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.identities * spec.impressions);
    for id in 0..spec.identities as u64 {
        let mut tr = rng::stream(spec.seed, rng::IDENTITY + id);
        let template = gen_identity(&mut tr, spec, id)?;
        let mut ir = rng::stream(spec.seed, rng::IMPRESSION + id);
        for imp in 0..spec.impressions as u64 {
            records.push(Record {
                identity_id: id,
                impression_id: imp,
                minutiae: gen_impression(&template, &spec.perturb, &mut ir),
            });
        }
    }
    Ok(records)
}

/// Indices of `records` grouped by identity, each group ordered by
/// impression id.
pub fn group_by_identity(records: &[Record]) -> BTreeMap<u64, Vec<usize>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.identity_id).or_default().push(i);
    }
    for idx in groups.values_mut() {
        idx.sort_by_key(|&i| (records[i].impression_id, i));
    }
    groups
}

/// Splits each identity's impressions: the first `first` (by impression id)
/// go left, the rest right.
pub fn split_per_identity(records: &[Record], first: usize) -> (Vec<Record>, Vec<Record>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for idx in group_by_identity(records).values() {
        for (rank, &i) in idx.iter().enumerate() {
            if rank < first {
                left.push(records[i].clone());
            } else {
                right.push(records[i].clone());
            }
        }
    }
    (left, right)
}
