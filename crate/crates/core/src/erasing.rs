//! Object erasing. For the most confident categories, the spatial attention
//! is collapsed into per-axis marginal profiles, thresholded to find the
//! dominant interval on each axis, and the rectangle spanned by the two
//! intervals is zeroed. The erased map is fused with the original channel
//! attention and pooled again. Training only.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::car::{fuse, pool_representation, AttentionPair, CategoryRepresentation};
use crate::{Error, Result};

static INVOCATIONS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of erasure passes (one per image that went through
/// category selection and region search). Inference must never move it.
pub fn invocation_count() -> u64 {
    INVOCATIONS.load(Ordering::SeqCst)
}

pub(crate) fn record_invocation() {
    INVOCATIONS.fetch_add(1, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub topk: usize,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        ErasureConfig {
            enabled: true,
            alpha: 0.5,
            topk: 3,
        }
    }
}

impl ErasureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "oe.alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.topk == 0 {
            return Err(Error::Config("oe.topk must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalProfile {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
}

/// Which axis of a spatial map had a flat (constant) marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateProfile {
    pub axis: char,
}

impl fmt::Display for DegenerateProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "flat marginal profile along {}", self.axis)
    }
}

impl std::error::Error for DegenerateProfile {}

/// Inclusive index intervals on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErasureRegion {
    pub x: (usize, usize),
    pub y: (usize, usize),
}

impl ErasureRegion {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x.0..=self.x.1).contains(&x) && (self.y.0..=self.y.1).contains(&y)
    }

    /// Flat `x * h + y` keep-mask: 0 inside the rectangle, 1 elsewhere.
    pub fn keep_mask(&self, w: usize, h: usize) -> Array1<f64> {
        Array1::from_shape_fn(w * h, |p| if self.contains(p / h, p % h) { 0.0 } else { 1.0 })
    }
}

fn min_max_normalize(v: ArrayView1<f64>, axis: char) -> std::result::Result<Array1<f64>, DegenerateProfile> {
    let lo = v.fold(f64::INFINITY, |m, &x| m.min(x));
    let hi = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if hi <= lo {
        return Err(DegenerateProfile { axis });
    }
    Ok(v.mapv(|x| (x - lo) / (hi - lo)))
}

/// Per-axis maxima of `sa` (indexed `[x, y]`), min-max normalized.
pub fn marginal_profiles(sa: ArrayView2<f64>) -> std::result::Result<MarginalProfile, DegenerateProfile> {
    let fold_max = |lane: ArrayView1<f64>| lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let over_y = sa.map_axis(Axis(1), fold_max);
    let over_x = sa.map_axis(Axis(0), fold_max);
    Ok(MarginalProfile {
        x: min_max_normalize(over_y.view(), 'x')?,
        y: min_max_normalize(over_x.view(), 'y')?,
    })
}

/// Picks the maximal run of `m >= alpha` that contains the global peak;
/// with several peaked runs the widest wins, then the leftmost.
pub fn select_interval(m: ArrayView1<f64>, alpha: f64) -> (usize, usize) {
    let peak = m.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < m.len() {
        if m[i] < alpha {
            i += 1;
            continue;
        }
        let start = i;
        let mut has_peak = false;
        while i < m.len() && m[i] >= alpha {
            has_peak |= m[i] >= peak;
            i += 1;
        }
        let run = (start, i - 1);
        if has_peak && best.is_none_or(|(a, b)| run.1 - run.0 > b - a) {
            best = Some(run);
        }
    }
    // A peak value below alpha can only happen for unnormalized input; fall
    // back to the first peak position.
    best.unwrap_or_else(|| {
        let at = m.iter().position(|&v| v >= peak).unwrap_or(0);
        (at, at)
    })
}

pub fn erase(sa: ArrayView2<f64>, region: &ErasureRegion) -> Array2<f64> {
    let mut out = sa.to_owned();
    for x in region.x.0..=region.x.1 {
        for y in region.y.0..=region.y.1 {
            out[[x, y]] = 0.0;
        }
    }
    out
}

/// Locates the dominant rectangle of one spatial attention map.
pub fn locate_region(
    sa: ArrayView2<f64>,
    alpha: f64,
) -> std::result::Result<ErasureRegion, DegenerateProfile> {
    let profile = marginal_profiles(sa)?;
    Ok(ErasureRegion {
        x: select_interval(profile.x.view(), alpha),
        y: select_interval(profile.y.view(), alpha),
    })
}

/// Indices of the `min(k, C)` highest scores, best first; ties go to the
/// lower index.
pub fn select_categories(scores: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order
}

/// One selected category's erasure: where, and what it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasedCategory {
    pub category: usize,
    pub region: ErasureRegion,
    pub erased_spatial: Array2<f64>,
    pub representation: CategoryRepresentation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErasureOutcome {
    pub erased: Vec<ErasedCategory>,
    /// Selected categories whose spatial map had a flat marginal.
    pub skipped: Vec<usize>,
}

pub fn oe_forward(
    fm: &FeatureMap,
    pairs: &[AttentionPair],
    scores: ArrayView1<f64>,
    cfg: &ErasureConfig,
) -> Result<ErasureOutcome> {
    if pairs.len() != scores.len() {
        return Err(Error::shape("attention pairs vs scores", scores.len(), pairs.len()));
    }
    record_invocation();
    let mut outcome = ErasureOutcome::default();
    for c in select_categories(scores, cfg.topk) {
        let pair = &pairs[c];
        match locate_region(pair.spatial.view(), cfg.alpha) {
            Ok(region) => {
                let erased_spatial = erase(pair.spatial.view(), &region);
                let fused = fuse(
                    fm,
                    &AttentionPair {
                        channel: pair.channel.clone(),
                        spatial: erased_spatial.clone(),
                    },
                )?;
                outcome.erased.push(ErasedCategory {
                    category: c,
                    region,
                    erased_spatial,
                    representation: pool_representation(&fused),
                });
            }
            Err(_) => outcome.skipped.push(c),
        }
    }
    Ok(outcome)
}
