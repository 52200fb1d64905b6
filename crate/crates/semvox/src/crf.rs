//! Mean-field inference on a fully connected CRF over voxel positions,
//! used to regularize the labels of occupied voxels across sub-map borders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::map::{classify_state, GlobalMap, LabelId, VoxelIndex, VoxelState, NUM_SEMANTIC_LABELS};
use crate::submap::{SubMapAnchor, SUBMAP_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    /// Floor probability for the stored label.
    pub p_min: f64,
    /// Pairwise (Potts) message weight; the positional kernel is normalized
    /// to unit mass, so this is the total influence of the neighborhood.
    pub pairwise_weight: f64,
    /// Positional kernel bandwidth, in voxels.
    pub theta_pos: f64,
    /// Mean-field iterations.
    pub iterations: u32,
    /// Kernel truncation radius, in voxels (per axis).
    pub neighborhood_radius: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            p_min: 0.1,
            pairwise_weight: 5.0,
            theta_pos: 1.5,
            iterations: 5,
            neighborhood_radius: 4.5,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min < 1.0) {
            return Err(Error::Config("p_min must be in (0, 1)".into()));
        }
        if !(self.theta_pos > 0.0) {
            return Err(Error::Config("theta_pos must be positive".into()));
        }
        if !(self.neighborhood_radius >= 0.0) {
            return Err(Error::Config("neighborhood_radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// A voxel participating in regularization: occupied with a non-empty label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionVoxel {
    pub index: VoxelIndex,
    pub label: LabelId,
    pub weight: f64,
}

/// Collects the occupied, labeled voxels of the given anchors.
pub fn collect_region(map: &GlobalMap, anchors: &[SubMapAnchor]) -> Vec<RegionVoxel> {
    let mut seen = std::collections::HashSet::new();
    let mut voxels = Vec::new();
    for anchor in anchors {
        if !seen.insert(anchor.lattice) {
            continue;
        }
        let base = anchor.base_voxel();
        for z in 0..SUBMAP_DIM as i32 {
            for y in 0..SUBMAP_DIM as i32 {
                for x in 0..SUBMAP_DIM as i32 {
                    let idx = [base[0] + x, base[1] + y, base[2] + z];
                    if let Some(cell) = map.cell(idx) {
                        if classify_state(cell) == VoxelState::Occupied && !cell.label.is_empty() {
                            voxels.push(RegionVoxel {
                                index: idx,
                                label: cell.label,
                                weight: cell.label_weight,
                            });
                        }
                    }
                }
            }
        }
    }
    voxels.sort_unstable_by_key(|v| v.index);
    voxels
}

/// Unary distribution of one voxel: the stored label gets
/// `max(W / W_max, p_min)`, the remainder is spread uniformly over the
/// other ten semantic labels.
pub fn unary_distribution(
    label: LabelId,
    weight: f64,
    w_max: f64,
    cfg: &CrfConfig,
) -> [f64; NUM_SEMANTIC_LABELS] {
    debug_assert!(!label.is_empty());
    let p = (weight / w_max).clamp(0.0, 1.0).max(cfg.p_min);
    let rest = (1.0 - p) / (NUM_SEMANTIC_LABELS - 1) as f64;
    let mut dist = [rest; NUM_SEMANTIC_LABELS];
    dist[label.id() as usize - 1] = p;
    dist
}

/// Per-voxel unary label distributions over the anchors' occupied voxels.
pub fn unary_from_map(
    map: &GlobalMap,
    anchors: &[SubMapAnchor],
    cfg: &CrfConfig,
) -> (Vec<RegionVoxel>, Vec<[f64; NUM_SEMANTIC_LABELS]>) {
    let voxels = collect_region(map, anchors);
    let w_max = map.config().label_weight_max;
    let dists = voxels
        .iter()
        .map(|v| unary_distribution(v.label, v.weight, w_max, cfg))
        .collect();
    (voxels, dists)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CrfStats {
    pub voxels: u64,
    pub relabeled: u64,
}

/// Runs mean-field updates with the unary from the stored labels, a Potts
/// compatibility and a truncated Gaussian positional kernel, then writes
/// back `label = argmax q` and `W = clamp(q_max * W_max, 0, W_max)`.
/// Occupancy, flags and timestamps are untouched.
pub fn regularize(map: &mut GlobalMap, anchors: &[SubMapAnchor], cfg: &CrfConfig) -> Result<CrfStats> {
    cfg.validate()?;
    let (voxels, unary) = unary_from_map(map, anchors, cfg);
    let mut stats = CrfStats {
        voxels: voxels.len() as u64,
        relabeled: 0,
    };
    if cfg.iterations == 0 || voxels.is_empty() {
        return Ok(stats);
    }
    let q = mean_field(&voxels, &unary, cfg);

    let w_max = map.config().label_weight_max;
    for (v, qv) in voxels.iter().zip(q.iter()) {
        let (best, q_max) = qv
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, p)| {
                if p > acc.1 {
                    (i, p)
                } else {
                    acc
                }
            });
        let new_label = LabelId::new(best as u8 + 1).expect("semantic label");
        let cell = map.cell_mut(v.index).expect("region voxel allocated");
        if cell.label != new_label {
            stats.relabeled += 1;
        }
        cell.label = new_label;
        cell.label_weight = (q_max * w_max).clamp(0.0, w_max);
    }
    Ok(stats)
}

/// Mean-field iterations, exposed for oracle comparison in tests. Returns
/// the final q distributions in voxel order.
pub fn mean_field(
    voxels: &[RegionVoxel],
    unary: &[[f64; NUM_SEMANTIC_LABELS]],
    cfg: &CrfConfig,
) -> Vec<[f64; NUM_SEMANTIC_LABELS]> {
    let n = voxels.len();
    let radius = cfg.neighborhood_radius.floor() as i64;

    // Dense scratch grid over the region's bounding box, with the Gaussian
    // applied as three separable 1D passes (per-axis truncation).
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for v in voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(v.index[a] as i64);
            hi[a] = hi[a].max(v.index[a] as i64);
        }
    }
    let dims = [
        (hi[0] - lo[0] + 1) as usize,
        (hi[1] - lo[1] + 1) as usize,
        (hi[2] - lo[2] + 1) as usize,
    ];
    let ncell = dims[0] * dims[1] * dims[2];
    let lin = |idx: &VoxelIndex| -> usize {
        let x = (idx[0] as i64 - lo[0]) as usize;
        let y = (idx[1] as i64 - lo[1]) as usize;
        let z = (idx[2] as i64 - lo[2]) as usize;
        x + dims[0] * (y + dims[1] * z)
    };
    let cells: Vec<usize> = voxels.iter().map(|v| lin(&v.index)).collect();

    // Per-axis taps normalized to unit sum, so the separable 3D kernel has
    // unit mass and `pairwise_weight` sets the absolute message scale.
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * cfg.theta_pos * cfg.theta_pos)).exp())
        .collect();
    let tap_sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= tap_sum;
    }
    let self_weight = taps[radius as usize].powi(3);

    const L: usize = NUM_SEMANTIC_LABELS;
    let mut q: Vec<[f64; L]> = unary.to_vec();
    let mut field = vec![[0.0f64; L]; ncell];
    let mut scratch = vec![[0.0f64; L]; ncell];

    for _ in 0..cfg.iterations {
        for f in field.iter_mut() {
            *f = [0.0; L];
        }
        for (qi, &c) in q.iter().zip(cells.iter()) {
            field[c] = *qi;
        }
        // Separable convolution: x, then y, then z.
        convolve_axis(&field, &mut scratch, dims, 0, &taps, radius);
        convolve_axis(&scratch, &mut field, dims, 1, &taps, radius);
        convolve_axis(&field, &mut scratch, dims, 2, &taps, radius);

        for i in 0..n {
            let conv = &scratch[cells[i]];
            let mut logits = [0.0f64; L];
            let mut max_logit = f64::NEG_INFINITY;
            for l in 0..L {
                // Self-contribution removed: the zero-offset tap product.
                let message = cfg.pairwise_weight * (conv[l] - self_weight * q[i][l]);
                logits[l] = unary[i][l].max(1e-300).ln() + message;
                max_logit = max_logit.max(logits[l]);
            }
            let mut norm = 0.0;
            for l in 0..L {
                logits[l] = (logits[l] - max_logit).exp();
                norm += logits[l];
            }
            for l in 0..L {
                q[i][l] = logits[l] / norm;
            }
        }
    }
    q
}

fn convolve_axis(
    input: &[[f64; NUM_SEMANTIC_LABELS]],
    output: &mut [[f64; NUM_SEMANTIC_LABELS]],
    dims: [usize; 3],
    axis: usize,
    taps: &[f64],
    radius: i64,
) {
    const L: usize = NUM_SEMANTIC_LABELS;
    let stride = match axis {
        0 => 1usize,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis];
    let plane = dims[0] * dims[1] * dims[2] / len;

    // Iterate over all 1D lines along `axis`.
    let lines: Vec<usize> = (0..plane)
        .map(|p| match axis {
            0 => {
                let y = p % dims[1];
                let z = p / dims[1];
                dims[0] * (y + dims[1] * z)
            }
            1 => {
                let x = p % dims[0];
                let z = p / dims[0];
                x + dims[0] * dims[1] * z
            }
            _ => p,
        })
        .collect();

    let out_ptr = std::sync::atomic::AtomicPtr::new(output.as_mut_ptr());
    lines.par_iter().for_each(|&start| {
        let out = out_ptr.load(std::sync::atomic::Ordering::Relaxed);
        for i in 0..len {
            let mut acc = [0.0f64; L];
            let t_lo = (-(i as i64)).max(-radius);
            let t_hi = ((len - 1 - i) as i64).min(radius);
            for t in t_lo..=t_hi {
                let w = taps[(t + radius) as usize];
                let src = &input[start + (i as i64 + t) as usize * stride];
                for l in 0..L {
                    acc[l] += w * src[l];
                }
            }
            // Disjoint writes per line; safe to go through the raw pointer.
            unsafe {
                *out.add(start + i * stride) = acc;
            }
        }
    });
}
