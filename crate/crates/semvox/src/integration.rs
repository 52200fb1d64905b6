//! State-aware fusion of completion results into the global map: weak
//! occupancy injection for unknown voxels and categorical label fusion with
//! a single stored label plus confidence weight.

use serde::{Deserialize, Serialize};

use crate::completion::CompletionResult;
use crate::map::{GlobalMap, LabelId, VoxelCell, VoxelState};
use crate::submap::{SubMapGrid, SUBMAP_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionPolicyConfig {
    /// Occupancy assigned to predicted-occupied voxels; a weak observation
    /// just above the uniform prior.
    pub p_fuse: f64,
}

impl Default for FusionPolicyConfig {
    fn default() -> Self {
        Self { p_fuse: 0.51 }
    }
}

impl FusionPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_fuse > 0.5 && self.p_fuse < 1.0) {
            return Err(Error::Config("p_fuse must be in (0.5, 1)".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn logodds_delta(&self) -> f64 {
        (self.p_fuse / (1.0 - self.p_fuse)).ln()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStats {
    pub labels_fused: u64,
    pub occupancy_fused: u64,
    pub discarded_empty_prediction: u64,
    pub discarded_empty_state: u64,
}

impl std::ops::AddAssign for FusionStats {
    fn add_assign(&mut self, rhs: Self) {
        self.labels_fused += rhs.labels_fused;
        self.occupancy_fused += rhs.occupancy_fused;
        self.discarded_empty_prediction += rhs.discarded_empty_prediction;
        self.discarded_empty_state += rhs.discarded_empty_state;
    }
}

/// Categorical label fusion. Agreement accumulates confidence; a stronger
/// disagreeing prediction replaces the label and keeps the residual weight;
/// a weaker one just erodes it. A cell with no label yet adopts the
/// prediction. The weight is clamped to `[0, w_max]`.
pub fn fuse_label(cell: &mut VoxelCell, predicted: LabelId, confidence: f64, w_max: f64) {
    debug_assert!(!predicted.is_empty());
    debug_assert!((0.0..=1.0).contains(&confidence));
    if cell.label.is_empty() {
        cell.label = predicted;
        cell.label_weight = confidence.clamp(0.0, w_max);
        return;
    }
    let w = cell.label_weight;
    if cell.label == predicted {
        cell.label_weight = (w + confidence).clamp(0.0, w_max);
    } else if w >= confidence {
        cell.label_weight = (w - confidence).clamp(0.0, w_max);
    } else {
        cell.label = predicted;
        cell.label_weight = (confidence - w).clamp(0.0, w_max);
    }
}

/// Fuses one completion result. Empty predictions and sensor-empty voxels
/// are discarded; labels fuse into unknown or occupied voxels; occupancy is
/// injected only into voxels that are unknown at call time, which also
/// stamps them as prediction-fused. Sensor-observed log-odds are never
/// touched.
pub fn fuse_submap(
    map: &mut GlobalMap,
    result: &CompletionResult,
    now: u32,
    cfg: &FusionPolicyConfig,
) -> Result<FusionStats> {
    cfg.validate()?;
    result.validate().map_err(|e| match e {
        Error::Protocol(msg) => Error::Input(msg),
        other => other,
    })?;
    let w_max = map.config().label_weight_max;
    let (lo_min, lo_max) = (map.config().logodds_min, map.config().logodds_max);
    let delta = cfg.logodds_delta();
    let base = result.anchor.base_voxel();
    let mut stats = FusionStats::default();

    for z in 0..SUBMAP_DIM {
        for y in 0..SUBMAP_DIM {
            for x in 0..SUBMAP_DIM {
                let i = SubMapGrid::linear(x, y, z);
                let predicted = result.labels[i];
                if predicted == 0 {
                    stats.discarded_empty_prediction += 1;
                    continue;
                }
                let idx = [base[0] + x as i32, base[1] + y as i32, base[2] + z as i32];
                let state = map.state(idx);
                if state == VoxelState::Empty {
                    stats.discarded_empty_state += 1;
                    continue;
                }
                let label = LabelId::new(predicted).expect("validated");
                let confidence = result.confidence[i] as f64;
                let cell = map.get_or_allocate(idx)?;
                fuse_label(cell, label, confidence, w_max);
                stats.labels_fused += 1;
                if state == VoxelState::Unknown {
                    cell.logodds = (cell.logodds + delta).clamp(lo_min, lo_max);
                    cell.prediction_fused = true;
                    cell.timestamp = now;
                    stats.occupancy_fused += 1;
                }
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{classify_state, MapConfig};
    use crate::submap::SubMapAnchor;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn cell(label: LabelId, weight: f64) -> VoxelCell {
        VoxelCell {
            label,
            label_weight: weight,
            ..Default::default()
        }
    }

    #[test]
    fn fuse_label_agreement() {
        let mut c = cell(LabelId::CHAIR, 0.4);
        fuse_label(&mut c, LabelId::CHAIR, 0.3, 5.0);
        assert_eq!(c.label, LabelId::CHAIR);
        assert_relative_eq!(c.label_weight, 0.7);
    }

    #[test]
    fn fuse_label_stronger_disagreement_replaces() {
        let mut c = cell(LabelId::CHAIR, 0.4);
        fuse_label(&mut c, LabelId::TABLE, 0.6, 5.0);
        assert_eq!(c.label, LabelId::TABLE);
        assert_relative_eq!(c.label_weight, 0.2);
    }

    #[test]
    fn fuse_label_weaker_disagreement_erodes() {
        let mut c = cell(LabelId::CHAIR, 0.4);
        fuse_label(&mut c, LabelId::TABLE, 0.3, 5.0);
        assert_eq!(c.label, LabelId::CHAIR);
        assert_relative_eq!(c.label_weight, 0.1);
    }

    #[test]
    fn fuse_label_tie_keeps_existing() {
        let mut c = cell(LabelId::CHAIR, 0.5);
        fuse_label(&mut c, LabelId::TABLE, 0.5, 5.0);
        assert_eq!(c.label, LabelId::CHAIR);
        assert_relative_eq!(c.label_weight, 0.0);
    }

    #[test]
    fn fuse_label_seeds_unlabeled_cell() {
        let mut c = VoxelCell::default();
        fuse_label(&mut c, LabelId::SOFA, 0.8, 5.0);
        assert_eq!(c.label, LabelId::SOFA);
        assert_relative_eq!(c.label_weight, 0.8);
    }

    #[test]
    fn fuse_label_weight_stays_bounded() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5000 {
            let mut c = VoxelCell::default();
            for _ in 0..20 {
                let label = LabelId::new(rng.gen_range(1..12)).unwrap();
                let w = rng.gen_range(0.0..=1.0);
                fuse_label(&mut c, label, w, 5.0);
                assert!(c.label_weight >= 0.0 && c.label_weight <= 5.0);
                assert!(!c.label.is_empty());
            }
        }
    }

    fn result_with(anchor: SubMapAnchor, voxels: &[(usize, usize, usize, u8, f32)]) -> CompletionResult {
        let mut r = CompletionResult::empty(anchor);
        for &(x, y, z, l, w) in voxels {
            let i = SubMapGrid::linear(x, y, z);
            r.labels[i] = l;
            r.confidence[i] = w;
        }
        r
    }

    #[test]
    fn fuse_submap_all_empty_is_noop() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        let anchor = SubMapAnchor::new([0, 0, 0]);
        let stats = fuse_submap(
            &mut map,
            &CompletionResult::empty(anchor),
            5,
            &FusionPolicyConfig::default(),
        )
        .unwrap();
        assert_eq!(stats.discarded_empty_prediction, 64 * 64 * 64);
        assert_eq!(stats.labels_fused, 0);
        assert_eq!(map.block_count(), 0, "empty predictions must not allocate");
    }

    #[test]
    fn fuse_submap_unknown_becomes_weakly_occupied() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        let anchor = SubMapAnchor::new([0, 0, 0]);
        let r = result_with(anchor, &[(3, 4, 5, LabelId::CHAIR.id(), 1.0)]);
        let stats = fuse_submap(&mut map, &r, 9, &FusionPolicyConfig::default()).unwrap();
        assert_eq!(stats.labels_fused, 1);
        assert_eq!(stats.occupancy_fused, 1);
        let cell = map.cell([3, 4, 5]).unwrap();
        assert_eq!(classify_state(cell), VoxelState::Occupied);
        assert_relative_eq!(cell.logodds, (0.51f64 / 0.49).ln(), epsilon = 1e-12);
        assert_relative_eq!(cell.logodds, 0.0400, epsilon = 1e-4);
        assert_eq!(cell.label, LabelId::CHAIR);
        assert_relative_eq!(cell.label_weight, 1.0);
        assert!(cell.prediction_fused);
        assert_eq!(cell.timestamp, 9);
    }

    #[test]
    fn fuse_submap_skips_sensor_empty() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        {
            let cell = map.get_or_allocate([3, 4, 5]).unwrap();
            cell.logodds = -2.0;
            cell.sensor_observed = true;
        }
        let before = *map.cell([3, 4, 5]).unwrap();
        let anchor = SubMapAnchor::new([0, 0, 0]);
        let r = result_with(anchor, &[(3, 4, 5, LabelId::CHAIR.id(), 1.0)]);
        let stats = fuse_submap(&mut map, &r, 9, &FusionPolicyConfig::default()).unwrap();
        assert_eq!(stats.discarded_empty_state, 1);
        assert_eq!(stats.labels_fused, 0);
        assert_eq!(*map.cell([3, 4, 5]).unwrap(), before);
    }

    #[test]
    fn fuse_submap_preserves_observed_logodds() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        {
            let cell = map.get_or_allocate([1, 1, 1]).unwrap();
            cell.logodds = 2.5;
            cell.sensor_observed = true;
        }
        let anchor = SubMapAnchor::new([0, 0, 0]);
        let r = result_with(anchor, &[(1, 1, 1, LabelId::TABLE.id(), 0.9)]);
        fuse_submap(&mut map, &r, 3, &FusionPolicyConfig::default()).unwrap();
        let cell = map.cell([1, 1, 1]).unwrap();
        assert_eq!(cell.logodds.to_bits(), 2.5f64.to_bits());
        assert_eq!(cell.label, LabelId::TABLE, "label still fuses into occupied");
        assert!(!cell.prediction_fused);
    }

    #[test]
    fn fuse_submap_occupancy_injected_once() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        let anchor = SubMapAnchor::new([0, 0, 0]);
        let r = result_with(anchor, &[(2, 2, 2, LabelId::BED.id(), 0.7)]);
        let cfg = FusionPolicyConfig::default();
        fuse_submap(&mut map, &r, 1, &cfg).unwrap();
        let l1 = map.cell([2, 2, 2]).unwrap().logodds;
        let s2 = fuse_submap(&mut map, &r, 2, &cfg).unwrap();
        assert_eq!(s2.occupancy_fused, 0, "already occupied, no second injection");
        assert_eq!(map.cell([2, 2, 2]).unwrap().logodds.to_bits(), l1.to_bits());
    }
}
