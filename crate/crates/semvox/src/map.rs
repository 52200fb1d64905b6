//! Sparse block-hashed global voxel map with explicit three-state
//! classification (occupied / empty / unknown).

use std::collections::HashMap;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Total number of label ids, including the reserved empty label 0.
pub const NUM_LABELS: usize = 12;
/// Number of semantic (non-empty) labels.
pub const NUM_SEMANTIC_LABELS: usize = 11;

/// Hard cap on allocated blocks; exceeding it is a resource error.
const MAX_BLOCKS: usize = 1 << 24;

pub const LABEL_NAMES: [&str; NUM_LABELS] = [
    "empty", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tv",
    "furniture", "object",
];

/// RGB palette for the 11 semantic classes (index 0 is unused space, drawn grey).
pub const LABEL_PALETTE: [[u8; 3]; NUM_LABELS] = [
    [128, 128, 128],
    [255, 187, 120],
    [152, 223, 138],
    [196, 156, 148],
    [197, 176, 213],
    [214, 39, 40],
    [255, 152, 150],
    [44, 160, 44],
    [31, 119, 180],
    [227, 119, 194],
    [148, 103, 189],
    [140, 86, 75],
];

/// Semantic label id in `[0, 11]`; 0 is reserved for empty space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(u8);

impl LabelId {
    pub const EMPTY: LabelId = LabelId(0);
    pub const CEILING: LabelId = LabelId(1);
    pub const FLOOR: LabelId = LabelId(2);
    pub const WALL: LabelId = LabelId(3);
    pub const WINDOW: LabelId = LabelId(4);
    pub const CHAIR: LabelId = LabelId(5);
    pub const BED: LabelId = LabelId(6);
    pub const SOFA: LabelId = LabelId(7);
    pub const TABLE: LabelId = LabelId(8);
    pub const TV: LabelId = LabelId(9);
    pub const FURNITURE: LabelId = LabelId(10);
    pub const OBJECT: LabelId = LabelId(11);

    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < NUM_LABELS {
            Ok(LabelId(id))
        } else {
            Err(Error::Input(format!("label id {id} out of range")))
        }
    }

    #[inline]
    pub fn id(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn name(self) -> &'static str {
        LABEL_NAMES[self.0 as usize]
    }
}

impl Default for LabelId {
    fn default() -> Self {
        LabelId::EMPTY
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Voxels per block edge.
    pub block_side: usize,
    /// Lower log-odds clamp.
    pub logodds_min: f64,
    /// Upper log-odds clamp.
    pub logodds_max: f64,
    /// Maximum label confidence weight W_max.
    pub label_weight_max: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            block_side: 8,
            logodds_min: -5.0,
            logodds_max: 5.0,
            label_weight_max: 5.0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if self.block_side < 1 {
            return Err(Error::Config("block_side must be >= 1".into()));
        }
        if !(self.logodds_min < 0.0 && self.logodds_max > 0.0) {
            return Err(Error::Config(
                "log-odds clamp must satisfy logodds_min < 0 < logodds_max".into(),
            ));
        }
        if !(self.label_weight_max > 0.0) {
            return Err(Error::Config("label_weight_max must be positive".into()));
        }
        Ok(())
    }
}

/// Per-voxel fused state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCell {
    /// Fused occupancy in log-odds form.
    pub logodds: f64,
    /// Stored semantic label.
    pub label: LabelId,
    /// Label confidence weight in `[0, W_max]`.
    pub label_weight: f64,
    /// Frame counter of the last update that stamped this cell.
    pub timestamp: u32,
    /// Set once a depth measurement has updated this cell.
    pub sensor_observed: bool,
    /// Set once a completion prediction injected occupancy here.
    pub prediction_fused: bool,
}

impl Default for VoxelCell {
    fn default() -> Self {
        Self {
            logodds: 0.0,
            label: LabelId::EMPTY,
            label_weight: 0.0,
            timestamp: 0,
            sensor_observed: false,
            prediction_fused: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoxelState {
    Occupied,
    Empty,
    Unknown,
}

/// Three-state classification. A cell that has received neither a sensor
/// update nor a fused prediction is unknown; otherwise the strict sign of
/// the log-odds decides between occupied and empty.
#[inline]
pub fn classify_state(cell: &VoxelCell) -> VoxelState {
    if !cell.sensor_observed && !cell.prediction_fused {
        VoxelState::Unknown
    } else if cell.logodds > 0.0 {
        VoxelState::Occupied
    } else {
        VoxelState::Empty
    }
}

pub type VoxelIndex = [i32; 3];
pub type BlockCoord = [i32; 3];

/// Sparse global map: fixed-size voxel blocks allocated on demand, hashed by
/// integer block coordinate.
#[derive(Debug, Clone)]
pub struct GlobalMap {
    config: MapConfig,
    blocks: HashMap<BlockCoord, Vec<VoxelCell>>,
    frame_counter: u32,
}

impl GlobalMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            blocks: HashMap::new(),
            frame_counter: 0,
        })
    }

    #[inline]
    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    #[inline]
    pub fn frame_counter(&self) -> u32 {
        self.frame_counter
    }

    pub fn advance_frame(&mut self) -> u32 {
        self.frame_counter += 1;
        self.frame_counter
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn allocated_cell_count(&self) -> usize {
        let per_block = self.config.block_side.pow(3);
        self.blocks.len() * per_block
    }

    /// World point to voxel index: componentwise `floor(world / voxel_size)`.
    #[inline]
    pub fn voxel_of_point(&self, p: &Point3<f64>) -> VoxelIndex {
        let s = self.config.voxel_size;
        [
            (p.x / s).floor() as i32,
            (p.y / s).floor() as i32,
            (p.z / s).floor() as i32,
        ]
    }

    /// Center of the voxel at `index`: `(i + 0.5) * voxel_size` per axis.
    #[inline]
    pub fn voxel_center(&self, index: VoxelIndex) -> Point3<f64> {
        let s = self.config.voxel_size;
        Point3::new(
            (index[0] as f64 + 0.5) * s,
            (index[1] as f64 + 0.5) * s,
            (index[2] as f64 + 0.5) * s,
        )
    }

    #[inline]
    fn split_index(&self, index: VoxelIndex) -> (BlockCoord, usize) {
        let b = self.config.block_side as i32;
        let block = [
            index[0].div_euclid(b),
            index[1].div_euclid(b),
            index[2].div_euclid(b),
        ];
        let (lx, ly, lz) = (
            index[0].rem_euclid(b) as usize,
            index[1].rem_euclid(b) as usize,
            index[2].rem_euclid(b) as usize,
        );
        let side = self.config.block_side;
        (block, lx + side * (ly + side * lz))
    }

    #[inline]
    pub fn cell(&self, index: VoxelIndex) -> Option<&VoxelCell> {
        let (block, local) = self.split_index(index);
        self.blocks.get(&block).map(|cells| &cells[local])
    }

    #[inline]
    pub fn cell_mut(&mut self, index: VoxelIndex) -> Option<&mut VoxelCell> {
        let (block, local) = self.split_index(index);
        self.blocks.get_mut(&block).map(|cells| &mut cells[local])
    }

    /// Ensures the block containing `index` exists and returns the cell.
    pub fn get_or_allocate(&mut self, index: VoxelIndex) -> Result<&mut VoxelCell> {
        let (block, local) = self.split_index(index);
        if !self.blocks.contains_key(&block) {
            if self.blocks.len() >= MAX_BLOCKS {
                return Err(Error::MapCapacity(self.blocks.len()));
            }
            let n = self.config.block_side.pow(3);
            self.blocks.insert(block, vec![VoxelCell::default(); n]);
        }
        Ok(&mut self.blocks.get_mut(&block).unwrap()[local])
    }

    /// Raw pointer to a block's cell buffer, allocating the block if needed.
    /// The buffer never moves (blocks are created at full size and never
    /// resized), so the pointer stays valid across later allocations; callers
    /// must not hold it past any operation that drops blocks.
    pub(crate) fn block_cells_ptr(&mut self, coord: BlockCoord) -> Result<*mut VoxelCell> {
        if !self.blocks.contains_key(&coord) {
            if self.blocks.len() >= MAX_BLOCKS {
                return Err(Error::MapCapacity(self.blocks.len()));
            }
            let n = self.config.block_side.pow(3);
            self.blocks.insert(coord, vec![VoxelCell::default(); n]);
        }
        Ok(self.blocks.get_mut(&coord).unwrap().as_mut_ptr())
    }

    /// State of the cell at `index`; unallocated cells are unknown.
    #[inline]
    pub fn state(&self, index: VoxelIndex) -> VoxelState {
        match self.cell(index) {
            Some(cell) => classify_state(cell),
            None => VoxelState::Unknown,
        }
    }

    pub fn block(&self, coord: BlockCoord) -> Option<&[VoxelCell]> {
        self.blocks.get(&coord).map(|c| c.as_slice())
    }

    /// Iterates all allocated cells with their voxel indices.
    pub fn iter_cells(&self) -> impl Iterator<Item = (VoxelIndex, &VoxelCell)> {
        let side = self.config.block_side;
        self.blocks.iter().flat_map(move |(coord, cells)| {
            cells.iter().enumerate().map(move |(i, cell)| {
                let lx = (i % side) as i32;
                let ly = ((i / side) % side) as i32;
                let lz = (i / (side * side)) as i32;
                let b = side as i32;
                ([coord[0] * b + lx, coord[1] * b + ly, coord[2] * b + lz], cell)
            })
        })
    }

    /// Block coordinates sorted lexicographically, for deterministic exports.
    pub fn sorted_block_coords(&self) -> Vec<BlockCoord> {
        let mut coords: Vec<BlockCoord> = self.blocks.keys().copied().collect();
        coords.sort_unstable();
        coords
    }

    /// One labeled point per occupied cell, at the voxel center, sorted by
    /// voxel index so output is deterministic.
    pub fn extract_surface(&self) -> Vec<(Point3<f64>, LabelId)> {
        let mut occupied: Vec<(VoxelIndex, LabelId)> = self
            .iter_cells()
            .filter(|(_, cell)| classify_state(cell) == VoxelState::Occupied)
            .map(|(idx, cell)| (idx, cell.label))
            .collect();
        occupied.sort_unstable_by_key(|(idx, _)| *idx);
        occupied
            .into_iter()
            .map(|(idx, label)| (self.voxel_center(idx), label))
            .collect()
    }

    /// Order-independent checksum over all log-odds values; used to assert
    /// that an operation left occupancy untouched.
    pub fn logodds_checksum(&self) -> u64 {
        let mut acc: u64 = 0;
        for (idx, cell) in self.iter_cells() {
            let mut h = cell.logodds.to_bits();
            for c in idx {
                h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (c as u64);
            }
            acc = acc.wrapping_add(h.wrapping_mul(0x2545_f491_4f6c_dd1d));
        }
        acc
    }

    /// Rebuilds from raw parts; used by snapshot loading.
    pub(crate) fn from_parts(
        config: MapConfig,
        frame_counter: u32,
        blocks: HashMap<BlockCoord, Vec<VoxelCell>>,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.block_side.pow(3);
        for cells in blocks.values() {
            if cells.len() != n {
                return Err(Error::Format("block cell count mismatch".into()));
            }
        }
        Ok(Self {
            config,
            blocks,
            frame_counter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map() -> GlobalMap {
        GlobalMap::new(MapConfig::default()).unwrap()
    }

    #[test]
    fn fresh_cell_is_unknown() {
        assert_eq!(classify_state(&VoxelCell::default()), VoxelState::Unknown);
    }

    #[test]
    fn observed_positive_is_occupied() {
        let cell = VoxelCell {
            logodds: 2.0,
            sensor_observed: true,
            ..Default::default()
        };
        assert_eq!(classify_state(&cell), VoxelState::Occupied);
    }

    #[test]
    fn weak_prediction_is_occupied() {
        // log(0.51/0.49) ~ +0.04: the weak-observation injection must land
        // in the occupied state under the strict sign rule.
        let l = (0.51f64 / 0.49).ln();
        assert_relative_eq!(l, 0.04000533, epsilon = 1e-8);
        let cell = VoxelCell {
            logodds: l,
            prediction_fused: true,
            ..Default::default()
        };
        assert_eq!(classify_state(&cell), VoxelState::Occupied);
    }

    #[test]
    fn observed_nonpositive_is_empty() {
        for l in [-3.0, 0.0] {
            let cell = VoxelCell {
                logodds: l,
                sensor_observed: true,
                ..Default::default()
            };
            assert_eq!(classify_state(&cell), VoxelState::Empty);
        }
    }

    #[test]
    fn allocation_block_granularity() {
        let mut m = map();
        m.get_or_allocate([0, 0, 0]).unwrap();
        assert_eq!(m.block_count(), 1);
        m.get_or_allocate([7, 7, 7]).unwrap();
        assert_eq!(m.block_count(), 1, "same block must not allocate twice");
        m.get_or_allocate([8, 0, 0]).unwrap();
        assert_eq!(m.block_count(), 2, "index/8 arithmetic crosses a block");
    }

    #[test]
    fn allocation_idempotent_and_defaults_unknown() {
        let mut m = map();
        for _ in 0..10 {
            let cell = m.get_or_allocate([-3, 5, 100]).unwrap();
            assert_eq!(classify_state(cell), VoxelState::Unknown);
        }
        assert_eq!(m.block_count(), 1);
    }

    #[test]
    fn negative_index_block_split() {
        let mut m = map();
        m.get_or_allocate([-1, 0, 0]).unwrap();
        m.get_or_allocate([-8, 0, 0]).unwrap();
        assert_eq!(m.block_count(), 1, "[-8,-1] share block -1");
        m.get_or_allocate([-9, 0, 0]).unwrap();
        assert_eq!(m.block_count(), 2);
    }

    #[test]
    fn surface_extraction() {
        let mut m = map();
        assert!(m.extract_surface().is_empty());
        let cell = m.get_or_allocate([2, 0, 0]).unwrap();
        cell.logodds = 1.0;
        cell.sensor_observed = true;
        let cell = m.get_or_allocate([3, 0, 0]).unwrap();
        cell.logodds = -3.0;
        cell.sensor_observed = true;
        let surface = m.extract_surface();
        assert_eq!(surface.len(), 1, "empty cells emit nothing");
        assert_relative_eq!(surface[0].0.x, 0.125);
        assert_relative_eq!(surface[0].0.y, 0.025);
        assert_relative_eq!(surface[0].0.z, 0.025);
    }

    #[test]
    fn state_partition_covers_allocated_cells() {
        let mut m = map();
        for i in 0..40 {
            let cell = m.get_or_allocate([i, 0, 0]).unwrap();
            if i % 3 == 0 {
                cell.logodds = 1.0;
                cell.sensor_observed = true;
            } else if i % 3 == 1 {
                cell.logodds = -1.0;
                cell.sensor_observed = true;
            }
        }
        let mut counts = [0usize; 3];
        for (_, cell) in m.iter_cells() {
            match classify_state(cell) {
                VoxelState::Occupied => counts[0] += 1,
                VoxelState::Empty => counts[1] += 1,
                VoxelState::Unknown => counts[2] += 1,
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), m.allocated_cell_count());
    }

    #[test]
    fn config_validation() {
        let mut cfg = MapConfig::default();
        cfg.voxel_size = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MapConfig::default();
        cfg.logodds_min = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = MapConfig::default();
        cfg.label_weight_max = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn label_range() {
        assert!(LabelId::new(11).is_ok());
        assert!(LabelId::new(12).is_err());
        assert!(LabelId::new(0).unwrap().is_empty());
    }
}
