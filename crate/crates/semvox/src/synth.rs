//! Procedural labeled test scenes: axis-aligned primitives, ground-truth
//! voxelization, analytic depth rendering, camera trajectories and training
//! pair export.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::map::{GlobalMap, LabelId, NUM_LABELS};
use crate::sensor::{CameraIntrinsics, DepthImage, Pose, NEAR_CLIP};
use crate::submap::{extract_submap, SubMapAnchor, SUBMAP_CELLS, SUBMAP_DIM};
use crate::{Error, Result};

/// Ground-truth voxel edge length, meters.
pub const GT_VOXEL_SIZE: f64 = 0.05;

/// Axis-aligned labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub label: LabelId,
}

impl ScenePrimitive {
    pub fn new(min: [f64; 3], max: [f64; 3], label: LabelId) -> Result<Self> {
        if label.is_empty() {
            return Err(Error::Config("primitive label must be non-empty".into()));
        }
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::Config("primitive extents must be positive".into()));
        }
        Ok(Self { min, max, label })
    }

    #[inline]
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Slab-method ray intersection; returns the entry/exit parameters.
    fn ray_range(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] <= self.min[a] || origin[a] >= self.max[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let mut lo = (self.min[a] - origin[a]) * inv;
                let mut hi = (self.max[a] - origin[a]) * inv;
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// Room generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomSpec {
    /// Interior extent, meters, per axis (x = width, y = height, z = depth).
    pub dims: [f64; 3],
    /// Inclusive range of furniture pieces to place.
    pub furniture_min: usize,
    pub furniture_max: usize,
    /// Shell (floor / ceiling / wall) thickness, meters.
    pub shell_thickness: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            dims: [4.0, 2.5, 4.0],
            furniture_min: 3,
            furniture_max: 8,
            shell_thickness: 0.1,
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        for d in self.dims {
            if !(2.0..=8.0).contains(&d) {
                return Err(Error::Config("room sides must be within [2, 8] m".into()));
            }
        }
        if self.furniture_min > self.furniture_max {
            return Err(Error::Config("furniture range is inverted".into()));
        }
        if !(self.shell_thickness > 0.0) {
            return Err(Error::Config("shell_thickness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    /// Outer AABB of the scene, meters.
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub primitives: Vec<ScenePrimitive>,
}

impl SyntheticScene {
    pub fn centroid(&self) -> Point3<f64> {
        Point3::new(
            (self.bounds_min[0] + self.bounds_max[0]) / 2.0,
            (self.bounds_min[1] + self.bounds_max[1]) / 2.0,
            (self.bounds_min[2] + self.bounds_max[2]) / 2.0,
        )
    }
}

/// Dense labeled voxelization of a scene at `GT_VOXEL_SIZE`, grid-aligned to
/// the world lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthVolume {
    /// World position of the volume's minimum corner, a lattice multiple of
    /// the voxel size.
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Label bytes, x-fastest.
    pub labels: Vec<u8>,
}

impl GroundTruthVolume {
    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn label_at(&self, idx: [usize; 3]) -> LabelId {
        LabelId::new(self.labels[self.linear(idx)]).expect("stored labels are valid")
    }

    /// Voxel index of the volume origin on the global lattice.
    pub fn origin_voxel(&self, voxel_size: f64) -> [i32; 3] {
        [
            (self.origin[0] / voxel_size).round() as i32,
            (self.origin[1] / voxel_size).round() as i32,
            (self.origin[2] / voxel_size).round() as i32,
        ]
    }

    /// Checks that a map at `voxel_size` shares this volume's lattice.
    pub fn check_alignment(&self, voxel_size: f64) -> Result<()> {
        if (voxel_size - self.voxel_size).abs() > 1e-9 {
            return Err(Error::Misaligned(format!(
                "voxel size {} does not match ground truth {}",
                voxel_size, self.voxel_size
            )));
        }
        for o in self.origin {
            let cells = o / voxel_size;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::Misaligned(format!(
                    "origin component {o} is not a voxel multiple"
                )));
            }
        }
        Ok(())
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// 64^3 label crop at a sub-map anchor; outside the extent reads empty.
    pub fn crop_labels(&self, anchor: &SubMapAnchor) -> Vec<u8> {
        let base = anchor.base_voxel();
        let origin = self.origin_voxel(self.voxel_size);
        let mut out = vec![0u8; SUBMAP_CELLS];
        for z in 0..SUBMAP_DIM {
            for y in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    let g = [
                        base[0] + x as i32 - origin[0],
                        base[1] + y as i32 - origin[1],
                        base[2] + z as i32 - origin[2],
                    ];
                    if (0..3).all(|a| g[a] >= 0 && (g[a] as usize) < self.dims[a]) {
                        out[x + SUBMAP_DIM * (y + SUBMAP_DIM * z)] =
                            self.labels[self.linear([g[0] as usize, g[1] as usize, g[2] as usize])];
                    }
                }
            }
        }
        out
    }

    /// Anchors of every lattice cell overlapping the volume extent.
    pub fn covering_anchors(&self) -> Vec<SubMapAnchor> {
        let origin = self.origin_voxel(self.voxel_size);
        let lo = SubMapAnchor::containing_voxel(origin).lattice;
        let hi = SubMapAnchor::containing_voxel([
            origin[0] + self.dims[0] as i32 - 1,
            origin[1] + self.dims[1] as i32 - 1,
            origin[2] + self.dims[2] as i32 - 1,
        ])
        .lattice;
        let mut anchors = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    anchors.push(SubMapAnchor::new([x, y, z]));
                }
            }
        }
        anchors
    }
}

#[inline]
fn snap(v: f64) -> f64 {
    (v / GT_VOXEL_SIZE).round() * GT_VOXEL_SIZE
}

/// Voxelizes primitives over their joint AABB: a voxel takes the label of
/// the last primitive containing its center.
pub fn voxelize(scene: &SyntheticScene) -> Result<GroundTruthVolume> {
    if scene.primitives.is_empty() {
        return Err(Error::Config("scene has no primitives".into()));
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in &scene.primitives {
        for a in 0..3 {
            min[a] = min[a].min(p.min[a]);
            max[a] = max[a].max(p.max[a]);
        }
    }
    let origin = [
        (min[0] / GT_VOXEL_SIZE).floor() * GT_VOXEL_SIZE,
        (min[1] / GT_VOXEL_SIZE).floor() * GT_VOXEL_SIZE,
        (min[2] / GT_VOXEL_SIZE).floor() * GT_VOXEL_SIZE,
    ];
    let dims = [
        ((max[0] - origin[0]) / GT_VOXEL_SIZE).ceil() as usize,
        ((max[1] - origin[1]) / GT_VOXEL_SIZE).ceil() as usize,
        ((max[2] - origin[2]) / GT_VOXEL_SIZE).ceil() as usize,
    ];
    let mut labels = vec![0u8; dims[0] * dims[1] * dims[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = Point3::new(
                    origin[0] + (x as f64 + 0.5) * GT_VOXEL_SIZE,
                    origin[1] + (y as f64 + 0.5) * GT_VOXEL_SIZE,
                    origin[2] + (z as f64 + 0.5) * GT_VOXEL_SIZE,
                );
                let mut label = 0u8;
                for p in &scene.primitives {
                    if p.contains(&c) {
                        label = p.label.id();
                    }
                }
                labels[x + dims[0] * (y + dims[1] * z)] = label;
            }
        }
    }
    Ok(GroundTruthVolume {
        origin,
        dims,
        voxel_size: GT_VOXEL_SIZE,
        labels,
    })
}

/// Footprint sizes and builder for each furniture archetype.
fn furniture(kind: usize, x: f64, z: f64, floor_top: f64) -> Vec<ScenePrimitive> {
    let b = |min: [f64; 3], max: [f64; 3], l: LabelId| ScenePrimitive::new(min, max, l).unwrap();
    let f = floor_top;
    match kind {
        // Table: four legs under a top slab, leaving occluded under-space.
        0 => {
            let (w, d) = (1.0, 0.6);
            let mut parts = vec![b(
                [x, f + 0.6, z],
                [x + w, f + 0.7, z + d],
                LabelId::TABLE,
            )];
            for (lx, lz) in [(x, z), (x + w - 0.1, z), (x, z + d - 0.1), (x + w - 0.1, z + d - 0.1)] {
                parts.push(b([lx, f, lz], [lx + 0.1, f + 0.6, lz + 0.1], LabelId::TABLE));
            }
            parts
        }
        // Chair: seat, legs, backrest.
        1 => {
            let s = 0.4;
            let mut parts = vec![b([x, f + 0.35, z], [x + s, f + 0.45, z + s], LabelId::CHAIR)];
            for (lx, lz) in [(x, z), (x + s - 0.1, z), (x, z + s - 0.1), (x + s - 0.1, z + s - 0.1)] {
                parts.push(b([lx, f, lz], [lx + 0.1, f + 0.35, lz + 0.1], LabelId::CHAIR));
            }
            parts.push(b([x, f + 0.45, z], [x + s, f + 0.9, z + 0.1], LabelId::CHAIR));
            parts
        }
        // Sofa: base plus backrest.
        2 => vec![
            b([x, f, z], [x + 1.6, f + 0.4, z + 0.8], LabelId::SOFA),
            b([x, f + 0.4, z], [x + 1.6, f + 0.8, z + 0.25], LabelId::SOFA),
        ],
        // Bed: low solid box.
        3 => vec![b([x, f, z], [x + 0.9, f + 0.4, z + 1.9], LabelId::BED)],
        // Cabinet: tall solid box.
        4 => vec![b([x, f, z], [x + 0.5, f + 1.2, z + 0.4], LabelId::FURNITURE)],
        // TV on a low stand.
        _ => vec![
            b([x, f, z], [x + 0.9, f + 0.3, z + 0.35], LabelId::FURNITURE),
            b([x + 0.1, f + 0.3, z + 0.1], [x + 0.8, f + 0.75, z + 0.2], LabelId::TV),
        ],
    }
}

fn footprint(kind: usize) -> (f64, f64) {
    match kind {
        0 => (1.0, 0.6),
        1 => (0.4, 0.4),
        2 => (1.6, 0.8),
        3 => (0.9, 1.9),
        4 => (0.5, 0.4),
        _ => (0.9, 0.35),
    }
}

/// Procedurally builds a furnished room and its ground-truth voxelization.
/// Deterministic in `(seed, spec)`.
pub fn build_scene(seed: u64, spec: &RoomSpec) -> Result<(SyntheticScene, GroundTruthVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h, d] = [snap(spec.dims[0]), snap(spec.dims[1]), snap(spec.dims[2])];
    let t = snap(spec.shell_thickness).max(GT_VOXEL_SIZE);
    let mut prims = Vec::new();
    let b = |min: [f64; 3], max: [f64; 3], l: LabelId| ScenePrimitive::new(min, max, l).unwrap();
    // Shell: floor, ceiling, four walls, one window patch.
    prims.push(b([0.0, 0.0, 0.0], [w, t, d], LabelId::FLOOR));
    prims.push(b([0.0, h - t, 0.0], [w, h, d], LabelId::CEILING));
    prims.push(b([0.0, 0.0, 0.0], [t, h, d], LabelId::WALL));
    prims.push(b([w - t, 0.0, 0.0], [w, h, d], LabelId::WALL));
    prims.push(b([0.0, 0.0, 0.0], [w, h, t], LabelId::WALL));
    prims.push(b([0.0, 0.0, d - t], [w, h, d], LabelId::WALL));
    prims.push(b(
        [snap(w * 0.3), snap(h * 0.4), 0.0],
        [snap(w * 0.7), snap(h * 0.8), t],
        LabelId::WINDOW,
    ));

    let n = rng.gen_range(spec.furniture_min..=spec.furniture_max);
    let margin = 0.2;
    let mut placed: Vec<[f64; 4]> = Vec::new(); // footprint boxes [x0, z0, x1, z1]
    let mut count = 0;
    for _ in 0..n {
        let mut done = false;
        for _ in 0..50 {
            // Re-draw the kind per attempt so a piece too large for the
            // remaining space falls back to something smaller.
            let kind = rng.gen_range(0..6usize);
            let (fw, fd) = footprint(kind);
            let lo_x = t + margin;
            let hi_x = w - t - margin - fw;
            let lo_z = t + margin;
            let hi_z = d - t - margin - fd;
            if hi_x <= lo_x || hi_z <= lo_z {
                continue;
            }
            let x = snap(rng.gen_range(lo_x..hi_x));
            let z = snap(rng.gen_range(lo_z..hi_z));
            let candidate = [x - margin, z - margin, x + fw + margin, z + fd + margin];
            let overlaps = placed.iter().any(|p| {
                candidate[0] < p[2] && p[0] < candidate[2] && candidate[1] < p[3] && p[1] < candidate[3]
            });
            if overlaps {
                continue;
            }
            placed.push(candidate);
            prims.extend(furniture(kind, x, z, t));
            count += 1;
            done = true;
            break;
        }
        let _ = done;
    }
    if count < spec.furniture_min {
        return Err(Error::Config(format!(
            "could only place {count} of {} furniture pieces",
            spec.furniture_min
        )));
    }

    let scene = SyntheticScene {
        seed,
        bounds_min: [0.0, 0.0, 0.0],
        bounds_max: [w, h, d],
        primitives: prims,
    };
    let gt = voxelize(&scene)?;
    Ok((scene, gt))
}

/// Exact analytic depth render: per-pixel nearest primitive hit, measured as
/// distance along the camera z-axis (z-depth). No hit encodes 0.
pub fn render_depth(scene: &SyntheticScene, pose: &Pose, intr: &CameraIntrinsics) -> DepthImage {
    let mut img = DepthImage::new(intr.width, intr.height);
    let origin = Point3::from(*pose.translation());
    let rot = *pose.rotation();
    for py in 0..intr.height {
        for px in 0..intr.width {
            // Unit-z camera ray: the ray parameter equals z-depth.
            let dir_cam = Vector3::new(
                (px as f64 - intr.cx) / intr.fx,
                (py as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir = rot * dir_cam;
            let mut best = f64::INFINITY;
            for p in &scene.primitives {
                if let Some((t0, t1)) = p.ray_range(&origin, &dir) {
                    if t1 > NEAR_CLIP {
                        best = best.min(t0.max(NEAR_CLIP));
                    }
                }
            }
            if best.is_finite() {
                img.set(px, py, best as f32);
            }
        }
    }
    img
}

/// Adds depth-proportional Gaussian noise (sigma = k * z) to valid pixels.
pub fn add_depth_noise(img: &mut DepthImage, k: f64, rng: &mut impl Rng) {
    for v in img.depths.iter_mut() {
        if *v > 0.0 {
            // Box-Muller standard normal.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = (*v as f64 + k * (*v as f64) * n).max(0.0) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryPattern {
    Orbit,
    Lawnmower,
}

/// Camera elevation for generated trajectories, meters.
pub const TRAJECTORY_HEIGHT: f64 = 1.5;

/// y-down look-at pose: camera z toward the target, x/y completing a
/// right-handed frame with world +y as up.
pub fn look_at(eye: Point3<f64>, target: Point3<f64>) -> Result<Pose> {
    let forward = (target - eye).normalize();
    let up = Vector3::y();
    let fallback = Vector3::x();
    let mut x = forward.cross(&up);
    if x.norm() < 1e-9 {
        x = forward.cross(&fallback);
    }
    let x = x.normalize();
    // y = z cross x completes the right-handed x-right / y-down / z-forward
    // camera frame (y points against world up).
    let y = forward.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, forward]);
    Pose::from_parts(rot, eye.coords)
}

/// Timestamped poses at 1.5 m elevation. Orbit circles the centroid with
/// uniform angular spacing starting at angle 0; lawnmower sweeps serpentine
/// rows across the footprint, looking ahead and down.
pub fn generate_trajectory(
    scene: &SyntheticScene,
    n_frames: usize,
    pattern: TrajectoryPattern,
) -> Result<Vec<(f64, Pose)>> {
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be >= 1".into()));
    }
    let centroid = scene.centroid();
    let mut poses = Vec::with_capacity(n_frames);
    match pattern {
        TrajectoryPattern::Orbit => {
            let footprint = (scene.bounds_max[0] - scene.bounds_min[0])
                .min(scene.bounds_max[2] - scene.bounds_min[2]);
            let radius = (footprint * 0.25).max(0.5);
            for i in 0..n_frames {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / n_frames as f64;
                let eye = Point3::new(
                    centroid.x + radius * theta.cos(),
                    TRAJECTORY_HEIGHT,
                    centroid.z + radius * theta.sin(),
                );
                poses.push((i as f64 / 30.0, look_at(eye, centroid)?));
            }
        }
        TrajectoryPattern::Lawnmower => {
            let rows = ((n_frames as f64).sqrt().ceil() as usize).max(1);
            let per_row = n_frames.div_ceil(rows);
            let (x0, x1) = (scene.bounds_min[0] + 0.5, scene.bounds_max[0] - 0.5);
            let (z0, z1) = (scene.bounds_min[2] + 0.5, scene.bounds_max[2] - 0.5);
            for i in 0..n_frames {
                let row = i / per_row;
                let col = i % per_row;
                let fz = if rows > 1 { row as f64 / (rows - 1) as f64 } else { 0.5 };
                let mut fx = if per_row > 1 { col as f64 / (per_row - 1) as f64 } else { 0.5 };
                if row % 2 == 1 {
                    fx = 1.0 - fx;
                }
                let eye = Point3::new(x0 + fx * (x1 - x0), TRAJECTORY_HEIGHT, z0 + fz * (z1 - z0));
                // Look ahead along the row, pitched toward the floor.
                let ahead = if row % 2 == 0 { 1.0 } else { -1.0 };
                let target = Point3::new(eye.x + ahead, TRAJECTORY_HEIGHT - 1.0, eye.z + 0.3);
                poses.push((i as f64 / 30.0, look_at(eye, target)?));
            }
        }
    }
    Ok(poses)
}

/// For every ground-truth voxel, whether its center is visible from at least
/// one pose: projected in-bounds and at (or in front of) the first surface
/// hit of its pixel ray, within one voxel of tolerance.
pub fn visibility_mask(
    scene: &SyntheticScene,
    gt: &GroundTruthVolume,
    poses: &[Pose],
    intr: &CameraIntrinsics,
) -> Vec<bool> {
    let mut visible = vec![false; gt.labels.len()];
    for pose in poses {
        let depth = render_depth(scene, pose, intr);
        for z in 0..gt.dims[2] {
            for y in 0..gt.dims[1] {
                for x in 0..gt.dims[0] {
                    let i = gt.linear([x, y, z]);
                    if gt.labels[i] == 0 || visible[i] {
                        continue;
                    }
                    let c = Point3::new(
                        gt.origin[0] + (x as f64 + 0.5) * gt.voxel_size,
                        gt.origin[1] + (y as f64 + 0.5) * gt.voxel_size,
                        gt.origin[2] + (z as f64 + 0.5) * gt.voxel_size,
                    );
                    if let Some((u, v)) = crate::sensor::project_voxel(&c, pose, intr) {
                        let d = depth.at(u as u32, v as u32) as f64;
                        let zc = pose.world_to_camera(&c).z;
                        if d > 0.0 && zc <= d + gt.voxel_size {
                            visible[i] = true;
                        }
                    }
                }
            }
        }
    }
    visible
}

/// GT empty-fraction threshold above which a training pair is discarded.
pub const PAIR_MAX_EMPTY_FRACTION: f64 = 0.95;
/// Minimum distinct semantic labels a training pair must contain.
pub const PAIR_MIN_LABELS: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetPair {
    pub anchor: [i32; 3],
    pub input: String,
    pub target: String,
    pub empty_fraction: f64,
    pub distinct_labels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub voxel_size: f64,
    pub kept: Vec<DatasetPair>,
    pub discarded: usize,
}

/// Writes (partial sub-map, GT label crop) pairs for every lattice cell over
/// the GT extent, discarding crops that are almost empty or single-label.
/// Returns the written manifest.
pub fn export_training_pairs(
    map: &GlobalMap,
    gt: &GroundTruthVolume,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    gt.check_alignment(map.config().voxel_size)?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest {
        voxel_size: map.config().voxel_size,
        kept: Vec::new(),
        discarded: 0,
    };
    for (i, anchor) in gt.covering_anchors().into_iter().enumerate() {
        let target = gt.crop_labels(&anchor);
        let empty = target.iter().filter(|&&l| l == 0).count();
        let empty_fraction = empty as f64 / SUBMAP_CELLS as f64;
        let mut seen = [false; NUM_LABELS];
        for &l in &target {
            seen[l as usize] = true;
        }
        let distinct = seen[1..].iter().filter(|&&s| s).count();
        if empty_fraction > PAIR_MAX_EMPTY_FRACTION || distinct < PAIR_MIN_LABELS {
            manifest.discarded += 1;
            continue;
        }
        let grid = extract_submap(map, &anchor);
        let input = format!("pair_{i:04}_input.bin");
        let target_name = format!("pair_{i:04}_target.bin");
        std::fs::write(out_dir.join(&input), grid.to_bytes())?;
        std::fs::write(out_dir.join(&target_name), &target)?;
        manifest.kept.push(DatasetPair {
            anchor: anchor.lattice,
            input,
            target: target_name,
            empty_fraction,
            distinct_labels: distinct,
        });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}
