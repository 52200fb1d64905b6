//! View-frustum computation, lattice sub-map covering, staleness filtering
//! and dense 64^3 grid extraction.

use std::collections::{HashSet, VecDeque};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::map::{classify_state, GlobalMap, MapConfig, VoxelState};
use crate::sensor::{CameraIntrinsics, Pose};
use crate::{Error, Result};

/// Sub-map edge length in voxels.
pub const SUBMAP_DIM: usize = 64;
pub const SUBMAP_CELLS: usize = SUBMAP_DIM * SUBMAP_DIM * SUBMAP_DIM;

/// Default frustum depth range, meters.
pub const FRUSTUM_NEAR: f64 = 0.01;
pub const FRUSTUM_FAR: f64 = 5.0;

/// Convex view frustum given by its eight corner points.
///
/// Corner order: near plane pixels (0,0), (w,0), (w,h), (0,h), then the far
/// plane in the same pixel order.
#[derive(Debug, Clone)]
pub struct Frustum {
    pub corners: [Point3<f64>; 8],
    pub near: f64,
    pub far: f64,
}

impl Frustum {
    pub fn is_degenerate(&self) -> bool {
        if self.corners.iter().any(|c| !c.coords.iter().all(|v| v.is_finite())) {
            return true;
        }
        let (min, max) = self.aabb();
        (max - min).iter().any(|e| !(*e > 0.0))
    }

    pub fn aabb(&self) -> (Point3<f64>, Point3<f64>) {
        let mut min = self.corners[0];
        let mut max = self.corners[0];
        for c in &self.corners[1..] {
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
                max[a] = max[a].max(c[a]);
            }
        }
        (min, max)
    }

    /// Inward-facing plane normals and one point on each plane:
    /// near, far and the four side planes.
    pub fn planes(&self) -> [(Vector3<f64>, Point3<f64>); 6] {
        let c = &self.corners;
        let centroid: Vector3<f64> =
            c.iter().map(|p| p.coords).sum::<Vector3<f64>>() / 8.0;
        let mut planes = [
            // near: c0 c1 c2
            (plane_normal(&c[0], &c[1], &c[2]), c[0]),
            // far: c4 c5 c6
            (plane_normal(&c[4], &c[5], &c[6]), c[4]),
            // sides connect near edge i -> i+1 with the matching far corners
            (plane_normal(&c[0], &c[4], &c[5]), c[0]),
            (plane_normal(&c[1], &c[5], &c[6]), c[1]),
            (plane_normal(&c[2], &c[6], &c[7]), c[2]),
            (plane_normal(&c[3], &c[7], &c[4]), c[3]),
        ];
        for (n, p) in planes.iter_mut() {
            if n.dot(&(centroid - p.coords)) < 0.0 {
                *n = -*n;
            }
        }
        planes
    }

    /// Point containment against the six planes, with a small tolerance so
    /// boundary points count as inside.
    pub fn contains_point(&self, p: &Point3<f64>) -> bool {
        self.planes()
            .iter()
            .all(|(n, q)| n.dot(&(p - q)) >= -1e-9)
    }

    /// Exact convex intersection test against an axis-aligned box via the
    /// separating axis theorem.
    pub fn intersects_aabb(&self, min: &Point3<f64>, max: &Point3<f64>) -> bool {
        let box_corners: Vec<Point3<f64>> = (0..8)
            .map(|i| {
                Point3::new(
                    if i & 1 == 0 { min.x } else { max.x },
                    if i & 2 == 0 { min.y } else { max.y },
                    if i & 4 == 0 { min.z } else { max.z },
                )
            })
            .collect();

        let mut axes: Vec<Vector3<f64>> = vec![
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
        ];
        for (n, _) in self.planes() {
            axes.push(n);
        }
        // Edge cross products: box axes x frustum edge directions.
        let c = &self.corners;
        let edges = [
            c[1] - c[0],
            c[3] - c[0],
            c[4] - c[0],
            c[5] - c[1],
            c[6] - c[2],
            c[7] - c[3],
        ];
        for b in [Vector3::x(), Vector3::y(), Vector3::z()] {
            for e in &edges {
                axes.push(b.cross(e));
            }
        }

        for axis in axes {
            if axis.norm_squared() < 1e-18 {
                continue;
            }
            let mut amin = f64::INFINITY;
            let mut amax = f64::NEG_INFINITY;
            for p in &self.corners {
                let d = axis.dot(&p.coords);
                amin = amin.min(d);
                amax = amax.max(d);
            }
            let mut bmin = f64::INFINITY;
            let mut bmax = f64::NEG_INFINITY;
            for p in &box_corners {
                let d = axis.dot(&p.coords);
                bmin = bmin.min(d);
                bmax = bmax.max(d);
            }
            if amax < bmin - 1e-12 || bmax < amin - 1e-12 {
                return false;
            }
        }
        true
    }
}

fn plane_normal(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Vector3<f64> {
    (b - a).cross(&(c - a))
}

/// Back-projects the four image corners at the near and far depths.
pub fn compute_frustum(
    pose: &Pose,
    intr: &CameraIntrinsics,
    near: f64,
    far: f64,
) -> Result<Frustum> {
    if !(near < far) {
        return Err(Error::Config("frustum near must be < far".into()));
    }
    let w = intr.width as f64;
    let h = intr.height as f64;
    let pixels = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut corners = [Point3::origin(); 8];
    for (i, &(px, py)) in pixels.iter().enumerate() {
        let dir = Vector3::new((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0);
        corners[i] = pose.camera_to_world(&Point3::from(dir * near));
        corners[i + 4] = pose.camera_to_world(&Point3::from(dir * far));
    }
    Ok(Frustum { corners, near, far })
}

/// Anchor of a 64^3 sub-map on the fixed world lattice (stride 64 voxels,
/// origin at world zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubMapAnchor {
    pub lattice: [i32; 3],
}

impl SubMapAnchor {
    pub fn new(lattice: [i32; 3]) -> Self {
        Self { lattice }
    }

    /// Voxel index of the grid cell (0,0,0).
    #[inline]
    pub fn base_voxel(&self) -> [i32; 3] {
        [
            self.lattice[0] * SUBMAP_DIM as i32,
            self.lattice[1] * SUBMAP_DIM as i32,
            self.lattice[2] * SUBMAP_DIM as i32,
        ]
    }

    pub fn world_min(&self, voxel_size: f64) -> Point3<f64> {
        let b = self.base_voxel();
        Point3::new(
            b[0] as f64 * voxel_size,
            b[1] as f64 * voxel_size,
            b[2] as f64 * voxel_size,
        )
    }

    pub fn world_max(&self, voxel_size: f64) -> Point3<f64> {
        let side = SUBMAP_DIM as f64 * voxel_size;
        self.world_min(voxel_size) + Vector3::new(side, side, side)
    }

    /// Anchor of the lattice cell containing a voxel index.
    pub fn containing_voxel(index: [i32; 3]) -> Self {
        let d = SUBMAP_DIM as i32;
        Self::new([
            index[0].div_euclid(d),
            index[1].div_euclid(d),
            index[2].div_euclid(d),
        ])
    }
}

/// All lattice cells whose boxes intersect the frustum, ordered from the
/// minimum-x / minimum-z extent outward by adjacency.
pub fn cover_frustum(frustum: &Frustum, config: &MapConfig) -> Vec<SubMapAnchor> {
    if frustum.is_degenerate() {
        return Vec::new();
    }
    let stride = SUBMAP_DIM as f64 * config.voxel_size;
    let (min, max) = frustum.aabb();
    let lo = [
        (min.x / stride).floor() as i32,
        (min.y / stride).floor() as i32,
        (min.z / stride).floor() as i32,
    ];
    let hi = [
        (max.x / stride).floor() as i32,
        (max.y / stride).floor() as i32,
        (max.z / stride).floor() as i32,
    ];

    let mut selected: HashSet<[i32; 3]> = HashSet::new();
    for lx in lo[0]..=hi[0] {
        for ly in lo[1]..=hi[1] {
            for lz in lo[2]..=hi[2] {
                let anchor = SubMapAnchor::new([lx, ly, lz]);
                let bmin = anchor.world_min(config.voxel_size);
                let bmax = anchor.world_max(config.voxel_size);
                if frustum.intersects_aabb(&bmin, &bmax) {
                    selected.insert([lx, ly, lz]);
                }
            }
        }
    }
    if selected.is_empty() {
        return Vec::new();
    }

    // Start at the selected cell with minimum x, then minimum z, then y, and
    // walk outward over the 6-adjacency graph.
    let start = *selected
        .iter()
        .min_by_key(|c| (c[0], c[2], c[1]))
        .unwrap();
    let mut order = Vec::with_capacity(selected.len());
    let mut seen: HashSet<[i32; 3]> = HashSet::new();
    let mut queue = VecDeque::new();
    queue.push_back(start);
    seen.insert(start);
    while let Some(c) = queue.pop_front() {
        order.push(SubMapAnchor::new(c));
        let mut neighbors: Vec<[i32; 3]> = [
            [c[0] + 1, c[1], c[2]],
            [c[0] - 1, c[1], c[2]],
            [c[0], c[1] + 1, c[2]],
            [c[0], c[1] - 1, c[2]],
            [c[0], c[1], c[2] + 1],
            [c[0], c[1], c[2] - 1],
        ]
        .into_iter()
        .filter(|n| selected.contains(n) && !seen.contains(n))
        .collect();
        neighbors.sort_unstable_by_key(|c| (c[0], c[2], c[1]));
        for n in neighbors {
            seen.insert(n);
            queue.push_back(n);
        }
    }
    // Diagonal-only components, if any, appended deterministically.
    let mut rest: Vec<[i32; 3]> = selected
        .into_iter()
        .filter(|c| !seen.contains(c))
        .collect();
    rest.sort_unstable_by_key(|c| (c[0], c[2], c[1]));
    order.extend(rest.into_iter().map(SubMapAnchor::new));
    order
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StalenessConfig {
    /// Retain an anchor only while the recently-completed fraction stays
    /// below this threshold.
    pub tau_s: f64,
    /// Age bound, in frames, for a prediction to count as recent.
    pub tau_t: u32,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.3,
            tau_t: 30,
        }
    }
}

impl StalenessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_s) {
            return Err(Error::Config("tau_s must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Fraction of the anchor's cells that carry a recently fused prediction.
pub fn completed_fraction(
    map: &GlobalMap,
    anchor: &SubMapAnchor,
    cfg: &StalenessConfig,
    now: u32,
) -> f64 {
    let base = anchor.base_voxel();
    let side = map.config().block_side;
    let mut recent = 0usize;
    if SUBMAP_DIM % side != 0 {
        // Unaligned block size: plain per-voxel scan.
        for z in 0..SUBMAP_DIM as i32 {
            for y in 0..SUBMAP_DIM as i32 {
                for x in 0..SUBMAP_DIM as i32 {
                    if let Some(cell) = map.cell([base[0] + x, base[1] + y, base[2] + z]) {
                        if cell.prediction_fused
                            && now.saturating_sub(cell.timestamp) <= cfg.tau_t
                        {
                            recent += 1;
                        }
                    }
                }
            }
        }
        return recent as f64 / SUBMAP_CELLS as f64;
    }
    let blocks_per_side = SUBMAP_DIM / side;
    for bz in 0..blocks_per_side {
        for by in 0..blocks_per_side {
            for bx in 0..blocks_per_side {
                let coord = [
                    base[0] / side as i32 + bx as i32,
                    base[1] / side as i32 + by as i32,
                    base[2] / side as i32 + bz as i32,
                ];
                if let Some(cells) = map.block(coord) {
                    for cell in cells {
                        if cell.prediction_fused
                            && now.saturating_sub(cell.timestamp) <= cfg.tau_t
                        {
                            recent += 1;
                        }
                    }
                }
            }
        }
    }
    recent as f64 / SUBMAP_CELLS as f64
}

/// Drops anchors whose recently-completed fraction has reached `tau_s`, so
/// the same local region is not completed over and over.
pub fn filter_stale(
    map: &GlobalMap,
    anchors: &[SubMapAnchor],
    cfg: &StalenessConfig,
    now: u32,
) -> Vec<SubMapAnchor> {
    anchors
        .iter()
        .filter(|a| completed_fraction(map, a, cfg, now) < cfg.tau_s)
        .copied()
        .collect()
}

/// Dense snapshot of one sub-map: logistic occupancy probabilities plus the
/// unknown-state mask, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMapGrid {
    pub anchor: SubMapAnchor,
    pub occupancy: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SubMapGrid {
    #[inline]
    pub fn linear(x: usize, y: usize, z: usize) -> usize {
        x + SUBMAP_DIM * (y + SUBMAP_DIM * z)
    }

    /// Raw binary dump: 64^3 little-endian f32 occupancies then 64^3 mask
    /// bytes. This layout is shared with the external completion protocol.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SUBMAP_CELLS * 5);
        for v in &self.occupancy {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask);
        out
    }

    pub fn from_bytes(anchor: SubMapAnchor, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != SUBMAP_CELLS * 5 {
            return Err(Error::Format(format!(
                "sub-map dump must be {} bytes, got {}",
                SUBMAP_CELLS * 5,
                bytes.len()
            )));
        }
        let mut occupancy = Vec::with_capacity(SUBMAP_CELLS);
        for chunk in bytes[..SUBMAP_CELLS * 4].chunks_exact(4) {
            occupancy.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mask = bytes[SUBMAP_CELLS * 4..].to_vec();
        Ok(Self {
            anchor,
            occupancy,
            mask,
        })
    }
}

/// Copies the anchor's 64^3 region out of the map: occupancy is the logistic
/// of the stored log-odds, unknown cells read as probability 0.5 with the
/// mask bit set. The result is an isolated snapshot.
pub fn extract_submap(map: &GlobalMap, anchor: &SubMapAnchor) -> SubMapGrid {
    let mut occupancy = vec![0.5f32; SUBMAP_CELLS];
    let mut mask = vec![1u8; SUBMAP_CELLS];
    let base = anchor.base_voxel();
    let side = map.config().block_side;
    if SUBMAP_DIM % side != 0 {
        for z in 0..SUBMAP_DIM {
            for y in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    let idx = [
                        base[0] + x as i32,
                        base[1] + y as i32,
                        base[2] + z as i32,
                    ];
                    if let Some(cell) = map.cell(idx) {
                        if classify_state(cell) != VoxelState::Unknown {
                            let gi = SubMapGrid::linear(x, y, z);
                            occupancy[gi] = (1.0 / (1.0 + (-cell.logodds).exp())) as f32;
                            mask[gi] = 0;
                        }
                    }
                }
            }
        }
        return SubMapGrid {
            anchor: *anchor,
            occupancy,
            mask,
        };
    }
    let blocks_per_side = SUBMAP_DIM / side;
    for bz in 0..blocks_per_side {
        for by in 0..blocks_per_side {
            for bx in 0..blocks_per_side {
                let coord = [
                    base[0] / side as i32 + bx as i32,
                    base[1] / side as i32 + by as i32,
                    base[2] / side as i32 + bz as i32,
                ];
                let Some(cells) = map.block(coord) else {
                    continue;
                };
                for lz in 0..side {
                    for ly in 0..side {
                        for lx in 0..side {
                            let cell = &cells[lx + side * (ly + side * lz)];
                            if classify_state(cell) == VoxelState::Unknown {
                                continue;
                            }
                            let gi = SubMapGrid::linear(
                                bx * side + lx,
                                by * side + ly,
                                bz * side + lz,
                            );
                            occupancy[gi] = (1.0 / (1.0 + (-cell.logodds).exp())) as f32;
                            mask[gi] = 0;
                        }
                    }
                }
            }
        }
    }
    SubMapGrid {
        anchor: *anchor,
        occupancy,
        mask,
    }
}
