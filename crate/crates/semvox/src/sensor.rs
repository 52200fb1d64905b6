//! Depth projection and Bayesian log-odds occupancy fusion with a
//! piecewise-quadratic inverse sensor model.

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::map::{GlobalMap, VoxelCell};
use crate::{Error, Result};

/// Near clipping distance for ray traversal, meters.
pub const NEAR_CLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Config("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config("cy outside image".into()));
        }
        Ok(())
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = rotation.transpose() * rotation - Matrix3::identity();
        if residual.norm() > 1e-9 {
            return Err(Error::Input("rotation is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Input("rotation determinant is not +1".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Quaternion in `(x, y, z, w)` order, as in trajectory files.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        if quat.norm() < 1e-12 {
            return Err(Error::Input("zero quaternion".into()));
        }
        let rot = UnitQuaternion::from_quaternion(quat);
        Self::from_parts(rot.to_rotation_matrix().into_inner(), translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation).into_inner();
        [q.i, q.j, q.k, q.w]
    }
}

/// Depth samples in meters; 0 encodes invalid.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depths: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            depths: vec![0.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.depths[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, depth: f32) {
        self.depths[(y * self.width + x) as usize] = depth;
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoiseModel {
    /// Depth-proportional standard deviation factor.
    pub k_sigma: f64,
    /// Standard deviation floor, meters.
    pub sigma_min: f64,
    /// Free-space occupancy probability.
    pub p_free: f64,
    /// Truncation band behind the surface, in multiples of sigma.
    pub back_band: f64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self {
            k_sigma: 0.05,
            sigma_min: 0.02,
            p_free: 0.03,
            back_band: 3.0,
        }
    }
}

impl SensorNoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_free > 0.0 && self.p_free < 0.5) {
            return Err(Error::Config("p_free must be in (0, 0.5)".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        if !(self.back_band >= 1.0) {
            return Err(Error::Config("back_band must be >= 1".into()));
        }
        if !(self.k_sigma >= 0.0) {
            return Err(Error::Config("k_sigma must be non-negative".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn sigma(&self, measured_depth: f64) -> f64 {
        self.sigma_min.max(self.k_sigma * measured_depth)
    }

    /// Measured occupancy probability as a function of the normalized
    /// surface offset `s = (voxel_depth - measured_depth) / sigma`.
    ///
    /// Free space before the surface saturates at `p_free`; the central ramp
    /// is an odd, C1, piecewise-quadratic spline through 0.5 at the surface;
    /// behind the surface the probability decays linearly back to 0.5 until
    /// the truncation band ends.
    #[inline]
    pub fn probability(&self, s: f64) -> Option<f64> {
        if s >= self.back_band {
            return None;
        }
        let p = if s <= -1.0 {
            self.p_free
        } else if s < 1.0 {
            let g = s * (2.0 - s.abs());
            self.p_free + (1.0 - 2.0 * self.p_free) * (0.5 + 0.5 * g)
        } else {
            let peak = 1.0 - self.p_free;
            peak - (s - 1.0) / (self.back_band - 1.0) * (peak - 0.5)
        };
        Some(p)
    }
}

/// Log-odds delta for a voxel at `voxel_depth` on a ray whose surface
/// measurement is `measured_depth`; `None` beyond the truncation band.
pub fn inverse_sensor_logodds(
    measured_depth: f64,
    voxel_depth: f64,
    model: &SensorNoiseModel,
) -> Result<Option<f64>> {
    if !(measured_depth > 0.0) || !(voxel_depth > 0.0) {
        return Err(Error::Input("depths must be positive".into()));
    }
    let sigma = model.sigma(measured_depth);
    let s = (voxel_depth - measured_depth) / sigma;
    Ok(model.probability(s).map(|p| (p / (1.0 - p)).ln()))
}

/// Perspective projection of a world point, or `None` when the point is
/// behind the camera or outside the image bounds.
pub fn project_voxel(
    v: &Point3<f64>,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Option<(f64, f64)> {
    let pc = pose.world_to_camera(v);
    if pc.z <= 0.0 {
        return None;
    }
    let u = intr.fx * pc.x / pc.z + intr.cx;
    let v = intr.fy * pc.y / pc.z + intr.cy;
    if u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64 {
        Some((u, v))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct IntegrateStats {
    pub valid_pixels: u64,
    pub cells_updated: u64,
}

/// Fuses one depth frame into the map. Every valid pixel casts a ray from
/// the near clip to `measured + back_band * sigma`; all traversed voxels are
/// allocated and updated with the clamped log-odds delta of the inverse
/// sensor model, stamped with the current frame counter.
pub fn integrate_depth(
    map: &mut GlobalMap,
    depth: &DepthImage,
    pose: &Pose,
    intr: &CameraIntrinsics,
    model: &SensorNoiseModel,
) -> Result<IntegrateStats> {
    intr.validate()?;
    model.validate()?;
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::Input(format!(
            "depth image {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }

    let mut stats = IntegrateStats::default();
    let origin = *pose.translation();
    let rot = *pose.rotation();
    // Camera z axis in world coordinates; z-depth of a world point p is
    // dot(forward, p - origin).
    let forward = rot.column(2).into_owned();
    let now = map.frame_counter();
    let (lo_min, lo_max) = (map.config().logodds_min, map.config().logodds_max);
    let voxel_size = map.config().voxel_size;
    let inv_voxel = 1.0 / voxel_size;
    let dl_free = (model.p_free / (1.0 - model.p_free)).ln();
    let side = map.config().block_side as i32;
    // Rays touch runs of voxels in the same block; caching the block's cell
    // buffer avoids a hash lookup per voxel. Block buffers never move once
    // allocated, so the cached pointer survives later allocations.
    let mut cached: Option<([i32; 3], *mut VoxelCell)> = None;

    for py in 0..depth.height {
        for px in 0..depth.width {
            let d = depth.at(px, py) as f64;
            if !(d > 0.0) {
                continue;
            }
            stats.valid_pixels += 1;
            let sigma = model.sigma(d);
            let t_end = d + model.back_band * sigma;
            // Free-space region where the delta is the constant p_free value.
            let z_free_max = d - sigma;

            // Ray direction with unit z in the camera frame so the traversal
            // parameter equals z-depth.
            let dir_cam = Vector3::new(
                (px as f64 - intr.cx) / intr.fx,
                (py as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir = rot * dir_cam;

            // Amanatides-Woo voxel stepping in the t (z-depth) parameter.
            let start = origin + dir * NEAR_CLIP;
            let mut idx = [
                (start.x * inv_voxel).floor() as i32,
                (start.y * inv_voxel).floor() as i32,
                (start.z * inv_voxel).floor() as i32,
            ];
            let mut step = [0i32; 3];
            let mut t_max = [f64::INFINITY; 3];
            let mut t_delta = [f64::INFINITY; 3];
            for a in 0..3 {
                let da = dir[a];
                if da > 0.0 {
                    step[a] = 1;
                    t_delta[a] = voxel_size / da;
                    let next = (idx[a] + 1) as f64 * voxel_size;
                    t_max[a] = NEAR_CLIP + (next - start[a]) / da;
                } else if da < 0.0 {
                    step[a] = -1;
                    t_delta[a] = -voxel_size / da;
                    let next = idx[a] as f64 * voxel_size;
                    t_max[a] = NEAR_CLIP + (next - start[a]) / da;
                }
            }

            let mut t = NEAR_CLIP;
            while t <= t_end {
                // z-depth of the voxel center drives the sensor model.
                let cx = (idx[0] as f64 + 0.5) * voxel_size - origin.x;
                let cy = (idx[1] as f64 + 0.5) * voxel_size - origin.y;
                let cz = (idx[2] as f64 + 0.5) * voxel_size - origin.z;
                let zc = forward.x * cx + forward.y * cy + forward.z * cz;
                if zc > 0.0 {
                    let dl = if zc <= z_free_max {
                        Some(dl_free)
                    } else {
                        model
                            .probability((zc - d) / sigma)
                            .map(|p| (p / (1.0 - p)).ln())
                    };
                    if let Some(dl) = dl {
                        let block = [
                            idx[0].div_euclid(side),
                            idx[1].div_euclid(side),
                            idx[2].div_euclid(side),
                        ];
                        let base = match cached {
                            Some((c, p)) if c == block => p,
                            _ => {
                                let p = map.block_cells_ptr(block)?;
                                cached = Some((block, p));
                                p
                            }
                        };
                        let local = (idx[0].rem_euclid(side)
                            + side * (idx[1].rem_euclid(side) + side * idx[2].rem_euclid(side)))
                            as usize;
                        // In-bounds by construction; the buffer outlives the
                        // frame and nothing else borrows it here.
                        let cell = unsafe { &mut *base.add(local) };
                        if cell.prediction_fused && !cell.sensor_observed {
                            // First real measurement supersedes the weak
                            // predicted-occupancy prior.
                            cell.logodds = 0.0;
                        }
                        cell.logodds = (cell.logodds + dl).clamp(lo_min, lo_max);
                        cell.sensor_observed = true;
                        cell.timestamp = now;
                        stats.cells_updated += 1;
                    }
                }

                // Advance to the next voxel along the ray.
                let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                    0
                } else if t_max[1] <= t_max[2] {
                    1
                } else {
                    2
                };
                idx[axis] += step[axis];
                t = t_max[axis];
                t_max[axis] += t_delta[axis];
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MapConfig;
    use approx::assert_relative_eq;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 200,
            height: 200,
        }
    }

    #[test]
    fn projection_center() {
        let u = project_voxel(&Point3::new(0.0, 0.0, 2.0), &Pose::identity(), &intr()).unwrap();
        assert_relative_eq!(u.0, 50.0);
        assert_relative_eq!(u.1, 50.0);
    }

    #[test]
    fn projection_behind_camera() {
        assert!(project_voxel(&Point3::new(0.0, 0.0, -1.0), &Pose::identity(), &intr()).is_none());
    }

    #[test]
    fn projection_offset() {
        let u = project_voxel(&Point3::new(1.0, 0.0, 2.0), &Pose::identity(), &intr()).unwrap();
        assert_relative_eq!(u.0, 100.0);
        assert_relative_eq!(u.1, 50.0);
    }

    #[test]
    fn projection_out_of_bounds() {
        let mut narrow = intr();
        narrow.width = 80;
        assert!(project_voxel(&Point3::new(1.0, 0.0, 2.0), &Pose::identity(), &narrow).is_none());
    }

    #[test]
    fn model_surface_is_neutral() {
        let m = SensorNoiseModel::default();
        // s = 0 at the measured surface: P = 0.5 exactly, delta 0.
        let dl = inverse_sensor_logodds(2.0, 2.0, &m).unwrap().unwrap();
        assert_eq!(dl, 0.0);
    }

    #[test]
    fn model_free_space() {
        let m = SensorNoiseModel::default();
        // s = -2: saturated free space.
        let sigma = m.sigma(2.0);
        let dl = inverse_sensor_logodds(2.0, 2.0 - 2.0 * sigma, &m)
            .unwrap()
            .unwrap();
        assert_relative_eq!(dl, (0.03f64 / 0.97).ln(), epsilon = 1e-12);
        assert_relative_eq!(dl, -3.476, epsilon = 1e-3);
    }

    #[test]
    fn model_truncation() {
        let m = SensorNoiseModel::default();
        let sigma = m.sigma(2.0);
        assert!(inverse_sensor_logodds(2.0, 2.0 + 4.0 * sigma, &m)
            .unwrap()
            .is_none());
        assert!(m.probability(3.0).is_none(), "band edge writes nothing");
        assert!(inverse_sensor_logodds(2.0, 2.0 + 3.001 * sigma, &m)
            .unwrap()
            .is_none());
    }

    #[test]
    fn model_rejects_nonpositive_depth() {
        let m = SensorNoiseModel::default();
        assert!(inverse_sensor_logodds(0.0, 1.0, &m).is_err());
        assert!(inverse_sensor_logodds(1.0, -0.5, &m).is_err());
    }

    #[test]
    fn model_ramp_symmetry_and_monotonicity() {
        let m = SensorNoiseModel::default();
        let mut prev = 0.0;
        for i in 0..=2000 {
            let s = -1.0 + i as f64 * 1e-3;
            let p = m.probability(s).unwrap();
            let q = m.probability(-s).unwrap();
            assert!((p + q - 1.0).abs() < 1e-12, "symmetry broken at s={s}");
            if i > 0 {
                assert!(p >= prev - 1e-15, "not monotone at s={s}");
            }
            prev = p;
        }
        assert_eq!(m.probability(0.0).unwrap(), 0.5);
    }

    #[test]
    fn two_observations_fuse_by_odds_product() {
        // Two observations of P=0.7 on a uniform prior: Eq-style direct
        // evaluation gives 0.49/(0.49+0.09).
        let l = 2.0 * (0.7f64 / 0.3).ln();
        let p = 1.0 / (1.0 + (-l).exp());
        assert_relative_eq!(p, 0.49 / (0.49 + 0.09), epsilon = 1e-12);
    }

    #[test]
    fn integrate_all_invalid_is_noop() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        map.advance_frame();
        let depth = DepthImage::new(200, 200);
        let stats = integrate_depth(
            &mut map,
            &depth,
            &Pose::identity(),
            &intr(),
            &SensorNoiseModel::default(),
        )
        .unwrap();
        assert_eq!(stats.cells_updated, 0);
        assert_eq!(map.block_count(), 0);
    }

    #[test]
    fn integrate_dimension_mismatch() {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        let depth = DepthImage::new(100, 100);
        assert!(integrate_depth(
            &mut map,
            &depth,
            &Pose::identity(),
            &intr(),
            &SensorNoiseModel::default(),
        )
        .is_err());
    }

    fn single_ray_map(frames: &[f32]) -> GlobalMap {
        // 1x1 image looking down +z from the origin.
        let one = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        let mut cfg = MapConfig::default();
        // Clamp disabled for additivity checks.
        cfg.logodds_min = f64::NEG_INFINITY;
        cfg.logodds_max = f64::INFINITY;
        let mut map = GlobalMap::new(cfg).unwrap();
        for &d in frames {
            map.advance_frame();
            let mut img = DepthImage::new(1, 1);
            img.set(0, 0, d);
            integrate_depth(
                &mut map,
                &img,
                &Pose::identity(),
                &one,
                &SensorNoiseModel::default(),
            )
            .unwrap();
        }
        map
    }

    #[test]
    fn integrate_order_independence() {
        let a = single_ray_map(&[1.0, 1.5, 2.0, 0.8]);
        let b = single_ray_map(&[0.8, 2.0, 1.0, 1.5]);
        for (idx, cell) in a.iter_cells() {
            let other = b.cell(idx).expect("same voxels written");
            assert!(
                (cell.logodds - other.logodds).abs() < 1e-9,
                "order dependence at {idx:?}"
            );
        }
    }

    #[test]
    fn integrate_clamp_safety() {
        let one = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        let mut img = DepthImage::new(1, 1);
        img.set(0, 0, 1.0);
        for _ in 0..50 {
            map.advance_frame();
            integrate_depth(
                &mut map,
                &img,
                &Pose::identity(),
                &one,
                &SensorNoiseModel::default(),
            )
            .unwrap();
        }
        for (_, cell) in map.iter_cells() {
            assert!(cell.logodds >= -5.0 && cell.logodds <= 5.0);
        }
    }

    #[test]
    fn pose_validation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(Pose::from_parts(r, Vector3::zeros()).is_err());
        // Reflection has determinant -1.
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(Pose::from_parts(r, Vector3::zeros()).is_err());
    }
}
