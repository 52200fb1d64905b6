//! File formats: versioned map snapshots, ground-truth volume dumps, ascii
//! PLY export, 16-bit depth PNGs, trajectory text files and intrinsics JSON.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;

use crate::map::{GlobalMap, LabelId, MapConfig, VoxelCell, LABEL_PALETTE};
use crate::sensor::{CameraIntrinsics, DepthImage, Pose};
use crate::synth::GroundTruthVolume;
use crate::{Error, Result};

/// Map snapshot magic, version 1.
pub const MAP_MAGIC: &[u8; 8] = b"SVXMAP01";
/// Ground-truth volume magic, version 1.
pub const GT_MAGIC: &[u8; 8] = b"SVXGT001";

const FLAG_SENSOR_OBSERVED: u8 = 1 << 0;
const FLAG_PREDICTION_FUSED: u8 = 1 << 1;

/// Serializes the whole map. Layout (all little-endian):
/// magic; voxel_size f64; block_side u32; logodds_min f64; logodds_max f64;
/// label_weight_max f64; frame_counter u32; block_count u64; then per block
/// in lexicographic coordinate order: coord 3 x i32, then block_side^3 cells
/// as (logodds f64, label u8, label_weight f64, timestamp u32, flags u8)
/// with flags bit 0 = sensor_observed, bit 1 = prediction_fused.
pub fn map_to_bytes(map: &GlobalMap) -> Vec<u8> {
    let cfg = map.config();
    let coords = map.sorted_block_coords();
    let cell_bytes = 8 + 1 + 8 + 4 + 1;
    let block_bytes = 12 + cfg.block_side.pow(3) * cell_bytes;
    let mut out = Vec::with_capacity(8 + 49 + coords.len() * block_bytes);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&cfg.voxel_size.to_le_bytes());
    out.extend_from_slice(&(cfg.block_side as u32).to_le_bytes());
    out.extend_from_slice(&cfg.logodds_min.to_le_bytes());
    out.extend_from_slice(&cfg.logodds_max.to_le_bytes());
    out.extend_from_slice(&cfg.label_weight_max.to_le_bytes());
    out.extend_from_slice(&map.frame_counter().to_le_bytes());
    out.extend_from_slice(&(coords.len() as u64).to_le_bytes());
    for coord in coords {
        for c in coord {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for cell in map.block(coord).expect("sorted coords exist") {
            out.extend_from_slice(&cell.logodds.to_le_bytes());
            out.push(cell.label.id());
            out.extend_from_slice(&cell.label_weight.to_le_bytes());
            out.extend_from_slice(&cell.timestamp.to_le_bytes());
            let mut flags = 0u8;
            if cell.sensor_observed {
                flags |= FLAG_SENSOR_OBSERVED;
            }
            if cell.prediction_fused {
                flags |= FLAG_PREDICTION_FUSED;
            }
            out.push(flags);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated snapshot".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<GlobalMap> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAP_MAGIC {
        return Err(Error::Format("bad map snapshot magic".into()));
    }
    let config = MapConfig {
        voxel_size: c.f64()?,
        block_side: c.u32()? as usize,
        logodds_min: c.f64()?,
        logodds_max: c.f64()?,
        label_weight_max: c.f64()?,
    };
    let frame_counter = c.u32()?;
    let block_count = c.u64()? as usize;
    let n = config
        .block_side
        .checked_pow(3)
        .ok_or_else(|| Error::Format("block_side overflow".into()))?;
    let mut blocks = HashMap::with_capacity(block_count);
    for _ in 0..block_count {
        let coord = [c.i32()?, c.i32()?, c.i32()?];
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let logodds = c.f64()?;
            let label = LabelId::new(c.u8()?).map_err(|_| Error::Format("bad label byte".into()))?;
            let label_weight = c.f64()?;
            let timestamp = c.u32()?;
            let flags = c.u8()?;
            cells.push(VoxelCell {
                logodds,
                label,
                label_weight,
                timestamp,
                sensor_observed: flags & FLAG_SENSOR_OBSERVED != 0,
                prediction_fused: flags & FLAG_PREDICTION_FUSED != 0,
            });
        }
        blocks.insert(coord, cells);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after snapshot".into()));
    }
    GlobalMap::from_parts(config, frame_counter, blocks)
}

pub fn save_map(map: &GlobalMap, path: &Path) -> Result<()> {
    std::fs::write(path, map_to_bytes(map))?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<GlobalMap> {
    map_from_bytes(&std::fs::read(path)?)
}

/// GT volume layout: magic; origin 3 x f64; dims 3 x u64; voxel_size f64;
/// label bytes x-fastest.
pub fn gt_to_bytes(gt: &GroundTruthVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 24 + 24 + 8 + gt.labels.len());
    out.extend_from_slice(GT_MAGIC);
    for o in gt.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for d in gt.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&gt.voxel_size.to_le_bytes());
    out.extend_from_slice(&gt.labels);
    out
}

pub fn gt_from_bytes(bytes: &[u8]) -> Result<GroundTruthVolume> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != GT_MAGIC {
        return Err(Error::Format("bad ground-truth magic".into()));
    }
    let origin = [c.f64()?, c.f64()?, c.f64()?];
    let dims = [c.u64()? as usize, c.u64()? as usize, c.u64()? as usize];
    let voxel_size = c.f64()?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("ground-truth dims overflow".into()))?;
    let labels = c.take(n)?.to_vec();
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after ground truth".into()));
    }
    Ok(GroundTruthVolume {
        origin,
        dims,
        voxel_size,
        labels,
    })
}

pub fn save_gt(gt: &GroundTruthVolume, path: &Path) -> Result<()> {
    std::fs::write(path, gt_to_bytes(gt))?;
    Ok(())
}

pub fn load_gt(path: &Path) -> Result<GroundTruthVolume> {
    gt_from_bytes(&std::fs::read(path)?)
}

/// Ascii PLY of the occupied-voxel centers with palette colors and the raw
/// integer label as an extra property. Deterministic vertex order.
pub fn ply_string(map: &GlobalMap) -> String {
    let surface = map.extract_surface();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", surface.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("property uchar label\nend_header\n");
    for (p, label) in surface {
        let [r, g, b] = LABEL_PALETTE[label.id() as usize];
        out.push_str(&format!(
            "{:.6} {:.6} {:.6} {r} {g} {b} {}\n",
            p.x,
            p.y,
            p.z,
            label.id()
        ));
    }
    out
}

pub fn export_ply(map: &GlobalMap, path: &Path) -> Result<()> {
    std::fs::write(path, ply_string(map))?;
    Ok(())
}

/// 16-bit grayscale PNG, value = millimeters, 0 = invalid.
pub fn save_depth_png(img: &DepthImage, path: &Path) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(img.width, img.height);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let mm = (img.at(x, y) as f64 * 1000.0).round();
        px.0[0] = mm.clamp(0.0, u16::MAX as f64) as u16;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_depth_png(path: &Path) -> Result<DepthImage> {
    let dynamic = image::open(path)?;
    let buf = dynamic.to_luma16();
    let mut img = DepthImage::new(buf.width(), buf.height());
    for (x, y, px) in buf.enumerate_pixels() {
        img.set(x, y, px.0[0] as f32 / 1000.0);
    }
    Ok(img)
}

/// Trajectory text: one `timestamp tx ty tz qx qy qz qw` line per frame,
/// camera-to-world; `#` lines and blanks are skipped.
pub fn load_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("trajectory line {}: {e}", lineno + 1)))?;
        if fields.len() != 8 {
            return Err(Error::Input(format!(
                "trajectory line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let pose = Pose::from_quaternion(
            [fields[4], fields[5], fields[6], fields[7]],
            Vector3::new(fields[1], fields[2], fields[3]),
        )?;
        poses.push((fields[0], pose));
    }
    Ok(poses)
}

pub fn save_trajectory(poses: &[(f64, Pose)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (ts, pose) in poses {
        let t = pose.translation();
        let [qx, qy, qz, qw] = pose.to_quaternion();
        out.push_str(&format!(
            "{ts:.6} {:.9} {:.9} {:.9} {qx:.9} {qy:.9} {qz:.9} {qw:.9}\n",
            t.x, t.y, t.z
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let intr: CameraIntrinsics = serde_json::from_slice(&std::fs::read(path)?)?;
    intr.validate()?;
    Ok(intr)
}

pub fn save_intrinsics(intr: &CameraIntrinsics, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(intr)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::classify_state;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn sample_map() -> GlobalMap {
        let mut map = GlobalMap::new(MapConfig::default()).unwrap();
        map.advance_frame();
        map.advance_frame();
        let cell = map.get_or_allocate([0, 0, 0]).unwrap();
        cell.logodds = 1.5;
        cell.sensor_observed = true;
        cell.label = LabelId::CHAIR;
        cell.label_weight = 2.25;
        cell.timestamp = 1;
        let cell = map.get_or_allocate([-9, 4, 200]).unwrap();
        cell.logodds = -0.125;
        cell.prediction_fused = true;
        cell.timestamp = 2;
        map
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let map = sample_map();
        let bytes = map_to_bytes(&map);
        let back = map_from_bytes(&bytes).unwrap();
        assert_eq!(back.frame_counter(), map.frame_counter());
        assert_eq!(back.block_count(), map.block_count());
        for (idx, cell) in map.iter_cells() {
            let other = back.cell(idx).unwrap();
            assert_eq!(cell.logodds.to_bits(), other.logodds.to_bits());
            assert_eq!(cell.label, other.label);
            assert_eq!(cell.label_weight.to_bits(), other.label_weight.to_bits());
            assert_eq!(cell.timestamp, other.timestamp);
            assert_eq!(cell.sensor_observed, other.sensor_observed);
            assert_eq!(cell.prediction_fused, other.prediction_fused);
            assert_eq!(classify_state(cell), classify_state(other));
        }
        // Serialization is canonical: re-encoding reproduces the bytes.
        assert_eq!(map_to_bytes(&back), bytes);
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let map = sample_map();
        let mut bytes = map_to_bytes(&map);
        bytes[0] = b'X';
        assert!(map_from_bytes(&bytes).is_err());
        let bytes = map_to_bytes(&map);
        assert!(map_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bytes = map_to_bytes(&map);
        bytes.push(0);
        assert!(map_from_bytes(&bytes).is_err());
    }

    #[test]
    fn gt_roundtrip() {
        let gt = GroundTruthVolume {
            origin: [0.0, -0.05, 0.1],
            dims: [4, 3, 2],
            voxel_size: 0.05,
            labels: (0..24).map(|i| (i % 12) as u8).collect(),
        };
        let bytes = gt_to_bytes(&gt);
        assert_eq!(gt_from_bytes(&bytes).unwrap(), gt);
        assert!(gt_from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn ply_layout() {
        let map = sample_map();
        let ply = ply_string(&map);
        assert!(ply.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(ply.contains("property uchar label"));
        // The single occupied voxel center with the chair palette color.
        let [r, g, b] = LABEL_PALETTE[LabelId::CHAIR.id() as usize];
        assert!(ply
            .lines()
            .last()
            .unwrap()
            .ends_with(&format!("{r} {g} {b} {}", LabelId::CHAIR.id())));
        assert!(ply.contains("0.025000 0.025000 0.025000"));
        assert_eq!(ply_string(&map), ply, "deterministic output");
    }

    #[test]
    fn depth_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut img = DepthImage::new(4, 3);
        img.set(0, 0, 1.234);
        img.set(3, 2, 0.05);
        save_depth_png(&img, &path).unwrap();
        let back = load_depth_png(&path).unwrap();
        assert_eq!((back.width, back.height), (4, 3));
        // Quantized to millimeters.
        assert_relative_eq!(back.at(0, 0) as f64, 1.234, epsilon = 5e-4);
        assert_relative_eq!(back.at(3, 2) as f64, 0.05, epsilon = 5e-4);
        assert_eq!(back.at(1, 1), 0.0);
    }

    #[test]
    fn trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.4, 0.2);
        let poses = vec![
            (0.0, Pose::identity()),
            (
                1.5,
                Pose::from_parts(rot.into_inner(), Vector3::new(1.0, 2.0, -0.5)).unwrap(),
            ),
        ];
        save_trajectory(&poses, &path).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((ts, p), (bts, bp)) in poses.iter().zip(back.iter()) {
            assert_relative_eq!(ts, bts, epsilon = 1e-9);
            let d: Matrix3<f64> = p.rotation() - bp.rotation();
            assert!(d.norm() < 1e-6);
            assert!((p.translation() - bp.translation()).norm() < 1e-8);
        }
    }

    #[test]
    fn trajectory_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0.0 1 2 3 0 0 0\n").unwrap();
        assert!(load_trajectory(&path).is_err());
        std::fs::write(&path, "# comment\n\n0.0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(load_trajectory(&path).unwrap().len(), 1);
    }

    #[test]
    fn intrinsics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intr.json");
        let intr = CameraIntrinsics {
            fx: 80.0,
            fy: 80.0,
            cx: 79.5,
            cy: 59.5,
            width: 160,
            height: 120,
        };
        save_intrinsics(&intr, &path).unwrap();
        let back = load_intrinsics(&path).unwrap();
        assert_eq!(back.width, 160);
        assert_relative_eq!(back.fx, 80.0);
    }
}
