//! Semantic scene completion backend contract and the deterministic
//! reference backends (null, heuristic, ground-truth oracle, external
//! process).

use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::Duration;

use crate::map::{LabelId, NUM_LABELS};
use crate::submap::{SubMapGrid, SUBMAP_CELLS, SUBMAP_DIM};
use crate::synth::GroundTruthVolume;
use crate::{Error, Result};

/// Framing magic for the external completion protocol.
pub const PROTOCOL_MAGIC: &[u8; 8] = b"SCFUSE01";
/// Default reply deadline for the external backend.
pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(1);

/// Dense per-voxel prediction for one sub-map: label 0 marks an empty
/// prediction that contributes nothing at integration.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub anchor: crate::submap::SubMapAnchor,
    pub labels: Vec<u8>,
    pub confidence: Vec<f32>,
}

impl CompletionResult {
    pub fn empty(anchor: crate::submap::SubMapAnchor) -> Self {
        Self {
            anchor,
            labels: vec![0; SUBMAP_CELLS],
            confidence: vec![0.0; SUBMAP_CELLS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != SUBMAP_CELLS || self.confidence.len() != SUBMAP_CELLS {
            return Err(Error::Format("completion result has wrong cell count".into()));
        }
        for &l in &self.labels {
            if l as usize >= NUM_LABELS {
                return Err(Error::Protocol(format!("label byte {l} out of range")));
            }
        }
        for &w in &self.confidence {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Protocol(format!("confidence {w} out of range")));
            }
        }
        Ok(())
    }
}

pub trait CompletionBackend: Send {
    fn name(&self) -> &str;
    fn complete(&mut self, grid: &SubMapGrid) -> Result<CompletionResult>;
}

/// Predicts nothing; a pipeline run with this backend is pure reconstruction.
#[derive(Debug, Default)]
pub struct NullBackend;

impl CompletionBackend for NullBackend {
    fn name(&self) -> &str {
        "null"
    }

    fn complete(&mut self, grid: &SubMapGrid) -> Result<CompletionResult> {
        Ok(CompletionResult::empty(grid.anchor))
    }
}

const OCCUPIED_THRESHOLD: f32 = 0.5;
/// Elevation bands for the occupied-voxel label vote, in grid levels.
const FLOOR_BAND: usize = 6;
const CEILING_BAND: usize = SUBMAP_DIM - 6;
/// Columns whose occupied span reaches this height are treated as walls.
const WALL_SPAN: usize = SUBMAP_DIM / 2;

const CONF_FLOOR_FILL: f32 = 0.6;
const CONF_WALL_EXTEND: f32 = 0.5;
const CONF_EXTRUDE: f32 = 0.4;
const CONF_RELABEL: f32 = 0.3;

/// Deterministic rule-based completion. Occupied voxels get an elevation /
/// column-span label vote; masked voxels are filled by floor extension,
/// downward extrusion under occupied voxels and lateral wall growth.
#[derive(Debug, Default)]
pub struct HeuristicBackend;

impl CompletionBackend for HeuristicBackend {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn complete(&mut self, grid: &SubMapGrid) -> Result<CompletionResult> {
        let mut result = CompletionResult::empty(grid.anchor);
        let occupied =
            |x: usize, y: usize, z: usize| grid.occupancy[SubMapGrid::linear(x, y, z)] > OCCUPIED_THRESHOLD;

        // Column occupancy spans, used for the wall vote.
        let mut span = vec![(SUBMAP_DIM, 0usize); SUBMAP_DIM * SUBMAP_DIM];
        for z in 0..SUBMAP_DIM {
            for x in 0..SUBMAP_DIM {
                let s = &mut span[x + SUBMAP_DIM * z];
                for y in 0..SUBMAP_DIM {
                    if occupied(x, y, z) {
                        s.0 = s.0.min(y);
                        s.1 = s.1.max(y + 1);
                    }
                }
            }
        }

        // Label vote for already-occupied voxels.
        for z in 0..SUBMAP_DIM {
            for y in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    if !occupied(x, y, z) {
                        continue;
                    }
                    let (lo, hi) = span[x + SUBMAP_DIM * z];
                    let label = if hi > lo && hi - lo >= WALL_SPAN {
                        LabelId::WALL
                    } else if y < FLOOR_BAND {
                        LabelId::FLOOR
                    } else if y >= CEILING_BAND {
                        LabelId::CEILING
                    } else {
                        LabelId::OBJECT
                    };
                    let i = SubMapGrid::linear(x, y, z);
                    result.labels[i] = label.id();
                    result.confidence[i] = CONF_RELABEL;
                }
            }
        }

        // Dominant lowest occupied horizontal layer.
        let mut level_counts = vec![0usize; SUBMAP_DIM];
        for y in 0..SUBMAP_DIM {
            for z in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    if occupied(x, y, z) {
                        level_counts[y] += 1;
                    }
                }
            }
        }
        let max_count = level_counts.iter().copied().max().unwrap_or(0);
        let floor_level = level_counts
            .iter()
            .position(|&c| c > 0 && 2 * c >= max_count);

        for z in 0..SUBMAP_DIM {
            for y in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    let i = SubMapGrid::linear(x, y, z);
                    if grid.mask[i] == 0 {
                        continue;
                    }
                    // (a) floor fill across the dominant lowest layer.
                    if Some(y) == floor_level {
                        result.labels[i] = LabelId::FLOOR.id();
                        result.confidence[i] = CONF_FLOOR_FILL;
                        continue;
                    }
                    // (b) downward extrusion below an occupied voxel.
                    if floor_level.map_or(true, |fl| y > fl) {
                        if let Some(above) =
                            (y + 1..SUBMAP_DIM).find(|&yy| occupied(x, yy, z))
                        {
                            let j = SubMapGrid::linear(x, above, z);
                            result.labels[i] = result.labels[j];
                            result.confidence[i] = CONF_EXTRUDE;
                            continue;
                        }
                    }
                    // (c) wall extension from >= 2 lateral wall neighbors.
                    let mut wall_neighbors = 0;
                    for (nx, nz) in [
                        (x.wrapping_sub(1), z),
                        (x + 1, z),
                        (x, z.wrapping_sub(1)),
                        (x, z + 1),
                    ] {
                        if nx < SUBMAP_DIM && nz < SUBMAP_DIM && occupied(nx, y, nz) {
                            let j = SubMapGrid::linear(nx, y, nz);
                            if result.labels[j] == LabelId::WALL.id() {
                                wall_neighbors += 1;
                            }
                        }
                    }
                    if wall_neighbors >= 2 {
                        result.labels[i] = LabelId::WALL.id();
                        result.confidence[i] = CONF_WALL_EXTEND;
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Upper-bound backend: crops the ground-truth volume at the anchor,
/// confidence 1 wherever the ground truth is non-empty.
pub struct OracleBackend {
    gt: Arc<GroundTruthVolume>,
    voxel_size: f64,
}

impl OracleBackend {
    pub fn new(gt: Arc<GroundTruthVolume>, voxel_size: f64) -> Result<Self> {
        gt.check_alignment(voxel_size)?;
        Ok(Self { gt, voxel_size })
    }
}

impl CompletionBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&mut self, grid: &SubMapGrid) -> Result<CompletionResult> {
        let base = grid.anchor.base_voxel();
        let origin = self.gt.origin_voxel(self.voxel_size);
        let dims = self.gt.dims;
        // Reject anchors with no overlap at all; partially covered anchors
        // read empty outside the volume.
        let overlap = (0..3).all(|a| {
            base[a] < origin[a] + dims[a] as i32 && base[a] + SUBMAP_DIM as i32 > origin[a]
        });
        if !overlap {
            return Err(Error::Backend {
                backend: "oracle".into(),
                reason: format!("anchor {:?} outside ground-truth extent", grid.anchor),
            });
        }
        let mut result = CompletionResult::empty(grid.anchor);
        for z in 0..SUBMAP_DIM {
            for y in 0..SUBMAP_DIM {
                for x in 0..SUBMAP_DIM {
                    let gx = base[0] + x as i32 - origin[0];
                    let gy = base[1] + y as i32 - origin[1];
                    let gz = base[2] + z as i32 - origin[2];
                    if gx < 0
                        || gy < 0
                        || gz < 0
                        || gx >= dims[0] as i32
                        || gy >= dims[1] as i32
                        || gz >= dims[2] as i32
                    {
                        continue;
                    }
                    let label = self.gt.label_at([gx as usize, gy as usize, gz as usize]);
                    if label.is_empty() {
                        continue;
                    }
                    let i = SubMapGrid::linear(x, y, z);
                    result.labels[i] = label.id();
                    result.confidence[i] = 1.0;
                }
            }
        }
        Ok(result)
    }
}

/// Streams sub-maps to a child process over stdin/stdout using the framed
/// binary protocol; a timeout or malformed reply fails only the current
/// sub-map.
pub struct ExternalBackend {
    command: Vec<String>,
    timeout: Duration,
    conn: Option<Conn>,
}

struct Conn {
    child: Child,
    stdin: ChildStdin,
    rx: Receiver<std::io::Result<Vec<u8>>>,
}

impl ExternalBackend {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external backend command is empty".into()));
        }
        Ok(Self {
            command,
            timeout,
            conn: None,
        })
    }

    fn spawn(&mut self) -> Result<()> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend {
                backend: "external".into(),
                reason: format!("spawn {:?}: {e}", self.command[0]),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            match read_frame(&mut stdout) {
                Ok(payload) => {
                    if tx.send(Ok(payload)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        self.conn = Some(Conn { child, stdin, rx });
        Ok(())
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(mut conn) = self.conn.take() {
            let _ = conn.child.kill();
            let _ = conn.child.wait();
        }
    }
}

/// Writes one framed message: magic, u32 little-endian length, payload.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(PROTOCOL_MAGIC)?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one framed message, validating the magic.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PROTOCOL_MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad protocol magic",
        ));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

/// Reply payload layout: 64^3 label bytes followed by 64^3 little-endian
/// f32 confidences.
pub fn decode_reply(
    anchor: crate::submap::SubMapAnchor,
    payload: &[u8],
) -> Result<CompletionResult> {
    let expected = SUBMAP_CELLS + SUBMAP_CELLS * 4;
    if payload.len() != expected {
        return Err(Error::Protocol(format!(
            "reply payload must be {expected} bytes, got {}",
            payload.len()
        )));
    }
    let labels = payload[..SUBMAP_CELLS].to_vec();
    let mut confidence = Vec::with_capacity(SUBMAP_CELLS);
    for chunk in payload[SUBMAP_CELLS..].chunks_exact(4) {
        confidence.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let result = CompletionResult {
        anchor,
        labels,
        confidence,
    };
    result.validate()?;
    Ok(result)
}

impl CompletionBackend for ExternalBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn complete(&mut self, grid: &SubMapGrid) -> Result<CompletionResult> {
        if self.conn.is_none() {
            self.spawn()?;
        }
        let conn = self.conn.as_mut().unwrap();
        let request = grid.to_bytes();
        if let Err(e) = write_frame(&mut conn.stdin, &request) {
            self.conn = None;
            return Err(Error::Backend {
                backend: "external".into(),
                reason: format!("write failed: {e}"),
            });
        }
        match conn.rx.recv_timeout(self.timeout) {
            Ok(Ok(payload)) => decode_reply(grid.anchor, &payload),
            Ok(Err(e)) => {
                self.conn = None;
                Err(Error::Protocol(format!("read failed: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.conn = None;
                Err(Error::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.conn = None;
                Err(Error::Protocol("reader thread terminated".into()))
            }
        }
    }
}
