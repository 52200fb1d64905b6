//! Per-class IoU / precision / recall between a fused map and a ground-truth
//! volume, over visible surfaces only or the full scan.

use serde::{Deserialize, Serialize};

use crate::map::{GlobalMap, VoxelState, LABEL_NAMES, NUM_SEMANTIC_LABELS};
use crate::synth::GroundTruthVolume;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Score only voxels the sensor actually observed (-s).
    SurfaceOnly,
    /// Score every voxel of the ground-truth extent (-f).
    Full,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Skip GT-occupied voxels the sensor carved to Empty, reporting their
    /// count instead of counting them as misses.
    pub exclude_carved: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_carved: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub label: u8,
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means over classes whose ratio is defined.
    pub mean_iou: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub evaluated_voxels: u64,
    /// GT-occupied voxels skipped because the sensor carved them Empty.
    pub carved_excluded: u64,
}

impl EvalReport {
    /// One CSV row per class: label,name,tp,fp,fn,iou,precision,recall.
    pub fn csv(&self) -> String {
        let mut out = String::from("label,name,tp,fp,fn,iou,precision,recall\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.label,
                c.name,
                c.tp,
                c.fp,
                c.fn_,
                fmt(c.iou),
                fmt(c.precision),
                fmt(c.recall)
            ));
        }
        out
    }
}

pub fn evaluate(map: &GlobalMap, gt: &GroundTruthVolume, mode: EvalMode) -> Result<EvalReport> {
    evaluate_with(map, gt, mode, &EvalOptions::default())
}

/// Prediction per voxel is the stored label when the state is Occupied,
/// empty otherwise. Counts run over labels 1..=11 inside the GT extent.
pub fn evaluate_with(
    map: &GlobalMap,
    gt: &GroundTruthVolume,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    gt.check_alignment(map.config().voxel_size)?;
    let origin = gt.origin_voxel(map.config().voxel_size);
    let mut tp = [0u64; NUM_SEMANTIC_LABELS + 1];
    let mut fp = [0u64; NUM_SEMANTIC_LABELS + 1];
    let mut fn_ = [0u64; NUM_SEMANTIC_LABELS + 1];
    let mut evaluated = 0u64;
    let mut carved = 0u64;

    for z in 0..gt.dims[2] {
        for y in 0..gt.dims[1] {
            for x in 0..gt.dims[0] {
                let truth = gt.labels[gt.linear([x, y, z])];
                let idx = [
                    origin[0] + x as i32,
                    origin[1] + y as i32,
                    origin[2] + z as i32,
                ];
                let cell = map.cell(idx);
                if mode == EvalMode::SurfaceOnly && !cell.map_or(false, |c| c.sensor_observed) {
                    continue;
                }
                let state = map.state(idx);
                if opts.exclude_carved
                    && truth != 0
                    && state == VoxelState::Empty
                    && cell.map_or(false, |c| c.sensor_observed)
                {
                    carved += 1;
                    continue;
                }
                let pred = match state {
                    VoxelState::Occupied => cell.map_or(0, |c| c.label.id()),
                    _ => 0,
                };
                evaluated += 1;
                if pred != 0 && pred == truth {
                    tp[pred as usize] += 1;
                } else {
                    if pred != 0 {
                        fp[pred as usize] += 1;
                    }
                    if truth != 0 {
                        fn_[truth as usize] += 1;
                    }
                }
            }
        }
    }

    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let per_class: Vec<ClassMetrics> = (1..=NUM_SEMANTIC_LABELS)
        .map(|c| ClassMetrics {
            label: c as u8,
            name: LABEL_NAMES[c].to_string(),
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            iou: ratio(tp[c], tp[c] + fp[c] + fn_[c]),
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
        let defined: Vec<f64> = per_class.iter().filter_map(f).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    Ok(EvalReport {
        mode,
        mean_iou: mean(|c| c.iou),
        mean_precision: mean(|c| c.precision),
        mean_recall: mean(|c| c.recall),
        per_class,
        evaluated_voxels: evaluated,
        carved_excluded: carved,
    })
}
