//! Universal back-projection of static data and a speed-of-sound sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_for_frame, VoxelGrid};
use crate::operator::FrameImage;
use crate::phantoms::MeasurementSet;

/// `b(t) = 2 p(t) − 2 t p'(t)` on the sample times `t_i = (i + 1) ΔT`,
/// with central differences inside and one-sided ones at the ends.
fn ubp_filter(trace: &[f64], dt: f64) -> Vec<f64> {
    let p = trace.len();
    (0..p)
        .map(|i| {
            let dp = if p < 2 {
                0.0
            } else if i == 0 {
                (trace[1] - trace[0]) / dt
            } else if i == p - 1 {
                (trace[i] - trace[i - 1]) / dt
            } else {
                (trace[i + 1] - trace[i - 1]) / (2.0 * dt)
            };
            let t = (i + 1) as f64 * dt;
            2.0 * trace[i] - 2.0 * t * dp
        })
        .collect()
}

/// Static UBP volume from the union of `frames`, assuming speed `c0`.
///
/// Every channel gets the same weight; the sum is divided by the number of
/// channel traces used.
pub fn ubp_reconstruct(data: &MeasurementSet, frames: &[usize], grid: &VoxelGrid, c0: f64) -> Result<FrameImage> {
    if frames.is_empty() {
        return Err(Error::invalid("back-projection needs at least one frame"));
    }
    if !(c0 > 0.0) {
        return Err(Error::invalid("speed of sound must be positive"));
    }
    let geometry = &data.geometry;
    let dt = geometry.sample_interval();
    let samples = geometry.sample_count();
    let [nx, ny, _] = grid.dims();
    let axis = |a: usize| (0..grid.dims()[a]).map(|i| grid.axis_position(a, i)).collect::<Vec<_>>();
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut volume = vec![0.0; grid.len()];
    for &k in frames {
        let pose = pose_for_frame(geometry, k)?;
        let data_k = &data.frames[k];
        let filtered: Vec<Vec<f64>> = (0..data_k.channels)
            .into_par_iter()
            .map(|q| ubp_filter(data_k.trace(q), dt))
            .collect();
        volume.par_chunks_mut(nx * ny).enumerate().for_each(|(iz, slab)| {
            let z = zs[iz];
            for (q, b) in filtered.iter().enumerate() {
                let p = pose.positions[q];
                for (iy, y) in ys.iter().enumerate() {
                    let dyz2 = (y - p[1]).powi(2) + (z - p[2]).powi(2);
                    for (ix, x) in xs.iter().enumerate() {
                        let d = ((x - p[0]).powi(2) + dyz2).sqrt();
                        // Slot i holds time (i + 1) ΔT.
                        let pos = d / (c0 * dt) - 1.0;
                        if pos < 0.0 || pos > (samples - 1) as f64 {
                            continue;
                        }
                        let i0 = pos.floor() as usize;
                        let w = pos - i0 as f64;
                        let v = if i0 + 1 < samples {
                            (1.0 - w) * b[i0] + w * b[i0 + 1]
                        } else {
                            b[i0]
                        };
                        slab[iy * nx + ix] += v;
                    }
                }
            }
        });
    }
    let count = (frames.len() * geometry.channel_count()) as f64;
    volume.iter_mut().for_each(|v| *v /= count);
    FrameImage::new(grid.clone(), volume)
}

/// Mean squared spatial gradient, forward differences along each axis.
pub fn sharpness(volume: &FrameImage) -> f64 {
    let grid = &volume.grid;
    let [nx, ny, nz] = grid.dims();
    let v = &volume.values;
    let idx = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let mut grad = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = v[idx(i, j, k)];
                if i + 1 < nx {
                    grad += (v[idx(i + 1, j, k)] - c).powi(2);
                }
                if j + 1 < ny {
                    grad += (v[idx(i, j + 1, k)] - c).powi(2);
                }
                if k + 1 < nz {
                    grad += (v[idx(i, j, k + 1)] - c).powi(2);
                }
            }
        }
    }
    grad / grid.len() as f64
}

/// UBP volumes and sharpness over a list of candidate speeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SosSweepReport {
    pub speeds: Vec<f64>,
    pub volumes: Vec<FrameImage>,
    pub sharpness: Vec<f64>,
    /// Index of the sharpest volume.
    pub best: usize,
}

impl SosSweepReport {
    pub fn suggested_speed(&self) -> f64 {
        self.speeds[self.best]
    }

    pub fn summary(&self) -> SosSweepSummary {
        SosSweepSummary {
            speeds: self.speeds.clone(),
            sharpness: self.sharpness.clone(),
            suggested_speed: self.suggested_speed(),
        }
    }
}

/// Serializable part of a sweep report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosSweepSummary {
    pub speeds: Vec<f64>,
    pub sharpness: Vec<f64>,
    pub suggested_speed: f64,
}

/// Candidate speeds `start, start + step, …` up to and including `end`.
pub fn speed_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) {
        return Err(Error::invalid("speed range needs step > 0 and end >= start"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

pub fn sos_sweep(data: &MeasurementSet, frames: &[usize], grid: &VoxelGrid, speeds: &[f64]) -> Result<SosSweepReport> {
    if speeds.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two speeds"));
    }
    if speeds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("speeds must be strictly increasing without duplicates"));
    }
    let volumes = speeds
        .iter()
        .map(|&c| ubp_reconstruct(data, frames, grid, c))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = volumes.iter().map(sharpness).collect();
    let best = (0..scores.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    Ok(SosSweepReport {
        speeds: speeds.to_vec(),
        volumes,
        sharpness: scores,
        best,
    })
}
