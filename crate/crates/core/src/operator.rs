//! Per-frame photoacoustic forward operator `H_k` and its exact transpose.
//!
//! The forward map is evaluated in three stages for every channel:
//!
//! 1. each node contributes `f_n Δs³ / d` to the delay profile, split
//!    linearly between the two samples bracketing its time of flight
//!    `d / c0`;
//! 2. the profile is differentiated in fast time with central differences
//!    (one-sided first-order differences at both ends);
//! 3. the result is scaled by `1 / (4π c0²)`.
//!
//! Sample `i` (0-based) of a trace corresponds to fast time `(i + 1)·ΔT`.
//! The adjoint applies the transposed stencil and gathers with the same
//! interpolation weights, so `<H f, g> = <f, Hᵀ g>` up to rounding.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pose_for_frame, FramePose, Point3, ScanGeometry, VoxelGrid};

/// Image of one frame: expansion coefficients on the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImage {
    pub grid: VoxelGrid,
    pub values: Vec<f64>,
}

impl FrameImage {
    pub fn new(grid: VoxelGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "frame image has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame image contains non-finite values"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: VoxelGrid) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }
}

/// Pressure traces of one frame, channel-major then time.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub channels: usize,
    pub samples: usize,
    pub values: Vec<f64>,
}

impl FrameData {
    pub fn new(channels: usize, samples: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * samples {
            return Err(Error::invalid(format!(
                "frame data has {} values, expected {channels}x{samples}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame data contains non-finite values"));
        }
        Ok(Self { channels, samples, values })
    }

    pub fn zeros(channels: usize, samples: usize) -> Self {
        Self {
            channels,
            samples,
            values: vec![0.0; channels * samples],
        }
    }

    pub fn trace(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.samples..(channel + 1) * self.samples]
    }
}

/// Forward result together with the share of the signal that arrived
/// outside the recording window.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub data: FrameData,
    /// Fraction of the absolute interpolation mass falling before sample 1
    /// or after sample P.
    pub truncated_fraction: f64,
}

/// Projector bound to one grid and one scan; the per-frame entry points
/// take the frame's transducer positions.
#[derive(Clone, Debug)]
pub struct Projector<'a> {
    grid: &'a VoxelGrid,
    geometry: &'a ScanGeometry,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
}

/// Sample window (0-based, inclusive) that a channel's delay profile can
/// touch, clamped to the recording.
#[derive(Clone, Copy, Debug)]
struct Window {
    lo: usize,
    hi: usize,
}

impl<'a> Projector<'a> {
    pub fn new(grid: &'a VoxelGrid, geometry: &'a ScanGeometry) -> Self {
        let d = grid.dims();
        let axis = |a: usize| (0..d[a]).map(|i| grid.axis_position(a, i)).collect::<Vec<_>>();
        let dz_max = grid.spacing();
        if geometry.sound_speed() * geometry.sample_interval() > dz_max {
            log::warn!(
                "c0*dT = {:.3e} m exceeds the grid spacing {:.3e} m; time-of-flight bins will alias",
                geometry.sound_speed() * geometry.sample_interval(),
                dz_max
            );
        }
        Self {
            grid,
            geometry,
            xs: axis(0),
            ys: axis(1),
            zs: axis(2),
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.geometry
    }

    fn check_pose(&self, pose: &FramePose) -> Result<()> {
        if pose.positions.len() != self.geometry.channel_count() {
            return Err(Error::invalid(format!(
                "pose has {} channels, geometry has {}",
                pose.positions.len(),
                self.geometry.channel_count()
            )));
        }
        let guard = self.grid.spacing() / 10.0;
        for (channel, p) in pose.positions.iter().enumerate() {
            let distance = self.grid.nearest_node_distance(*p);
            if distance < guard {
                return Err(Error::SingularGeometry { channel, distance, guard });
            }
        }
        Ok(())
    }

    fn inv_bin(&self) -> f64 {
        1.0 / (self.geometry.sound_speed() * self.geometry.sample_interval())
    }

    fn window(&self, p: Point3) -> Option<Window> {
        let (near, far) = self.grid.distance_range(p);
        let inv = self.inv_bin();
        let samples = self.geometry.sample_count();
        // Continuous sample number x = d/(c0 dT) lands in array slots x-1 and x.
        let first = (near * inv).floor() as i64 - 1;
        let last = (far * inv).floor() as i64 + 1;
        let lo = first.max(0);
        let hi = last.min(samples as i64 - 1);
        (lo <= hi).then_some(Window {
            lo: lo as usize,
            hi: hi as usize,
        })
    }

    fn scale(&self) -> f64 {
        let c0 = self.geometry.sound_speed();
        1.0 / (4.0 * std::f64::consts::PI * c0 * c0)
    }

    /// Spread one channel's delay profile into `profile` (full length P,
    /// zero on entry). Returns (in-window mass, total mass).
    fn accumulate_profile(&self, values: &[f64], p: Point3, profile: &mut [f64]) -> (f64, f64) {
        let inv_bin = self.inv_bin();
        let vol = self.grid.voxel_volume();
        let samples = profile.len();
        let nx = self.xs.len();
        let ny = self.ys.len();
        let mut kept = 0.0;
        let mut total = 0.0;
        let dx: Vec<f64> = self.xs.iter().map(|x| (x - p[0]) * (x - p[0])).collect();
        for (k, z) in self.zs.iter().enumerate() {
            let dz2 = (z - p[2]) * (z - p[2]);
            for (j, y) in self.ys.iter().enumerate() {
                let dyz2 = dz2 + (y - p[1]) * (y - p[1]);
                let row = &values[(k * ny + j) * nx..(k * ny + j + 1) * nx];
                for (dx2, &f) in dx.iter().zip(row) {
                    if f == 0.0 {
                        continue;
                    }
                    let d = (dx2 + dyz2).sqrt();
                    let amp = f * vol / d;
                    let x = d * inv_bin;
                    let base = x.floor();
                    let frac = x - base;
                    let s = base as usize;
                    let (w0, w1) = (amp * (1.0 - frac), amp * frac);
                    total += w0.abs() + w1.abs();
                    // Sample number s lives in slot s-1, s+1 in slot s.
                    if s >= 1 && s < samples {
                        profile[s - 1] += w0;
                        profile[s] += w1;
                        kept += w0.abs() + w1.abs();
                    } else {
                        if s >= 1 && s <= samples {
                            profile[s - 1] += w0;
                            kept += w0.abs();
                        }
                        if s < samples {
                            profile[s] += w1;
                            kept += w1.abs();
                        }
                    }
                }
            }
        }
        (kept, total)
    }

    /// `out = scale · D · profile` restricted to the window (and one sample
    /// either side); everything else in `out` must already be zero.
    fn differentiate(&self, profile: &[f64], w: Window, out: &mut [f64]) {
        let samples = profile.len();
        let dt = self.geometry.sample_interval();
        let c = self.scale();
        let lo = w.lo.saturating_sub(1);
        let hi = (w.hi + 1).min(samples - 1);
        for i in lo..=hi {
            let v = if i == 0 {
                (profile[1] - profile[0]) / dt
            } else if i == samples - 1 {
                (profile[i] - profile[i - 1]) / dt
            } else {
                (profile[i + 1] - profile[i - 1]) / (2.0 * dt)
            };
            out[i] = c * v;
        }
    }

    /// `out = scale · Dᵀ · trace` on the window.
    fn differentiate_transpose(&self, trace: &[f64], w: Window, out: &mut [f64]) {
        let samples = trace.len();
        let dt = self.geometry.sample_interval();
        let c = self.scale();
        let half = 0.5 / dt;
        let full = 1.0 / dt;
        // Coefficient of profile[j] in output row i.
        let coef = |i: usize, j: usize| -> f64 {
            if i == 0 {
                if j == 0 {
                    -full
                } else if j == 1 {
                    full
                } else {
                    0.0
                }
            } else if i == samples - 1 {
                if j == samples - 1 {
                    full
                } else if j == samples - 2 {
                    -full
                } else {
                    0.0
                }
            } else if j + 1 == i {
                -half
            } else if j == i + 1 {
                half
            } else {
                0.0
            }
        };
        for j in w.lo..=w.hi {
            let mut acc = 0.0;
            let first = j.saturating_sub(1);
            let last = (j + 1).min(samples - 1);
            for i in first..=last {
                acc += coef(i, j) * trace[i];
            }
            out[j] = c * acc;
        }
    }

    /// Applies `H_k` to `values` (length N) for the given pose.
    pub fn forward_values(&self, values: &[f64], pose: &FramePose) -> Result<ForwardOutput> {
        if values.len() != self.grid.len() {
            return Err(Error::invalid("image length does not match the grid"));
        }
        self.check_pose(pose)?;
        let samples = self.geometry.sample_count();
        let channels = pose.positions.len();
        let mut out = vec![0.0; channels * samples];
        let masses: Vec<(f64, f64)> = out
            .par_chunks_mut(samples)
            .zip(pose.positions.par_iter())
            .map(|(trace, &p)| {
                let Some(w) = self.window(p) else {
                    let mut scratch = vec![0.0; samples];
                    return self.accumulate_profile(values, p, &mut scratch);
                };
                let mut profile = vec![0.0; samples];
                let mass = self.accumulate_profile(values, p, &mut profile);
                self.differentiate(&profile, w, trace);
                mass
            })
            .collect();
        let (kept, total) = masses.iter().fold((0.0, 0.0), |a, m| (a.0 + m.0, a.1 + m.1));
        let truncated_fraction = if total > 0.0 { 1.0 - kept / total } else { 0.0 };
        Ok(ForwardOutput {
            data: FrameData {
                channels,
                samples,
                values: out,
            },
            truncated_fraction: truncated_fraction.max(0.0),
        })
    }

    /// Applies `H_kᵀ` to a trace vector (length Q·P) for the given pose.
    pub fn adjoint_values(&self, traces: &[f64], pose: &FramePose) -> Result<Vec<f64>> {
        let samples = self.geometry.sample_count();
        let channels = self.geometry.channel_count();
        if traces.len() != channels * samples {
            return Err(Error::invalid("trace length does not match the geometry"));
        }
        self.check_pose(pose)?;
        // Transposed difference stencil per channel, on its window only.
        let filtered: Vec<Option<(Window, Vec<f64>)>> = pose
            .positions
            .par_iter()
            .enumerate()
            .map(|(q, &p)| {
                self.window(p).map(|w| {
                    let mut h = vec![0.0; samples];
                    self.differentiate_transpose(&traces[q * samples..(q + 1) * samples], w, &mut h);
                    (w, h)
                })
            })
            .collect();

        let inv_bin = self.inv_bin();
        let vol = self.grid.voxel_volume();
        let nx = self.xs.len();
        let ny = self.ys.len();
        let mut out = vec![0.0; self.grid.len()];
        // Voxel-parallel over z-slices; each node sums channels in a fixed order.
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            let z = self.zs[k];
            for (q, entry) in filtered.iter().enumerate() {
                let Some((_, h)) = entry else { continue };
                let p = pose.positions[q];
                let dz2 = (z - p[2]) * (z - p[2]);
                for (j, y) in self.ys.iter().enumerate() {
                    let dyz2 = dz2 + (y - p[1]) * (y - p[1]);
                    let row = &mut slab[j * nx..(j + 1) * nx];
                    for (x, o) in self.xs.iter().zip(row.iter_mut()) {
                        let d = ((x - p[0]) * (x - p[0]) + dyz2).sqrt();
                        let amp = vol / d;
                        let xb = d * inv_bin;
                        let base = xb.floor();
                        let frac = xb - base;
                        let s = base as usize;
                        let mut acc = 0.0;
                        if s >= 1 && s <= samples {
                            acc += (1.0 - frac) * h[s - 1];
                        }
                        if s < samples {
                            acc += frac * h[s];
                        }
                        *o += amp * acc;
                    }
                }
            }
        });
        Ok(out)
    }

    /// Forward projection of frame `k` of the scan.
    pub fn forward_frame(&self, values: &[f64], k: usize) -> Result<FrameData> {
        let pose = pose_for_frame(self.geometry, k)?;
        Ok(self.forward_values(values, &pose)?.data)
    }

    /// Back projection `H_kᵀ g` for frame `k`.
    pub fn adjoint_frame(&self, traces: &[f64], k: usize) -> Result<Vec<f64>> {
        let pose = pose_for_frame(self.geometry, k)?;
        self.adjoint_values(traces, &pose)
    }

    /// `H_k` assembled column by column from unit images. Only sensible on
    /// small grids.
    pub fn dense_matrix(&self, k: usize) -> Result<DMatrix<f64>> {
        let pose = pose_for_frame(self.geometry, k)?;
        let n = self.grid.len();
        let mut h = DMatrix::zeros(self.geometry.frame_data_len(), n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.forward_values(&e, &pose)?.data.values;
            h.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        Ok(h)
    }
}

/// `g = H_k f` for the frame described by `pose`.
pub fn forward(f: &FrameImage, pose: &FramePose, geometry: &ScanGeometry) -> Result<FrameData> {
    Ok(forward_with_report(f, pose, geometry)?.data)
}

/// Like [`forward`], also reporting how much signal fell outside the recording.
pub fn forward_with_report(f: &FrameImage, pose: &FramePose, geometry: &ScanGeometry) -> Result<ForwardOutput> {
    let out = Projector::new(&f.grid, geometry).forward_values(&f.values, pose)?;
    if out.truncated_fraction > 0.0 {
        log::debug!(
            "frame {}: {:.3}% of the signal arrives outside the recording window",
            pose.frame,
            100.0 * out.truncated_fraction
        );
    }
    Ok(out)
}

/// `f = H_kᵀ g` on `grid`.
pub fn adjoint(g: &FrameData, pose: &FramePose, geometry: &ScanGeometry, grid: &VoxelGrid) -> Result<FrameImage> {
    if g.channels != geometry.channel_count() || g.samples != geometry.sample_count() {
        return Err(Error::invalid("frame data shape does not match the geometry"));
    }
    let values = Projector::new(grid, geometry).adjoint_values(&g.values, pose)?;
    Ok(FrameImage {
        grid: grid.clone(),
        values,
    })
}

/// Power-iteration estimate of the largest eigenvalue of `Σ_k H_kᵀ H_k`
/// over `frames`. The Rayleigh quotient of the current iterate is returned,
/// which never decreases from one iteration to the next.
pub fn estimate_operator_norm(
    geometry: &ScanGeometry,
    grid: &VoxelGrid,
    frames: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::invalid("operator norm needs at least one frame"));
    }
    if iterations == 0 {
        return Err(Error::invalid("operator norm needs at least one iteration"));
    }
    let projector = Projector::new(grid, geometry);
    let poses = frames
        .iter()
        .map(|&k| pose_for_frame(geometry, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..grid.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut x);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let mut y = vec![0.0; grid.len()];
        for pose in &poses {
            let g = projector.forward_values(&x, pose)?.data;
            let back = projector.adjoint_values(&g.values, pose)?;
            for (a, b) in y.iter_mut().zip(&back) {
                *a += b;
            }
        }
        estimate = dot(&x, &y);
        x = y;
        if normalize(&mut x) == 0.0 {
            break;
        }
    }
    Ok(estimate)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}
