//! Numerical dynamic phantoms and synthetic measurement sets.
//!
//! Frame `k` of a `K`-frame phantom sits at normalized time
//! `τ = k / (K − 1)` (τ = 0 when K = 1). Spatial layouts use coordinates
//! normalized by the grid half-extent, so the same phantom can be sampled
//! on grids of any resolution.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_for_frame, Point3, ScanGeometry, VoxelGrid};
use crate::lowrank::{FactoredImage, SpatioTemporal};
use crate::operator::{FrameData, Projector};

/// Dense space × time image: `frames[k]` is `f_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicImage {
    pub grid: VoxelGrid,
    pub frames: Vec<Vec<f64>>,
}

impl DynamicImage {
    pub fn new(grid: VoxelGrid, frames: Vec<Vec<f64>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("a dynamic image needs at least one frame"));
        }
        if let Some(k) = frames.iter().position(|f| f.len() != grid.len()) {
            return Err(Error::invalid(format!(
                "frame {k} has {} values for a grid of {} nodes",
                frames[k].len(),
                grid.len()
            )));
        }
        Ok(Self { grid, frames })
    }

    pub fn zeros(grid: VoxelGrid, frame_count: usize) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![vec![0.0; n]; frame_count])
    }

    /// Dense expansion of a factored image on `grid`.
    pub fn from_factored(grid: VoxelGrid, f: &FactoredImage) -> Result<Self> {
        if grid.len() != f.voxel_count() {
            return Err(Error::invalid("grid size does not match the factored image"));
        }
        let frames = (0..f.frame_count()).map(|k| f.frame(k)).collect::<Result<Vec<_>>>()?;
        Self::new(grid, frames)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// N × K matrix with frames as columns.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.grid.len(), self.frames.len(), |n, k| self.frames[k][n])
    }

    /// Singular values of F, decreasing.
    pub fn singular_values(&self) -> Vec<f64> {
        crate::lowrank::dense_singular_values(&self.to_matrix())
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.frames.iter().flatten().map(|v| v * v).sum()
    }

    /// Largest per-frame difference `max_k |a[k+1] − a[k]|` over all voxels.
    pub fn max_temporal_step(&self) -> f64 {
        self.frames
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).abs()))
            .fold(0.0, f64::max)
    }
}

impl SpatioTemporal for DynamicImage {
    fn voxel_count(&self) -> usize {
        self.grid.len()
    }
    fn frame_count(&self) -> usize {
        self.frames.len()
    }
    fn frame_values(&self, k: usize) -> Result<Vec<f64>> {
        self.frames
            .get(k)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("frame {k} out of range")))
    }
    fn voxel_values(&self, n: usize) -> Result<Vec<f64>> {
        if n >= self.grid.len() {
            return Err(Error::invalid(format!("voxel {n} out of range")));
        }
        Ok(self.frames.iter().map(|f| f[n]).collect())
    }
    fn nuclear_norm(&self) -> f64 {
        self.singular_values().iter().sum()
    }
    fn temporal_penalty(&self) -> f64 {
        0.5 * self
            .frames
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
            .sum::<f64>()
    }
}

/// How a measurement set was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDescription {
    pub percent: f64,
    pub seed: u64,
    /// Standard deviation actually used, `percent/100 · max|G|`.
    pub std: f64,
    /// Reference amplitude: maximum absolute entry of the noiseless data.
    pub max_abs: f64,
}

/// Per-frame pressure traces for a whole scan.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub geometry: ScanGeometry,
    pub frames: Vec<FrameData>,
    pub noise: Option<NoiseDescription>,
}

impl MeasurementSet {
    pub fn new(geometry: ScanGeometry, frames: Vec<FrameData>) -> Result<Self> {
        if frames.len() != geometry.frame_count() {
            return Err(Error::invalid(format!(
                "{} frames of data for a scan of {} frames",
                frames.len(),
                geometry.frame_count()
            )));
        }
        let (q, p) = (geometry.channel_count(), geometry.sample_count());
        if let Some(k) = frames.iter().position(|f| f.channels != q || f.samples != p) {
            return Err(Error::invalid(format!("frame {k} does not have {q} channels x {p} samples")));
        }
        Ok(Self {
            geometry,
            frames,
            noise: None,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.frames
            .iter()
            .flat_map(|f| f.values.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖G‖²_F`.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.frames.iter().flat_map(|f| f.values.iter()).map(|v| v * v).sum()
    }
}

/// One voxel's values over all frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeActivityCurve {
    pub label: String,
    pub values: Vec<f64>,
}

fn normalized_time(k: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        k as f64 / (frames - 1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raised-cosine step from 0 at `start` to 1 at `end`.
fn smooth_step(t: f64, start: f64, end: f64) -> f64 {
    if t <= start {
        0.0
    } else if t >= end {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * (t - start) / (end - start)).cos())
    }
}

/// 1 inside `inner`, cosine taper to 0 at 1.
fn taper(rho: f64, inner: f64) -> f64 {
    if rho <= inner {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (rho - inner) / (1.0 - inner)).cos())
    }
}

/// Grid coordinates scaled to [-1, 1] by the half-extent of each axis.
fn normalized_position(grid: &VoxelGrid, n: usize) -> Point3 {
    let p = grid.position(n);
    let c = grid.center();
    let d = grid.dims();
    let h = grid.spacing();
    [0, 1, 2].map(|a| {
        let half = d[a] as f64 * h / 2.0;
        (p[a] - c[a]) / half
    })
}

/// Time-activity curves of the rank-4 phantom's four regions.
pub fn rank4_tacs(frames: usize) -> [TimeActivityCurve; 4] {
    let curve = |label: &str, f: &dyn Fn(f64) -> f64| TimeActivityCurve {
        label: label.to_string(),
        values: (0..frames).map(|k| f(normalized_time(k, frames))).collect(),
    };
    [
        curve("region 1 (static ring)", &|_| 0.5),
        curve("region 2 (ramp)", &|t| 0.2 + 0.8 * t),
        curve("region 3 (raised cosine)", &|t| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t).cos())),
        curve("region 4 (delayed sigmoid)", &|t| sigmoid((t - 0.6) / 0.06)),
    ]
}

/// Region index (0..4) of a node of the rank-4 phantom, if any.
pub fn rank4_region(grid: &VoxelGrid, n: usize) -> Option<usize> {
    let p = normalized_position(grid, n);
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if (0.55..=0.9).contains(&rho) {
        return Some(0);
    }
    for (r, deg) in [90.0f64, 210.0, 330.0].iter().enumerate() {
        let (s, c) = deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - 0.3 * c, p[1] - 0.3 * s);
        if (dx * dx + dy * dy).sqrt() <= 0.18 {
            return Some(r + 1);
        }
    }
    None
}

/// Sum of four indicator × TAC outer products, constant along z.
pub fn make_rank4_phantom(dims: [usize; 3], frames: usize, spacing: f64) -> Result<DynamicImage> {
    if frames < 4 {
        return Err(Error::invalid("a rank-4 phantom needs at least 4 frames"));
    }
    let grid = VoxelGrid::centered(spacing, dims)?;
    let regions: Vec<Option<usize>> = (0..grid.len()).map(|n| rank4_region(&grid, n)).collect();
    for r in 0..4 {
        if !regions.contains(&Some(r)) {
            return Err(Error::invalid(format!("grid {dims:?} is too coarse to resolve region {}", r + 1)));
        }
    }
    let tacs = rank4_tacs(frames);
    let out = (0..frames)
        .map(|k| regions.iter().map(|reg| reg.map_or(0.0, |r| tacs[r].values[k])).collect())
        .collect();
    DynamicImage::new(grid, out)
}

const BLOB_BACKGROUND: f64 = 0.1;
const TAC_LOW: f64 = 0.15;
const TAC_HIGH: f64 = 0.9;

/// Largest intensity any voxel of the blob phantom can take.
pub const BLOB_PEAK: f64 = BLOB_BACKGROUND + TAC_HIGH;

/// Bound on `|a[k+1] − a[k]|` for every voxel of a `frames`-frame blob phantom.
pub fn blob_slope_bound(frames: usize) -> f64 {
    BLOB_PEAK * 12.0 / frames as f64
}

struct Blob {
    center: Point3,
    axes: Point3,
}

const BLOBS: [Blob; 4] = [
    Blob { center: [-0.42, 0.38, 0.2], axes: [0.22, 0.18, 0.26] },
    Blob { center: [0.42, 0.38, -0.2], axes: [0.2, 0.2, 0.24] },
    Blob { center: [-0.42, -0.38, -0.2], axes: [0.2, 0.18, 0.24] },
    Blob { center: [0.42, -0.38, 0.2], axes: [0.22, 0.2, 0.26] },
];

const OUTER_AXES: Point3 = [0.92, 0.85, 0.88];
const TUBE_RADIUS: f64 = 0.1;

/// Bolus passage along each tube: (start τ, end τ, front width).
const TUBE_TRANSIT: [(f64, f64, f64); 2] = [(0.3, 0.5, 0.08), (0.55, 0.85, 0.08)];

fn blob_tac_value(b: usize, t: f64) -> f64 {
    let span = TAC_HIGH - TAC_LOW;
    match b {
        0 => TAC_HIGH - span * sigmoid((t - 0.35) / 0.08),
        1 => TAC_LOW + span * sigmoid((t - 0.45) / 0.08),
        2 => TAC_HIGH - span * sigmoid((t - 0.55) / 0.06),
        _ => TAC_LOW + span * smooth_step(t, 0.84, 0.97),
    }
}

/// Ground-truth TACs of the four inner blobs.
pub fn blob_tacs(frames: usize) -> [TimeActivityCurve; 4] {
    let labels = ["blob 1 (wash-out)", "blob 2 (wash-in)", "blob 3 (wash-out)", "blob 4 (late wash-in)"];
    [0, 1, 2, 3].map(|b| TimeActivityCurve {
        label: labels[b].to_string(),
        values: (0..frames).map(|k| blob_tac_value(b, normalized_time(k, frames))).collect(),
    })
}

/// Grid nodes closest to the four blob centers.
pub fn blob_center_voxels(grid: &VoxelGrid) -> [[usize; 3]; 4] {
    let d = grid.dims();
    let h = grid.spacing();
    let c = grid.center();
    let o = grid.origin();
    [0, 1, 2, 3].map(|b| {
        [0, 1, 2].map(|a| {
            let half = d[a] as f64 * h / 2.0;
            let x = c[a] + BLOBS[b].center[a] * half;
            ((x - o[a]) / h).round().clamp(0.0, (d[a] - 1) as f64) as usize
        })
    })
}

fn blob_profile(b: usize, p: Point3) -> f64 {
    let blob = &BLOBS[b];
    let rho = (0..3)
        .map(|a| ((p[a] - blob.center[a]) / blob.axes[a]).powi(2))
        .sum::<f64>()
        .sqrt();
    taper(rho, 0.6)
}

fn bezier(a: Point3, ctrl: Point3, b: Point3, s: f64) -> Point3 {
    [0, 1, 2].map(|i| (1.0 - s) * (1.0 - s) * a[i] + 2.0 * (1.0 - s) * s * ctrl[i] + s * s * b[i])
}

/// Curve parameter and normalized distance of the closest point on a tube.
fn tube_closest(tube: usize, p: Point3) -> (f64, f64) {
    let (a, b) = if tube == 0 { (&BLOBS[0], &BLOBS[1]) } else { (&BLOBS[2], &BLOBS[3]) };
    let mid = [0, 1, 2].map(|i| 0.5 * (a.center[i] + b.center[i]));
    // Bowed toward the center of the phantom and upward.
    let ctrl = [mid[0], 0.2 * mid[1], mid[2] + 0.45];
    let samples = 400;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=samples {
        let s = i as f64 / samples as f64;
        let q = bezier(a.center, ctrl, b.center, s);
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        if d < best.1 {
            best = (s, d);
        }
    }
    best
}

fn tube_tac_value(tube: usize, s: f64, t: f64) -> f64 {
    let (t0, t1, w) = TUBE_TRANSIT[tube];
    let arrival = t0 + (t1 - t0) * s;
    TAC_LOW + (TAC_HIGH - TAC_LOW) * (-0.5 * ((t - arrival) / w).powi(2)).exp()
}

/// Four ellipsoidal blobs with smooth TACs inside a static ellipsoid, joined
/// pairwise (1→2, 3→4) by curved tubes carrying a traveling bolus.
pub fn make_blob_phantom(extent: Point3, spacing: f64, frames: usize) -> Result<DynamicImage> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be >= 1"));
    }
    if !(spacing > 0.0) {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let ratio = extent[a] / spacing;
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "extent {:.4e} m is not a multiple of the spacing {spacing:.4e} m",
                extent[a]
            )));
        }
        dims[a] = n as usize;
    }
    let grid = VoxelGrid::centered(spacing, dims)?;

    struct Node {
        background: f64,
        blobs: [f64; 4],
        /// (tube weight, curve parameter) for each tube.
        tubes: [(f64, f64); 2],
    }
    let nodes: Vec<Node> = (0..grid.len())
        .map(|n| {
            let p = normalized_position(&grid, n);
            let outer = (0..3).map(|a| (p[a] / OUTER_AXES[a]).powi(2)).sum::<f64>() <= 1.0;
            let blobs = [0, 1, 2, 3].map(|b| blob_profile(b, p));
            let covered: f64 = blobs.iter().sum();
            let tubes = [0, 1].map(|t| {
                let (s, d) = tube_closest(t, p);
                (taper(d / TUBE_RADIUS, 0.5) * (1.0 - covered).max(0.0), s)
            });
            Node {
                background: if outer { BLOB_BACKGROUND } else { 0.0 },
                blobs,
                tubes,
            }
        })
        .collect();

    let out = (0..frames)
        .map(|k| {
            let t = normalized_time(k, frames);
            let blob_vals = [0, 1, 2, 3].map(|b| blob_tac_value(b, t));
            nodes
                .iter()
                .map(|node| {
                    let mut v = node.background;
                    for b in 0..4 {
                        v += node.blobs[b] * blob_vals[b];
                    }
                    // Where the tubes cross, the brighter one wins so the sum stays bounded.
                    let tube = (0..2)
                        .map(|i| node.tubes[i].0 * tube_tac_value(i, node.tubes[i].1, t))
                        .fold(0.0, f64::max);
                    v + tube
                })
                .collect()
        })
        .collect();
    DynamicImage::new(grid, out)
}

/// `ḡ_k = H_k f_k` for every frame of the scan.
pub fn simulate_measurements(phantom: &DynamicImage, geometry: &ScanGeometry) -> Result<MeasurementSet> {
    if phantom.frame_count() != geometry.frame_count() {
        return Err(Error::invalid(format!(
            "phantom has {} frames, scan has {}",
            phantom.frame_count(),
            geometry.frame_count()
        )));
    }
    let projector = Projector::new(&phantom.grid, geometry);
    let mut truncated = 0.0f64;
    let mut frames = Vec::with_capacity(phantom.frame_count());
    for (k, f) in phantom.frames.iter().enumerate() {
        let pose = pose_for_frame(geometry, k)?;
        let out = projector.forward_values(f, &pose)?;
        truncated = truncated.max(out.truncated_fraction);
        frames.push(out.data);
    }
    if truncated > 0.0 {
        log::warn!(
            "up to {:.2}% of the signal of a frame arrives outside the recording window",
            100.0 * truncated
        );
    }
    MeasurementSet::new(geometry.clone(), frames)
}

/// Adds i.i.d. Gaussian noise with standard deviation `percent/100 · max|G|`.
pub fn add_noise(data: &MeasurementSet, percent: f64, seed: u64) -> Result<MeasurementSet> {
    if !(percent >= 0.0) || !percent.is_finite() {
        return Err(Error::invalid("noise percentage must be a finite nonnegative number"));
    }
    let max_abs = data.max_abs();
    let std = percent / 100.0 * max_abs;
    let mut out = data.clone();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for frame in &mut out.frames {
            for v in &mut frame.values {
                *v += normal.sample(&mut rng);
            }
        }
    }
    out.noise = Some(NoiseDescription {
        percent,
        seed,
        std,
        max_abs,
    });
    Ok(out)
}

/// Values of one voxel across all frames.
pub fn extract_tac<I: SpatioTemporal + ?Sized>(image: &I, grid: &VoxelGrid, voxel: [usize; 3]) -> Result<TimeActivityCurve> {
    if grid.len() != image.voxel_count() {
        return Err(Error::invalid("grid size does not match the image"));
    }
    let n = grid
        .index(voxel)
        .ok_or_else(|| Error::invalid(format!("voxel {voxel:?} lies outside the grid {:?}", grid.dims())))?;
    Ok(TimeActivityCurve {
        label: format!("voxel {voxel:?}"),
        values: image.voxel_values(n)?,
    })
}
