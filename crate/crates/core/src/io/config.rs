//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::speed_range;
use crate::error::{Error, Result};
use crate::geometry::{Acquisition, ScanGeometry, VoxelGrid};
use crate::phantoms::{blob_center_voxels, make_blob_phantom, make_rank4_phantom, DynamicImage};
use crate::solver::SolverConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    InverseCrime,
    ViewsSweep,
    NoiseSweep,
    KappaSweep,
    UbpCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Rank4,
    Blob,
    /// A single static unit voxel.
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    /// Voxel spacing in metres.
    pub spacing: f64,
    pub frames: usize,
    /// Recorded for provenance; the built-in phantoms are deterministic.
    #[serde(default)]
    pub seed: u64,
    /// Voxel of the point phantom; defaults to a voxel off the grid centre.
    #[serde(default)]
    pub point: Option<[usize; 3]>,
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::centered(self.spacing, self.dims)
    }

    pub fn point_voxel(&self) -> [usize; 3] {
        self.point
            .unwrap_or([self.dims[0] * 2 / 3, self.dims[1] / 3, self.dims[2] / 2])
    }

    pub fn build(&self) -> Result<DynamicImage> {
        match self.kind {
            PhantomKind::Rank4 => make_rank4_phantom(self.dims, self.frames, self.spacing),
            PhantomKind::Blob => {
                let extent = self.dims.map(|n| n as f64 * self.spacing);
                make_blob_phantom(extent, self.spacing, self.frames)
            }
            PhantomKind::Point => {
                let grid = self.grid()?;
                let mut f = vec![0.0; grid.len()];
                let n = grid
                    .index(self.point_voxel())
                    .ok_or_else(|| Error::Config(format!("point voxel {:?} is outside the grid", self.point_voxel())))?;
                f[n] = 1.0;
                DynamicImage::new(grid, vec![f; self.frames])
            }
        }
    }
}

/// Scanner description; angles in degrees, times in seconds, lengths in metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub views: usize,
    pub elements_per_arc: usize,
    pub radius: f64,
    pub polar_span_deg: f64,
    pub angular_step_deg: f64,
    pub samples: usize,
    pub sample_interval: f64,
    pub sound_speed: f64,
    pub frame_period: f64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        let a = Acquisition::default();
        Self {
            views: 1,
            elements_per_arc: 96,
            radius: 0.065,
            polar_span_deg: 90.0,
            angular_step_deg: a.angular_step.to_degrees(),
            samples: a.sample_count,
            sample_interval: a.sample_interval,
            sound_speed: a.sound_speed,
            frame_period: a.frame_period,
        }
    }
}

impl GeometrySpec {
    pub fn build(&self, frames: usize, views: usize) -> Result<ScanGeometry> {
        ScanGeometry::with_views(
            views,
            self.radius,
            self.elements_per_arc,
            self.polar_span_deg.to_radians(),
            Acquisition {
                angular_step: self.angular_step_deg.to_radians(),
                frame_count: frames,
                sound_speed: self.sound_speed,
                sample_count: self.samples,
                sample_interval: self.sample_interval,
                frame_period: self.frame_period,
            },
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Noise levels in percent of the peak noiseless amplitude.
    pub levels: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Views per frame compared by a views sweep.
    pub views: Vec<usize>,
    /// Multiples of `‖G‖²_F` used as κ by a κ sweep.
    pub kappa_factors: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            views: vec![1, 2, 4],
            kappa_factors: crate::solver::KAPPA_FACTORS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbpSpec {
    /// Frames back-projected together; must be given explicitly.
    pub frames: Vec<usize>,
    pub speed_start: f64,
    pub speed_end: f64,
    pub speed_step: f64,
}

impl Default for UbpSpec {
    fn default() -> Self {
        Self {
            frames: Vec::new(),
            speed_start: 1480.0,
            speed_end: 1520.0,
            speed_step: 5.0,
        }
    }
}

impl UbpSpec {
    pub fn speeds(&self) -> Result<Vec<f64>> {
        speed_range(self.speed_start, self.speed_end, self.speed_step)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub directory: Option<PathBuf>,
    /// Write every reconstructed frame as a dense volume.
    pub dense_volumes: bool,
    /// Write per-frame maximum-intensity projections along z.
    pub emit_mip: bool,
    /// Voxels whose TACs are reported; the blob centres when empty and the phantom is a blob phantom.
    pub tac_voxels: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub study: StudyKind,
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub ubp: UbpSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// One measurement set a study needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCase {
    pub label: String,
    pub views: usize,
    pub noise_percent: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Overrides every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.noise.seed = seed;
        self.solver.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let k = self.phantom.frames;
        if k == 0 || self.phantom.dims.contains(&0) || !(self.phantom.spacing > 0.0) {
            return bad("phantom needs positive dims, spacing and frame count".into());
        }
        if self.phantom.kind == PhantomKind::Point && self.phantom.grid()?.index(self.phantom.point_voxel()).is_none() {
            return bad(format!("point voxel {:?} is outside the grid", self.phantom.point_voxel()));
        }
        if self.noise.levels.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return bad("noise levels must be finite and nonnegative".into());
        }
        self.solver.validate(k).map_err(|e| Error::Config(e.to_string()))?;
        for case in self.data_cases() {
            self.geometry
                .build(k, case.views)
                .map_err(|e| Error::Config(format!("geometry for {}: {e}", case.label)))?;
        }
        let grid = self.phantom.grid()?;
        if let Some(v) = self.output.tac_voxels.iter().find(|v| grid.index(**v).is_none()) {
            return bad(format!("TAC voxel {v:?} is outside the grid"));
        }
        match self.study {
            StudyKind::ViewsSweep if self.sweep.views.is_empty() => bad("a views sweep needs at least one view count".into()),
            StudyKind::NoiseSweep if self.noise.levels.is_empty() => bad("a noise sweep needs at least one noise level".into()),
            StudyKind::KappaSweep
                if self.sweep.kappa_factors.is_empty() || self.sweep.kappa_factors.iter().any(|c| !(*c >= 0.0)) =>
            {
                bad("a kappa sweep needs nonnegative kappa factors".into())
            }
            StudyKind::UbpCalibration => {
                if self.ubp.frames.is_empty() {
                    return bad("UBP calibration needs an explicit frame list".into());
                }
                if let Some(f) = self.ubp.frames.iter().find(|f| **f >= k) {
                    return bad(format!("UBP frame {f} is outside 0..{k}"));
                }
                self.ubp.speeds().map_err(|e| Error::Config(e.to_string()))?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Measurement sets the study works on.
    pub fn data_cases(&self) -> Vec<DataCase> {
        let first_noise = self.noise.levels.first().copied();
        let views = self.geometry.views;
        match self.study {
            StudyKind::InverseCrime => vec![DataCase {
                label: "inverse-crime".into(),
                views,
                noise_percent: None,
            }],
            StudyKind::ViewsSweep => self
                .sweep
                .views
                .iter()
                .map(|&v| DataCase {
                    label: format!("views{v}"),
                    views: v,
                    noise_percent: first_noise,
                })
                .collect(),
            StudyKind::NoiseSweep => self
                .noise
                .levels
                .iter()
                .map(|&p| DataCase {
                    label: format!("noise{p}"),
                    views,
                    noise_percent: Some(p),
                })
                .collect(),
            StudyKind::KappaSweep | StudyKind::UbpCalibration => vec![DataCase {
                label: "data".into(),
                views,
                noise_percent: first_noise,
            }],
        }
    }

    /// TAC voxels: configured ones, else the blob centres for a blob phantom.
    pub fn tac_voxels(&self) -> Result<Vec<[usize; 3]>> {
        if !self.output.tac_voxels.is_empty() {
            return Ok(self.output.tac_voxels.clone());
        }
        Ok(match self.phantom.kind {
            PhantomKind::Blob => blob_center_voxels(&self.phantom.grid()?).to_vec(),
            PhantomKind::Point => vec![self.phantom.point_voxel()],
            PhantomKind::Rank4 => Vec::new(),
        })
    }
}
