//! The five experiment commands. Each writes into an output directory and
//! records what it did in `provenance.json` there.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{DataCase, ExperimentConfig, StudyKind};
use super::container::Container;
use super::{
    dynamic_image_from_container, dynamic_image_to_container, factored_from_container, factored_to_container,
    measurements_from_container, measurements_to_container, mip_container, volumes_to_container, KIND_DYNAMIC_IMAGE,
    KIND_FACTORED_IMAGE,
};
use crate::baseline::sos_sweep;
use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::lowrank::{frame_column, FactoredImage, SpatioTemporal};
use crate::metrics::{nse_per_frame, tac_similarity, MetricSeries};
use crate::phantoms::{add_noise, extract_tac, simulate_measurements, DynamicImage, MeasurementSet};
use crate::solver::{balanced_regularization, reconstruct, SolverConfig, StopReason};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const PHANTOM_FILE: &str = "phantom.dpct";

fn data_file(label: &str) -> String {
    format!("data_{label}.dpct")
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &serde_json::to_string_pretty(value)?)
    }

    fn container(&mut self, name: &str, c: &Container) -> Result<()> {
        let path = self.dir.join(name);
        c.write(&path)?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, command: &str, config: Option<&ExperimentConfig>) -> Result<Vec<PathBuf>> {
        record_provenance(self.dir, command, config, &self.files)?;
        Ok(self.files)
    }
}

/// Appends one entry per command to `provenance.json`.
fn record_provenance(dir: &Path, command: &str, config: Option<&ExperimentConfig>, files: &[PathBuf]) -> Result<()> {
    let path = dir.join(PROVENANCE_FILE);
    let mut doc = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    doc["artifact"] = json!(env!("CARGO_PKG_NAME"));
    doc["version"] = json!(env!("CARGO_PKG_VERSION"));
    let mut entry = json!({
        "command": command,
        "threads": rayon::current_num_threads(),
        "files": files.iter().map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned())).collect::<Vec<_>>(),
    });
    if let Some(c) = config {
        entry["config_sha256"] = json!(c.hash()?);
        entry["seeds"] = json!({"phantom": c.phantom.seed, "noise": c.noise.seed, "solver": c.solver.seed});
        entry["config"] = serde_json::to_value(c)?;
    }
    match doc["commands"].as_array_mut() {
        Some(list) => list.push(entry),
        None => doc["commands"] = json!([entry]),
    }
    fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
}

/// Hash of everything that determines the phantom and measurements.
fn data_hash(config: &ExperimentConfig) -> Result<String> {
    let key = json!({
        "phantom": config.phantom,
        "geometry": config.geometry,
        "noise": config.noise,
        "views": config.sweep.views,
        "study": config.study,
    });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
}

fn stamp(config: &ExperimentConfig) -> Result<Value> {
    Ok(json!({"data_sha256": data_hash(config)?}))
}

/// Reads `name` from `dir` if it was produced from the same data settings.
fn read_matching(dir: &Path, name: &str, config: &ExperimentConfig) -> Result<Option<Container>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let c = Container::read(&path)?;
    if c.metadata["data_sha256"] == json!(data_hash(config)?) {
        Ok(Some(c))
    } else {
        log::warn!("{} was made with different settings; regenerating it", path.display());
        Ok(None)
    }
}

fn load_phantom(config: &ExperimentConfig, dir: &Path) -> Result<DynamicImage> {
    match read_matching(dir, PHANTOM_FILE, config)? {
        Some(c) => dynamic_image_from_container(&c),
        None => config.phantom.build(),
    }
}

/// Noiseless or noisy measurements for one case of the study.
pub fn build_case_data(config: &ExperimentConfig, truth: &DynamicImage, case: &DataCase) -> Result<MeasurementSet> {
    let geometry = config.geometry.build(config.phantom.frames, case.views)?;
    let clean = simulate_measurements(truth, &geometry)?;
    match case.noise_percent {
        Some(p) => add_noise(&clean, p, config.noise.seed),
        None => Ok(clean),
    }
}

fn load_case_data(config: &ExperimentConfig, dir: &Path, truth: &DynamicImage, case: &DataCase) -> Result<MeasurementSet> {
    match read_matching(dir, &data_file(&case.label), config)? {
        Some(c) => measurements_from_container(&c),
        None => build_case_data(config, truth, case),
    }
}

fn tac_csv(labels: &[String], curves: &[Vec<f64>]) -> String {
    let mut s = format!("frame,{}\n", labels.join(","));
    let k = curves.first().map_or(0, Vec::len);
    for frame in 0..k {
        let row: Vec<String> = curves.iter().map(|c| format!("{:e}", c[frame])).collect();
        s.push_str(&format!("{frame},{}\n", row.join(",")));
    }
    s
}

fn voxel_label(v: [usize; 3]) -> String {
    format!("{}_{}_{}", v[0], v[1], v[2])
}

/// Writes the phantom, its TACs at the configured voxels and its singular values.
pub fn cmd_phantom(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut w = Writer::new(dir)?;
    let phantom = config.phantom.build()?;
    w.container(PHANTOM_FILE, &dynamic_image_to_container(&phantom, stamp(config)?)?)?;
    let voxels = config.tac_voxels()?;
    if !voxels.is_empty() {
        let curves = voxels
            .iter()
            .map(|v| Ok(extract_tac(&phantom, &phantom.grid, *v)?.values))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = voxels.iter().map(|v| voxel_label(*v)).collect();
        w.text("phantom_tacs.csv", &tac_csv(&labels, &curves))?;
    }
    let spectrum = MetricSeries {
        name: "singular_value".into(),
        index: "rank".into(),
        labels: None,
        values: phantom.singular_values(),
    };
    w.text("phantom_spectrum.csv", &spectrum.to_csv())?;
    w.finish("phantom", Some(config))
}

/// Simulates every measurement set the study needs, with noise where configured.
pub fn cmd_simulate(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut w = Writer::new(dir)?;
    let truth = load_phantom(config, dir)?;
    for case in config.data_cases() {
        let data = build_case_data(config, &truth, &case)?;
        let mut meta = stamp(config)?;
        meta["label"] = json!(case.label);
        w.container(&data_file(&case.label), &measurements_to_container(&data, meta)?)?;
    }
    w.finish("simulate", Some(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub kappa: Option<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rank: usize,
    pub average_nse: f64,
    /// Mean Pearson correlation of estimated and true TACs at the report voxels.
    pub tac_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSummary {
    pub study: StudyKind,
    pub runs: Vec<RunSummary>,
    /// Index of the run with the lowest average nSE of a κ sweep.
    pub best: Option<usize>,
}

fn tac_report(estimate: &FactoredImage, truth: &DynamicImage, voxels: &[[usize; 3]]) -> Result<(String, Option<f64>)> {
    let mut labels = Vec::new();
    let mut curves = Vec::new();
    let mut scores = Vec::new();
    for v in voxels {
        let est = extract_tac(estimate, &truth.grid, *v)?.values;
        let tru = extract_tac(truth, &truth.grid, *v)?.values;
        if let Ok(r) = tac_similarity(&est, &tru) {
            scores.push(r);
        }
        labels.push(format!("est_{}", voxel_label(*v)));
        labels.push(format!("true_{}", voxel_label(*v)));
        curves.push(est);
        curves.push(tru);
    }
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok((tac_csv(&labels, &curves), mean))
}

/// Runs the solver for every case of the study (and every κ of a κ sweep).
pub fn cmd_reconstruct(config: &ExperimentConfig, dir: &Path) -> Result<ReconstructSummary> {
    if config.study == StudyKind::UbpCalibration {
        return Err(Error::Config("a UBP calibration study is run with the ubp command".into()));
    }
    let mut w = Writer::new(dir)?;
    let truth = load_phantom(config, dir)?;
    let voxels = config.tac_voxels()?;
    let mut runs = Vec::new();
    for case in config.data_cases() {
        let data = load_case_data(config, dir, &truth, &case)?;
        let mut settings: Vec<(String, Option<f64>, SolverConfig)> = Vec::new();
        if config.study == StudyKind::KappaSweep {
            let g2 = data.frobenius_norm_sq();
            for (i, c) in config.sweep.kappa_factors.iter().enumerate() {
                let kappa = c * g2;
                let (gamma, lambda) = balanced_regularization(kappa, &truth)?;
                let solver = SolverConfig {
                    gamma,
                    lambda,
                    ..config.solver.clone()
                };
                settings.push((format!("kappa{i}"), Some(kappa), solver));
            }
        } else {
            settings.push((case.label.clone(), None, config.solver.clone()));
        }
        for (label, kappa, solver) in settings {
            log::info!("reconstructing {label}");
            let (estimate, trace) = reconstruct(&solver, &data, &truth.grid, None)?;
            let meta = json!({"label": label, "gamma": solver.gamma, "lambda": solver.lambda});
            w.container(&format!("recon_{label}.dpct"), &factored_to_container(&estimate, &truth.grid, meta)?)?;
            w.text(&format!("trace_{label}.csv"), &trace.to_csv())?;
            let nse = nse_per_frame(&estimate, &truth)?;
            w.text(&format!("nse_{label}.csv"), &nse.to_csv())?;
            let mut similarity = None;
            if !voxels.is_empty() {
                let (csv, mean) = tac_report(&estimate, &truth, &voxels)?;
                w.text(&format!("tacs_{label}.csv"), &csv)?;
                similarity = mean;
            }
            if config.output.dense_volumes {
                let vols = (0..estimate.frame_count())
                    .map(|k| frame_column(&estimate, &truth.grid, k))
                    .collect::<Result<Vec<_>>>()?;
                let frames: Vec<f64> = (0..vols.len()).map(|k| k as f64).collect();
                w.container(&format!("volumes_{label}.dpct"), &volumes_to_container(&vols, &frames, Value::Null)?)?;
            }
            if config.output.emit_mip {
                w.container(&format!("mip_{label}.dpct"), &mip_container(&estimate, &truth.grid)?)?;
            }
            runs.push(RunSummary {
                label,
                kappa,
                gamma: solver.gamma,
                lambda: solver.lambda,
                step_size: trace.step_size,
                iterations: trace.iterations(),
                converged: trace.stop == Some(StopReason::Converged),
                rank: estimate.rank(),
                average_nse: nse.mean(),
                tac_similarity: similarity,
            });
        }
    }
    let best = (config.study == StudyKind::KappaSweep).then(|| {
        (0..runs.len())
            .min_by(|&a, &b| runs[a].average_nse.total_cmp(&runs[b].average_nse))
            .unwrap_or(0)
    });
    if let Some(b) = best {
        let mut csv = String::from("run,kappa,gamma,lambda,average_nse,best\n");
        for (i, r) in runs.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{:e},{:e},{:e},{:e},{}\n",
                r.kappa.unwrap_or(0.0),
                r.gamma,
                r.lambda,
                r.average_nse,
                u8::from(i == b)
            ));
        }
        w.text("kappa_sweep.csv", &csv)?;
    }
    let summary = ReconstructSummary {
        study: config.study,
        runs,
        best,
    };
    w.json("reconstruct_summary.json", &summary)?;
    w.finish("reconstruct", Some(config))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UbpReport {
    pub frames: Vec<usize>,
    pub speeds: Vec<f64>,
    pub sharpness: Vec<f64>,
    pub volume_files: Vec<String>,
    pub suggested_speed: f64,
}

/// Speed-of-sound sweep with UBP over the configured frames.
pub fn cmd_ubp(config: &ExperimentConfig, dir: &Path) -> Result<UbpReport> {
    if config.ubp.frames.is_empty() {
        return Err(Error::Config("UBP needs an explicit frame list".into()));
    }
    let mut w = Writer::new(dir)?;
    let truth = load_phantom(config, dir)?;
    let case = config
        .data_cases()
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("study defines no measurement set".into()))?;
    let data = load_case_data(config, dir, &truth, &case)?;
    let speeds = config.ubp.speeds()?;
    let sweep = sos_sweep(&data, &config.ubp.frames, &truth.grid, &speeds)?;
    let mut files = Vec::new();
    for (c, v) in speeds.iter().zip(&sweep.volumes) {
        let name = format!("ubp_c{c}.dpct");
        w.container(&name, &volumes_to_container(std::slice::from_ref(v), &[*c], json!({"sound_speed": c}))?)?;
        files.push(name);
    }
    let mut csv = String::from("speed,sharpness,suggested\n");
    for (i, (c, s)) in speeds.iter().zip(&sweep.sharpness).enumerate() {
        csv.push_str(&format!("{c},{s:e},{}\n", u8::from(i == sweep.best)));
    }
    w.text("ubp_sharpness.csv", &csv)?;
    let report = UbpReport {
        frames: config.ubp.frames.clone(),
        speeds,
        sharpness: sweep.sharpness.clone(),
        volume_files: files,
        suggested_speed: sweep.suggested_speed(),
    };
    w.json("ubp_report.json", &report)?;
    w.finish("ubp", Some(config))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TacScore {
    pub voxel: [usize; 3],
    /// `None` when a curve is constant.
    pub correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average_nse: f64,
    pub tac_similarity: Vec<TacScore>,
}

enum Estimate {
    Factored(FactoredImage),
    Dense(DynamicImage),
}

impl Estimate {
    fn read(path: &Path) -> Result<(Self, VoxelGrid)> {
        let c = Container::read(path)?;
        match c.kind.as_str() {
            KIND_FACTORED_IMAGE => {
                let (f, grid) = factored_from_container(&c)?;
                Ok((Estimate::Factored(f), grid))
            }
            KIND_DYNAMIC_IMAGE => {
                let d = dynamic_image_from_container(&c)?;
                let grid = d.grid.clone();
                Ok((Estimate::Dense(d), grid))
            }
            other => Err(Error::Format(format!("{} holds a {other} container, not an image", path.display()))),
        }
    }

    fn image(&self) -> &dyn SpatioTemporal {
        match self {
            Estimate::Factored(f) => f,
            Estimate::Dense(d) => d,
        }
    }
}

/// nSE per frame, TACs and TAC correlations of an estimate against a truth.
pub fn cmd_metrics(estimate: &Path, truth: &Path, voxels: &[[usize; 3]], dir: &Path) -> Result<MetricsReport> {
    let mut w = Writer::new(dir)?;
    let (est, grid) = Estimate::read(estimate)?;
    let truth = dynamic_image_from_container(&Container::read(truth)?)?;
    if grid != truth.grid {
        return Err(Error::invalid("estimate and truth live on different grids"));
    }
    let nse = nse_per_frame(est.image(), &truth)?;
    w.text("nse.csv", &nse.to_csv())?;
    let mut labels = Vec::new();
    let mut curves = Vec::new();
    let mut scores = Vec::new();
    for v in voxels {
        let e = extract_tac(est.image(), &grid, *v)?.values;
        let t = extract_tac(&truth, &grid, *v)?.values;
        scores.push(TacScore {
            voxel: *v,
            correlation: tac_similarity(&e, &t).ok(),
        });
        labels.push(format!("est_{}", voxel_label(*v)));
        labels.push(format!("true_{}", voxel_label(*v)));
        curves.push(e);
        curves.push(t);
    }
    if !voxels.is_empty() {
        w.text("tacs.csv", &tac_csv(&labels, &curves))?;
        let mut csv = String::from("voxel,correlation\n");
        for s in &scores {
            let r = s.correlation.map_or(String::new(), |r| format!("{r:e}"));
            csv.push_str(&format!("{},{r}\n", voxel_label(s.voxel)));
        }
        w.text("tac_similarity.csv", &csv)?;
    }
    let report = MetricsReport {
        average_nse: nse.mean(),
        tac_similarity: scores,
    };
    w.json("metrics.json", &report)?;
    w.finish("metrics", None)?;
    Ok(report)
}
