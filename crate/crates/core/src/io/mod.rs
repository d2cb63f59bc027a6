//! Persistence and experiment orchestration.

pub mod commands;
pub mod config;
pub mod container;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, VoxelGrid};
use crate::lowrank::{FactoredImage, SpatioTemporal};
use crate::operator::{FrameData, FrameImage};
use crate::phantoms::{DynamicImage, MeasurementSet, NoiseDescription};

pub use config::ExperimentConfig;
pub use container::{Array, ArrayData, Container};
use container::{ORDER_TRACES, ORDER_VOXELS};

pub const KIND_DYNAMIC_IMAGE: &str = "dynamic-image";
pub const KIND_FACTORED_IMAGE: &str = "factored-image";
pub const KIND_MEASUREMENTS: &str = "measurements";
pub const KIND_VOLUMES: &str = "volumes";
pub const KIND_MIP: &str = "mip";

const IMAGE_UNITS: &str = "a.u.";
const ORDER_ROWS: &str = "row-major";

fn volume_shape(count: usize, grid: &VoxelGrid) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims();
    vec![count, nz, ny, nx]
}

fn grid_from(meta: &Value) -> Result<VoxelGrid> {
    let g: VoxelGrid = serde_json::from_value(meta["grid"].clone())
        .map_err(|e| Error::Format(format!("grid metadata: {e}")))?;
    VoxelGrid::new(g.origin(), g.spacing(), g.dims()).map_err(|e| Error::Format(e.to_string()))
}

fn split_frames(values: Vec<f64>, len: usize) -> Vec<Vec<f64>> {
    if len == 0 {
        return Vec::new();
    }
    values.chunks(len).map(<[f64]>::to_vec).collect()
}

fn check_shape(array: &Array, expected: &[usize]) -> Result<()> {
    if array.spec.shape != expected {
        return Err(Error::Format(format!(
            "array '{}' has shape {:?}, expected {expected:?}",
            array.spec.name, array.spec.shape
        )));
    }
    Ok(())
}

pub fn dynamic_image_to_container(image: &DynamicImage, metadata: Value) -> Result<Container> {
    let values = image.frames.concat();
    let array = Array::f64("frames", volume_shape(image.frame_count(), &image.grid), IMAGE_UNITS, ORDER_VOXELS, values)?;
    Ok(Container::new(KIND_DYNAMIC_IMAGE, with_grid(metadata, &image.grid)?, vec![array]))
}

pub fn dynamic_image_from_container(c: &Container) -> Result<DynamicImage> {
    c.expect_kind(KIND_DYNAMIC_IMAGE)?;
    let grid = grid_from(&c.metadata)?;
    let a = c.array("frames")?;
    let k = a.spec.shape.first().copied().unwrap_or(0);
    check_shape(a, &volume_shape(k, &grid))?;
    DynamicImage::new(grid.clone(), split_frames(a.data.to_f64(), grid.len())).map_err(|e| Error::Format(e.to_string()))
}

fn with_grid(metadata: Value, grid: &VoxelGrid) -> Result<Value> {
    let mut m = match metadata {
        Value::Object(m) => m,
        Value::Null => serde_json::Map::new(),
        other => return Err(Error::invalid(format!("container metadata must be an object, got {other}"))),
    };
    m.insert("grid".into(), serde_json::to_value(grid)?);
    Ok(Value::Object(m))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `U` (N × R) and `V` (K × R) are stored row-major, `Σ` as a vector.
pub fn factored_to_container(f: &FactoredImage, grid: &VoxelGrid, metadata: Value) -> Result<Container> {
    if grid.len() != f.voxel_count() {
        return Err(Error::invalid("grid does not match the factored image"));
    }
    let (n, k, r) = (f.voxel_count(), f.frame_count(), f.rank());
    let arrays = vec![
        Array::f64("u", vec![n, r], "1", ORDER_ROWS, row_major(f.u()))?,
        Array::f64("s", vec![r], IMAGE_UNITS, ORDER_ROWS, f.singular_values().as_slice().to_vec())?,
        Array::f64("v", vec![k, r], "1", ORDER_ROWS, row_major(f.v()))?,
    ];
    Ok(Container::new(KIND_FACTORED_IMAGE, with_grid(metadata, grid)?, arrays))
}

pub fn factored_from_container(c: &Container) -> Result<(FactoredImage, VoxelGrid)> {
    c.expect_kind(KIND_FACTORED_IMAGE)?;
    let grid = grid_from(&c.metadata)?;
    let (u, s, v) = (c.array("u")?, c.array("s")?, c.array("v")?);
    let r = s.spec.shape.first().copied().unwrap_or(0);
    let k = v.spec.shape.first().copied().unwrap_or(0);
    check_shape(u, &[grid.len(), r])?;
    check_shape(v, &[k, r])?;
    let u = DMatrix::from_row_slice(grid.len(), r, &u.data.to_f64());
    let v = DMatrix::from_row_slice(k, r, &v.data.to_f64());
    let f = FactoredImage::new(u, DVector::from_vec(s.data.to_f64()), v).map_err(|e| Error::Format(e.to_string()))?;
    Ok((f, grid))
}

pub fn measurements_to_container(m: &MeasurementSet, metadata: Value) -> Result<Container> {
    let g = &m.geometry;
    let values: Vec<f64> = m.frames.iter().flat_map(|f| f.values.iter().copied()).collect();
    let array = Array::f64(
        "traces",
        vec![g.frame_count(), g.channel_count(), g.sample_count()],
        "Pa",
        ORDER_TRACES,
        values,
    )?;
    let mut meta = match metadata {
        Value::Object(o) => o,
        _ => serde_json::Map::new(),
    };
    meta.insert("geometry".into(), serde_json::to_value(g)?);
    meta.insert("noise".into(), serde_json::to_value(m.noise)?);
    Ok(Container::new(KIND_MEASUREMENTS, Value::Object(meta), vec![array]))
}

pub fn measurements_from_container(c: &Container) -> Result<MeasurementSet> {
    c.expect_kind(KIND_MEASUREMENTS)?;
    let stored: ScanGeometry = serde_json::from_value(c.metadata["geometry"].clone())
        .map_err(|e| Error::Format(format!("geometry metadata: {e}")))?;
    ScanGeometry::new(stored.arcs().to_vec(), stored.acquisition()).map_err(|e| Error::Format(e.to_string()))?;
    let geometry = stored;
    let noise: Option<NoiseDescription> = serde_json::from_value(c.metadata["noise"].clone())
        .map_err(|e| Error::Format(format!("noise metadata: {e}")))?;
    let (k, q, p) = (geometry.frame_count(), geometry.channel_count(), geometry.sample_count());
    let a = c.array("traces")?;
    check_shape(a, &[k, q, p])?;
    let frames = split_frames(a.data.to_f64(), q * p)
        .into_iter()
        .map(|v| FrameData::new(q, p, v))
        .collect::<Result<Vec<_>>>()?;
    let mut m = MeasurementSet::new(geometry, frames).map_err(|e| Error::Format(e.to_string()))?;
    m.noise = noise;
    Ok(m)
}

/// Static volumes on one grid, e.g. one per candidate speed of sound.
pub fn volumes_to_container(volumes: &[FrameImage], labels: &[f64], metadata: Value) -> Result<Container> {
    let grid = volumes
        .first()
        .map(|v| v.grid.clone())
        .ok_or_else(|| Error::invalid("no volumes to store"))?;
    if volumes.iter().any(|v| v.grid != grid) {
        return Err(Error::invalid("volumes must share one grid"));
    }
    let mut meta = with_grid(metadata, &grid)?;
    meta["labels"] = json!(labels);
    let values: Vec<f64> = volumes.iter().flat_map(|v| v.values.iter().copied()).collect();
    let array = Array::f64("volumes", volume_shape(volumes.len(), &grid), IMAGE_UNITS, ORDER_VOXELS, values)?;
    Ok(Container::new(KIND_VOLUMES, meta, vec![array]))
}

pub fn volumes_from_container(c: &Container) -> Result<Vec<FrameImage>> {
    c.expect_kind(KIND_VOLUMES)?;
    let grid = grid_from(&c.metadata)?;
    let a = c.array("volumes")?;
    let s = a.spec.shape.first().copied().unwrap_or(0);
    check_shape(a, &volume_shape(s, &grid))?;
    split_frames(a.data.to_f64(), grid.len())
        .into_iter()
        .map(|v| FrameImage::new(grid.clone(), v))
        .collect()
}

/// Per-frame maximum-intensity projection along z, shape `[K, ny, nx]`.
pub fn mip_container<I: SpatioTemporal + ?Sized>(image: &I, grid: &VoxelGrid) -> Result<Container> {
    let [nx, ny, nz] = grid.dims();
    let k = image.frame_count();
    let mut values = Vec::with_capacity(k * nx * ny);
    for frame in 0..k {
        let f = image.frame_values(frame)?;
        for j in 0..ny {
            for i in 0..nx {
                let m = (0..nz).map(|z| f[(z * ny + j) * nx + i]).fold(f64::NEG_INFINITY, f64::max);
                values.push(m);
            }
        }
    }
    let array = Array::f64("mip", vec![k, ny, nx], IMAGE_UNITS, "frame-major, x-fastest, maximum over z", values)?;
    Ok(Container::new(KIND_MIP, with_grid(Value::Null, grid)?, vec![array]))
}
