//! Voxel grid and rotating-gantry acquisition geometry.
//!
//! Every imaging frame sees the same set of transducer arcs, rotated about
//! the vertical (z) axis by a fixed angular step per frame. Channels are
//! numbered arc by arc and, within an arc, element by element.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Uniform Cartesian grid of expansion-function nodes.
///
/// Nodes are ordered lexicographically with x varying fastest, then y, then z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    origin: Point3,
    spacing: f64,
    dims: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: Point3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("grid dimensions must be >= 1, got {dims:?}")));
        }
        if origin.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self { origin, spacing, dims })
    }

    /// Grid whose node cloud is centered on `center`.
    pub fn centered_at(center: Point3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| center[a] - 0.5 * (dims[a] as f64 - 1.0) * spacing);
        Self::new(origin, spacing, dims)
    }

    /// Grid centered on the coordinate origin (the rotation center).
    pub fn centered(spacing: f64, dims: [usize; 3]) -> Result<Self> {
        Self::centered_at([0.0; 3], spacing, dims)
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of nodes N.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume weight of one node, Δs³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    pub fn index(&self, ijk: [usize; 3]) -> Option<usize> {
        if ijk.iter().zip(self.dims.iter()).any(|(i, d)| i >= d) {
            return None;
        }
        Some(ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2]))
    }

    pub fn coords(&self, n: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [n % nx, (n / nx) % ny, n / (nx * ny)]
    }

    /// Node coordinate along one axis.
    pub fn axis_position(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing
    }

    pub fn position(&self, n: usize) -> Point3 {
        let c = self.coords(n);
        [0, 1, 2].map(|a| self.axis_position(a, c[a]))
    }

    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing)
    }

    /// Axis-aligned box spanned by the node positions.
    pub fn node_bounds(&self) -> (Point3, Point3) {
        let hi = [0, 1, 2].map(|a| self.axis_position(a, self.dims[a] - 1));
        (self.origin, hi)
    }

    /// Distance from `p` to the closest grid node.
    pub fn nearest_node_distance(&self, p: Point3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.spacing;
            let i = rel.round().clamp(0.0, (self.dims[a] - 1) as f64);
            let d = p[a] - (self.origin[a] + i * self.spacing);
            d2 += d * d;
        }
        d2.sqrt()
    }

    /// Nearest and farthest distance from `p` to the node bounding box.
    pub fn distance_range(&self, p: Point3) -> (f64, f64) {
        let (lo, hi) = self.node_bounds();
        let mut near = 0.0;
        let mut far = 0.0;
        for a in 0..3 {
            let below = lo[a] - p[a];
            let above = p[a] - hi[a];
            let gap = below.max(above).max(0.0);
            near += gap * gap;
            let reach = (p[a] - lo[a]).abs().max((p[a] - hi[a]).abs());
            far += reach * reach;
        }
        (near.sqrt(), far.sqrt())
    }
}

/// One curvilinear transducer array lying in a vertical plane through the
/// rotation axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransducerArc {
    radius: f64,
    polar_angles: Vec<f64>,
    azimuth_offset: f64,
}

/// Default vertical coverage of an arc: ±45° about the horizontal plane.
pub const DEFAULT_POLAR_SPAN: f64 = FRAC_PI_2;

/// Builds an arc of `count` elements spread uniformly in elevation over
/// `[-polar_span/2, polar_span/2]`. A single element sits on the horizontal
/// plane.
pub fn build_arc(radius: f64, count: usize, polar_span: f64, azimuth_offset: f64) -> Result<TransducerArc> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("arc radius must be positive, got {radius}")));
    }
    if count == 0 {
        return Err(Error::invalid("arc element count must be >= 1"));
    }
    if !(polar_span > 0.0 && polar_span <= PI) {
        return Err(Error::invalid(format!("polar span must lie in (0, pi], got {polar_span}")));
    }
    let polar_angles = if count == 1 {
        vec![0.0]
    } else {
        let step = polar_span / (count - 1) as f64;
        (0..count).map(|i| -0.5 * polar_span + i as f64 * step).collect()
    };
    Ok(TransducerArc {
        radius,
        polar_angles,
        azimuth_offset,
    })
}

impl TransducerArc {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn element_count(&self) -> usize {
        self.polar_angles.len()
    }

    pub fn polar_angles(&self) -> &[f64] {
        &self.polar_angles
    }

    pub fn azimuth_offset(&self) -> f64 {
        self.azimuth_offset
    }

    /// Element position relative to the rotation center, after an extra
    /// rotation of `azimuth` about z.
    pub fn element_position(&self, element: usize, azimuth: f64) -> Point3 {
        let elevation = self.polar_angles[element];
        let phi = self.azimuth_offset + azimuth;
        let horizontal = self.radius * elevation.cos();
        [horizontal * phi.cos(), horizontal * phi.sin(), self.radius * elevation.sin()]
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.polar_angles.is_empty() {
            return Err(Error::invalid("arc needs a positive radius and at least one element"));
        }
        if self.polar_angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("arc polar angles must be strictly increasing"));
        }
        Ok(())
    }
}

/// Azimuth offsets of the supported multi-view configurations.
pub fn view_offsets(views: usize) -> Result<Vec<f64>> {
    match views {
        1 => Ok(vec![0.0]),
        2 => Ok(vec![0.0, FRAC_PI_2]),
        4 => Ok(vec![0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4]),
        _ => Err(Error::invalid(format!("views per frame must be 1, 2 or 4, got {views}"))),
    }
}

/// Sequential rotating-gantry acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    arcs: Vec<TransducerArc>,
    angular_step: f64,
    frame_count: usize,
    sound_speed: f64,
    sample_count: usize,
    sample_interval: f64,
    /// Laser pulse period. Metadata only; the reconstruction uses frame indices.
    frame_period: f64,
    center: Point3,
}

/// Acquisition parameters of a scan, without the arcs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub angular_step: f64,
    pub frame_count: usize,
    pub sound_speed: f64,
    pub sample_count: usize,
    pub sample_interval: f64,
    pub frame_period: f64,
}

impl Default for Acquisition {
    /// 1° per frame over 360 frames at 10 Hz, 2048 samples at 31.25 MHz, water at 1495 m/s.
    fn default() -> Self {
        Self {
            angular_step: 1f64.to_radians(),
            frame_count: 360,
            sound_speed: 1495.0,
            sample_count: 2048,
            sample_interval: 1.0 / 31.25e6,
            frame_period: 0.1,
        }
    }
}

impl ScanGeometry {
    pub fn new(arcs: Vec<TransducerArc>, acquisition: Acquisition) -> Result<Self> {
        let offsets = view_offsets(arcs.len())?;
        for (arc, expected) in arcs.iter().zip(&offsets) {
            arc.validate()?;
            if (arc.azimuth_offset - expected).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "arc azimuth offsets for {} views must be {offsets:?}",
                    arcs.len()
                )));
            }
        }
        let a = acquisition;
        if a.frame_count == 0 {
            return Err(Error::invalid("frame count must be >= 1"));
        }
        if !(a.sound_speed > 0.0) {
            return Err(Error::invalid("speed of sound must be positive"));
        }
        if a.sample_count < 2 {
            return Err(Error::invalid("need at least two temporal samples"));
        }
        if !(a.sample_interval > 0.0) {
            return Err(Error::invalid("sample interval must be positive"));
        }
        if !a.angular_step.is_finite() || !(a.frame_period >= 0.0) {
            return Err(Error::invalid("angular step and frame period must be finite"));
        }
        Ok(Self {
            arcs,
            angular_step: a.angular_step,
            frame_count: a.frame_count,
            sound_speed: a.sound_speed,
            sample_count: a.sample_count,
            sample_interval: a.sample_interval,
            frame_period: a.frame_period,
            center: [0.0; 3],
        })
    }

    /// `views` identical arcs at the standard azimuth offsets.
    pub fn with_views(
        views: usize,
        radius: f64,
        elements_per_arc: usize,
        polar_span: f64,
        acquisition: Acquisition,
    ) -> Result<Self> {
        let arcs = view_offsets(views)?
            .into_iter()
            .map(|offset| build_arc(radius, elements_per_arc, polar_span, offset))
            .collect::<Result<Vec<_>>>()?;
        Self::new(arcs, acquisition)
    }

    /// Same scan with a different number of views per frame.
    pub fn with_view_count(&self, views: usize) -> Result<Self> {
        let template = &self.arcs[0];
        let arcs = view_offsets(views)?
            .into_iter()
            .map(|offset| TransducerArc {
                azimuth_offset: offset,
                ..template.clone()
            })
            .collect();
        let mut g = Self::new(arcs, self.acquisition())?;
        g.center = self.center;
        Ok(g)
    }

    /// Same scan assuming a different speed of sound.
    pub fn with_sound_speed(&self, sound_speed: f64) -> Result<Self> {
        if !(sound_speed > 0.0) {
            return Err(Error::invalid("speed of sound must be positive"));
        }
        let mut g = self.clone();
        g.sound_speed = sound_speed;
        Ok(g)
    }

    pub fn acquisition(&self) -> Acquisition {
        Acquisition {
            angular_step: self.angular_step,
            frame_count: self.frame_count,
            sound_speed: self.sound_speed,
            sample_count: self.sample_count,
            sample_interval: self.sample_interval,
            frame_period: self.frame_period,
        }
    }

    pub fn arcs(&self) -> &[TransducerArc] {
        &self.arcs
    }

    pub fn views(&self) -> usize {
        self.arcs.len()
    }

    pub fn angular_step(&self) -> f64 {
        self.angular_step
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn center(&self) -> Point3 {
        self.center
    }

    /// Total channels per frame, Q.
    pub fn channel_count(&self) -> usize {
        self.arcs.iter().map(TransducerArc::element_count).sum()
    }

    /// Length of one frame's trace vector, Q·P.
    pub fn frame_data_len(&self) -> usize {
        self.channel_count() * self.sample_count
    }

    pub fn channel_index(&self, arc: usize, element: usize) -> Option<usize> {
        if arc >= self.arcs.len() || element >= self.arcs[arc].element_count() {
            return None;
        }
        Some(self.arcs[..arc].iter().map(TransducerArc::element_count).sum::<usize>() + element)
    }

    pub fn channel_of(&self, channel: usize) -> Option<(usize, usize)> {
        let mut rest = channel;
        for (a, arc) in self.arcs.iter().enumerate() {
            if rest < arc.element_count() {
                return Some((a, rest));
            }
            rest -= arc.element_count();
        }
        None
    }

    /// Duration of the whole scan.
    pub fn scan_duration(&self) -> f64 {
        self.frame_count as f64 * self.frame_period
    }

    /// Gantry rotation covered by the scan, radians.
    pub fn total_rotation(&self) -> f64 {
        self.frame_count as f64 * self.angular_step
    }

    /// Gantry speed in radians per second.
    pub fn rotation_speed(&self) -> f64 {
        self.angular_step / self.frame_period
    }
}

/// Transducer positions at one imaging frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePose {
    pub frame: usize,
    pub positions: Vec<Point3>,
}

/// Positions of every channel at frame `k` (0-based): each arc rotated
/// about z by `k·Δθ` on top of its own azimuth offset.
pub fn pose_for_frame(geometry: &ScanGeometry, k: usize) -> Result<FramePose> {
    if k >= geometry.frame_count {
        return Err(Error::invalid(format!(
            "frame {k} out of range for a scan of {} frames",
            geometry.frame_count
        )));
    }
    Ok(pose_at_angle(geometry, k, k as f64 * geometry.angular_step))
}

fn pose_at_angle(geometry: &ScanGeometry, frame: usize, azimuth: f64) -> FramePose {
    let c = geometry.center;
    let positions = geometry
        .arcs
        .iter()
        .flat_map(|arc| (0..arc.element_count()).map(move |e| arc.element_position(e, azimuth)))
        .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
        .collect();
    FramePose { frame, positions }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tritom(views: usize, frames: usize, step_deg: f64) -> ScanGeometry {
        let acq = Acquisition {
            angular_step: step_deg.to_radians(),
            frame_count: frames,
            ..Acquisition::default()
        };
        ScanGeometry::with_views(views, 0.065, 96, DEFAULT_POLAR_SPAN, acq).unwrap()
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = VoxelGrid::centered(0.4e-3, [4, 3, 2]).unwrap();
        assert_eq!(g.len(), 24);
        for n in 0..g.len() {
            assert_eq!(g.index(g.coords(n)), Some(n));
        }
        assert_eq!(g.index([4, 0, 0]), None);
        let c = g.center();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(g.position(1)[0] - g.position(0)[0], 0.4e-3);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(VoxelGrid::centered(0.0, [2, 2, 2]).is_err());
        assert!(VoxelGrid::centered(1e-3, [2, 0, 2]).is_err());
    }

    #[test]
    fn tritom_arc_has_96_elements_at_65mm() {
        let arc = build_arc(0.065, 96, DEFAULT_POLAR_SPAN, 0.0).unwrap();
        assert_eq!(arc.element_count(), 96);
        for e in 0..96 {
            let p = arc.element_position(e, 0.0);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.065).abs() < 1e-15);
        }
    }

    #[test]
    fn single_element_arc_sits_on_horizontal_plane() {
        let arc = build_arc(0.065, 1, 1.0, 0.0).unwrap();
        assert_eq!(arc.element_position(0, 0.0), [0.065, 0.0, 0.0]);
    }

    #[test]
    fn three_element_arc_matches_spherical_coordinates() {
        let arc = build_arc(0.05, 3, FRAC_PI_2, 0.0).unwrap();
        let expected = [-FRAC_PI_4, 0.0, FRAC_PI_4];
        for (a, e) in arc.polar_angles().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        let h = 0.05 * FRAC_PI_4.cos();
        let want = [[h, 0.0, -h], [0.05, 0.0, 0.0], [h, 0.0, h]];
        for (e, w) in want.iter().enumerate() {
            let p = arc.element_position(e, 0.0);
            for a in 0..3 {
                assert!((p[a] - w[a]).abs() < 1e-15, "element {e} axis {a}");
            }
        }
    }

    #[test]
    fn arc_rejects_bad_arguments() {
        assert!(build_arc(0.0, 3, 1.0, 0.0).is_err());
        assert!(build_arc(-1.0, 3, 1.0, 0.0).is_err());
        assert!(build_arc(0.05, 0, 1.0, 0.0).is_err());
        assert!(build_arc(0.05, 3, 0.0, 0.0).is_err());
        assert!(build_arc(0.05, 3, 4.0, 0.0).is_err());
    }

    #[test]
    fn first_frame_is_unrotated() {
        let g = tritom(1, 360, 1.0);
        let pose = pose_for_frame(&g, 0).unwrap();
        for (q, p) in pose.positions.iter().enumerate() {
            assert_eq!(*p, g.arcs()[0].element_position(q, 0.0));
        }
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let g = tritom(1, 360, 1.0);
        let p0 = pose_for_frame(&g, 0).unwrap().positions[0];
        let p90 = pose_for_frame(&g, 90).unwrap().positions[0];
        assert!((p90[0] + p0[1]).abs() < 1e-15);
        assert!((p90[1] - p0[0]).abs() < 1e-15);
        assert_eq!(p90[2], p0[2]);
    }

    #[test]
    fn full_scan_takes_36_seconds_at_10_degrees_per_second() {
        let g = tritom(1, 360, 1.0);
        assert!((g.scan_duration() - 36.0).abs() < 1e-12);
        assert!((g.rotation_speed().to_degrees() - 10.0).abs() < 1e-9);
        assert!((g.total_rotation() - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_frame_is_rejected() {
        let g = tritom(1, 10, 36.0);
        assert!(pose_for_frame(&g, 10).is_err());
    }

    #[test]
    fn view_offsets_follow_standard_configurations() {
        let g = tritom(4, 4, 90.0);
        let offsets: Vec<f64> = g.arcs().iter().map(|a| a.azimuth_offset()).collect();
        assert_eq!(offsets, vec![0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4]);
        assert_eq!(g.channel_count(), 384);
        assert!(view_offsets(3).is_err());
        let bad = vec![build_arc(0.065, 4, 1.0, 0.0).unwrap(), build_arc(0.065, 4, 1.0, 0.3).unwrap()];
        assert!(ScanGeometry::new(bad, Acquisition::default()).is_err());
    }

    #[test]
    fn channel_numbering_is_a_bijection() {
        let g = tritom(2, 4, 90.0);
        for q in 0..g.channel_count() {
            let (a, e) = g.channel_of(q).unwrap();
            assert_eq!(g.channel_index(a, e), Some(q));
        }
        assert_eq!(g.channel_of(g.channel_count()), None);
    }

    #[test]
    fn distance_range_brackets_every_node() {
        let g = VoxelGrid::centered(1e-3, [3, 4, 2]).unwrap();
        let p = [0.01, -0.004, 0.002];
        let (near, far) = g.distance_range(p);
        for n in 0..g.len() {
            let r = g.position(n);
            let d = ((r[0] - p[0]).powi(2) + (r[1] - p[1]).powi(2) + (r[2] - p[2]).powi(2)).sqrt();
            assert!(d >= near - 1e-15 && d <= far + 1e-15);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rotation_preserves_cylindrical_radius(k in 0usize..360, views in prop::sample::select(vec![1usize, 2, 4])) {
                let g = tritom(views, 360, 1.0);
                let base = pose_for_frame(&g, 0).unwrap();
                let pose = pose_for_frame(&g, k).unwrap();
                for (a, b) in base.positions.iter().zip(&pose.positions) {
                    let ra = a[0].hypot(a[1]);
                    let rb = b[0].hypot(b[1]);
                    prop_assert!((ra - rb).abs() <= 1e-12 * ra.max(1e-300));
                    prop_assert_eq!(a[2], b[2]);
                }
            }

            #[test]
            fn full_turn_is_periodic(k in 0usize..36) {
                // 36 frames of 10 degrees: pose k+36 would equal pose k.
                let g = tritom(2, 72, 10.0);
                let a = pose_for_frame(&g, k).unwrap();
                let b = pose_for_frame(&g, k + 36).unwrap();
                for (p, q) in a.positions.iter().zip(&b.positions) {
                    for ax in 0..3 {
                        prop_assert!((p[ax] - q[ax]).abs() <= 1e-12 * 0.065);
                    }
                }
            }
        }
    }
}
