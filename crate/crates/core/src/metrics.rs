//! Error measures, objective evaluation and TAC comparison.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_for_frame, VoxelGrid};
use crate::lowrank::SpatioTemporal;
use crate::operator::{dot, Projector};
use crate::phantoms::{DynamicImage, MeasurementSet};

/// Named list of scalars indexed by frame, rank or iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    /// What the position in `values` means: "frame", "rank", "iteration".
    pub index: String,
    /// Explicit index labels when they are not 0..len.
    pub labels: Option<Vec<f64>>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    /// Two-column CSV with a one-line header.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}\n", self.index, self.name);
        for (i, v) in self.values.iter().enumerate() {
            match &self.labels {
                Some(l) => s.push_str(&format!("{},{:e}\n", l[i], v)),
                None => s.push_str(&format!("{i},{v:e}\n")),
            }
        }
        s
    }
}

/// `nSE_k = ‖f_k^true − f̂_k‖² / max_k ‖f_k^true‖²`. The average is
/// [`MetricSeries::mean`].
pub fn nse_per_frame<I: SpatioTemporal + ?Sized>(est: &I, truth: &DynamicImage) -> Result<MetricSeries> {
    if est.voxel_count() != truth.grid.len() || est.frame_count() != truth.frame_count() {
        return Err(Error::invalid(format!(
            "estimate is {}x{}, truth is {}x{}",
            est.voxel_count(),
            est.frame_count(),
            truth.grid.len(),
            truth.frame_count()
        )));
    }
    let denom = truth.frames.iter().map(|f| dot(f, f)).fold(0.0, f64::max);
    if denom == 0.0 {
        return Err(Error::invalid("normalized error is undefined for an all-zero truth"));
    }
    let values = truth
        .frames
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let e = est.frame_values(k)?;
            Ok(t.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / denom)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSeries {
        name: "nse".into(),
        index: "frame".into(),
        labels: None,
        values,
    })
}

/// Mean squared error of the best rank-R approximation of `truth`, per R.
///
/// The approximation is formed explicitly by projecting onto the leading
/// right singular vectors, so an exactly low-rank input yields an error at
/// the rounding level of `‖F‖²` rather than of its square.
pub fn mse_vs_rank(truth: &DynamicImage, ranks: &[usize]) -> Result<MetricSeries> {
    let (n, k) = (truth.grid.len(), truth.frame_count());
    let cap = n.min(k);
    if let Some(r) = ranks.iter().find(|&&r| r > cap) {
        return Err(Error::invalid(format!("rank {r} exceeds min(N, K) = {cap}")));
    }
    let f = truth.to_matrix();
    let gram = f.tr_mul(&f);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = ranks
        .iter()
        .map(|&r| {
            let v = DMatrix::from_fn(k, r, |i, j| eig.eigenvectors[(i, order[j])]);
            let approx = (&f * &v) * v.transpose();
            (&f - approx).norm_squared() / (n * k) as f64
        })
        .collect();
    Ok(MetricSeries {
        name: "mse".into(),
        index: "rank".into(),
        labels: Some(ranks.iter().map(|&r| r as f64).collect()),
        values,
    })
}

/// Terms of the regularized objective at one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveComponents {
    /// `½ Σ_k ‖H_k f_k − g_k‖²`.
    pub fidelity: f64,
    /// `½ Σ_k ‖f_{k+1} − f_k‖²`, unweighted.
    pub temporal: f64,
    /// `‖F‖_*`, unweighted.
    pub nuclear: f64,
    /// `fidelity + γ·temporal + λ·nuclear`.
    pub total: f64,
}

/// `½ Σ_k ‖H_k f_k − g_k‖²` over all frames.
pub fn data_fidelity<I: SpatioTemporal + ?Sized>(f: &I, data: &MeasurementSet, grid: &VoxelGrid) -> Result<f64> {
    let geometry = &data.geometry;
    if f.voxel_count() != grid.len() || f.frame_count() != geometry.frame_count() {
        return Err(Error::invalid("image shape does not match the grid and scan"));
    }
    let projector = Projector::new(grid, geometry);
    let mut total = 0.0;
    for k in 0..geometry.frame_count() {
        let pose = pose_for_frame(geometry, k)?;
        let hf = projector.forward_values(&f.frame_values(k)?, &pose)?.data;
        total += hf
            .values
            .iter()
            .zip(&data.frames[k].values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(0.5 * total)
}

pub fn objective_components<I: SpatioTemporal + ?Sized>(
    f: &I,
    data: &MeasurementSet,
    grid: &VoxelGrid,
    gamma: f64,
    lambda: f64,
) -> Result<ObjectiveComponents> {
    let fidelity = data_fidelity(f, data, grid)?;
    let temporal = f.temporal_penalty();
    let nuclear = f.nuclear_norm();
    Ok(ObjectiveComponents {
        fidelity,
        temporal,
        nuclear,
        total: fidelity + gamma * temporal + lambda * nuclear,
    })
}

/// Pearson correlation of two curves.
pub fn tac_similarity(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::invalid("curves have different lengths"));
    }
    if est.is_empty() {
        return Err(Error::Undefined("correlation of empty curves".into()));
    }
    let n = est.len() as f64;
    let (ma, mb) = (est.iter().sum::<f64>() / n, truth.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in est.iter().zip(truth) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant curve".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Acquisition, ScanGeometry, DEFAULT_POLAR_SPAN};
    use crate::lowrank::{FactoredImage, COMPACT_TOL};
    use crate::phantoms::{make_blob_phantom, make_rank4_phantom, simulate_measurements};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(dims: [usize; 3], frames: usize, seed: u64) -> DynamicImage {
        let grid = VoxelGrid::centered(0.4e-3, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fr = (0..frames).map(|_| (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        DynamicImage::new(grid, fr).unwrap()
    }

    #[test]
    fn nse_identities() {
        let t = random_image([4, 4, 2], 6, 1);
        assert!(nse_per_frame(&t, &t).unwrap().values.iter().all(|v| *v == 0.0));
        let zero = DynamicImage::zeros(t.grid.clone(), 6).unwrap();
        let s = nse_per_frame(&zero, &t).unwrap();
        let energies: Vec<f64> = t.frames.iter().map(|f| dot(f, f)).collect();
        let imax = (0..6).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
        assert!(s.values.iter().all(|v| *v <= 1.0));
        assert_eq!(s.values[imax], 1.0);
        assert!(nse_per_frame(&t, &zero).is_err());
    }

    #[test]
    fn nse_matches_direct_oracle() {
        let t = random_image([3, 3, 2], 5, 2);
        let e = random_image([3, 3, 2], 5, 3);
        let s = nse_per_frame(&e, &t).unwrap();
        let mut max = 0.0f64;
        for k in 0..5 {
            let mut acc = 0.0;
            for n in 0..18 {
                acc += t.frames[k][n] * t.frames[k][n];
            }
            max = max.max(acc);
        }
        for k in 0..5 {
            let mut err = 0.0;
            for n in 0..18 {
                err += (t.frames[k][n] - e.frames[k][n]).powi(2);
            }
            assert!((s.values[k] - err / max).abs() <= 1e-12 * (err / max));
        }
    }

    #[test]
    fn nse_of_factored_estimate() {
        let t = random_image([3, 2, 2], 4, 5);
        let f = FactoredImage::from_factors(&t.to_matrix(), &DMatrix::identity(4, 4), COMPACT_TOL).unwrap();
        let s = nse_per_frame(&f, &t).unwrap();
        assert!(s.values.iter().all(|v| *v < 1e-28));
    }

    #[test]
    fn mse_vs_rank_identities() {
        let f = make_rank4_phantom([20, 20, 3], 60, 0.4e-3).unwrap();
        let scale = f.frobenius_norm_sq() / (f.grid.len() * 60) as f64;
        let s = mse_vs_rank(&f, &[1, 2, 3, 4, 60]).unwrap();
        assert!(s.values[3] <= 1e-20 * scale, "{:.2e}", s.values[3] / scale);
        assert!(s.values[4] <= 1e-20 * scale);
        assert!(s.values[0] > s.values[1] && s.values[1] > s.values[2] && s.values[2] > s.values[3]);
        assert!(mse_vs_rank(&f, &[61]).is_err());
    }

    #[test]
    fn mse_vs_rank_is_eckart_young_on_blob_phantom() {
        let f = make_blob_phantom([8e-3, 8e-3, 6e-3], 0.4e-3, 30).unwrap();
        let ranks: Vec<usize> = (1..=30).collect();
        let s = mse_vs_rank(&f, &ranks).unwrap();
        assert!(s.values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-30));
        // Tail of the dense singular values.
        let sv = crate::lowrank::dense_singular_values(&f.to_matrix());
        let nk = (f.grid.len() * 30) as f64;
        for &r in &[1usize, 5, 10] {
            let tail: f64 = sv[r..].iter().map(|x| x * x).sum::<f64>() / nk;
            assert!((s.values[r - 1] - tail).abs() <= 1e-8 * s.values[0]);
        }
    }

    fn tiny_problem() -> (DynamicImage, MeasurementSet) {
        let f = random_image([3, 3, 1], 4, 7);
        let geometry = ScanGeometry::with_views(
            1,
            0.065,
            2,
            DEFAULT_POLAR_SPAN,
            Acquisition {
                frame_count: 4,
                angular_step: 15f64.to_radians(),
                ..Acquisition::default()
            },
        )
        .unwrap();
        let truth = random_image([3, 3, 1], 4, 8);
        let data = simulate_measurements(&truth, &geometry).unwrap();
        (f, data)
    }

    #[test]
    fn objective_components_match_dense_oracle() {
        let (f, data) = tiny_problem();
        let (gamma, lambda) = (0.3, 1.7);
        let c = objective_components(&f, &data, &f.grid, gamma, lambda).unwrap();
        // Dense assembly of each H_k column by column.
        let p = Projector::new(&f.grid, &data.geometry);
        let mut fid = 0.0;
        for k in 0..4 {
            let mut hf = vec![0.0; data.geometry.frame_data_len()];
            for n in 0..9 {
                let mut e = vec![0.0; 9];
                e[n] = 1.0;
                let col = p.forward_frame(&e, k).unwrap().values;
                for (h, c) in hf.iter_mut().zip(&col) {
                    *h += c * f.frames[k][n];
                }
            }
            fid += hf.iter().zip(&data.frames[k].values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        fid *= 0.5;
        let m = f.to_matrix();
        let nuc: f64 = crate::lowrank::dense_singular_values(&m).iter().sum();
        let mut temp = 0.0;
        for k in 0..3 {
            temp += (m.column(k + 1) - m.column(k)).norm_squared();
        }
        temp *= 0.5;
        assert!((c.fidelity - fid).abs() <= 1e-10 * fid);
        assert!((c.temporal - temp).abs() <= 1e-10 * temp);
        assert!((c.nuclear - nuc).abs() <= 1e-10 * nuc);
        let j = fid + gamma * temp + lambda * nuc;
        assert!((c.total - j).abs() <= 1e-10 * j);
        assert_eq!(c.total, c.fidelity + gamma * c.temporal + lambda * c.nuclear);
    }

    #[test]
    fn objective_of_zero_and_static_images() {
        let (f, data) = tiny_problem();
        let zero = DynamicImage::zeros(f.grid.clone(), 4).unwrap();
        let c = objective_components(&zero, &data, &f.grid, 1.0, 1.0).unwrap();
        assert!((c.fidelity - 0.5 * data.frobenius_norm_sq()).abs() <= 1e-14 * c.fidelity);
        assert_eq!((c.temporal, c.nuclear), (0.0, 0.0));
        let stat = DynamicImage::new(f.grid.clone(), vec![f.frames[0].clone(); 4]).unwrap();
        assert_eq!(objective_components(&stat, &data, &f.grid, 1.0, 0.0).unwrap().temporal, 0.0);
    }

    #[test]
    fn correlation_examples() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert!((tac_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((tac_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(tac_similarity(&a, &[2.0; 4]), Err(Error::Undefined(_))));
        assert!(tac_similarity(&a, &[1.0]).is_err());
        let b = [0.5, -1.0, 2.0, 7.0];
        // Direct formula on centered vectors.
        let ma = 2.5;
        let mb = 2.125;
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
        assert!((tac_similarity(&a, &b).unwrap() - num / (da * db)).abs() <= 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = MetricSeries {
            name: "nse".into(),
            index: "frame".into(),
            labels: None,
            values: vec![0.5, 0.25],
        };
        assert_eq!(s.to_csv(), "frame,nse\n0,5e-1\n1,2.5e-1\n");
        assert_eq!(s.mean(), 0.375);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn nse_is_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0) {
            let t = random_image([3, 2, 1], 4, seed);
            let e = random_image([3, 2, 1], 4, seed + 1000);
            let scale = |img: &DynamicImage| DynamicImage::new(
                img.grid.clone(),
                img.frames.iter().map(|f| f.iter().map(|v| v * c).collect()).collect(),
            ).unwrap();
            let a = nse_per_frame(&e, &t).unwrap();
            let b = nse_per_frame(&scale(&e), &scale(&t)).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1e-300));
            }
        }

        #[test]
        fn correlation_is_bounded(xs in prop::collection::vec(-5.0f64..5.0, 3..20), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Ok(r) = tac_similarity(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
