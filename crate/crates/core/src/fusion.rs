//! Multimodal fusion: PCA over the row-wise concatenation `[textual, visual]`,
//! projected back down to K1 dimensions.
//!
//! The model file holds the component matrix in the feature-matrix format
//! (`out_dim in_dim` header, one component per line), followed by one line
//! with the `in_dim` mean entries and one line with the `out_dim` explained
//! variances.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{FeatureKind, FeatureMatrix};
use crate::error::{check_dim, Error, Result};
use crate::textio::{push_row, push_sized_matrix, read_file, write_file, TokenReader};

/// Fitted principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// One unit-norm principal direction per row, `out_dim x in_dim`.
    pub components: DMatrix<f64>,
    /// Sample variance along each component, descending.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    /// Centers rows by the mean and projects them onto the components.
    pub fn transform(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("pca input dim", self.input_dim(), data.ncols())?;
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.components.transpose())
    }

    /// Maps projected rows back into the input space.
    pub fn inverse_transform(&self, projected: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("pca projected dim", self.output_dim(), projected.ncols())?;
        let mut out = projected * &self.components;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }

    /// Squared Frobenius norm of `data - inverse_transform(transform(data))`.
    pub fn reconstruction_error(&self, data: &DMatrix<f64>) -> Result<f64> {
        let back = self.inverse_transform(&self.transform(data)?)?;
        Ok((data - back).norm_squared())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        push_sized_matrix(&mut out, &self.components);
        push_row(&mut out, self.mean.iter().copied());
        push_row(&mut out, self.explained_variance.iter().copied());
        out
    }

    pub fn from_text(source_name: &str, text: &str) -> Result<Self> {
        let mut reader = TokenReader::new(source_name, text);
        let components = reader.read_sized_matrix()?;
        let mean = reader.read_matrix(1, components.ncols())?;
        let variance = reader.read_matrix(1, components.nrows())?;
        reader.expect_end()?;
        Ok(PcaModel {
            mean: DVector::from_iterator(mean.len(), mean.iter().copied()),
            components,
            explained_variance: variance.iter().copied().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&path.display().to_string(), &read_file(path)?)
    }
}

/// Fits the top `out_dim` principal directions of `data` (rows are samples).
///
/// Uses the sample covariance (`n - 1` denominator). Each component's sign
/// is chosen so that its largest-magnitude entry is positive.
pub fn fit_pca(data: &DMatrix<f64>, out_dim: usize) -> Result<PcaModel> {
    let (n, d) = data.shape();
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(Error::invalid(format!(
            "cannot extract {out_dim} components from {n} samples of dimension {d}"
        )));
    }
    crate::data::check_finite("pca input", data)?;

    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut covariance = centered.transpose() * &centered / denom;
    // Remove round-off asymmetry before the symmetric solver.
    covariance = (&covariance + covariance.transpose()) * 0.5;

    let eigen = SymmetricEigen::new(covariance);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .total_cmp(&eigen.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = DMatrix::zeros(out_dim, d);
    let mut explained_variance = Vec::with_capacity(out_dim);
    for (k, &j) in order.iter().take(out_dim).enumerate() {
        let mut v = eigen.eigenvectors.column(j).into_owned();
        v /= v.norm();
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (idx, x)| {
                if x.abs() > best.1.abs() {
                    (idx, *x)
                } else {
                    best
                }
            })
            .1;
        if pivot < 0.0 {
            v = -v;
        }
        components.row_mut(k).copy_from(&v.transpose());
        explained_variance.push(eigen.eigenvalues[j].max(0.0));
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Row-wise `[textual, visual]` concatenation.
pub fn concat_modalities(textual: &FeatureMatrix, visual: &FeatureMatrix) -> Result<DMatrix<f64>> {
    check_dim("visual feature rows", textual.rows(), visual.rows())?;
    let (t, v) = (textual.dim(), visual.dim());
    let mut out = DMatrix::zeros(textual.rows(), t + v);
    out.columns_mut(0, t).copy_from(textual.values());
    out.columns_mut(t, v).copy_from(visual.values());
    Ok(out)
}

/// Fits the fusion PCA on the stacked concatenations of every given
/// `(textual, visual)` block, e.g. users and items of both domains.
pub fn fit_fusion(blocks: &[(&FeatureMatrix, &FeatureMatrix)], out_dim: usize) -> Result<PcaModel> {
    let parts = blocks
        .iter()
        .map(|(t, v)| concat_modalities(t, v))
        .collect::<Result<Vec<_>>>()?;
    let cols = parts.first().map_or(0, |p| p.ncols());
    for p in &parts {
        check_dim("fusion block width", cols, p.ncols())?;
    }
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut stacked = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for p in &parts {
        stacked.rows_mut(offset, p.nrows()).copy_from(p);
        offset += p.nrows();
    }
    fit_pca(&stacked, out_dim)
}

/// Concatenates, centers and projects: the fused K1-dimensional features.
pub fn fuse(
    textual: &FeatureMatrix,
    visual: &FeatureMatrix,
    pca: &PcaModel,
) -> Result<FeatureMatrix> {
    check_dim("textual vs visual feature dim", textual.dim(), visual.dim())?;
    let joined = concat_modalities(textual, visual)?;
    FeatureMatrix::new(pca.transform(&joined)?, FeatureKind::Fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Closed-form eigen-decomposition of a symmetric 2x2 matrix
    /// `[[a, b], [b, c]]`: eigenvalues descending with unit eigenvectors.
    fn eig2(a: f64, b: f64, c: f64) -> [(f64, [f64; 2]); 2] {
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let (l1, l2) = (mid + rad, mid - rad);
        let vec_for = |l: f64| {
            let v = if b.abs() > 1e-300 {
                [b, l - a]
            } else if (l - a).abs() <= (l - c).abs() {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            };
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        [(l1, vec_for(l1)), (l2, vec_for(l2))]
    }

    fn sample_cov2(data: &[[f64; 2]]) -> (f64, f64, f64) {
        let n = data.len() as f64;
        let mx = data.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = data.iter().map(|p| p[1]).sum::<f64>() / n;
        let s = |f: &dyn Fn(&[f64; 2]) -> f64| data.iter().map(f).sum::<f64>() / (n - 1.0);
        (
            s(&|p| (p[0] - mx).powi(2)),
            s(&|p| (p[0] - mx) * (p[1] - my)),
            s(&|p| (p[1] - my).powi(2)),
        )
    }

    fn same_direction(a: &[f64], b: &[f64]) -> bool {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot.abs() - 1.0).abs() < 1e-9
    }

    fn rows(points: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(points.len(), 2, |r, c| points[r][c])
    }

    #[test]
    fn rank_one_line() {
        let pts = [[-2.0, -2.0], [0.0, 0.0], [1.0, 1.0], [4.0, 4.0]];
        let m = fit_pca(&rows(&pts), 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.components[(0, 0)] - s).abs() < 1e-12);
        assert!((m.components[(0, 1)] - s).abs() < 1e-12);
        let full = fit_pca(&rows(&pts), 2).unwrap();
        assert!(full.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_variances_match_hand_eigen() {
        // Centered, axis-aligned, sample variances (4, 1).
        let a = 6.0f64.sqrt();
        let b = 1.5f64.sqrt();
        let pts = [[a, 0.0], [-a, 0.0], [0.0, b], [0.0, -b]];
        let (cxx, cxy, cyy) = sample_cov2(&pts);
        let oracle = eig2(cxx, cxy, cyy);
        assert!((oracle[0].0 - 4.0).abs() < 1e-12 && (oracle[1].0 - 1.0).abs() < 1e-12);

        let m = fit_pca(&rows(&pts), 2).unwrap();
        for k in 0..2 {
            assert!((m.explained_variance[k] - oracle[k].0).abs() < 1e-12);
            let row: Vec<f64> = m.components.row(k).iter().copied().collect();
            assert!(same_direction(&row, &oracle[k].1));
        }
        assert_eq!(m.components, DMatrix::identity(2, 2));
    }

    #[test]
    fn rotated_cloud_matches_hand_eigen() {
        let pts = [
            [2.0, 1.0],
            [-1.0, 0.5],
            [0.3, -2.0],
            [1.5, 1.7],
            [-2.2, -0.4],
            [0.1, 0.9],
        ];
        let (cxx, cxy, cyy) = sample_cov2(&pts);
        let oracle = eig2(cxx, cxy, cyy);
        let m = fit_pca(&rows(&pts), 2).unwrap();
        for k in 0..2 {
            assert!((m.explained_variance[k] - oracle[k].0).abs() < 1e-10);
            let row: Vec<f64> = m.components.row(k).iter().copied().collect();
            assert!(same_direction(&row, &oracle[k].1));
            let pivot = row
                .iter()
                .copied()
                .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn full_rank_reconstruction_is_lossless() {
        let data = DMatrix::from_fn(7, 4, |r, c| ((r * 5 + c * 3) % 7) as f64 * 0.7 - c as f64);
        let m = fit_pca(&data, 4).unwrap();
        assert!(m.reconstruction_error(&data).unwrap() < 1e-8);
    }

    #[test]
    fn rejects_too_many_components() {
        let data = DMatrix::from_fn(3, 4, |r, c| (r + c) as f64);
        assert!(fit_pca(&data, 4).is_err());
        assert!(fit_pca(&data, 0).is_err());
        assert!(fit_pca(&data, 3).is_ok());
    }

    proptest! {
        #[test]
        fn components_orthonormal_and_variances_descending(
            values in prop::collection::vec(-5.0..5.0f64, 40),
        ) {
            let data = DMatrix::from_row_slice(10, 4, &values);
            let m = fit_pca(&data, 4).unwrap();
            let gram = &m.components * m.components.transpose();
            prop_assert!((gram - DMatrix::<f64>::identity(4, 4)).amax() < 1e-6);
            prop_assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn reconstruction_error_non_increasing_in_out_dim(
            values in prop::collection::vec(-5.0..5.0f64, 48),
        ) {
            let data = DMatrix::from_row_slice(8, 6, &values);
            let errors: Vec<f64> = (1..=6)
                .map(|k| fit_pca(&data, k).unwrap().reconstruction_error(&data).unwrap())
                .collect();
            for w in errors.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn projected_mean_is_zero(values in prop::collection::vec(-5.0..5.0f64, 24)) {
            let data = DMatrix::from_row_slice(6, 4, &values);
            let m = fit_pca(&data, 2).unwrap();
            let mean_row = DMatrix::from_row_slice(1, 4, m.mean.as_slice());
            prop_assert!(m.transform(&mean_row).unwrap().amax() < 1e-12);
        }
    }

    fn fm(rows: usize, cols: usize, v: &[f64], kind: FeatureKind) -> FeatureMatrix {
        FeatureMatrix::new(DMatrix::from_row_slice(rows, cols, v), kind).unwrap()
    }

    #[test]
    fn fuse_centers_and_projects() {
        let pca = PcaModel {
            mean: DVector::from_row_slice(&[0.5, -1.0, 2.0, 3.0]),
            components: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            explained_variance: vec![1.0, 1.0],
        };
        let t = fm(1, 2, &[0.5, -1.0], FeatureKind::Textual);
        let v = fm(1, 2, &[2.0, 3.0], FeatureKind::Visual);
        let fused = fuse(&t, &v, &pca).unwrap();
        assert_eq!(fused.kind(), FeatureKind::Fused);
        assert_eq!(fused.row(0), vec![0.0, 0.0]);

        let zero_mean = PcaModel {
            mean: DVector::zeros(4),
            ..pca
        };
        let t = fm(1, 2, &[1.0, 0.0], FeatureKind::Textual);
        let v = fm(1, 2, &[0.0, 1.0], FeatureKind::Visual);
        assert_eq!(fuse(&t, &v, &zero_mean).unwrap().row(0), vec![1.0, 0.0]);

        let short = fm(2, 2, &[0.0; 4], FeatureKind::Visual);
        assert!(fuse(&t, &short, &zero_mean).is_err());
        let narrow = fm(1, 1, &[0.0], FeatureKind::Visual);
        assert!(fuse(&t, &narrow, &zero_mean).is_err());
    }

    #[test]
    fn full_dimension_fusion_is_a_rotation() {
        let t = fm(
            5,
            2,
            &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3, 2.0, -2.0, 0.0, 1.0],
            FeatureKind::Textual,
        );
        let v = fm(
            5,
            2,
            &[0.2, 0.1, 1.0, 1.5, -0.7, 0.4, 0.0, 0.0, 1.1, -0.9],
            FeatureKind::Visual,
        );
        let pca = fit_fusion(&[(&t, &v)], 4).unwrap();
        let fused = fuse(&t, &v, &pca).unwrap();
        let joined = concat_modalities(&t, &v).unwrap();
        let back = pca.inverse_transform(fused.values()).unwrap();
        assert!((back - &joined).amax() < 1e-10);
        // Pairwise distances survive a rotation.
        for a in 0..5 {
            for b in 0..5 {
                let d0 = (joined.row(a) - joined.row(b)).norm();
                let d1 = (fused.values().row(a) - fused.values().row(b)).norm();
                assert!((d0 - d1).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn fused_output_has_k1_finite_columns(values in prop::collection::vec(-3.0..3.0f64, 36)) {
            let t = fm(6, 3, &values[..18], FeatureKind::Textual);
            let v = fm(6, 3, &values[18..], FeatureKind::Visual);
            let pca = fit_fusion(&[(&t, &v)], 3).unwrap();
            let fused = fuse(&t, &v, &pca).unwrap();
            prop_assert_eq!(fused.dim(), 3);
            prop_assert!(fused.values().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn model_text_round_trip() {
        let data = DMatrix::from_fn(6, 3, |r, c| (r as f64).sin() + c as f64 * 0.1);
        let m = fit_pca(&data, 2).unwrap();
        let back = PcaModel::from_text("pca", &m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(PcaModel::from_text("pca", "2 3\n1 2 3\n").is_err());
    }
}
