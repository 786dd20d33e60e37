//! Least-squares recovery of a homogeneous 3x3 filter from (V, U) pairs.
//!
//! Every interior node of every sample gives one design row holding the 3x3
//! neighbourhood of `U` over all input channels; the same rows serve every
//! output channel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::optimizer::{minimize, Method, Outcome, StopRule};
use crate::element_kernels::StencilKernel;
use crate::error::{Error, Result};
use crate::field_image::Dataset;

/// Singular-value ratio below which the column-normalized design counts as
/// rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub unknowns: usize,
    pub rows: usize,
    /// `sigma_min / sigma_max` of the column-normalized design.
    pub ratio: f64,
    /// Share of the weakest singular direction on each input channel.
    pub channel_weights: Vec<f64>,
}

impl RankReport {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.unknowns
    }

    fn into_error(self) -> Error {
        Error::Multicollinearity {
            rank: self.rank,
            unknowns: self.unknowns,
            ratio: self.ratio,
            channel_weights: self.channel_weights,
        }
    }
}

struct Design {
    matrix: DMatrix<f64>,
    targets: DMatrix<f64>,
    col_scale: Vec<f64>,
    outputs: usize,
    inputs: usize,
}

fn build_design(dataset: &Dataset) -> Result<Design> {
    let (Some(kind), Some(n)) = (dataset.kind(), dataset.n()) else {
        return Err(Error::Validation("dataset is empty".into()));
    };
    if n < 3 {
        return Err(Error::Dimension(format!("filter fitting needs n >= 3, got {n}")));
    }
    let q = kind.channels();
    let unknowns = 9 * q;
    let interior = (n - 2) * (n - 2);
    let rows = interior * dataset.len();
    let mut matrix = DMatrix::zeros(rows, unknowns);
    let mut targets = DMatrix::zeros(rows, q);
    let mut row = 0;
    for sample in dataset.samples() {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                for c_in in 0..q {
                    for r in 0..3 {
                        for c in 0..3 {
                            matrix[(row, (c_in * 3 + r) * 3 + c)] = sample.u.get(i + r - 1, j + c - 1, c_in);
                        }
                    }
                }
                for p in 0..q {
                    targets[(row, p)] = sample.v.get(i, j, p);
                }
                row += 1;
            }
        }
    }
    let mut col_scale = vec![0.0; unknowns];
    for (k, s) in col_scale.iter_mut().enumerate() {
        *s = matrix.column(k).norm();
        if *s > 0.0 {
            let inv = 1.0 / *s;
            matrix.column_mut(k).scale_mut(inv);
        }
    }
    Ok(Design { matrix, targets, col_scale, outputs: q, inputs: q })
}

fn rank_report(design: &Design) -> RankReport {
    let unknowns = design.matrix.ncols();
    let rows = design.matrix.nrows();
    // Zero-pad short designs so the SVD exposes the full right null space.
    let padded;
    let m = if rows < unknowns {
        padded = design.matrix.clone().resize_vertically(unknowns, 0.0);
        &padded
    } else {
        &design.matrix
    };
    let svd = m.clone().svd(false, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let (kmin, smin) = sv.argmin();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    let zero_columns = design.col_scale.iter().filter(|&&s| s == 0.0).count();
    let rank = sv.iter().filter(|&&s| smax > 0.0 && s / smax >= RANK_TOLERANCE).count().min(unknowns - zero_columns);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut channel_weights = vec![0.0; design.inputs];
    for (k, v) in vt.row(kmin).iter().enumerate() {
        channel_weights[k / 9] += v * v;
    }
    // A zero column is its own null direction.
    if let Some(k) = design.col_scale.iter().position(|&s| s == 0.0) {
        channel_weights.iter_mut().for_each(|w| *w = 0.0);
        channel_weights[k / 9] = 1.0;
    }
    RankReport { rank, unknowns, rows, ratio: if zero_columns > 0 { 0.0 } else { ratio }, channel_weights }
}

/// Numerical rank of the stacked design matrix.
pub fn check_loading_rank(dataset: &Dataset) -> Result<RankReport> {
    Ok(rank_report(&build_design(dataset)?))
}

/// Solves the filter regression in closed form. Fails with a
/// multicollinearity error when the design is rank deficient.
pub fn fit_multiphysics_filter(dataset: &Dataset) -> Result<StencilKernel> {
    let design = build_design(dataset)?;
    let report = rank_report(&design);
    if !report.is_full_rank() {
        return Err(report.into_error());
    }
    let svd = design.matrix.clone().svd(true, true);
    let solution = svd
        .solve(&design.targets, 0.0)
        .map_err(|e| Error::Singular(format!("least squares failed: {e}")))?;
    unpack(&design, |k, p| solution[(k, p)])
}

fn unpack(design: &Design, coeff: impl Fn(usize, usize) -> f64) -> Result<StencilKernel> {
    let mut w = StencilKernel::zeros(design.outputs, design.inputs);
    for p in 0..design.outputs {
        for k in 0..9 * design.inputs {
            let (q, rc) = (k / 9, k % 9);
            w.set(p, q, rc / 3, rc % 3, coeff(k, p) / design.col_scale[k]);
        }
    }
    Ok(w)
}

/// Fits the filter by iterating on the mean-squared loading mismatch
/// instead of solving the normal equations.
pub fn fit_filter_iterative(
    dataset: &Dataset,
    method: Method,
    learning_rate: f64,
    stop: &StopRule,
) -> Result<(StencilKernel, Outcome)> {
    let design = build_design(dataset)?;
    let a = &design.matrix;
    let q = design.outputs;
    let unknowns = a.ncols();
    let scale = 1.0 / (a.nrows() * q) as f64;
    let outcome = minimize(
        vec![0.0; unknowns * q],
        method,
        vec![learning_rate; unknowns * q],
        stop,
        |_| false,
        |x| {
            let coeffs = DMatrix::from_column_slice(unknowns, q, x);
            let resid = a * &coeffs - &design.targets;
            let grad = a.transpose() * &resid * (2.0 * scale);
            Ok((resid.norm_squared() * scale, grad.as_slice().to_vec()))
        },
    )?;
    let coeffs = DVector::from_column_slice(&outcome.x);
    let w = unpack(&design, |k, p| coeffs[p * unknowns + k])?;
    Ok((w, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::{kernel_for, MaterialParams};
    use crate::field_image::{FieldImage, Material, PhysicsKind, Sample};
    use crate::reference_solver::{generate_sample, LoadingSpec};

    fn sample(kind: PhysicsKind, n: usize, spec: LoadingSpec, seed: u64) -> Sample {
        let rho = MaterialParams::thermoelastic(0.2e12, 0.25, 12.0, 13e-5);
        generate_sample(&spec, kind, &Material::Homogeneous(rho), None, n, seed).unwrap()
    }

    #[test]
    fn noiseless_data_recovers_generator() {
        for kind in PhysicsKind::ALL {
            let s = sample(kind, 12, LoadingSpec::random(), 3);
            let w = fit_multiphysics_filter(&Dataset::single(s)).unwrap();
            let truth = kernel_for(kind, &MaterialParams::thermoelastic(0.2e12, 0.25, 12.0, 13e-5)).unwrap();
            // Compare per block: mechanical and thermal scales differ by ~1e10.
            for p in 0..kind.channels() {
                for q in 0..kind.channels() {
                    let (a, b) = (w.block(p, q), truth.block(p, q));
                    let scale = b.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                    for r in 0..3 {
                        for c in 0..3 {
                            if scale > 0.0 {
                                assert!((a[r][c] - b[r][c]).abs() <= 1e-7 * scale, "{kind} ({p},{q}) {a:?} {b:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn collinear_loading_is_deficient() {
        let s = sample(PhysicsKind::Elasticity, 12, LoadingSpec::Collinear { factor: 2.0, amplitude: 1.0 }, 1);
        let ds = Dataset::single(s);
        let report = check_loading_rank(&ds).unwrap();
        assert!(!report.is_full_rank(), "{report:?}");
        match fit_multiphysics_filter(&ds).unwrap_err() {
            Error::Multicollinearity { channel_weights, .. } => {
                assert!(channel_weights.iter().all(|&w| w > 0.05), "{channel_weights:?}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn tiny_grid_is_deficient() {
        let s = sample(PhysicsKind::Thermoelasticity, 4, LoadingSpec::random(), 1);
        let report = check_loading_rank(&Dataset::single(s)).unwrap();
        assert_eq!(report.rows, 4);
        assert!(!report.is_full_rank());
    }

    #[test]
    fn zero_response_column_is_deficient() {
        let kind = PhysicsKind::Thermal;
        let s = Sample::new(
            FieldImage::new(6, kind, 1.0).unwrap(),
            FieldImage::zeros(6, kind).unwrap(),
            None,
            None,
        )
        .unwrap();
        let report = check_loading_rank(&Dataset::single(s)).unwrap();
        assert_eq!(report.ratio, 0.0);
        assert!(!report.is_full_rank());
    }

    #[test]
    fn iterative_fit_approaches_closed_form() {
        let s = sample(PhysicsKind::Thermal, 10, LoadingSpec::random(), 5);
        let ds = Dataset::single(s);
        let exact = fit_multiphysics_filter(&ds).unwrap();
        let stop = StopRule { max_iter: 20_000, rel_tol: 1e-20, ..Default::default() };
        let (w, _) = fit_filter_iterative(&ds, Method::Adam, 1e-1, &stop).unwrap();
        assert!(w.relative_difference(&exact) < 1e-4, "{}", w.relative_difference(&exact));
    }
}
