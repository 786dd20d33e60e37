//! Inference network: damped Jacobi iterations built from FEA convolutions.
//!
//! Each layer computes `U <- B(U + omega * P * (V - K(U)))`, where `K` is a
//! homogeneous or bi-phase convolution, `P` the reciprocal stiffness
//! diagonal (sign included) and `B` resets the constrained nodes.

use serde::{Deserialize, Serialize};

use crate::element_kernels::{StencilKernel, ThetaKernel, LOCAL_OFFSETS};
use crate::error::{Error, Result};
use crate::fea_conv::Operator;
use crate::field_image::{BoundaryCondition, FieldImage, PhaseImage, PhysicsKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub omega: f64,
    pub max_depth: usize,
    /// Stop once the interior relative residual drops to this value.
    pub tol: Option<f64>,
    pub record_history: bool,
    /// Record every this many layers (the last layer is always recorded).
    pub history_stride: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { omega: 2.0 / 3.0, max_depth: 1000, tol: None, record_history: false, history_stride: 1 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::Validation(format!("omega must lie in (0, 2), got {}", self.omega)));
        }
        if self.max_depth == 0 {
            return Err(Error::Validation("max_depth must be at least 1".into()));
        }
        if self.history_stride == 0 {
            return Err(Error::Validation("history_stride must be at least 1".into()));
        }
        if let Some(tol) = self.tol {
            if !(tol >= 0.0) {
                return Err(Error::Validation(format!("tol must be non-negative, got {tol}")));
            }
        }
        Ok(())
    }
}

/// Per-node, per-channel reciprocal of the stiffness diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    p: FieldImage,
}

impl Preconditioner {
    pub fn image(&self) -> &FieldImage {
        &self.p
    }

    pub fn data(&self) -> &[f64] {
        self.p.data()
    }
}

/// `P[., ., q] = 1 / W^{qq}` centre, on an `n x n` grid.
pub fn preconditioner_homogeneous(w: &StencilKernel, n: usize) -> Result<Preconditioner> {
    let kind = w.kind().ok_or_else(|| Error::Shape("kernel is not square".into()))?;
    let mut recip = Vec::with_capacity(kind.channels());
    for q in 0..kind.channels() {
        let c = w.center(q, q);
        if c == 0.0 || !c.is_finite() {
            return Err(Error::Singular(format!("kernel diagonal for channel {q} is {c}")));
        }
        recip.push(1.0 / c);
    }
    let p = FieldImage::from_fn(n, kind, |_, _, q| recip[q])?;
    Ok(Preconditioner { p })
}

/// Reciprocal of the phase-blended diagonal gathered from the adjacent elements.
pub fn preconditioner_biphase(theta: &ThetaKernel, h: &PhaseImage) -> Result<Preconditioner> {
    let n = h.nodes();
    let kind = theta.kind();
    let d = kind.channels();
    let mut diag = FieldImage::zeros(n, kind)?;
    for er in 0..n - 1 {
        for ec in 0..n - 1 {
            let w = h.get(er, ec);
            for (s, &(dr, dc)) in LOCAL_OFFSETS.iter().enumerate() {
                let (i, j) = (er + dr as usize, ec + dc as usize);
                for q in 0..d {
                    let k = w * theta.get(0, q, q, s, s) + (1.0 - w) * theta.get(1, q, q, s, s);
                    diag.set(i, j, q, diag.get(i, j, q) + k);
                }
            }
        }
    }
    let mut p = diag;
    for i in 0..n {
        for j in 0..n {
            for q in 0..d {
                let v = p.get(i, j, q);
                if v == 0.0 {
                    if p.is_interior(i, j) {
                        return Err(Error::Singular(format!("zero diagonal at node ({i}, {j}) channel {q}")));
                    }
                    p.set(i, j, q, 0.0);
                } else {
                    p.set(i, j, q, 1.0 / v);
                }
            }
        }
    }
    Ok(Preconditioner { p })
}

/// The preconditioner matching an operator.
pub fn preconditioner_for(op: &Operator, n: usize) -> Result<Preconditioner> {
    match op {
        Operator::Homogeneous(w) => preconditioner_homogeneous(w, n),
        Operator::Biphase { theta, h } => {
            h.check_nodes(n)?;
            preconditioner_biphase(theta, h)
        }
    }
}

/// Overwrites the constrained nodes with their prescribed values.
pub fn apply_boundary(u: &FieldImage, bc: &BoundaryCondition) -> Result<FieldImage> {
    let mut out = u.clone();
    apply_boundary_in_place(&mut out, bc)?;
    Ok(out)
}

fn apply_boundary_in_place(u: &mut FieldImage, bc: &BoundaryCondition) -> Result<()> {
    if u.n() != bc.n() || u.kind() != bc.kind() {
        return Err(Error::Shape("boundary condition does not match the image".into()));
    }
    let d = u.channels();
    let values = bc.values().data();
    let data = u.data_mut();
    for (node, &fixed) in bc.mask().iter().enumerate() {
        if fixed {
            data[node * d..(node + 1) * d].copy_from_slice(&values[node * d..(node + 1) * d]);
        }
    }
    Ok(())
}

/// `V - K(U)` on interior nodes; the outer ring is zero.
pub fn residual(v: &FieldImage, u: &FieldImage, op: &Operator) -> Result<FieldImage> {
    v.same_shape(u)?;
    let mut r = op.apply(u)?.scaled(-1.0);
    r.axpy(1.0, v);
    r.zero_boundary();
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub depth: usize,
    /// Interior `|V - K(U)| / |V|`.
    pub residual: f64,
    /// Interior relative error against the reference response, when given.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub u: FieldImage,
    pub depth: usize,
    pub residual: f64,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
}

/// Runs the network on loading `v`. `reference` only feeds the error trace.
pub fn infer(
    v: &FieldImage,
    op: &Operator,
    bc: &BoundaryCondition,
    cfg: &InferenceConfig,
    reference: Option<&FieldImage>,
) -> Result<Inference> {
    cfg.validate()?;
    if op.kind() != Some(v.kind()) {
        return Err(Error::Shape(format!("operator does not act on {} images", v.kind())));
    }
    if let Some(r) = reference {
        v.same_shape(r)?;
    }
    let p = preconditioner_for(op, v.n())?;
    let vnorm = v.interior_norm();
    let scale = if vnorm > 0.0 { vnorm } else { 1.0 };

    let mut u = apply_boundary(v, bc)?;
    let mut history = Vec::new();
    let mut minimum = f64::INFINITY;
    let mut depth = 0;
    loop {
        let r = residual(v, &u, op)?;
        let res = r.interior_norm() / scale;
        if !res.is_finite() || res > 10.0 * minimum {
            return Err(Error::Divergence { omega: cfg.omega, depth, residual: res, minimum });
        }
        minimum = minimum.min(res);
        let done = depth == cfg.max_depth || cfg.tol.is_some_and(|t| res <= t);
        if cfg.record_history && (done || depth % cfg.history_stride == 0) {
            history.push(HistoryEntry {
                depth,
                residual: res,
                error: reference.map(|r| u.interior_relative_error(r)),
            });
        }
        if done {
            let converged = cfg.tol.is_some_and(|t| res <= t);
            return Ok(Inference { u, depth, residual: res, converged, history });
        }
        for ((x, &ri), &pi) in u.data_mut().iter_mut().zip(r.data()).zip(p.data()) {
            *x += cfg.omega * pi * ri;
        }
        apply_boundary_in_place(&mut u, bc)?;
        depth += 1;
    }
}

/// A homogeneous operator for `kind` built from a closed-form kernel.
pub fn homogeneous_operator(kind: PhysicsKind, rho: &crate::element_kernels::MaterialParams) -> Result<Operator> {
    Ok(Operator::Homogeneous(crate::element_kernels::kernel_for(kind, rho)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::{biphase_theta, elasticity_kernel, thermal_kernel, MaterialParams};

    #[test]
    fn thermal_preconditioner() {
        let p = preconditioner_homogeneous(&thermal_kernel(3.0).unwrap(), 4).unwrap();
        assert!(p.data().iter().all(|&x| x == -1.0 / 8.0));
        let p2 = preconditioner_homogeneous(&thermal_kernel(3.0).unwrap().scaled(2.0), 4).unwrap();
        assert!(p2.data().iter().all(|&x| x == -1.0 / 16.0));
        assert!(preconditioner_homogeneous(&thermal_kernel(3.0).unwrap().scaled(0.0), 4).is_err());
    }

    #[test]
    fn elastic_preconditioner() {
        let (e, nu) = (0.2e12, 0.25);
        let p = preconditioner_homogeneous(&elasticity_kernel(e, nu).unwrap(), 5).unwrap();
        let want = 4.0 * (1.0 - nu * nu) / (8.0 * e * (1.0 - nu / 3.0));
        assert!(p.data().iter().all(|&x| (x / want - 1.0).abs() < 1e-14));
    }

    #[test]
    fn biphase_preconditioner_reduces() {
        let r0 = MaterialParams::elastic(0.241e12, 0.36);
        let r1 = MaterialParams::elastic(0.2e12, 0.25);
        let theta = biphase_theta(&r0, &r1).unwrap();
        let p = preconditioner_biphase(&theta, &PhaseImage::new(6, 1.0).unwrap()).unwrap();
        let hom = preconditioner_homogeneous(&theta.collapse(0), 6).unwrap();
        assert!(p.image().interior_relative_error(hom.image()) < 1e-14);
        let same = biphase_theta(&r1, &r1).unwrap();
        let h = PhaseImage::from_fn(6, |r, c| ((r + c) % 2) as f64).unwrap();
        let p = preconditioner_biphase(&same, &h).unwrap();
        let hom = preconditioner_homogeneous(&same.collapse(0), 6).unwrap();
        assert!(p.image().interior_relative_error(hom.image()) < 1e-14);
    }

    #[test]
    fn boundary_reset() {
        let kind = PhysicsKind::Elasticity;
        let values = FieldImage::new(5, kind, 3.0).unwrap();
        let bc = BoundaryCondition::new(
            (0..25).map(|k| k / 5 == 0 || k / 5 == 4 || k % 5 == 0 || k % 5 == 4).collect(),
            values.clone(),
        )
        .unwrap();
        let u = FieldImage::new(5, kind, -1.0).unwrap();
        let once = apply_boundary(&u, &bc).unwrap();
        assert_eq!(apply_boundary(&once, &bc).unwrap(), once);
        assert_eq!(once.get(0, 2, 1), 3.0);
        assert_eq!(once.get(2, 2, 1), -1.0);
        let all = BoundaryCondition::everywhere(values.clone());
        assert_eq!(apply_boundary(&u, &all).unwrap(), values);
    }

    #[test]
    fn residual_of_zero_is_loading() {
        let op = Operator::Homogeneous(thermal_kernel(3.0).unwrap());
        let v = FieldImage::from_fn(5, PhysicsKind::Thermal, |i, j, _| (i * 5 + j) as f64).unwrap();
        let r = residual(&v, &FieldImage::zeros(5, PhysicsKind::Thermal).unwrap(), &op).unwrap();
        assert_eq!(r.interior_relative_error(&v), 0.0);
        assert_eq!(r.get(0, 3, 0), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = InferenceConfig { omega: 2.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = InferenceConfig { max_depth: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // D^-1 K reaches 1.5 on the 9-point Laplacian, so omega = 1.9 amplifies
        // the highest mode by 1.85 per layer.
        let kind = PhysicsKind::Thermal;
        let op = Operator::Homogeneous(thermal_kernel(3.0).unwrap());
        let v = FieldImage::from_fn(9, kind, |i, j, _| if (i, j) == (4, 4) { 1.0 } else { 0.0 }).unwrap();
        let bc = BoundaryCondition::clamped(9, kind).unwrap();
        let stable = InferenceConfig { max_depth: 500, ..Default::default() };
        assert!(infer(&v, &op, &bc, &stable, None).is_ok());
        let unstable = InferenceConfig { omega: 1.9, max_depth: 500, ..Default::default() };
        let err = infer(&v, &op, &bc, &unstable, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { omega, .. } if omega == 1.9));
    }
}
