//! Element stiffness matrices, 3x3 convolution kernels and bi-phase Θ tensors.
//!
//! DOF ordering inside an element matrix is channel-blocked: row `p * 4 + a`
//! is channel `p` at local node `a`. Local nodes run counter-clockwise from
//! the lower-left corner; `xi` points along increasing column and `eta` along
//! decreasing row.
//!
//! Sign convention: the thermal operator is `-kappa * Laplacian` integrated
//! against test functions (negative semi-definite), elasticity is the usual
//! positive semi-definite `B^T C B`. Coupling blocks are integrated on the
//! parent square, i.e. with node spacing 2 in parent units.

mod quadrature;

pub use quadrature::{gauss_legendre, shape, shape_derivatives, square_rule, NODE_COORDS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_image::PhysicsKind;

/// Material constants; only the fields required by a physics kind are used.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaterialParams {
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl MaterialParams {
    pub fn thermal(kappa: f64) -> Self {
        Self { kappa: Some(kappa), ..Self::default() }
    }

    pub fn elastic(e: f64, nu: f64) -> Self {
        Self { e: Some(e), nu: Some(nu), ..Self::default() }
    }

    pub fn thermoelastic(e: f64, nu: f64, kappa: f64, alpha: f64) -> Self {
        Self { e: Some(e), nu: Some(nu), kappa: Some(kappa), alpha: Some(alpha) }
    }

    fn field(value: Option<f64>, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::InvalidParams(format!("missing {name}")))
    }

    pub fn young(&self) -> Result<f64> {
        let e = Self::field(self.e, "E")?;
        if !(e.is_finite() && e > 0.0) {
            return Err(Error::InvalidParams(format!("E must be positive and finite, got {e}")));
        }
        Ok(e)
    }

    pub fn poisson(&self) -> Result<f64> {
        let nu = Self::field(self.nu, "nu")?;
        if !(nu > 0.0 && nu < 0.5) {
            return Err(Error::InvalidParams(format!("nu must lie in (0, 0.5), got {nu}")));
        }
        Ok(nu)
    }

    pub fn conductivity(&self) -> Result<f64> {
        let k = Self::field(self.kappa, "kappa")?;
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidParams(format!("kappa must be positive and finite, got {k}")));
        }
        Ok(k)
    }

    pub fn expansion(&self) -> Result<f64> {
        let a = Self::field(self.alpha, "alpha")?;
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::InvalidParams(format!("alpha must be finite and >= 0, got {a}")));
        }
        Ok(a)
    }

    /// Checks that every field `kind` needs is present and in range.
    pub fn validate(&self, kind: PhysicsKind) -> Result<()> {
        match kind {
            PhysicsKind::Thermal => {
                self.conductivity()?;
            }
            PhysicsKind::Elasticity => {
                self.young()?;
                self.poisson()?;
            }
            PhysicsKind::Thermoelasticity => {
                self.young()?;
                self.poisson()?;
                self.conductivity()?;
                self.expansion()?;
            }
        }
        Ok(())
    }
}

/// Dense element matrix of `4 * outputs` rows by `4 * inputs` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementStiffness {
    outputs: usize,
    inputs: usize,
    matrix: Vec<f64>,
}

impl ElementStiffness {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { outputs, inputs, matrix: vec![0.0; 16 * outputs * inputs] }
    }

    pub fn from_vec(outputs: usize, inputs: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != 16 * outputs * inputs {
            return Err(Error::Shape(format!(
                "element matrix needs {} entries, got {}",
                16 * outputs * inputs,
                matrix.len()
            )));
        }
        Ok(Self { outputs, inputs, matrix })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn rows(&self) -> usize {
        4 * self.outputs
    }

    pub fn cols(&self) -> usize {
        4 * self.inputs
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.matrix[row * cols + col] = value;
    }

    /// Entry coupling channel `p` at node `a` to channel `q` at node `b`.
    pub fn entry(&self, p: usize, a: usize, q: usize, b: usize) -> f64 {
        self.get(p * 4 + a, q * 4 + b)
    }

    pub fn data(&self) -> &[f64] {
        &self.matrix
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { matrix: self.matrix.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub(crate) fn combine(&self, other: &Self, s: f64) -> Self {
        debug_assert_eq!((self.outputs, self.inputs), (other.outputs, other.inputs));
        let matrix = self.matrix.iter().zip(&other.matrix).map(|(a, b)| a + s * b).collect();
        Self { matrix, ..self.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|K_ij - K_ji|` relative to the largest entry; square matrices only.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.outputs, self.inputs);
        let n = self.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / self.max_abs().max(f64::MIN_POSITIVE)
    }

    /// Largest per-channel row sum relative to the largest entry.
    pub fn row_sum_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in 0..self.rows() {
            for q in 0..self.inputs {
                let s: f64 = (0..4).map(|b| self.get(row, q * 4 + b)).sum();
                worst = worst.max(s.abs());
            }
        }
        worst / self.max_abs().max(f64::MIN_POSITIVE)
    }

    /// Relative Frobenius distance `|self - reference| / |reference|`.
    pub fn relative_difference(&self, reference: &Self) -> f64 {
        frobenius_relative(&self.matrix, &reference.matrix)
    }
}

fn frobenius_relative(a: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(reference).map(|(x, y)| (x - y).powi(2)).sum();
    let norm: f64 = reference.iter().map(|y| y * y).sum();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

fn check_order(order: usize) -> Result<()> {
    if order < 2 {
        return Err(Error::Validation(format!("gauss order must be at least 2, got {order}")));
    }
    Ok(())
}

/// Plane-stress constitutive matrix.
fn plane_stress(e: f64, nu: f64) -> [[f64; 3]; 3] {
    let c = e / (1.0 - nu * nu);
    [[c, c * nu, 0.0], [c * nu, c, 0.0], [0.0, 0.0, c * (1.0 - nu) / 2.0]]
}

/// Element matrix integrated numerically; the reference for every closed form.
pub fn element_stiffness_quadrature(
    kind: PhysicsKind,
    rho: &MaterialParams,
    order: usize,
) -> Result<ElementStiffness> {
    check_order(order)?;
    rho.validate(kind)?;
    let rule = square_rule(order);
    match kind {
        PhysicsKind::Thermal => Ok(thermal_quadrature(rho.conductivity()?, &rule)),
        PhysicsKind::Elasticity => Ok(elastic_quadrature(rho.young()?, rho.poisson()?, &rule)),
        PhysicsKind::Thermoelasticity => {
            let elastic = elastic_quadrature(rho.young()?, rho.poisson()?, &rule);
            let thermal = thermal_quadrature(rho.conductivity()?, &rule);
            let coupling = coupling_quadrature(rho, &rule)?;
            Ok(thermoelastic_blocks(&elastic, &coupling, &thermal))
        }
    }
}

/// Numerically integrated 8x4 block mapping temperature to mechanical load.
pub fn coupling_block_quadrature(rho: &MaterialParams, order: usize) -> Result<ElementStiffness> {
    check_order(order)?;
    coupling_quadrature(rho, &square_rule(order))
}

fn thermal_quadrature(kappa: f64, rule: &[(f64, f64, f64)]) -> ElementStiffness {
    let mut k = ElementStiffness::zeros(1, 1);
    for &(x, y, w) in rule {
        let (dx, dy) = shape_derivatives(x, y);
        for a in 0..4 {
            for b in 0..4 {
                let v = k.get(a, b) - kappa * w * (dx[a] * dx[b] + dy[a] * dy[b]);
                k.set(a, b, v);
            }
        }
    }
    k
}

fn elastic_quadrature(e: f64, nu: f64, rule: &[(f64, f64, f64)]) -> ElementStiffness {
    let c = plane_stress(e, nu);
    let mut k = ElementStiffness::zeros(2, 2);
    for &(x, y, w) in rule {
        let (dx, dy) = shape_derivatives(x, y);
        // Strain-displacement matrix, 3 x 8, channel-blocked columns.
        let mut bm = [[0.0; 8]; 3];
        for a in 0..4 {
            bm[0][a] = dx[a];
            bm[1][4 + a] = dy[a];
            bm[2][a] = dy[a];
            bm[2][4 + a] = dx[a];
        }
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for r in 0..3 {
                    for t in 0..3 {
                        s += bm[r][i] * c[r][t] * bm[t][j];
                    }
                }
                k.set(i, j, k.get(i, j) + w * s);
            }
        }
    }
    k
}

fn coupling_quadrature(rho: &MaterialParams, rule: &[(f64, f64, f64)]) -> Result<ElementStiffness> {
    rho.validate(PhysicsKind::Thermoelasticity)?;
    let scale = -rho.expansion()? * rho.young()? / (1.0 - rho.poisson()?);
    let mut k = ElementStiffness::zeros(2, 1);
    for &(x, y, w) in rule {
        let n = shape(x, y);
        let (dx, dy) = shape_derivatives(x, y);
        for b in 0..4 {
            for a in 0..4 {
                k.set(b, a, k.get(b, a) + scale * w * dx[b] * n[a]);
                k.set(4 + b, a, k.get(4 + b, a) + scale * w * dy[b] * n[a]);
            }
        }
    }
    Ok(k)
}

/// Stacks elastic (8x8), coupling (8x4) and thermal (4x4) blocks into 12x12;
/// the thermal rows have no mechanical columns.
fn thermoelastic_blocks(
    elastic: &ElementStiffness,
    coupling: &ElementStiffness,
    thermal: &ElementStiffness,
) -> ElementStiffness {
    let mut k = ElementStiffness::zeros(3, 3);
    for i in 0..8 {
        for j in 0..8 {
            k.set(i, j, elastic.get(i, j));
        }
        for j in 0..4 {
            k.set(i, 8 + j, coupling.get(i, j));
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            k.set(8 + i, 8 + j, thermal.get(i, j));
        }
    }
    k
}

// Closed-form shape-function integrals over the parent square.

/// `∫ dN_a/dxi dN_b/dxi`.
fn int_xx(a: usize, b: usize) -> f64 {
    let (xa, ya) = NODE_COORDS[a];
    let (xb, yb) = NODE_COORDS[b];
    xa * xb * (3.0 + ya * yb) / 12.0
}

/// `∫ dN_a/deta dN_b/deta`.
fn int_yy(a: usize, b: usize) -> f64 {
    let (xa, ya) = NODE_COORDS[a];
    let (xb, yb) = NODE_COORDS[b];
    ya * yb * (3.0 + xa * xb) / 12.0
}

/// `∫ dN_a/dxi dN_b/deta`.
fn int_xy(a: usize, b: usize) -> f64 {
    NODE_COORDS[a].0 * NODE_COORDS[b].1 / 4.0
}

/// `∫ dN_b/dxi N_a`.
fn int_dx_n(b: usize, a: usize) -> f64 {
    let (xb, yb) = NODE_COORDS[b];
    let ya = NODE_COORDS[a].1;
    xb * (3.0 + ya * yb) / 12.0
}

/// `∫ dN_b/deta N_a`.
fn int_dy_n(b: usize, a: usize) -> f64 {
    let (xb, yb) = NODE_COORDS[b];
    let xa = NODE_COORDS[a].0;
    yb * (3.0 + xa * xb) / 12.0
}

/// The two nu-independent parts of the plane-stress element:
/// `K = E / (1 - nu^2) * (A + nu * B)`.
pub(crate) fn elastic_parts() -> (ElementStiffness, ElementStiffness) {
    let mut a_part = ElementStiffness::zeros(2, 2);
    let mut b_part = ElementStiffness::zeros(2, 2);
    for a in 0..4 {
        for b in 0..4 {
            a_part.set(a, b, int_xx(a, b) + 0.5 * int_yy(a, b));
            b_part.set(a, b, -0.5 * int_yy(a, b));
            a_part.set(4 + a, 4 + b, int_yy(a, b) + 0.5 * int_xx(a, b));
            b_part.set(4 + a, 4 + b, -0.5 * int_xx(a, b));
            // x at a against y at b: nu*Ixy + (1-nu)/2 * Iyx.
            let xy = int_xy(a, b);
            let yx = int_xy(b, a);
            a_part.set(a, 4 + b, 0.5 * yx);
            b_part.set(a, 4 + b, xy - 0.5 * yx);
            a_part.set(4 + b, a, 0.5 * yx);
            b_part.set(4 + b, a, xy - 0.5 * yx);
        }
    }
    (a_part, b_part)
}

fn elastic_closed_form(e: f64, nu: f64) -> ElementStiffness {
    let (a, b) = elastic_parts();
    a.combine(&b, nu).scaled(e / (1.0 - nu * nu))
}

fn thermal_closed_form(kappa: f64) -> ElementStiffness {
    let mut k = ElementStiffness::zeros(1, 1);
    for a in 0..4 {
        for b in 0..4 {
            k.set(a, b, -kappa * (int_xx(a, b) + int_yy(a, b)));
        }
    }
    k
}

/// Closed-form 8x4 temperature-to-load block.
pub fn coupling_block(rho: &MaterialParams) -> Result<ElementStiffness> {
    rho.validate(PhysicsKind::Thermoelasticity)?;
    let scale = -rho.expansion()? * rho.young()? / (1.0 - rho.poisson()?);
    let mut k = ElementStiffness::zeros(2, 1);
    for b in 0..4 {
        for a in 0..4 {
            k.set(b, a, scale * int_dx_n(b, a));
            k.set(4 + b, a, scale * int_dy_n(b, a));
        }
    }
    Ok(k)
}

/// Closed-form element matrix for `kind`.
pub fn element_stiffness(kind: PhysicsKind, rho: &MaterialParams) -> Result<ElementStiffness> {
    rho.validate(kind)?;
    match kind {
        PhysicsKind::Thermal => Ok(thermal_closed_form(rho.conductivity()?)),
        PhysicsKind::Elasticity => Ok(elastic_closed_form(rho.young()?, rho.poisson()?)),
        PhysicsKind::Thermoelasticity => Ok(thermoelastic_blocks(
            &elastic_closed_form(rho.young()?, rho.poisson()?),
            &coupling_block(rho)?,
            &thermal_closed_form(rho.conductivity()?),
        )),
    }
}

/// A 3x3 convolution filter per (output, input) channel pair.
///
/// `weights` is laid out `[p][q][r][c]`; entry `(r, c)` multiplies the input
/// at offset `(r - 1, c - 1)` from the output node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilKernel {
    outputs: usize,
    inputs: usize,
    weights: Vec<f64>,
}

pub type Block3 = [[f64; 3]; 3];

impl StencilKernel {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { outputs, inputs, weights: vec![0.0; 9 * outputs * inputs] }
    }

    pub fn from_vec(outputs: usize, inputs: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != 9 * outputs * inputs {
            return Err(Error::Shape(format!(
                "kernel needs {} weights, got {}",
                9 * outputs * inputs,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("kernel weights must be finite".into()));
        }
        Ok(Self { outputs, inputs, weights })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// Physics kind when the kernel is square with a known channel count.
    pub fn kind(&self) -> Option<PhysicsKind> {
        if self.outputs != self.inputs {
            return None;
        }
        PhysicsKind::ALL.into_iter().find(|k| k.channels() == self.outputs)
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize, c: usize) -> f64 {
        self.weights[((p * self.inputs + q) * 3 + r) * 3 + c]
    }

    pub fn set(&mut self, p: usize, q: usize, r: usize, c: usize, value: f64) {
        let inputs = self.inputs;
        self.weights[((p * inputs + q) * 3 + r) * 3 + c] = value;
    }

    pub fn block(&self, p: usize, q: usize) -> Block3 {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.get(p, q, r, c);
            }
        }
        out
    }

    pub fn set_block(&mut self, p: usize, q: usize, block: &Block3) {
        for (r, row) in block.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                self.set(p, q, r, c, v);
            }
        }
    }

    pub fn center(&self, p: usize, q: usize) -> f64 {
        self.get(p, q, 1, 1)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { weights: self.weights.iter().map(|w| w * s).collect(), ..self.clone() }
    }

    pub fn relative_difference(&self, reference: &StencilKernel) -> f64 {
        assert_eq!((self.outputs, self.inputs), (reference.outputs, reference.inputs));
        frobenius_relative(&self.weights, &reference.weights)
    }
}

/// Local node offsets `(row, col)` from the element's top-left node.
pub(crate) const LOCAL_OFFSETS: [(isize, isize); 4] = [(1, 0), (1, 1), (0, 1), (0, 0)];

/// Sums the element contributions seen by one node into a 3x3 kernel.
///
/// The node plays local index `s` in the element whose top-left node sits at
/// `-LOCAL_OFFSETS[s]`; its neighbour `b` in that element lands at offset
/// `LOCAL_OFFSETS[b] - LOCAL_OFFSETS[s]`.
pub fn assemble_kernel(ke: &ElementStiffness) -> StencilKernel {
    let mut w = StencilKernel::zeros(ke.outputs(), ke.inputs());
    for p in 0..ke.outputs() {
        for q in 0..ke.inputs() {
            for s in 0..4 {
                for b in 0..4 {
                    let r = (1 + LOCAL_OFFSETS[b].0 - LOCAL_OFFSETS[s].0) as usize;
                    let c = (1 + LOCAL_OFFSETS[b].1 - LOCAL_OFFSETS[s].1) as usize;
                    let v = w.get(p, q, r, c) + ke.entry(p, s, q, b);
                    w.set(p, q, r, c, v);
                }
            }
        }
    }
    w
}

fn scale_block(m: Block3, s: f64) -> Block3 {
    m.map(|row| row.map(|v| v * s))
}

fn transpose(m: &Block3) -> Block3 {
    let mut t = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            t[r][c] = m[c][r];
        }
    }
    t
}

fn thermal_block(kappa: f64) -> Block3 {
    scale_block([[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]], kappa / 3.0)
}

/// `(W^xx, W^xy)`; `W^yy` is the transpose of `W^xx` and `W^yx = W^xy`.
fn elastic_blocks(e: f64, nu: f64) -> (Block3, Block3) {
    let corner = -(1.0 - nu / 3.0);
    let side = -2.0 * (1.0 + nu / 3.0);
    let xx = scale_block(
        [
            [corner, 4.0 * nu / 3.0, corner],
            [side, 8.0 * (1.0 - nu / 3.0), side],
            [corner, 4.0 * nu / 3.0, corner],
        ],
        e / (4.0 * (1.0 - nu * nu)),
    );
    let xy = scale_block([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]], e / (8.0 * (1.0 - nu)));
    (xx, xy)
}

/// `(W^xt, W^yt)`.
fn coupling_blocks(e: f64, nu: f64, alpha: f64) -> (Block3, Block3) {
    let yt = scale_block(
        [[1.0, 4.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -4.0, -1.0]],
        alpha * e / (6.0 * (1.0 - nu)),
    );
    (scale_block(transpose(&yt), -1.0), yt)
}

/// Laplacian-type filter for heat conduction.
pub fn thermal_kernel(kappa: f64) -> Result<StencilKernel> {
    let kappa = MaterialParams::thermal(kappa).conductivity()?;
    let mut w = StencilKernel::zeros(1, 1);
    w.set_block(0, 0, &thermal_block(kappa));
    Ok(w)
}

/// Plane-stress filter with channels `(x, y)`.
pub fn elasticity_kernel(e: f64, nu: f64) -> Result<StencilKernel> {
    let rho = MaterialParams::elastic(e, nu);
    let (xx, xy) = elastic_blocks(rho.young()?, rho.poisson()?);
    let mut w = StencilKernel::zeros(2, 2);
    w.set_block(0, 0, &xx);
    w.set_block(0, 1, &xy);
    w.set_block(1, 0, &xy);
    w.set_block(1, 1, &transpose(&xx));
    Ok(w)
}

/// Temperature-to-load filter: 2 outputs `(x, y)`, 1 input `t`.
pub fn coupling_kernel(e: f64, nu: f64, alpha: f64) -> Result<StencilKernel> {
    let rho = MaterialParams::thermoelastic(e, nu, 1.0, alpha);
    rho.validate(PhysicsKind::Thermoelasticity)?;
    let (xt, yt) = coupling_blocks(e, nu, alpha);
    let mut w = StencilKernel::zeros(2, 1);
    w.set_block(0, 0, &xt);
    w.set_block(1, 0, &yt);
    Ok(w)
}

/// Full 3-channel `(x, y, t)` filter; the thermal row has no mechanical input.
pub fn thermoelastic_kernel(rho: &MaterialParams) -> Result<StencilKernel> {
    rho.validate(PhysicsKind::Thermoelasticity)?;
    let elastic = elasticity_kernel(rho.young()?, rho.poisson()?)?;
    let coupling = coupling_kernel(rho.young()?, rho.poisson()?, rho.expansion()?)?;
    let mut w = StencilKernel::zeros(3, 3);
    for p in 0..2 {
        for q in 0..2 {
            w.set_block(p, q, &elastic.block(p, q));
        }
        w.set_block(p, 2, &coupling.block(p, 0));
    }
    w.set_block(2, 2, &thermal_block(rho.conductivity()?));
    Ok(w)
}

/// Closed-form homogeneous kernel for `kind`.
pub fn kernel_for(kind: PhysicsKind, rho: &MaterialParams) -> Result<StencilKernel> {
    rho.validate(kind)?;
    match kind {
        PhysicsKind::Thermal => thermal_kernel(rho.conductivity()?),
        PhysicsKind::Elasticity => elasticity_kernel(rho.young()?, rho.poisson()?),
        PhysicsKind::Thermoelasticity => thermoelastic_kernel(rho),
    }
}

/// Per-phase element matrices arranged as `[h][p][q][a][b]`.
///
/// Phase 0 is weighted by `H_e`, phase 1 by `1 - H_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaKernel {
    kind: PhysicsKind,
    phases: [ElementStiffness; 2],
    rho: [MaterialParams; 2],
}

impl ThetaKernel {
    pub fn new(kind: PhysicsKind, rho0: &MaterialParams, rho1: &MaterialParams) -> Result<Self> {
        Ok(Self {
            kind,
            phases: [element_stiffness(kind, rho0)?, element_stiffness(kind, rho1)?],
            rho: [*rho0, *rho1],
        })
    }

    pub fn kind(&self) -> PhysicsKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn rho(&self, phase: usize) -> &MaterialParams {
        &self.rho[phase]
    }

    /// Element matrix of one phase.
    pub fn phase(&self, phase: usize) -> &ElementStiffness {
        &self.phases[phase]
    }

    #[inline]
    pub fn get(&self, h: usize, p: usize, q: usize, a: usize, b: usize) -> f64 {
        self.phases[h].entry(p, a, q, b)
    }

    /// Homogeneous kernel of one phase.
    pub fn collapse(&self, phase: usize) -> StencilKernel {
        assemble_kernel(&self.phases[phase])
    }

    /// The same operator with phase labels exchanged (pair with `1 - H`).
    pub fn swapped(&self) -> Self {
        Self {
            kind: self.kind,
            phases: [self.phases[1].clone(), self.phases[0].clone()],
            rho: [self.rho[1], self.rho[0]],
        }
    }
}

/// Bi-phase plane-stress Θ.
pub fn biphase_theta(rho0: &MaterialParams, rho1: &MaterialParams) -> Result<ThetaKernel> {
    ThetaKernel::new(PhysicsKind::Elasticity, rho0, rho1)
}

/// Trainable constants of a bi-phase elastic material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RhoParam {
    E0,
    Nu0,
    E1,
    Nu1,
}

impl RhoParam {
    pub const ALL: [RhoParam; 4] = [RhoParam::E0, RhoParam::Nu0, RhoParam::E1, RhoParam::Nu1];

    pub fn phase(self) -> usize {
        match self {
            RhoParam::E0 | RhoParam::Nu0 => 0,
            RhoParam::E1 | RhoParam::Nu1 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RhoParam::E0 => "E0",
            RhoParam::Nu0 => "nu0",
            RhoParam::E1 => "E1",
            RhoParam::Nu1 => "nu1",
        }
    }
}

/// Derivative of one phase's element matrix with respect to one constant.
/// The other phase's block is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDerivative {
    pub param: RhoParam,
    pub block: ElementStiffness,
}

/// `dΘ/d(E0, nu0, E1, nu1)` for plane-stress phases.
pub fn dtheta_drho(rho0: &MaterialParams, rho1: &MaterialParams) -> Result<[ThetaDerivative; 4]> {
    let (a, b) = elastic_parts();
    let mut out = Vec::with_capacity(4);
    for rho in [rho0, rho1] {
        rho.validate(PhysicsKind::Elasticity)?;
        let (e, nu) = (rho.young()?, rho.poisson()?);
        let g = 1.0 - nu * nu;
        let d_e = a.combine(&b, nu).scaled(1.0 / g);
        let d_nu = a.scaled(2.0 * nu).combine(&b, 1.0 + nu * nu).scaled(e / (g * g));
        out.push(d_e);
        out.push(d_nu);
    }
    let mut it = out.into_iter().zip(RhoParam::ALL).map(|(block, param)| ThetaDerivative { param, block });
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THERMO: MaterialParams = MaterialParams {
        e: Some(0.23e12),
        nu: Some(0.289),
        kappa: Some(11.82),
        alpha: Some(12.92e-5),
    };

    #[test]
    fn thermal_element_entries() {
        let k = element_stiffness_quadrature(PhysicsKind::Thermal, &MaterialParams::thermal(6.0), 2).unwrap();
        let row: Vec<f64> = (0..4).map(|b| k.get(0, b)).collect();
        for (got, want) in row.iter().zip([-4.0, 1.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-13, "{row:?}");
        }
        for a in 0..4 {
            assert!((k.get(a, a) + 4.0).abs() < 1e-13);
        }
        assert!(k.asymmetry() < 1e-14 && k.row_sum_defect() < 1e-14);
    }

    #[test]
    fn quadrature_order_checked() {
        let rho = MaterialParams::thermal(1.0);
        assert!(element_stiffness_quadrature(PhysicsKind::Thermal, &rho, 1).is_err());
        let k2 = element_stiffness_quadrature(PhysicsKind::Thermal, &rho, 2).unwrap();
        let k5 = element_stiffness_quadrature(PhysicsKind::Thermal, &rho, 5).unwrap();
        assert!(k5.relative_difference(&k2) < 1e-14);
    }

    #[test]
    fn elastic_element_symmetric_and_rigid_free() {
        let k = element_stiffness_quadrature(PhysicsKind::Elasticity, &MaterialParams::elastic(2e11, 0.3), 2).unwrap();
        assert!(k.asymmetry() < 1e-14);
        assert!(k.row_sum_defect() < 1e-14);
        for i in 0..8 {
            assert!(k.get(i, i) > 0.0);
        }
    }

    #[test]
    fn thermal_kernel_unit_prefactor() {
        let w = thermal_kernel(3.0).unwrap();
        assert_eq!(w.block(0, 0), [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]]);
        assert!(w.weights().iter().sum::<f64>().abs() < 1e-15);
        assert!(thermal_kernel(0.0).is_err());
    }

    #[test]
    fn thermal_kernel_from_quadrature() {
        let k = element_stiffness_quadrature(PhysicsKind::Thermal, &MaterialParams::thermal(6.0), 2).unwrap();
        let w = assemble_kernel(&k);
        assert!(w.relative_difference(&thermal_kernel(6.0).unwrap()) < 1e-14);
    }

    #[test]
    fn zero_element_gives_zero_kernel() {
        let w = assemble_kernel(&ElementStiffness::zeros(2, 2));
        assert!(w.weights().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elasticity_table_values() {
        let w = elasticity_kernel(0.23e12, 0.289).unwrap();
        let xx11 = w.get(0, 0, 0, 0);
        let xy11 = w.get(0, 1, 0, 0);
        assert!((xx11.abs() / 56.7054195e9 - 1.0).abs() < 1e-3, "{xx11}");
        assert!((xy11 / 40.4512309e9 - 1.0).abs() < 1e-3, "{xy11}");
    }

    #[test]
    fn elasticity_symmetries() {
        let w = elasticity_kernel(0.2e12, 0.25).unwrap();
        assert_eq!(transpose(&w.block(0, 0)), w.block(1, 1));
        assert_eq!(w.block(0, 1), w.block(1, 0));
        let xy = w.block(0, 1);
        for k in 0..3 {
            assert_eq!(xy[1][k], 0.0);
            assert_eq!(xy[k][1], 0.0);
        }
        let xx = w.block(0, 0);
        for r in 0..3 {
            assert_eq!(xx[r][0], xx[r][2]);
            assert_eq!(xx[0][r], xx[2][r]);
        }
    }

    #[test]
    fn elastic_kernel_from_quadrature() {
        let rho = MaterialParams::elastic(0.23e12, 0.289);
        let k = element_stiffness_quadrature(PhysicsKind::Elasticity, &rho, 3).unwrap();
        let w = elasticity_kernel(0.23e12, 0.289).unwrap();
        assert!(assemble_kernel(&k).relative_difference(&w) < 1e-13);
    }

    #[test]
    fn coupling_structure() {
        let w = thermoelastic_kernel(&THERMO).unwrap();
        for q in 0..2 {
            assert!(w.block(2, q).iter().flatten().all(|&v| v == 0.0));
        }
        assert_eq!(w.block(1, 2)[1], [0.0; 3]);
        assert_eq!(w.block(2, 2), thermal_kernel(11.82).unwrap().block(0, 0));
        let oracle = assemble_kernel(&coupling_block_quadrature(&THERMO, 2).unwrap());
        let c = coupling_kernel(0.23e12, 0.289, 12.92e-5).unwrap();
        assert!(c.relative_difference(&oracle) < 1e-13);
    }

    #[test]
    fn theta_collapses_to_homogeneous() {
        let r0 = MaterialParams::elastic(0.241e12, 0.36);
        let r1 = MaterialParams::elastic(0.2e12, 0.25);
        let theta = biphase_theta(&r0, &r1).unwrap();
        assert!(theta.collapse(0).relative_difference(&elasticity_kernel(0.241e12, 0.36).unwrap()) < 1e-14);
        assert!(theta.collapse(1).relative_difference(&elasticity_kernel(0.2e12, 0.25).unwrap()) < 1e-14);
    }

    #[test]
    fn derivative_in_e_is_unit_modulus_matrix() {
        let r0 = MaterialParams::elastic(0.2e12, 0.25);
        let d = dtheta_drho(&r0, &r0).unwrap();
        let unit = element_stiffness(PhysicsKind::Elasticity, &MaterialParams::elastic(1.0, 0.25)).unwrap();
        assert!(d[0].block.relative_difference(&unit) < 1e-14);
    }

    #[test]
    fn derivative_in_nu_matches_finite_difference() {
        let (e, nu, step) = (0.2e12, 0.25, 1e-6);
        let rho = MaterialParams::elastic(e, nu);
        let d = dtheta_drho(&rho, &rho).unwrap();
        let plus = element_stiffness(PhysicsKind::Elasticity, &MaterialParams::elastic(e, nu + step)).unwrap();
        let minus = element_stiffness(PhysicsKind::Elasticity, &MaterialParams::elastic(e, nu - step)).unwrap();
        let fd = plus.combine(&minus, -1.0).scaled(0.5 / step);
        assert!(fd.relative_difference(&d[1].block) < 1e-6);
        assert_eq!(d[3].param, RhoParam::Nu1);
    }

    #[test]
    fn params_validation() {
        assert!(MaterialParams::elastic(1.0, 0.5).validate(PhysicsKind::Elasticity).is_err());
        assert!(MaterialParams::elastic(-1.0, 0.3).validate(PhysicsKind::Elasticity).is_err());
        assert!(MaterialParams::elastic(1.0, 0.3).validate(PhysicsKind::Thermal).is_err());
        assert!(THERMO.validate(PhysicsKind::Thermoelasticity).is_ok());
        let json = serde_json::to_string(&MaterialParams::elastic(2.0, 0.3)).unwrap();
        assert_eq!(json, r#"{"E":2.0,"nu":0.3}"#);
    }

    fn oracle(kind: PhysicsKind, rho: &MaterialParams) -> StencilKernel {
        assemble_kernel(&element_stiffness_quadrature(kind, rho, 2).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn closed_forms_match_quadrature(
            e in 0.1e12..0.4e12f64,
            nu in 0.2..0.35f64,
            kappa in 10.0..14.0f64,
            alpha in 11e-5..15e-5f64,
        ) {
            let rho = MaterialParams::thermoelastic(e, nu, kappa, alpha);
            for kind in PhysicsKind::ALL {
                let w = kernel_for(kind, &rho).unwrap();
                prop_assert!(w.relative_difference(&oracle(kind, &rho)) <= 1e-10);
                let k = element_stiffness(kind, &rho).unwrap();
                let kq = element_stiffness_quadrature(kind, &rho, 2).unwrap();
                prop_assert!(k.relative_difference(&kq) <= 1e-10);
            }
        }
    }
}
