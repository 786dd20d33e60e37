//! Dirichlet-constrained linear solves: banded LU and staged conjugate gradients.

use serde::{Deserialize, Serialize};

use super::SparseStiffness;
use crate::error::{Error, Result};
use crate::field_image::{BoundaryCondition, FieldImage, PhysicsKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    #[default]
    Direct,
    Cg,
}

/// Signs of the LU pivots of the reduced system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PivotSigns {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: FieldImage,
    /// `K u - v` on constrained nodes, zero elsewhere.
    pub reactions: FieldImage,
    /// Present for direct solves.
    pub pivots: Option<PivotSigns>,
    /// Total CG iterations over all stages.
    pub iterations: usize,
}

/// Free DOFs (global indices, ascending) and the start vector holding the
/// prescribed values on constrained DOFs.
fn partition(k: &SparseStiffness, bc: &BoundaryCondition) -> (Vec<usize>, Vec<f64>) {
    let d = k.kind().channels();
    let mut free = Vec::new();
    let mut x = vec![0.0; k.dof_count()];
    for (node, &fixed) in bc.mask().iter().enumerate() {
        for c in 0..d {
            let dof = node * d + c;
            if fixed {
                x[dof] = bc.values().data()[dof];
            } else {
                free.push(dof);
            }
        }
    }
    (free, x)
}

/// Solves `K u = v` on the free DOFs with `u` prescribed on the constrained ones.
pub fn solve_dirichlet(
    k: &SparseStiffness,
    v: &FieldImage,
    bc: &BoundaryCondition,
    method: SolveMethod,
    tol: f64,
) -> Result<Solution> {
    if v.n() != k.n() || v.kind() != k.kind() || bc.n() != k.n() || bc.kind() != k.kind() {
        return Err(Error::Shape("stiffness, loading and boundary condition disagree".into()));
    }
    if bc.constrained_count() == 0 {
        return Err(Error::Singular("no constrained nodes; the system has rigid modes".into()));
    }
    let (free, mut x) = partition(k, bc);
    let mut pivots = None;
    let mut iterations = 0;
    if !free.is_empty() {
        match method {
            SolveMethod::Direct => {
                pivots = Some(banded_solve(k, v.data(), &free, &mut x)?);
            }
            SolveMethod::Cg => {
                for (dofs, sign) in cg_stages(k.kind(), &free) {
                    iterations += cg_stage(k, v.data(), &dofs, sign, tol, &mut x)?;
                }
            }
        }
    }
    let mut kx = vec![0.0; x.len()];
    k.matvec_slice(&x, &mut kx);
    let d = k.kind().channels();
    let mut reactions = vec![0.0; x.len()];
    for (node, &fixed) in bc.mask().iter().enumerate() {
        if fixed {
            for c in 0..d {
                let dof = node * d + c;
                reactions[dof] = kx[dof] - v.data()[dof];
            }
        }
    }
    Ok(Solution {
        u: FieldImage::from_vec(k.n(), k.kind(), x)?,
        reactions: FieldImage::from_vec(k.n(), k.kind(), reactions)?,
        pivots,
        iterations,
    })
}

/// LU without pivoting on the banded reduced matrix; fills the free entries of `x`.
fn banded_solve(k: &SparseStiffness, v: &[f64], free: &[usize], x: &mut [f64]) -> Result<PivotSigns> {
    let m = free.len();
    let mut local = vec![usize::MAX; k.dof_count()];
    for (r, &g) in free.iter().enumerate() {
        local[g] = r;
    }
    let mut bw = 0;
    for (r, &g) in free.iter().enumerate() {
        for &c in k.row(g).0 {
            if local[c] != usize::MAX {
                bw = bw.max(r.abs_diff(local[c]));
            }
        }
    }
    let width = 2 * bw + 1;
    let mut band = vec![0.0; m * width];
    let at = |r: usize, c: usize| r * width + c + bw - r;
    let mut rhs = vec![0.0; m];
    let mut scale: f64 = 0.0;
    for (r, &g) in free.iter().enumerate() {
        let (cols, vals) = k.row(g);
        let mut b = v[g];
        for (&c, &val) in cols.iter().zip(vals) {
            if local[c] == usize::MAX {
                b -= val * x[c];
            } else {
                band[at(r, local[c])] = val;
                scale = scale.max(val.abs());
            }
        }
        rhs[r] = b;
    }

    let mut signs = PivotSigns::default();
    let tiny = scale * 1e-14;
    for p in 0..m {
        let pivot = band[at(p, p)];
        if pivot.abs() <= tiny {
            return Err(Error::Singular(format!("zero pivot at reduced DOF {p}")));
        }
        if pivot > 0.0 {
            signs.positive += 1;
        } else {
            signs.negative += 1;
        }
        let end = (p + bw + 1).min(m);
        for r in p + 1..end {
            let f = band[at(r, p)];
            if f == 0.0 {
                continue;
            }
            let l = f / pivot;
            band[at(r, p)] = l;
            for c in p + 1..end {
                band[at(r, c)] -= l * band[at(p, c)];
            }
            rhs[r] -= l * rhs[p];
        }
    }
    for p in (0..m).rev() {
        let end = (p + bw + 1).min(m);
        let mut s = rhs[p];
        for c in p + 1..end {
            s -= band[at(p, c)] * rhs[c];
        }
        rhs[p] = s / band[at(p, p)];
    }
    for (r, &g) in free.iter().enumerate() {
        x[g] = rhs[r];
    }
    Ok(signs)
}

/// Channel groups solved in sequence with the sign making each block positive
/// definite. Temperature never depends on displacement, so it goes first.
fn cg_stages(kind: PhysicsKind, free: &[usize]) -> Vec<(Vec<usize>, f64)> {
    let d = kind.channels();
    let pick = |chans: &[usize]| -> Vec<usize> { free.iter().copied().filter(|g| chans.contains(&(g % d))).collect() };
    match kind {
        PhysicsKind::Thermal => vec![(free.to_vec(), -1.0)],
        PhysicsKind::Elasticity => vec![(free.to_vec(), 1.0)],
        PhysicsKind::Thermoelasticity => vec![(pick(&[2]), -1.0), (pick(&[0, 1]), 1.0)],
    }
}

/// CG on `sign * K_SS y = sign * (v - K x)_S`, with `x` zero on `S` on entry.
fn cg_stage(k: &SparseStiffness, v: &[f64], dofs: &[usize], sign: f64, tol: f64, x: &mut [f64]) -> Result<usize> {
    let total = x.len();
    let mut kx = vec![0.0; total];
    k.matvec_slice(x, &mut kx);
    let b: Vec<f64> = dofs.iter().map(|&g| sign * (v[g] - kx[g])).collect();
    let bnorm = norm(&b);
    if bnorm == 0.0 {
        return Ok(0);
    }
    let apply = |p: &[f64], out: &mut [f64], full: &mut [f64], kfull: &mut [f64]| {
        full.fill(0.0);
        for (&g, &pv) in dofs.iter().zip(p) {
            full[g] = pv;
        }
        k.matvec_slice(full, kfull);
        for (o, &g) in out.iter_mut().zip(dofs) {
            *o = sign * kfull[g];
        }
    };
    let m = dofs.len();
    let mut y = vec![0.0; m];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut full = vec![0.0; total];
    let mut rr = dot(&r, &r);
    let max_iter = 10 * m;
    for it in 1..=max_iter {
        apply(&p, &mut ap, &mut full, &mut kx);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Singular("operator block is not positive definite".into()));
        }
        let alpha = rr / pap;
        for i in 0..m {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            for (&g, &yv) in dofs.iter().zip(&y) {
                x[g] = yv;
            }
            return Ok(it);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged(format!(
        "conjugate gradients stopped after {max_iter} iterations at relative residual {:e}",
        rr.sqrt() / bnorm
    )))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
