//! Global stiffness assembly in compressed sparse row form.

use rayon::prelude::*;

use crate::element_kernels::{element_stiffness, ElementStiffness, LOCAL_OFFSETS};
use crate::error::{Error, Result};
use crate::field_image::{FieldImage, Material, PhaseImage, PhysicsKind};

/// Global stiffness `K` over `n * n * d` DOFs; DOF `node * d + channel`
/// matches the flat layout of a [`FieldImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseStiffness {
    n: usize,
    kind: PhysicsKind,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseStiffness {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> PhysicsKind {
        self.kind
    }

    pub fn dof_count(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(columns, values)` of one row, columns ascending.
    pub fn row(&self, row: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (cols, vals) = self.row(row);
        cols.binary_search(&col).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dof_count()).map(|r| self.get(r, r)).collect()
    }

    pub fn matvec_slice(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let (cols, vals) = self.row(r);
            *yr = cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum();
        });
    }

    /// `K u` as an image.
    pub fn matvec(&self, u: &FieldImage) -> Result<FieldImage> {
        if u.n() != self.n || u.kind() != self.kind {
            return Err(Error::Shape(format!(
                "stiffness is {} n = {}, image is {} n = {}",
                self.kind,
                self.n,
                u.kind(),
                u.n()
            )));
        }
        let mut out = vec![0.0; self.dof_count()];
        self.matvec_slice(u.data(), &mut out);
        FieldImage::from_vec(self.n, self.kind, out)
    }

    /// Largest `|K_ij - K_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..self.dof_count() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }

    pub fn max_row_nnz(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Per-element matrices: one shared matrix or a phase blend per element.
enum ElementSource {
    Uniform(ElementStiffness),
    Blend { k0: ElementStiffness, k1: ElementStiffness, h: PhaseImage },
}

impl ElementSource {
    fn entry(&self, er: usize, ec: usize, row: usize, col: usize) -> f64 {
        match self {
            ElementSource::Uniform(k) => k.get(row, col),
            ElementSource::Blend { k0, k1, h } => {
                let w = h.get(er, ec);
                w * k0.get(row, col) + (1.0 - w) * k1.get(row, col)
            }
        }
    }
}

/// Sums element matrices into `K`. A bi-phase material weights phase 0 by
/// `H_e` and phase 1 by `1 - H_e`; a homogeneous material ignores `h`.
pub fn assemble_global(
    kind: PhysicsKind,
    material: &Material,
    h: Option<&PhaseImage>,
    n: usize,
) -> Result<SparseStiffness> {
    if n < 2 {
        return Err(Error::Dimension(format!("node count per side must be >= 2, got {n}")));
    }
    let source = match material {
        Material::Homogeneous(rho) => ElementSource::Uniform(element_stiffness(kind, rho)?),
        Material::Biphase { phase0, phase1 } => {
            let h = h.ok_or_else(|| Error::Validation("bi-phase assembly requires a phase image".into()))?;
            h.check_nodes(n)?;
            ElementSource::Blend {
                k0: element_stiffness(kind, phase0)?,
                k1: element_stiffness(kind, phase1)?,
                h: h.clone(),
            }
        }
    };
    let d = kind.channels();

    // Each node row gathers from the elements touching it, so rows are
    // built independently.
    let rows: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut lens = Vec::with_capacity(n * d);
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for j in 0..n {
                let ilo = i.saturating_sub(1);
                let ihi = (i + 1).min(n - 1);
                let jlo = j.saturating_sub(1);
                let jhi = (j + 1).min(n - 1);
                let width = (jhi - jlo + 1) * d;
                let count = (ihi - ilo + 1) * width;
                for p in 0..d {
                    let mut row = vec![0.0; count];
                    for (s, &(dr, dc)) in LOCAL_OFFSETS.iter().enumerate() {
                        // Element whose local node `s` is this node.
                        let (Some(er), Some(ec)) =
                            ((i as isize - dr).try_into().ok(), (j as isize - dc).try_into().ok())
                        else {
                            continue;
                        };
                        let (er, ec): (usize, usize) = (er, ec);
                        if er + 1 >= n || ec + 1 >= n {
                            continue;
                        }
                        for (b, &(br, bc)) in LOCAL_OFFSETS.iter().enumerate() {
                            let ni = er + br as usize;
                            let nj = ec + bc as usize;
                            for q in 0..d {
                                let slot = (ni - ilo) * width + (nj - jlo) * d + q;
                                row[slot] += source.entry(er, ec, p * 4 + s, q * 4 + b);
                            }
                        }
                    }
                    for ni in ilo..=ihi {
                        for nj in jlo..=jhi {
                            for q in 0..d {
                                cols.push((ni * n + nj) * d + q);
                                vals.push(row[(ni - ilo) * width + (nj - jlo) * d + q]);
                            }
                        }
                    }
                    lens.push(count);
                }
            }
            (lens, cols, vals)
        })
        .collect();

    let mut row_ptr = Vec::with_capacity(n * n * d + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for (lens, cols, vals) in rows {
        for len in lens {
            row_ptr.push(row_ptr.last().unwrap() + len);
        }
        col_idx.extend(cols);
        values.extend(vals);
    }
    Ok(SparseStiffness { n, kind, row_ptr, col_idx, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::MaterialParams;

    #[test]
    fn three_by_three_thermal_center() {
        let k = assemble_global(PhysicsKind::Thermal, &Material::Homogeneous(MaterialParams::thermal(6.0)), None, 3).unwrap();
        // Four elements each contribute -4 to the centre diagonal.
        assert!((k.get(4, 4) + 16.0).abs() < 1e-12);
        assert!((k.get(0, 0) + 4.0).abs() < 1e-12);
        assert_eq!(k.dof_count(), 9);
        assert!(k.asymmetry() < 1e-14);
    }

    #[test]
    fn row_nonzeros_bounded() {
        let rho = MaterialParams::thermoelastic(2e11, 0.3, 12.0, 1e-4);
        let k = assemble_global(PhysicsKind::Thermoelasticity, &Material::Homogeneous(rho), None, 5).unwrap();
        assert!(k.max_row_nnz() <= 9 * 9);
        let rows_cols_sorted = (0..k.dof_count()).all(|r| k.row(r).0.windows(2).all(|w| w[0] < w[1]));
        assert!(rows_cols_sorted);
    }

    #[test]
    fn equal_phases_match_homogeneous() {
        let rho = MaterialParams::elastic(2e11, 0.3);
        let hom = assemble_global(PhysicsKind::Elasticity, &Material::Homogeneous(rho), None, 6).unwrap();
        let h = PhaseImage::new(6, 0.0).unwrap();
        let bi = assemble_global(PhysicsKind::Elasticity, &Material::Biphase { phase0: rho, phase1: rho }, Some(&h), 6).unwrap();
        assert_eq!(hom.col_idx, bi.col_idx);
        for (a, b) in hom.values.iter().zip(&bi.values) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn biphase_requires_phase() {
        let rho = MaterialParams::elastic(2e11, 0.3);
        let m = Material::Biphase { phase0: rho, phase1: rho };
        assert!(assemble_global(PhysicsKind::Elasticity, &m, None, 4).is_err());
    }
}
