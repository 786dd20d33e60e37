//! Forward FEA convolutions and their gradients.
//!
//! The homogeneous convolution zero-pads, so its outer-ring outputs are not
//! nodal loads; callers compare interiors only. The bi-phase convolution runs
//! element by element and equals the assembled product `K u` at every node.

use rayon::prelude::*;

use crate::element_kernels::{StencilKernel, ThetaDerivative, ThetaKernel, LOCAL_OFFSETS};
use crate::error::{Error, Result};
use crate::field_image::{FieldImage, PhaseImage, PhysicsKind};

/// A linear map from response to loading.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Homogeneous(StencilKernel),
    Biphase { theta: ThetaKernel, h: PhaseImage },
}

impl Operator {
    pub fn kind(&self) -> Option<PhysicsKind> {
        match self {
            Operator::Homogeneous(w) => w.kind(),
            Operator::Biphase { theta, .. } => Some(theta.kind()),
        }
    }

    pub fn apply(&self, u: &FieldImage) -> Result<FieldImage> {
        match self {
            Operator::Homogeneous(w) => conv_homogeneous(w, u),
            Operator::Biphase { theta, h } => conv_biphase(theta, u, h),
        }
    }
}

fn check_kernel(w: &StencilKernel, u: &FieldImage) -> Result<()> {
    if w.kind() != Some(u.kind()) {
        return Err(Error::Shape(format!(
            "kernel maps {} to {} channels, image is {} with {} channels",
            w.inputs(),
            w.outputs(),
            u.kind(),
            u.channels()
        )));
    }
    if u.n() < 3 {
        return Err(Error::Dimension(format!("convolution needs n >= 3, got {}", u.n())));
    }
    Ok(())
}

/// `V = W ⊛ U` with zero padding outside the grid.
pub fn conv_homogeneous(w: &StencilKernel, u: &FieldImage) -> Result<FieldImage> {
    check_kernel(w, u)?;
    let n = u.n();
    let nc = u.channels();
    let src = u.data();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(n * nc).enumerate().for_each(|(i, row)| {
        for j in 0..n {
            for r in 0..3 {
                let Some(ii) = (i + r).checked_sub(1).filter(|&ii| ii < n) else {
                    continue;
                };
                for c in 0..3 {
                    let Some(jj) = (j + c).checked_sub(1).filter(|&jj| jj < n) else {
                        continue;
                    };
                    let base = (ii * n + jj) * nc;
                    for p in 0..nc {
                        let mut acc = 0.0;
                        for q in 0..nc {
                            acc += w.get(p, q, r, c) * src[base + q];
                        }
                        row[j * nc + p] += acc;
                    }
                }
            }
        }
    });
    FieldImage::from_vec(n, u.kind(), out)
}

fn check_biphase(theta: &ThetaKernel, img: &FieldImage, h: &PhaseImage) -> Result<()> {
    if theta.kind() != img.kind() {
        return Err(Error::Shape(format!("Θ is {}, image is {}", theta.kind(), img.kind())));
    }
    h.check_nodes(img.n())
}

/// Global node index `(i * n + j)` of local node `a` in element `(er, ec)`.
#[inline]
fn element_node(n: usize, er: usize, ec: usize, a: usize) -> usize {
    let (dr, dc) = LOCAL_OFFSETS[a];
    (er + dr as usize) * n + ec + dc as usize
}

/// Element vector `x_e[q * 4 + b]` from nodal data.
#[inline]
pub(crate) fn gather(data: &[f64], n: usize, nc: usize, er: usize, ec: usize, out: &mut [f64]) {
    for b in 0..4 {
        let node = element_node(n, er, ec, b);
        for q in 0..nc {
            out[q * 4 + b] = data[node * nc + q];
        }
    }
}

#[inline]
pub(crate) fn scatter(data: &mut [f64], n: usize, nc: usize, er: usize, ec: usize, x: &[f64]) {
    for a in 0..4 {
        let node = element_node(n, er, ec, a);
        for p in 0..nc {
            data[node * nc + p] += x[p * 4 + a];
        }
    }
}

/// `y = K x` for a dense square matrix stored row-major.
#[inline]
pub(crate) fn matvec(k: &[f64], x: &[f64], y: &mut [f64]) {
    let m = x.len();
    for (row, yi) in y.iter_mut().enumerate() {
        *yi = k[row * m..(row + 1) * m].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `y = K^T x`.
#[inline]
fn matvec_t(k: &[f64], x: &[f64], y: &mut [f64]) {
    let m = x.len();
    y.fill(0.0);
    for (row, &xi) in x.iter().enumerate() {
        for (yj, a) in y.iter_mut().zip(&k[row * m..(row + 1) * m]) {
            *yj += a * xi;
        }
    }
}

/// `x^T K y`.
#[inline]
pub(crate) fn bilinear(k: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let m = y.len();
    x.iter()
        .enumerate()
        .map(|(row, xi)| xi * k[row * m..(row + 1) * m].iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Phase-blended element matrix `H K0 + (1 - H) K1`.
#[inline]
fn blend(k0: &[f64], k1: &[f64], h: f64, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(k0).zip(k1) {
        *o = h * a + (1.0 - h) * b;
    }
}

/// Bi-phase convolution: each element contributes `(H_e Θ⁰ + (1 - H_e) Θ¹) u_e`
/// to its four nodes.
pub fn conv_biphase(theta: &ThetaKernel, u: &FieldImage, h: &PhaseImage) -> Result<FieldImage> {
    check_biphase(theta, u, h)?;
    let n = u.n();
    let nc = u.channels();
    let m = 4 * nc;
    let (k0, k1) = (theta.phase(0).data(), theta.phase(1).data());
    let mut out = vec![0.0; u.data().len()];
    let mut ke = vec![0.0; m * m];
    let mut ue = vec![0.0; m];
    let mut ve = vec![0.0; m];
    for er in 0..n - 1 {
        for ec in 0..n - 1 {
            blend(k0, k1, h.get(er, ec), &mut ke);
            gather(u.data(), n, nc, er, ec, &mut ue);
            matvec(&ke, &ue, &mut ve);
            scatter(&mut out, n, nc, er, ec, &ve);
        }
    }
    FieldImage::from_vec(n, u.kind(), out)
}

/// Adjoint of [`conv_biphase`] in `U`, applied to an upstream gradient `vhat`.
pub fn grad_wrt_response(theta: &ThetaKernel, h: &PhaseImage, vhat: &FieldImage) -> Result<FieldImage> {
    check_biphase(theta, vhat, h)?;
    let n = vhat.n();
    let nc = vhat.channels();
    let m = 4 * nc;
    let (k0, k1) = (theta.phase(0).data(), theta.phase(1).data());
    let mut out = vec![0.0; vhat.data().len()];
    let mut ke = vec![0.0; m * m];
    let mut ve = vec![0.0; m];
    let mut ge = vec![0.0; m];
    for er in 0..n - 1 {
        for ec in 0..n - 1 {
            blend(k0, k1, h.get(er, ec), &mut ke);
            gather(vhat.data(), n, nc, er, ec, &mut ve);
            matvec_t(&ke, &ve, &mut ge);
            scatter(&mut out, n, nc, er, ec, &ge);
        }
    }
    FieldImage::from_vec(n, vhat.kind(), out)
}

/// Per-element gradient `vhat_e^T (Θ⁰ - Θ¹) u_e`, row-major over elements.
pub fn grad_wrt_phase(theta: &ThetaKernel, u: &FieldImage, vhat: &FieldImage) -> Result<Vec<f64>> {
    if theta.kind() != u.kind() {
        return Err(Error::Shape(format!("Θ is {}, image is {}", theta.kind(), u.kind())));
    }
    u.same_shape(vhat)?;
    let n = u.n();
    let nc = u.channels();
    let m = 4 * nc;
    let diff: Vec<f64> = theta
        .phase(0)
        .data()
        .iter()
        .zip(theta.phase(1).data())
        .map(|(a, b)| a - b)
        .collect();
    let mut ue = vec![0.0; m];
    let mut ve = vec![0.0; m];
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for er in 0..n - 1 {
        for ec in 0..n - 1 {
            gather(u.data(), n, nc, er, ec, &mut ue);
            gather(vhat.data(), n, nc, er, ec, &mut ve);
            out.push(bilinear(&diff, &ve, &ue));
        }
    }
    Ok(out)
}

/// `Σ_e w_h(H_e) vhat_e^T (dΘ^h/dρ) u_e` for each derivative, where
/// `w_0 = H` and `w_1 = 1 - H`.
pub fn grad_wrt_rho(
    dtheta: &[ThetaDerivative],
    u: &FieldImage,
    h: &PhaseImage,
    vhat: &FieldImage,
) -> Result<Vec<f64>> {
    u.same_shape(vhat)?;
    h.check_nodes(u.n())?;
    let n = u.n();
    let nc = u.channels();
    let m = 4 * nc;
    for d in dtheta {
        if d.block.rows() != m || d.block.cols() != m {
            return Err(Error::Shape(format!(
                "derivative block is {}x{}, image needs {m}x{m}",
                d.block.rows(),
                d.block.cols()
            )));
        }
    }
    let mut ue = vec![0.0; m];
    let mut ve = vec![0.0; m];
    let mut out = vec![0.0; dtheta.len()];
    for er in 0..n - 1 {
        for ec in 0..n - 1 {
            gather(u.data(), n, nc, er, ec, &mut ue);
            gather(vhat.data(), n, nc, er, ec, &mut ve);
            let he = h.get(er, ec);
            for (g, d) in out.iter_mut().zip(dtheta) {
                let w = if d.param.phase() == 0 { he } else { 1.0 - he };
                if w != 0.0 {
                    *g += w * bilinear(d.block.data(), &ve, &ue);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::{biphase_theta, dtheta_drho, elasticity_kernel, thermal_kernel, MaterialParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, kind: PhysicsKind, rng: &mut ChaCha8Rng) -> FieldImage {
        FieldImage::from_fn(n, kind, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_phase(n: usize, rng: &mut ChaCha8Rng) -> PhaseImage {
        PhaseImage::from_fn(n, |_, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    fn rho0() -> MaterialParams {
        MaterialParams::elastic(0.2e12, 0.25)
    }

    fn rho1() -> MaterialParams {
        MaterialParams::elastic(0.241e12, 0.36)
    }

    #[test]
    fn zero_in_zero_out() {
        let w = elasticity_kernel(1.0, 0.3).unwrap();
        let v = conv_homogeneous(&w, &FieldImage::zeros(5, PhysicsKind::Elasticity).unwrap()).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_temperature_has_no_interior_load() {
        let w = thermal_kernel(3.0).unwrap();
        let v = conv_homogeneous(&w, &FieldImage::new(6, PhysicsKind::Thermal, 2.5).unwrap()).unwrap();
        assert!(v.interior_norm() < 1e-13);
    }

    #[test]
    fn kernel_image_mismatch_rejected() {
        let w = thermal_kernel(3.0).unwrap();
        assert!(conv_homogeneous(&w, &FieldImage::zeros(5, PhysicsKind::Elasticity).unwrap()).is_err());
        assert!(conv_homogeneous(&w, &FieldImage::zeros(2, PhysicsKind::Thermal).unwrap()).is_err());
    }

    #[test]
    fn homogeneous_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = elasticity_kernel(2.0, 0.3).unwrap();
        let a = random_image(7, PhysicsKind::Elasticity, &mut rng);
        let b = random_image(7, PhysicsKind::Elasticity, &mut rng);
        let mut combo = a.scaled(2.0);
        combo.axpy(-3.0, &b);
        let mut expect = conv_homogeneous(&w, &a).unwrap().scaled(2.0);
        expect.axpy(-3.0, &conv_homogeneous(&w, &b).unwrap());
        let got = conv_homogeneous(&w, &combo).unwrap();
        for (x, y) in got.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_phase_reduces_to_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = biphase_theta(&rho0(), &rho1()).unwrap();
        let u = random_image(8, PhysicsKind::Elasticity, &mut rng);
        for (fill, phase) in [(1.0, 0), (0.0, 1)] {
            let h = PhaseImage::new(8, fill).unwrap();
            let v = conv_biphase(&theta, &u, &h).unwrap();
            let reference = conv_homogeneous(&theta.collapse(phase), &u).unwrap();
            assert!(v.interior_relative_error(&reference) < 1e-14);
        }
    }

    #[test]
    fn label_swap_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = biphase_theta(&rho0(), &rho1()).unwrap();
        let u = random_image(6, PhysicsKind::Elasticity, &mut rng);
        let h = random_phase(6, &mut rng).binarized();
        let a = conv_biphase(&theta, &u, &h).unwrap();
        let b = conv_biphase(&theta.swapped(), &u, &h.complement()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn response_gradient_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = biphase_theta(&rho0(), &rho1()).unwrap();
        let u = random_image(9, PhysicsKind::Elasticity, &mut rng);
        let vhat = random_image(9, PhysicsKind::Elasticity, &mut rng);
        let h = random_phase(9, &mut rng);
        let lhs = conv_biphase(&theta, &u, &h).unwrap().dot(&vhat);
        let rhs = u.dot(&grad_wrt_response(&theta, &h, &vhat).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn equal_phases_give_zero_phase_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = biphase_theta(&rho0(), &rho0()).unwrap();
        let u = random_image(6, PhysicsKind::Elasticity, &mut rng);
        let vhat = random_image(6, PhysicsKind::Elasticity, &mut rng);
        assert!(grad_wrt_phase(&theta, &u, &vhat).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn phase_gradient_matches_linear_response() {
        // The output is affine in each H_e, so a unit step is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = biphase_theta(&rho0(), &rho1()).unwrap();
        let u = random_image(5, PhysicsKind::Elasticity, &mut rng);
        let vhat = random_image(5, PhysicsKind::Elasticity, &mut rng);
        let g = grad_wrt_phase(&theta, &u, &vhat).unwrap();
        let zero = PhaseImage::new(5, 0.0).unwrap();
        let base = conv_biphase(&theta, &u, &zero).unwrap().dot(&vhat);
        for e in 0..16 {
            let mut data = vec![0.0; 16];
            data[e] = 1.0;
            let h = PhaseImage::from_vec(4, data).unwrap();
            let step = conv_biphase(&theta, &u, &h).unwrap().dot(&vhat) - base;
            assert!((step - g[e]).abs() <= 1e-10 * g[e].abs().max(1.0));
        }
    }

    #[test]
    fn absent_phase_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_image(6, PhysicsKind::Elasticity, &mut rng);
        let vhat = random_image(6, PhysicsKind::Elasticity, &mut rng);
        let d = dtheta_drho(&rho0(), &rho1()).unwrap();
        let g = grad_wrt_rho(&d, &u, &PhaseImage::new(6, 0.0).unwrap(), &vhat).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] != 0.0 && g[3] != 0.0);
    }
}
