//! Classical sparse finite-element solver used as the oracle for the
//! convolution operators, plus training-data generation and memory accounting.

mod generate;
mod memory;
mod solve;
mod sparse;

pub use generate::{generate_sample, LoadingSpec, StripAxis};
pub use memory::{memory_estimate, memory_formula, MemoryEstimate, MemoryFormula, MemoryProblem, SpatialDim};
pub use solve::{solve_dirichlet, PivotSigns, Solution, SolveMethod};
pub use sparse::{assemble_global, SparseStiffness};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::{kernel_for, MaterialParams};
    use crate::fea_conv::conv_homogeneous;
    use crate::field_image::{BoundaryCondition, FieldImage, Material, PhysicsKind};

    fn params() -> MaterialParams {
        MaterialParams::thermoelastic(0.2e12, 0.25, 12.0, 13e-5)
    }

    #[test]
    fn zero_load_zero_response() {
        for kind in PhysicsKind::ALL {
            let k = assemble_global(kind, &Material::Homogeneous(params()), None, 6).unwrap();
            let bc = BoundaryCondition::clamped(6, kind).unwrap();
            let v = FieldImage::zeros(6, kind).unwrap();
            for method in [SolveMethod::Direct, SolveMethod::Cg] {
                let s = solve_dirichlet(&k, &v, &bc, method, 1e-12).unwrap();
                assert!(s.u.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn direct_and_cg_agree_and_invert_convolution() {
        for kind in PhysicsKind::ALL {
            let n = 9;
            let k = assemble_global(kind, &Material::Homogeneous(params()), None, n).unwrap();
            let bc = BoundaryCondition::clamped(n, kind).unwrap();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
            let v = LoadingSpec::random().loading(kind, n, &mut rng).unwrap();
            let direct = solve_dirichlet(&k, &v, &bc, SolveMethod::Direct, 0.0).unwrap();
            let cg = solve_dirichlet(&k, &v, &bc, SolveMethod::Cg, 1e-13).unwrap();
            assert!(cg.u.interior_relative_error(&direct.u) < 1e-10, "{kind}");
            let w = kernel_for(kind, &params()).unwrap();
            let back = conv_homogeneous(&w, &direct.u).unwrap();
            assert!(back.interior_relative_error(&v) < 1e-8, "{kind}");
        }
    }

    #[test]
    fn pivot_signs_follow_convention() {
        let bc = |kind| BoundaryCondition::clamped(7, kind).unwrap();
        let thermal = assemble_global(PhysicsKind::Thermal, &Material::Homogeneous(params()), None, 7).unwrap();
        let v = FieldImage::zeros(7, PhysicsKind::Thermal).unwrap();
        let s = solve_dirichlet(&thermal, &v, &bc(PhysicsKind::Thermal), SolveMethod::Direct, 0.0).unwrap();
        assert_eq!(s.pivots.unwrap().positive, 0);
        let elastic = assemble_global(PhysicsKind::Elasticity, &Material::Homogeneous(params()), None, 7).unwrap();
        let v = FieldImage::zeros(7, PhysicsKind::Elasticity).unwrap();
        let s = solve_dirichlet(&elastic, &v, &bc(PhysicsKind::Elasticity), SolveMethod::Direct, 0.0).unwrap();
        assert_eq!(s.pivots.unwrap().negative, 0);
    }
}
