//! Synthetic (loading, response) pairs from the sparse solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_global, solve_dirichlet, SolveMethod};
use crate::error::{Error, Result};
use crate::field_image::{is_interior, BoundaryCondition, FieldImage, Material, PhaseImage, PhysicsKind, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripAxis {
    Row,
    Column,
}

/// How the loading image is filled. Loads are applied on interior nodes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LoadingSpec {
    /// One loaded node (default: the centre) with a value per channel
    /// (default: 1 on every channel).
    Point {
        #[serde(default)]
        row: Option<usize>,
        #[serde(default)]
        col: Option<usize>,
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
    /// Uniform load on one channel along a line of nodes; the range defaults
    /// to the whole interior.
    Strip {
        channel: usize,
        axis: StripAxis,
        index: usize,
        #[serde(default)]
        start: Option<usize>,
        #[serde(default)]
        end: Option<usize>,
        value: f64,
    },
    /// I.i.d. uniform `(-amplitude, amplitude)` per interior node and channel.
    Random { amplitude: f64 },
    /// Random loading with `V^x = factor * V^y`; other channels independent.
    Collinear { factor: f64, amplitude: f64 },
}

impl LoadingSpec {
    pub fn random() -> Self {
        LoadingSpec::Random { amplitude: 1.0 }
    }

    /// Builds the loading image; `rng` is only drawn from by random specs.
    pub fn loading(&self, kind: PhysicsKind, n: usize, rng: &mut ChaCha8Rng) -> Result<FieldImage> {
        let d = kind.channels();
        let mut v = FieldImage::zeros(n, kind)?;
        let interior = |i: usize, j: usize| -> Result<()> {
            if is_interior(n, i, j) {
                Ok(())
            } else {
                Err(Error::Validation(format!("load at ({i}, {j}) is not an interior node")))
            }
        };
        match self {
            LoadingSpec::Point { row, col, values } => {
                let (i, j) = (row.unwrap_or(n / 2), col.unwrap_or(n / 2));
                interior(i, j)?;
                let values = values.clone().unwrap_or_else(|| vec![1.0; d]);
                if values.len() != d {
                    return Err(Error::Validation(format!("point load needs {d} values, got {}", values.len())));
                }
                for (c, val) in values.into_iter().enumerate() {
                    v.set(i, j, c, val);
                }
            }
            LoadingSpec::Strip { channel, axis, index, start, end, value } => {
                if *channel >= d {
                    return Err(Error::Validation(format!("channel {channel} out of range for {kind}")));
                }
                let start = start.unwrap_or(1);
                let end = end.unwrap_or(n - 1);
                if start >= end {
                    return Err(Error::Validation("strip range is empty".into()));
                }
                for t in start..end {
                    let (i, j) = match axis {
                        StripAxis::Row => (*index, t),
                        StripAxis::Column => (t, *index),
                    };
                    interior(i, j)?;
                    v.set(i, j, *channel, *value);
                }
            }
            LoadingSpec::Random { amplitude } => {
                check_amplitude(*amplitude)?;
                for i in 1..n - 1 {
                    for j in 1..n - 1 {
                        for c in 0..d {
                            v.set(i, j, c, rng.gen_range(-amplitude..*amplitude));
                        }
                    }
                }
            }
            LoadingSpec::Collinear { factor, amplitude } => {
                check_amplitude(*amplitude)?;
                if d < 2 {
                    return Err(Error::Validation("collinear loading needs x and y channels".into()));
                }
                if !factor.is_finite() {
                    return Err(Error::Validation("collinear factor must be finite".into()));
                }
                for i in 1..n - 1 {
                    for j in 1..n - 1 {
                        let y = rng.gen_range(-amplitude..*amplitude);
                        v.set(i, j, 0, factor * y);
                        v.set(i, j, 1, y);
                        for c in 2..d {
                            v.set(i, j, c, rng.gen_range(-amplitude..*amplitude));
                        }
                    }
                }
            }
        }
        Ok(v)
    }
}

fn check_amplitude(a: f64) -> Result<()> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Validation(format!("amplitude must be positive, got {a}")));
    }
    Ok(())
}

/// Draws a loading, solves with all edges clamped to zero, and packages the pair.
pub fn generate_sample(
    spec: &LoadingSpec,
    kind: PhysicsKind,
    material: &Material,
    h: Option<&PhaseImage>,
    n: usize,
    seed: u64,
) -> Result<Sample> {
    if n < 3 {
        return Err(Error::Dimension(format!("samples need n >= 3, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = spec.loading(kind, n, &mut rng)?;
    let k = assemble_global(kind, material, h, n)?;
    let bc = BoundaryCondition::clamped(n, kind)?;
    let solution = solve_dirichlet(&k, &v, &bc, SolveMethod::Direct, 0.0)?;
    Sample::new(v, solution.u, h.cloned(), Some(*material))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element_kernels::MaterialParams;

    #[test]
    fn strip_only_on_its_line() {
        let spec = LoadingSpec::Strip {
            channel: 0,
            axis: StripAxis::Column,
            index: 4,
            start: Some(2),
            end: Some(7),
            value: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = spec.loading(PhysicsKind::Elasticity, 9, &mut rng).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let on = j == 4 && (2..7).contains(&i);
                assert_eq!(v.get(i, j, 0), if on { 1.0 } else { 0.0 });
                assert_eq!(v.get(i, j, 1), 0.0);
            }
        }
    }

    #[test]
    fn random_loading_zero_on_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = LoadingSpec::random().loading(PhysicsKind::Thermoelasticity, 6, &mut rng).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if !is_interior(6, i, j) {
                    assert!((0..3).all(|c| v.get(i, j, c) == 0.0));
                } else {
                    assert!((0..3).all(|c| v.get(i, j, c).abs() < 1.0));
                }
            }
        }
    }

    #[test]
    fn collinear_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = LoadingSpec::Collinear { factor: 2.0, amplitude: 1.0 };
        let v = spec.loading(PhysicsKind::Elasticity, 6, &mut rng).unwrap();
        assert_eq!(v.get(2, 3, 0), 2.0 * v.get(2, 3, 1));
        assert!(spec.loading(PhysicsKind::Thermal, 6, &mut rng).is_err());
    }

    #[test]
    fn point_load_must_be_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = LoadingSpec::Point { row: Some(0), col: Some(2), values: None };
        assert!(spec.loading(PhysicsKind::Thermal, 5, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_sample() {
        let m = Material::Homogeneous(MaterialParams::thermal(12.0));
        let a = generate_sample(&LoadingSpec::random(), PhysicsKind::Thermal, &m, None, 7, 11).unwrap();
        let b = generate_sample(&LoadingSpec::random(), PhysicsKind::Thermal, &m, None, 7, 11).unwrap();
        let c = generate_sample(&LoadingSpec::random(), PhysicsKind::Thermal, &m, None, 7, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.v, c.v);
    }
}
