//! Nodal field images, element-wise phase images, Dirichlet boundary masks
//! and (loading, response) datasets.
//!
//! Images are stored row-major as `data[(i * n + j) * channels + c]` where `i`
//! is the row (increasing downward) and `j` the column (increasing rightward).
//! The `y` channel points upward, i.e. toward decreasing `i`.

mod io;

pub use io::{
    load_image, load_phase, read_image, read_phase, save_image, save_phase, write_csv, write_image,
    write_pgm, write_phase, ImageFile, FORMAT_VERSION, MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::element_kernels::MaterialParams;
use crate::error::{Error, Result};

/// The governing physics; fixes the channel count of every image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsKind {
    Thermal,
    Elasticity,
    Thermoelasticity,
}

impl PhysicsKind {
    pub const ALL: [PhysicsKind; 3] = [
        PhysicsKind::Thermal,
        PhysicsKind::Elasticity,
        PhysicsKind::Thermoelasticity,
    ];

    /// Degrees of freedom per node.
    pub fn channels(self) -> usize {
        match self {
            PhysicsKind::Thermal => 1,
            PhysicsKind::Elasticity => 2,
            PhysicsKind::Thermoelasticity => 3,
        }
    }

    pub fn labels(self) -> &'static [Channel] {
        match self {
            PhysicsKind::Thermal => &[Channel::Temperature],
            PhysicsKind::Elasticity => &[Channel::X, Channel::Y],
            PhysicsKind::Thermoelasticity => &[Channel::X, Channel::Y, Channel::Temperature],
        }
    }

    /// Byte tag used by the binary image format.
    pub fn code(self) -> u8 {
        match self {
            PhysicsKind::Thermal => 1,
            PhysicsKind::Elasticity => 2,
            PhysicsKind::Thermoelasticity => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(PhysicsKind::Thermal),
            2 => Ok(PhysicsKind::Elasticity),
            3 => Ok(PhysicsKind::Thermoelasticity),
            other => Err(Error::Parse(format!("unknown physics kind tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhysicsKind::Thermal => "thermal",
            PhysicsKind::Elasticity => "elasticity",
            PhysicsKind::Thermoelasticity => "thermoelasticity",
        }
    }
}

impl std::fmt::Display for PhysicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PhysicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thermal" => Ok(PhysicsKind::Thermal),
            "elasticity" | "elastic" => Ok(PhysicsKind::Elasticity),
            "thermoelasticity" | "thermoelastic" => Ok(PhysicsKind::Thermoelasticity),
            other => Err(Error::Validation(format!("unknown physics kind '{other}'"))),
        }
    }
}

/// Physical meaning of one image channel (displacement/force or temperature/heat flux).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    X,
    Y,
    Temperature,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::X => "x",
            Channel::Y => "y",
            Channel::Temperature => "t",
        })
    }
}

/// Multi-channel nodal image of size `n x n x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    n: usize,
    kind: PhysicsKind,
    data: Vec<f64>,
}

impl FieldImage {
    pub fn new(n: usize, kind: PhysicsKind, fill: f64) -> Result<Self> {
        check_node_count(n)?;
        if !fill.is_finite() {
            return Err(Error::Validation("fill value must be finite".into()));
        }
        Ok(Self {
            n,
            kind,
            data: vec![fill; n * n * kind.channels()],
        })
    }

    pub fn zeros(n: usize, kind: PhysicsKind) -> Result<Self> {
        Self::new(n, kind, 0.0)
    }

    pub fn from_vec(n: usize, kind: PhysicsKind, data: Vec<f64>) -> Result<Self> {
        check_node_count(n)?;
        let expected = n * n * kind.channels();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} image with n = {n} needs {expected} values, got {}",
                kind,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { n, kind, data })
    }

    /// Builds an image by evaluating `f(i, j, c)` at every node and channel.
    pub fn from_fn(n: usize, kind: PhysicsKind, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_node_count(n)?;
        let c = kind.channels();
        let mut data = Vec::with_capacity(n * n * c);
        for i in 0..n {
            for j in 0..n {
                for ch in 0..c {
                    data.push(f(i, j, ch));
                }
            }
        }
        Self::from_vec(n, kind, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> PhysicsKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn labels(&self) -> &'static [Channel] {
        self.kind.labels()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.n + j) * self.kind.channels() + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, value: f64) {
        let idx = self.index(i, j, c);
        self.data[idx] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// One channel as an `n x n` row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let nc = self.channels();
        self.data.iter().skip(c).step_by(nc).copied().collect()
    }

    /// True for nodes that are not on the outer ring.
    #[inline]
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        is_interior(self.n, i, j)
    }

    /// Sets every outer-ring entry to zero.
    pub fn zero_boundary(&mut self) {
        let n = self.n;
        let nc = self.channels();
        for i in 0..n {
            for j in 0..n {
                if !is_interior(n, i, j) {
                    let base = (i * n + j) * nc;
                    self.data[base..base + nc].fill(0.0);
                }
            }
        }
    }

    /// Euclidean norm over interior nodes only.
    pub fn interior_norm(&self) -> f64 {
        self.interior_dot(self).sqrt()
    }

    pub fn interior_dot(&self, other: &FieldImage) -> f64 {
        let n = self.n;
        let nc = self.channels();
        let mut acc = 0.0;
        for i in 1..n.saturating_sub(1) {
            let start = (i * n + 1) * nc;
            let end = (i * n + n - 1) * nc;
            acc += self.data[start..end]
                .iter()
                .zip(&other.data[start..end])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FieldImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Relative interior distance `|self - reference| / |reference|` over interior nodes.
    pub fn interior_relative_error(&self, reference: &FieldImage) -> f64 {
        let n = self.n;
        let nc = self.channels();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 1..n.saturating_sub(1) {
            for j in 1..n - 1 {
                let base = (i * n + j) * nc;
                for c in 0..nc {
                    let d = self.data[base + c] - reference.data[base + c];
                    num += d * d;
                    den += reference.data[base + c] * reference.data[base + c];
                }
            }
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    pub fn same_shape(&self, other: &FieldImage) -> Result<()> {
        if self.n != other.n || self.kind != other.kind {
            return Err(Error::Shape(format!(
                "images differ: {} n = {} vs {} n = {}",
                self.kind, self.n, other.kind, other.n
            )));
        }
        Ok(())
    }

    /// `self + scale * other`
    pub fn axpy(&mut self, scale: f64, other: &FieldImage) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> FieldImage {
        FieldImage {
            n: self.n,
            kind: self.kind,
            data: self.data.iter().map(|v| v * scale).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub(crate) fn is_interior(n: usize, i: usize, j: usize) -> bool {
    i > 0 && j > 0 && i + 1 < n && j + 1 < n
}

fn check_node_count(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Dimension(format!("node count per side must be >= 2, got {n}")));
    }
    Ok(())
}

/// Element-wise phase field of size `(n - 1) x (n - 1)`, values in `[0, 1]`.
///
/// `H = 1` selects phase 0 and `H = 0` selects phase 1: element `e` blends the
/// two materials with weights `H_e` (phase 0) and `1 - H_e` (phase 1).
/// Element `(r, c)` spans nodes `r..=r+1` by `c..=c+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseImage {
    elements: usize,
    data: Vec<f64>,
}

impl PhaseImage {
    /// A phase image matching a grid of `nodes x nodes`.
    pub fn new(nodes: usize, fill: f64) -> Result<Self> {
        check_node_count(nodes)?;
        let m = nodes - 1;
        Self::from_vec(m, vec![fill; m * m])
    }

    /// Builds from `elements x elements` values.
    pub fn from_vec(elements: usize, data: Vec<f64>) -> Result<Self> {
        if elements == 0 {
            return Err(Error::Dimension("phase image needs at least one element".into()));
        }
        if data.len() != elements * elements {
            return Err(Error::Shape(format!(
                "phase image with {elements} elements per side needs {} values, got {}",
                elements * elements,
                data.len()
            )));
        }
        if let Some((pos, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "phase value {v} at flat index {pos} is outside [0, 1]"
            )));
        }
        Ok(Self { elements, data })
    }

    pub fn from_fn(nodes: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        check_node_count(nodes)?;
        let m = nodes - 1;
        let mut data = Vec::with_capacity(m * m);
        for r in 0..m {
            for c in 0..m {
                data.push(f(r, c));
            }
        }
        Self::from_vec(m, data)
    }

    /// A binary disc: 1 inside the circle (measured at element centres), 0 outside.
    pub fn circular_inclusion(nodes: usize, center: (f64, f64), radius: f64) -> Result<Self> {
        Self::from_fn(nodes, |r, c| {
            let dy = r as f64 + 0.5 - center.0;
            let dx = c as f64 + 0.5 - center.1;
            if dx * dx + dy * dy <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Elements per side.
    pub fn elements(&self) -> usize {
        self.elements
    }

    /// Node count per side of the matching field image.
    pub fn nodes(&self) -> usize {
        self.elements + 1
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.elements + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Clamps raw values into `[0, 1]`.
    pub fn from_clipped(elements: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_vec(elements, data)
    }

    /// Threshold at 0.5; ties go to phase 0 (value 1).
    pub fn binarized(&self) -> PhaseImage {
        PhaseImage {
            elements: self.elements,
            data: self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// `1 - H`: the same geometry with the phase labels swapped.
    pub fn complement(&self) -> PhaseImage {
        PhaseImage {
            elements: self.elements,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn check_nodes(&self, nodes: usize) -> Result<()> {
        if self.elements + 1 != nodes {
            return Err(Error::Shape(format!(
                "phase image has {} elements per side, grid has {nodes} nodes",
                self.elements
            )));
        }
        Ok(())
    }

    /// Restricts to elements `rows x cols` given as element index ranges.
    pub fn window(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<PhaseImage> {
        if rows.len() != cols.len() || rows.end > self.elements || cols.end > self.elements {
            return Err(Error::Shape("phase window must be square and inside the image".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            for c in cols.clone() {
                data.push(self.get(r, c));
            }
        }
        PhaseImage::from_vec(data.len().isqrt(), data)
    }
}

/// Dirichlet constraints: a node mask plus prescribed response values.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCondition {
    mask: Vec<bool>,
    values: FieldImage,
}

/// Prescribed response per edge; each entry holds one value per channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeValues {
    pub top: Option<Vec<f64>>,
    pub bottom: Option<Vec<f64>>,
    pub left: Option<Vec<f64>>,
    pub right: Option<Vec<f64>>,
}

impl BoundaryCondition {
    /// All four edges held at zero.
    pub fn clamped(n: usize, kind: PhysicsKind) -> Result<Self> {
        Self::from_edges(n, kind, &EdgeValues::default())
    }

    /// All four edges constrained; each edge takes its own constant value per
    /// channel (zero when unspecified). Corners take the top/bottom value.
    pub fn from_edges(n: usize, kind: PhysicsKind, edges: &EdgeValues) -> Result<Self> {
        let nc = kind.channels();
        let pick = |side: &Option<Vec<f64>>, name: &str| -> Result<Vec<f64>> {
            match side {
                None => Ok(vec![0.0; nc]),
                Some(v) if v.len() == nc => Ok(v.clone()),
                Some(v) => Err(Error::Shape(format!(
                    "{name} edge value has {} channels, {kind} needs {nc}",
                    v.len()
                ))),
            }
        };
        let top = pick(&edges.top, "top")?;
        let bottom = pick(&edges.bottom, "bottom")?;
        let left = pick(&edges.left, "left")?;
        let right = pick(&edges.right, "right")?;
        let mut values = FieldImage::zeros(n, kind)?;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let side = if i == 0 {
                    Some(&top)
                } else if i == n - 1 {
                    Some(&bottom)
                } else if j == 0 {
                    Some(&left)
                } else if j == n - 1 {
                    Some(&right)
                } else {
                    None
                };
                if let Some(v) = side {
                    mask[i * n + j] = true;
                    for c in 0..nc {
                        values.set(i, j, c, v[c]);
                    }
                }
            }
        }
        Self::new(mask, values)
    }

    /// Custom constraint set. The mask must cover the outer ring; interior
    /// nodes may be constrained as well.
    pub fn new(mask: Vec<bool>, values: FieldImage) -> Result<Self> {
        let n = values.n();
        if mask.len() != n * n {
            return Err(Error::Shape(format!(
                "boundary mask has {} entries, grid has {}",
                mask.len(),
                n * n
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if !is_interior(n, i, j) && !mask[i * n + j] {
                    return Err(Error::Validation(format!(
                        "boundary mask must cover the outer ring; node ({i}, {j}) is free"
                    )));
                }
            }
        }
        Ok(Self { mask, values })
    }

    /// Constrains every node to `values`.
    pub fn everywhere(values: FieldImage) -> Self {
        let n = values.n();
        Self {
            mask: vec![true; n * n],
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.values.n()
    }

    pub fn kind(&self) -> PhysicsKind {
        self.values.kind()
    }

    #[inline]
    pub fn is_constrained(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.values.n() + j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &FieldImage {
        &self.values
    }

    pub fn constrained_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Materials attached to a sample: one for homogeneous data, two for bi-phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Material {
    Homogeneous(MaterialParams),
    Biphase {
        phase0: MaterialParams,
        phase1: MaterialParams,
    },
}

/// One (loading, response[, phase]) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub v: FieldImage,
    pub u: FieldImage,
    pub h: Option<PhaseImage>,
    pub material: Option<Material>,
}

impl Sample {
    pub fn new(
        v: FieldImage,
        u: FieldImage,
        h: Option<PhaseImage>,
        material: Option<Material>,
    ) -> Result<Self> {
        v.same_shape(&u)?;
        if let Some(h) = &h {
            h.check_nodes(v.n())?;
        }
        if let Some(Material::Biphase { .. }) = material {
            if h.is_none() {
                return Err(Error::Validation("bi-phase material requires a phase image".into()));
            }
        }
        Ok(Self { v, u, h, material })
    }

    pub fn n(&self) -> usize {
        self.v.n()
    }

    pub fn kind(&self) -> PhysicsKind {
        self.v.kind()
    }
}

/// Samples sharing physics kind and resolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            for (k, s) in samples.iter().enumerate().skip(1) {
                if s.kind() != first.kind() || s.n() != first.n() {
                    return Err(Error::Shape(format!(
                        "sample {k} is {} n = {}, sample 0 is {} n = {}",
                        s.kind(),
                        s.n(),
                        first.kind(),
                        first.n()
                    )));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn single(sample: Sample) -> Self {
        Self {
            samples: vec![sample],
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> Option<PhysicsKind> {
        self.samples.first().map(Sample::kind)
    }

    pub fn n(&self) -> Option<usize> {
        self.samples.first().map(Sample::n)
    }
}

impl FromIterator<Sample> for Result<Dataset> {
    fn from_iter<T: IntoIterator<Item = Sample>>(iter: T) -> Self {
        Dataset::new(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_image_channel_counts() {
        let t = FieldImage::new(4, PhysicsKind::Thermal, 0.0).unwrap();
        assert_eq!(t.data().len(), 16);
        assert!(t.data().iter().all(|v| *v == 0.0));
        let e = FieldImage::new(4, PhysicsKind::Elasticity, 0.0).unwrap();
        assert_eq!(e.data().len(), 32);
        assert_eq!(e.channels(), 2);
        assert!(matches!(
            FieldImage::new(1, PhysicsKind::Thermal, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut d = vec![0.0; 9];
        d[4] = f64::NAN;
        assert!(FieldImage::from_vec(3, PhysicsKind::Thermal, d).is_err());
    }

    #[test]
    fn phase_image_range_checked() {
        assert!(PhaseImage::from_vec(2, vec![0.0, 1.0, 0.5, 1.2]).is_err());
        assert!(PhaseImage::from_vec(2, vec![0.0, 1.0, 0.5, 0.2]).is_ok());
        assert!(PhaseImage::from_vec(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn binarize_tie_goes_to_phase_zero() {
        let h = PhaseImage::from_vec(2, vec![0.5, 0.49, 0.51, 0.0]).unwrap();
        assert_eq!(h.binarized().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn clamped_boundary_covers_ring() {
        let bc = BoundaryCondition::clamped(5, PhysicsKind::Elasticity).unwrap();
        assert_eq!(bc.constrained_count(), 16);
        assert!(!bc.is_constrained(2, 2));
        assert!(bc.is_constrained(0, 3));
    }

    #[test]
    fn boundary_must_cover_ring() {
        let values = FieldImage::zeros(4, PhysicsKind::Thermal).unwrap();
        let mut mask = vec![true; 16];
        mask[1] = false;
        assert!(BoundaryCondition::new(mask, values).is_err());
    }

    #[test]
    fn per_edge_values() {
        let edges = EdgeValues {
            top: Some(vec![1.0]),
            right: Some(vec![2.0]),
            ..Default::default()
        };
        let bc = BoundaryCondition::from_edges(4, PhysicsKind::Thermal, &edges).unwrap();
        assert_eq!(bc.values().get(0, 3, 0), 1.0);
        assert_eq!(bc.values().get(2, 3, 0), 2.0);
        assert_eq!(bc.values().get(3, 0, 0), 0.0);
    }

    #[test]
    fn dataset_rejects_mixed_resolution() {
        let a = FieldImage::zeros(4, PhysicsKind::Thermal).unwrap();
        let b = FieldImage::zeros(5, PhysicsKind::Thermal).unwrap();
        let s1 = Sample::new(a.clone(), a, None, None).unwrap();
        let s2 = Sample::new(b.clone(), b, None, None).unwrap();
        assert!(Dataset::new(vec![s1, s2]).is_err());
    }

    proptest! {
        #[test]
        fn sample_cross_validation(nv in 2usize..8, nu in 2usize..8, kv in 0usize..3, ku in 0usize..3, nh in 1usize..8) {
            let kinds = PhysicsKind::ALL;
            let v = FieldImage::zeros(nv, kinds[kv]).unwrap();
            let u = FieldImage::zeros(nu, kinds[ku]).unwrap();
            let h = PhaseImage::from_vec(nh, vec![0.0; nh * nh]).unwrap();
            let ok = nv == nu && kv == ku && nh + 1 == nv;
            prop_assert_eq!(Sample::new(v, u, Some(h), None).is_ok(), ok);
        }
    }
}
