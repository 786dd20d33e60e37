//! Inverse problems on bi-phase data: phase map, material constants, or both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::{minimize, Method, Outcome, Status, StopRule};
use super::{clip_rho, LossNorm, RhoBounds};
use crate::element_kernels::{
    biphase_theta, dtheta_drho, elastic_parts, ElementStiffness, MaterialParams, ThetaKernel,
};
use crate::error::{Error, Result};
use crate::fea_conv::{conv_biphase, gather, grad_wrt_phase, grad_wrt_rho, matvec, scatter};
use crate::field_image::{is_interior, Dataset, FieldImage, PhaseImage, PhysicsKind, Sample};

/// Young's moduli are optimized in units of this many pascals.
pub const E_SCALE: f64 = 1e12;

/// Summary of one optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub status: Status,
    pub iterations: usize,
    pub loss: f64,
    pub initial_loss: f64,
    pub loss_history: Vec<f64>,
    pub clipped_steps: usize,
}

impl From<&Outcome> for FitReport {
    fn from(o: &Outcome) -> Self {
        Self {
            status: o.status,
            iterations: o.iterations,
            loss: o.loss,
            initial_loss: o.initial_loss,
            loss_history: o.loss_history.clone(),
            clipped_steps: o.clipped_steps,
        }
    }
}

/// Interior loading mismatch and its gradient with respect to the prediction.
struct Mismatch {
    weight: f64,
}

impl Mismatch {
    fn new(dataset: &Dataset, norm: LossNorm) -> Self {
        let n = dataset.n().unwrap_or(2);
        let c = dataset.kind().map_or(1, |k| k.channels());
        let count = dataset.len() * n.saturating_sub(2).pow(2) * c;
        let weight = match norm {
            LossNorm::Mean => 1.0 / count.max(1) as f64,
            LossNorm::Sum => 1.0,
        };
        Self { weight }
    }

    /// Adds this sample's loss and writes `dL/dpred` (zero on the ring) into `vhat`.
    fn accumulate(&self, pred: &[f64], v: &FieldImage, vhat: &mut [f64]) -> f64 {
        let n = v.n();
        let c = v.channels();
        let mut loss = 0.0;
        for i in 0..n {
            for j in 0..n {
                let base = (i * n + j) * c;
                for k in base..base + c {
                    if is_interior(n, i, j) {
                        let d = pred[k] - v.data()[k];
                        loss += self.weight * d * d;
                        vhat[k] = 2.0 * self.weight * d;
                    } else {
                        vhat[k] = 0.0;
                    }
                }
            }
        }
        loss
    }
}

fn require_elastic(dataset: &Dataset) -> Result<usize> {
    match (dataset.kind(), dataset.n()) {
        (Some(PhysicsKind::Elasticity), Some(n)) if n >= 3 => Ok(n),
        (Some(kind), Some(n)) if kind != PhysicsKind::Elasticity || n < 3 => Err(Error::Validation(format!(
            "bi-phase estimation needs elasticity samples with n >= 3, got {kind} n = {n}"
        ))),
        _ => Err(Error::Validation("dataset is empty".into())),
    }
}

fn sample_phase(sample: &Sample) -> Result<&PhaseImage> {
    sample
        .h
        .as_ref()
        .ok_or_else(|| Error::Validation("sample carries no phase image".into()))
}

// ---------------------------------------------------------------- phase

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseOptions {
    pub method: Method,
    pub learning_rate: f64,
    pub stop: StopRule,
    pub loss: LossNorm,
    pub seed: u64,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate: 1e-2,
            stop: StopRule { max_iter: 50_000, ..StopRule::default() },
            loss: LossNorm::Mean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEstimate {
    pub h: PhaseImage,
    pub binarized: PhaseImage,
    pub fit: FitReport,
}

/// The loading is affine in `H`: `V = V(H = 0) + Σ_e H_e scatter((Θ⁰ - Θ¹) u_e)`.
/// Both pieces are fixed for known materials, so they are computed once.
pub(crate) struct PhaseModel {
    n: usize,
    channels: usize,
    base: Vec<Vec<f64>>,
    /// Per sample, per element: `(Θ⁰ - Θ¹) u_e`, `4C` values each.
    slopes: Vec<Vec<f64>>,
}

impl PhaseModel {
    pub(crate) fn new(theta: &ThetaKernel, dataset: &Dataset) -> Result<Self> {
        let n = dataset.n().ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        let c = theta.channels();
        let m = 4 * c;
        let diff: Vec<f64> = theta.phase(0).data().iter().zip(theta.phase(1).data()).map(|(a, b)| a - b).collect();
        let zero = PhaseImage::new(n, 0.0)?;
        let mut base = Vec::new();
        let mut slopes = Vec::new();
        let mut ue = vec![0.0; m];
        for s in dataset.samples() {
            base.push(conv_biphase(theta, &s.u, &zero)?.into_vec());
            let mut slope = vec![0.0; (n - 1) * (n - 1) * m];
            for er in 0..n - 1 {
                for ec in 0..n - 1 {
                    gather(s.u.data(), n, c, er, ec, &mut ue);
                    let e = er * (n - 1) + ec;
                    matvec(&diff, &ue, &mut slope[e * m..(e + 1) * m]);
                }
            }
            slopes.push(slope);
        }
        Ok(Self { n, channels: c, base, slopes })
    }

    pub(crate) fn predict(&self, sample: usize, h: &[f64]) -> Vec<f64> {
        let m = 4 * self.channels;
        let mut pred = self.base[sample].clone();
        let ne = self.n - 1;
        for er in 0..ne {
            for ec in 0..ne {
                let e = er * ne + ec;
                if h[e] != 0.0 {
                    let g: Vec<f64> = self.slopes[sample][e * m..(e + 1) * m].iter().map(|x| x * h[e]).collect();
                    scatter(&mut pred, self.n, self.channels, er, ec, &g);
                }
            }
        }
        pred
    }

    pub(crate) fn phase_gradient(&self, sample: usize, vhat: &[f64], out: &mut [f64]) {
        let m = 4 * self.channels;
        let ne = self.n - 1;
        let mut ve = vec![0.0; m];
        for er in 0..ne {
            for ec in 0..ne {
                let e = er * ne + ec;
                gather(vhat, self.n, self.channels, er, ec, &mut ve);
                out[e] += ve.iter().zip(&self.slopes[sample][e * m..(e + 1) * m]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

fn clip_unit(x: &mut [f64]) -> bool {
    let mut moved = false;
    for v in x {
        let c = v.clamp(0.0, 1.0);
        moved |= c != *v;
        *v = c;
    }
    moved
}

/// Recovers the phase map for known materials by projected descent from an
/// i.i.d. uniform start.
pub fn estimate_phase(
    dataset: &Dataset,
    rho0: &MaterialParams,
    rho1: &MaterialParams,
    opts: &PhaseOptions,
) -> Result<PhaseEstimate> {
    let kind = dataset.kind().ok_or_else(|| Error::Validation("dataset is empty".into()))?;
    let n = dataset.n().unwrap();
    if n < 3 {
        return Err(Error::Dimension(format!("phase estimation needs n >= 3, got {n}")));
    }
    let theta = ThetaKernel::new(kind, rho0, rho1)?;
    let model = PhaseModel::new(&theta, dataset)?;
    let mismatch = Mismatch::new(dataset, opts.loss);
    let elements = (n - 1) * (n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h0: Vec<f64> = (0..elements).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut vhat = vec![0.0; n * n * kind.channels()];
    let outcome = minimize(h0, opts.method, vec![opts.learning_rate; elements], &opts.stop, clip_unit, |h| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; elements];
        for (k, s) in dataset.samples().iter().enumerate() {
            let pred = model.predict(k, h);
            loss += mismatch.accumulate(&pred, &s.v, &mut vhat);
            model.phase_gradient(k, &vhat, &mut grad);
        }
        Ok((loss, grad))
    })?;
    let h = PhaseImage::from_clipped(n - 1, outcome.x.clone())?;
    Ok(PhaseEstimate { binarized: h.binarized(), h, fit: FitReport::from(&outcome) })
}

// ----------------------------------------------------------- properties

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropertyOptions {
    pub method: Method,
    pub learning_rate: f64,
    pub stop: StopRule,
    pub loss: LossNorm,
    pub seed: u64,
    pub bounds: RhoBounds,
    /// Start here instead of a random draw.
    pub init: Option<(MaterialParams, MaterialParams)>,
}

impl Default for PropertyOptions {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate: 1e-3,
            stop: StopRule { max_iter: 50_000, ..StopRule::default() },
            loss: LossNorm::Mean,
            seed: 0,
            bounds: RhoBounds::default(),
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyEstimate {
    pub rho0: MaterialParams,
    pub rho1: MaterialParams,
    pub fit: FitReport,
    /// Fraction of steps on which a bound was active.
    pub clip_fraction: f64,
    pub warnings: Vec<String>,
}

/// For a fixed phase map the loading is `Σ_h E_h/(1-ν_h²) (A_h + ν_h B_h)`
/// with `A_h`, `B_h` the responses of the two ν-independent element parts,
/// blended by the phase weights.
pub(crate) struct PropertyModel {
    /// Per sample: `[A_0, B_0, A_1, B_1]`.
    basis: Vec<[Vec<f64>; 4]>,
}

impl PropertyModel {
    pub(crate) fn new(dataset: &Dataset) -> Result<Self> {
        let n = require_elastic(dataset)?;
        let (a, b) = elastic_parts();
        let mut basis = Vec::new();
        for s in dataset.samples() {
            let h = sample_phase(s)?;
            let parts = |k: &ElementStiffness, phase: usize| {
                let mut out = vec![0.0; s.u.data().len()];
                let mut ue = vec![0.0; 8];
                let mut ve = vec![0.0; 8];
                for er in 0..n - 1 {
                    for ec in 0..n - 1 {
                        let he = h.get(er, ec);
                        let w = if phase == 0 { he } else { 1.0 - he };
                        if w == 0.0 {
                            continue;
                        }
                        gather(s.u.data(), n, 2, er, ec, &mut ue);
                        matvec(k.data(), &ue, &mut ve);
                        ve.iter_mut().for_each(|x| *x *= w);
                        scatter(&mut out, n, 2, er, ec, &ve);
                    }
                }
                out
            };
            basis.push([parts(&a, 0), parts(&b, 0), parts(&a, 1), parts(&b, 1)]);
        }
        Ok(Self { basis })
    }

    /// Prediction and `d pred / d(E0, ν0, E1, ν1)` (moduli in pascals).
    pub(crate) fn predict(&self, sample: usize, rho: [(f64, f64); 2]) -> (Vec<f64>, [Vec<f64>; 4]) {
        let basis = &self.basis[sample];
        let len = basis[0].len();
        let mut pred = vec![0.0; len];
        let mut d: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; len]);
        for (h, &(e, nu)) in rho.iter().enumerate() {
            let (fa, fb) = (&basis[2 * h], &basis[2 * h + 1]);
            let g = 1.0 - nu * nu;
            for k in 0..len {
                let lin = fa[k] + nu * fb[k];
                pred[k] += e / g * lin;
                d[2 * h][k] = lin / g;
                d[2 * h + 1][k] = e * (2.0 * nu * fa[k] + (1.0 + nu * nu) * fb[k]) / (g * g);
            }
        }
        (pred, d)
    }
}

fn check_identifiable(dataset: &Dataset) -> Result<()> {
    for (k, s) in dataset.samples().iter().enumerate() {
        let h = sample_phase(s)?;
        let has0 = h.data().iter().any(|&x| x > 0.0);
        let has1 = h.data().iter().any(|&x| x < 1.0);
        if !(has0 && has1) {
            return Err(Error::Identifiability(format!(
                "sample {k}: the phase image must contain both phases"
            )));
        }
        let n = s.n();
        let loaded = (1..n - 1).any(|i| (1..n - 1).any(|j| (0..s.v.channels()).any(|c| s.v.get(i, j, c) != 0.0)));
        if !loaded {
            return Err(Error::Identifiability(format!(
                "sample {k}: loading is zero on the interior, so the moduli cannot be recovered"
            )));
        }
    }
    Ok(())
}

fn pack(rho0: &MaterialParams, rho1: &MaterialParams) -> Result<Vec<f64>> {
    Ok(vec![rho0.young()? / E_SCALE, rho0.poisson()?, rho1.young()? / E_SCALE, rho1.poisson()?])
}

fn unpack(x: &[f64]) -> (MaterialParams, MaterialParams) {
    (
        MaterialParams::elastic(x[0] * E_SCALE, x[1]),
        MaterialParams::elastic(x[2] * E_SCALE, x[3]),
    )
}

fn clip_packed(bounds: &RhoBounds, x: &mut [f64]) -> bool {
    let mut moved = false;
    for h in 0..2 {
        let (e, nu) = (x[2 * h] * E_SCALE, x[2 * h + 1]);
        let c = clip_rho(&MaterialParams::elastic(e, nu), bounds);
        let (ce, cn) = (c.e.unwrap() / E_SCALE, c.nu.unwrap());
        moved |= ce != x[2 * h] || cn != nu;
        x[2 * h] = ce;
        x[2 * h + 1] = cn;
    }
    moved
}

fn random_rho(bounds: &RhoBounds, rng: &mut ChaCha8Rng) -> MaterialParams {
    MaterialParams::elastic(rng.gen_range(bounds.e.0..bounds.e.1), rng.gen_range(bounds.nu.0..bounds.nu.1))
}

/// Recovers both phases' `(E, ν)` for a known phase map.
pub fn estimate_properties(dataset: &Dataset, opts: &PropertyOptions) -> Result<PropertyEstimate> {
    require_elastic(dataset)?;
    opts.bounds.validate()?;
    check_identifiable(dataset)?;
    let model = PropertyModel::new(dataset)?;
    let mismatch = Mismatch::new(dataset, opts.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (r0, r1) = match opts.init {
        Some(init) => init,
        None => (random_rho(&opts.bounds, &mut rng), random_rho(&opts.bounds, &mut rng)),
    };
    let x0 = pack(&r0, &r1)?;
    let mut vhat = Vec::new();
    let outcome = minimize(
        x0,
        opts.method,
        vec![opts.learning_rate; 4],
        &opts.stop,
        |x| clip_packed(&opts.bounds, x),
        |x| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; 4];
            for (k, s) in dataset.samples().iter().enumerate() {
                let (pred, d) = model.predict(k, [(x[0] * E_SCALE, x[1]), (x[2] * E_SCALE, x[3])]);
                vhat.resize(pred.len(), 0.0);
                loss += mismatch.accumulate(&pred, &s.v, &mut vhat);
                for (g, dk) in grad.iter_mut().zip(&d) {
                    *g += vhat.iter().zip(dk).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            grad[0] *= E_SCALE;
            grad[2] *= E_SCALE;
            Ok((loss, grad))
        },
    )?;
    let (rho0, rho1) = unpack(&outcome.x);
    let clip_fraction = outcome.clipped_steps as f64 / outcome.iterations.max(1) as f64;
    let mut warnings = Vec::new();
    if clip_fraction > 0.5 {
        let msg = format!(
            "bounds were active on {:.0}% of steps; the optimum may lie outside them",
            100.0 * clip_fraction
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(PropertyEstimate { rho0, rho1, fit: FitReport::from(&outcome), clip_fraction, warnings })
}

// ---------------------------------------------------------------- joint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointOptions {
    pub method: Method,
    pub learning_rate_rho: f64,
    pub learning_rate_phase: f64,
    pub stop: StopRule,
    pub loss: LossNorm,
    pub seed: u64,
    pub bounds: RhoBounds,
    /// Binarize the phase map and re-fit the constants afterwards.
    pub post_process: bool,
    pub refit: PropertyOptions,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate_rho: 1e-3,
            learning_rate_phase: 1e-2,
            stop: StopRule { max_iter: 20_000, ..StopRule::default() },
            loss: LossNorm::Mean,
            seed: 0,
            bounds: RhoBounds::default(),
            post_process: true,
            refit: PropertyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub rho0: MaterialParams,
    pub rho1: MaterialParams,
    /// Continuous phase map from the joint descent.
    pub h: PhaseImage,
    /// Two-cluster split of `h`; present after post-processing.
    pub binarized: Option<PhaseImage>,
    pub fit: FitReport,
    /// Property re-fit on the binarized map.
    pub refit: Option<PropertyEstimate>,
    pub warnings: Vec<String>,
}

/// Threshold separating the values into two groups with the largest
/// between-group variance; `None` when all values coincide.
pub fn two_cluster_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut best: Option<(f64, f64)> = None;
    let mut left = 0.0;
    for k in 1..n {
        left += sorted[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let (n0, n1) = (k as f64, (n - k) as f64);
        let (m0, m1) = (left / n0, (total - left) / n1);
        let score = n0 * n1 * (m1 - m0) * (m1 - m0);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, 0.5 * (sorted[k - 1] + sorted[k])));
        }
    }
    best.map(|(_, t)| t)
}

/// Recovers phase map and constants together. The data only fix the
/// element-wise blend, so any affine relabelling of `H` with matching
/// constants fits equally well; post-processing splits `H` into two groups
/// and re-fits the constants on that split.
pub fn estimate_joint(dataset: &Dataset, opts: &JointOptions) -> Result<JointEstimate> {
    let n = require_elastic(dataset)?;
    opts.bounds.validate()?;
    let elements = (n - 1) * (n - 1);
    let mismatch = Mismatch::new(dataset, opts.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r0 = random_rho(&opts.bounds, &mut rng);
    let r1 = random_rho(&opts.bounds, &mut rng);
    let mut x0 = pack(&r0, &r1)?;
    x0.extend((0..elements).map(|_| rng.gen_range(0.0..1.0)));
    let mut lr = vec![opts.learning_rate_rho; 4];
    lr.extend(std::iter::repeat_n(opts.learning_rate_phase, elements));

    let outcome = minimize(
        x0,
        opts.method,
        lr,
        &opts.stop,
        |x| {
            let a = clip_packed(&opts.bounds, &mut x[..4]);
            let b = clip_unit(&mut x[4..]);
            a || b
        },
        |x| {
            let (rho0, rho1) = unpack(&x[..4]);
            let theta = biphase_theta(&rho0, &rho1)?;
            let dtheta = dtheta_drho(&rho0, &rho1)?;
            let h = PhaseImage::from_vec(n - 1, x[4..].to_vec())?;
            let mut loss = 0.0;
            let mut grad = vec![0.0; x.len()];
            for s in dataset.samples() {
                let pred = conv_biphase(&theta, &s.u, &h)?;
                let mut vhat = vec![0.0; pred.data().len()];
                loss += mismatch.accumulate(pred.data(), &s.v, &mut vhat);
                let vhat = FieldImage::from_vec(n, PhysicsKind::Elasticity, vhat)?;
                for (g, d) in grad.iter_mut().zip(grad_wrt_rho(&dtheta, &s.u, &h, &vhat)?) {
                    *g += d;
                }
                for (g, d) in grad[4..].iter_mut().zip(grad_wrt_phase(&theta, &s.u, &vhat)?) {
                    *g += d;
                }
            }
            grad[0] *= E_SCALE;
            grad[2] *= E_SCALE;
            Ok((loss, grad))
        },
    )?;
    let (rho0, rho1) = unpack(&outcome.x[..4]);
    let h = PhaseImage::from_clipped(n - 1, outcome.x[4..].to_vec())?;
    let mut estimate = JointEstimate {
        rho0,
        rho1,
        h: h.clone(),
        binarized: None,
        fit: FitReport::from(&outcome),
        refit: None,
        warnings: Vec::new(),
    };
    if !opts.post_process {
        return Ok(estimate);
    }
    let Some(t) = two_cluster_threshold(h.data()) else {
        let msg = "phase map is uniform; skipping post-processing".to_string();
        log::warn!("{msg}");
        estimate.warnings.push(msg);
        return Ok(estimate);
    };
    let split = PhaseImage::from_vec(n - 1, h.data().iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect())?;
    let relabelled = Dataset::new(
        dataset
            .samples()
            .iter()
            .map(|s| Sample::new(s.v.clone(), s.u.clone(), Some(split.clone()), None))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut refit_opts = opts.refit.clone();
    refit_opts.bounds = opts.bounds.clone();
    refit_opts.init = Some((rho0, rho1));
    let refit = estimate_properties(&relabelled, &refit_opts)?;
    estimate.rho0 = refit.rho0;
    estimate.rho1 = refit.rho1;
    estimate.binarized = Some(split);
    estimate.refit = Some(refit);
    Ok(estimate)
}
