//! Subcommand implementations. Each resolves its configuration as
//! flags > config file > defaults, runs, and returns a [`Report`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use feanet::element_kernels::{kernel_for, ThetaKernel, MaterialParams, StencilKernel};
use feanet::fea_conv::{conv_homogeneous, Operator};
use feanet::fea_net::{infer, HistoryEntry, InferenceConfig};
use feanet::field_image::{
    load_image, load_phase, save_image, save_phase, write_csv, write_pgm, BoundaryCondition, EdgeValues,
    FieldImage, ImageFile, Material, PhaseImage, PhysicsKind,
};
use feanet::learning::{
    estimate_joint, estimate_phase, estimate_properties, fit_filter_iterative, fit_multiphysics_filter,
    relative_error, FitReport, JointOptions, Method, PhaseOptions, PropertyOptions, Status, StopRule,
};
use feanet::reference_solver::{
    generate_sample, memory_estimate, memory_formula, LoadingSpec, MemoryProblem, SpatialDim,
};
use feanet::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{load_dataset, LoadedDataset, Manifest, SampleEntry, MANIFEST_SCHEMA};
use crate::{
    ExportArgs, GenerateArgs, GlobalArgs, InferArgs, KernelArgs, LearnArgs, MaterialArgs, MemoryArgs,
};

/// Outcome of a subcommand: a JSON summary, the human-readable text, and
/// whether a numerical procedure failed to converge.
pub struct Report {
    pub summary: Value,
    pub text: String,
    pub failed: bool,
}

impl Report {
    fn ok(summary: Value, text: String) -> Self {
        Self { summary, text, failed: false }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
    }
}

fn show<T: Serialize>(config: &T) -> Result<Report> {
    let value = serde_json::to_value(config)?;
    let text = serde_json::to_string_pretty(&value)?;
    Ok(Report::ok(json!({ "config": value }), text))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,loss")?;
    for (k, l) in history.iter().enumerate() {
        writeln!(w, "{k},{l:e}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_method(name: &str) -> Result<Method> {
    serde_json::from_value(Value::String(name.to_string()))
        .map_err(|_| Error::Validation(format!("unknown method '{name}' (adam, gradient-descent, line-search)")))
}

fn fit_json(fit: &FitReport) -> Value {
    json!({
        "status": fit.status,
        "iterations": fit.iterations,
        "loss": fit.loss,
        "initial_loss": fit.initial_loss,
        "clipped_steps": fit.clipped_steps,
    })
}

fn rel(pred: f64, truth: f64) -> f64 {
    (pred - truth).abs() / truth.abs()
}

impl MaterialArgs {
    fn any(&self) -> bool {
        self.e.is_some() || self.nu.is_some() || self.kappa.is_some() || self.alpha.is_some()
    }

    fn apply(&self, rho: &mut MaterialParams) {
        rho.e = self.e.or(rho.e);
        rho.nu = self.nu.or(rho.nu);
        rho.kappa = self.kappa.or(rho.kappa);
        rho.alpha = self.alpha.or(rho.alpha);
    }
}

fn reference_material() -> MaterialParams {
    MaterialParams::thermoelastic(0.23e12, 0.289, 11.82, 12.92e-5)
}

// ------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub kind: PhysicsKind,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub loading: LoadingSpec,
    /// Material of the homogeneous body, or of phase 0 (inside the inclusion).
    pub rho: MaterialParams,
    /// Material outside the inclusion; its presence makes the data bi-phase.
    pub rho1: Option<MaterialParams>,
    /// Inclusion radius in element widths; defaults to a quarter of `n`.
    pub radius: Option<f64>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            kind: PhysicsKind::Thermoelasticity,
            n: 25,
            count: 1,
            seed: 0,
            loading: LoadingSpec::random(),
            rho: reference_material(),
            rho1: None,
            radius: None,
        }
    }
}

pub fn generate(args: &GenerateArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: GenerateConfig = load_config(g.config.as_deref())?;
    if let Some(k) = &args.kind {
        cfg.kind = k.parse()?;
    }
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.count = args.count.unwrap_or(cfg.count);
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.radius = args.radius.or(cfg.radius);
    if let Some(factor) = args.collinear {
        cfg.loading = LoadingSpec::Collinear { factor, amplitude: 1.0 };
    }
    args.material.apply(&mut cfg.rho);
    let phase1 = MaterialArgs::from(&args.phase1);
    if phase1.any() {
        let mut rho1 = cfg.rho1.unwrap_or_default();
        phase1.apply(&mut rho1);
        cfg.rho1 = Some(rho1);
    }
    if g.show_config {
        return show(&cfg);
    }
    if cfg.count == 0 {
        return Err(Error::Validation("count must be at least 1".into()));
    }
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Validation("--out is required".into()))?;
    let (material, h) = match cfg.rho1 {
        None => (Material::Homogeneous(cfg.rho), None),
        Some(rho1) => {
            if cfg.n < 3 {
                return Err(Error::Dimension(format!("samples need n >= 3, got {}", cfg.n)));
            }
            let centre = (cfg.n - 1) as f64 / 2.0;
            let radius = cfg.radius.unwrap_or(cfg.n as f64 / 4.0);
            let h = PhaseImage::circular_inclusion(cfg.n, (centre, centre), radius)?;
            (Material::Biphase { phase0: cfg.rho, phase1: rho1 }, Some(h))
        }
    };
    create_dir(out)?;
    let mut entries = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let seed = cfg.seed.wrapping_add(k as u64);
        let s = generate_sample(&cfg.loading, cfg.kind, &material, h.as_ref(), cfg.n, seed)?;
        let entry = SampleEntry { seed, v: format!("sample_{k:03}_v.fean"), u: format!("sample_{k:03}_u.fean") };
        save_image(&s.v, out.join(&entry.v))?;
        save_image(&s.u, out.join(&entry.u))?;
        entries.push(entry);
    }
    let phase = match &h {
        Some(h) => {
            save_phase(h, out.join("phase.fean"))?;
            Some("phase.fean".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        kind: cfg.kind,
        n: cfg.n,
        seed: cfg.seed,
        loading: cfg.loading.clone(),
        material,
        phase,
        samples: entries,
    };
    manifest.save(out)?;
    let text = format!("wrote {} {} sample(s) at n = {} to {}", cfg.count, cfg.kind, cfg.n, out.display());
    Ok(Report::ok(json!({ "out": out, "manifest": manifest }), text))
}

// --------------------------------------------------------------- kernel

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: PhysicsKind,
    pub rho: MaterialParams,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { kind: PhysicsKind::Thermoelasticity, rho: reference_material() }
    }
}

fn kernel_csv(w: &StencilKernel, kind: PhysicsKind) -> String {
    let labels = kind.labels();
    let mut out = String::from("output,input,row,col,weight\n");
    for p in 0..w.outputs() {
        for q in 0..w.inputs() {
            for r in 0..3 {
                for c in 0..3 {
                    out.push_str(&format!(
                        "{},{},{},{},{:e}\n",
                        labels[p],
                        labels[q],
                        r + 1,
                        c + 1,
                        w.get(p, q, r, c)
                    ));
                }
            }
        }
    }
    out
}

pub fn kernel(args: &KernelArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: KernelConfig = load_config(g.config.as_deref())?;
    if let Some(k) = &args.kind {
        cfg.kind = k.parse()?;
    }
    args.material.apply(&mut cfg.rho);
    if g.show_config {
        return show(&cfg);
    }
    let w = kernel_for(cfg.kind, &cfg.rho)?;
    let csv = kernel_csv(&w, cfg.kind);
    if let Some(path) = &args.out {
        write_text(path, &csv)?;
    }
    Ok(Report::ok(json!({ "kind": cfg.kind, "rho": cfg.rho, "kernel": w }), csv.trim_end().to_string()))
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub inference: InferenceConfig,
    pub boundary: EdgeValues,
    /// Overrides the dataset material.
    pub material: Option<Material>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig { record_history: true, ..InferenceConfig::default() },
            boundary: EdgeValues::default(),
            material: None,
        }
    }
}

fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("depth,residual,error\n");
    for h in history {
        let err = h.error.map(|e| format!("{e:e}")).unwrap_or_default();
        out.push_str(&format!("{},{:e},{}\n", h.depth, h.residual, err));
    }
    out
}

pub fn infer_cmd(args: &InferArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: InferConfig = load_config(g.config.as_deref())?;
    cfg.inference.max_depth = args.depth.unwrap_or(cfg.inference.max_depth);
    cfg.inference.omega = args.omega.unwrap_or(cfg.inference.omega);
    cfg.inference.tol = args.tol.or(cfg.inference.tol);
    cfg.inference.history_stride = args.stride.unwrap_or(cfg.inference.history_stride);
    if args.material.any() {
        let mut rho = MaterialParams::default();
        args.material.apply(&mut rho);
        cfg.material = Some(Material::Homogeneous(rho));
    }
    if g.show_config {
        return show(&cfg);
    }

    let loaded = args.dataset.as_deref().map(load_dataset).transpose()?;
    let sample = match &loaded {
        Some(d) => Some(d.dataset.samples().get(args.sample).ok_or_else(|| {
            Error::Validation(format!("sample {} out of range ({} samples)", args.sample, d.dataset.len()))
        })?),
        None => None,
    };
    let v = match (&args.v, sample) {
        (Some(p), _) => load_image(p)?,
        (None, Some(s)) => s.v.clone(),
        (None, None) => return Err(Error::Validation("give --v or --dataset".into())),
    };
    let reference = match (&args.reference, sample) {
        (Some(p), _) => Some(load_image(p)?),
        (None, Some(s)) if args.v.is_none() => Some(s.u.clone()),
        _ => None,
    };
    let material = cfg
        .material
        .or(loaded.as_ref().map(|d| d.manifest.material))
        .ok_or_else(|| Error::Validation("no material: give --dataset, material flags or a config".into()))?;
    let op = match material {
        Material::Homogeneous(rho) => Operator::Homogeneous(kernel_for(v.kind(), &rho)?),
        Material::Biphase { phase0, phase1 } => {
            let h = match (&args.phase, sample.and_then(|s| s.h.as_ref())) {
                (Some(p), _) => load_phase(p)?,
                (None, Some(h)) => h.clone(),
                (None, None) => return Err(Error::Validation("bi-phase material needs --phase".into())),
            };
            h.check_nodes(v.n())?;
            Operator::Biphase { theta: ThetaKernel::new(v.kind(), &phase0, &phase1)?, h }
        }
    };
    let bc = BoundaryCondition::from_edges(v.n(), v.kind(), &cfg.boundary)?;
    let result = infer(&v, &op, &bc, &cfg.inference, reference.as_ref())?;
    let error = reference.as_ref().map(|r| result.u.interior_relative_error(r));

    if let Some(out) = &args.out {
        create_dir(out)?;
        save_image(&result.u, out.join("u.fean"))?;
        write_text(&out.join("history.csv"), &history_csv(&result.history))?;
        if args.pgm {
            write_pgms(&result.u, &out.join("u"))?;
        }
    }
    let mut text = format!("depth {} residual {:e}", result.depth, result.residual);
    if let Some(e) = error {
        text.push_str(&format!(" error {e:e}"));
    }
    let summary = json!({
        "depth": result.depth,
        "residual": result.residual,
        "converged": result.converged,
        "error": error,
        "omega": cfg.inference.omega,
    });
    Ok(Report::ok(summary, text))
}

fn write_pgms(img: &FieldImage, prefix: &Path) -> Result<()> {
    for c in 0..img.channels() {
        let name = format!("{}_{}.pgm", prefix.display(), img.labels()[c]);
        let mut w = BufWriter::new(File::create(name)?);
        write_pgm(&mut w, img.n(), &img.channel(c))?;
        w.flush()?;
    }
    Ok(())
}

// --------------------------------------------------------- learn-filter

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    #[default]
    ClosedForm,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub method: Method,
    pub learning_rate: f64,
    pub stop: StopRule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { mode: FilterMode::ClosedForm, method: Method::Adam, learning_rate: 1e-1, stop: StopRule::default() }
    }
}

fn filter_loss(w: &StencilKernel, data: &LoadedDataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in data.dataset.samples() {
        let pred = conv_homogeneous(w, &s.u)?;
        let n = s.n();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                for c in 0..s.v.channels() {
                    let d = pred.get(i, j, c) - s.v.get(i, j, c);
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

pub fn learn_filter(args: &LearnArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: FilterConfig = load_config(g.config.as_deref())?;
    if let Some(m) = &args.method {
        cfg.mode = FilterMode::Iterative;
        cfg.method = parse_method(m)?;
    }
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.stop.max_iter = args.max_iter.unwrap_or(cfg.stop.max_iter);
    if g.show_config {
        return show(&cfg);
    }
    let data = load_dataset(&args.dataset)?;
    let (w, history, status) = match cfg.mode {
        FilterMode::ClosedForm => {
            let w = fit_multiphysics_filter(&data.dataset)?;
            let loss = filter_loss(&w, &data)?;
            (w, vec![loss], None)
        }
        FilterMode::Iterative => {
            let (w, outcome) = fit_filter_iterative(&data.dataset, cfg.method, cfg.learning_rate, &cfg.stop)?;
            (w, outcome.loss_history, Some(outcome.status))
        }
    };
    let kind = data.manifest.kind;
    let truth = match data.manifest.material {
        Material::Homogeneous(rho) => Some(kernel_for(kind, &rho)?),
        Material::Biphase { .. } => None,
    };
    let mut blocks = Vec::new();
    if let Some(t) = &truth {
        for p in 0..kind.channels() {
            for q in 0..kind.channels() {
                let (a, b) = (w.block(p, q), t.block(p, q));
                let diff: Vec<f64> = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x - y).collect();
                let norm = b.iter().flatten().map(|y| y * y).sum::<f64>().sqrt();
                let err = if norm > 0.0 { diff.iter().map(|d| d * d).sum::<f64>().sqrt() / norm } else { f64::NAN };
                blocks.push(json!({
                    "output": kind.labels()[p].to_string(),
                    "input": kind.labels()[q].to_string(),
                    "relative_error": if err.is_finite() { Some(err) } else { None },
                    "max_abs_error": diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
                }));
            }
        }
    }
    let summary = json!({
        "mode": cfg.mode,
        "status": status,
        "final_loss": history.last(),
        "kernel": w,
        "reference": truth.as_ref().map(|t| json!({ "kernel": t, "blocks": blocks })),
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("kernel.json"), &serde_json::to_value(&w)?)?;
        write_text(&out.join("kernel.csv"), &kernel_csv(&w, kind))?;
        write_loss_csv(&out.join("loss_history.csv"), &history)?;
        write_json(&out.join("report.json"), &summary)?;
    }
    let mut text = kernel_csv(&w, kind).trim_end().to_string();
    for b in &blocks {
        text.push_str(&format!(
            "\nblock {}{} relative error {}",
            b["output"].as_str().unwrap_or(""),
            b["input"].as_str().unwrap_or(""),
            b["relative_error"]
        ));
    }
    let failed = status == Some(Status::Stagnated);
    Ok(Report { summary, text, failed })
}

// ---------------------------------------------------- bi-phase learners

fn biphase_truth(data: &LoadedDataset) -> Option<(MaterialParams, MaterialParams, &PhaseImage)> {
    match (data.manifest.material, data.dataset.samples().first().and_then(|s| s.h.as_ref())) {
        (Material::Biphase { phase0, phase1 }, Some(h)) => Some((phase0, phase1, h)),
        _ => None,
    }
}

fn apply_learn_args(args: &LearnArgs, method: &mut Method, lr: &mut f64, stop: &mut StopRule) -> Result<()> {
    if let Some(m) = &args.method {
        *method = parse_method(m)?;
    }
    *lr = args.learning_rate.unwrap_or(*lr);
    stop.max_iter = args.max_iter.unwrap_or(stop.max_iter);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub options: PhaseOptions,
    /// Known materials; default to the dataset's.
    pub rho0: Option<MaterialParams>,
    pub rho1: Option<MaterialParams>,
}

pub fn learn_phase(args: &LearnArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: PhaseConfig = load_config(g.config.as_deref())?;
    let o = &mut cfg.options;
    apply_learn_args(args, &mut o.method, &mut o.learning_rate, &mut o.stop)?;
    o.seed = g.seed.unwrap_or(o.seed);
    if g.show_config {
        return show(&cfg);
    }
    let data = load_dataset(&args.dataset)?;
    let truth = biphase_truth(&data);
    let rho0 = cfg.rho0.or(truth.map(|t| t.0));
    let rho1 = cfg.rho1.or(truth.map(|t| t.1));
    let (Some(rho0), Some(rho1)) = (rho0, rho1) else {
        return Err(Error::Validation("phase estimation needs both materials (bi-phase dataset or config)".into()));
    };
    let est = estimate_phase(&data.dataset, &rho0, &rho1, &cfg.options)?;
    let errors = match truth {
        Some((_, _, h)) => Some(json!({
            "continuous": relative_error(est.h.data(), h.data())?,
            "binarized": relative_error(est.binarized.data(), h.data())?,
        })),
        None => None,
    };
    let summary = json!({ "fit": fit_json(&est.fit), "phase_error": errors });
    if let Some(out) = &args.out {
        create_dir(out)?;
        save_phase(&est.h, out.join("phase.fean"))?;
        save_phase(&est.binarized, out.join("phase_binarized.fean"))?;
        write_loss_csv(&out.join("loss_history.csv"), &est.fit.loss_history)?;
        write_json(&out.join("report.json"), &summary)?;
    }
    let mut text = format!("{:?} after {} iterations, loss {:e}", est.fit.status, est.fit.iterations, est.fit.loss);
    if let Some(e) = &errors {
        text.push_str(&format!("\nphase error continuous {} binarized {}", e["continuous"], e["binarized"]));
    }
    Ok(Report { summary, text, failed: est.fit.status == Status::Stagnated })
}

fn property_errors(rho0: &MaterialParams, rho1: &MaterialParams, t0: &MaterialParams, t1: &MaterialParams) -> Value {
    let f = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => Some(rel(a, b)),
        _ => None,
    };
    json!({
        "E0": f(rho0.e, t0.e),
        "nu0": f(rho0.nu, t0.nu),
        "E1": f(rho1.e, t1.e),
        "nu1": f(rho1.nu, t1.nu),
    })
}

fn properties_json(rho0: &MaterialParams, rho1: &MaterialParams) -> Value {
    json!({ "phase0": rho0, "phase1": rho1 })
}

fn properties_text(rho0: &MaterialParams, rho1: &MaterialParams) -> String {
    format!(
        "phase0 E {:e} nu {}\nphase1 E {:e} nu {}",
        rho0.e.unwrap_or(f64::NAN),
        rho0.nu.unwrap_or(f64::NAN),
        rho1.e.unwrap_or(f64::NAN),
        rho1.nu.unwrap_or(f64::NAN)
    )
}

pub fn learn_props(args: &LearnArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: PropertyOptions = load_config(g.config.as_deref())?;
    apply_learn_args(args, &mut cfg.method, &mut cfg.learning_rate, &mut cfg.stop)?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    if g.show_config {
        return show(&cfg);
    }
    let data = load_dataset(&args.dataset)?;
    let est = estimate_properties(&data.dataset, &cfg)?;
    let errors = biphase_truth(&data).map(|(t0, t1, _)| property_errors(&est.rho0, &est.rho1, &t0, &t1));
    let summary = json!({
        "fit": fit_json(&est.fit),
        "properties": properties_json(&est.rho0, &est.rho1),
        "relative_error": errors,
        "clip_fraction": est.clip_fraction,
        "warnings": est.warnings,
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("properties.json"), &properties_json(&est.rho0, &est.rho1))?;
        write_loss_csv(&out.join("loss_history.csv"), &est.fit.loss_history)?;
        write_json(&out.join("report.json"), &summary)?;
    }
    let mut text = format!("{:?} after {} iterations\n", est.fit.status, est.fit.iterations);
    text.push_str(&properties_text(&est.rho0, &est.rho1));
    if let Some(e) = &errors {
        text.push_str(&format!("\nrelative error {e}"));
    }
    Ok(Report { summary, text, failed: est.fit.status == Status::Stagnated })
}

pub fn learn_joint(args: &LearnArgs, g: &GlobalArgs) -> Result<Report> {
    let mut cfg: JointOptions = load_config(g.config.as_deref())?;
    apply_learn_args(args, &mut cfg.method, &mut cfg.learning_rate_phase, &mut cfg.stop)?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    if g.show_config {
        return show(&cfg);
    }
    let data = load_dataset(&args.dataset)?;
    let est = estimate_joint(&data.dataset, &cfg)?;
    let final_fit = est.refit.as_ref().map_or(&est.fit, |r| &r.fit);
    // The data cannot tell (rho0, rho1, H) from (rho1, rho0, 1 - H); report
    // against whichever labelling is closer.
    let comparison = match biphase_truth(&data) {
        Some((t0, t1, h)) => {
            let phase = est.binarized.as_ref().unwrap_or(&est.h);
            let direct = property_errors(&est.rho0, &est.rho1, &t0, &t1);
            let swapped = property_errors(&est.rho1, &est.rho0, &t0, &t1);
            let e_err = |v: &Value| v["E0"].as_f64().unwrap_or(f64::INFINITY).max(v["E1"].as_f64().unwrap_or(f64::INFINITY));
            let swap = e_err(&swapped) < e_err(&direct);
            let (errors, phase_error) = if swap {
                (swapped, relative_error(phase.complement().data(), h.data())?)
            } else {
                (direct, relative_error(phase.data(), h.data())?)
            };
            Some(json!({ "label_swapped": swap, "relative_error": errors, "phase_error": phase_error }))
        }
        None => None,
    };
    let summary = json!({
        "fit": fit_json(&est.fit),
        "refit": est.refit.as_ref().map(|r| fit_json(&r.fit)),
        "properties": properties_json(&est.rho0, &est.rho1),
        "reference": comparison,
        "warnings": est.warnings,
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("properties.json"), &properties_json(&est.rho0, &est.rho1))?;
        save_phase(&est.h, out.join("phase.fean"))?;
        if let Some(b) = &est.binarized {
            save_phase(b, out.join("phase_binarized.fean"))?;
        }
        write_loss_csv(&out.join("loss_history.csv"), &est.fit.loss_history)?;
        write_json(&out.join("report.json"), &summary)?;
    }
    let mut text = format!("{:?} after {} iterations\n", final_fit.status, est.fit.iterations);
    text.push_str(&properties_text(&est.rho0, &est.rho1));
    if let Some(c) = &comparison {
        text.push_str(&format!("\nagainst reference {c}"));
    }
    Ok(Report { summary, text, failed: final_fit.status == Status::Stagnated })
}

// -------------------------------------------------------- memory-report

pub fn memory_report(args: &MemoryArgs, g: &GlobalArgs) -> Result<Report> {
    if g.show_config {
        return show(&json!({ "n": args.n }));
    }
    let mut rows = Vec::new();
    let mut text = String::from("problem,fea_bytes,feanet_bytes,ratio");
    for dim in SpatialDim::ALL {
        for problem in MemoryProblem::ALL {
            if args.problem.as_ref().is_some_and(|p| p != problem.name()) {
                continue;
            }
            let f = memory_formula(problem, dim);
            let est = memory_estimate(problem, dim, args.n)?;
            text.push_str(&format!("\n{},{},{},{}", f.label(), est.fea_bytes, est.feanet_bytes, est.ratio));
            rows.push(json!({
                "problem": f.label(),
                "fea_bytes": est.fea_bytes,
                "feanet_bytes": est.feanet_bytes,
                "ratio": est.ratio,
                "ratio_limit": f.ratio_limit(),
            }));
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("unknown problem '{}'", args.problem.as_deref().unwrap_or(""))));
    }
    Ok(Report::ok(json!({ "n": args.n, "rows": rows }), text))
}

// --------------------------------------------------------------- export

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Csv,
    Pgm,
}

pub fn export(args: &ExportArgs, g: &GlobalArgs) -> Result<Report> {
    if g.show_config {
        return show(&json!({ "format": format!("{:?}", args.format).to_lowercase(), "channel": args.channel }));
    }
    let image = ImageFile::load(&args.input)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    let (side, plane, what) = match &image {
        ImageFile::Field(img) => {
            if args.channel >= img.channels() {
                return Err(Error::Validation(format!(
                    "channel {} out of range for {} image",
                    args.channel,
                    img.kind()
                )));
            }
            (img.n(), img.channel(args.channel), format!("{} n = {}", img.kind(), img.n()))
        }
        ImageFile::Phase(h) => (h.elements(), h.data().to_vec(), format!("phase {} elements", h.elements())),
    };
    match (args.format, &image) {
        (ExportFormat::Csv, ImageFile::Field(img)) => write_csv(&mut w, img)?,
        (ExportFormat::Csv, ImageFile::Phase(h)) => {
            writeln!(w, "r,c,h")?;
            for r in 0..side {
                for c in 0..side {
                    writeln!(w, "{r},{c},{:e}", h.get(r, c))?;
                }
            }
        }
        (ExportFormat::Pgm, _) => write_pgm(&mut w, side, &plane)?,
    }
    w.flush()?;
    let out: PathBuf = args.out.clone();
    Ok(Report::ok(json!({ "input": args.input, "out": out, "image": what }), format!("wrote {}", out.display())))
}
