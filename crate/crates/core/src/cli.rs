//! Configuration-driven experiment runner behind the `sparse-radon` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomp::DEFAULT_SLICE_EXPONENT;
use crate::error::{Error, Result};
use crate::lattice::{GridFunction, GridSpec};
use crate::measures::{
    circle_measure, dilate, estimate_decay, interval_bump_measure, modulate_mean_zero, named_density,
    standard_bump, DecayFit, DiscreteMeasure, MeasureDocument,
};
use crate::operators::{improving_norm_estimate, EpsilonSigns, ExponentPair, RadonOperator};
use crate::scalespace::{
    dyadic_levels, l2_decay_curve, telescoping_error, weak_l1_battery, weak_l1_growth_curve, weak_llogl_check,
    Curve, CurveRow, RegularizerFamily, LAMBDA_DENSITY,
};
use crate::sparse::{
    battery, certify_bound, constants_battery, reverify, root_cube, GridDocument, OperatorKind, ProblemDocument,
    SparseCertificate, SparseOptions, SparseProblem, ThresholdRecord,
};

#[derive(Parser, Debug)]
#[command(name = "sparse-radon", version, about = "Sparse bounds for Radon transforms on periodic dyadic grids")]
pub struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute a sparse certificate from its serialized inputs.
    Reverify { certificate: PathBuf, inputs: PathBuf },
    /// Print the experiments that `run` understands.
    ListExperiments,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Decay,
    Improving,
    SparseCertify,
    Scalespace,
    Llogl,
}

pub const EXPERIMENTS: [(Experiment, &str, &str); 5] = [
    (Experiment::Decay, "decay", "Fourier decay exponent of the positive measure"),
    (Experiment::Improving, "improving", "single-scale Lp to Lq norm estimate"),
    (Experiment::SparseCertify, "sparse-certify", "sparse collections and certificates over a battery"),
    (Experiment::Scalespace, "scalespace", "L2 and weak-L1 curves of the smoothed pieces"),
    (Experiment::Llogl, "llogl", "weak L log L ratios of the full transform"),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    #[default]
    Circle,
    Bump,
    CustomFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    #[serde(default)]
    pub kind: MeasureKind,
    /// Density used to build the mean-zero measure from the positive one.
    #[serde(default = "default_density")]
    pub density: String,
    pub points: Option<usize>,
    /// Serialized positive measure, relative to the config file.
    pub file: Option<PathBuf>,
}

fn default_density() -> String {
    "x1".into()
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self { kind: MeasureKind::Circle, density: default_density(), points: None, file: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentsConfig {
    pub p: f64,
    pub q: f64,
}

impl Default for ExponentsConfig {
    fn default() -> Self {
        Self { p: 1.5, q: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignPattern {
    #[default]
    Alternating,
    Random,
    Constant,
    Custom,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonConfig {
    #[serde(rename = "N1")]
    pub n1: Option<i32>,
    #[serde(rename = "N2")]
    pub n2: Option<i32>,
    #[serde(default)]
    pub pattern: SignPattern,
    pub seed: Option<u64>,
    pub value: Option<f64>,
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatteryKind {
    #[default]
    Random,
    Constants,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryConfig {
    #[serde(default)]
    pub family: BatteryKind,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    50
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self { family: BatteryKind::Random, count: default_count() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseConfig {
    pub q0_level: i32,
    pub window_ratio: i64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self { q0_level: 0, window_ratio: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalespaceConfig {
    pub k_min: Option<i32>,
    pub lambda_density: usize,
    pub slope_tolerance: f64,
    pub telescoping_tolerance: f64,
    pub r: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for ScalespaceConfig {
    fn default() -> Self {
        Self {
            k_min: None,
            lambda_density: LAMBDA_DENSITY,
            slope_tolerance: 0.3,
            telescoping_tolerance: 1e-8,
            r: 5.0,
            lambda_min: 1e-3,
            lambda_max: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImprovingConfig {
    pub trials: usize,
}

impl Default for ImprovingConfig {
    fn default() -> Self {
        Self { trials: 20 }
    }
}

/// Parsed contents of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default = "default_slice_exponent")]
    pub slice_exponent: f64,
    #[serde(default = "default_kind")]
    pub kind: OperatorKind,
    #[serde(default = "default_checks")]
    pub checks: bool,
    pub grid: GridDocument,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub exponents: ExponentsConfig,
    #[serde(default)]
    pub epsilon: EpsilonConfig,
    #[serde(default)]
    pub battery: BatteryConfig,
    #[serde(default)]
    pub sparse: SparseConfig,
    #[serde(default)]
    pub scalespace: ScalespaceConfig,
    #[serde(default)]
    pub improving: ImprovingConfig,
}

fn default_slice_exponent() -> f64 {
    DEFAULT_SLICE_EXPONENT
}

fn default_kind() -> OperatorKind {
    OperatorKind::Singular
}

fn default_checks() -> bool {
    true
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything validated before the first output is written.
struct Setup {
    config: ExperimentConfig,
    spec: GridSpec,
    sigma: DiscreteMeasure,
    mu: DiscreteMeasure,
    eps: EpsilonSigns,
    exps: ExponentPair,
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn prepare(config: ExperimentConfig, base: &Path) -> Result<Setup> {
    let spec = config.grid.to_spec()?;
    let exps = ExponentPair::new(config.exponents.p, config.exponents.q).map_err(config_error)?;
    if !(config.slice_exponent.is_finite() && config.slice_exponent >= 0.0) {
        return Err(Error::Config(format!("slice_exponent {} must be finite and >= 0", config.slice_exponent)));
    }
    let m = &config.measure;
    let sigma = match m.kind {
        MeasureKind::Circle => {
            if spec.dim() != 2 {
                return Err(Error::Config("the circle measure needs n = 2".into()));
            }
            circle_measure(spec, 1.0, m.points.unwrap_or(16 * spec.unit_cells() as usize)).map_err(config_error)?
        }
        MeasureKind::Bump => interval_bump_measure(spec, standard_bump).map_err(config_error)?,
        MeasureKind::CustomFile => {
            let path = m.file.as_ref().ok_or_else(|| Error::Config("custom-file measure needs 'file'".into()))?;
            let text = fs::read_to_string(base.join(path)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let doc: MeasureDocument = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let sigma: DiscreteMeasure = doc.try_into()?;
            if sigma.spec().unit_cells() != spec.unit_cells() || sigma.spec().dim() != spec.dim() {
                return Err(Error::Config("measure file resolution differs from the grid".into()));
            }
            sigma
        }
    };
    let mu = modulate_mean_zero(&sigma, named_density(&m.density)?)?;

    let e = &config.epsilon;
    let top = if config.experiment == Experiment::SparseCertify { config.sparse.q0_level } else { 0 };
    let n1 = e.n1.unwrap_or(3 - spec.log_unit() as i32);
    let n2 = e.n2.unwrap_or(top);
    let eps = match e.pattern {
        SignPattern::Alternating => EpsilonSigns::alternating(n1, n2),
        SignPattern::Random => EpsilonSigns::random(n1, n2, e.seed.unwrap_or(config.seed)),
        SignPattern::Constant => EpsilonSigns::constant(n1, n2, e.value.unwrap_or(1.0)),
        SignPattern::Custom => {
            let values = e.values.clone().ok_or_else(|| Error::Config("custom signs need 'values'".into()))?;
            EpsilonSigns::new(n1, n2, values)
        }
    }
    .map_err(config_error)?;
    for j in eps.scales() {
        dilate(&sigma, j)?;
    }
    match config.experiment {
        Experiment::SparseCertify => {
            if n2 != config.sparse.q0_level {
                return Err(Error::Config(format!("N2 = {n2} must equal the level of Q0 ({})", config.sparse.q0_level)));
            }
            let q0 = root_cube(&spec, config.sparse.q0_level)?;
            if !spec.contains_box(&q0.dilated_box(6)) {
                return Err(Error::ScaleGuard("6Q0 does not fit in the domain".into()));
            }
            let r = config.sparse.window_ratio;
            if r < 8 || r & (r - 1) != 0 {
                return Err(Error::Config(format!("window_ratio {r} must be a power of two >= 8")));
            }
            if config.battery.count == 0 {
                return Err(Error::Config("battery count must be positive".into()));
            }
        }
        Experiment::Scalespace => {
            family(&config, &spec)?;
            let s = &config.scalespace;
            if s.lambda_density == 0 {
                return Err(Error::Config("lambda_density must be positive".into()));
            }
        }
        Experiment::Llogl => {
            let s = &config.scalespace;
            if !(s.r > 4.0) {
                return Err(Error::Config(format!("r = {} must exceed 4", s.r)));
            }
            if !(s.lambda_min > 0.0 && s.lambda_min <= s.lambda_max && s.lambda_max.is_finite()) {
                return Err(Error::Config("need 0 < lambda_min <= lambda_max".into()));
            }
        }
        Experiment::Improving => {
            if config.improving.trials < 10 {
                return Err(Error::Config("improving needs at least 10 trials".into()));
            }
        }
        Experiment::Decay => {}
    }
    Ok(Setup { config, spec, sigma, mu, eps, exps })
}

fn family(config: &ExperimentConfig, spec: &GridSpec) -> Result<RegularizerFamily> {
    match config.scalespace.k_min {
        Some(k) => RegularizerFamily::new(*spec, k).map_err(config_error),
        None => RegularizerFamily::finest(*spec),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRecord {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: Experiment,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub grid: GridDocument,
    pub alpha_hat: Option<f64>,
    #[serde(rename = "D_trace")]
    pub d_trace: Vec<Vec<ThresholdRecord>>,
    pub checks: Vec<CheckRecord>,
    pub files: Vec<String>,
}

struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    checks: Vec<CheckRecord>,
    d_trace: Vec<Vec<ThresholdRecord>>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new(), checks: Vec::new(), d_trace: Vec::new() }
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    fn text(&mut self, name: &str, text: String) {
        self.files.push((name.into(), text.into_bytes()));
    }
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn decay_curve(fit: &DecayFit) -> Curve {
    let rows = fit
        .annuli
        .iter()
        .map(|&(edge, value)| {
            let centre = edge.log2() + 0.5;
            CurveRow {
                k: edge.log2().round() as i32,
                value,
                fit_residual: value.log2() - (fit.intercept + fit.raw_slope * centre),
            }
        })
        .collect();
    Curve { rows, slope: fit.raw_slope, intercept: fit.intercept, residual: fit.residual }
}

fn run_decay(setup: &Setup, out: &mut Outputs) -> Result<Option<f64>> {
    let fit = estimate_decay(&setup.sigma)?;
    out.text("decay.csv", decay_curve(&fit).to_csv());
    out.json("decay.json", &fit)?;
    out.checks.push(CheckRecord::new(
        "decay_fit",
        fit.alpha_hat.is_finite() && fit.residual.is_finite(),
        format!("alpha_hat = {}, residual = {}", fit.alpha_hat, fit.residual),
    ));
    Ok(Some(fit.alpha_hat))
}

#[derive(Serialize)]
struct ImprovingReport {
    p: f64,
    q: f64,
    trials: usize,
    estimate: f64,
}

fn run_improving(setup: &Setup, out: &mut Outputs) -> Result<()> {
    let c = &setup.config;
    let estimate = improving_norm_estimate(&setup.sigma, setup.exps.p, setup.exps.q, c.improving.trials, c.seed)?;
    out.json("improving.json", &ImprovingReport { p: setup.exps.p, q: setup.exps.q, trials: c.improving.trials, estimate })?;
    out.checks.push(CheckRecord::new("improving_finite", estimate.is_finite(), format!("estimate = {estimate}")));
    Ok(())
}

#[derive(Serialize)]
struct SparseSummary {
    count: usize,
    max_ratio: f64,
    max_depth: usize,
    sparsity_failures: usize,
    ratios: Vec<f64>,
}

fn run_sparse(setup: &Setup, out: &mut Outputs) -> Result<()> {
    let c = &setup.config;
    let q0 = root_cube(&setup.spec, c.sparse.q0_level)?;
    let pairs = match c.battery.family {
        BatteryKind::Random => battery(&setup.spec, &q0, c.battery.count, c.seed, c.kind),
        BatteryKind::Constants => constants_battery(&setup.spec, &q0, c.battery.count, c.seed)?,
    };
    let options = SparseOptions { window_ratio: c.sparse.window_ratio, slice_exponent: c.slice_exponent };
    let mut csv = String::from("pair,family,pairing,form,plain_form,ratio,cubes,max_depth\n");
    let mut ratios = Vec::new();
    let mut failures = 0;
    let mut max_depth = 0;
    let mut form_dominates = true;
    for (i, pair) in pairs.into_iter().enumerate() {
        let problem = SparseProblem {
            f1: pair.f1,
            f2: pair.f2,
            mu: setup.mu.clone(),
            sigma: setup.sigma.clone(),
            eps: setup.eps.clone(),
            exps: setup.exps,
            q0,
            kind: c.kind,
            options,
        };
        let (cert, _) = certify_bound(&problem)?;
        let ch = &cert.checks;
        if !(ch.sparsity && ch.union && ch.nested && ch.depth_bound) {
            failures += 1;
        }
        form_dominates &= cert.form >= cert.plain_form * (1.0 - 1e-12);
        max_depth = max_depth.max(cert.max_depth);
        csv.push_str(&format!(
            "{i},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            serde_json::to_value(pair.family)?.as_str().unwrap_or_default(),
            cert.pairing,
            cert.form,
            cert.plain_form,
            cert.ratio,
            cert.cubes.len(),
            cert.max_depth
        ));
        ratios.push(cert.ratio);
        out.d_trace.push(cert.d_trace.clone());
        out.json(&format!("certificate-{i:03}.json"), &cert)?;
        out.json(&format!("inputs-{i:03}.json"), &problem.to_document()?)?;
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    out.text("sparse.csv", csv);
    out.checks.push(CheckRecord::new("sparsity", failures == 0, format!("{failures} certificates failed a structural check")));
    out.checks.push(CheckRecord::new("ratio_finite", max_ratio.is_finite(), format!("max ratio = {max_ratio}")));
    out.checks.push(CheckRecord::new("plus_dominates_plain", form_dominates, "form with p+ averages >= form with p averages".into()));
    out.json("sparse-summary.json", &SparseSummary { count: ratios.len(), max_ratio, max_depth, sparsity_failures: failures, ratios })?;
    Ok(())
}

#[derive(Serialize)]
struct ScalespaceSummary {
    k_min: i32,
    alpha_hat_mu: Option<f64>,
    l2_slope: f64,
    l2_residual: f64,
    weak_envelope: (f64, f64),
    weak_within_envelope: bool,
    telescoping_error: f64,
}

fn run_scalespace(setup: &Setup, out: &mut Outputs) -> Result<Option<f64>> {
    let c = &setup.config;
    let fam = family(c, &setup.spec)?;
    let ks: Vec<i32> = fam.bands().collect();
    let alpha = estimate_decay(&setup.mu).ok().map(|f| f.alpha_hat);
    let (l2, _) = l2_decay_curve(&setup.mu, &setup.eps, &fam, &ks)?;
    let weak = weak_l1_growth_curve(&setup.mu, &setup.eps, &fam, &ks, &weak_l1_battery(&setup.spec), c.scalespace.lambda_density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let f = GridFunction::new(setup.spec, (0..setup.spec.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let tele = telescoping_error(&f, &setup.mu, &setup.eps, &fam)?;
    out.text("l2_decay.csv", l2.to_csv());
    out.text("weak_l1.csv", weak.curve.to_csv());
    match alpha {
        Some(a) => out.checks.push(CheckRecord::new(
            "l2_slope",
            (l2.slope - a).abs() <= c.scalespace.slope_tolerance * a,
            format!("slope = {}, alpha_hat = {a}", l2.slope),
        )),
        None => out.checks.push(CheckRecord::new("l2_slope", false, "decay of mu could not be fitted".into())),
    }
    out.checks.push(CheckRecord::new(
        "weak_l1_envelope",
        weak.within_envelope,
        format!("a + b (1 - k) with (a, b) = {:?}", weak.envelope),
    ));
    out.checks.push(CheckRecord::new(
        "telescoping",
        tele <= c.scalespace.telescoping_tolerance,
        format!("max deviation = {tele:e}"),
    ));
    out.json(
        "scalespace.json",
        &ScalespaceSummary {
            k_min: fam.k_min(),
            alpha_hat_mu: alpha,
            l2_slope: l2.slope,
            l2_residual: l2.residual,
            weak_envelope: weak.envelope,
            weak_within_envelope: weak.within_envelope,
            telescoping_error: tele,
        },
    )?;
    Ok(alpha)
}

fn run_llogl(setup: &Setup, out: &mut Outputs) -> Result<()> {
    let c = &setup.config;
    let t = RadonOperator::new(setup.spec, &setup.mu, &setup.eps)?;
    let n = setup.spec.cells_per_axis() as i64 / 2;
    let centre = if setup.spec.dim() == 2 { [n, n] } else { [n, 0] };
    let mut cell = GridFunction::zeros(setup.spec);
    cell.samples_mut()[setup.spec.index(centre)] = 1.0 / setup.spec.cell_volume();
    let table = weak_llogl_check(&t, &cell, &dyadic_levels(c.scalespace.lambda_min, c.scalespace.lambda_max), c.scalespace.r)?;
    out.text("llogl.csv", table.to_csv());
    out.checks.push(CheckRecord::new("llogl_finite", table.max_ratio.is_finite(), format!("max ratio = {}", table.max_ratio)));
    Ok(())
}

/// Runs one experiment and writes its artifacts; returns the manifest.
pub fn run_experiment(config_path: &Path, out_override: Option<&Path>, seed_override: Option<u64>) -> Result<Manifest> {
    let raw = fs::read(config_path).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let text = String::from_utf8(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let out_dir = match (out_override, &config.out) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out"),
    };
    let setup = prepare(config, base)?;

    let mut out = Outputs::new();
    let alpha = match setup.config.experiment {
        Experiment::Decay => run_decay(&setup, &mut out)?,
        Experiment::Improving => {
            run_improving(&setup, &mut out)?;
            estimate_decay(&setup.sigma).ok().map(|f| f.alpha_hat)
        }
        Experiment::SparseCertify => {
            run_sparse(&setup, &mut out)?;
            estimate_decay(&setup.sigma).ok().map(|f| f.alpha_hat)
        }
        Experiment::Scalespace => run_scalespace(&setup, &mut out)?,
        Experiment::Llogl => {
            run_llogl(&setup, &mut out)?;
            estimate_decay(&setup.mu).ok().map(|f| f.alpha_hat)
        }
    };
    if !setup.config.checks {
        out.checks.clear();
    }
    let manifest = Manifest {
        experiment: setup.config.experiment,
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: hex::encode(Sha256::digest(&raw)),
        seed: setup.config.seed,
        grid: GridDocument::from(&setup.spec),
        alpha_hat: alpha,
        d_trace: out.d_trace.clone(),
        checks: out.checks.clone(),
        files: out.files.iter().map(|(n, _)| n.clone()).collect(),
    };
    out.json("manifest.json", &manifest)?;
    fs::create_dir_all(&out_dir)?;
    for (name, bytes) in &out.files {
        write_atomic(&out_dir.join(name), bytes)?;
    }
    Ok(manifest)
}

/// Parses both files and recomputes the certificate.
pub fn reverify_files(certificate: &Path, inputs: &Path) -> Result<crate::sparse::ReverifyReport> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
    let cert: SparseCertificate = serde_json::from_str(&read(certificate)?)?;
    let doc: ProblemDocument = serde_json::from_str(&read(inputs)?)?;
    reverify(&cert, &doc)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.threads > 0 {
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::ListExperiments => {
            for (_, name, about) in EXPERIMENTS {
                println!("{name:<16}{about}");
            }
            0
        }
        Command::Run { config, out, seed } => {
            let start = Instant::now();
            match run_experiment(&config, out.as_deref(), seed) {
                Ok(manifest) => {
                    eprintln!("finished in {:.2?}", start.elapsed());
                    match manifest.checks.iter().find(|c| !c.passed) {
                        Some(c) => {
                            eprintln!("check failed: {}: {}", c.name, c.detail);
                            4
                        }
                        None => 0,
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Reverify { certificate, inputs } => match reverify_files(&certificate, &inputs) {
            Ok(report) if report.passed => {
                println!("certificate verified");
                0
            }
            Ok(report) => {
                for d in &report.differences {
                    eprintln!("mismatch: {d}");
                }
                4
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPARSE: &str = r#"
experiment = "sparse-certify"
seed = 5
[grid]
n = 2
K = 9
s = 5
[battery]
family = "constants"
count = 2
"#;

    #[test]
    fn config_defaults() {
        let c = ExperimentConfig::parse(SPARSE).unwrap();
        assert_eq!(c.experiment, Experiment::SparseCertify);
        assert_eq!(c.exponents, ExponentsConfig { p: 1.5, q: 3.0 });
        assert_eq!(c.slice_exponent, 4.0);
        assert_eq!(c.kind, OperatorKind::Singular);
        let setup = prepare(c, Path::new(".")).unwrap();
        assert_eq!(setup.eps.scales(), -2..=0);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let swapped = format!("{SPARSE}[exponents]\np = 3.0\nq = 2.0\n");
        let e = prepare(ExperimentConfig::parse(&swapped).unwrap(), Path::new(".")).err().unwrap();
        assert_eq!(e.exit_code(), 2, "{e}");
        assert_eq!(ExperimentConfig::parse("experiment = \"nope\"").unwrap_err().exit_code(), 2);
        let typo = SPARSE.replace("count", "cuont");
        assert_eq!(ExperimentConfig::parse(&typo).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn guard_violations_exit_three() {
        let bad = SPARSE.replace("s = 5", "s = 6");
        let e = prepare(ExperimentConfig::parse(&bad).unwrap(), Path::new(".")).err().unwrap();
        assert_eq!(e.exit_code(), 3, "{e}");
        let wide = format!("{SPARSE}[epsilon]\nN1 = -3\n");
        let e = prepare(ExperimentConfig::parse(&wide).unwrap(), Path::new(".")).err().unwrap();
        assert_eq!(e.exit_code(), 3, "{e}");
    }

    #[test]
    fn decay_rows_follow_the_fit() {
        let spec = GridSpec::new(2, 11, 6).unwrap();
        let fit = estimate_decay(&circle_measure(spec, 1.0, 1024).unwrap()).unwrap();
        let curve = decay_curve(&fit);
        assert_eq!(curve.rows.first().unwrap().k, -1);
        let rms = (curve.rows.iter().map(|r| r.fit_residual.powi(2)).sum::<f64>() / curve.rows.len() as f64).sqrt();
        assert!((rms - fit.residual).abs() < 1e-12);
    }
}
