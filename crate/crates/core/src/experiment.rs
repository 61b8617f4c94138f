//! Experiment configuration, orchestration and on-disk artifacts.
//!
//! A run reads a JSON config, builds the observable family and its limit
//! kernel, simulates an ensemble (eigenvector paths or reference Gaussian
//! paths), and writes `paths.csv`, `covariance.csv`, `diagnostics.json` and
//! `manifest.json` into an output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, FieldError, Result};
use crate::kernels::{
    analytic_kl, covlip_check, make_kernel, nystrom_kl, positive_type_check, uniform_grid, AnalyticKl, CovlipReport,
    GramFunction, Kernel, KernelSpec, KlDecomposition, PositiveTypeReport,
};
use crate::observables::{
    gram_vectors, kl_family, kl_mode_count, norm_and_hypothesis_report, orthonormal_projector_family, projector_family,
    separable_family, GramSpec, HypothesisReport, ObservableFamily, SeparableProfile,
};
use crate::process::{
    empirical_covariance, gaussianity_test, holder_diagnostic, run_ensembles, run_reference_ensemble, Ensemble,
    EnsembleConfig, GaussianityReport, HolderReport, PathEvaluator, Probe, ReferenceSampler, TimeGrid,
};
use crate::wigner::{bulk_indices, flat_profile, middle_index, EntryLaw};

/// Exponent `δ` of the variance floor `⟨A_t²⟩ ≥ n^{−1+δ}`.
pub const HYPOTHESIS_DELTA: f64 = 0.01;
/// Number of uniform points of the covariance probe grid, before the figure times are added.
pub const PROBE_POINTS: usize = 11;
/// Times at which covariance and slices are reported.
pub const FIGURE_TIMES: [f64; 3] = [0.25, 0.5, 0.75];
/// Probe times: the uniform `PROBE_POINTS` grid together with the figure times, sorted.
pub fn probe_times() -> Vec<f64> {
    let mut t = uniform_grid(PROBE_POINTS);
    t.extend(FIGURE_TIMES);
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    t
}

/// KS acceptance level.
pub const KS_LEVEL: f64 = 0.01;
/// Additive allowance on `|Ĉ − K|` for finite-n bias.
pub const COVARIANCE_ALLOWANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    #[default]
    Flat,
}

fn default_law() -> EntryLaw {
    EntryLaw::Rademacher
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub n: usize,
    #[serde(default)]
    pub profile: ProfileKind,
    #[serde(default = "default_law")]
    pub law: EntryLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FChoice {
    SinPi2,
}

/// Kernels that can be named in a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Bb,
    Bm,
    Equiangular {
        gamma: f64,
    },
    SinPi2,
    Ou {
        theta: f64,
        sigma: f64,
    },
    Fbm {
        #[serde(alias = "H")]
        h: f64,
    },
    RlFbm {
        #[serde(alias = "H")]
        h: f64,
    },
}

impl KernelConfig {
    pub fn spec(&self) -> KernelSpec {
        match self {
            KernelConfig::Bb => KernelSpec::BrownianBridge,
            KernelConfig::Bm => KernelSpec::BrownianMotion,
            KernelConfig::Equiangular { gamma } => KernelSpec::Equiangular { gamma: *gamma },
            KernelConfig::SinPi2 => KernelSpec::FromF(GramFunction::SinPi2),
            KernelConfig::Ou { theta, sigma } => KernelSpec::OrnsteinUhlenbeck {
                theta: *theta,
                sigma: *sigma,
            },
            KernelConfig::Fbm { h } => KernelSpec::FractionalBm { hurst: *h },
            KernelConfig::RlFbm { h } => KernelSpec::RiemannLiouvilleFbm { hurst: *h },
        }
    }
}

/// Where the KL modes of a `kl` observable come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KlKernelConfig {
    Bb,
    Bm,
    RlFbm {
        #[serde(alias = "H")]
        h: f64,
    },
    Nystrom {
        kernel: KernelConfig,
        grid_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableConfig {
    Bb,
    Equiangular {
        gamma: f64,
    },
    FromF {
        f: FChoice,
    },
    Ou {
        theta: f64,
        sigma: f64,
    },
    Kl {
        kernel: KlKernelConfig,
        kappa: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        modes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedIndex {
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexChoice {
    Index(usize),
    Named(NamedIndex),
}

impl IndexChoice {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            IndexChoice::Index(i) => i,
            IndexChoice::Named(NamedIndex::Middle) => middle_index(n),
        }
    }
}

fn default_index() -> IndexChoice {
    IndexChoice::Named(NamedIndex::Middle)
}

fn default_alpha() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicesConfig {
    #[serde(default = "default_index")]
    pub k: IndexChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<IndexChoice>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for IndicesConfig {
    fn default() -> Self {
        Self {
            k: default_index(),
            l: None,
            alpha: default_alpha(),
        }
    }
}

fn default_points() -> usize {
    101
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_points")]
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: default_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSettings {
    pub replicates: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gaussianity,
    Covariance,
    Holder,
    Hypotheses,
}

fn default_checks() -> Vec<CheckKind> {
    vec![
        CheckKind::Gaussianity,
        CheckKind::Covariance,
        CheckKind::Holder,
        CheckKind::Hypotheses,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Wigner,
    GaussianReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub matrix: MatrixConfig,
    pub observable: ObservableConfig,
    #[serde(default)]
    pub indices: IndicesConfig,
    #[serde(default)]
    pub grid: GridConfig,
    pub ensemble: EnsembleSettings,
    #[serde(default = "default_checks")]
    pub checks: Vec<CheckKind>,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

const SHORTHAND: [(&str, &str); 7] = [
    ("n", "matrix"),
    ("profile", "matrix"),
    ("law", "matrix"),
    ("replicates", "ensemble"),
    ("master_seed", "ensemble"),
    ("k", "indices"),
    ("alpha", "indices"),
];

/// Rewrites the flat shorthand (`{"n": 300, "replicates": 400, ...}`) and
/// bare strings for tagged objects (`"observable": "bb"`) into the nested
/// form.
fn normalize(mut v: Value) -> Value {
    let Some(obj) = v.as_object_mut() else { return v };
    let mut moves: Vec<(String, &str)> = SHORTHAND
        .iter()
        .filter(|(k, _)| obj.contains_key(*k))
        .map(|(k, section)| (k.to_string(), *section))
        .collect();
    if obj.contains_key("l") {
        moves.push(("l".into(), "indices"));
    }
    if obj.contains_key("points") {
        moves.push(("points".into(), "grid"));
    }
    for (key, section) in moves {
        if let Some(val) = obj.remove(&key) {
            let entry = obj.entry(section).or_insert_with(|| Value::Object(Map::new()));
            if let Some(inner) = entry.as_object_mut() {
                inner.entry(key).or_insert(val);
            }
        }
    }
    if let Some(obs) = obj.get_mut("observable") {
        tag_string(obs);
        if let Some(kernel) = obs.get_mut("kernel") {
            tag_string(kernel);
            if let Some(inner) = kernel.get_mut("kernel") {
                tag_string(inner);
            }
        }
    }
    v
}

fn tag_string(v: &mut Value) {
    if let Value::String(s) = v {
        let mut m = Map::new();
        m.insert("type".into(), Value::String(s.clone()));
        *v = Value::Object(m);
    }
}

impl ExperimentConfig {
    /// Parses and validates a config from JSON text.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![FieldError::new("<root>", format!("invalid JSON: {e}"))]))?;
        let normalized = normalize(raw);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(normalized).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::Config(vec![FieldError::new(path, e.into_inner().to_string())])
        })?;
        let errors = cfg.validate();
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Canonical nested JSON form.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolved `(k, ℓ)`; `ℓ` defaults to `k`.
    pub fn resolved_indices(&self) -> (usize, usize) {
        let n = self.matrix.n;
        let k = self.indices.k.resolve(n);
        (k, self.indices.l.map(|l| l.resolve(n)).unwrap_or(k))
    }

    /// Number of KL modes the run needs, for `kl` observables.
    pub fn kl_modes(&self) -> Option<usize> {
        match &self.observable {
            ObservableConfig::Kl { kappa, modes, .. } => {
                Some(modes.unwrap_or_else(|| kl_mode_count(self.matrix.n, *kappa)))
            }
            _ => None,
        }
    }

    /// Every field-level problem, in document order.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut push = |p: &str, m: String| errs.push(FieldError::new(p, m));
        let n = self.matrix.n;
        if n < 2 {
            push("matrix.n", format!("n must be at least 2, got {n}"));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let hurst_ok = |h: f64| h > 0.0 && h < 1.0;
        let check_kernel = |k: &KernelConfig, path: &str, push: &mut dyn FnMut(&str, String)| match k {
            KernelConfig::Equiangular { gamma } if !gamma.is_finite() => {
                push(&format!("{path}.gamma"), "gamma must be finite".into())
            }
            KernelConfig::Ou { theta, sigma } => {
                if !positive(*theta) {
                    push(&format!("{path}.theta"), format!("theta must be positive, got {theta}"));
                }
                if !positive(*sigma) {
                    push(&format!("{path}.sigma"), format!("sigma must be positive, got {sigma}"));
                }
            }
            KernelConfig::Fbm { h } | KernelConfig::RlFbm { h } if !hurst_ok(*h) => push(
                &format!("{path}.h"),
                format!("Hurst exponent must lie in (0,1), got {h}"),
            ),
            _ => {}
        };
        match &self.observable {
            ObservableConfig::Bb | ObservableConfig::FromF { .. } => {}
            ObservableConfig::Equiangular { gamma } => {
                if !gamma.is_finite() {
                    push("observable.gamma", "gamma must be finite".into());
                } else if n >= 2 && gamma.abs() > (n as f64).sqrt() {
                    push(
                        "observable.gamma",
                        format!("|gamma| must not exceed sqrt(n) = {}", (n as f64).sqrt()),
                    );
                }
            }
            ObservableConfig::Ou { theta, sigma } => {
                if n < 4 {
                    push("matrix.n", format!("the ou observable needs n >= 4, got {n}"));
                }
                if !positive(*theta) {
                    push("observable.theta", format!("theta must be positive, got {theta}"));
                }
                if !positive(*sigma) {
                    push("observable.sigma", format!("sigma must be positive, got {sigma}"));
                }
            }
            ObservableConfig::Kl { kernel, kappa, modes } => {
                let kappa_ok = *kappa > 0.0 && *kappa < 1.0;
                if !kappa_ok {
                    push("observable.kappa", "kappa must lie in (0,1)".into());
                }
                let needed = if kappa_ok && n >= 2 {
                    kl_mode_count(n, *kappa)
                } else {
                    0
                };
                if kappa_ok && needed == 0 {
                    push("observable.kappa", format!("floor(n^kappa) is 0 for n = {n}"));
                }
                if let Some(m) = modes {
                    if *m < needed {
                        push(
                            "observable.modes",
                            format!("need at least floor(n^kappa) = {needed} modes, got {m}"),
                        );
                    }
                }
                let m = modes.unwrap_or(needed);
                match kernel {
                    KlKernelConfig::RlFbm { h } if !hurst_ok(*h) => push(
                        "observable.kernel.h",
                        format!("Hurst exponent must lie in (0,1), got {h}"),
                    ),
                    KlKernelConfig::Nystrom { kernel, grid_size } => {
                        check_kernel(kernel, "observable.kernel.kernel", &mut push);
                        if *grid_size < 4 * m.max(1) {
                            push(
                                "observable.kernel.grid_size",
                                format!(
                                    "grid_size must be at least 4 x modes = {}, got {grid_size}",
                                    4 * m.max(1)
                                ),
                            );
                        }
                    }
                    _ => {}
                }
            }
        }
        let alpha = self.indices.alpha;
        if !(alpha > 0.0 && alpha < 0.5) {
            push("indices.alpha", format!("alpha must lie in (0, 1/2), got {alpha}"));
        } else if n >= 2 {
            if let Ok(range) = bulk_indices(n, alpha) {
                let (k, l) = self.resolved_indices();
                if !range.contains(&k) {
                    push(
                        "indices.k",
                        format!(
                            "index {k} lies outside the bulk window {}..={}",
                            range.start(),
                            range.end()
                        ),
                    );
                }
                if !range.contains(&l) {
                    push(
                        "indices.l",
                        format!(
                            "index {l} lies outside the bulk window {}..={}",
                            range.start(),
                            range.end()
                        ),
                    );
                }
            }
        }
        let points = self.grid.points;
        if points < 3 || !(points - 1).is_multiple_of(20) {
            push(
                "grid.points",
                format!("points must be 20j + 1 (j >= 1) so the probe times lie on the grid, got {points}"),
            );
        }
        let m = self.ensemble.replicates;
        if m == 0 {
            push("ensemble.replicates", "need at least 1 replicate".into());
        }
        if self.checks.contains(&CheckKind::Gaussianity) && m < crate::process::MIN_GAUSSIANITY_REPLICATES {
            push(
                "ensemble.replicates",
                format!(
                    "the gaussianity check needs at least {} replicates, got {m}",
                    crate::process::MIN_GAUSSIANITY_REPLICATES
                ),
            );
        }
        if self.checks.contains(&CheckKind::Covariance) && m < 2 {
            push(
                "ensemble.replicates",
                format!("the covariance check needs at least 2 replicates, got {m}"),
            );
        }
        if self.threads == Some(0) {
            push("threads", "threads must be at least 1".into());
        }
        errs
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(vec![FieldError::new(
            "<file>",
            format!("cannot read {}: {e}", path.display()),
        )])
    })?;
    ExperimentConfig::from_json_str(&text)
}

/// The observable family of a config together with its limit kernel.
#[derive(Debug, Clone)]
pub struct BuiltObservable {
    pub family: ObservableFamily,
    pub kernel: Kernel,
    pub kl: Option<KlDecomposition>,
    pub label: String,
}

/// KL decomposition and limit kernel of a `kl` observable.
pub fn build_kl(kernel: &KlKernelConfig, modes: usize) -> Result<(KlDecomposition, Kernel)> {
    match kernel {
        KlKernelConfig::Bb => Ok((
            analytic_kl(AnalyticKl::BrownianBridge, modes)?,
            make_kernel(KernelSpec::BrownianBridge)?,
        )),
        KlKernelConfig::Bm => Ok((
            analytic_kl(AnalyticKl::BrownianMotion, modes)?,
            make_kernel(KernelSpec::BrownianMotion)?,
        )),
        // At H = 1/2 the process is Brownian motion; use its sine modes.
        KlKernelConfig::RlFbm { h } if (h - 0.5).abs() < 1e-12 => Ok((
            analytic_kl(AnalyticKl::BrownianMotion, modes)?,
            make_kernel(KernelSpec::BrownianMotion)?,
        )),
        KlKernelConfig::RlFbm { h } => Ok((
            analytic_kl(AnalyticKl::RiemannLiouvilleFbm { hurst: *h }, modes)?,
            make_kernel(KernelSpec::RiemannLiouvilleFbm { hurst: *h })?,
        )),
        KlKernelConfig::Nystrom { kernel, grid_size } => {
            let k = make_kernel(kernel.spec())?;
            Ok((nystrom_kl(&k, *grid_size, modes)?, k))
        }
    }
}

pub fn build_observable(cfg: &ExperimentConfig) -> Result<BuiltObservable> {
    let n = cfg.matrix.n;
    let built = match &cfg.observable {
        ObservableConfig::Bb => BuiltObservable {
            family: orthonormal_projector_family(n)?,
            kernel: make_kernel(KernelSpec::BrownianBridge)?,
            kl: None,
            label: "bb".into(),
        },
        ObservableConfig::Equiangular { gamma } => BuiltObservable {
            family: projector_family(gram_vectors(n, &GramSpec::Equiangular { gamma: *gamma })?)?,
            kernel: make_kernel(KernelSpec::Equiangular { gamma: *gamma })?,
            kl: None,
            label: format!("equiangular(gamma={gamma})"),
        },
        ObservableConfig::FromF { f: FChoice::SinPi2 } => BuiltObservable {
            family: projector_family(gram_vectors(n, &GramSpec::FromF(GramFunction::SinPi2))?)?,
            kernel: make_kernel(KernelSpec::FromF(GramFunction::SinPi2))?,
            kl: None,
            label: "from_f(sin_pi2)".into(),
        },
        ObservableConfig::Ou { theta, sigma } => BuiltObservable {
            family: separable_family(
                n,
                SeparableProfile::OrnsteinUhlenbeck {
                    theta: *theta,
                    sigma: *sigma,
                },
            )?,
            kernel: make_kernel(KernelSpec::OrnsteinUhlenbeck {
                theta: *theta,
                sigma: *sigma,
            })?,
            kl: None,
            label: format!("ou(theta={theta},sigma={sigma})"),
        },
        ObservableConfig::Kl { kernel, kappa, .. } => {
            let modes = cfg.kl_modes().unwrap_or(1);
            let (kl, limit) = build_kl(kernel, modes)?;
            BuiltObservable {
                family: kl_family(n, &kl, *kappa)?,
                label: format!("kl({}, kappa={kappa})", limit.name()),
                kernel: limit,
                kl: Some(kl),
            }
        }
    };
    Ok(built)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: CheckKind,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceEntry {
    pub s: f64,
    pub t: f64,
    pub empirical: f64,
    pub se: f64,
    pub finite_n_target: f64,
    pub limit_kernel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub entries: Vec<CovarianceEntry>,
    /// Largest `|Ĉ − K| − 3·SE` over the checked entries.
    pub worst_excess: f64,
    pub allowance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub observable: String,
    pub sampler: SamplerKind,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub replicates: usize,
    pub gaussianity: Option<GaussianityReport>,
    pub covariance: Option<CovarianceCheck>,
    pub holder: Option<HolderReport>,
    pub hypotheses: Option<HypothesisReport>,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub timestamp_unix: u64,
    pub threads: usize,
    /// File name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub diagnostics: Diagnostics,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.diagnostics.passed
    }
}

/// Locale-independent scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer() -> csv::WriterBuilder {
    let mut b = csv::WriterBuilder::new();
    b.terminator(csv::Terminator::Any(b'\n'));
    b
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv_writer().from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn paths_csv(ens: &Ensemble) -> Result<Vec<u8>> {
    let times = ens.grid.times();
    let rows = ens.paths.iter().enumerate().flat_map(|(r, p)| {
        times
            .iter()
            .zip(&p.values)
            .map(move |(t, x)| vec![r.to_string(), fmt_f64(*t), fmt_f64(*x)])
    });
    csv_bytes(&["replicate", "t", "x"], rows)
}

/// Ensemble, covariance and diagnostics of one run, before anything is
/// written.
struct Computed {
    ensemble: Ensemble,
    covariance: Vec<CovarianceEntry>,
    diagnostics: Diagnostics,
}

fn compute(cfg: &ExperimentConfig) -> Result<Computed> {
    let built = build_observable(cfg).map_err(|e| e.in_stage("observables"))?;
    let n = cfg.matrix.n;
    let (k, l) = cfg.resolved_indices();
    let grid = TimeGrid::uniform(cfg.grid.points).map_err(|e| e.in_stage("process"))?;
    let probe = probe_times();

    let ensemble = match cfg.sampler {
        SamplerKind::Wigner => {
            let ens_cfg = EnsembleConfig {
                profile: flat_profile(n).map_err(|e| e.in_stage("wigner"))?,
                law: cfg.matrix.law,
                replicates: cfg.ensemble.replicates,
                master_seed: cfg.ensemble.master_seed,
            };
            let probe_spec = Probe {
                evaluator: PathEvaluator::new(&built.family, &grid, built.label.clone()),
                k,
                l,
            };
            run_ensembles(&ens_cfg, &[probe_spec])
                .map_err(|e| e.in_stage("process"))?
                .remove(0)
        }
        SamplerKind::GaussianReference => {
            let sampler = ReferenceSampler::from_kernel(&built.kernel, &grid).map_err(|e| e.in_stage("process"))?;
            run_reference_ensemble(&sampler, cfg.ensemble.replicates, cfg.ensemble.master_seed)
                .map_err(|e| e.in_stage("process"))?
        }
    };

    let emp = empirical_covariance(&ensemble, &probe).map_err(|e| e.in_stage("process"))?;
    let mut covariance = Vec::with_capacity(probe.len() * probe.len());
    for (a, &s) in probe.iter().enumerate() {
        for (b, &t) in probe.iter().enumerate() {
            let limit = built.kernel.eval(s, t);
            let finite = match cfg.sampler {
                SamplerKind::Wigner => built.family.trace_inner(s, t),
                SamplerKind::GaussianReference => limit,
            };
            covariance.push(CovarianceEntry {
                s,
                t,
                empirical: emp.cov[(a, b)],
                se: emp.se.as_ref().map_or(f64::NAN, |se| se[(a, b)]),
                finite_n_target: finite,
                limit_kernel: limit,
            });
        }
    }

    let mut checks = Vec::new();
    let mut diag = Diagnostics {
        observable: built.label.clone(),
        sampler: cfg.sampler,
        n,
        k,
        l,
        replicates: ensemble.replicates(),
        gaussianity: None,
        covariance: None,
        holder: None,
        hypotheses: None,
        checks: Vec::new(),
        passed: false,
    };
    let mut enabled = cfg.checks.clone();
    enabled.sort();
    enabled.dedup();
    for check in enabled {
        match check {
            CheckKind::Gaussianity => {
                let var = built.kernel.eval(0.5, 0.5);
                if var > 0.0 {
                    let r = gaussianity_test(&ensemble, 0.5, var).map_err(|e| e.in_stage("process"))?;
                    checks.push(CheckOutcome {
                        name: check,
                        pass: r.p_value > KS_LEVEL,
                        detail: format!("KS p-value {:.4} at t = 0.5 (level {KS_LEVEL})", r.p_value),
                    });
                    diag.gaussianity = Some(r);
                } else {
                    checks.push(CheckOutcome {
                        name: check,
                        pass: false,
                        detail: format!("limit variance K(0.5, 0.5) = {var} is not positive"),
                    });
                }
            }
            CheckKind::Covariance => {
                let entries: Vec<CovarianceEntry> = covariance
                    .iter()
                    .filter(|e| {
                        FIGURE_TIMES.iter().any(|x| (x - e.s).abs() < 1e-12)
                            && FIGURE_TIMES.iter().any(|x| (x - e.t).abs() < 1e-12)
                    })
                    .copied()
                    .collect();
                let worst_excess = entries
                    .iter()
                    .map(|e| (e.empirical - e.limit_kernel).abs() - 3.0 * e.se)
                    .fold(f64::NEG_INFINITY, f64::max);
                let pass = worst_excess <= COVARIANCE_ALLOWANCE;
                checks.push(CheckOutcome {
                    name: check,
                    pass,
                    detail: format!(
                        "max |C - K| - 3 SE = {worst_excess:.4} over {{1/4,1/2,3/4}}^2 (allowance {COVARIANCE_ALLOWANCE})"
                    ),
                });
                diag.covariance = Some(CovarianceCheck {
                    entries,
                    worst_excess,
                    allowance: COVARIANCE_ALLOWANCE,
                    pass,
                });
            }
            CheckKind::Holder => {
                let r = holder_diagnostic(&built.family, &grid).map_err(|e| e.in_stage("process"))?;
                checks.push(CheckOutcome {
                    name: check,
                    pass: r.pass,
                    detail: format!("max ratio {:.4} against L = {:.4}", r.max_ratio, r.declared.l),
                });
                diag.holder = Some(r);
            }
            CheckKind::Hypotheses => {
                let r = norm_and_hypothesis_report(&built.family, &probe, HYPOTHESIS_DELTA)
                    .map_err(|e| e.in_stage("observables"))?;
                checks.push(CheckOutcome {
                    name: check,
                    pass: r.passed(),
                    detail: format!(
                        "trace {}, norm {}, variance floor {}, increments {}",
                        ok_str(r.trace_ok),
                        ok_str(r.norm_ok),
                        ok_str(r.variance_ok),
                        ok_str(r.holder_ok)
                    ),
                });
                diag.hypotheses = Some(r);
            }
        }
    }
    diag.passed = checks.iter().all(|c| c.pass);
    diag.checks = checks;
    Ok(Computed {
        ensemble,
        covariance,
        diagnostics: diag,
    })
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn covariance_csv(entries: &[CovarianceEntry]) -> Result<Vec<u8>> {
    let rows = entries.iter().map(|e| {
        vec![
            fmt_f64(e.s),
            fmt_f64(e.t),
            fmt_f64(e.empirical),
            fmt_f64(e.se),
            fmt_f64(e.finite_n_target),
            fmt_f64(e.limit_kernel),
        ]
    });
    csv_bytes(&["s", "t", "empirical", "se", "finite_n_target", "limit_kernel"], rows)
}

/// Runs `f` on a pool with `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidInput(format!("cannot start {t} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Writes files in order and removes every one of them if any write fails.
struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// Runs an experiment and writes its artifacts into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let computed = with_threads(cfg.threads, || compute(cfg))??;
    let threads = cfg.threads.unwrap_or_else(rayon::current_num_threads);

    fs::create_dir_all(out_dir)?;
    let mut out = OutputSet {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    let result = (|| -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        let files: [(&str, Vec<u8>); 3] = [
            ("paths.csv", paths_csv(&computed.ensemble)?),
            ("covariance.csv", covariance_csv(&computed.covariance)?),
            ("diagnostics.json", {
                let mut v = serde_json::to_vec_pretty(&computed.diagnostics)?;
                v.push(b'\n');
                v
            }),
        ];
        for (name, bytes) in &files {
            out.write(name, bytes)?;
            outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        }
        let manifest = RunManifest {
            config: cfg.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            threads,
            outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        out.write("manifest.json", &bytes)?;
        Ok(manifest)
    })();
    match result {
        Ok(manifest) => Ok(RunResult {
            out_dir: out_dir.to_path_buf(),
            files: out.written.clone(),
            diagnostics: computed.diagnostics,
            manifest,
        }),
        Err(e) => {
            out.discard();
            Err(e.in_stage("cli-io"))
        }
    }
}

/// Writes `slices.csv` (`s, t, empirical, limit`) for `s ∈ {¼, ½, ¾}` from
/// the `covariance.csv` of a run directory.
pub fn emit_plot_data(run_dir: &Path) -> Result<PathBuf> {
    let cov_path = run_dir.join("covariance.csv");
    if !cov_path.is_file() {
        return Err(Error::MissingArtifact(cov_path));
    }
    let mut reader = csv::ReaderBuilder::new().from_path(&cov_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("covariance.csv has no column {name}")))
    };
    let (cs, ct, ce, cl) = (col("s")?, col("t")?, col("empirical")?, col("limit_kernel")?);
    let parse = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i]
            .parse::<f64>()
            .map_err(|e| Error::InvalidInput(format!("bad number {:?} in covariance.csv: {e}", &rec[i])))
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let s = parse(&rec, cs)?;
        if FIGURE_TIMES.iter().any(|x| (x - s).abs() < 1e-12) {
            rows.push((s, parse(&rec, ct)?, parse(&rec, ce)?, parse(&rec, cl)?));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let bytes = csv_bytes(
        &["s", "t", "empirical", "limit"],
        rows.into_iter()
            .map(|(s, t, e, l)| vec![fmt_f64(s), fmt_f64(t), fmt_f64(e), fmt_f64(l)]),
    )?;
    let out = run_dir.join("slices.csv");
    fs::write(&out, bytes)?;
    Ok(out)
}

/// Structural hypothesis checks of a config's family and limit kernel,
/// without any simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticChecks {
    pub observable: String,
    pub n: usize,
    pub hypotheses: HypothesisReport,
    pub holder: HolderReport,
    pub kernel: KernelCheck,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheck {
    pub name: String,
    pub positive_type: PositiveTypeReport,
    pub covlip: CovlipReport,
    pub passed: bool,
}

pub fn check_kernel(kernel: &Kernel, grid: &[f64]) -> Result<KernelCheck> {
    let positive_type = positive_type_check(kernel, grid)?;
    let covlip = covlip_check(kernel, grid, None)?;
    Ok(KernelCheck {
        name: kernel.name(),
        passed: positive_type.positive && covlip.pass,
        positive_type,
        covlip,
    })
}

pub fn static_checks(cfg: &ExperimentConfig) -> Result<StaticChecks> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    with_threads(cfg.threads, || -> Result<StaticChecks> {
        let built = build_observable(cfg).map_err(|e| e.in_stage("observables"))?;
        let probe = probe_times();
        let grid = TimeGrid::uniform(cfg.grid.points)?;
        let hypotheses = norm_and_hypothesis_report(&built.family, &probe, HYPOTHESIS_DELTA)?;
        let holder = holder_diagnostic(&built.family, &grid)?;
        let kernel = check_kernel(&built.kernel, &uniform_grid(21)).map_err(|e| e.in_stage("kernels"))?;
        Ok(StaticChecks {
            observable: built.label,
            n: cfg.matrix.n,
            passed: hypotheses.passed() && holder.pass && kernel.passed,
            hypotheses,
            holder,
            kernel,
        })
    })?
}

/// Kernels shipped with the crate, with the parameters used in the guide.
pub fn shipped_kernels() -> Vec<KernelConfig> {
    vec![
        KernelConfig::Bb,
        KernelConfig::Bm,
        KernelConfig::Equiangular { gamma: 0.0 },
        KernelConfig::Equiangular { gamma: 1.0 },
        KernelConfig::Equiangular { gamma: 2.0 },
        KernelConfig::SinPi2,
        KernelConfig::Ou { theta: 2.0, sigma: 1.0 },
        KernelConfig::Fbm { h: 0.2 },
        KernelConfig::Fbm { h: 0.75 },
        KernelConfig::RlFbm { h: 0.2 },
        KernelConfig::RlFbm { h: 0.75 },
    ]
}

/// One row per KL mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlRow {
    pub mode: usize,
    pub lambda: f64,
    pub sup_norm: f64,
}

/// Writes `kl_modes.csv` (`mode, lambda, sup_norm`) and `kl_functions.csv`
/// (`mode, t, psi` on the config grid) for a `kl` observable.
pub fn write_kl_tables(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<KlRow>> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let ObservableConfig::Kl { kernel, .. } = &cfg.observable else {
        return Err(Error::Config(vec![FieldError::new(
            "observable.type",
            "the kl command needs a kl observable",
        )]));
    };
    let modes = cfg.kl_modes().unwrap_or(1);
    let (kl, _) = build_kl(kernel, modes).map_err(|e| e.in_stage("kernels"))?;
    let rows: Vec<KlRow> = kl
        .modes()
        .iter()
        .enumerate()
        .map(|(i, m)| KlRow {
            mode: i + 1,
            lambda: m.lambda,
            sup_norm: m.sup_norm,
        })
        .collect();
    let grid = uniform_grid(cfg.grid.points);
    let modes_csv = csv_bytes(
        &["mode", "lambda", "sup_norm"],
        rows.iter()
            .map(|r| vec![r.mode.to_string(), fmt_f64(r.lambda), fmt_f64(r.sup_norm)]),
    )?;
    let fn_rows = kl.modes().iter().enumerate().flat_map(|(i, m)| {
        grid.iter()
            .map(move |&t| vec![(i + 1).to_string(), fmt_f64(t), fmt_f64(m.psi.eval(t))])
    });
    let functions_csv = csv_bytes(&["mode", "t", "psi"], fn_rows)?;
    fs::create_dir_all(out_dir)?;
    let mut out = OutputSet {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    let res = out
        .write("kl_modes.csv", &modes_csv)
        .and_then(|_| out.write("kl_functions.csv", &functions_csv));
    if let Err(e) = res {
        out.discard();
        return Err(e);
    }
    Ok(rows)
}
