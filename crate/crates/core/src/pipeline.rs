//! Declarative experiment pipeline: generate → pod → assemble → corrections
//! → train → solve → evaluate → report, with content-hash stage caching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closure::{
    compute_exact_corrections, exact_corrections, project_blocks, read_dataset, write_dataset, CorrectionOptions,
    CorrectionVariant, FeatureSet, QuadraticAnsatz,
};
use crate::error::{Error, Result};
use crate::grid::StructuredGrid2D;
use crate::metrics::{
    ensemble_error_band, error_series, evaluation_times, projection_series, write_series_csv, write_series_dat,
    ErrorSeries, Summary,
};
use crate::neural::{read_ensemble, write_ensemble, write_loss_csv, Architecture, Band, BandKind, Ensemble, TrainConfig};
use crate::operators::{assemble_enriched, read_operators, write_operators, Bases, BoundaryConditions, DirichletBoundary, EnrichedOperators};
use crate::pod::{compute_pod_from_set, read_basis, write_basis, PodMethod};
use crate::snapshots::{
    generate_synthetic_wake, generate_taylor_green, read_snapshots, write_snapshots, FieldKind, ParameterGrid,
    SampleSet, Smagorinsky, SnapshotSet, WakeConfig,
};
use crate::solver::{
    read_trajectory_csv, solve, write_trajectory_csv, ClosureCoupling, ClosureHooks, Outcome, RomMode, RomState,
    SolverConfig, TableClosure, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    TaylorGreen,
    SyntheticWake,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

/// Pre-computed snapshot files for the `external` case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesConfig {
    pub r: usize,
    pub q: usize,
    /// Eddy-viscosity modes; defaults to `r`.
    pub n_nut: Option<usize>,
    /// Enriched velocity dimension; defaults to `2r`.
    pub d: Option<usize>,
    /// Enriched pressure dimension; defaults to `2q`.
    pub h: Option<usize>,
    #[serde(default)]
    pub pod_method: PodMethod,
}

impl ModesConfig {
    pub fn n_nut(&self) -> usize {
        self.n_nut.unwrap_or(self.r)
    }

    pub fn d(&self) -> usize {
        self.d.unwrap_or(2 * self.r)
    }

    pub fn h(&self) -> usize {
        self.h.unwrap_or(2 * self.q)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub dirichlet: Vec<DirichletBoundary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub penalty: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub blowup_limit: f64,
    pub condition_threshold: f64,
    pub correct_initial_pressure: bool,
    pub coupling: ClosureCoupling,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            penalty: s.penalty,
            newton_tol: s.newton_tol,
            newton_max_iter: s.newton_max_iter,
            blowup_limit: s.blowup_limit,
            condition_threshold: s.condition_threshold,
            correct_initial_pressure: s.correct_initial_pressure,
            coupling: ClosureCoupling::Implicit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionsSection {
    pub variant: CorrectionVariant,
    pub include_turbulence: bool,
    /// Also fit the quadratic ansatz and store it.
    pub fit_ansatz: bool,
}

impl Default for CorrectionsSection {
    fn default() -> Self {
        Self {
            variant: CorrectionVariant::FullOperator,
            include_turbulence: true,
            fit_ansatz: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub features: FeatureSet,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosuresSection {
    /// ROM variants solved online.
    pub modes: Vec<RomMode>,
    /// Also solve with exact corrections computed from the test snapshots.
    pub exact: bool,
    /// Solve every ensemble member separately for the error band.
    pub member_trajectories: bool,
    pub eddy_viscosity: NetworkConfig,
    pub correction: NetworkConfig,
}

impl Default for ClosuresSection {
    fn default() -> Self {
        Self {
            modes: vec![RomMode::Standard, RomMode::Hybrid],
            exact: true,
            member_trajectories: true,
            eddy_viscosity: NetworkConfig {
                architecture: Architecture::eddy_viscosity_default(),
                features: FeatureSet::default(),
                train: TrainConfig::default(),
            },
            correction: NetworkConfig {
                architecture: Architecture::correction_default(),
                features: FeatureSet {
                    a: true,
                    b: true,
                    log_nu: true,
                    t: false,
                },
                train: TrainConfig {
                    epochs: 6000,
                    ..TrainConfig::default()
                },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_networks: usize,
    pub seed: u64,
    pub band: BandKind,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_networks: 10,
            seed: 0,
            band: BandKind::Conventional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: Case,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub parameters: ParameterGrid,
    pub modes: ModesConfig,
    #[serde(default)]
    pub wake: WakeConfig,
    #[serde(default)]
    pub smagorinsky: Smagorinsky,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub corrections: CorrectionsSection,
    #[serde(default)]
    pub closures: ClosuresSection,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        Ok(cfg)
    }

    /// Reads a TOML config; a relative `output_dir` and external snapshot
    /// paths are taken relative to the file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&s)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(ext) = &mut cfg.external {
            if ext.train.is_relative() {
                ext.train = base.join(&ext.train);
            }
            if ext.test.is_relative() {
                ext.test = base.join(&ext.test);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn grid(&self) -> Result<StructuredGrid2D> {
        StructuredGrid2D::new(self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.parameters.validate()?;
        if self.parameters.nu_test.is_empty() {
            return Err(Error::config("parameters.nu_test: at least one test viscosity is needed"));
        }
        self.reference_samples()?;
        let m = &self.modes;
        if m.r == 0 || m.q == 0 {
            return Err(Error::config("modes.r and modes.q must be at least 1"));
        }
        if m.d() < m.r {
            return Err(Error::config(format!("modes.d = {} must be ≥ modes.r = {}", m.d(), m.r)));
        }
        if m.h() < m.q {
            return Err(Error::config(format!("modes.h = {} must be ≥ modes.q = {}", m.h(), m.q)));
        }
        if self.case == Case::External {
            let ext = self
                .external
                .as_ref()
                .ok_or_else(|| Error::config("external: case `external` needs [external] train/test paths"))?;
            for (name, p) in [("external.train", &ext.train), ("external.test", &ext.test)] {
                if !p.exists() {
                    return Err(Error::config(format!("{name}: file {} does not exist", p.display())));
                }
            }
        }
        let needs_nets = self.closures.modes.iter().any(|m| *m != RomMode::Standard);
        if needs_nets && self.ensemble.n_networks == 0 {
            return Err(Error::config("ensemble.n_networks must be at least 1"));
        }
        if self.closures.modes.iter().any(|m| m.uses_eddy_viscosity()) && m.n_nut() == 0 {
            return Err(Error::config("modes.n_nut must be ≥ 1 for physics or hybrid closures"));
        }
        self.closures.eddy_viscosity.architecture.validate()?;
        self.closures.correction.architecture.validate()?;
        self.closures.eddy_viscosity.train.validate()?;
        self.closures.correction.train.validate()?;
        self.solver_config()?.validate()?;
        Ok(())
    }

    /// Test viscosities over the online window at the snapshot spacing.
    pub fn reference_samples(&self) -> Result<SampleSet> {
        let p = &self.parameters;
        let n = (p.t_online[1] - p.t_online[0]) / p.dt_offline;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::config("parameters.t_online must span a whole number of dt_offline steps"));
        }
        Ok(SampleSet {
            nus: p.nu_test.clone(),
            t0: p.t_online[0],
            dt: p.dt_offline,
            n_t: n.round() as usize + 1,
        })
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let p = &self.parameters;
        let n = (p.t_online[1] - p.t_online[0]) / p.dt_online;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::config("parameters.t_online must span a whole number of dt_online steps"));
        }
        let s = &self.solver;
        Ok(SolverConfig {
            dt: p.dt_online,
            n_steps: n.round() as usize,
            penalty: s.penalty,
            newton_tol: s.newton_tol,
            newton_max_iter: s.newton_max_iter,
            blowup_limit: s.blowup_limit,
            condition_threshold: s.condition_threshold,
            correct_initial_pressure: s.correct_initial_pressure,
        })
    }

    fn boundary_conditions(&self) -> BoundaryConditions {
        BoundaryConditions {
            dirichlet: self.boundary.dirichlet.clone(),
            pressure_flux: None,
        }
    }

    fn correction_options(&self) -> CorrectionOptions {
        CorrectionOptions {
            variant: self.corrections.variant,
            include_turbulence: self.corrections.include_turbulence,
            penalty: self.solver.penalty,
        }
    }

    fn needs_eddy_viscosity_model(&self) -> bool {
        self.closures.modes.iter().any(|m| m.uses_eddy_viscosity())
    }

    fn needs_correction_model(&self) -> bool {
        self.closures.modes.iter().any(|m| m.uses_correction())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Pod,
    Assemble,
    Corrections,
    Train,
    Solve,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Pod,
        Stage::Assemble,
        Stage::Corrections,
        Stage::Train,
        Stage::Solve,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Pod => "pod",
            Stage::Assemble => "assemble",
            Stage::Corrections => "corrections",
            Stage::Train => "train",
            Stage::Solve => "solve",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Reused,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub hash: String,
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a stage's own settings chained with its upstream stage hash.
fn stage_hash<T: Serialize>(stage: Stage, upstream: Option<&str>, settings: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update([0]);
    if let Some(u) = upstream {
        h.update(u.as_bytes());
    }
    h.update([0]);
    h.update(serde_json::to_vec(settings)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Output layout of a run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_snapshots(&self) -> PathBuf {
        self.root.join("snapshots/train.snap")
    }
    pub fn test_snapshots(&self) -> PathBuf {
        self.root.join("snapshots/test.snap")
    }
    pub fn basis(&self, kind: FieldKind) -> PathBuf {
        self.root.join(format!("pod/{}.pod", kind.name()))
    }
    pub fn singular_values(&self) -> PathBuf {
        self.root.join("pod/singular_values.csv")
    }
    pub fn reduced_operators(&self) -> PathBuf {
        self.root.join("operators/reduced.ops")
    }
    pub fn enriched_operators(&self) -> PathBuf {
        self.root.join("operators/enriched.ops")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("corrections/dataset.csv")
    }
    pub fn ansatz(&self) -> PathBuf {
        self.root.join("corrections/ansatz.json")
    }
    pub fn models(&self, which: &str) -> PathBuf {
        self.root.join(format!("models/{which}"))
    }
    pub fn trajectory(&self, label: &str, nu_index: usize) -> PathBuf {
        self.root.join(format!("trajectories/nu{nu_index}_{label}.csv"))
    }
    pub fn series_json(&self) -> PathBuf {
        self.root.join("evaluate/series.json")
    }
    pub fn series_csv(&self, nu_index: usize, field: FieldKind) -> PathBuf {
        self.root.join(format!("evaluate/nu{nu_index}_{}.csv", field.name()))
    }
    pub fn summary_json(&self) -> PathBuf {
        self.root.join("report/summary.json")
    }
    pub fn summary_table(&self) -> PathBuf {
        self.root.join("report/summary.txt")
    }
    pub fn report_dat(&self, nu_index: usize, field: FieldKind) -> PathBuf {
        self.root.join(format!("report/nu{nu_index}_{}.dat", field.name()))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Series of one test viscosity and its ensemble bands, as stored by the
/// evaluate stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub series: Vec<ErrorSeries>,
    pub bands: Vec<BandRecord>,
    pub outcomes: Vec<OutcomeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRecord {
    pub nu: f64,
    pub field: FieldKind,
    pub label: String,
    pub times: Vec<f64>,
    pub band: Band,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub nu: f64,
    pub label: String,
    pub blow_up: bool,
    pub steps_completed: usize,
    #[serde(with = "crate::metrics::lossless_f64")]
    pub max_condition: f64,
}

/// Runs every stage up to and including `through`, reusing cached stages.
pub fn run_pipeline(cfg: &RunConfig, through: Stage) -> Result<Manifest> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output_dir);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let previous = Manifest::read(paths.manifest()).ok();
    // the output location does not affect any numbers
    let config_hash = stage_hash(
        Stage::Generate,
        None,
        &RunConfig {
            output_dir: PathBuf::new(),
            ..cfg.clone()
        },
    )?;
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        seeds: seeds(cfg),
        stages: Vec::new(),
    };
    let mut upstream: Option<String> = None;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= through) {
        let hash = stage_hash(stage, upstream.as_deref(), &stage_settings(cfg, stage)?)?;
        let cached = previous
            .as_ref()
            .and_then(|m| m.stage(stage))
            .filter(|r| r.hash == hash && r.status != StageStatus::Failed)
            .filter(|r| {
                r.artifacts
                    .iter()
                    .all(|a| file_hash(&paths.root.join(&a.path)).is_ok_and(|h| h == a.sha256))
            });
        let record = match cached {
            Some(r) => StageRecord {
                status: StageStatus::Reused,
                ..r.clone()
            },
            None => match run_stage(cfg, &paths, stage) {
                Ok(files) => StageRecord {
                    stage,
                    hash: hash.clone(),
                    status: StageStatus::Completed,
                    artifacts: files
                        .iter()
                        .map(|p| {
                            Ok(Artifact {
                                path: p
                                    .strip_prefix(&paths.root)
                                    .unwrap_or(p)
                                    .to_string_lossy()
                                    .replace('\\', "/"),
                                sha256: file_hash(p)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    message: None,
                },
                Err(e) => {
                    manifest.stages.push(StageRecord {
                        stage,
                        hash,
                        status: StageStatus::Failed,
                        artifacts: vec![],
                        message: Some(e.to_string()),
                    });
                    manifest.write(&paths.manifest())?;
                    return Err(Error::Stage {
                        stage: stage.name().into(),
                        message: e.to_string(),
                    });
                }
            },
        };
        manifest.stages.push(record);
        upstream = Some(hash);
    }
    manifest.write(&paths.manifest())?;
    Ok(manifest)
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.ensemble.n_networks as u64).map(|i| cfg.ensemble.seed + i).collect()
}

/// Config fields each stage depends on (beyond its upstream stage).
fn stage_settings(cfg: &RunConfig, stage: Stage) -> Result<serde_json::Value> {
    let p = &cfg.parameters;
    Ok(match stage {
        Stage::Generate => {
            let external = match &cfg.external {
                Some(e) if cfg.case == Case::External => Some((file_hash(&e.train)?, file_hash(&e.test)?)),
                _ => None,
            };
            serde_json::json!({
                "case": cfg.case,
                "grid": cfg.grid,
                "t_offline": p.t_offline,
                "t_online": p.t_online,
                "dt_offline": p.dt_offline,
                "nu_train": p.nu_train,
                "nu_test": p.nu_test,
                "wake": cfg.wake,
                "smagorinsky": cfg.smagorinsky,
                "external": external,
            })
        }
        Stage::Pod => serde_json::json!({
            "d": cfg.modes.d(), "h": cfg.modes.h(), "n_nut": cfg.modes.n_nut(),
            "method": cfg.modes.pod_method,
        }),
        Stage::Assemble => serde_json::json!({
            "r": cfg.modes.r, "q": cfg.modes.q, "boundary": cfg.boundary,
        }),
        Stage::Corrections => serde_json::json!({
            "corrections": cfg.corrections, "penalty": cfg.solver.penalty,
        }),
        Stage::Train => serde_json::json!({
            "modes": cfg.closures.modes,
            "eddy_viscosity": cfg.closures.eddy_viscosity,
            "correction": cfg.closures.correction,
            "ensemble": cfg.ensemble,
        }),
        Stage::Solve => serde_json::json!({
            "solver": cfg.solver,
            "dt_online": p.dt_online,
            "exact": cfg.closures.exact,
            "member_trajectories": cfg.closures.member_trajectories,
        }),
        Stage::Evaluate => serde_json::json!({ "band": cfg.ensemble.band }),
        Stage::Report => serde_json::json!({}),
    })
}

fn run_stage(cfg: &RunConfig, paths: &RunPaths, stage: Stage) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Generate => stage_generate(cfg, paths),
        Stage::Pod => stage_pod(cfg, paths),
        Stage::Assemble => stage_assemble(cfg, paths),
        Stage::Corrections => stage_corrections(cfg, paths),
        Stage::Train => stage_train(cfg, paths),
        Stage::Solve => stage_solve(cfg, paths),
        Stage::Evaluate => stage_evaluate(cfg, paths),
        Stage::Report => stage_report(cfg, paths),
    }
}

/// Training and reference snapshot sets of a config.
pub fn generate_snapshots(cfg: &RunConfig) -> Result<(SnapshotSet, SnapshotSet)> {
    let grid = cfg.grid()?;
    let train = cfg.parameters.offline()?;
    let test = cfg.reference_samples()?;
    match cfg.case {
        Case::TaylorGreen => Ok((
            generate_taylor_green(grid, &train, &cfg.smagorinsky)?,
            generate_taylor_green(grid, &test, &cfg.smagorinsky)?,
        )),
        Case::SyntheticWake => Ok((
            generate_synthetic_wake(grid, &train, &cfg.wake, &cfg.smagorinsky)?,
            generate_synthetic_wake(grid, &test, &cfg.wake, &cfg.smagorinsky)?,
        )),
        Case::External => {
            let ext = cfg.external.as_ref().ok_or_else(|| Error::config("missing [external] section"))?;
            let tr = read_snapshots(&ext.train)?;
            let te = read_snapshots(&ext.test)?;
            tr.grid().check_same(te.grid())?;
            Ok((tr, te))
        }
    }
}

fn stage_generate(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let (train, test) = generate_snapshots(cfg)?;
    let (a, b) = (paths.train_snapshots(), paths.test_snapshots());
    ensure_parent(&a)?;
    write_snapshots(&train, &a)?;
    write_snapshots(&test, &b)?;
    Ok(vec![a, b])
}

fn stage_pod(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let set = read_snapshots(paths.train_snapshots())?;
    let m = &cfg.modes;
    let mut out = Vec::new();
    let mut sv = String::from("field,index,sigma\n");
    for (kind, n) in [
        (FieldKind::Velocity, m.d()),
        (FieldKind::Pressure, m.h()),
        (FieldKind::EddyViscosity, m.n_nut()),
    ] {
        if n == 0 {
            continue;
        }
        let basis = compute_pod_from_set(&set, kind, n, m.pod_method)?;
        if basis.n_modes() < n {
            return Err(Error::dim(format!(
                "{} snapshots have rank {}, {n} modes requested",
                kind.name(),
                basis.n_modes()
            )));
        }
        for (i, s) in basis.singular_values().iter().enumerate() {
            sv.push_str(&format!("{},{},{:?}\n", kind.name(), i + 1, s));
        }
        let p = paths.basis(kind);
        ensure_parent(&p)?;
        write_basis(&basis, &p)?;
        out.push(p);
    }
    fs::write(paths.singular_values(), sv).map_err(|e| Error::io(paths.singular_values(), e))?;
    out.push(paths.singular_values());
    Ok(out)
}

fn load_bases(cfg: &RunConfig, paths: &RunPaths) -> Result<(crate::pod::PodBasis, crate::pod::PodBasis, Option<crate::pod::PodBasis>)> {
    let u = read_basis(paths.basis(FieldKind::Velocity))?;
    let p = read_basis(paths.basis(FieldKind::Pressure))?;
    let nut = if cfg.modes.n_nut() > 0 {
        Some(read_basis(paths.basis(FieldKind::EddyViscosity))?)
    } else {
        None
    };
    Ok((u, p, nut))
}

fn stage_assemble(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let (u, p, nut) = load_bases(cfg, paths)?;
    let m = &cfg.modes;
    let bases = Bases {
        velocity: &u,
        pressure: &p,
        eddy_viscosity: nut.as_ref(),
    };
    let ops = assemble_enriched(bases, m.r, m.q, m.d(), m.h(), m.n_nut(), &cfg.boundary_conditions())?;
    let (a, b) = (paths.reduced_operators(), paths.enriched_operators());
    ensure_parent(&a)?;
    write_operators(&ops.reduced, &a)?;
    write_operators(&ops.enriched, &b)?;
    Ok(vec![a, b])
}

fn load_operators(paths: &RunPaths) -> Result<EnrichedOperators> {
    Ok(EnrichedOperators {
        reduced: read_operators(paths.reduced_operators())?,
        enriched: read_operators(paths.enriched_operators())?,
    })
}

fn stage_corrections(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let set = read_snapshots(paths.train_snapshots())?;
    let (u, p, nut) = load_bases(cfg, paths)?;
    let ops = load_operators(paths)?;
    let ds = compute_exact_corrections(&set, &u, &p, nut.as_ref(), &ops, &cfg.correction_options())?;
    let path = paths.dataset();
    ensure_parent(&path)?;
    write_dataset(&ds, &path)?;
    let mut out = vec![path.clone(), crate::closure::scaler_sidecar_path(&path)];
    if cfg.corrections.fit_ansatz {
        let ansatz = QuadraticAnsatz::fit_dataset(&ds)?;
        fs::write(paths.ansatz(), serde_json::to_string_pretty(&ansatz)?).map_err(|e| Error::io(paths.ansatz(), e))?;
        out.push(paths.ansatz());
    }
    Ok(out)
}

fn stage_train(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let ds = read_dataset(paths.dataset())?;
    let (r, q) = (ds.r, ds.q);
    let mut out = Vec::new();
    let e = &cfg.ensemble;
    let jobs: Vec<(&str, &NetworkConfig, u64, bool)> = vec![
        ("eddy_viscosity", &cfg.closures.eddy_viscosity, e.seed, cfg.needs_eddy_viscosity_model()),
        ("correction", &cfg.closures.correction, e.seed + 10_000, cfg.needs_correction_model()),
    ];
    for (name, net, seed, needed) in jobs {
        if !needed {
            continue;
        }
        let ts = if name == "eddy_viscosity" {
            ds.eddy_viscosity_training_set(net.features)?
        } else {
            ds.training_set(net.features)
        };
        let (ens, histories) = Ensemble::fit(&ts, &net.architecture, net.features, r, q, &net.train, e.n_networks, seed)?;
        let dir = paths.models(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        }
        write_ensemble(&ens, &dir)?;
        for (i, h) in histories.iter().enumerate() {
            let lp = dir.join(format!("loss_{i:02}.csv"));
            write_loss_csv(h, &lp)?;
            out.push(lp);
        }
        for i in 0..ens.len() {
            out.push(dir.join(format!("member_{i:02}.model")));
        }
    }
    Ok(out)
}

/// Runs the solver, turning a Newton failure into a blow-up outcome so a
/// sweep over viscosities and closures always completes. The steps before
/// the failure are recovered by re-running up to the failed level.
pub fn solve_or_report(
    initial: &RomState,
    ops: &crate::operators::ReducedOperators,
    hooks: &ClosureHooks,
    nu: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    match solve(initial, ops, hooks, nu, cfg) {
        Ok(t) => Ok(t),
        Err(Error::StepFailure {
            step,
            t,
            residual,
            iterations,
            state,
        }) => {
            let xn = state.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let reason = format!(
                "Newton did not converge ({iterations} iterations, residual {residual:.3e}, state norm {xn:.3e})"
            );
            let mut traj = if step >= 2 {
                let partial = SolverConfig {
                    n_steps: step - 1,
                    ..cfg.clone()
                };
                solve(initial, ops, hooks, nu, &partial)?
            } else {
                Trajectory {
                    nu,
                    mode: hooks.mode,
                    states: vec![initial.clone()],
                    newton_iters: vec![0],
                    residual_norms: vec![0.0],
                    max_condition: f64::NAN,
                    ill_conditioned: false,
                    roundoff_limited_steps: 0,
                    outcome: Outcome::Completed,
                }
            };
            if traj.is_blowup() {
                return Ok(traj);
            }
            let last_state = traj.states.last().cloned().unwrap_or_else(|| initial.clone());
            traj.outcome = Outcome::BlowUp {
                step,
                t,
                reason,
                last_state,
            };
            Ok(traj)
        }
        Err(e) => Err(e),
    }
}

/// Labels and hooks of every online solve for one viscosity.
struct SolveJob {
    label: String,
    hooks: ClosureHooks,
}

fn stage_solve(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let test = read_snapshots(paths.test_snapshots())?;
    let (u, p, nut) = load_bases(cfg, paths)?;
    let ops = load_operators(paths)?;
    let red = &ops.reduced;
    let (r, q, n_nut) = (red.r(), red.q(), red.n_nut());
    let scfg = cfg.solver_config()?;
    let g_ens = if cfg.needs_eddy_viscosity_model() {
        Some(Arc::new(read_ensemble(paths.models("eddy_viscosity"))?))
    } else {
        None
    };
    let m_ens = if cfg.needs_correction_model() {
        Some(Arc::new(read_ensemble(paths.models("correction"))?))
    } else {
        None
    };
    let blocks = project_blocks(&test, &u, &p, nut.as_ref(), r, q, n_nut)?;
    let coupling = cfg.solver.coupling;
    let mut out = Vec::new();
    for (m, block) in blocks.iter().enumerate() {
        let initial = RomState {
            t: block.times[0],
            a: block.a[0].clone(),
            b: block.b[0].clone(),
        };
        let mut jobs = Vec::new();
        for &mode in &cfg.closures.modes {
            let mean = ClosureHooks {
                mode,
                eddy_viscosity: g_ens.clone().filter(|_| mode.uses_eddy_viscosity()).map(|e| e as _),
                correction: m_ens.clone().filter(|_| mode.uses_correction()).map(|e| e as _),
                coupling,
            };
            jobs.push(SolveJob {
                label: mode.name().to_string(),
                hooks: mean,
            });
            if cfg.closures.member_trajectories && mode != RomMode::Standard {
                for i in 0..cfg.ensemble.n_networks {
                    let g = g_ens
                        .as_ref()
                        .filter(|_| mode.uses_eddy_viscosity())
                        .map(|e| Arc::new(e.members[i].clone()) as _);
                    let c = m_ens
                        .as_ref()
                        .filter(|_| mode.uses_correction())
                        .map(|e| Arc::new(e.members[i].clone()) as _);
                    jobs.push(SolveJob {
                        label: format!("{}_member{i:02}", mode.name()),
                        hooks: ClosureHooks {
                            mode,
                            eddy_viscosity: g,
                            correction: c,
                            coupling,
                        },
                    });
                }
            }
        }
        if cfg.closures.exact {
            if let Some(job) = exact_job(cfg, &ops, &test, &u, &p, nut.as_ref(), m, &scfg)? {
                jobs.push(job);
            }
        }
        let trajectories = jobs
            .iter()
            .map(|j| solve_or_report(&initial, red, &j.hooks, block.nu, &scfg))
            .collect::<Result<Vec<_>>>()?;
        for (job, traj) in jobs.iter().zip(&trajectories) {
            let path = paths.trajectory(&job.label, m);
            write_trajectory_csv(traj, &path)?;
            out.push(path.clone());
            let side = crate::solver::blowup_sidecar_path(&path);
            if side.exists() {
                out.push(side);
            }
        }
    }
    Ok(out)
}

/// Snapshot-referenced corrections of the reference data, looked up by
/// time level; only possible when the ROM steps on the snapshot grid.
#[allow(clippy::too_many_arguments)]
fn exact_job(
    cfg: &RunConfig,
    ops: &EnrichedOperators,
    test: &SnapshotSet,
    u: &crate::pod::PodBasis,
    p: &crate::pod::PodBasis,
    nut: Option<&crate::pod::PodBasis>,
    m: usize,
    scfg: &SolverConfig,
) -> Result<Option<SolveJob>> {
    if (cfg.parameters.dt_online - test.dt()).abs() > 1e-9 * test.dt() {
        return Ok(None);
    }
    let red = &ops.reduced;
    let turbulent = cfg.corrections.include_turbulence && red.turbulence.is_some();
    let blocks = project_blocks(test, u, p, nut, red.r(), red.q(), if turbulent { red.n_nut() } else { 0 })?;
    let block = &blocks[m];
    let opts = CorrectionOptions {
        variant: CorrectionVariant::SnapshotReferenced,
        include_turbulence: turbulent,
        penalty: scfg.penalty,
    };
    let tau = exact_corrections(ops, block, &opts)?;
    let hooks = if turbulent {
        ClosureHooks {
            mode: RomMode::Hybrid,
            eddy_viscosity: Some(Arc::new(TableClosure::new(block.g.clone().unwrap_or_default())?)),
            correction: Some(Arc::new(TableClosure::new(tau)?)),
            coupling: ClosureCoupling::Lagged,
        }
    } else {
        ClosureHooks {
            mode: RomMode::Purely,
            eddy_viscosity: None,
            correction: Some(Arc::new(TableClosure::new(tau)?)),
            coupling: ClosureCoupling::Lagged,
        }
    };
    Ok(Some(SolveJob {
        label: "exact".into(),
        hooks,
    }))
}

/// Trajectory labels present for one viscosity index, in a stable order.
fn trajectory_labels(cfg: &RunConfig) -> Vec<String> {
    let mut labels = Vec::new();
    for &mode in &cfg.closures.modes {
        labels.push(mode.name().to_string());
        if cfg.closures.member_trajectories && mode != RomMode::Standard {
            for i in 0..cfg.ensemble.n_networks {
                labels.push(format!("{}_member{i:02}", mode.name()));
            }
        }
    }
    if cfg.closures.exact {
        labels.push("exact".into());
    }
    labels
}

fn stage_evaluate(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let test = read_snapshots(paths.test_snapshots())?;
    let (u, p, _) = load_bases(cfg, paths)?;
    let (r, q) = (cfg.modes.r, cfg.modes.q);
    let u = u.truncated(r)?;
    let p = p.truncated(q)?;
    let scfg = cfg.solver_config()?;
    let t0 = cfg.parameters.t_online[0];
    let times = evaluation_times(&test, t0, cfg.parameters.t_online[1], scfg.dt);
    let mut eval = Evaluation {
        series: vec![],
        bands: vec![],
        outcomes: vec![],
    };
    let mut out = Vec::new();
    for (m, &nu) in cfg.parameters.nu_test.iter().enumerate() {
        let mut trajectories: BTreeMap<String, Vec<RomState>> = BTreeMap::new();
        for label in trajectory_labels(cfg) {
            let path = paths.trajectory(&label, m);
            if !path.exists() {
                continue;
            }
            let states = read_trajectory_csv(&path)?;
            let side = crate::solver::blowup_sidecar_path(&path);
            let (blow_up, max_condition) = if side.exists() {
                let s = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
                let v: serde_json::Value = serde_json::from_str(&s)?;
                (true, v["max_condition"].as_f64().unwrap_or(f64::NAN))
            } else {
                (false, f64::NAN)
            };
            eval.outcomes.push(OutcomeRecord {
                nu,
                label: label.clone(),
                blow_up,
                steps_completed: states.len().saturating_sub(1),
                max_condition,
            });
            trajectories.insert(label, states);
        }
        for (basis, n) in [(&u, r), (&p, q)] {
            let field = basis.kind();
            let mut series = vec![projection_series(basis, &test, nu, n, &times)?];
            for label in trajectory_labels(cfg) {
                if let Some(states) = trajectories.get(&label) {
                    series.push(error_series(states, basis, &test, nu, &times, &label)?);
                }
            }
            for &mode in &cfg.closures.modes {
                let prefix = format!("{}_member", mode.name());
                let members: Vec<ErrorSeries> = series.iter().filter(|s| s.label.starts_with(&prefix)).cloned().collect();
                if members.is_empty() {
                    continue;
                }
                let (mean, band) = ensemble_error_band(&members, cfg.ensemble.band)?;
                let label = format!("{}_members", mode.name());
                eval.bands.push(BandRecord {
                    nu,
                    field,
                    label: label.clone(),
                    times: times.clone(),
                    band: band.clone(),
                });
                series.push(ErrorSeries { label, ..mean });
            }
            let path = paths.series_csv(m, field);
            ensure_parent(&path)?;
            write_series_csv(&series, &path)?;
            out.push(path);
            eval.series.extend(series);
        }
    }
    let path = paths.series_json();
    fs::write(&path, serde_json::to_string(&eval)?).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(out)
}

/// Reads the evaluate stage output of a run directory.
pub fn read_evaluation(root: impl AsRef<Path>) -> Result<Evaluation> {
    let path = RunPaths::new(root.as_ref()).series_json();
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn stage_report(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let eval = read_evaluation(&paths.root)?;
    let summary = Summary::new(&eval.series);
    let (js, txt) = (paths.summary_json(), paths.summary_table());
    ensure_parent(&js)?;
    summary.write_json(&js)?;
    let headline: Vec<ErrorSeries> = eval.series.iter().filter(|s| !s.label.contains("_member")).cloned().collect();
    let mut table = Summary::new(&headline).table();
    for o in &eval.outcomes {
        if o.blow_up {
            table.push_str(&format!("# blow-up: nu = {:.4e}, {} after {} steps\n", o.nu, o.label, o.steps_completed));
        }
    }
    fs::write(&txt, table).map_err(|e| Error::io(&txt, e))?;
    let mut out = vec![js, txt];
    for (m, &nu) in cfg.parameters.nu_test.iter().enumerate() {
        for field in [FieldKind::Velocity, FieldKind::Pressure] {
            let series: Vec<ErrorSeries> = eval
                .series
                .iter()
                .filter(|s| s.nu == nu && s.field == field && !s.label.contains("_member"))
                .cloned()
                .collect();
            if series.is_empty() {
                continue;
            }
            let path = paths.report_dat(m, field);
            write_series_dat(&series, &path)?;
            out.push(path);
        }
    }
    Ok(out)
}
