//! Project directories: a manifest of checksummed artifacts, the stage
//! graph that gates them, and one method per pipeline stage.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::diagnostics::{self, Summary};
use crate::digest::{derive_seed, sha256_file};
use crate::doe::{self, DesignMatrix, ErrorTable, Metric};
use crate::error::{Error, Result};
use crate::estuary::{ForwardModel, TimeSeries};
use crate::kriging::{self, Basis, Kernel, KrigingConfig, KrigingModel, SurrogateSet};
use crate::metrics::{Aggregate, NashVariant};
use crate::optimize::{
    self, build_objective, Backend, GradientConfig, Nsga2Config, Objective, ObjectiveSpec,
    OptimRun, OptimumCheck, PsoConfig,
};
use crate::parallel::with_workers;
use crate::scenario::Scenario;
use crate::sobol::{self, rank_parameters};

pub const MANIFEST_FILE: &str = "project.json";
pub const PROJECT_ENV: &str = "TIDECAL_PROJECT";
pub const FORMAT_VERSION: u32 = 1;
pub const SOBOL_THRESHOLD: f64 = 0.05;

const SCENARIO_FILE: &str = "scenario.toml";
const OBSERVATIONS_FILE: &str = "observations.csv";
const DESIGN_FILE: &str = "design.csv";
const MODELS_DIR: &str = "models";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    SynthObs,
    Design,
    Evaluate,
    Fit,
    Validate,
    Sobol,
    Pca,
    Stats,
    Calibrate,
    Pareto,
    CheckOptimum,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Init,
        Stage::SynthObs,
        Stage::Design,
        Stage::Evaluate,
        Stage::Fit,
        Stage::Validate,
        Stage::Sobol,
        Stage::Pca,
        Stage::Stats,
        Stage::Calibrate,
        Stage::Pareto,
        Stage::CheckOptimum,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::SynthObs => "synth-obs",
            Stage::Design => "design",
            Stage::Evaluate => "evaluate",
            Stage::Fit => "fit",
            Stage::Validate => "validate",
            Stage::Sobol => "sobol",
            Stage::Pca => "pca",
            Stage::Stats => "stats",
            Stage::Calibrate => "calibrate",
            Stage::Pareto => "pareto",
            Stage::CheckOptimum => "check-optimum",
            Stage::Report => "report",
        }
    }

    /// Direct prerequisites.
    pub fn requires(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Init | Report => &[],
            SynthObs | Design => &[Init],
            Evaluate => &[SynthObs, Design],
            Fit | Pca | Stats => &[Evaluate],
            Validate | Sobol | Calibrate | Pareto => &[Fit],
            CheckOptimum => &[Calibrate],
        }
    }

    /// Transitive prerequisites, nearest first.
    fn ancestors(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut todo = self.requires().to_vec();
        while let Some(s) = todo.pop() {
            if !out.contains(&s) {
                out.push(s);
                todo.extend_from_slice(s.requires());
            }
        }
        out
    }

    /// Stages whose results depend on this one. The report depends on all.
    fn downstream(self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != self && (s.ancestors().contains(&self) || *s == Stage::Report))
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// Checksums of the prerequisite artifacts this stage consumed.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub format_version: u32,
    pub scenario: String,
    pub master_seed: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Keyed by path relative to the project directory.
    pub files: BTreeMap<String, FileRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Pso,
    Grad,
    Both,
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pso" => Ok(Algo::Pso),
            "grad" => Ok(Algo::Grad),
            "both" => Ok(Algo::Both),
            _ => Err(Error::Config(format!(
                "unknown algorithm {s:?} (pso, grad, both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationScore {
    pub station: u32,
    pub mse: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub n_test: usize,
    pub stations: Vec<StationScore>,
    /// Surrogate of the mean RMSE against the forward mean RMSE.
    pub mean_mse: f64,
    pub mean_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolSummary {
    pub n_mc: usize,
    pub seed: u64,
    pub estimator: String,
    pub tolerance: f64,
    pub threshold: f64,
    pub names: Vec<String>,
    pub first: Vec<f64>,
    pub total: Vec<f64>,
    pub significant: Vec<String>,
    pub negligible: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub station_ids: Vec<u32>,
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub station: u32,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoRun {
    pub algo: String,
    pub run: OptimRun,
    pub history_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub goal: ObjectiveSpec,
    pub parameters: Vec<String>,
    pub runs: Vec<AlgoRun>,
    pub best_algo: String,
    pub best_x: Vec<f64>,
    pub best_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontSummary {
    pub objectives: Vec<ObjectiveSpec>,
    pub n_points: usize,
    pub seed: u64,
    pub file: String,
    /// Best value of each objective over the front.
    pub minima: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumRecord {
    pub goal: ObjectiveSpec,
    pub x: Vec<f64>,
    #[serde(flatten)]
    pub check: OptimumCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub master_seed: u64,
    pub completed_stages: Vec<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sobol: Option<SobolSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<QuantileRow>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub calibration: Vec<CalibrationRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub optimum_checks: Vec<OptimumRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fronts: Vec<FrontSummary>,
    /// Artifact path to checksum.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateOptions {
    pub goal: ObjectiveSpec,
    pub algo: Algo,
    pub pso: PsoConfig,
    pub gradient: GradientConfig,
    pub n_starts: usize,
}

impl CalibrateOptions {
    pub fn new(goal: ObjectiveSpec, algo: Algo) -> Self {
        Self {
            goal,
            algo,
            pso: PsoConfig::default(),
            gradient: GradientConfig::default(),
            n_starts: 10,
        }
    }
}

fn slug(spec: &ObjectiveSpec) -> String {
    spec.to_string().replace(':', "-")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

/// `t,<station id>...`, one row per time step.
pub fn write_observations_csv(path: &Path, ids: &[u32], series: &[TimeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(ids.iter().map(u32::to_string));
    w.write_record(&header)?;
    let grid = series[0].grid();
    for (i, t) in grid.times().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(series.iter().map(|s| s.values[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads observations back onto the scenario grid.
pub fn read_observations_csv(path: &Path, model: &ForwardModel) -> Result<Vec<TimeSeries>> {
    let mut r = csv::Reader::from_path(path)?;
    let ids: Vec<u32> = r
        .headers()?
        .iter()
        .skip(1)
        .map(|h| {
            h.parse()
                .map_err(|_| Error::Integrity(format!("bad station column {h:?}")))
        })
        .collect::<Result<_>>()?;
    if ids != model.estuary().station_ids() {
        return Err(Error::Integrity(
            "observation stations differ from the scenario".into(),
        ));
    }
    let grid = model.grid();
    let mut values = vec![Vec::with_capacity(grid.len); ids.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("observations row {i}: bad field {k}")))
        };
        if (parse(0)? - grid.time(i)).abs() > 1e-6 * grid.dt.max(1.0) {
            return Err(Error::Integrity(format!(
                "observations row {i}: time off the scenario grid"
            )));
        }
        for (s, v) in values.iter_mut().enumerate() {
            v.push(parse(s + 1)?);
        }
    }
    if values[0].len() != grid.len {
        return Err(Error::Integrity(
            "observation length differs from the scenario grid".into(),
        ));
    }
    Ok(values
        .into_iter()
        .map(|values| TimeSeries {
            t0: grid.t0,
            dt: grid.dt,
            values,
        })
        .collect())
}

pub struct Project {
    dir: PathBuf,
    manifest: ProjectManifest,
    workers: Option<usize>,
}

impl Project {
    /// Creates (or resets) a project with a scenario. The master seed is
    /// `seed` if given, else the scenario's.
    pub fn init(dir: &Path, scenario: Option<Scenario>, seed: Option<u64>) -> Result<Self> {
        let scenario = scenario.unwrap_or_else(Scenario::default_gironde_analog);
        scenario.validate()?;
        std::fs::create_dir_all(dir)?;
        let master_seed = seed.unwrap_or(scenario.seed);
        scenario.save(&dir.join(SCENARIO_FILE))?;
        let mut project = Project {
            dir: dir.to_path_buf(),
            manifest: ProjectManifest {
                format_version: FORMAT_VERSION,
                scenario: SCENARIO_FILE.into(),
                master_seed,
                stages: BTreeMap::new(),
                files: BTreeMap::new(),
            },
            workers: None,
        };
        project.finish(Stage::Init, &[SCENARIO_FILE.to_string()])?;
        Ok(project)
    }

    /// Opens a project, verifying every registered artifact.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Stage(format!(
                "no project manifest at {}; run `init` first",
                path.display()
            )));
        }
        let manifest: ProjectManifest = read_json(&path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "manifest format {} is not supported",
                manifest.format_version
            )));
        }
        for (rel, rec) in &manifest.files {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::Stage(format!(
                    "registered artifact {rel} is missing"
                )));
            }
            if sha256_file(&p)? != rec.sha256 {
                return Err(Error::Integrity(format!("checksum mismatch for {rel}")));
            }
        }
        Ok(Project {
            dir: dir.to_path_buf(),
            manifest,
            workers: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ProjectManifest {
        &self.manifest
    }

    pub fn master_seed(&self) -> u64 {
        self.manifest.master_seed
    }

    /// Changes the master seed. Stages run under the old seed become stale.
    pub fn set_master_seed(&mut self, seed: u64) -> Result<()> {
        if seed != self.manifest.master_seed {
            self.manifest.master_seed = seed;
            if let Some(rec) = self.manifest.stages.get_mut(&Stage::Init) {
                rec.seed = derive_seed(seed, Stage::Init.name());
            }
            self.save_manifest()?;
        }
        Ok(())
    }

    pub fn set_workers(&mut self, workers: Option<usize>) -> Result<()> {
        if workers == Some(0) {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        self.workers = workers;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.manifest.master_seed, stage.name())
    }

    fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.manifest.master_seed, label)
    }

    /// Complete and consistent with the current seed and its inputs.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.check_current(stage).is_ok()
    }

    fn check_current(&self, stage: Stage) -> Result<()> {
        let rec = self
            .manifest
            .stages
            .get(&stage)
            .ok_or_else(|| Error::Stage(format!("stage `{stage}` has not been run")))?;
        if rec.seed != self.stage_seed(stage) {
            return Err(Error::Stage(format!(
                "stage `{stage}` was run under a different master seed; rerun it"
            )));
        }
        for (rel, sha) in &rec.inputs {
            match self.manifest.files.get(rel) {
                Some(f) if &f.sha256 == sha => {}
                _ => {
                    return Err(Error::Stage(format!(
                        "stage `{stage}` is stale: input {rel} changed; rerun it"
                    )))
                }
            }
        }
        Ok(())
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for p in stage.ancestors() {
            self.check_current(p).map_err(|e| match e {
                Error::Stage(msg) => Error::Stage(format!("`{stage}` requires `{p}`: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn files_of(&self, stage: Stage) -> Vec<String> {
        self.manifest
            .files
            .iter()
            .filter(|(_, f)| f.stage == stage)
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn save_manifest(&self) -> Result<()> {
        let tmp = self.path(&format!("{MANIFEST_FILE}.tmp"));
        write_json(&tmp, &self.manifest)?;
        std::fs::rename(tmp, self.path(MANIFEST_FILE))?;
        Ok(())
    }

    /// Checks prerequisites, then drops every downstream stage and the
    /// stage's own artifacts selected by `replace`.
    fn begin(&mut self, stage: Stage, replace: impl Fn(&str) -> bool) -> Result<()> {
        self.require(stage)?;
        for s in stage.downstream() {
            self.manifest.stages.remove(&s);
            self.manifest.files.retain(|_, f| f.stage != s);
        }
        self.manifest.stages.remove(&stage);
        self.manifest
            .files
            .retain(|k, f| f.stage != stage || !replace(k));
        self.save_manifest()
    }

    fn finish(&mut self, stage: Stage, outputs: &[String]) -> Result<()> {
        for rel in outputs {
            let sha256 = sha256_file(&self.path(rel))?;
            self.manifest
                .files
                .insert(rel.clone(), FileRecord { sha256, stage });
        }
        let mut inputs = BTreeMap::new();
        for p in stage.requires() {
            for rel in self.files_of(*p) {
                inputs.insert(rel.clone(), self.manifest.files[&rel].sha256.clone());
            }
        }
        self.manifest.stages.insert(
            stage,
            StageRecord {
                seed: self.stage_seed(stage),
                inputs,
            },
        );
        self.save_manifest()
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        with_workers(self.workers, f)?
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::load(&self.path(&self.manifest.scenario))
    }

    fn forward_model(&self) -> Result<(Scenario, ForwardModel)> {
        let s = self.scenario()?;
        let model = ForwardModel::new(s.estuary(), s.grid()?)?;
        Ok((s, model))
    }

    pub fn observations(&self, model: &ForwardModel) -> Result<Vec<TimeSeries>> {
        read_observations_csv(&self.path(OBSERVATIONS_FILE), model)
    }

    pub fn design_matrix(&self) -> Result<DesignMatrix> {
        DesignMatrix::read_csv(&self.path(DESIGN_FILE), self.scenario()?.bounds()?)
    }

    pub fn error_table(&self, metric: Metric) -> Result<ErrorTable> {
        ErrorTable::read_csv(
            &self.path(&table_file(metric)),
            self.scenario()?.bounds()?,
            metric,
        )
    }

    pub fn surrogates(&self) -> Result<SurrogateSet> {
        SurrogateSet::load(&self.path(MODELS_DIR))
    }

    pub fn synth_obs(&mut self) -> Result<()> {
        self.begin(Stage::SynthObs, |_| true)?;
        let (s, model) = self.forward_model()?;
        let seed = self.stage_seed(Stage::SynthObs);
        let obs = model.synthesize_observations(&s.truth, s.noise_sigma, seed)?;
        write_observations_csv(
            &self.path(OBSERVATIONS_FILE),
            &model.estuary().station_ids(),
            &obs,
        )?;
        self.finish(Stage::SynthObs, &[OBSERVATIONS_FILE.into()])
    }

    /// Latin hypercube over the scenario bounds; `n` defaults to ten per
    /// parameter.
    pub fn design(&mut self, n: Option<usize>) -> Result<usize> {
        if n == Some(0) {
            return Err(Error::Config("--n must be at least 1".into()));
        }
        self.require(Stage::Design)?;
        let bounds = self.scenario()?.bounds()?;
        let n = match n {
            Some(n) => n,
            None => doe::default_design_size(bounds.dim())?,
        };
        self.begin(Stage::Design, |_| true)?;
        let design = doe::lhs_sample(n, &bounds, self.stage_seed(Stage::Design))?;
        design.write_csv(&self.path(DESIGN_FILE))?;
        self.finish(Stage::Design, &[DESIGN_FILE.into()])?;
        Ok(n)
    }

    pub fn evaluate(&mut self) -> Result<()> {
        self.begin(Stage::Evaluate, |_| true)?;
        let (_, model) = self.forward_model()?;
        let obs = self.observations(&model)?;
        let design = self.design_matrix()?;
        let tables =
            self.run(|| doe::evaluate_design_all(&design, &model, &obs, NashVariant::default()))?;
        let mut outputs = Vec::new();
        for table in [&tables.rmse, &tables.bias, &tables.nash] {
            let rel = table_file(table.metric);
            table.write_csv(&self.path(&rel))?;
            outputs.push(rel);
        }
        self.finish(Stage::Evaluate, &outputs)
    }

    pub fn fit(&mut self, kernel: Kernel, basis: Basis) -> Result<()> {
        self.begin(Stage::Fit, |_| true)?;
        let table = self.error_table(Metric::Rmse)?;
        let config = KrigingConfig {
            kernel,
            basis,
            seed: self.stage_seed(Stage::Fit),
            ..Default::default()
        };
        let set = self.run(|| SurrogateSet::fit(&table, &config))?;
        let dir = self.path(MODELS_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let saved = set.save(&dir)?;
        let mut outputs = vec![format!("{MODELS_DIR}/{}", kriging::MODEL_MANIFEST)];
        outputs.extend(
            saved
                .models
                .iter()
                .map(|m| format!("{MODELS_DIR}/{}", m.file)),
        );
        self.finish(Stage::Fit, &outputs)
    }

    /// Held-out check of every station model and of the mean-RMSE surrogate.
    pub fn validate(&mut self, n_test: usize) -> Result<ValidationSummary> {
        if n_test < 2 {
            return Err(Error::Config("--n-test must be at least 2".into()));
        }
        self.begin(Stage::Validate, |_| true)?;
        let (s, model) = self.forward_model()?;
        let obs = self.observations(&model)?;
        let set = self.surrogates()?;
        let test_design = doe::lhs_sample(n_test, &s.bounds()?, self.stage_seed(Stage::Validate))?;
        let test = self.run(|| doe::evaluate_design(&test_design, &model, &obs))?;
        test.write_csv(&self.path("validation_points.csv"))?;

        let mut w = csv::Writer::from_path(self.path("validation.csv"))?;
        w.write_record(["point", "station", "predicted", "actual"])?;
        let mut stations = Vec::new();
        for (k, id) in set.station_ids.iter().enumerate() {
            let r = kriging::validate(&set.models[k], &test, k)?;
            for (i, (x, row)) in test.design.points.iter().zip(&test.responses).enumerate() {
                let p = set.models[k].predict_mean(x);
                w.write_record([
                    i.to_string(),
                    id.to_string(),
                    p.to_string(),
                    row[k].to_string(),
                ])?;
            }
            stations.push(StationScore {
                station: *id,
                mse: r.mse,
                r2: r.r2,
            });
        }
        let predicted: Vec<f64> = test
            .design
            .points
            .iter()
            .map(|x| set.predict_aggregate(x, Aggregate::Mean))
            .collect();
        let actual: Vec<f64> = test
            .responses
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect();
        for (i, (p, a)) in predicted.iter().zip(&actual).enumerate() {
            w.write_record([i.to_string(), "mean".into(), p.to_string(), a.to_string()])?;
        }
        w.flush()?;
        let mean = kriging::validation_report(&predicted, &actual)?;
        let summary = ValidationSummary {
            n_test,
            stations,
            mean_mse: mean.mse,
            mean_r2: mean.r2,
        };
        write_json(&self.path("validation.json"), &summary)?;
        self.finish(
            Stage::Validate,
            &[
                "validation_points.csv".into(),
                "validation.csv".into(),
                "validation.json".into(),
            ],
        )?;
        Ok(summary)
    }

    /// Sobol indices of the surrogate mean RMSE.
    pub fn sobol(&mut self, n_mc: usize, second_order: bool) -> Result<SobolSummary> {
        self.begin(Stage::Sobol, |_| true)?;
        let set = self.surrogates()?;
        let seed = self.stage_seed(Stage::Sobol);
        let result = self.run(|| {
            sobol::sobol_indices(
                |x| set.predict_aggregate(x, Aggregate::Mean),
                set.bounds(),
                n_mc,
                seed,
                second_order,
            )
        })?;
        result.write_csv(&self.path("sobol.csv"))?;
        let ranking = rank_parameters(&result, SOBOL_THRESHOLD);
        let summary = SobolSummary {
            n_mc,
            seed,
            estimator: result.estimator.clone(),
            tolerance: sobol::mc_tolerance(n_mc),
            threshold: SOBOL_THRESHOLD,
            names: result.names.clone(),
            first: result.first.clone(),
            total: result.total.clone(),
            significant: ranking.significant.iter().map(|p| p.name.clone()).collect(),
            negligible: ranking.negligible.iter().map(|p| p.name.clone()).collect(),
        };
        write_json(&self.path("sobol.json"), &summary)?;
        self.finish(Stage::Sobol, &["sobol.csv".into(), "sobol.json".into()])?;
        Ok(summary)
    }

    pub fn pca(&mut self) -> Result<PcaSummary> {
        self.begin(Stage::Pca, |_| true)?;
        let table = self.error_table(Metric::Rmse)?;
        let result = diagnostics::pca(&table)?;
        result.write_explained_csv(&self.path("pca_explained.csv"))?;
        result.write_circle_csv(&self.path("pca_circle.csv"))?;
        let summary = PcaSummary {
            station_ids: result.station_ids.clone(),
            eigenvalues: result.eigenvalues.clone(),
            explained_ratio: result.explained_ratio.clone(),
        };
        write_json(&self.path("pca.json"), &summary)?;
        self.finish(
            Stage::Pca,
            &[
                "pca_explained.csv".into(),
                "pca_circle.csv".into(),
                "pca.json".into(),
            ],
        )?;
        Ok(summary)
    }

    pub fn stats(&mut self) -> Result<Vec<QuantileRow>> {
        self.begin(Stage::Stats, |_| true)?;
        let table = self.error_table(Metric::Rmse)?;
        let stats = diagnostics::summary_stats(&table)?;
        diagnostics::write_quantiles_csv(&stats, &self.path("quantiles.csv"))?;
        diagnostics::write_scatter_csv(&table, &self.path("scatter.csv"))?;
        let rows: Vec<QuantileRow> = stats
            .into_iter()
            .map(|(station, summary)| QuantileRow { station, summary })
            .collect();
        write_json(&self.path("stats.json"), &rows)?;
        self.finish(
            Stage::Stats,
            &[
                "quantiles.csv".into(),
                "scatter.csv".into(),
                "stats.json".into(),
            ],
        )?;
        Ok(rows)
    }

    /// Minimizes an RMSE goal on the surrogates. Station goals also start
    /// from the mean-goal optimum when one is on record.
    pub fn calibrate(&mut self, opts: &CalibrateOptions) -> Result<CalibrationRecord> {
        if matches!(
            opts.goal,
            ObjectiveSpec::AbsBias(_) | ObjectiveSpec::NegNash(_)
        ) {
            return Err(Error::Config(
                "calibration goals are mean, std, max or station:<id>".into(),
            ));
        }
        let goal_slug = slug(&opts.goal);
        let prefix = format!("calibration/{goal_slug}");
        self.require(Stage::Calibrate)?;
        let warm = match opts.goal {
            ObjectiveSpec::StationRmse(_) if self.is_current(Stage::Calibrate) => {
                let p = self.path("calibration/mean.json");
                if self.manifest.files.contains_key("calibration/mean.json") {
                    Some(read_json::<CalibrationRecord>(&p)?.best_x)
                } else {
                    None
                }
            }
            _ => None,
        };
        // Other goals' results survive; their inputs are unchanged.
        let keep_others = self.is_current(Stage::Calibrate);
        self.begin(Stage::Calibrate, |k| {
            !keep_others
                || k.starts_with(&format!("{prefix}."))
                || k.starts_with(&format!("{prefix}_"))
        })?;
        std::fs::create_dir_all(self.path("calibration"))?;

        let set = self.surrogates()?;
        let objective = build_objective(
            opts.goal,
            Backend::Surrogate {
                rmse: &set,
                bias: None,
                nash: None,
            },
        )?;
        let bounds = set.bounds().clone();
        let mut runs = Vec::new();
        if matches!(opts.algo, Algo::Pso | Algo::Both) {
            let cfg = PsoConfig {
                seed: self.sub_seed(&format!("calibrate:{}:pso", opts.goal)),
                ..opts.pso.clone()
            };
            let run = self.run(|| optimize::pso_minimize(&objective, &bounds, &cfg))?;
            runs.push(("pso", run));
        }
        if matches!(opts.algo, Algo::Grad | Algo::Both) {
            let cfg = GradientConfig {
                seed: self.sub_seed(&format!("calibrate:{}:grad", opts.goal)),
                ..opts.gradient.clone()
            };
            let extra: Vec<Vec<f64>> = warm.into_iter().collect();
            let run = self.run(|| {
                optimize::multistart_gradient(&objective, &bounds, opts.n_starts, &extra, &cfg)
            })?;
            runs.push(("grad", run));
        }
        let mut outputs = Vec::new();
        let mut algo_runs = Vec::new();
        for (algo, run) in runs {
            let history_file = format!("{prefix}_{algo}_history.csv");
            run.write_history_csv(&self.path(&history_file))?;
            outputs.push(history_file.clone());
            algo_runs.push(AlgoRun {
                algo: algo.into(),
                run,
                history_file,
            });
        }
        let best = algo_runs.iter().fold(&algo_runs[0], |b, r| {
            if r.run.best_f < b.run.best_f {
                r
            } else {
                b
            }
        });
        let record = CalibrationRecord {
            goal: opts.goal,
            parameters: doe::column_names(bounds.dim()),
            best_algo: best.algo.clone(),
            best_x: best.run.best_x.clone(),
            best_f: best.run.best_f,
            runs: algo_runs.clone(),
        };
        let rel = format!("{prefix}.json");
        write_json(&self.path(&rel), &record)?;
        outputs.push(rel);
        self.finish(Stage::Calibrate, &outputs)?;
        Ok(record)
    }

    /// NSGA-II front on surrogate objectives. Bias and Nash objectives get
    /// kriging models of those metrics fitted on the spot from the
    /// evaluated design.
    pub fn pareto(
        &mut self,
        objectives: &[ObjectiveSpec],
        config: &Nsga2Config,
    ) -> Result<FrontSummary> {
        if !(2..=3).contains(&objectives.len()) {
            return Err(Error::Config(
                "--objectives takes two or three specs".into(),
            ));
        }
        let name = objectives.iter().map(slug).collect::<Vec<_>>().join("__");
        let prefix = format!("fronts/{name}");
        self.require(Stage::Pareto)?;
        let keep_others = self.is_current(Stage::Pareto);
        self.begin(Stage::Pareto, |k| {
            !keep_others || k.starts_with(&format!("{prefix}."))
        })?;
        std::fs::create_dir_all(self.path("fronts"))?;

        let set = self.surrogates()?;
        let label = objectives
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let aux = |metric: Metric| -> Result<Option<SurrogateSet>> {
            let ids: Vec<u32> = objectives
                .iter()
                .filter(|o| match metric {
                    Metric::Bias => matches!(o, ObjectiveSpec::AbsBias(_)),
                    _ => matches!(o, ObjectiveSpec::NegNash(_)),
                })
                .filter_map(|o| o.station())
                .collect();
            if ids.is_empty() {
                return Ok(None);
            }
            let table = self.error_table(metric)?;
            let config = KrigingConfig {
                seed: self.sub_seed(&format!("pareto:{}", metric.column_prefix())),
                ..set.config.clone()
            };
            let mut station_ids = Vec::new();
            let mut models = Vec::new();
            for id in ids {
                if station_ids.contains(&id) {
                    continue;
                }
                let k = table
                    .station_ids
                    .iter()
                    .position(|s| *s == id)
                    .ok_or_else(|| Error::Config(format!("unknown station {id}")))?;
                models.push(self.run(|| KrigingModel::fit(&table, k, &config))?);
                station_ids.push(id);
            }
            Ok(Some(SurrogateSet {
                station_ids,
                models,
                config,
            }))
        };
        let bias = aux(Metric::Bias)?;
        let nash = aux(Metric::Nash)?;
        let backend = Backend::Surrogate {
            rmse: &set,
            bias: bias.as_ref(),
            nash: nash.as_ref(),
        };
        let built: Vec<_> = objectives
            .iter()
            .map(|o| build_objective(*o, backend))
            .collect::<Result<_>>()?;
        let refs: Vec<&dyn Objective> = built.iter().map(|b| b as &dyn Objective).collect();
        let names: Vec<String> = objectives.iter().map(|o| o.to_string()).collect();
        let cfg = Nsga2Config {
            seed: self.sub_seed(&format!("pareto:{label}")),
            ..config.clone()
        };
        let front = self.run(|| optimize::nsga2(&refs, &names, set.bounds(), &cfg))?;
        if !front.is_mutually_nondominated() {
            return Err(Error::Evaluation(
                "front failed the pairwise nondominance check".into(),
            ));
        }
        let file = format!("{prefix}.csv");
        front.write_csv(&self.path(&file))?;
        let minima = (0..objectives.len())
            .map(|m| {
                front
                    .points
                    .iter()
                    .map(|p| p.f[m])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let summary = FrontSummary {
            objectives: objectives.to_vec(),
            n_points: front.points.len(),
            seed: cfg.seed,
            file: file.clone(),
            minima,
        };
        let rel = format!("{prefix}.json");
        write_json(&self.path(&rel), &summary)?;
        self.finish(Stage::Pareto, &[file, rel])?;
        Ok(summary)
    }

    /// Re-evaluates every calibrated optimum with the forward model.
    pub fn check_optimum(&mut self, tolerance: f64) -> Result<Vec<OptimumRecord>> {
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(Error::Config("--tolerance must be positive".into()));
        }
        self.begin(Stage::CheckOptimum, |_| true)?;
        let (_, model) = self.forward_model()?;
        let obs = self.observations(&model)?;
        let set = self.surrogates()?;
        let mut records = Vec::new();
        for rel in self
            .files_of(Stage::Calibrate)
            .iter()
            .filter(|k| k.ends_with(".json"))
        {
            let cal: CalibrationRecord = read_json(&self.path(rel))?;
            let sur = build_objective(
                cal.goal,
                Backend::Surrogate {
                    rmse: &set,
                    bias: None,
                    nash: None,
                },
            )?;
            let fwd = build_objective(
                cal.goal,
                Backend::Forward {
                    model: &model,
                    observations: &obs,
                    nash: NashVariant::default(),
                },
            )?;
            let check =
                optimize::validate_optimum(&cal.best_x, set.bounds(), &sur, &fwd, tolerance)?;
            records.push(OptimumRecord {
                goal: cal.goal,
                x: cal.best_x,
                check,
            });
        }
        let mut w = csv::Writer::from_path(self.path("optimum_check.csv"))?;
        w.write_record(["goal", "f_hat", "f_true", "rel_gap", "passed"])?;
        for r in &records {
            w.write_record([
                r.goal.to_string(),
                r.check.f_hat.to_string(),
                r.check.f_true.to_string(),
                r.check.rel_gap.to_string(),
                r.check.passed.to_string(),
            ])?;
        }
        w.flush()?;
        write_json(&self.path("optimum_check.json"), &records)?;
        self.finish(
            Stage::CheckOptimum,
            &["optimum_check.csv".into(), "optimum_check.json".into()],
        )?;
        Ok(records)
    }

    /// Gathers every current stage summary into `report.json`.
    pub fn report(&mut self) -> Result<Report> {
        let completed: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|s| !matches!(s, Stage::Init | Stage::Report) && self.is_current(*s))
            .collect();
        if completed.is_empty() {
            return Err(Error::Stage(
                "nothing to report; run at least one stage after `init`".into(),
            ));
        }
        self.begin(Stage::Report, |_| true)?;
        let has = |s: Stage| completed.contains(&s);
        let load = |rel: &str| -> Result<serde_json::Value> { read_json(&self.path(rel)) };
        let mut calibration = Vec::new();
        let mut fronts = Vec::new();
        for rel in self.manifest.files.keys().filter(|k| k.ends_with(".json")) {
            if has(Stage::Calibrate) && rel.starts_with("calibration/") {
                calibration.push(read_json(&self.path(rel))?);
            }
            if has(Stage::Pareto) && rel.starts_with("fronts/") {
                fronts.push(read_json(&self.path(rel))?);
            }
        }
        let report = Report {
            master_seed: self.manifest.master_seed,
            completed_stages: completed.clone(),
            validation: if has(Stage::Validate) {
                Some(serde_json::from_value(load("validation.json")?)?)
            } else {
                None
            },
            sobol: if has(Stage::Sobol) {
                Some(serde_json::from_value(load("sobol.json")?)?)
            } else {
                None
            },
            pca: if has(Stage::Pca) {
                Some(serde_json::from_value(load("pca.json")?)?)
            } else {
                None
            },
            quantiles: if has(Stage::Stats) {
                Some(serde_json::from_value(load("stats.json")?)?)
            } else {
                None
            },
            calibration,
            optimum_checks: if has(Stage::CheckOptimum) {
                serde_json::from_value(load("optimum_check.json")?)?
            } else {
                Vec::new()
            },
            fronts,
            artifacts: self
                .manifest
                .files
                .iter()
                .map(|(k, f)| (k.clone(), f.sha256.clone()))
                .collect(),
        };
        write_json(&self.path("report.json"), &report)?;
        self.finish(Stage::Report, &["report.json".into()])?;
        Ok(report)
    }
}

fn table_file(metric: Metric) -> String {
    match metric {
        Metric::Rmse => "errors_rmse.csv",
        Metric::Bias => "errors_bias.csv",
        Metric::Nash => "errors_nash.csv",
    }
    .into()
}
