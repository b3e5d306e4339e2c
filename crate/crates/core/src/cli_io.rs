//! Experiment configs, the commands behind the binary, and the files they
//! write. Nothing here prints; callers get strings and paths back.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checks::{
    assess_flow, assess_pnull, assess_pq, assess_single_layer, assess_two_layer, flow_run, identity_suite, lemma1_fuzz,
    CriterionOutcome, IdentityReport, EXPERIMENT_SEEDS,
};
use crate::closed_form::optimal_single_layer;
use crate::error::Error;
use crate::landscape::whiten;
use crate::linalg::Matrix;
use crate::optim::OptimizerConfig;
use crate::sampler::{CovarianceFile, CovarianceSpec, WeightPrior};
use crate::trainer::{
    aggregate_runs, basis_seed, run_configured, single_layer_outcome, ExperimentRun, ExperimentSettings,
    SingleLayerOutcome, DEFAULT_BATCH, DEFAULT_INIT_SCALE, EXPERIMENT_D,
};
use crate::transformer::{Layers, TransformerParams, Variant};

/// How a command failed; each kind has its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable config or weights JSON.
    Parse(String),
    /// Input that parses but breaks a precondition.
    Validation(String),
    Io(String),
    /// Numerical failure during a run.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Io(_) | CliError::Run(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Run(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Json(_) => CliError::Parse(e.to_string()),
            Error::Io(_) => CliError::Io(e.to_string()),
            Error::Divergence(_) | Error::UndefinedMetric(_) | Error::EmptyBatch | Error::Shape(_) => {
                CliError::Run(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SingleLayer,
    Pnull,
    Pq,
    Lemma1Fuzz,
    Flow,
    Identities,
    TwoLayer,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::SingleLayer,
        Experiment::Pnull,
        Experiment::Pq,
        Experiment::Lemma1Fuzz,
        Experiment::Flow,
        Experiment::Identities,
        Experiment::TwoLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SingleLayer => "single-layer",
            Experiment::Pnull => "pnull",
            Experiment::Pq => "pq",
            Experiment::Lemma1Fuzz => "lemma1-fuzz",
            Experiment::Flow => "flow",
            Experiment::Identities => "identities",
            Experiment::TwoLayer => "two-layer",
        }
    }

    fn trains(self) -> bool {
        matches!(
            self,
            Experiment::SingleLayer | Experiment::Pnull | Experiment::Pq | Experiment::TwoLayer
        )
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Parse(format!("unknown experiment {s:?}")))
    }
}

/// A run description as read from JSON. Omitted fields take the
/// experiment's defaults (see [`ExperimentConfig::resolve`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CovarianceFile>,
    /// Draw a fresh Haar basis for every seed, ignoring the spec's basis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_per_seed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    /// Random instances for `lemma1-fuzz` and `identities`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<usize>,
    /// Euler steps for `flow`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            spec: None,
            basis_per_seed: None,
            n: None,
            depth: None,
            batch: None,
            seeds: None,
            optimizer: None,
            init_scale: None,
            cases: None,
            steps: None,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    /// Fills defaults and checks every field against the experiment.
    pub fn resolve(&self) -> CliResult<Plan> {
        let e = self.experiment;
        let d = |entries: &[f64]| CovarianceFile {
            d: entries.len(),
            d_entries: entries.to_vec(),
            u_seed: None,
            u: None,
        };
        let (spec, per_seed, n, depth, batch, seeds, cases, steps): (_, _, _, _, _, Vec<u64>, _, _) = match e {
            Experiment::SingleLayer => (d(&[1.0; 5]), false, 20, 1, DEFAULT_BATCH, vec![0], 0, 0),
            Experiment::Pnull => (
                d(&EXPERIMENT_D),
                true,
                20,
                3,
                DEFAULT_BATCH,
                EXPERIMENT_SEEDS.to_vec(),
                0,
                0,
            ),
            Experiment::Pq => (
                d(&EXPERIMENT_D),
                true,
                10,
                3,
                DEFAULT_BATCH,
                EXPERIMENT_SEEDS.to_vec(),
                0,
                0,
            ),
            Experiment::TwoLayer => (
                d(&[1.0; 3]),
                false,
                10,
                2,
                DEFAULT_BATCH,
                EXPERIMENT_SEEDS.to_vec(),
                0,
                0,
            ),
            Experiment::Flow => (d(&[1.0, 0.6, 1.5]), true, 10, 3, 1 << 14, vec![9], 0, 500),
            Experiment::Lemma1Fuzz => (d(&[1.0]), false, 1, 1, 1, vec![1], 200, 0),
            Experiment::Identities => (d(&[1.0]), false, 1, 1, 1, vec![2], 100, 0),
        };
        let random_instances = matches!(e, Experiment::Lemma1Fuzz | Experiment::Identities);
        if random_instances {
            let fixed = [
                ("spec", self.spec.is_some()),
                ("basis_per_seed", self.basis_per_seed.is_some()),
                ("n", self.n.is_some()),
                ("depth", self.depth.is_some()),
                ("batch", self.batch.is_some()),
            ];
            if let Some((field, _)) = fixed.iter().find(|f| f.1) {
                return Err(invalid(format!("{e} draws random instances; `{field}` does not apply")));
            }
        }
        if !e.trains() && (self.optimizer.is_some() || self.init_scale.is_some()) {
            return Err(invalid(format!(
                "{e} does not train; drop `optimizer` and `init_scale`"
            )));
        }
        if self.cases.is_some() && !random_instances {
            return Err(invalid(format!("`cases` does not apply to {e}")));
        }
        if self.steps.is_some() && e != Experiment::Flow {
            return Err(invalid(format!("`steps` does not apply to {e}")));
        }

        let plan = Plan {
            experiment: e,
            spec: self.spec.clone().unwrap_or(spec),
            basis_per_seed: self.basis_per_seed.unwrap_or(per_seed),
            n: self.n.unwrap_or(n),
            depth: self.depth.unwrap_or(depth),
            seeds: self.seeds.clone().unwrap_or(seeds),
            settings: ExperimentSettings {
                batch: self.batch.unwrap_or(batch),
                init_scale: self.init_scale.unwrap_or(DEFAULT_INIT_SCALE),
                optimizer: self.optimizer.clone().unwrap_or_default(),
            },
            cases: self.cases.unwrap_or(cases),
            steps: self.steps.unwrap_or(steps),
            output: self
                .output
                .clone()
                .unwrap_or_else(|| PathBuf::from("out").join(e.name())),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// A config with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub experiment: Experiment,
    pub spec: CovarianceFile,
    pub basis_per_seed: bool,
    pub n: usize,
    pub depth: usize,
    pub seeds: Vec<u64>,
    pub settings: ExperimentSettings,
    pub cases: usize,
    pub steps: usize,
    pub output: PathBuf,
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub batch: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Plan {
    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(b) = o.batch {
            if matches!(self.experiment, Experiment::Lemma1Fuzz | Experiment::Identities) {
                return Err(invalid(format!("{} has no batch", self.experiment)));
            }
            self.settings.batch = b;
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
        self.validate()
    }

    fn validate(&self) -> CliResult<()> {
        let e = self.experiment;
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.n == 0 || self.depth == 0 || self.settings.batch == 0 {
            return Err(invalid("n, depth and batch must be positive"));
        }
        if matches!(e, Experiment::Lemma1Fuzz | Experiment::Identities) && self.cases == 0 {
            return Err(invalid("cases must be positive"));
        }
        if e == Experiment::Flow && self.steps == 0 {
            return Err(invalid("steps must be positive"));
        }
        if !(self.settings.init_scale > 0.0 && self.settings.init_scale.is_finite()) {
            return Err(invalid("init_scale must be positive and finite"));
        }
        self.settings.optimizer.validate()?;
        match e {
            Experiment::SingleLayer if self.depth != 1 => return Err(invalid("single-layer needs depth 1")),
            Experiment::TwoLayer if self.depth != 2 => return Err(invalid("two-layer needs depth 2")),
            _ => {}
        }
        if e.trains() || e == Experiment::Flow {
            self.spec_for(self.seeds[0])?;
        }
        Ok(())
    }

    pub fn spec_for(&self, seed: u64) -> CliResult<CovarianceSpec<f64>> {
        let mut file = self.spec.clone();
        if self.basis_per_seed {
            file.u = None;
            file.u_seed = Some(basis_seed(seed));
        }
        Ok(file.build()?)
    }

    fn prior(&self) -> WeightPrior {
        match self.experiment {
            Experiment::SingleLayer | Experiment::TwoLayer => WeightPrior::Isotropic,
            _ => WeightPrior::InverseCovariance,
        }
    }

    fn variant(&self) -> Variant {
        match self.experiment {
            Experiment::SingleLayer => Variant::Full,
            Experiment::Pq => Variant::Gdpp,
            _ => Variant::Sparse,
        }
    }
}

/// Trained weights together with the covariance they were fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsEntry {
    pub seed: u64,
    pub spec: CovarianceFile,
    pub params: TransformerParams<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub runs: Vec<WeightsEntry>,
}

/// Written as `summary.json`; free of timings so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub criterion: u8,
    pub passed: bool,
    pub seeds: Vec<u64>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: CriterionOutcome,
    pub files: Vec<PathBuf>,
}

struct Writer {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, rel: impl AsRef<Path>, contents: &str) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, rel: impl AsRef<Path>, value: &impl Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
        self.put(rel, &(text + "\n"))
    }
}

fn weights_entry(run: &ExperimentRun) -> WeightsEntry {
    WeightsEntry {
        seed: run.record.seed,
        spec: CovarianceFile::from_spec(&run.spec),
        params: run.record.final_params.clone(),
    }
}

fn write_training(w: &mut Writer, runs: &[ExperimentRun]) -> CliResult<()> {
    let structured = runs[0].record.final_params.variant() != Variant::Full;
    let gdpp = runs[0].record.final_params.variant() == Variant::Gdpp;
    for run in runs {
        let r = &run.record;
        let dir = PathBuf::from(format!("seed_{}", r.seed));
        w.put(dir.join("loss.csv"), &r.loss_csv())?;
        if structured {
            w.put(dir.join("dist_raw.csv"), &r.dist_raw_csv())?;
            w.put(dir.join("dist_whitened.csv"), &r.dist_whitened_csv())?;
        }
        if gdpp {
            w.put(dir.join("dist_b.csv"), &r.dist_b_csv())?;
        }
        w.json(
            dir.join("weights.json"),
            &WeightsFile {
                runs: vec![weights_entry(run)],
            },
        )?;
        w.json(dir.join("record.json"), r)?;
    }
    let records: Vec<_> = runs.iter().map(|r| r.record.clone()).collect();
    let agg = aggregate_runs(&records)?;
    w.put("loss.csv", &agg.loss_csv())?;
    if structured {
        w.put("dist_raw.csv", &agg.dist_raw_csv())?;
        w.put("dist_whitened.csv", &agg.dist_whitened_csv())?;
    }
    if gdpp {
        w.put("dist_b.csv", &agg.dist_b_csv())?;
    }
    w.json(
        "weights.json",
        &WeightsFile {
            runs: runs.iter().map(weights_entry).collect(),
        },
    )
}

fn train_all(plan: &Plan) -> CliResult<Vec<ExperimentRun>> {
    plan.seeds
        .iter()
        .map(|&s| {
            Ok(run_configured(
                s,
                plan.spec_for(s)?,
                plan.n,
                plan.prior(),
                plan.variant(),
                plan.depth,
                &plan.settings,
            )?)
        })
        .collect()
}

/// Runs the plan, writes its artifacts under `plan.output` and reports the
/// acceptance verdict. Runtime limits are left to the acceptance test so
/// that the written files do not depend on machine speed.
pub fn cmd_run(plan: &Plan) -> CliResult<RunReport> {
    let mut w = Writer::new(&plan.output)?;
    let outcome = match plan.experiment {
        Experiment::SingleLayer => {
            let runs = train_all(plan)?;
            write_training(&mut w, &runs)?;
            let outs: Vec<SingleLayerOutcome> = runs.iter().map(single_layer_outcome).collect::<Result<_, _>>()?;
            w.json("single_layer.json", &outs)?;
            let per: Vec<CriterionOutcome> = outs.iter().map(|o| assess_single_layer(o, None)).collect();
            let mut c = per[0].clone();
            c.passed = per.iter().all(|c| c.passed);
            c.detail = per.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ");
            c
        }
        Experiment::Pnull => {
            let runs = train_all(plan)?;
            write_training(&mut w, &runs)?;
            assess_pnull(&runs, None)
        }
        Experiment::Pq => {
            let runs = train_all(plan)?;
            write_training(&mut w, &runs)?;
            assess_pq(&runs)
        }
        Experiment::TwoLayer => {
            let runs = train_all(plan)?;
            write_training(&mut w, &runs)?;
            assess_two_layer(&runs)?
        }
        Experiment::Flow => {
            let mut per = Vec::new();
            for &s in &plan.seeds {
                let rec = flow_run(
                    &plan.spec_for(s)?,
                    plan.n,
                    plan.depth,
                    plan.steps,
                    plan.settings.batch,
                    s,
                )?;
                w.put(format!("seed_{s}/flow.csv"), &rec.to_csv())?;
                per.push(assess_flow(&rec));
            }
            let mut c = per[0].clone();
            c.passed = per.iter().all(|c| c.passed);
            c.detail = per.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ");
            c
        }
        Experiment::Lemma1Fuzz => {
            let gaps: Vec<f64> = plan
                .seeds
                .iter()
                .map(|&s| lemma1_fuzz(plan.cases as u64, s))
                .collect::<Result<_, _>>()?;
            let worst = gaps.iter().copied().fold(0.0, f64::max);
            w.json("lemma1.json", &gaps)?;
            CriterionOutcome {
                id: 1,
                name: "lemma-1 equivalence".into(),
                passed: worst <= 1e-9,
                detail: format!("max gap {worst:.3e} over {} cases per seed (limit 1e-9)", plan.cases),
                elapsed_s: 0.0,
            }
        }
        Experiment::Identities => {
            let reps: Vec<IdentityReport> = plan
                .seeds
                .iter()
                .map(|&s| identity_suite(plan.cases as u64, s))
                .collect::<Result<_, _>>()?;
            let worst = reps.iter().map(IdentityReport::worst).fold(0.0, f64::max);
            w.json("identities.json", &reps)?;
            CriterionOutcome {
                id: 2,
                name: "per-sample identities".into(),
                passed: worst <= 1e-12,
                detail: format!("worst relative gap {worst:.3e} (limit 1e-12)"),
                elapsed_s: 0.0,
            }
        }
    };
    w.json(
        "summary.json",
        &Summary {
            experiment: plan.experiment,
            criterion: outcome.id,
            passed: outcome.passed,
            seeds: plan.seeds.clone(),
            detail: outcome.detail.clone(),
        },
    )?;
    Ok(RunReport {
        outcome,
        files: w.files,
    })
}

/// Prints `s_i` to six decimals, one per line, and writes `optimum.json`
/// into `out`.
pub fn cmd_closed_form(spec: &CovarianceFile, n: usize, out: &Path) -> CliResult<(String, PathBuf)> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let built: CovarianceSpec<f64> = spec.build()?;
    let opt = optimal_single_layer(&built, n)?;
    let mut text = String::new();
    for s in &opt.s {
        let _ = writeln!(text, "{s:.6}");
    }
    let mut w = Writer::new(out)?;
    w.json("optimum.json", &opt)?;
    Ok((text, w.files.remove(0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    A,
    B,
    P,
    Q,
}

impl std::str::FromStr for MatrixKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "A" | "a" => Ok(MatrixKind::A),
            "B" | "b" => Ok(MatrixKind::B),
            "P" | "p" => Ok(MatrixKind::P),
            "Q" | "q" => Ok(MatrixKind::Q),
            _ => Err(CliError::Parse(format!("unknown matrix {s:?}; expected A, B, P or Q"))),
        }
    }
}

/// A matrix as CSV: a `row,col_0,…` header, then one line per row.
pub fn matrix_csv(m: &Matrix<f64>) -> String {
    let mut out = String::from("row");
    for j in 0..m.cols() {
        let _ = write!(out, ",col_{j}");
    }
    out.push('\n');
    for i in 0..m.rows() {
        let _ = write!(out, "{i}");
        for &x in m.row(i) {
            let _ = write!(out, ",{x:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn load_weights(path: &Path) -> CliResult<WeightsFile> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

/// Picks one matrix out of a weights file; `whitened` conjugates an `A`
/// block by `Σ^{1/2}`.
pub fn heatmap(weights: &WeightsFile, run: usize, layer: usize, kind: MatrixKind, whitened: bool) -> CliResult<String> {
    let entry = weights
        .runs
        .get(run)
        .ok_or_else(|| invalid(format!("run {run} out of range; the file has {}", weights.runs.len())))?;
    let depth = entry.params.depth();
    if layer >= depth {
        return Err(invalid(format!("layer {layer} out of range; the stack has {depth}")));
    }
    let m = match (entry.params.layers(), kind) {
        (Layers::Sparse(ls), MatrixKind::A) => ls[layer].a().clone(),
        (Layers::Gdpp(ls), MatrixKind::A) => ls[layer].a().clone(),
        (Layers::Gdpp(ls), MatrixKind::B) => ls[layer].b().clone(),
        (Layers::Full(ls), MatrixKind::P) => ls[layer].p.clone(),
        (Layers::Full(ls), MatrixKind::Q) => ls[layer].q.clone(),
        (_, k) => {
            return Err(invalid(format!(
                "a {} stack has no {k:?} matrices",
                entry.params.variant()
            )))
        }
    };
    if !whitened {
        return Ok(matrix_csv(&m));
    }
    if kind != MatrixKind::A {
        return Err(invalid("only A blocks can be whitened"));
    }
    Ok(matrix_csv(&whiten(&m, &entry.spec.build()?)?))
}
