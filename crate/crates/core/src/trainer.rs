//! Fixed-batch training runs and the desk-scale experiments built on them.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::closed_form::optimal_single_layer;
use crate::error::{Error, Result};
use crate::landscape::{dist_to_identity, whitened_dist};
use crate::linalg::Matrix;
use crate::loss::{loss_and_grad, single_layer_loss, single_layer_reduce, Batch};
use crate::optim::{minimize, OptimizerConfig, Termination};
use crate::rng::{derive_seed, RngStream};
use crate::sampler::{make_covariance, Basis, CovarianceSpec, WeightPrior};
use crate::scalar::Scalar;
use crate::transformer::{Layers, TransformerParams, Variant};

/// Diagonal of `D` in `Σ = Uᵀ D² U` for the anisotropic experiments.
pub const EXPERIMENT_D: [f64; 5] = [1.0, 1.0, 0.5, 0.25, 1.0];
pub const DEFAULT_BATCH: usize = 1 << 16;
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// Seed tags, so that each random object of an experiment has its own stream.
const TAG_BASIS: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_INIT: u64 = 3;

/// Every free matrix gets i.i.d. `N(0, scale²/d)` entries; `A` blocks are
/// then symmetrized.
pub fn init_params<T: Scalar>(
    variant: Variant,
    d: usize,
    depth: usize,
    scale: T,
    rng: RngStream,
) -> Result<TransformerParams<T>> {
    if !(scale > T::zero()) {
        return Err(Error::Config(format!("init scale must be positive, got {scale}")));
    }
    let mut g = rng.generator();
    let sd = scale / T::from_count(d.max(1)).sqrt();
    let mut draw = |m: usize| Matrix::from_vec(m, m, g.normals::<T>(m * m)).scale(sd);
    match variant {
        Variant::Sparse => TransformerParams::sparse((0..depth).map(|_| draw(d).symmetrized()).collect()),
        Variant::Gdpp => TransformerParams::gdpp(
            (0..depth)
                .map(|_| {
                    let a = draw(d).symmetrized();
                    (a, draw(d))
                })
                .collect(),
        ),
        Variant::Full => TransformerParams::full((0..depth).map(|_| (draw(d + 1), draw(d + 1))).collect()),
    }
}

/// History of one training run. The iteration index is the position in
/// each per-iteration vector; index 0 is the initial state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunRecord<T: Scalar> {
    pub seed: u64,
    pub loss: Vec<T>,
    pub grad_norm: Vec<T>,
    /// `Dist(A_i, I)` per iteration and layer (structured stacks only).
    pub dist_raw: Vec<Vec<T>>,
    /// `Dist(Σ^{1/2} A_i Σ^{1/2}, I)`; empty without a covariance.
    pub dist_whitened: Vec<Vec<T>>,
    /// `Dist(B_i, I)` for every GD++ layer but the last.
    pub dist_b: Vec<Vec<T>>,
    pub final_params: TransformerParams<T>,
    pub termination: Termination,
    /// The line search gave up; `final_params` is the best iterate seen.
    pub failed: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl<T: Scalar> PartialEq for RunRecord<T> {
    /// Everything except the wall time.
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.loss == other.loss
            && self.grad_norm == other.grad_norm
            && self.dist_raw == other.dist_raw
            && self.dist_whitened == other.dist_whitened
            && self.dist_b == other.dist_b
            && self.final_params == other.final_params
            && self.termination == other.termination
            && self.failed == other.failed
    }
}

fn series_csv<T: Scalar>(head: &[String], rows: &[Vec<T>]) -> String {
    let mut out = String::from("iter");
    for h in head {
        let _ = write!(out, ",{h}");
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let _ = write!(out, "{i}");
        for x in row {
            let _ = write!(out, ",{:.16e}", x.as_f64());
        }
        out.push('\n');
    }
    out
}

impl<T: Scalar> RunRecord<T> {
    pub fn initial_loss(&self) -> T {
        self.loss[0]
    }

    pub fn final_loss(&self) -> T {
        *self.loss.last().expect("records hold the initial state")
    }

    pub fn iterations(&self) -> usize {
        self.loss.len() - 1
    }

    pub fn loss_csv(&self) -> String {
        let rows: Vec<Vec<T>> = self
            .loss
            .iter()
            .zip(&self.grad_norm)
            .map(|(&l, &g)| vec![l, g])
            .collect();
        series_csv(&["loss".into(), "grad_norm".into()], &rows)
    }

    fn layer_csv(rows: &[Vec<T>], prefix: &str) -> String {
        let k = rows.first().map_or(0, Vec::len);
        series_csv(&(0..k).map(|i| format!("{prefix}_{i}")).collect::<Vec<_>>(), rows)
    }

    pub fn dist_raw_csv(&self) -> String {
        Self::layer_csv(&self.dist_raw, "A")
    }

    pub fn dist_whitened_csv(&self) -> String {
        Self::layer_csv(&self.dist_whitened, "A")
    }

    pub fn dist_b_csv(&self) -> String {
        Self::layer_csv(&self.dist_b, "B")
    }

    /// Last row of a per-layer series.
    pub fn final_row(series: &[Vec<T>]) -> Vec<T> {
        series.last().cloned().unwrap_or_default()
    }
}

fn dist_or_nan<T: Scalar>(r: Result<T>) -> T {
    r.unwrap_or_else(|_| T::nan())
}

struct Diagnostics<T> {
    raw: Vec<T>,
    whitened: Vec<T>,
    b: Vec<T>,
}

fn diagnostics<T: Scalar>(params: &TransformerParams<T>, spec: Option<&CovarianceSpec<T>>) -> Diagnostics<T> {
    let a = params.a_matrices().unwrap_or_default();
    let raw = a.iter().map(|m| dist_or_nan(dist_to_identity(m))).collect();
    let whitened = match spec {
        Some(s) => a.iter().map(|m| dist_or_nan(whitened_dist(m, s))).collect(),
        None => Vec::new(),
    };
    let b = match params.b_matrices() {
        Some(bs) => bs[..bs.len().saturating_sub(1)]
            .iter()
            .map(|m| dist_or_nan(dist_to_identity(m)))
            .collect(),
        None => Vec::new(),
    };
    Diagnostics { raw, whitened, b }
}

/// Minimizes the fixed-batch loss from `params`. Dist diagnostics are
/// whitened with `spec` when given.
pub fn train_with_spec<T: Scalar>(
    params: &TransformerParams<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    spec: Option<&CovarianceSpec<T>>,
    seed: u64,
) -> Result<RunRecord<T>> {
    let start = Instant::now();
    let mut rec = RunRecord {
        seed,
        loss: Vec::new(),
        grad_norm: Vec::new(),
        dist_raw: Vec::new(),
        dist_whitened: Vec::new(),
        dist_b: Vec::new(),
        final_params: params.clone(),
        termination: Termination::MaxIters,
        failed: false,
        wall_time_s: 0.0,
    };
    let objective = |x: &[T]| -> Result<(T, Vec<T>)> {
        let p = params.unflatten(x)?;
        let (l, g) = loss_and_grad(&p, batch)?;
        Ok((l, g.flatten()))
    };
    let mut observe_err = None;
    let min = minimize(params.flatten(), objective, config, |st| {
        rec.loss.push(st.f);
        rec.grad_norm.push(st.grad_norm);
        match params.unflatten(st.x) {
            Ok(p) => {
                let dg = diagnostics(&p, spec);
                rec.dist_raw.push(dg.raw);
                rec.dist_whitened.push(dg.whitened);
                rec.dist_b.push(dg.b);
            }
            Err(e) => observe_err = Some(e),
        }
    })?;
    if let Some(e) = observe_err {
        return Err(e);
    }
    if rec.dist_raw.iter().all(Vec::is_empty) {
        rec.dist_raw.clear();
    }
    if rec.dist_whitened.iter().all(Vec::is_empty) {
        rec.dist_whitened.clear();
    }
    if rec.dist_b.iter().all(Vec::is_empty) {
        rec.dist_b.clear();
    }
    rec.final_params = params.unflatten(&min.x)?;
    rec.termination = min.termination;
    rec.failed = min.termination == Termination::LineSearchFailed;
    rec.wall_time_s = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// [`train_with_spec`] using the covariance recorded in the batch manifest.
pub fn train<T: Scalar>(
    params: &TransformerParams<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
) -> Result<RunRecord<T>> {
    let spec = batch.manifest().map(|m| m.spec.build::<T>()).transpose()?;
    let seed = batch.manifest().map_or(0, |m| m.seed);
    train_with_spec(params, batch, config, spec.as_ref(), seed)
}

/// Knobs shared by the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub batch: usize,
    pub init_scale: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            batch: DEFAULT_BATCH,
            init_scale: DEFAULT_INIT_SCALE,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Output of one experiment seed: the run plus the covariance it used.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub record: RunRecord<f64>,
    pub spec: CovarianceSpec<f64>,
    pub batch: Batch<f64>,
}

/// Seed of the Haar basis an experiment draws for run `seed`.
pub fn basis_seed(seed: u64) -> u64 {
    derive_seed(seed, TAG_BASIS)
}

/// `Σ = Uᵀ D² U` with [`EXPERIMENT_D`] and a Haar basis drawn from `seed`.
pub fn anisotropic_spec(seed: u64) -> Result<CovarianceSpec<f64>> {
    make_covariance(EXPERIMENT_D.len(), &EXPERIMENT_D, Basis::Haar(basis_seed(seed)))
}

/// Samples the batch and initial point for `seed` and trains.
pub fn run_configured(
    seed: u64,
    spec: CovarianceSpec<f64>,
    n: usize,
    prior: WeightPrior,
    variant: Variant,
    depth: usize,
    settings: &ExperimentSettings,
) -> Result<ExperimentRun> {
    let batch = Batch::sample(&spec, n, prior, derive_seed(seed, TAG_BATCH), settings.batch)?;
    let init = init_params(
        variant,
        spec.dim(),
        depth,
        settings.init_scale,
        RngStream::new(derive_seed(seed, TAG_INIT), 0),
    )?;
    let record = train_with_spec(&init, &batch, &settings.optimizer, Some(&spec), seed)?;
    Ok(ExperimentRun { record, spec, batch })
}

/// Three sparse layers, `d = 5`, `n = 20`, anisotropic covariates with a
/// fresh basis per seed, `w★ ~ N(0, Σ⁻¹)`.
pub fn run_experiment_pnull_with(seed: u64, settings: &ExperimentSettings) -> Result<ExperimentRun> {
    run_configured(
        seed,
        anisotropic_spec(seed)?,
        20,
        WeightPrior::InverseCovariance,
        Variant::Sparse,
        3,
        settings,
    )
}

pub fn run_experiment_pnull(seed: u64) -> Result<RunRecord<f64>> {
    Ok(run_experiment_pnull_with(seed, &ExperimentSettings::default())?.record)
}

/// Three GD++ layers, `d = 5`, `n = 10`, same covariance family as pnull.
/// The last `B` never influences the prediction, so it stays at its
/// initial value.
pub fn run_experiment_pq_with(seed: u64, settings: &ExperimentSettings) -> Result<ExperimentRun> {
    run_configured(
        seed,
        anisotropic_spec(seed)?,
        10,
        WeightPrior::InverseCovariance,
        Variant::Gdpp,
        3,
        settings,
    )
}

pub fn run_experiment_pq(seed: u64) -> Result<RunRecord<f64>> {
    Ok(run_experiment_pq_with(seed, &ExperimentSettings::default())?.record)
}

/// Two sparse layers on isotropic data (`d = 3`, `n = 10`).
pub fn run_two_layer_isotropic_with(seed: u64, settings: &ExperimentSettings) -> Result<ExperimentRun> {
    run_configured(
        seed,
        CovarianceSpec::isotropic(3)?,
        10,
        WeightPrior::Isotropic,
        Variant::Sparse,
        2,
        settings,
    )
}

/// Outcome of fitting one unconstrained layer against the closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleLayerOutcome {
    /// `‖b ⊗ A − b* ⊗ A*‖_F / ‖b* ⊗ A*‖_F`.
    pub product_gap: f64,
    pub trained_loss: f64,
    pub optimum_loss: f64,
}

/// One full layer, `d = 5`, `n = 20`, isotropic covariates and prior.
pub fn run_single_layer_with(seed: u64, settings: &ExperimentSettings) -> Result<(ExperimentRun, SingleLayerOutcome)> {
    let spec = CovarianceSpec::isotropic(5)?;
    let run = run_configured(seed, spec, 20, WeightPrior::Isotropic, Variant::Full, 1, settings)?;
    let outcome = single_layer_outcome(&run)?;
    Ok((run, outcome))
}

/// Compares a trained single full layer with the closed form for its
/// covariance and prompt length.
pub fn single_layer_outcome(run: &ExperimentRun) -> Result<SingleLayerOutcome> {
    let Layers::Full(layers) = run.record.final_params.layers() else {
        return Err(Error::UnsupportedVariant("single-layer runs train a full layer".into()));
    };
    if layers.len() != 1 {
        return Err(Error::Config(format!("expected one layer, got {}", layers.len())));
    }
    let trained = single_layer_reduce(&layers[0]);
    let opt = optimal_single_layer(&run.spec, run.batch.n())?.params();
    let want = opt.product();
    Ok(SingleLayerOutcome {
        product_gap: (&trained.product() - &want).frobenius_norm() / want.frobenius_norm(),
        trained_loss: single_layer_loss(&trained, &run.batch)?,
        optimum_loss: single_layer_loss(&opt, &run.batch)?,
    })
}

pub fn run_single_layer(seed: u64) -> Result<RunRecord<f64>> {
    Ok(run_single_layer_with(seed, &ExperimentSettings::default())?.0.record)
}

/// Pointwise mean and standard deviation of a family of curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Band<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AggregateCurves<T> {
    pub loss: Band<T>,
    pub dist_raw: Vec<Band<T>>,
    pub dist_whitened: Vec<Band<T>>,
    pub dist_b: Vec<Band<T>>,
}

impl<T: Scalar> AggregateCurves<T> {
    pub fn loss_csv(&self) -> String {
        let rows: Vec<Vec<T>> = self
            .loss
            .mean
            .iter()
            .zip(&self.loss.std)
            .map(|(&m, &s)| vec![m, s])
            .collect();
        series_csv(&["loss_mean".into(), "loss_std".into()], &rows)
    }

    fn bands_csv(bands: &[Band<T>], prefix: &str) -> String {
        let len = bands.iter().map(|b| b.mean.len()).max().unwrap_or(0);
        let head: Vec<String> = (0..bands.len())
            .flat_map(|i| [format!("{prefix}_{i}_mean"), format!("{prefix}_{i}_std")])
            .collect();
        let rows: Vec<Vec<T>> = (0..len)
            .map(|t| bands.iter().flat_map(|b| [b.mean[t], b.std[t]]).collect())
            .collect();
        series_csv(&head, &rows)
    }

    pub fn dist_raw_csv(&self) -> String {
        Self::bands_csv(&self.dist_raw, "A")
    }

    pub fn dist_whitened_csv(&self) -> String {
        Self::bands_csv(&self.dist_whitened, "A")
    }

    pub fn dist_b_csv(&self) -> String {
        Self::bands_csv(&self.dist_b, "B")
    }
}

/// Pads every curve to the longest by repeating its last value.
fn band<T: Scalar>(curves: &[Vec<T>]) -> Band<T> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let m = T::from_count(curves.len());
    let at = |c: &Vec<T>, i: usize| c.get(i).or(c.last()).copied().unwrap_or_else(T::nan);
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for i in 0..len {
        let mu = curves.iter().map(|c| at(c, i)).sum::<T>() / m;
        let var = curves.iter().map(|c| (at(c, i) - mu) * (at(c, i) - mu)).sum::<T>() / m;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Band { mean, std }
}

fn layer_bands<T: Scalar>(
    records: &[RunRecord<T>],
    pick: impl Fn(&RunRecord<T>) -> &Vec<Vec<T>>,
) -> Result<Vec<Band<T>>> {
    let k = pick(&records[0]).first().map_or(0, Vec::len);
    if records.iter().any(|r| pick(r).first().map_or(0, Vec::len) != k) {
        return Err(Error::Config("records do not share a layer count".into()));
    }
    Ok((0..k)
        .map(|j| {
            band(
                &records
                    .iter()
                    .map(|r| pick(r).iter().map(|row| row[j]).collect())
                    .collect::<Vec<_>>(),
            )
        })
        .collect())
}

pub fn aggregate_runs<T: Scalar>(records: &[RunRecord<T>]) -> Result<AggregateCurves<T>> {
    if records.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    Ok(AggregateCurves {
        loss: band(&records.iter().map(|r| r.loss.clone()).collect::<Vec<_>>()),
        dist_raw: layer_bands(records, |r| &r.dist_raw)?,
        dist_whitened: layer_bands(records, |r| &r.dist_whitened)?,
        dist_b: layer_bands(records, |r| &r.dist_b)?,
    })
}
