//! Seeded experiment runner: train/test splits, label noise, the three
//! methods (PCA, NCA, BNCA), scores, significance tests and learning traces.
//!
//! Every random choice draws from a child seed that is a pure function of
//! `(master_seed, role, condition, repeat)`, so reordering methods or
//! conditions never changes any individual score.

use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, Dataset, NoiseSpec, Standardizer};
use crate::eigenbasis::EigenBasis;
use crate::error::{Error, Result};
use crate::eval::{accuracy, knn_classify_embedded, modified_map, paired_one_tail_test, EvalReport};
use crate::nca::{nca_class_posterior, train_nca, LinearTransform, NcaConfig};
use crate::neighbors::{query_neighbors, NeighborGraph};
use crate::posterior::{map_metric, plugin_predictive, predictive_mcmc, PredictiveDistribution};
use crate::variational::{build_pair_designs, fit_bnca, lse, BncaConfig, GaussianBelief};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Nca,
    Bnca,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Nca => "nca",
            Method::Bnca => "bnca",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Method::Pca),
            "nca" => Ok(Method::Nca),
            "bnca" => Ok(Method::Bnca),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Gaussian clusters; the pool holds enough points per class for the
    /// largest training size plus `test_per_class`.
    Blobs { classes: usize, dim: usize, spread: f64 },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

/// Full description of an experiment. Field names are the JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Eigen count; `None` keeps `min(N, D)` directions.
    pub d: Option<usize>,
    /// Neighbourhood size of the training graph.
    pub k: usize,
    /// Neighbours consulted by the KNN classifier.
    pub knn_k: usize,
    /// Prior mean scale, `m_0 = epsilon * 1`.
    pub epsilon: f64,
    /// Prior covariance scale, `V_0 = sigma * I`.
    pub sigma: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub nca_max_iters: usize,
    pub noise_levels: Vec<f64>,
    pub per_class_sizes: Vec<usize>,
    /// Test points per class; `None` uses every point not drawn for training.
    pub test_per_class: Option<usize>,
    pub repeats: usize,
    pub master_seed: u64,
    pub tau: f64,
    pub mcmc_samples: usize,
    pub methods: Vec<Method>,
    /// Z-score features with training statistics.
    pub standardize: bool,
    /// Fraction of test points (smallest reference margin) labelled difficult.
    pub difficult_fraction: f64,
    /// Record learning traces for the first repeat of every condition.
    pub traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs {
                classes: 3,
                dim: 5,
                spread: 1.0,
            },
            d: None,
            k: crate::neighbors::DEFAULT_K,
            knn_k: 3,
            epsilon: crate::variational::DEFAULT_PRIOR_MEAN,
            sigma: crate::variational::DEFAULT_PRIOR_VARIANCE,
            max_iters: crate::variational::DEFAULT_MAX_ITERS,
            tol: crate::variational::DEFAULT_TOL,
            nca_max_iters: NcaConfig::default().max_iters,
            noise_levels: vec![0.0],
            per_class_sizes: vec![10],
            test_per_class: Some(30),
            repeats: 10,
            master_seed: 0,
            tau: crate::eval::DEFAULT_TAU,
            mcmc_samples: crate::posterior::DEFAULT_MCMC_SAMPLES,
            methods: vec![Method::Pca, Method::Nca, Method::Bnca],
            standardize: false,
            difficult_fraction: 0.3,
            traces: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.repeats < 1 {
            return bad("repeats must be >= 1".into());
        }
        if self.k < 1 || self.knn_k < 1 {
            return bad("k and knn_k must be >= 1".into());
        }
        if self.d == Some(0) {
            return bad("d must be >= 1".into());
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 || !self.epsilon.is_finite() {
            return bad(format!(
                "need sigma > 0 and finite epsilon (sigma={}, epsilon={})",
                self.sigma, self.epsilon
            ));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iters < 1 {
            return bad("tol must be > 0 and max_iters >= 1".into());
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("noise_levels must be a non-empty list of fractions in [0, 1]".into());
        }
        if self.per_class_sizes.is_empty() || self.per_class_sizes.contains(&0) {
            return bad("per_class_sizes must be a non-empty list of positive counts".into());
        }
        if self.test_per_class == Some(0) {
            return bad("test_per_class must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)".into());
        }
        if self.mcmc_samples < 1 {
            return bad("mcmc_samples must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.difficult_fraction) {
            return bad("difficult_fraction must lie in [0, 1]".into());
        }
        if let DataSource::Blobs { classes, dim, spread } = &self.source {
            if *classes < 2 || *dim < 1 || spread.is_nan() || *spread < 0.0 {
                return bad("blobs need classes >= 2, dim >= 1, spread >= 0".into());
            }
            if self.test_per_class.is_none() {
                return bad("blobs need an explicit test_per_class".into());
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

/// One cell of the condition grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise_level: f64,
    pub per_class: usize,
}

impl Condition {
    pub fn label(&self) -> String {
        format!("noise={:.2};per_class={}", self.noise_level, self.per_class)
    }
}

/// Child seed: the first eight bytes (little endian) of
/// `SHA-256("{master}|{role}|{condition}|{repeat}")`.
pub fn child_seed(master: u64, role: &str, condition: &str, repeat: usize) -> u64 {
    let digest = Sha256::digest(format!("{master}|{role}|{condition}|{repeat}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// One row of a learning trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningTrace {
    pub method: Method,
    pub condition: Condition,
    /// BNCA only: whether the fit met its tolerance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
    pub rows: Vec<TraceRow>,
}

/// Result of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub method: Method,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_difficult: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_normal: Option<f64>,
    /// BNCA only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
    #[serde(skip)]
    pub trace: Option<LearningTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Method,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Aggregated scores of one method under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub condition: Condition,
    pub accuracy: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_all: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_difficult: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_normal: Option<EvalReport>,
    /// Paired one-tailed tests of BNCA accuracy against each baseline
    /// (BNCA rows only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub comparisons: Vec<Comparison>,
    /// Repeats whose BNCA fit hit `max_iters` without converging.
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportBundle {
    /// Configuration that produced the rows, including whether features
    /// were standardized.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<ExperimentConfig>,
    pub rows: Vec<ReportRow>,
    pub traces: Vec<LearningTrace>,
}

impl ReportBundle {
    pub fn row(&self, method: Method, condition: &Condition) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.condition == *condition)
    }
}

/// Train/test split for one repeat, with noise applied to the training labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    /// Training set before noise injection.
    pub clean_train: Dataset,
    pub test: Dataset,
}

/// Builds the data pool once per experiment.
pub fn load_pool(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.source {
        DataSource::Blobs { classes, dim, spread } => {
            let largest = config.per_class_sizes.iter().copied().max().unwrap_or(1);
            let per_class = largest + config.test_per_class.unwrap_or(0);
            dataset::make_blobs(
                *classes,
                per_class,
                *dim,
                *spread,
                child_seed(config.master_seed, "pool", "", 0),
            )
        }
        DataSource::Csv { path, has_header } => dataset::load_csv(path, *has_header),
    }
}

/// Draws the split used by every method for `(condition, repeat)`.
pub fn make_split(pool: &Dataset, config: &ExperimentConfig, condition: &Condition, repeat: usize) -> Result<Split> {
    let size_label = format!("per_class={}", condition.per_class);
    let split_seed = child_seed(config.master_seed, "split", &size_label, repeat);
    let (train_idx, rest) = dataset::split_per_class(pool, condition.per_class, split_seed)?;
    let test_idx = match config.test_per_class {
        None => rest,
        Some(t) => {
            let remainder = pool.select(&rest)?;
            let (picked, _) = dataset::split_per_class(&remainder, t, split_seed ^ 0x9e37_79b9_7f4a_7c15)?;
            picked.into_iter().map(|i| rest[i]).collect()
        }
    };
    if test_idx.is_empty() {
        return Err(Error::Data("no points left for the test set".into()));
    }
    let mut clean_train = pool.select(&train_idx)?;
    let mut test = pool.select(&test_idx)?;
    if config.standardize {
        let z = Standardizer::fit(&clean_train);
        clean_train = z.apply(&clean_train)?;
        test = z.apply(&test)?;
    }
    let noise_seed = child_seed(config.master_seed, "noise", &condition.label(), repeat);
    let train = dataset::inject_label_noise(
        &clean_train,
        NoiseSpec {
            level: condition.noise_level,
            seed: noise_seed,
        },
    )?;
    Ok(Split {
        train,
        clean_train,
        test,
    })
}

fn eigen_count(config: &ExperimentConfig, train: &Dataset) -> usize {
    let cap = train.len().min(train.dim());
    config.d.map_or(cap, |d| d.min(cap))
}

fn embedded_accuracy(split: &Split, projection: &DMatrix<f64>, knn_k: usize) -> Result<(f64, f64)> {
    let train_coords = split.train.points() * projection.transpose();
    let test_coords = split.test.points() * projection.transpose();
    let c = split.train.class_count();
    let test_pred = knn_classify_embedded(&train_coords, split.train.labels(), c, &test_coords, knn_k, false)?;
    let train_pred = knn_classify_embedded(&train_coords, split.train.labels(), c, &train_coords, knn_k, true)?;
    Ok((
        accuracy(&train_pred, split.train.labels())?,
        accuracy(&test_pred, split.test.labels())?,
    ))
}

/// Indices of test points whose reference-model margin is among the lowest
/// `fraction` (ties to the lower index).
///
/// The reference model is the plug-in posterior at the prior mean, built on
/// the clean training labels; it depends on neither learned model.
pub fn difficult_indices(split: &Split, config: &ExperimentConfig, neighbours: &[Vec<usize>]) -> Result<Vec<usize>> {
    let d = eigen_count(config, &split.clean_train);
    let basis = EigenBasis::top_eigenvectors(split.clean_train.points(), d)?;
    let gamma = nalgebra::DVector::from_element(d, config.epsilon);
    let mut margins = Vec::with_capacity(split.test.len());
    for (q, ids) in neighbours.iter().enumerate() {
        let p = plugin_predictive(&split.test.point(q), &split.clean_train, ids, &basis, &gamma)?;
        margins.push((p.margin(), q));
    }
    margins.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let count = dataset::flip_count(config.difficult_fraction, margins.len());
    let mut idx: Vec<usize> = margins.into_iter().take(count).map(|(_, q)| q).collect();
    idx.sort_unstable();
    Ok(idx)
}

fn map_scores(
    predictives: &[PredictiveDistribution],
    truths: &[usize],
    difficult: &[usize],
    tau: f64,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let all = modified_map(predictives, truths, tau)?;
    let mut is_hard = vec![false; truths.len()];
    difficult.iter().for_each(|&i| is_hard[i] = true);
    let subset = |want: bool| -> Result<Option<f64>> {
        let (p, t): (Vec<_>, Vec<_>) = (0..truths.len())
            .filter(|&i| is_hard[i] == want)
            .map(|i| (predictives[i].clone(), truths[i]))
            .unzip();
        if t.is_empty() {
            Ok(None)
        } else {
            modified_map(&p, &t, tau).map(Some)
        }
    };
    Ok((all, subset(true)?, subset(false)?))
}

/// Fits and scores one method on one split.
pub fn run_method(
    method: Method,
    split: &Split,
    config: &ExperimentConfig,
    condition: &Condition,
    repeat: usize,
    with_trace: bool,
) -> Result<RunOutcome> {
    let train = &split.train;
    let d = eigen_count(config, train);
    let knn_k = config.knn_k.min(train.len() - 1).max(1);
    let test_truth = split.test.labels();
    let query_k = config.k.min(train.len());
    match method {
        Method::Pca => {
            let basis = EigenBasis::fit(train.points(), d, true)?;
            let projection = basis.vectors().transpose();
            let (_, acc) = embedded_accuracy(split, &projection, knn_k)?;
            Ok(RunOutcome {
                method,
                accuracy: acc,
                map_all: None,
                map_difficult: None,
                map_normal: None,
                converged: None,
                trace: None,
            })
        }
        Method::Nca => {
            let graph = NeighborGraph::build(train, config.k.min(train.len() - 1), None)?;
            let nca_cfg = NcaConfig {
                max_iters: config.nca_max_iters,
                ..NcaConfig::default()
            };
            let fit = train_nca(train, &graph, LinearTransform::identity(train.dim()), &nca_cfg)?;
            let (_, acc) = embedded_accuracy(split, fit.transform.matrix(), knn_k)?;
            let neighbours = query_neighbors(train, split.test.points(), query_k)?;
            let metric = fit.metric();
            let predictives = neighbours
                .iter()
                .enumerate()
                .map(|(q, ids)| nca_class_posterior(&split.test.point(q), train, ids, &metric))
                .collect::<Result<Vec<_>>>()?;
            let difficult = difficult_indices(split, config, &neighbours)?;
            let (all, hard, normal) = map_scores(&predictives, test_truth, &difficult, config.tau)?;
            let trace = if with_trace {
                let mut rows = Vec::with_capacity(fit.trace.len() + 1);
                let (tr, te) = embedded_accuracy(split, &DMatrix::identity(train.dim(), train.dim()), knn_k)?;
                rows.push(TraceRow {
                    iter: 0,
                    objective: fit.initial_objective,
                    train_acc: tr,
                    test_acc: te,
                });
                for it in &fit.trace {
                    let (tr, te) = embedded_accuracy(split, it.transform.matrix(), knn_k)?;
                    rows.push(TraceRow {
                        iter: it.iter,
                        objective: it.objective,
                        train_acc: tr,
                        test_acc: te,
                    });
                }
                Some(LearningTrace {
                    method,
                    condition: *condition,
                    converged: None,
                    rows,
                })
            } else {
                None
            };
            Ok(RunOutcome {
                method,
                accuracy: acc,
                map_all: Some(all),
                map_difficult: hard,
                map_normal: normal,
                converged: None,
                trace,
            })
        }
        Method::Bnca => {
            let basis = EigenBasis::top_eigenvectors(train.points(), d)?;
            let graph = NeighborGraph::build(train, config.k.min(train.len() - 1), None)?;
            let prior = GaussianBelief::isotropic(d, config.epsilon, config.sigma)?;
            let fit = fit_bnca(
                train,
                &graph,
                &basis,
                &prior,
                &BncaConfig {
                    max_iters: config.max_iters,
                    tol: config.tol,
                },
            )?;
            let map = map_metric(&fit.posterior, &basis)?;
            let (_, acc) = embedded_accuracy(split, &map.projection, knn_k)?;
            let neighbours = query_neighbors(train, split.test.points(), query_k)?;
            let sample_seed = child_seed(config.master_seed, "bnca-mcmc", &condition.label(), repeat);
            let predictives = neighbours
                .iter()
                .enumerate()
                .map(|(q, ids)| {
                    predictive_mcmc(
                        &split.test.point(q),
                        train,
                        ids,
                        &basis,
                        &fit.posterior,
                        config.mcmc_samples,
                        sample_seed.wrapping_add(q as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let difficult = difficult_indices(split, config, &neighbours)?;
            let (all, hard, normal) = map_scores(&predictives, test_truth, &difficult, config.tau)?;
            let trace = if with_trace {
                let mut rows = Vec::with_capacity(fit.trace.len() + 1);
                let mut push = |iter: usize, objective: f64, mean: &[f64]| -> Result<()> {
                    let belief = GaussianBelief::new(nalgebra::DVector::from_column_slice(mean), prior.cov().clone())?;
                    let m = map_metric(&belief, &basis)?;
                    let (tr, te) = embedded_accuracy(split, &m.projection, knn_k)?;
                    rows.push(TraceRow {
                        iter,
                        objective,
                        train_acc: tr,
                        test_acc: te,
                    });
                    Ok(())
                };
                // the bound touches -lse at its tangent point, so at the prior mean it is exact
                let start = build_pair_designs(train, &graph, &basis)?
                    .iter()
                    .map(|w| -lse(&w.w.tr_mul(prior.mean())))
                    .sum();
                push(0, start, prior.mean().as_slice())?;
                for it in &fit.trace {
                    push(it.iter, it.bound, &it.mean)?;
                }
                Some(LearningTrace {
                    method,
                    condition: *condition,
                    converged: Some(fit.converged),
                    rows,
                })
            } else {
                None
            };
            Ok(RunOutcome {
                method,
                accuracy: acc,
                map_all: Some(all),
                map_difficult: hard,
                map_normal: normal,
                converged: Some(fit.converged),
                trace,
            })
        }
    }
}

/// The condition grid: every noise level crossed with every training size.
pub fn conditions(config: &ExperimentConfig) -> Vec<Condition> {
    config
        .noise_levels
        .iter()
        .flat_map(|&noise_level| {
            config
                .per_class_sizes
                .iter()
                .map(move |&per_class| Condition { noise_level, per_class })
        })
        .collect()
}

fn collect_report(scores: Vec<f64>) -> EvalReport {
    EvalReport::from_scores(scores)
}

fn optional_report(values: Vec<Option<f64>>) -> Option<EvalReport> {
    values.into_iter().collect::<Option<Vec<_>>>().map(collect_report)
}

/// Runs every (condition, repeat, method) combination and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    config.validate()?;
    let pool = load_pool(config)?;
    let mut bundle = ReportBundle {
        config: Some(config.clone()),
        ..ReportBundle::default()
    };
    for condition in conditions(config) {
        let outcomes: Vec<Vec<RunOutcome>> = (0..config.repeats)
            .into_par_iter()
            .map(|repeat| -> Result<Vec<RunOutcome>> {
                let split = make_split(&pool, config, &condition, repeat)?;
                config
                    .methods
                    .iter()
                    .map(|&m| run_method(m, &split, config, &condition, repeat, config.traces && repeat == 0))
                    .collect()
            })
            .collect::<Result<_>>()?;

        let per_method = |mi: usize| outcomes.iter().map(move |runs| &runs[mi]);
        let mut rows: Vec<ReportRow> = Vec::new();
        for (mi, &method) in config.methods.iter().enumerate() {
            let runs: Vec<&RunOutcome> = per_method(mi).collect();
            rows.push(ReportRow {
                method,
                condition,
                accuracy: collect_report(runs.iter().map(|r| r.accuracy).collect()),
                map_all: optional_report(runs.iter().map(|r| r.map_all).collect()),
                map_difficult: optional_report(runs.iter().map(|r| r.map_difficult).collect()),
                map_normal: optional_report(runs.iter().map(|r| r.map_normal).collect()),
                comparisons: Vec::new(),
                nonconverged: runs.iter().filter(|r| r.converged == Some(false)).count(),
            });
            if let Some(trace) = runs.first().and_then(|r| r.trace.clone()) {
                bundle.traces.push(trace);
            }
        }
        attach_significance(&mut rows, config.repeats)?;
        bundle.rows.extend(rows);
    }
    Ok(bundle)
}

/// Adds paired tests of BNCA against every other method. The BNCA row's
/// `p_value_vs_baseline` is the test against the best-scoring baseline.
fn attach_significance(rows: &mut [ReportRow], repeats: usize) -> Result<()> {
    let Some(bi) = rows.iter().position(|r| r.method == Method::Bnca) else {
        return Ok(());
    };
    if repeats < 2 {
        return Ok(());
    }
    let bnca_scores = rows[bi].accuracy.per_seed_scores.clone();
    let mut comparisons = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for row in rows.iter().filter(|r| r.method != Method::Bnca) {
        let test = paired_one_tail_test(&bnca_scores, &row.accuracy.per_seed_scores)?;
        comparisons.push(Comparison {
            baseline: row.method,
            p_value: test.p_value,
            degenerate: test.degenerate,
        });
        if best.is_none_or(|(m, _)| row.accuracy.mean > m) {
            best = Some((row.accuracy.mean, test.p_value));
        }
    }
    rows[bi].comparisons = comparisons;
    rows[bi].accuracy.p_value_vs_baseline = best.map(|(_, p)| p);
    Ok(())
}

/// A fitted BNCA model together with the (standardized) data it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BncaModel {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standardizer: Option<Standardizer>,
    pub basis: EigenBasis,
    pub posterior: GaussianBelief,
    pub train: Dataset,
    pub k: usize,
    pub knn_k: usize,
    pub converged: bool,
    pub iterations: usize,
}

/// Fits BNCA on every point of `data`.
pub fn train_model(data: &Dataset, config: &ExperimentConfig) -> Result<BncaModel> {
    config.validate()?;
    let standardizer = config.standardize.then(|| Standardizer::fit(data));
    let train = match &standardizer {
        Some(z) => z.apply(data)?,
        None => data.clone(),
    };
    if train.len() < 2 {
        return Err(Error::Data("training needs at least two points".into()));
    }
    let d = eigen_count(config, &train);
    let basis = EigenBasis::top_eigenvectors(train.points(), d)?;
    let graph = NeighborGraph::build(&train, config.k.min(train.len() - 1), None)?;
    let prior = GaussianBelief::isotropic(d, config.epsilon, config.sigma)?;
    let fit = fit_bnca(
        &train,
        &graph,
        &basis,
        &prior,
        &BncaConfig {
            max_iters: config.max_iters,
            tol: config.tol,
        },
    )?;
    Ok(BncaModel {
        standardizer,
        basis,
        posterior: fit.posterior,
        train,
        k: config.k,
        knn_k: config.knn_k,
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

/// Per-point predictions of a model on labelled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub accuracy: f64,
    pub modified_map: f64,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate_model(
    model: &BncaModel,
    data: &Dataset,
    samples: usize,
    tau: f64,
    seed: u64,
) -> Result<ModelEvaluation> {
    crate::error::check_dim(model.train.dim(), data.dim())?;
    if data.class_count() > model.train.class_count() {
        return Err(Error::Data(format!(
            "evaluation data has {} classes, model knows {}",
            data.class_count(),
            model.train.class_count()
        )));
    }
    let test = match &model.standardizer {
        Some(z) => z.apply(data)?,
        None => data.clone(),
    };
    let train = &model.train;
    let map = map_metric(&model.posterior, &model.basis)?;
    let train_coords = train.points() * map.projection.transpose();
    let test_coords = test.points() * map.projection.transpose();
    let knn_k = model.knn_k.min(train.len()).max(1);
    let predictions = knn_classify_embedded(
        &train_coords,
        train.labels(),
        train.class_count(),
        &test_coords,
        knn_k,
        false,
    )?;
    let neighbours = query_neighbors(train, test.points(), model.k.min(train.len()))?;
    let predictives = neighbours
        .iter()
        .enumerate()
        .map(|(q, ids)| {
            predictive_mcmc(
                &test.point(q),
                train,
                ids,
                &model.basis,
                &model.posterior,
                samples,
                seed.wrapping_add(q as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelEvaluation {
        accuracy: accuracy(&predictions, test.labels())?,
        modified_map: modified_map(&predictives, test.labels(), tau)?,
        predictions,
        probabilities: predictives.iter().map(|p| p.probs().to_vec()).collect(),
    })
}
