use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    evaluation_seeds, movielens_scenario, run_candidates, select_many, synthetic_scenario, toy_scenario, Candidate,
    EstimatorSpec, RunOptions, ScenarioSource, SelectionOptions, TauConstraint, TauPoint, TrialResult,
};
use super::select::default_tau_grid;
use crate::error::{Error, Result};
use crate::movielens::{self, MovielensEnv};
use crate::structure::ConvKind;
use crate::synth::SynthConfig;

pub const CSV_HEADER: [&str; 15] = [
    "experiment",
    "sweep_param",
    "sweep_value",
    "estimator",
    "conv_kind",
    "tau1",
    "tau2",
    "n_seeds",
    "true_value",
    "mse",
    "bias_sq",
    "variance",
    "ci_low",
    "ci_high",
    "failures",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Synthetic,
    Movielens,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    NActions,
    Beta,
    Epsilon,
    #[default]
    NLogged,
    DeficientFraction,
    Tau,
    EmbedDim,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NActions => "n_actions",
            SweepParam::Beta => "beta",
            SweepParam::Epsilon => "epsilon",
            SweepParam::NLogged => "n_logged",
            SweepParam::DeficientFraction => "deficient_fraction",
            SweepParam::Tau => "tau",
            SweepParam::EmbedDim => "embed_dim",
        }
    }

    /// Parameters that change the world itself; the world is then rebuilt
    /// for every seed.
    fn is_world_level(self) -> bool {
        matches!(self, SweepParam::NActions | SweepParam::EmbedDim)
    }
}

/// A sweep: one environment, one swept parameter, a list of estimators.
///
/// Read from a flat TOML table; every key is optional. Synthetic world keys
/// mirror [`SynthConfig`]; `d_embed` is also the factor rank for Movielens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment: String,
    pub environment: EnvKind,
    pub sweep_param: SweepParam,
    pub sweep_values: Vec<f64>,
    pub estimators: Vec<String>,
    pub n_seeds: usize,
    pub validation_seeds: usize,
    pub seed: u64,

    pub tau_constraint: TauConstraint,
    pub include_identity: bool,
    pub tau_grid_tree: Option<Vec<f64>>,
    pub tau_grid_knn: Option<Vec<f64>>,
    pub tau_grid_ball: Option<Vec<f64>>,
    pub tau_grid_kernel: Option<Vec<f64>>,
    pub tree_depth: Option<usize>,
    pub ridge_lambda: f64,
    pub kernel_normalize: bool,
    pub deficient_fraction: f64,

    pub n_actions: usize,
    pub n_topics: usize,
    pub d_context: usize,
    pub d_embed: usize,
    pub d_noise: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub n_logged: usize,
    pub n_test: usize,
    pub noise_draws: usize,

    pub data_path: Option<PathBuf>,
    pub eps_floor: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            experiment: "sweep".into(),
            environment: EnvKind::Synthetic,
            sweep_param: SweepParam::NLogged,
            sweep_values: vec![s.n_logged as f64],
            estimators: vec!["ips".into(), "snips".into(), "dr".into(), "pc-ips:tree".into()],
            n_seeds: 50,
            validation_seeds: 10,
            seed: 0,
            tau_constraint: TauConstraint::Free,
            include_identity: false,
            tau_grid_tree: None,
            tau_grid_knn: None,
            tau_grid_ball: None,
            tau_grid_kernel: None,
            tree_depth: None,
            ridge_lambda: 1.0,
            kernel_normalize: false,
            deficient_fraction: 0.0,
            n_actions: s.n_actions,
            n_topics: s.n_topics,
            d_context: s.d_context,
            d_embed: s.d_embed,
            d_noise: s.d_noise,
            beta: s.beta,
            epsilon: s.epsilon,
            n_logged: s.n_logged,
            n_test: s.n_test,
            noise_draws: s.noise_draws,
            data_path: None,
            eps_floor: movielens::DEFAULT_EPS_FLOOR,
        }
    }
}

/// The toy reproduction: PC-IPS with tree pooling at levels 1, 2, 3
/// (`τ1 = τ2`), 10 logged samples, 50,000 replications.
pub fn toy_spec() -> SweepSpec {
    SweepSpec {
        experiment: "toy".into(),
        environment: EnvKind::Toy,
        sweep_param: SweepParam::Tau,
        sweep_values: vec![1.0, 2.0, 3.0],
        estimators: vec!["pc-ips:tree".into()],
        n_seeds: 50_000,
        tau_constraint: TauConstraint::Equal,
        include_identity: true,
        n_logged: 10,
        ..SweepSpec::default()
    }
}

fn as_count(param: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{param} must be a positive integer, got {v}")))
    }
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn estimator_specs(&self) -> Result<Vec<EstimatorSpec>> {
        self.estimators.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep_values.is_empty() {
            return Err(Error::Config("sweep_values must not be empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimators must not be empty".into()));
        }
        if self.n_seeds < 2 {
            return Err(Error::Config("n_seeds must be at least 2".into()));
        }
        if self.validation_seeds == 0 {
            return Err(Error::Config("validation_seeds must be positive".into()));
        }
        if self.ridge_lambda.is_nan() || self.ridge_lambda <= 0.0 {
            return Err(Error::Config("ridge_lambda must be positive".into()));
        }
        self.estimator_specs()?;
        for (name, grid) in [
            ("tau_grid_tree", &self.tau_grid_tree),
            ("tau_grid_knn", &self.tau_grid_knn),
            ("tau_grid_ball", &self.tau_grid_ball),
            ("tau_grid_kernel", &self.tau_grid_kernel),
        ] {
            if grid.as_ref().is_some_and(|g| g.is_empty()) {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
        }
        let allowed: &[SweepParam] = match self.environment {
            EnvKind::Toy => &[SweepParam::NLogged, SweepParam::Tau],
            EnvKind::Movielens => &[
                SweepParam::Beta,
                SweepParam::Epsilon,
                SweepParam::NLogged,
                SweepParam::DeficientFraction,
                SweepParam::Tau,
                SweepParam::EmbedDim,
            ],
            EnvKind::Synthetic => &[
                SweepParam::NActions,
                SweepParam::Beta,
                SweepParam::Epsilon,
                SweepParam::NLogged,
                SweepParam::DeficientFraction,
                SweepParam::Tau,
                SweepParam::EmbedDim,
            ],
        };
        if !allowed.contains(&self.sweep_param) {
            return Err(Error::Config(format!(
                "sweep_param {} is not available for this environment",
                self.sweep_param.name()
            )));
        }
        for v in &self.sweep_values {
            let cell = self.with_value(*v)?;
            if cell.environment == EnvKind::Synthetic {
                cell.synth_config(cell.seed).validate()?;
            }
            if !(0.0..1.0).contains(&cell.deficient_fraction) {
                return Err(Error::Config(format!(
                    "deficient_fraction {} outside [0, 1)",
                    cell.deficient_fraction
                )));
            }
            if cell.environment == EnvKind::Movielens && !(cell.eps_floor > 0.0 && cell.eps_floor < 1.0) {
                return Err(Error::Config(format!("eps_floor {} outside (0, 1)", cell.eps_floor)));
            }
        }
        Ok(())
    }

    /// This sweep with the swept parameter set to `value`.
    pub fn with_value(&self, value: f64) -> Result<SweepSpec> {
        let mut s = self.clone();
        match self.sweep_param {
            SweepParam::NActions => s.n_actions = as_count("n_actions", value)?,
            SweepParam::Beta => s.beta = value,
            SweepParam::Epsilon => s.epsilon = value,
            SweepParam::NLogged => s.n_logged = as_count("n_logged", value)?,
            SweepParam::DeficientFraction => s.deficient_fraction = value,
            SweepParam::EmbedDim => s.d_embed = as_count("embed_dim", value)?,
            SweepParam::Tau => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!("tau must be positive, got {value}")));
                }
            }
        }
        Ok(s)
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_actions: self.n_actions,
            n_topics: self.n_topics,
            d_context: self.d_context,
            d_embed: self.d_embed,
            d_noise: self.d_noise,
            beta: self.beta,
            epsilon: self.epsilon,
            n_logged: self.n_logged,
            n_test: self.n_test,
            noise_draws: self.noise_draws,
            seed,
        }
    }

    fn grid(&self, kind: ConvKind) -> Vec<TauPoint> {
        let explicit = match kind {
            ConvKind::Tree => &self.tau_grid_tree,
            ConvKind::Knn => &self.tau_grid_knn,
            ConvKind::Ball => &self.tau_grid_ball,
            ConvKind::Kernel => &self.tau_grid_kernel,
        };
        match explicit {
            Some(g) => g.iter().map(|v| TauPoint::At(*v)).collect(),
            None => {
                let n = match self.environment {
                    EnvKind::Toy => 4,
                    EnvKind::Synthetic => self.n_actions,
                    // the item count is only known after loading; kNN grid
                    // points beyond it are rejected at resolution time
                    EnvKind::Movielens => usize::MAX,
                };
                let depth = match (self.environment, self.tree_depth) {
                    (EnvKind::Toy, _) => Some(3),
                    (_, d) => d,
                };
                default_tau_grid(kind, n, depth)
            }
        }
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            ridge_lambda: self.ridge_lambda,
            kernel_normalize: self.kernel_normalize,
        }
    }
}

/// Builds the scenario source for one sweep cell. `movielens_env` caches the
/// factorised ratings for the cell's rank.
pub fn build_source(cell: &SweepSpec, movielens_env: Option<Arc<MovielensEnv>>) -> Result<ScenarioSource> {
    match cell.environment {
        EnvKind::Toy => Ok(toy_scenario(cell.n_logged)?.into()),
        EnvKind::Synthetic => {
            if cell.sweep_param.is_world_level() {
                let cell = cell.clone();
                Ok(ScenarioSource::PerSeed(Arc::new(move |seed| {
                    synthetic_scenario(&cell.synth_config(seed), cell.deficient_fraction, cell.tree_depth)
                })))
            } else {
                Ok(synthetic_scenario(&cell.synth_config(cell.seed), cell.deficient_fraction, cell.tree_depth)?.into())
            }
        }
        EnvKind::Movielens => {
            let env = match movielens_env {
                Some(e) => e,
                None => {
                    let path = cell.data_path.clone().unwrap_or_else(movielens::default_data_path);
                    Arc::new(MovielensEnv::from_file(path, cell.d_embed, cell.seed)?)
                }
            };
            Ok(movielens_scenario(
                env,
                cell.beta,
                cell.epsilon,
                cell.eps_floor,
                cell.n_logged,
                cell.deficient_fraction,
                cell.tree_depth,
                cell.seed,
            )?
            .into())
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub experiment: String,
    pub sweep_param: String,
    pub sweep_value: f64,
    pub result: TrialResult,
}

impl SweepRow {
    fn record(&self) -> Vec<String> {
        let fmt = |v: f64| v.to_string();
        let c = &self.result.candidate;
        let (conv, t1, t2) = match (c.spec.conv, c.taus) {
            (Some(k), Some((a, b))) => (
                k.name().to_string(),
                a.value().map(fmt).unwrap_or_default(),
                b.value().map(fmt).unwrap_or_default(),
            ),
            (Some(k), None) => (k.name().to_string(), String::new(), String::new()),
            (None, _) => ("none".to_string(), String::new(), String::new()),
        };
        let stats: [String; 5] = match &self.result.stats {
            Some(s) => [fmt(s.mse), fmt(s.bias_sq), fmt(s.variance), fmt(s.ci_low), fmt(s.ci_high)],
            None => Default::default(),
        };
        let mut rec = vec![
            self.experiment.clone(),
            self.sweep_param.clone(),
            fmt(self.sweep_value),
            c.spec.label(),
            conv,
            t1,
            t2,
            self.result.n_seeds().to_string(),
            fmt(self.result.mean_true_value()),
        ];
        rec.extend(stats);
        rec.push(self.result.failures.to_string());
        rec
    }
}

/// Runs a sweep and returns its rows in grid order (sweep value, then
/// estimator).
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    run_sweep_inner(spec, &mut |row| {
        rows.push(row);
        Ok(())
    })?;
    Ok(rows)
}

/// Runs a sweep, writing the CSV to `out` row by row. The file is created
/// before any computation so an unwritable path fails fast.
pub fn run_sweep_to(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    let mut rows = Vec::new();
    run_sweep_inner(spec, &mut |row| {
        w.write_record(row.record())?;
        w.flush().map_err(|e| Error::io(out, e))?;
        rows.push(row);
        Ok(())
    })?;
    let mut inner = w.into_inner().map_err(|e| Error::io(out, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

type SelectionRequest = (crate::estimators::Backbone, ConvKind, Vec<TauPoint>);

fn run_sweep_inner(spec: &SweepSpec, emit: &mut dyn FnMut(SweepRow) -> Result<()>) -> Result<()> {
    spec.validate()?;
    let estimators = spec.estimator_specs()?;
    let opts = spec.run_options();
    let sel = SelectionOptions {
        constraint: spec.tau_constraint,
        include_identity: spec.include_identity,
        validation_seeds: spec.validation_seeds,
        master_seed: spec.seed,
    };
    let eval_seeds = evaluation_seeds(spec.seed, spec.n_seeds);
    let mut env_cache: Option<(usize, Arc<MovielensEnv>)> = None;

    for &value in &spec.sweep_values {
        let cell = spec.with_value(value)?;
        let ml_env = if cell.environment == EnvKind::Movielens {
            match &env_cache {
                Some((rank, env)) if *rank == cell.d_embed => Some(Arc::clone(env)),
                _ => {
                    let path = cell.data_path.clone().unwrap_or_else(movielens::default_data_path);
                    let env = Arc::new(MovielensEnv::from_file(path, cell.d_embed, cell.seed)?);
                    env_cache = Some((cell.d_embed, Arc::clone(&env)));
                    Some(env)
                }
            }
        } else {
            None
        };
        let source = build_source(&cell, ml_env)?;

        // Fix the convolution amounts of every PC estimator for this cell.
        let mut taus: Vec<Option<std::result::Result<(TauPoint, TauPoint), String>>> = vec![None; estimators.len()];
        if spec.sweep_param == SweepParam::Tau {
            let t = TauPoint::At(value);
            let pair = match spec.tau_constraint {
                TauConstraint::TargetOnly => (t, TauPoint::Identity),
                TauConstraint::Equal | TauConstraint::Free => (t, t),
            };
            for (slot, e) in taus.iter_mut().zip(&estimators) {
                if e.conv.is_some() {
                    *slot = Some(Ok(pair));
                }
            }
        } else {
            let requests: Vec<(usize, SelectionRequest)> = estimators
                .iter()
                .enumerate()
                .filter_map(|(i, e)| e.conv.map(|k| (i, (e.backbone, k, cell.grid(k)))))
                .collect();
            if !requests.is_empty() {
                let reqs: Vec<_> = requests.iter().map(|(_, r)| r.clone()).collect();
                let selected = select_many(&source, &reqs, &sel, &opts)?;
                for ((i, _), s) in requests.iter().zip(selected) {
                    taus[*i] = Some(s.map(|s| (s.tau1, s.tau2)).map_err(|e| e.to_string()));
                }
            }
        }

        let mut runnable = Vec::new();
        for (e, t) in estimators.iter().zip(&taus) {
            if let Some(Ok(pair)) = t {
                runnable.push(Candidate {
                    spec: *e,
                    taus: Some(*pair),
                });
            } else if t.is_none() {
                runnable.push(Candidate { spec: *e, taus: None });
            }
        }
        let mut results = run_candidates(&source, &runnable, &eval_seeds, &opts)?.into_iter();
        for (e, t) in estimators.iter().zip(&taus) {
            let result = match t {
                Some(Err(msg)) => TrialResult {
                    candidate: Candidate { spec: *e, taus: None },
                    estimates: vec![None; eval_seeds.len()],
                    true_values: vec![f64::NAN; eval_seeds.len()],
                    failures: eval_seeds.len(),
                    stats: None,
                    first_error: Some(msg.clone()),
                },
                _ => results.next().expect("one result per runnable candidate"),
            };
            emit(SweepRow {
                experiment: spec.experiment.clone(),
                sweep_param: spec.sweep_param.name().to_string(),
                sweep_value: value,
                result,
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_toml() {
        let spec = SweepSpec::from_toml_str(
            r#"
            experiment = "demo"
            environment = "synthetic"
            sweep_param = "beta"
            sweep_values = [-3.0, 0.0, 3.0]
            estimators = ["ips", "pc-snips:knn"]
            n_seeds = 5
            n_actions = 50
            tau_constraint = "target_only"
            "#,
        )
        .unwrap();
        assert_eq!(spec.sweep_param, SweepParam::Beta);
        assert_eq!(spec.n_actions, 50);
        assert_eq!(spec.tau_constraint, TauConstraint::TargetOnly);
        assert_eq!(spec.d_embed, 16);
    }

    #[test]
    fn rejects_bad_specs() {
        for bad in [
            "unknown_key = 1",
            "sweep_values = []",
            "n_seeds = 1",
            "estimators = [\"ipw\"]",
            "environment = \"toy\"\nsweep_param = \"beta\"",
            "sweep_param = \"n_logged\"\nsweep_values = [10.5]",
            "tau_grid_knn = []",
            "deficient_fraction = 1.0",
            "environment = \"movielens\"\nsweep_param = \"n_actions\"",
        ] {
            assert!(SweepSpec::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn one_value_one_estimator_gives_one_row() {
        let spec = SweepSpec {
            environment: EnvKind::Toy,
            sweep_values: vec![10.0],
            estimators: vec!["ips".into()],
            n_seeds: 20,
            ..SweepSpec::default()
        };
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].record().len(), CSV_HEADER.len());
        assert_eq!(rows[0].record()[4], "none");
    }

    #[test]
    fn csv_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("toy.csv");
        let spec = SweepSpec {
            n_seeds: 50,
            ..toy_spec()
        };
        let rows = run_sweep_to(&spec, &out).unwrap();
        assert_eq!(rows.len(), 3);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.ends_with('\n'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("toy,tau,1,PC-IPS,tree,1,1,50,17,"));
        for row in &rows {
            let s = row.result.stats.unwrap();
            assert!((s.mse - s.bias_sq - s.variance).abs() < 1e-9 * s.mse.max(1.0));
        }
    }

    #[test]
    fn unwritable_output_fails_before_running() {
        let spec = SweepSpec {
            n_seeds: 1_000_000_000,
            ..toy_spec()
        };
        let err = run_sweep_to(&spec, Path::new("/nonexistent-dir/x.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn world_level_sweeps_rebuild_per_seed() {
        let spec = SweepSpec {
            sweep_param: SweepParam::NActions,
            sweep_values: vec![12.0],
            estimators: vec!["ips".into()],
            n_seeds: 3,
            n_topics: 3,
            n_logged: 50,
            n_test: 200,
            d_context: 4,
            d_embed: 3,
            d_noise: 2,
            noise_draws: 2,
            ..SweepSpec::default()
        };
        let rows = run_sweep(&spec).unwrap();
        let tv = &rows[0].result.true_values;
        assert!(tv[0] != tv[1] && tv[1] != tv[2]);
    }
}
