//! The `vra-kit` subcommands. Each one computes all of its outputs in memory
//! and only then writes them into the output directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vra_core::csvfmt::sig9;
use vra_core::metrics::{evaluate, evaluate_detailed, grid_search, EvalReport, TuneRequest, TuneVariant};
use vra_core::rectify::{tabulate_gstar, GstarTables, SortedColumns, ThresholdMode};
use vra_core::scoring::{LogitSource, ScoreMethod};
use vra_core::tensor_io::load_manifest;
use vra_core::variational::{density_pair_from_samples, gap_bound_check, gstar_rows, optimal_g, TabulatedG};
use vra_core::{Error, FeatureSet, Matrix, RectifierSpec, Role, RunData};

use crate::config::{CommandKind, Flags, MethodName, RectifierName, Settings};
use crate::error::CliError;
use crate::output::Outputs;
use crate::synth;

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TABLE: &str = "report.txt";
pub const SCORES_CSV: &str = "scores.csv";
pub const SPEC_DOC: &str = "spec.toml";
pub const VALIDATION_CSV: &str = "validation.csv";
pub const TRIALS_CSV: &str = "trials.csv";
pub const BOUNDS_CSV: &str = "gstar_bounds.csv";
pub const SYNTH_ECHO: &str = "synth.toml";

/// Record of a tuning run stored next to the winning rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunedRecord {
    pub method: MethodName,
    pub rectifier: RectifierName,
    pub threshold_mode: ThresholdMode,
    pub eta_alpha: f64,
    pub eta_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LogitSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub validation_auroc: f64,
    pub validation_fpr95: f64,
}

/// Saved output of `tune`, accepted by `eval --spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub tuned: Option<TunedRecord>,
    pub rectifier: RectifierSpec,
}

impl SpecDocument {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec document serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Method recorded by the tuning run, with its tuned parameters.
    pub fn tuned_method(&self) -> Result<Option<ScoreMethod>, CliError> {
        let Some(t) = &self.tuned else { return Ok(None) };
        let temperature = t.temperature.unwrap_or(1.0);
        Ok(Some(match t.method {
            MethodName::Msp => ScoreMethod::Msp,
            MethodName::Energy => ScoreMethod::Energy { temperature },
            MethodName::OdinT => ScoreMethod::OdinT { temperature },
            MethodName::FeatureSum => ScoreMethod::FeatureSum,
            MethodName::VraPp => ScoreMethod::VraPlusPlus {
                params: vra_core::scoring::VraPlusPlusParams::new(
                    t.lambda_v.unwrap_or(0.0),
                    t.alpha_v.unwrap_or(0.0),
                )?,
                logits: t.logits.unwrap_or_default(),
            },
        }))
    }
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn report_bytes(report: &EvalReport) -> Vec<u8> {
    report.to_csv_string().into_bytes()
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load(settings: &Settings) -> Result<RunData, CliError> {
    Ok(load_manifest(&settings.manifest)?.1)
}

fn stacked(run: &RunData, role: Role) -> Result<FeatureSet, CliError> {
    run.require_role(role)?;
    Ok(run.stacked(role).expect("role checked"))
}

fn method_hyperparams(method: &ScoreMethod, hp: &mut BTreeMap<String, f64>) {
    match method {
        ScoreMethod::Energy { temperature } | ScoreMethod::OdinT { temperature } => {
            hp.insert("temperature".into(), *temperature);
        }
        ScoreMethod::VraPlusPlus { params, .. } => {
            hp.insert("lambda_v".into(), params.lambda_v);
            hp.insert("alpha_v".into(), params.alpha_v);
        }
        ScoreMethod::Msp | ScoreMethod::FeatureSum => {}
    }
}

/// Builds a threshold rectifier from `id_train`.
fn build_rectifier(
    settings: &Settings,
    run: &RunData,
) -> Result<(RectifierSpec, BTreeMap<String, f64>), CliError> {
    let mut hp = BTreeMap::new();
    let spec = match settings.rectifier {
        RectifierName::Identity => RectifierSpec::identity(run.feature_dim()),
        RectifierName::React => {
            let train = stacked(run, Role::IdTrain)?;
            let sorted = SortedColumns::new(&train.features)?;
            hp.insert("eta_beta".into(), settings.eta_beta);
            RectifierSpec::react(sorted.upper_cut(settings.eta_beta, settings.threshold_mode)?)?
        }
        RectifierName::Vra | RectifierName::VraPlus => {
            let train = stacked(run, Role::IdTrain)?;
            let sorted = SortedColumns::new(&train.features)?;
            let t = sorted.thresholds(settings.eta_alpha, settings.eta_beta, settings.threshold_mode)?;
            hp.insert("eta_alpha".into(), settings.eta_alpha);
            hp.insert("eta_beta".into(), settings.eta_beta);
            if settings.rectifier == RectifierName::VraPlus {
                hp.insert("gamma".into(), settings.gamma);
                RectifierSpec::vra_plus(t, settings.gamma)?
            } else {
                RectifierSpec::vra(t)
            }
        }
        RectifierName::GstarTrue | RectifierName::GstarSubsample => {
            return Err(CliError::Usage(
                "g* rectifiers are fit on the OOD data; use the oracle command".into(),
            ))
        }
    };
    Ok((spec, hp))
}

fn eval_outputs(settings: &Settings) -> Result<Outputs, CliError> {
    let run = load(settings)?;
    let (spec, method, mut hp) = match &settings.spec {
        Some(path) => {
            let doc = SpecDocument::load(path)?;
            let method = match doc.tuned_method()? {
                Some(m) if !settings.method_explicit => m,
                _ => settings.score_method()?,
            };
            (doc.rectifier, method, BTreeMap::new())
        }
        None => {
            let (spec, hp) = build_rectifier(settings, &run)?;
            (spec, settings.score_method()?, hp)
        }
    };
    method_hyperparams(&method, &mut hp);
    let evaluation = evaluate_detailed(&run, &spec, &method, &hp)?;

    let mut scores = Vec::new();
    for (name, sv) in &evaluation.scores {
        for (i, v) in sv.values.iter().enumerate() {
            scores.push([name.clone(), i.to_string(), sv.method.clone(), sig9(*v)]);
        }
    }

    let mut out = Outputs::new();
    out.add(REPORT_CSV, report_bytes(&evaluation.report));
    out.add(REPORT_TABLE, evaluation.report.to_table());
    out.add(SCORES_CSV, csv_bytes(&["dataset", "row_index", "method", "score"], scores));
    out.add(CONFIG_ECHO, settings.to_toml_string());
    Ok(out)
}

fn tune_outputs(settings: &Settings) -> Result<Outputs, CliError> {
    let run = load(settings)?;
    let variant = match settings.rectifier {
        RectifierName::Vra => TuneVariant::Vra,
        RectifierName::VraPlus => TuneVariant::VraPlus,
        other => {
            return Err(CliError::Usage(format!(
                "tune searches vra or vra+, not {}",
                name_of(other)
            )))
        }
    };
    let id_train = stacked(&run, Role::IdTrain)?;
    let id_test = stacked(&run, Role::IdTest)?;
    let validation = stacked(&run, Role::Validation)?;
    let grid = (&settings.grid).into();
    let req = TuneRequest {
        head: run.head(),
        id_train: &id_train,
        id_test: &id_test,
        validation: &validation,
        grid: &grid,
        method: settings.score_method()?,
        variant,
        mode: settings.threshold_mode,
    };
    let outcome = grid_search(&req)?;
    let p = outcome.point;
    let val = &outcome.report.entries[0];

    let (lambda_v, alpha_v, logits) = match outcome.method {
        ScoreMethod::VraPlusPlus { params, logits } => {
            (Some(params.lambda_v), Some(params.alpha_v), Some(logits))
        }
        _ => (None, None, None),
    };
    let temperature = match outcome.method {
        ScoreMethod::Energy { temperature } | ScoreMethod::OdinT { temperature } => Some(temperature),
        _ => None,
    };
    let doc = SpecDocument {
        tuned: Some(TunedRecord {
            method: settings.method,
            rectifier: settings.rectifier,
            threshold_mode: settings.threshold_mode,
            eta_alpha: p.eta_alpha,
            eta_beta: p.eta_beta,
            gamma: (variant == TuneVariant::VraPlus).then_some(p.gamma),
            lambda_v,
            alpha_v,
            logits,
            temperature,
            validation_auroc: val.auroc,
            validation_fpr95: val.fpr95,
        }),
        rectifier: outcome.spec.clone(),
    };

    let trials = outcome.trials.iter().map(|t| {
        let q = t.point;
        [q.eta_alpha, q.eta_beta, q.gamma, q.lambda_v, q.alpha_v, t.auroc, t.fpr95].map(sig9)
    });

    let mut out = Outputs::new();
    out.add(SPEC_DOC, doc.to_toml_string());
    out.add(VALIDATION_CSV, report_bytes(&outcome.report));
    out.add(
        TRIALS_CSV,
        csv_bytes(
            &["eta_alpha", "eta_beta", "gamma", "lambda_v", "alpha_v", "auroc", "fpr95"],
            trials,
        ),
    );
    if run.with_role(Role::Ood).next().is_some() {
        let hp = req.hyperparams(&p);
        let report = evaluate(&run, &outcome.spec, &outcome.method, &hp)?;
        out.add(REPORT_CSV, report_bytes(&report));
        out.add(REPORT_TABLE, report.to_table());
    }
    out.add(CONFIG_ECHO, settings.to_toml_string());
    Ok(out)
}

fn name_of(r: RectifierName) -> String {
    toml::Value::try_from(r)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn selected_ood<'a>(settings: &Settings, run: &'a RunData) -> Result<Vec<&'a FeatureSet>, CliError> {
    run.require_role(Role::Ood)?;
    if settings.datasets.is_empty() {
        return Ok(run.with_role(Role::Ood).collect());
    }
    settings
        .datasets
        .iter()
        .map(|name| {
            run.get(name)
                .filter(|s| s.role == Role::Ood)
                .ok_or_else(|| CliError::Usage(format!("no ood dataset named {name:?}")))
        })
        .collect()
}

fn gstar_outputs(settings: &Settings) -> Result<Outputs, CliError> {
    let run = load(settings)?;
    let id = stacked(&run, Role::IdTest)?;
    let mut out = Outputs::new();
    let mut bounds = Vec::new();
    for ood in selected_ood(settings, &run)? {
        if id.is_empty() || ood.is_empty() || run.feature_dim() == 0 {
            return Err(Error::EmptyInput(format!("{} or {} has no activations", id.name, ood.name)).into());
        }
        let d = density_pair_from_samples(id.features.as_slice(), ood.features.as_slice(), settings.bins, settings.eps)?;
        let g = optimal_g(&d, settings.lambda)?;
        let rows = gstar_rows(&d, &g)
            .into_iter()
            .map(|r| [r.bin_left, r.bin_right, r.pdf_in, r.pdf_out, r.g_star].map(sig9));
        out.add(
            format!("gstar_{}.csv", file_stem(&ood.name)),
            csv_bytes(&["bin_left", "bin_right", "pdf_in", "pdf_out", "g_star"], rows),
        );
        let b = gap_bound_check(&d, settings.lambda)?;
        bounds.push(vec![
            ood.name.clone(),
            settings.bins.to_string(),
            sig9(settings.lambda),
            sig9(settings.eps),
            sig9(b.gap_gstar),
            sig9(b.gap_identity),
            sig9(b.improvement),
            sig9(b.bound),
            b.satisfied.to_string(),
        ]);
    }
    out.add(
        BOUNDS_CSV,
        csv_bytes(
            &[
                "dataset",
                "bins",
                "lambda",
                "eps",
                "gap_gstar",
                "gap_identity",
                "improvement",
                "bound",
                "satisfied",
            ],
            bounds,
        ),
    );
    out.add(CONFIG_ECHO, settings.to_toml_string());
    Ok(out)
}

/// Rows kept by a seeded subsample without replacement. The full set is
/// returned unchanged when `fraction == 1`.
pub fn subsample(features: &Matrix, fraction: f64, seed: u64, stream: u64) -> Result<Matrix, CliError> {
    if fraction >= 1.0 {
        return Ok(features.clone());
    }
    let n = features.rows();
    let k = (fraction * n as f64).round() as usize;
    if k < 2 {
        return Err(Error::InsufficientData(format!(
            "subsample of {n} rows at fraction {fraction} keeps {k} (< 2)"
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(features.select_rows(&idx))
}

/// `g*` rectifier fit on the given ID and OOD activations.
pub fn fit_gstar(
    id: &Matrix,
    ood: &Matrix,
    bins: usize,
    eps: f64,
    lambda: f64,
    mode: ThresholdMode,
) -> Result<RectifierSpec, CliError> {
    let m = id.cols();
    let fit = |a: &[f64], b: &[f64]| -> Result<TabulatedG, CliError> {
        Ok(optimal_g(&density_pair_from_samples(a, b, bins, eps)?, lambda)?)
    };
    let tables = match mode {
        ThresholdMode::Pooled => GstarTables::Pooled(fit(id.as_slice(), ood.as_slice())?),
        ThresholdMode::PerFeature => GstarTables::PerFeature(
            (0..m)
                .map(|j| fit(&id.column(j), &ood.column(j)))
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(tabulate_gstar(&tables, m)?)
}

fn oracle_outputs(settings: &Settings) -> Result<Outputs, CliError> {
    if !settings.rectifier.is_gstar() {
        return Err(CliError::Usage(
            "oracle needs rectifier gstar-true or gstar-subsample".into(),
        ));
    }
    let fraction = match settings.rectifier {
        RectifierName::GstarTrue => 1.0,
        _ => settings.subsample_fraction,
    };
    let seed = settings.seed.unwrap_or(0);
    let run = load(settings)?;
    let method = settings.score_method()?;
    let mut hp = BTreeMap::from([
        ("bins".to_string(), settings.bins as f64),
        ("eps".to_string(), settings.eps),
        ("lambda".to_string(), settings.lambda),
        ("subsample_fraction".to_string(), fraction),
    ]);
    method_hyperparams(&method, &mut hp);

    let mut ood_index = BTreeMap::new();
    for (k, s) in run.with_role(Role::Ood).enumerate() {
        ood_index.insert(s.name.clone(), k as u64);
    }
    let report = vra_core::metrics::evaluate_per_ood(
        &run,
        |id, ood| {
            let fit = || -> Result<RectifierSpec, CliError> {
                let id_rows = subsample(&id.features, fraction, seed, 0)?;
                let ood_rows = subsample(&ood.features, fraction, seed, 1 + ood_index[&ood.name])?;
                fit_gstar(&id_rows, &ood_rows, settings.bins, settings.eps, settings.lambda, settings.gstar_mode)
            };
            fit().map_err(into_core)
        },
        &method,
        &hp,
    )?;

    let mut out = Outputs::new();
    out.add(REPORT_CSV, report_bytes(&report));
    out.add(REPORT_TABLE, report.to_table());
    out.add(CONFIG_ECHO, settings.to_toml_string());
    Ok(out)
}

fn into_core(e: CliError) -> Error {
    match e {
        CliError::Core(e) => e,
        other => Error::Parameter(other.to_string()),
    }
}

fn synth_outputs(flags: &Flags) -> Result<(Outputs, PathBuf), CliError> {
    let cfg = flags.merged()?;
    let mut spec = cfg
        .synth
        .clone()
        .ok_or_else(|| CliError::Usage("synth needs a [synth] section in the config".into()))?;
    if let Some(seed) = flags.seed {
        spec.seed = seed;
    }
    let dir = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory given (--output or config)".into()))?;
    let data = synth::generate(&spec)?;
    let mut out = synth::benchmark_outputs(&data);
    out.add(SYNTH_ECHO, toml::to_string(&spec).expect("synth spec serializes"));
    Ok((out, dir))
}

/// Subcommand selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Eval,
    Tune,
    Gstar,
    Oracle,
    Synth,
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(command: Command, flags: &Flags) -> Result<Vec<PathBuf>, CliError> {
    if command == Command::Synth {
        let (out, dir) = synth_outputs(flags)?;
        return out.commit(&dir);
    }
    let kind = match command {
        Command::Eval => CommandKind::Eval,
        Command::Tune => CommandKind::Tune,
        Command::Gstar => CommandKind::Gstar,
        Command::Oracle => CommandKind::Oracle,
        Command::Synth => unreachable!(),
    };
    let settings = Settings::resolve(&flags.merged()?, kind)?;
    let out = match command {
        Command::Eval => eval_outputs(&settings)?,
        Command::Tune => tune_outputs(&settings)?,
        Command::Gstar => gstar_outputs(&settings)?,
        Command::Oracle => oracle_outputs(&settings)?,
        Command::Synth => unreachable!(),
    };
    out.commit(&settings.output)
}
