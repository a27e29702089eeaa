//! Detection metrics, evaluation runs and hyperparameter search.
//!
//! ID is the positive class: scores are "higher means ID".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use crate::csvfmt::sig9;
use crate::error::{Error, Result};
use crate::rectify::{RectifierSpec, SortedColumns, ThresholdMode};
use crate::scoring::{ScoreMethod, ScoreVector, VraPlusPlusParams};
use crate::tensor_io::{ClassifierHead, FeatureSet, Role, RunData};

fn check_non_empty(id_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyInput("metrics need ID and OOD scores".into()));
    }
    Ok(())
}

/// `P(s_id > s_ood) + 0.5 P(s_id == s_ood)`.
///
/// Counts are accumulated as integers (doubled to keep ties exact) so the
/// result is a single rounding of an exact ratio.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    let mut tagged: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the number of (id, ood) pairs won by id, ties counting one
    let mut doubled_wins: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < tagged.len() {
        let v = tagged[i].0;
        let mut j = i;
        let (mut ids, mut oods) = (0u128, 0u128);
        while j < tagged.len() && tagged[j].0 == v {
            if tagged[j].1 {
                ids += 1;
            } else {
                oods += 1;
            }
            j += 1;
        }
        doubled_wins += 2 * ids * ood_below + ids * oods;
        ood_below += oods;
        i = j;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(doubled_wins as f64 / pairs as f64)
}

/// False-positive rate on OOD at the largest observed ID threshold that keeps
/// at least 95% of ID scores at or above it.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_non_empty(id_scores, ood_scores)?;
    let threshold = tpr95_threshold(id_scores);
    let false_pos = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(false_pos as f64 / ood_scores.len() as f64)
}

/// The k-th largest ID score with `k = ceil(0.95 N)`.
pub fn tpr95_threshold(id_scores: &[f64]) -> f64 {
    let n = id_scores.len();
    let k = (95 * n).div_ceil(100).max(1);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1]
}

/// Metrics of one method against one OOD dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub ood_dataset: String,
    pub method: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub hyperparams: BTreeMap<String, f64>,
}

/// Per-OOD-dataset metrics plus their averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub mean_fpr95: f64,
    pub mean_auroc: f64,
}

impl EvalReport {
    pub fn from_entries(entries: Vec<EvalEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("report has no entries".into()));
        }
        let n = entries.len() as f64;
        let mean_fpr95 = entries.iter().map(|e| e.fpr95).sum::<f64>() / n;
        let mean_auroc = entries.iter().map(|e| e.auroc).sum::<f64>() / n;
        Ok(EvalReport {
            entries,
            mean_fpr95,
            mean_auroc,
        })
    }

    /// CSV with columns `dataset,method,fpr95,auroc,hyperparams`, closed by an
    /// `Average` row.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dataset", "method", "fpr95", "auroc", "hyperparams"])?;
        for e in &self.entries {
            let hp = e
                .hyperparams
                .iter()
                .map(|(k, v)| format!("{k}={}", sig9(*v)))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                e.ood_dataset.as_str(),
                &e.method,
                &sig9(e.fpr95),
                &sig9(e.auroc),
                &hp,
            ])?;
        }
        let method = self.entries.first().map_or("", |e| e.method.as_str());
        w.write_record(["Average", method, &sig9(self.mean_fpr95), &sig9(self.mean_auroc), ""])?;
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    /// Aligned text table: one column pair (FPR95, AUROC) per OOD dataset
    /// plus the average, values in percent.
    pub fn to_table(&self) -> String {
        let method = self.entries.first().map_or("", |e| e.method.as_str());
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.ood_dataset.as_str()).collect();
        names.push("Average");
        let mut cells: Vec<(f64, f64)> = self.entries.iter().map(|e| (e.fpr95, e.auroc)).collect();
        cells.push((self.mean_fpr95, self.mean_auroc));

        let col = names.iter().map(|n| n.len()).max().unwrap_or(0).max(15);
        let label = method.len().max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<label$}", "Method");
        for n in &names {
            let _ = write!(out, " | {n:^col$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<label$}", "");
        for _ in &names {
            let half = (col - 1) / 2;
            let _ = write!(out, " | {:>half$} {:>rest$}", "FPR95", "AUROC", rest = col - half - 1);
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.lines().next().map_or(0, str::len)));
        out.push('\n');
        let _ = write!(out, "{method:<label$}");
        for (fpr, au) in cells {
            let half = (col - 1) / 2;
            let _ = write!(
                out,
                " | {:>half$.2} {:>rest$.2}",
                100.0 * fpr,
                100.0 * au,
                rest = col - half - 1
            );
        }
        out.push('\n');
        out
    }
}

/// Scores one feature set through `spec` and `method`.
pub fn score_features(
    head: &ClassifierHead,
    set: &FeatureSet,
    spec: &RectifierSpec,
    method: &ScoreMethod,
) -> Result<ScoreVector> {
    method.score(head, &set.features, |m| spec.apply(m))
}

/// Every score computed during an evaluation, by dataset name.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<(String, ScoreVector)>,
}

/// Rectifies ID-test and each OOD set with `spec`, scores them and reports
/// FPR95 / AUROC per OOD dataset.
pub fn evaluate(
    run: &RunData,
    spec: &RectifierSpec,
    method: &ScoreMethod,
    hyperparams: &BTreeMap<String, f64>,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(run, spec, method, hyperparams)?.report)
}

pub fn evaluate_detailed(
    run: &RunData,
    spec: &RectifierSpec,
    method: &ScoreMethod,
    hyperparams: &BTreeMap<String, f64>,
) -> Result<Evaluation> {
    run.require_eval()?;
    let id = run.stacked(Role::IdTest).expect("checked");
    let id_scores = score_features(run.head(), &id, spec, method)?;
    let mut entries = Vec::new();
    let mut scores = vec![(id.name.clone(), id_scores.clone())];
    for ood in run.with_role(Role::Ood) {
        let ood_scores = score_features(run.head(), ood, spec, method)?;
        entries.push(entry(&ood.name, method, &id_scores, &ood_scores, hyperparams.clone())?);
        scores.push((ood.name.clone(), ood_scores));
    }
    Ok(Evaluation {
        report: EvalReport::from_entries(entries)?,
        scores,
    })
}

/// Like [`evaluate`], but the rectifier is rebuilt for every OOD dataset
/// (used by oracle rectifiers that are fit on the OOD data itself).
pub fn evaluate_per_ood<F>(
    run: &RunData,
    mut spec_for: F,
    method: &ScoreMethod,
    hyperparams: &BTreeMap<String, f64>,
) -> Result<EvalReport>
where
    F: FnMut(&FeatureSet, &FeatureSet) -> Result<RectifierSpec>,
{
    run.require_eval()?;
    let id = run.stacked(Role::IdTest).expect("checked");
    let mut entries = Vec::new();
    for ood in run.with_role(Role::Ood) {
        let spec = spec_for(&id, ood)?;
        let id_scores = score_features(run.head(), &id, &spec, method)?;
        let ood_scores = score_features(run.head(), ood, &spec, method)?;
        entries.push(entry(&ood.name, method, &id_scores, &ood_scores, hyperparams.clone())?);
    }
    EvalReport::from_entries(entries)
}

fn entry(
    ood_name: &str,
    method: &ScoreMethod,
    id_scores: &ScoreVector,
    ood_scores: &ScoreVector,
    hyperparams: BTreeMap<String, f64>,
) -> Result<EvalEntry> {
    Ok(EvalEntry {
        ood_dataset: ood_name.to_string(),
        method: method.name().to_string(),
        fpr95: fpr_at_95_tpr(&id_scores.values, &ood_scores.values)?,
        auroc: auroc(&id_scores.values, &ood_scores.values)?,
        hyperparams,
    })
}

/// Candidate values for the hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid {
    pub eta_alpha: Vec<f64>,
    pub eta_beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub alpha_v: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            eta_alpha: vec![0.5, 0.6, 0.65, 0.7],
            eta_beta: vec![0.8, 0.85, 0.9, 0.95, 0.99],
            gamma: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            // no published grid for the quadratic score; these are defaults only
            lambda_v: vec![0.25, 0.5, 1.0, 2.0],
            alpha_v: vec![0.5, 1.0, 1.5, 2.0],
        }
    }
}

/// Rectifier family searched by [`grid_search`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneVariant {
    Vra,
    VraPlus,
}

/// One grid point. Fields that do not apply to the searched
/// variant/method are held at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunePoint {
    pub eta_alpha: f64,
    pub eta_beta: f64,
    pub gamma: f64,
    pub lambda_v: f64,
    pub alpha_v: f64,
}

impl TunePoint {
    fn key(&self) -> [f64; 5] {
        [self.eta_alpha, self.eta_beta, self.gamma, self.lambda_v, self.alpha_v]
    }
}

/// Result of evaluating one grid point on the validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub point: TunePoint,
    pub auroc: f64,
    pub fpr95: f64,
}

/// Winner of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub spec: RectifierSpec,
    pub point: TunePoint,
    /// The scoring method with any tuned parameters filled in.
    pub method: ScoreMethod,
    pub report: EvalReport,
    /// Every admissible point in evaluation order.
    pub trials: Vec<Trial>,
}

/// Inputs of a grid search.
#[derive(Debug, Clone, Copy)]
pub struct TuneRequest<'a> {
    pub head: &'a ClassifierHead,
    pub id_train: &'a FeatureSet,
    pub id_test: &'a FeatureSet,
    pub validation: &'a FeatureSet,
    pub grid: &'a TuneGrid,
    pub method: ScoreMethod,
    pub variant: TuneVariant,
    pub mode: ThresholdMode,
}

fn dedup_sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("grid values must be finite".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

impl TuneRequest<'_> {
    /// Admissible points in lexicographic order of
    /// `(eta_alpha, eta_beta, gamma, lambda_v, alpha_v)`.
    pub fn points(&self) -> Result<Vec<TunePoint>> {
        let etas_a = dedup_sorted(&self.grid.eta_alpha)?;
        let etas_b = dedup_sorted(&self.grid.eta_beta)?;
        let gammas = match self.variant {
            TuneVariant::Vra => vec![0.0],
            TuneVariant::VraPlus => dedup_sorted(&self.grid.gamma)?,
        };
        let (lambdas, alphas) = match self.method {
            ScoreMethod::VraPlusPlus { .. } => {
                (dedup_sorted(&self.grid.lambda_v)?, dedup_sorted(&self.grid.alpha_v)?)
            }
            _ => (vec![0.0], vec![0.0]),
        };
        let mut points = Vec::new();
        for &eta_alpha in &etas_a {
            for &eta_beta in etas_b.iter().filter(|&&b| eta_alpha < b) {
                for &gamma in &gammas {
                    for &lambda_v in &lambdas {
                        for &alpha_v in &alphas {
                            points.push(TunePoint {
                                eta_alpha,
                                eta_beta,
                                gamma,
                                lambda_v,
                                alpha_v,
                            });
                        }
                    }
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Parameter(
                "no admissible grid point (need eta_alpha < eta_beta)".into(),
            ));
        }
        Ok(points)
    }

    /// Hyperparameters that actually vary for this request.
    pub fn hyperparams(&self, p: &TunePoint) -> BTreeMap<String, f64> {
        let mut hp = BTreeMap::from([
            ("eta_alpha".to_string(), p.eta_alpha),
            ("eta_beta".to_string(), p.eta_beta),
        ]);
        if self.variant == TuneVariant::VraPlus {
            hp.insert("gamma".into(), p.gamma);
        }
        if matches!(self.method, ScoreMethod::VraPlusPlus { .. }) {
            hp.insert("lambda_v".into(), p.lambda_v);
            hp.insert("alpha_v".into(), p.alpha_v);
        }
        hp
    }

    fn build(&self, sorted: &SortedColumns, p: &TunePoint) -> Result<(RectifierSpec, ScoreMethod)> {
        let thresholds = sorted.thresholds(p.eta_alpha, p.eta_beta, self.mode)?;
        let spec = match self.variant {
            TuneVariant::Vra => RectifierSpec::vra(thresholds),
            TuneVariant::VraPlus => RectifierSpec::vra_plus(thresholds, p.gamma)?,
        };
        let method = match self.method {
            ScoreMethod::VraPlusPlus { logits, .. } => ScoreMethod::VraPlusPlus {
                params: VraPlusPlusParams::new(p.lambda_v, p.alpha_v)?,
                logits,
            },
            other => other,
        };
        Ok((spec, method))
    }
}

/// Exhaustive search over the grid using a pseudo-OOD validation split.
///
/// Thresholds come from `id_train`; each point is scored on `id_test` versus
/// `validation`. The winner maximizes validation AUROC, then minimizes
/// FPR95, then is the lexicographically smallest point.
pub fn grid_search(req: &TuneRequest<'_>) -> Result<TuneOutcome> {
    if req.validation.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    let points = req.points()?;
    let sorted = SortedColumns::new(&req.id_train.features)?;

    let mut trials = Vec::with_capacity(points.len());
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let (spec, method) = req.build(&sorted, p)?;
        let id = score_features(req.head, req.id_test, &spec, &method)?;
        let val = score_features(req.head, req.validation, &spec, &method)?;
        let au = auroc(&id.values, &val.values)?;
        let fpr = fpr_at_95_tpr(&id.values, &val.values)?;
        trials.push(Trial {
            point: *p,
            auroc: au,
            fpr95: fpr,
        });
        // points are visited in lexicographic order, so strict improvement
        // keeps the smallest point among ties
        let better = match best {
            None => true,
            Some((_, best_au, best_fpr)) => au > best_au || (au == best_au && fpr < best_fpr),
        };
        if better {
            best = Some((i, au, fpr));
        }
    }
    let (winner, _, _) = best.expect("non-empty grid");
    let point = points[winner];
    debug_assert!(points.windows(2).all(|w| w[0].key() < w[1].key()));
    let (spec, method) = req.build(&sorted, &point)?;
    let t = &trials[winner];
    let report = EvalReport::from_entries(vec![EvalEntry {
        ood_dataset: req.validation.name.clone(),
        method: method.name().to_string(),
        fpr95: t.fpr95,
        auroc: t.auroc,
        hyperparams: req.hyperparams(&point),
    }])?;
    Ok(TuneOutcome {
        spec,
        point,
        method,
        report,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 3.0], &[1.0, 2.0]).unwrap(), 0.625);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fpr_cases() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(tpr95_threshold(&id), 2.0);
        assert_eq!(fpr_at_95_tpr(&id, &[0.0, 1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(fpr_at_95_tpr(&id, &[-5.0, 0.5]).unwrap(), 0.0);
        assert!(fpr_at_95_tpr(&id, &[]).is_err());
    }

    #[test]
    fn matched_distributions_have_high_fpr() {
        let id: Vec<f64> = (0..37).map(|i| f64::from((i * 7) % 11)).collect();
        let fpr = fpr_at_95_tpr(&id, &id).unwrap();
        assert!(fpr >= 0.95 - 1.0 / 37.0);
    }

    #[test]
    fn report_averages() {
        let mk = |name: &str, au: f64| EvalEntry {
            ood_dataset: name.into(),
            method: "energy".into(),
            fpr95: 0.1,
            auroc: au,
            hyperparams: BTreeMap::new(),
        };
        let r = EvalReport::from_entries(vec![mk("a", 0.9), mk("b", 1.0)]).unwrap();
        assert!((r.mean_auroc - 0.95).abs() < 1e-12);
        let csv = r.to_csv_string();
        assert!(csv.starts_with("dataset,method,fpr95,auroc,hyperparams\n"));
        assert!(csv.ends_with("Average,energy,0.1,0.95,\n"));
        let single = EvalReport::from_entries(vec![mk("a", 0.9)]).unwrap();
        assert_eq!((single.mean_auroc, single.mean_fpr95), (0.9, 0.1));
        assert!(single.to_table().contains("Average"));
    }
}
