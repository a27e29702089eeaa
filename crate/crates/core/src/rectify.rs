//! Activation rectifiers and threshold estimation.
//!
//! A [`RectifierSpec`] is applied elementwise to a feature matrix, column `i`
//! using the parameters of feature `i`:
//!
//! | variant     | `z < alpha` | `alpha <= z <= beta` | `z > beta` |
//! |-------------|-------------|----------------------|------------|
//! | `identity`  | `z`         | `z`                  | `z`        |
//! | `react`     | `z`         | `z`                  | `beta`     |
//! | `vra`       | `0`         | `z`                  | `beta`     |
//! | `vra_plus`  | `0`         | `z + gamma`          | `beta`     |
//!
//! `react` carries `alpha = -inf`, so it is exactly `min(z, beta)`. The
//! `tabulated` variant looks `z` up in a per-feature piecewise-constant table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::Matrix;
use crate::variational::TabulatedG;

/// Per-feature low (`alpha`) and high (`beta`) cuts.
///
/// `alpha` may be `-inf` (no low cut) and `beta` may be `+inf` (no high cut);
/// NaN is never admitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct ThresholdVector {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Deserialize)]
struct RawThresholds {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TryFrom<RawThresholds> for ThresholdVector {
    type Error = Error;

    fn try_from(raw: RawThresholds) -> Result<Self> {
        ThresholdVector::new(raw.alpha, raw.beta)
    }
}

impl ThresholdVector {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::dims("threshold beta length", alpha.len(), beta.len()));
        }
        for (i, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            if a.is_nan() || b.is_nan() || a == f64::INFINITY || b == f64::NEG_INFINITY {
                return Err(Error::Spec(format!("feature {i}: invalid cuts ({a}, {b})")));
            }
            if a > b {
                return Err(Error::Spec(format!("feature {i}: alpha {a} > beta {b}")));
            }
        }
        Ok(ThresholdVector { alpha, beta })
    }

    /// Same cuts for every feature.
    pub fn uniform(dim: usize, alpha: f64, beta: f64) -> Result<Self> {
        ThresholdVector::new(vec![alpha; dim], vec![beta; dim])
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn is_unbounded(&self, feature: usize) -> bool {
        self.beta[feature] == f64::INFINITY
    }

    fn permuted(&self, perm: &[usize]) -> ThresholdVector {
        ThresholdVector {
            alpha: perm.iter().map(|&p| self.alpha[p]).collect(),
            beta: perm.iter().map(|&p| self.beta[p]).collect(),
        }
    }
}

/// How thresholds are shared across features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Each feature gets its own quantiles.
    #[default]
    PerFeature,
    /// One pair of quantiles over all activations, replicated.
    Pooled,
}

/// Linear interpolation between order statistics (Hyndman-Fan type 7).
///
/// `sorted` must be non-empty and ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    match sorted.get(lo + 1) {
        Some(&next) => sorted[lo] + (h - lo as f64) * (next - sorted[lo]),
        None => sorted[lo],
    }
}

fn check_etas(eta_alpha: f64, eta_beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta_alpha) {
        return Err(Error::Parameter(format!("eta_alpha {eta_alpha} not in [0, 1)")));
    }
    if !(eta_beta > 0.0 && eta_beta <= 1.0) {
        return Err(Error::Parameter(format!("eta_beta {eta_beta} not in (0, 1]")));
    }
    if eta_alpha >= eta_beta {
        return Err(Error::Parameter(format!(
            "eta_alpha {eta_alpha} must be below eta_beta {eta_beta}"
        )));
    }
    Ok(())
}

/// Feature columns sorted once so that quantiles at many levels are cheap.
#[derive(Debug, Clone)]
pub struct SortedColumns {
    columns: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

impl SortedColumns {
    pub fn new(features: &Matrix) -> Result<Self> {
        if features.rows() < 2 {
            return Err(Error::InsufficientData(format!(
                "threshold estimation needs at least 2 rows, got {}",
                features.rows()
            )));
        }
        let columns: Vec<Vec<f64>> = (0..features.cols())
            .map(|c| {
                let mut col = features.column(c);
                col.sort_by(f64::total_cmp);
                col
            })
            .collect();
        let mut pooled = features.as_slice().to_vec();
        pooled.sort_by(f64::total_cmp);
        Ok(SortedColumns { columns, pooled })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn quantile(&self, feature: usize, q: f64) -> f64 {
        quantile_sorted(&self.columns[feature], q)
    }

    pub fn pooled_quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.pooled, q)
    }

    pub fn thresholds(&self, eta_alpha: f64, eta_beta: f64, mode: ThresholdMode) -> Result<ThresholdVector> {
        check_etas(eta_alpha, eta_beta)?;
        let m = self.dim();
        let (alpha, beta) = match mode {
            ThresholdMode::PerFeature => (0..m)
                .map(|i| {
                    let b = self.quantile(i, eta_beta);
                    (self.quantile(i, eta_alpha).min(b), b)
                })
                .unzip(),
            ThresholdMode::Pooled => {
                let b = self.pooled_quantile(eta_beta);
                let a = self.pooled_quantile(eta_alpha).min(b);
                (vec![a; m], vec![b; m])
            }
        };
        ThresholdVector::new(alpha, beta)
    }

    /// High cuts only (`alpha = -inf`), as used by ReAct.
    pub fn upper_cut(&self, eta_beta: f64, mode: ThresholdMode) -> Result<Vec<f64>> {
        if !(eta_beta > 0.0 && eta_beta <= 1.0) {
            return Err(Error::Parameter(format!("eta_beta {eta_beta} not in (0, 1]")));
        }
        Ok(match mode {
            ThresholdMode::PerFeature => (0..self.dim()).map(|i| self.quantile(i, eta_beta)).collect(),
            ThresholdMode::Pooled => vec![self.pooled_quantile(eta_beta); self.dim()],
        })
    }
}

/// Per-feature `eta_alpha` / `eta_beta` quantiles of ID activations.
pub fn estimate_thresholds(id_features: &Matrix, eta_alpha: f64, eta_beta: f64) -> Result<ThresholdVector> {
    check_etas(eta_alpha, eta_beta)?;
    SortedColumns::new(id_features)?.thresholds(eta_alpha, eta_beta, ThresholdMode::PerFeature)
}

/// One pair of quantiles over all ID activations, shared by every feature.
pub fn estimate_pooled_thresholds(id_features: &Matrix, eta_alpha: f64, eta_beta: f64) -> Result<ThresholdVector> {
    check_etas(eta_alpha, eta_beta)?;
    SortedColumns::new(id_features)?.thresholds(eta_alpha, eta_beta, ThresholdMode::Pooled)
}

/// Piecewise-constant map over strictly increasing bin edges.
///
/// Bins are half-open `[e_b, e_{b+1})` except the last, which is closed.
/// Inputs below the first edge map to `low`, above the last edge to `high`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct FeatureTable {
    edges: Vec<f64>,
    values: Vec<f64>,
    low: f64,
    high: f64,
}

#[derive(Deserialize)]
struct RawTable {
    edges: Vec<f64>,
    values: Vec<f64>,
    low: f64,
    high: f64,
}

impl TryFrom<RawTable> for FeatureTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        FeatureTable::with_out_of_range(raw.edges, raw.values, raw.low, raw.high)
    }
}

impl FeatureTable {
    /// Table whose out-of-range values extend the first and last bins.
    pub fn new(edges: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let low = *values.first().ok_or_else(|| Error::Spec("empty table".into()))?;
        let high = *values.last().expect("non-empty");
        FeatureTable::with_out_of_range(edges, values, low, high)
    }

    pub fn with_out_of_range(edges: Vec<f64>, values: Vec<f64>, low: f64, high: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Spec("empty table".into()));
        }
        if edges.len() != values.len() + 1 {
            return Err(Error::dims("table edge count", values.len() + 1, edges.len()));
        }
        check_edges(&edges).map_err(Error::Spec)?;
        if values.iter().chain([&low, &high]).any(|v| !v.is_finite()) {
            return Err(Error::Spec("table values must be finite".into()));
        }
        Ok(FeatureTable {
            edges,
            values,
            low,
            high,
        })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn out_of_range(&self) -> (f64, f64) {
        (self.low, self.high)
    }

    pub fn lookup(&self, z: f64) -> f64 {
        let last = *self.edges.last().expect("edges non-empty");
        if z < self.edges[0] {
            self.low
        } else if z > last {
            self.high
        } else {
            self.values[bin_index(&self.edges, z)]
        }
    }

    /// True when the map is non-decreasing over the whole real line.
    pub fn is_non_decreasing(&self) -> bool {
        let mut seq = std::iter::once(self.low)
            .chain(self.values.iter().copied())
            .chain(std::iter::once(self.high));
        let mut prev = seq.next().expect("non-empty");
        seq.all(|v| {
            let ok = v >= prev;
            prev = v;
            ok
        })
    }
}

pub(crate) fn check_edges(edges: &[f64]) -> std::result::Result<(), String> {
    if edges.len() < 2 {
        return Err(format!("need at least 2 bin edges, got {}", edges.len()));
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err("bin edges must be finite".into());
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err("bin edges must be strictly increasing".into());
    }
    Ok(())
}

/// Bin containing `z`, clamping out-of-range values into the end bins.
pub(crate) fn bin_index(edges: &[f64], z: f64) -> usize {
    let bins = edges.len() - 1;
    // number of edges <= z, minus one, is the half-open bin
    let upper = edges.partition_point(|&e| e <= z);
    upper.saturating_sub(1).min(bins - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Identity,
    React,
    Vra,
    VraPlus,
    Tabulated,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Identity => "identity",
            Variant::React => "react",
            Variant::Vra => "vra",
            Variant::VraPlus => "vra_plus",
            Variant::Tabulated => "tabulated",
        }
    }
}

/// A complete rectification function for an `m`-dimensional feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc", into = "SpecDoc")]
pub struct RectifierSpec {
    variant: Variant,
    dim: usize,
    thresholds: Option<ThresholdVector>,
    gamma: f64,
    tables: Vec<FeatureTable>,
}

/// Serialized layout of a [`RectifierSpec`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    variant: Variant,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
    #[serde(default, rename = "table", skip_serializing_if = "Vec::is_empty")]
    tables: Vec<FeatureTable>,
}

impl From<RectifierSpec> for SpecDoc {
    fn from(spec: RectifierSpec) -> Self {
        let (alpha, beta) = match spec.thresholds {
            Some(t) if spec.variant == Variant::React => (None, Some(t.beta)),
            Some(t) => (Some(t.alpha), Some(t.beta)),
            None => (None, None),
        };
        SpecDoc {
            variant: spec.variant,
            dim: spec.dim,
            gamma: (spec.variant == Variant::VraPlus).then_some(spec.gamma),
            alpha,
            beta,
            tables: spec.tables,
        }
    }
}

impl TryFrom<SpecDoc> for RectifierSpec {
    type Error = Error;

    fn try_from(doc: SpecDoc) -> Result<Self> {
        let needs = |field: Option<Vec<f64>>, name: &str| {
            field.ok_or_else(|| Error::Spec(format!("{} requires `{name}`", doc.variant.as_str())))
        };
        let spec = match doc.variant {
            Variant::Identity => RectifierSpec::identity(doc.dim),
            Variant::React => RectifierSpec::react(needs(doc.beta, "beta")?)?,
            Variant::Vra => RectifierSpec::vra(ThresholdVector::new(
                needs(doc.alpha, "alpha")?,
                needs(doc.beta, "beta")?,
            )?),
            Variant::VraPlus => {
                let gamma = doc
                    .gamma
                    .ok_or_else(|| Error::Spec("vra_plus requires `gamma`".into()))?;
                RectifierSpec::vra_plus(
                    ThresholdVector::new(needs(doc.alpha, "alpha")?, needs(doc.beta, "beta")?)?,
                    gamma,
                )?
            }
            Variant::Tabulated => RectifierSpec::tabulated(doc.tables)?,
        };
        if spec.dim != doc.dim {
            return Err(Error::dims("spec dim", doc.dim, spec.dim));
        }
        if doc.variant != Variant::VraPlus && doc.gamma.is_some_and(|g| g != 0.0) {
            return Err(Error::Spec(format!("gamma is only valid for vra_plus")));
        }
        Ok(spec)
    }
}

impl RectifierSpec {
    pub fn identity(dim: usize) -> Self {
        RectifierSpec {
            variant: Variant::Identity,
            dim,
            thresholds: None,
            gamma: 0.0,
            tables: Vec::new(),
        }
    }

    /// `min(z, beta_i)`; a `+inf` entry disables truncation for that feature.
    pub fn react(beta: Vec<f64>) -> Result<Self> {
        let alpha = vec![f64::NEG_INFINITY; beta.len()];
        let thresholds = ThresholdVector::new(alpha, beta)?;
        Ok(RectifierSpec {
            variant: Variant::React,
            dim: thresholds.dim(),
            thresholds: Some(thresholds),
            gamma: 0.0,
            tables: Vec::new(),
        })
    }

    pub fn vra(thresholds: ThresholdVector) -> Self {
        RectifierSpec {
            variant: Variant::Vra,
            dim: thresholds.dim(),
            thresholds: Some(thresholds),
            gamma: 0.0,
            tables: Vec::new(),
        }
    }

    pub fn vra_plus(thresholds: ThresholdVector, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Parameter(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(RectifierSpec {
            variant: Variant::VraPlus,
            dim: thresholds.dim(),
            thresholds: Some(thresholds),
            gamma,
            tables: Vec::new(),
        })
    }

    pub fn tabulated(tables: Vec<FeatureTable>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::Spec("tabulated spec needs one table per feature".into()));
        }
        Ok(RectifierSpec {
            variant: Variant::Tabulated,
            dim: tables.len(),
            thresholds: None,
            gamma: 0.0,
            tables,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn thresholds(&self) -> Option<&ThresholdVector> {
        self.thresholds.as_ref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tables(&self) -> &[FeatureTable] {
        &self.tables
    }

    /// Rectified value of activation `z` on feature `feature`.
    #[inline]
    pub fn rectify_value(&self, feature: usize, z: f64) -> f64 {
        match self.variant {
            Variant::Identity => z,
            Variant::Tabulated => self.tables[feature].lookup(z),
            Variant::React => {
                let t = self.thresholds.as_ref().expect("react has thresholds");
                z.min(t.beta[feature])
            }
            Variant::Vra | Variant::VraPlus => {
                let t = self.thresholds.as_ref().expect("vra has thresholds");
                let (alpha, beta) = (t.alpha[feature], t.beta[feature]);
                if z < alpha {
                    0.0
                } else if z > beta {
                    beta
                } else if self.variant == Variant::VraPlus {
                    z + self.gamma
                } else {
                    z
                }
            }
        }
    }

    /// Applies the rectifier to every row of an `N x m` matrix.
    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim {
            return Err(Error::dims("rectifier feature dimension", self.dim, features.cols()));
        }
        if self.variant == Variant::Identity {
            return Ok(features.clone());
        }
        let m = self.dim;
        let data = features
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &z)| self.rectify_value(k % m, z))
            .collect();
        Ok(Matrix::from_parts_unchecked(features.rows(), m, data))
    }

    /// Spec acting on columns reordered by `perm` (see [`Matrix::permute_columns`]).
    pub fn permute_features(&self, perm: &[usize]) -> Result<RectifierSpec> {
        if perm.len() != self.dim {
            return Err(Error::dims("feature permutation", self.dim, perm.len()));
        }
        Ok(RectifierSpec {
            variant: self.variant,
            dim: self.dim,
            thresholds: self.thresholds.as_ref().map(|t| t.permuted(perm)),
            gamma: self.gamma,
            tables: if self.tables.is_empty() {
                Vec::new()
            } else {
                perm.iter().map(|&p| self.tables[p].clone()).collect()
            },
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }
}

/// Free-function form of [`RectifierSpec::apply`].
pub fn apply_rectifier(spec: &RectifierSpec, features: &Matrix) -> Result<Matrix> {
    spec.apply(features)
}

/// Source of `g*` tables for [`tabulate_gstar`].
#[derive(Debug, Clone)]
pub enum GstarTables {
    /// One table fit on all activations, shared by every feature.
    Pooled(TabulatedG),
    /// One table per feature.
    PerFeature(Vec<TabulatedG>),
}

/// Wraps tabulated `g*` estimates as a rectifier.
pub fn tabulate_gstar(gstar: &GstarTables, feature_dim: usize) -> Result<RectifierSpec> {
    let tables = match gstar {
        GstarTables::Pooled(g) => vec![g.to_feature_table()?; feature_dim],
        GstarTables::PerFeature(gs) => {
            if gs.len() != feature_dim {
                return Err(Error::dims("g* table count", feature_dim, gs.len()));
            }
            gs.iter().map(TabulatedG::to_feature_table).collect::<Result<_>>()?
        }
    };
    if feature_dim == 0 {
        return Err(Error::Spec("tabulated spec needs at least one feature".into()));
    }
    RectifierSpec::tabulated(tables)
}
