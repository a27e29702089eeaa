//! Logit recomputation and per-sample detection scores.
//!
//! Every score follows the same convention: larger means more
//! in-distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{ClassifierHead, Matrix};

/// Scores for one scored feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub method: String,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parameters of the quadratic feature term `-lambda_v * sum(z^2 - alpha_v z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VraPlusPlusParams {
    pub lambda_v: f64,
    pub alpha_v: f64,
}

impl VraPlusPlusParams {
    pub fn new(lambda_v: f64, alpha_v: f64) -> Result<Self> {
        if !(lambda_v.is_finite() && lambda_v >= 0.0 && alpha_v.is_finite()) {
            return Err(Error::Parameter(format!(
                "VRA++ needs finite lambda_v >= 0 and alpha_v, got ({lambda_v}, {alpha_v})"
            )));
        }
        Ok(VraPlusPlusParams { lambda_v, alpha_v })
    }
}

/// Which features feed the logits of the VRA++ energy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitSource {
    /// Logits of the unrectified features.
    #[default]
    Raw,
    /// Logits of the rectified features.
    Rectified,
}

/// A scoring function with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMethod {
    Msp,
    Energy { temperature: f64 },
    OdinT { temperature: f64 },
    VraPlusPlus { params: VraPlusPlusParams, logits: LogitSource },
    FeatureSum,
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::Energy { .. } => "energy",
            ScoreMethod::OdinT { .. } => "odin-t",
            ScoreMethod::VraPlusPlus { .. } => "vra-pp",
            ScoreMethod::FeatureSum => "feature-sum",
        }
    }

    /// Scores raw features after rectification with `rectify`.
    pub fn score(
        &self,
        head: &ClassifierHead,
        raw: &Matrix,
        rectify: impl FnOnce(&Matrix) -> Result<Matrix>,
    ) -> Result<ScoreVector> {
        match *self {
            ScoreMethod::Msp => score_msp(&forward_logits(head, &rectify(raw)?)?),
            ScoreMethod::Energy { temperature } => {
                score_energy(&forward_logits(head, &rectify(raw)?)?, temperature)
            }
            ScoreMethod::OdinT { temperature } => {
                score_odin_t(&forward_logits(head, &rectify(raw)?)?, temperature)
            }
            ScoreMethod::FeatureSum => Ok(score_feature_sum(&rectify(raw)?)),
            ScoreMethod::VraPlusPlus { params, logits } => {
                let logits = match logits {
                    LogitSource::Raw => forward_logits(head, raw)?,
                    LogitSource::Rectified => forward_logits(head, &rectify(raw)?)?,
                };
                score_vra_pp(raw, &logits, params)
            }
        }
    }
}

/// `logits[n] = W rectified[n] + b`.
pub fn forward_logits(head: &ClassifierHead, rectified: &Matrix) -> Result<Matrix> {
    let w = head.weights();
    if rectified.cols() != w.cols() {
        return Err(Error::dims("head input dimension", w.cols(), rectified.cols()));
    }
    let classes = head.num_classes();
    let mut data = Vec::with_capacity(rectified.rows() * classes);
    for z in rectified.iter_rows() {
        for (c, &b) in head.bias().iter().enumerate() {
            let dot: f64 = w.row(c).iter().zip(z).map(|(a, x)| a * x).sum();
            data.push(dot + b);
        }
    }
    Matrix::new(rectified.rows(), classes, data)
}

/// `log sum exp(row)` with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

fn max_softmax(row: &[f64], temperature: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // the max entry contributes exp(0) = 1
    let denom: f64 = row.iter().map(|&l| ((l - max) / temperature).exp()).sum();
    1.0 / denom
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")))
    }
}

fn check_classes(logits: &Matrix) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::dims("softmax class count (minimum)", 2, logits.cols()));
    }
    Ok(())
}

/// Maximum softmax probability.
pub fn score_msp(logits: &Matrix) -> Result<ScoreVector> {
    check_classes(logits)?;
    Ok(ScoreVector {
        values: logits.iter_rows().map(|r| max_softmax(r, 1.0)).collect(),
        method: "msp".into(),
    })
}

/// `T * logsumexp(logits / T)`.
pub fn score_energy(logits: &Matrix, temperature: f64) -> Result<ScoreVector> {
    check_temperature(temperature)?;
    let values = if temperature == 1.0 {
        logits.iter_rows().map(logsumexp).collect()
    } else {
        logits
            .iter_rows()
            .map(|r| {
                let scaled: Vec<f64> = r.iter().map(|l| l / temperature).collect();
                temperature * logsumexp(&scaled)
            })
            .collect()
    };
    Ok(ScoreVector {
        values,
        method: "energy".into(),
    })
}

/// Maximum softmax of temperature-scaled logits (no input perturbation).
pub fn score_odin_t(logits: &Matrix, temperature: f64) -> Result<ScoreVector> {
    check_temperature(temperature)?;
    check_classes(logits)?;
    Ok(ScoreVector {
        values: logits.iter_rows().map(|r| max_softmax(r, temperature)).collect(),
        method: "odin-t".into(),
    })
}

/// `-lambda_v * sum_i (z_i^2 - alpha_v z_i) + logsumexp(logits)`.
pub fn score_vra_pp(features: &Matrix, logits: &Matrix, p: VraPlusPlusParams) -> Result<ScoreVector> {
    if features.rows() != logits.rows() {
        return Err(Error::dims("VRA++ logit rows", features.rows(), logits.rows()));
    }
    let values = features
        .iter_rows()
        .zip(logits.iter_rows())
        .map(|(z, l)| {
            let quad: f64 = z.iter().map(|&x| x * x - p.alpha_v * x).sum();
            -p.lambda_v * quad + logsumexp(l)
        })
        .collect();
    Ok(ScoreVector {
        values,
        method: "vra-pp".into(),
    })
}

/// Sum of rectified features per row.
pub fn score_feature_sum(rectified: &Matrix) -> ScoreVector {
    ScoreVector {
        values: rectified.iter_rows().map(|r| r.iter().sum()).collect(),
        method: "feature-sum".into(),
    }
}

/// `lambda_v * sum_i g(z_i) + logsumexp(logits)` for already rectified features.
pub fn score_feature_energy(rectified: &Matrix, logits: &Matrix, lambda_v: f64) -> Result<ScoreVector> {
    if rectified.rows() != logits.rows() {
        return Err(Error::dims("logit rows", rectified.rows(), logits.rows()));
    }
    let values = rectified
        .iter_rows()
        .zip(logits.iter_rows())
        .map(|(g, l)| lambda_v * g.iter().sum::<f64>() + logsumexp(l))
        .collect();
    Ok(ScoreVector {
        values,
        method: "feature-energy".into(),
    })
}
