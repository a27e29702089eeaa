//! Synthetic feature benchmark.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed` via `seed_from_u64`, one stream per artifact so that resizing one
//! split leaves the others unchanged:
//!
//! | stream | artifact              |
//! |--------|-----------------------|
//! | 0      | head weights and bias |
//! | 1      | `id_train` features   |
//! | 2      | `id_test` features    |
//! | 3      | `ood` features        |
//! | 4      | `validation` features |
//!
//! ID rows are `id_mean + id_scale * N(0, 1)` per coordinate. OOD rows are
//! `ood_mean + ood_scale * T` where `T` is Student-t with `ood_tail_df`
//! degrees of freedom (standard normal when unset). Validation rows are
//! pseudo-OOD noise `N(0, noise_scale^2)`. Head weights are
//! `(head_mean + head_scale * N(0, 1)) / sqrt(m)` and biases
//! `N(0, bias_scale^2)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use vra_core::tensor_io::{write_matrix_to, DatasetEntry, DatasetManifest, HeadEntry, FORMAT_VERSION};
use vra_core::{Matrix, Role};

use crate::error::CliError;
use crate::output::Outputs;

/// A per-coordinate value given either once for all coordinates or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCoordinate {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerCoordinate {
    fn expand(&self, dim: usize, what: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerCoordinate::Scalar(v) => Ok(vec![*v; dim]),
            PerCoordinate::Vector(v) if v.len() == dim => Ok(v.clone()),
            PerCoordinate::Vector(v) => Err(CliError::Usage(format!(
                "{what} has {} entries, expected {dim}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// Rows per split.
    pub n: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "zero")]
    pub id_mean: PerCoordinate,
    #[serde(default = "one")]
    pub id_scale: PerCoordinate,
    pub ood_mean: PerCoordinate,
    #[serde(default = "one")]
    pub ood_scale: PerCoordinate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_tail_df: Option<f64>,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub head_mean: f64,
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}
fn zero() -> PerCoordinate {
    PerCoordinate::Scalar(0.0)
}
fn one() -> PerCoordinate {
    PerCoordinate::Scalar(1.0)
}
fn default_noise_scale() -> f64 {
    2.0
}
fn default_head_scale() -> f64 {
    1.0
}
fn default_bias_scale() -> f64 {
    0.1
}

impl SyntheticSpec {
    /// ID `N(0, I)` against OOD shifted by `shift` on every coordinate.
    pub fn shifted(dim: usize, n: usize, shift: f64, seed: u64) -> Self {
        SyntheticSpec {
            dim,
            n,
            classes: default_classes(),
            id_mean: zero(),
            id_scale: one(),
            ood_mean: PerCoordinate::Scalar(shift),
            ood_scale: one(),
            ood_tail_df: None,
            noise_scale: default_noise_scale(),
            head_mean: 0.0,
            head_scale: default_head_scale(),
            bias_scale: default_bias_scale(),
            seed,
        }
    }

    fn validate(&self) -> Result<Resolved, CliError> {
        if self.dim == 0 {
            return Err(CliError::Usage("synth: dim must be >= 1".into()));
        }
        if self.n < 2 {
            return Err(CliError::Usage("synth: n must be >= 2".into()));
        }
        if self.classes < 2 {
            return Err(CliError::Usage("synth: classes must be >= 2".into()));
        }
        let r = Resolved {
            id_mean: self.id_mean.expand(self.dim, "id_mean")?,
            id_scale: self.id_scale.expand(self.dim, "id_scale")?,
            ood_mean: self.ood_mean.expand(self.dim, "ood_mean")?,
            ood_scale: self.ood_scale.expand(self.dim, "ood_scale")?,
        };
        let positive = |v: &[f64]| v.iter().all(|s| *s > 0.0 && s.is_finite());
        if !positive(&r.id_scale) || !positive(&r.ood_scale) {
            return Err(CliError::Usage("synth: scales must be > 0".into()));
        }
        if !r.id_mean.iter().chain(&r.ood_mean).all(|v| v.is_finite()) {
            return Err(CliError::Usage("synth: means must be finite".into()));
        }
        if !self.head_mean.is_finite() {
            return Err(CliError::Usage("synth: head_mean must be finite".into()));
        }
        if !(self.noise_scale > 0.0 && self.head_scale > 0.0 && self.bias_scale >= 0.0) {
            return Err(CliError::Usage("synth: noise/head scales must be > 0".into()));
        }
        if self.ood_tail_df.is_some_and(|df| !(df > 0.0)) {
            return Err(CliError::Usage("synth: ood_tail_df must be > 0".into()));
        }
        Ok(r)
    }
}

struct Resolved {
    id_mean: Vec<f64>,
    id_scale: Vec<f64>,
    ood_mean: Vec<f64>,
    ood_scale: Vec<f64>,
}

/// In-memory synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub weights: Matrix,
    pub bias: Matrix,
    pub id_train: Matrix,
    pub id_test: Matrix,
    pub ood: Matrix,
    pub validation: Matrix,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut data = Vec::with_capacity(n * mean.len());
    for _ in 0..n {
        for (m, s) in mean.iter().zip(scale) {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + s * z);
        }
    }
    Matrix::new(n, mean.len(), data).expect("finite draws")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, CliError> {
    let r = spec.validate()?;
    let (m, c) = (spec.dim, spec.classes);

    let mut head_rng = stream(spec.seed, 0);
    let root_m = (m as f64).sqrt();
    let weights: Vec<f64> = (0..c * m)
        .map(|_| (spec.head_mean + spec.head_scale * head_rng.sample::<f64, _>(StandardNormal)) / root_m)
        .collect();
    let bias: Vec<f64> = (0..c)
        .map(|_| spec.bias_scale * head_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let id_train = gaussian_rows(&mut stream(spec.seed, 1), spec.n, &r.id_mean, &r.id_scale);
    let id_test = gaussian_rows(&mut stream(spec.seed, 2), spec.n, &r.id_mean, &r.id_scale);

    let mut ood_rng = stream(spec.seed, 3);
    let ood = match spec.ood_tail_df {
        None => gaussian_rows(&mut ood_rng, spec.n, &r.ood_mean, &r.ood_scale),
        Some(df) => {
            let t = StudentT::new(df).map_err(|e| CliError::Usage(format!("synth: {e}")))?;
            let mut data = Vec::with_capacity(spec.n * m);
            for _ in 0..spec.n {
                for (mu, s) in r.ood_mean.iter().zip(&r.ood_scale) {
                    data.push(mu + s * t.sample(&mut ood_rng));
                }
            }
            Matrix::new(spec.n, m, data)?
        }
    };

    let noise = vec![spec.noise_scale; m];
    let validation = gaussian_rows(&mut stream(spec.seed, 4), spec.n, &vec![0.0; m], &noise);

    Ok(SyntheticData {
        weights: Matrix::new(c, m, weights)?,
        bias: Matrix::new(1, c, bias)?,
        id_train,
        id_test,
        ood,
        validation,
    })
}

pub const MANIFEST_NAME: &str = "manifest.toml";

fn npy_bytes(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::new();
    write_matrix_to(m, &mut buf).expect("writing to memory");
    buf
}

/// Buffers the benchmark tensors and their manifest (paths relative to the
/// output directory).
pub fn benchmark_outputs(data: &SyntheticData) -> Outputs {
    let mut out = Outputs::new();
    let mut put = |name: &str, m: &Matrix| {
        out.add(name, npy_bytes(m));
        PathBuf::from(name)
    };
    let head = HeadEntry {
        weights: put("head_weights.npy", &data.weights),
        bias: put("head_bias.npy", &data.bias),
    };
    let mut datasets = Vec::new();
    for (name, role, m) in [
        ("id_train", Role::IdTrain, &data.id_train),
        ("id_test", Role::IdTest, &data.id_test),
        ("ood", Role::Ood, &data.ood),
        ("validation", Role::Validation, &data.validation),
    ] {
        datasets.push(DatasetEntry {
            name: name.into(),
            role,
            features: put(&format!("{name}.npy"), m),
            labels: None,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        head,
        datasets,
    };
    out.add(MANIFEST_NAME, manifest.to_toml_string());
    out
}

/// Writes the benchmark into `dir` and returns the manifest path.
pub fn write_benchmark(data: &SyntheticData, dir: &Path) -> Result<PathBuf, CliError> {
    benchmark_outputs(data).commit(dir)?;
    Ok(dir.join(MANIFEST_NAME))
}
