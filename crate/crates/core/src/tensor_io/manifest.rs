//! Dataset manifests.
//!
//! A manifest is a TOML document with one `[head]` table and one
//! `[[dataset]]` table per feature file:
//!
//! ```toml
//! format_version = 1
//!
//! [head]
//! weights = "head_weights.npy"
//! bias = "head_bias.npy"
//!
//! [[dataset]]
//! name = "cifar10_test"
//! role = "id_test"
//! features = "cifar10_test.npy"
//! labels = "cifar10_test_labels.npy"
//! ```
//!
//! Paths are resolved relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_labels, load_matrix, ClassifierHead, FeatureSet, Matrix, Role};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub head: HeadEntry,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadEntry {
    pub weights: PathBuf,
    pub bias: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub role: Role,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Everything a run needs: feature sets sorted by name plus the head.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    sets: Vec<FeatureSet>,
    head: ClassifierHead,
}

impl RunData {
    /// Cross-validates the sets against the head. Names must be unique and
    /// every set must share the head's feature dimension.
    pub fn new(mut sets: Vec<FeatureSet>, head: ClassifierHead) -> Result<Self> {
        let m = head.feature_dim();
        let mut names = BTreeSet::new();
        for set in &sets {
            if !names.insert(set.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate dataset name {:?}", set.name)));
            }
            if set.dim() != m {
                return Err(Error::dims(
                    format!("feature dimension of {:?}", set.name),
                    m,
                    set.dim(),
                ));
            }
            if let Some(labels) = &set.labels {
                if labels.len() != set.len() {
                    return Err(Error::dims(
                        format!("label count of {:?}", set.name),
                        set.len(),
                        labels.len(),
                    ));
                }
            }
        }
        sets.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(RunData { sets, head })
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    pub fn sets(&self) -> &[FeatureSet] {
        &self.sets
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSet> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &FeatureSet> + '_ {
        self.sets.iter().filter(move |s| s.role == role)
    }

    /// All sets of one role stacked in name order, or `None` if there are
    /// none. A single set is returned under its own name.
    pub fn stacked(&self, role: Role) -> Option<FeatureSet> {
        let parts: Vec<&FeatureSet> = self.with_role(role).collect();
        match parts.as_slice() {
            [] => None,
            [one] => Some((*one).clone()),
            many => {
                let matrices: Vec<&Matrix> = many.iter().map(|s| &s.features).collect();
                let features = Matrix::vstack(&matrices).expect("dims validated");
                let labels = many
                    .iter()
                    .map(|s| s.labels.clone())
                    .collect::<Option<Vec<_>>>()
                    .map(|l| l.concat());
                Some(FeatureSet {
                    name: role.as_str().to_string(),
                    role,
                    features,
                    labels,
                })
            }
        }
    }

    /// Checks that the run has the sets an evaluation needs.
    pub fn require_eval(&self) -> Result<()> {
        self.require_role(Role::IdTest)?;
        self.require_role(Role::Ood)
    }

    pub fn require_role(&self, role: Role) -> Result<()> {
        if self.with_role(role).next().is_none() {
            return Err(Error::Manifest(format!("no {role} dataset listed")));
        }
        Ok(())
    }
}

/// Loads a manifest and every tensor it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(DatasetManifest, RunData)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let weights = load_matrix(base.join(&manifest.head.weights))?;
    let bias_matrix = load_matrix(base.join(&manifest.head.bias))?;
    if bias_matrix.rows() != 1 && bias_matrix.cols() != 1 {
        return Err(Error::Manifest(format!(
            "head bias must be a vector, got {}x{}",
            bias_matrix.rows(),
            bias_matrix.cols()
        )));
    }
    let head = ClassifierHead::new(weights, bias_matrix.into_vec())?;

    let mut sets = Vec::with_capacity(manifest.datasets.len());
    for entry in &manifest.datasets {
        let features = load_matrix(base.join(&entry.features))?;
        let labels = match &entry.labels {
            Some(p) => Some(load_labels(base.join(p))?),
            None => None,
        };
        sets.push(FeatureSet {
            name: entry.name.clone(),
            role: entry.role,
            features,
            labels,
        });
    }
    let run = RunData::new(sets, head)?;
    Ok((manifest, run))
}
