//! Trained-model artifact: one JSON document with the pipeline config,
//! node weights keyed `"l:k"` in canonical order, and the support vectors
//! of every one-vs-rest machine.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DataError, Stream};
use crate::hierarchy::{Hierarchy, NodeId, PoolOptions};
use crate::kernels::{CombineVariant, KernelConfig};
use crate::simplex;
use crate::svm::{BinaryMachine, SvmModel, TrainConfig};

pub const ARTIFACT_FORMAT: &str = "hieragg-model/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerRoute {
    /// Alternating SVM / weight updates.
    Em,
    /// Contrastive weight learning followed by one SVM fit.
    Dmkl,
}

impl TrainerRoute {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainerRoute::Em => "em",
            TrainerRoute::Dmkl => "dmkl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactConfig {
    pub depth: usize,
    pub variant: CombineVariant,
    pub kernel: KernelConfig,
    pub stream: Stream,
    pub route: TrainerRoute,
    #[serde(default)]
    pub frame_l2: bool,
    #[serde(default)]
    pub node_l2: bool,
    /// Per-node factors applied to pooled vectors before the kernel.
    #[serde(default)]
    pub node_scale: Option<Vec<f64>>,
    pub svm: TrainConfig,
    pub seed: u64,
}

impl ArtifactConfig {
    pub fn pool_options(&self) -> PoolOptions {
        PoolOptions {
            frame_l2: self.frame_l2,
            node_l2: self.node_l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMachine {
    pub class: usize,
    pub support_ids: Vec<String>,
    pub alpha: Vec<f64>,
    pub y: Vec<f64>,
    pub b: f64,
}

impl ClassMachine {
    /// `sum_s alpha_s y_s k_s + b` over the support vectors, where
    /// `k_col[s]` is the kernel against `support_ids[s]`.
    pub fn decision(&self, k_col: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(&self.y)
            .zip(k_col)
            .fold(0.0, |acc, ((&a, &y), &k)| acc + a * y * k)
            + self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub config: ArtifactConfig,
    pub beta: IndexMap<String, f64>,
    pub train_count: usize,
    pub classes: Vec<ClassMachine>,
}

impl ModelArtifact {
    pub fn from_model(config: ArtifactConfig, beta: &[f64], model: &SvmModel<f64>) -> Result<Self, DataError> {
        let h = Hierarchy::new(config.depth).map_err(|e| DataError::Artifact(e.to_string()))?;
        if beta.len() != h.node_count() {
            return Err(DataError::Artifact(format!(
                "{} weights for a depth-{} hierarchy",
                beta.len(),
                config.depth
            )));
        }
        let beta = h.nodes().zip(beta).map(|(node, &b)| (node.key(), b)).collect();
        let classes = model
            .machines
            .iter()
            .map(|m| sparse_machine(m, &model.train_ids))
            .collect();
        Ok(Self {
            format: ARTIFACT_FORMAT.to_string(),
            config,
            beta,
            train_count: model.train_ids.len(),
            classes,
        })
    }

    /// Node weights in canonical order, validated against the hierarchy.
    pub fn beta_vec(&self) -> Result<Vec<f64>, DataError> {
        let h = Hierarchy::new(self.config.depth).map_err(|e| DataError::Artifact(e.to_string()))?;
        if self.beta.len() != h.node_count() {
            return Err(DataError::Artifact(format!(
                "{} weights for a depth-{} hierarchy",
                self.beta.len(),
                self.config.depth
            )));
        }
        let mut out = Vec::with_capacity(self.beta.len());
        for (node, (key, &b)) in h.nodes().zip(&self.beta) {
            if NodeId::parse_key(key) != Some(node) {
                return Err(DataError::Artifact(format!(
                    "weight key '{key}' where '{node}' was expected"
                )));
            }
            out.push(b);
        }
        simplex::check_simplex(&out, simplex::SIMPLEX_TOL).map_err(|e| DataError::Artifact(e.to_string()))?;
        Ok(out)
    }

    /// Support video ids across all classes, first-seen order.
    pub fn support_ids(&self) -> Vec<String> {
        let mut seen = indexmap::IndexSet::new();
        for c in &self.classes {
            for id in &c.support_ids {
                seen.insert(id.clone());
            }
        }
        seen.into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let a: Self = serde_json::from_str(text).map_err(|e| DataError::Artifact(e.to_string()))?;
        if a.format != ARTIFACT_FORMAT {
            return Err(DataError::Artifact(format!("unsupported format '{}'", a.format)));
        }
        for (i, c) in a.classes.iter().enumerate() {
            if c.class != i + 1 {
                return Err(DataError::Artifact(format!(
                    "machine {} is labelled class {}",
                    i + 1,
                    c.class
                )));
            }
            if c.alpha.len() != c.support_ids.len() || c.y.len() != c.support_ids.len() {
                return Err(DataError::Artifact(format!("class {}: ragged support arrays", c.class)));
            }
        }
        a.beta_vec()?;
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }
}

fn sparse_machine(m: &BinaryMachine<f64>, ids: &[String]) -> ClassMachine {
    let support: Vec<usize> = m.support().collect();
    ClassMachine {
        class: m.class,
        support_ids: support.iter().map(|&i| ids[i].clone()).collect(),
        alpha: support.iter().map(|&i| m.alpha[i]).collect(),
        y: support.iter().map(|&i| m.y[i]).collect(),
        b: m.b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ArtifactConfig {
        ArtifactConfig {
            depth: 2,
            variant: CombineVariant::Averaging,
            kernel: KernelConfig::rbf(0.5),
            stream: Stream::Appearance,
            route: TrainerRoute::Em,
            frame_l2: false,
            node_l2: false,
            node_scale: Some(vec![1.0, 2.0, 0.5]),
            svm: TrainConfig::default(),
            seed: 7,
        }
    }

    fn model() -> SvmModel<f64> {
        SvmModel {
            train_ids: vec!["a".into(), "b".into(), "c".into()],
            machines: vec![
                BinaryMachine {
                    class: 1,
                    alpha: vec![0.5, 0.0, 0.5],
                    y: vec![1.0, -1.0, -1.0],
                    b: 0.1,
                    objective: -0.5,
                    iterations: 3,
                },
                BinaryMachine {
                    class: 2,
                    alpha: vec![0.25, 0.25, 0.0],
                    y: vec![-1.0, 1.0, -1.0],
                    b: -0.2,
                    objective: -0.25,
                    iterations: 2,
                },
            ],
        }
    }

    #[test]
    fn keys_follow_canonical_order() {
        let a = ModelArtifact::from_model(config(), &[0.5, 0.25, 0.25], &model()).unwrap();
        let keys: Vec<&str> = a.beta.keys().map(String::as_str).collect();
        assert_eq!(keys, ["1:1", "2:1", "2:2"]);
        assert_eq!(a.classes[0].support_ids, ["a", "c"]);
        assert_eq!(a.support_ids(), ["a", "c", "b"]);
    }

    #[test]
    fn json_roundtrip() {
        let a = ModelArtifact::from_model(config(), &[0.5, 0.25, 0.25], &model()).unwrap();
        let back = ModelArtifact::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.beta_vec().unwrap(), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn sparse_decision_matches_dense() {
        let m = model();
        let a = ModelArtifact::from_model(config(), &[0.5, 0.25, 0.25], &m).unwrap();
        let col = [0.3, 0.9, 0.2];
        let dense = m.machines[0].decision(&col);
        let sparse = a.classes[0].decision(&[col[0], col[2]]);
        assert_eq!(dense, sparse);
    }

    #[test]
    fn rejects_off_simplex_weights() {
        let mut a = ModelArtifact::from_model(config(), &[0.5, 0.25, 0.25], &model()).unwrap();
        a.beta.insert("2:2".into(), 0.5);
        assert!(ModelArtifact::from_json(&a.to_json()).is_err());
        assert!(ModelArtifact::from_model(config(), &[1.0], &model()).is_err());
    }
}
