//! Robot morphologies as data: identity, action and proprioception widths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

/// Stable embodiment identifier, used for head routing and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbodimentId(pub String);

impl EmbodimentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for EmbodimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: EmbodimentId,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub display_name: String,
}

impl EmbodimentSpec {
    pub fn new(id: &str, action_dim: usize, proprio_dim: usize, display_name: &str) -> Self {
        Self {
            id: EmbodimentId::new(id),
            action_dim,
            proprio_dim,
            display_name: display_name.to_string(),
        }
    }
}

/// Registry of known embodiments; ids are unique.
#[derive(Debug, Clone, Default)]
pub struct EmbodimentRegistry {
    specs: BTreeMap<String, EmbodimentSpec>,
}

impl EmbodimentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: EmbodimentSpec) -> Result<()> {
        if spec.action_dim == 0 {
            return Err(ModelError::Config(format!(
                "embodiment `{}` has zero action dim",
                spec.id
            )));
        }
        if self.specs.contains_key(spec.id.as_str()) {
            return Err(ModelError::Config(format!(
                "duplicate embodiment id `{}`",
                spec.id
            )));
        }
        self.specs.insert(spec.id.as_str().to_string(), spec);
        Ok(())
    }

    pub fn get(&self, id: &EmbodimentId) -> Result<&EmbodimentSpec> {
        self.specs
            .get(id.as_str())
            .ok_or_else(|| ModelError::UnknownEmbodiment(id.as_str().to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbodimentSpec> {
        self.specs.values()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}
