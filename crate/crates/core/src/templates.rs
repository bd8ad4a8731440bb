//! Versioned prompt template store.
//!
//! All prompt text lives in one TOML document so that a template edit is a
//! single, diffable change with one version number. The packaged store is
//! embedded at compile time; an alternate file can be loaded at runtime.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::digest::digest_json;

const PACKAGED: &str = include_str!("../assets/templates.toml");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("reading template file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing template file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("template store has no {kind} template named {name:?}")]
    Missing { kind: &'static str, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Markers {
    pub ignore: String,
    pub fm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTriggers {
    pub generic: String,
    pub guideline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationText {
    pub guideline_header: String,
    pub demos_header: String,
    pub mcot_subject: String,
    pub contract: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTemplate {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrideTasks {
    pub all: String,
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyTemplate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PrideTasks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTemplates {
    pub protected_groups: String,
    pub hateful_forms_item: String,
    pub hateful_forms_footer: String,
    pub pride_entity_prefix: String,
    pub pride_entity_description: String,
    pub pride_country: String,
    pub pride_politics: String,
    pub pride_company: String,
    pub pride_individual: String,
    pub pride_organization: String,
    pub pride_subgroup: String,
    pub pride_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseTemplate {
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateStore {
    pub version: String,
    pub markers: Markers,
    pub cot: CotTriggers,
    pub classification: ClassificationText,
    pub integration: BTreeMap<String, TextTemplate>,
    pub classify: BTreeMap<String, ClassifyTemplate>,
    pub target: TargetTemplates,
    pub rephrase: RephraseTemplate,
    pub probe: TextTemplate,
}

impl TemplateStore {
    /// The store compiled into the crate.
    pub fn packaged() -> &'static TemplateStore {
        static STORE: OnceLock<TemplateStore> = OnceLock::new();
        STORE.get_or_init(|| {
            TemplateStore::from_toml_str(PACKAGED).expect("packaged templates.toml is valid")
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TemplateError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn integration(&self, id: &str) -> Result<&str, TemplateError> {
        self.integration
            .get(id)
            .map(|t| t.text.as_str())
            .ok_or_else(|| TemplateError::Missing {
                kind: "integration",
                name: id.to_string(),
            })
    }

    pub fn classify(&self, id: &str) -> Result<&ClassifyTemplate, TemplateError> {
        self.classify.get(id).ok_or_else(|| TemplateError::Missing {
            kind: "classify",
            name: id.to_string(),
        })
    }

    /// Digest over the full store; any text edit changes it.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}
