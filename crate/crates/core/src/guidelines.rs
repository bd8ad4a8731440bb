//! Guideline sets: storage, rendering, composition and perturbation.
//!
//! A guideline set is an ordered list of principle-tagged rules, each with
//! optional example phrases. Sets are immutable values; every operation here
//! returns a new set.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ContextId;
use crate::digest::digest_json;
use crate::gateway::{
    CallOptions, ChatMessage, ChatRequest, DecodingConfig, Gateway, ModelEndpoint, RefusalPolicy,
};
use crate::target::HatefulFormsList;
use crate::templates::TemplateStore;

#[derive(Debug, thiserror::Error)]
pub enum GuidelineError {
    #[error("guideline set {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("parsing guideline file {path}: {message}")]
    Parse { path: String, message: String },
    #[error("guideline {id} version {version} not found")]
    NotFound { id: String, version: String },
    #[error("no packaged guideline set {0:?}")]
    UnknownPackaged(String),
    #[error("guideline store io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Principle {
    Implicitness,
    ToneIntent,
    FineGrainedTaxonomy,
    Patterns,
    Exception,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuidelineRule {
    pub rule_id: String,
    pub principle: Principle,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_phrases: Vec<String>,
    /// The published rule body is abridged; operators are expected to complete it.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub operator_completable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineSet {
    pub guideline_id: String,
    pub context: ContextId,
    pub version: String,
    #[serde(default)]
    pub rules: Vec<GuidelineRule>,
}

const PACKAGED: [(&str, &str); 6] = [
    ("fhm", include_str!("../assets/guidelines/fhm.toml")),
    ("harmeme", include_str!("../assets/guidelines/harmeme.toml")),
    ("harmp", include_str!("../assets/guidelines/harmp.toml")),
    ("multioff", include_str!("../assets/guidelines/multioff.toml")),
    ("mami", include_str!("../assets/guidelines/mami.toml")),
    ("pridemm", include_str!("../assets/guidelines/pridemm.toml")),
];

impl GuidelineSet {
    pub fn packaged_ids() -> impl Iterator<Item = &'static str> {
        PACKAGED.iter().map(|(id, _)| *id)
    }

    pub fn packaged(guideline_id: &str) -> Result<Self, GuidelineError> {
        let (_, text) = PACKAGED
            .iter()
            .find(|(id, _)| *id == guideline_id)
            .ok_or_else(|| GuidelineError::UnknownPackaged(guideline_id.to_string()))?;
        Self::from_toml_str(text, guideline_id)
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, GuidelineError> {
        let set: GuidelineSet = toml::from_str(text).map_err(|e| GuidelineError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, GuidelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| GuidelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("guideline sets serialize to TOML")
    }

    pub fn validate(&self) -> Result<(), GuidelineError> {
        let fail = |message: String| GuidelineError::Invalid {
            id: self.guideline_id.clone(),
            message,
        };
        if self.rules.is_empty() {
            return Err(fail("a guideline set needs at least one rule".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.rules {
            if r.text.trim().is_empty() {
                return Err(fail(format!("rule {} has empty text", r.rule_id)));
            }
            if !seen.insert(r.rule_id.as_str()) {
                return Err(fail(format!("duplicate rule id {}", r.rule_id)));
            }
        }
        Ok(())
    }

    /// Digest of the rule content only; the version label does not contribute.
    pub fn content_digest(&self) -> String {
        digest_json(&(&self.guideline_id, self.context, &self.rules))
    }

    pub fn empty(guideline_id: &str, context: ContextId) -> Self {
        Self {
            guideline_id: guideline_id.to_string(),
            context,
            version: "empty".into(),
            rules: Vec::new(),
        }
    }
}

/// Dashed list in stored order; example phrases are indented under their rule.
pub fn render_guidelines(set: &GuidelineSet) -> String {
    let mut lines = Vec::new();
    for r in &set.rules {
        lines.push(format!("- {}", r.text.trim()));
        for e in &r.example_phrases {
            lines.push(format!("  - {}", e.trim()));
        }
    }
    lines.join("\n")
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Per-use seed derived from a run seed: `splitmix64(seed + (counter + 1) * GAMMA)`.
///
/// Counter 0 orders the rules; counter `i + 1` orders the examples of the rule
/// at original index `i`.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Permutation of `0..n`: each index draws one `next_u64` key from a ChaCha8
/// stream seeded with `stream_seed`, and indices are sorted by (key, index).
pub fn seeded_permutation(n: usize, stream_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let keys: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| (keys[i], i));
    idx
}

pub fn shuffle(set: &GuidelineSet, seed: u64) -> GuidelineSet {
    let rule_order = seeded_permutation(set.rules.len(), derive_seed(seed, 0));
    let rules = rule_order
        .into_iter()
        .map(|i| {
            let rule = &set.rules[i];
            let order = seeded_permutation(rule.example_phrases.len(), derive_seed(seed, i as u64 + 1));
            GuidelineRule {
                example_phrases: order
                    .into_iter()
                    .map(|j| rule.example_phrases[j].clone())
                    .collect(),
                ..rule.clone()
            }
        })
        .collect();
    GuidelineSet {
        rules,
        ..set.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RephraseOutcome {
    pub set: GuidelineSet,
    pub warnings: Vec<String>,
}

/// Rewords every rule text with one request per rule. A refused or empty
/// reply keeps the original text and records a warning.
pub async fn rephrase(
    gateway: &Gateway,
    set: &GuidelineSet,
    llm: &ModelEndpoint,
    templates: &TemplateStore,
    refusal: &RefusalPolicy,
    decoding: &DecodingConfig,
) -> RephraseOutcome {
    let mut rules = Vec::with_capacity(set.rules.len());
    let mut warnings = Vec::new();
    for rule in &set.rules {
        let request = ChatRequest::new(vec![
            ChatMessage::system(templates.rephrase.instruction.clone()),
            ChatMessage::user(rule.text.clone()),
        ]);
        let reply = gateway
            .complete_with(
                llm,
                &request,
                decoding,
                CallOptions::tagged(format!("rephrase:{}", rule.rule_id)),
            )
            .await;
        let text = match reply {
            Ok(r) if !refusal.detect(&r) && !r.text.trim().is_empty() => r.text.trim().to_string(),
            Ok(_) => {
                warnings.push(format!("rule {}: rewording refused or empty", rule.rule_id));
                rule.text.clone()
            }
            Err(e) => {
                warnings.push(format!("rule {}: {e}", rule.rule_id));
                rule.text.clone()
            }
        };
        rules.push(GuidelineRule {
            text,
            ..rule.clone()
        });
    }
    let changed = rules != set.rules;
    RephraseOutcome {
        set: GuidelineSet {
            rules,
            version: if changed {
                format!("{}+rephrased", set.version)
            } else {
                set.version.clone()
            },
            ..set.clone()
        },
        warnings,
    }
}

/// Appends one Patterns rule per group with generated phrases. Groups without
/// phrases add nothing; with no phrases at all the base set is returned as is.
pub fn compose(base: &GuidelineSet, forms: &HatefulFormsList) -> GuidelineSet {
    let extra: Vec<GuidelineRule> = forms
        .per_group
        .iter()
        .filter(|(_, phrases)| !phrases.is_empty())
        .map(|(group, phrases)| GuidelineRule {
            rule_id: format!("generated-{}", group.slug()),
            principle: Principle::Patterns,
            text: format!(
                "Commonly found hateful contents against {} in online memes include:",
                group.canonical_name()
            ),
            example_phrases: phrases.clone(),
            operator_completable: false,
        })
        .collect();
    if extra.is_empty() {
        return base.clone();
    }
    let mut rules = base.rules.clone();
    rules.extend(extra);
    GuidelineSet {
        rules,
        version: format!("{}+forms", base.version),
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleChange {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDiff {
    pub rule_id: String,
    pub change: RuleChange,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub before: Option<GuidelineRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<GuidelineRule>,
}

/// Rule-level differences keyed by `rule_id`, in the order rules appear in `a` then `b`.
pub fn diff_rules(a: &GuidelineSet, b: &GuidelineSet) -> Vec<RuleDiff> {
    let in_b: HashMap<&str, &GuidelineRule> =
        b.rules.iter().map(|r| (r.rule_id.as_str(), r)).collect();
    let in_a: HashMap<&str, &GuidelineRule> =
        a.rules.iter().map(|r| (r.rule_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for r in &a.rules {
        match in_b.get(r.rule_id.as_str()) {
            None => out.push(RuleDiff {
                rule_id: r.rule_id.clone(),
                change: RuleChange::Removed,
                before: Some(r.clone()),
                after: None,
            }),
            Some(other) if *other != r => out.push(RuleDiff {
                rule_id: r.rule_id.clone(),
                change: RuleChange::Modified,
                before: Some(r.clone()),
                after: Some((*other).clone()),
            }),
            Some(_) => {}
        }
    }
    for r in &b.rules {
        if !in_a.contains_key(r.rule_id.as_str()) {
            out.push(RuleDiff {
                rule_id: r.rule_id.clone(),
                change: RuleChange::Added,
                before: None,
                after: Some(r.clone()),
            });
        }
    }
    out
}

/// Versioned guideline files under `<root>/<guideline_id>/<n>.toml`.
/// Saving always writes a new version; existing files are never rewritten.
#[derive(Debug, Clone)]
pub struct GuidelineStore {
    root: PathBuf,
}

impl GuidelineStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, GuidelineError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| GuidelineError::Io {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes packaged sets as version 1 for any id without stored versions.
    pub fn seed_packaged(&self) -> Result<(), GuidelineError> {
        for id in GuidelineSet::packaged_ids() {
            if self.versions(id)?.is_empty() {
                let mut set = GuidelineSet::packaged(id)?;
                set.version = "1".into();
                self.write_version(&set, 1)?;
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Result<Vec<String>, GuidelineError> {
        let mut ids = Vec::new();
        let entries = std::fs::read_dir(&self.root).map_err(|source| GuidelineError::Io {
            path: self.root.display().to_string(),
            source,
        })?;
        for e in entries.flatten() {
            if e.path().is_dir() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn versions(&self, guideline_id: &str) -> Result<Vec<u32>, GuidelineError> {
        let dir = self.root.join(guideline_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let entries = std::fs::read_dir(&dir).map_err(|source| GuidelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(n) = name.strip_suffix(".toml").and_then(|s| s.parse().ok()) {
                out.push(n);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn load(&self, guideline_id: &str, version: &str) -> Result<GuidelineSet, GuidelineError> {
        let path = self.root.join(guideline_id).join(format!("{version}.toml"));
        if !path.exists() {
            return Err(GuidelineError::NotFound {
                id: guideline_id.to_string(),
                version: version.to_string(),
            });
        }
        GuidelineSet::load(&path)
    }

    pub fn latest(&self, guideline_id: &str) -> Result<GuidelineSet, GuidelineError> {
        let v = self
            .versions(guideline_id)?
            .last()
            .copied()
            .ok_or_else(|| GuidelineError::NotFound {
                id: guideline_id.to_string(),
                version: "latest".into(),
            })?;
        self.load(guideline_id, &v.to_string())
    }

    /// Stores `set` as the next version of its id and returns the stored copy.
    pub fn save(&self, set: &GuidelineSet) -> Result<GuidelineSet, GuidelineError> {
        set.validate()?;
        let next = self.versions(&set.guideline_id)?.last().copied().unwrap_or(0) + 1;
        let mut stored = set.clone();
        stored.version = next.to_string();
        self.write_version(&stored, next)?;
        Ok(stored)
    }

    fn write_version(&self, set: &GuidelineSet, n: u32) -> Result<(), GuidelineError> {
        let dir = self.root.join(&set.guideline_id);
        let io = |source| GuidelineError::Io {
            path: dir.display().to_string(),
            source,
        };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let path = dir.join(format!("{n}.toml"));
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|source| GuidelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
        f.write_all(set.to_toml_string().as_bytes())
            .map_err(|source| GuidelineError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Principle tag counts, for audits.
pub fn principle_histogram(set: &GuidelineSet) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for r in &set.rules {
        *h.entry(format!("{:?}", r.principle)).or_insert(0) += 1;
    }
    h
}
