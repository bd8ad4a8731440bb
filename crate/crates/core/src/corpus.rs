//! Dataset contexts, manifest ingestion and few-shot sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate meme id {id:?} in split {split}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
        split: Split,
    },
    #[error("{path}:{line}: unknown label {label}")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("few-shot k must be one of 4, 6, 8, 10 (got {0})")]
    InvalidShotCount(usize),
    #[error("few-shot pool has {available} {class} exemplars, {needed} needed")]
    InsufficientSupport {
        class: Label,
        available: usize,
        needed: usize,
    },
    #[error("unknown dataset context {0:?}")]
    UnknownContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextId {
    #[serde(rename = "FHM")]
    Fhm,
    #[serde(rename = "HarMeme")]
    HarMeme,
    #[serde(rename = "HarmP")]
    HarmP,
    #[serde(rename = "MultiOFF")]
    MultiOff,
    #[serde(rename = "MAMI")]
    Mami,
    #[serde(rename = "PrideMM")]
    PrideMm,
    #[serde(rename = "Goat_Hateful")]
    GoatHateful,
    #[serde(rename = "Goat_Harmful")]
    GoatHarmful,
    #[serde(rename = "Goat_Misogyny")]
    GoatMisogyny,
    #[serde(rename = "Goat_Offensive")]
    GoatOffensive,
}

impl ContextId {
    pub const ALL: [ContextId; 10] = [
        ContextId::Fhm,
        ContextId::HarMeme,
        ContextId::HarmP,
        ContextId::MultiOff,
        ContextId::Mami,
        ContextId::PrideMm,
        ContextId::GoatHateful,
        ContextId::GoatHarmful,
        ContextId::GoatMisogyny,
        ContextId::GoatOffensive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextId::Fhm => "FHM",
            ContextId::HarMeme => "HarMeme",
            ContextId::HarmP => "HarmP",
            ContextId::MultiOff => "MultiOFF",
            ContextId::Mami => "MAMI",
            ContextId::PrideMm => "PrideMM",
            ContextId::GoatHateful => "Goat_Hateful",
            ContextId::GoatHarmful => "Goat_Harmful",
            ContextId::GoatMisogyny => "Goat_Misogyny",
            ContextId::GoatOffensive => "Goat_Offensive",
        }
    }

    /// The source dataset whose lexicon, prompts and guidelines this context uses.
    pub fn family(self) -> ContextId {
        match self {
            ContextId::GoatHateful => ContextId::Fhm,
            ContextId::GoatHarmful => ContextId::HarMeme,
            ContextId::GoatMisogyny => ContextId::Mami,
            ContextId::GoatOffensive => ContextId::MultiOff,
            other => other,
        }
    }

    pub fn context(self) -> DatasetContext {
        DatasetContext::builtin(self)
    }
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        ContextId::ALL
            .into_iter()
            .find(|c| {
                let n: String = c
                    .as_str()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect();
                n.to_ascii_lowercase() == norm
            })
            .ok_or_else(|| CorpusError::UnknownContext(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfidenceLevel {
    High,
    Medium,
    Low,
    Unset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetWorkflow {
    None,
    FhmProtectedGroups,
    PrideTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLexicon {
    pub positive: String,
    pub negative: String,
}

impl LabelLexicon {
    fn new(positive: &str, negative: &str) -> Self {
        Self {
            positive: positive.into(),
            negative: negative.into(),
        }
    }

    pub fn token(&self, label: Label) -> &str {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetContext {
    pub id: ContextId,
    pub label_lexicon: LabelLexicon,
    pub question_bank_id: String,
    pub integration_prompt_id: String,
    pub classify_prompt_id: String,
    pub guideline_id: String,
    pub confidence_level: ConfidenceLevel,
    pub target_workflow: TargetWorkflow,
}

impl DatasetContext {
    pub fn builtin(id: ContextId) -> Self {
        let family = id.family();
        let (lexicon, bank, integration, prompt, level) = match family {
            ContextId::Fhm => (
                LabelLexicon::new("hateful", "non-hateful"),
                "generic",
                "fhm",
                "fhm",
                ConfidenceLevel::Medium,
            ),
            ContextId::HarMeme => (
                LabelLexicon::new("harmful", "harmless"),
                "politics-harmeme",
                "meme",
                "harmeme",
                ConfidenceLevel::High,
            ),
            ContextId::HarmP => (
                LabelLexicon::new("harmful", "harmless"),
                "politics-harmp",
                "meme",
                "harmp",
                ConfidenceLevel::Low,
            ),
            ContextId::MultiOff => (
                LabelLexicon::new("offensive", "non-offensive"),
                "politics-multioff",
                "meme",
                "multioff",
                ConfidenceLevel::Medium,
            ),
            ContextId::Mami => (
                LabelLexicon::new("misogynistic", "non-misogynistic"),
                "misogyny",
                "meme",
                "mami",
                ConfidenceLevel::Low,
            ),
            ContextId::PrideMm => (
                LabelLexicon::new("harmful", "harmless"),
                "pride",
                "pridemm",
                "pridemm",
                ConfidenceLevel::High,
            ),
            _ => unreachable!("family() maps every benchmark context to a source dataset"),
        };
        let confidence_level = if family == id {
            level
        } else {
            ConfidenceLevel::Unset
        };
        let target_workflow = match family {
            ContextId::Fhm => TargetWorkflow::FhmProtectedGroups,
            ContextId::PrideMm => TargetWorkflow::PrideTarget,
            _ => TargetWorkflow::None,
        };
        DatasetContext {
            id,
            label_lexicon: lexicon,
            question_bank_id: bank.into(),
            integration_prompt_id: integration.into(),
            classify_prompt_id: prompt.into(),
            guideline_id: prompt.into(),
            confidence_level,
            target_workflow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Holdout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Holdout => "holdout",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "dev" | "val" | "validation" => Ok(Split::Test),
            "holdout" => Ok(Split::Holdout),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub meme_id: String,
    pub context: ContextId,
    pub split: Split,
    pub image_ref: String,
    #[serde(default)]
    pub ocr_text: String,
    #[serde(default)]
    pub gold_label: Option<Label>,
}

impl MemeRecord {
    pub fn image_path(&self) -> PathBuf {
        PathBuf::from(&self.image_ref)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub positive: usize,
    pub negative: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub per_split: BTreeMap<Split, SplitCounts>,
}

impl ManifestSummary {
    pub fn of(records: &[MemeRecord]) -> Self {
        let mut per_split: BTreeMap<Split, SplitCounts> = BTreeMap::new();
        for r in records {
            let c = per_split.entry(r.split).or_default();
            match r.gold_label {
                Some(Label::Positive) => c.positive += 1,
                Some(Label::Negative) => c.negative += 1,
                None => c.unlabeled += 1,
            }
        }
        Self { per_split }
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        self.per_split.get(&split).copied().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.per_split
            .values()
            .map(|c| c.positive + c.negative + c.unlabeled)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct ManifestLoad {
    pub records: Vec<MemeRecord>,
    pub summary: ManifestSummary,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct ManifestLine {
    id: serde_json::Value,
    img: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    label: Option<serde_json::Value>,
    #[serde(default)]
    split: Option<String>,
}

fn parse_label(value: &serde_json::Value, lexicon: &LabelLexicon) -> Option<Option<Label>> {
    match value {
        serde_json::Value::Null => Some(None),
        serde_json::Value::Bool(b) => Some(Some(Label::from_bool(*b))),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(1) => Some(Some(Label::Positive)),
            Some(0) => Some(Some(Label::Negative)),
            _ => None,
        },
        serde_json::Value::String(s) => {
            let s = s.trim();
            if s == "1" || s.eq_ignore_ascii_case(&lexicon.positive) {
                Some(Some(Label::Positive))
            } else if s == "0" || s.eq_ignore_ascii_case(&lexicon.negative) {
                Some(Some(Label::Negative))
            } else {
                None
            }
        }
        _ => None,
    }
}

fn is_uri(s: &str) -> bool {
    s.contains("://")
}

/// Reads a JSON-lines manifest with fields `id`, `img`, `text`, `label` (0/1)
/// and an optional `split` that overrides `default_split`.
///
/// Relative image paths are resolved against the manifest's directory.
/// Missing image files are reported as warnings; the record is kept.
pub fn load_manifest(
    path: &Path,
    context: &DatasetContext,
    default_split: Split,
) -> Result<ManifestLoad, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let shown = path.display().to_string();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            path: shown.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = match &line.id {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                return Err(CorpusError::Parse {
                    path: shown.clone(),
                    line: line_no,
                    message: format!("id must be a string or number, got {other}"),
                })
            }
        };
        let split = match &line.split {
            Some(s) => s.parse::<Split>().map_err(|message| CorpusError::Parse {
                path: shown.clone(),
                line: line_no,
                message,
            })?,
            None => default_split,
        };
        let gold_label = match &line.label {
            None => None,
            Some(v) => parse_label(v, &context.label_lexicon).ok_or_else(|| {
                CorpusError::UnknownLabel {
                    path: shown.clone(),
                    line: line_no,
                    label: v.to_string(),
                }
            })?,
        };
        if !seen.insert((split, id.clone())) {
            return Err(CorpusError::DuplicateId {
                path: shown.clone(),
                line: line_no,
                id,
                split,
            });
        }
        let image_ref = if is_uri(&line.img) || Path::new(&line.img).is_absolute() {
            line.img.clone()
        } else {
            base.join(&line.img).display().to_string()
        };
        if !is_uri(&image_ref) && !Path::new(&image_ref).exists() {
            warnings.push(format!("{shown}:{line_no}: image not found: {image_ref}"));
        }
        records.push(MemeRecord {
            meme_id: id,
            context: context.id,
            split,
            image_ref,
            ocr_text: line.text.unwrap_or_default(),
            gold_label,
        });
    }
    let summary = ManifestSummary::of(&records);
    Ok(ManifestLoad {
        records,
        summary,
        warnings,
    })
}

/// Per-dataset class counts as published with the benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStatistics {
    pub context: ContextId,
    pub test_positive: usize,
    pub test_negative: usize,
    pub train_total: Option<usize>,
}

pub const DATASET_STATISTICS: [DatasetStatistics; 10] = [
    DatasetStatistics {
        context: ContextId::Fhm,
        test_positive: 490,
        test_negative: 510,
        train_total: Some(8500),
    },
    DatasetStatistics {
        context: ContextId::HarMeme,
        test_positive: 124,
        test_negative: 230,
        train_total: Some(3013),
    },
    DatasetStatistics {
        context: ContextId::HarmP,
        test_positive: 171,
        test_negative: 184,
        train_total: Some(2939),
    },
    DatasetStatistics {
        context: ContextId::MultiOff,
        test_positive: 58,
        test_negative: 91,
        train_total: Some(445),
    },
    DatasetStatistics {
        context: ContextId::Mami,
        test_positive: 500,
        test_negative: 500,
        train_total: Some(9000),
    },
    DatasetStatistics {
        context: ContextId::PrideMm,
        test_positive: 247,
        test_negative: 260,
        train_total: Some(4328),
    },
    DatasetStatistics {
        context: ContextId::GoatHateful,
        test_positive: 750,
        test_negative: 1250,
        train_total: None,
    },
    DatasetStatistics {
        context: ContextId::GoatHarmful,
        test_positive: 420,
        test_negative: 589,
        train_total: None,
    },
    DatasetStatistics {
        context: ContextId::GoatMisogyny,
        test_positive: 500,
        test_negative: 500,
        train_total: None,
    },
    DatasetStatistics {
        context: ContextId::GoatOffensive,
        test_positive: 303,
        test_negative: 440,
        train_total: None,
    },
];

pub fn dataset_statistics(context: ContextId) -> DatasetStatistics {
    DATASET_STATISTICS
        .iter()
        .copied()
        .find(|s| s.context == context)
        .expect("every context has a statistics row")
}

/// Differences between a loaded manifest and the published statistics, empty when they agree.
pub fn check_statistics(summary: &ManifestSummary, context: ContextId) -> Vec<String> {
    let expected = dataset_statistics(context);
    let test = summary.counts(Split::Test);
    let mut problems = Vec::new();
    if test.positive != expected.test_positive {
        problems.push(format!(
            "{context} test positives: expected {}, found {}",
            expected.test_positive, test.positive
        ));
    }
    if test.negative != expected.test_negative {
        problems.push(format!(
            "{context} test negatives: expected {}, found {}",
            expected.test_negative, test.negative
        ));
    }
    if let Some(train) = expected.train_total {
        let c = summary.counts(Split::Train);
        let found = c.positive + c.negative + c.unlabeled;
        if found != 0 && found != train {
            problems.push(format!(
                "{context} train size: expected {train}, found {found}"
            ));
        }
    }
    problems
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub description_text: String,
    pub gold_label: Label,
}

#[derive(Deserialize)]
struct PoolLine {
    text: String,
    label: serde_json::Value,
}

/// Reads a holdout pool: JSON lines with `text` (a meme description) and `label` (0/1).
pub fn load_pool(path: &Path, lexicon: &LabelLexicon) -> Result<Vec<FewShotExemplar>, CorpusError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut pool = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: PoolLine = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let label = parse_label(&line.label, lexicon)
            .flatten()
            .ok_or_else(|| CorpusError::UnknownLabel {
                path: shown.clone(),
                line: i + 1,
                label: line.label.to_string(),
            })?;
        if line.text.trim().is_empty() {
            return Err(CorpusError::Parse {
                path: shown.clone(),
                line: i + 1,
                message: "empty description".into(),
            });
        }
        pool.push(FewShotExemplar {
            description_text: line.text,
            gold_label: label,
        });
    }
    Ok(pool)
}

/// Draws `k/2` exemplars of each class and interleaves them positive-first.
///
/// Selection uses a ChaCha8 stream seeded with `seed`; positives are drawn
/// before negatives from the same stream.
pub fn sample_few_shot(
    pool: &[FewShotExemplar],
    k: usize,
    seed: u64,
) -> Result<Vec<FewShotExemplar>, CorpusError> {
    if !matches!(k, 4 | 6 | 8 | 10) {
        return Err(CorpusError::InvalidShotCount(k));
    }
    let half = k / 2;
    let positives: Vec<&FewShotExemplar> = pool
        .iter()
        .filter(|e| e.gold_label == Label::Positive)
        .collect();
    let negatives: Vec<&FewShotExemplar> = pool
        .iter()
        .filter(|e| e.gold_label == Label::Negative)
        .collect();
    for (class, members) in [(Label::Positive, &positives), (Label::Negative, &negatives)] {
        if members.len() < half {
            return Err(CorpusError::InsufficientSupport {
                class,
                available: members.len(),
                needed: half,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = sample(&mut rng, positives.len(), half);
    let neg = sample(&mut rng, negatives.len(), half);
    let mut out = Vec::with_capacity(k);
    for (p, n) in pos.iter().zip(neg.iter()) {
        out.push(positives[p].clone());
        out.push(negatives[n].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn pool(pos: usize, neg: usize) -> Vec<FewShotExemplar> {
        (0..pos)
            .map(|i| FewShotExemplar {
                description_text: format!("pos {i}"),
                gold_label: Label::Positive,
            })
            .chain((0..neg).map(|i| FewShotExemplar {
                description_text: format!("neg {i}"),
                gold_label: Label::Negative,
            }))
            .collect()
    }

    #[test]
    fn confidence_levels_follow_the_decision_table() {
        use ConfidenceLevel::*;
        let expect = [
            (ContextId::HarMeme, High),
            (ContextId::PrideMm, High),
            (ContextId::Fhm, Medium),
            (ContextId::MultiOff, Medium),
            (ContextId::HarmP, Low),
            (ContextId::Mami, Low),
            (ContextId::GoatHateful, Unset),
        ];
        for (c, l) in expect {
            assert_eq!(c.context().confidence_level, l, "{c}");
        }
        for c in ContextId::ALL {
            let ctx = c.context();
            assert_ne!(ctx.label_lexicon.positive, ctx.label_lexicon.negative);
        }
    }

    #[test]
    fn goat_contexts_borrow_their_family_lexicon() {
        assert_eq!(
            ContextId::GoatMisogyny.context().label_lexicon,
            ContextId::Mami.context().label_lexicon
        );
        assert_eq!(ContextId::GoatHateful.context().guideline_id, "fhm");
    }

    #[test]
    fn context_ids_parse_loosely() {
        assert_eq!("fhm".parse::<ContextId>().unwrap(), ContextId::Fhm);
        assert_eq!("Harm-P".parse::<ContextId>().unwrap(), ContextId::HarmP);
        assert_eq!(
            "goat_offensive".parse::<ContextId>().unwrap(),
            ContextId::GoatOffensive
        );
        assert!("nope".parse::<ContextId>().is_err());
    }

    fn write_manifest(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn manifest_counts_and_warnings() {
        let f = write_manifest(&[
            r#"{"id": 1, "img": "a.png", "text": "hi", "label": 1}"#,
            r#"{"id": "2", "img": "b.png", "text": "yo", "label": 0}"#,
            r#"{"id": "2", "img": "b.png", "text": "yo", "label": "hateful", "split": "train"}"#,
        ]);
        let ctx = ContextId::Fhm.context();
        let load = load_manifest(f.path(), &ctx, Split::Test).unwrap();
        assert_eq!(load.records.len(), 3);
        assert_eq!(
            load.summary.counts(Split::Test),
            SplitCounts {
                positive: 1,
                negative: 1,
                unlabeled: 0
            }
        );
        assert_eq!(load.summary.counts(Split::Train).positive, 1);
        assert_eq!(load.warnings.len(), 3);
    }

    #[test]
    fn empty_manifest_is_empty() {
        let f = write_manifest(&[]);
        let load = load_manifest(f.path(), &ContextId::Fhm.context(), Split::Test).unwrap();
        assert!(load.records.is_empty());
        assert_eq!(load.summary.total(), 0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = write_manifest(&[
            r#"{"id": "x", "img": "a.png", "label": 1}"#,
            r#"{"id": "x", "img": "b.png", "label": 0}"#,
        ]);
        let err = load_manifest(f.path(), &ContextId::Fhm.context(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("\"x\""), "{err}");
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let f = write_manifest(&[r#"{"id": "x", "img": "a.png", "label": 2}"#]);
        assert!(matches!(
            load_manifest(f.path(), &ContextId::Fhm.context(), Split::Test),
            Err(CorpusError::UnknownLabel { .. })
        ));
        let f = write_manifest(&[r#"{"id": "x", "img": "a.png", "label": "harmful"}"#]);
        assert!(load_manifest(f.path(), &ContextId::Fhm.context(), Split::Test).is_err());
    }

    #[test]
    fn few_shot_is_balanced_and_stable() {
        let p = pool(10, 10);
        let a = sample_few_shot(&p, 4, 7).unwrap();
        let b = sample_few_shot(&p, 4, 7).unwrap();
        assert_eq!(a, b);
        let labels: Vec<Label> = a.iter().map(|e| e.gold_label).collect();
        assert_eq!(
            labels,
            vec![
                Label::Positive,
                Label::Negative,
                Label::Positive,
                Label::Negative
            ]
        );
    }

    #[test]
    fn few_shot_reports_deficient_class() {
        let err = sample_few_shot(&pool(2, 10), 6, 1).unwrap_err();
        match err {
            CorpusError::InsufficientSupport { class, .. } => assert_eq!(class, Label::Positive),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            sample_few_shot(&pool(10, 10), 5, 1),
            Err(CorpusError::InvalidShotCount(5))
        ));
    }
}
