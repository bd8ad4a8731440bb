//! Meme-to-text conversion.
//!
//! A vision endpoint answers a bank of atomic questions about the meme image
//! (a free description, a human-presence gate, identity and context cues);
//! a text endpoint then merges the answers into one description.

use std::collections::BTreeMap;
use std::path::Path;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetContext, MemeRecord};
use crate::digest::digest_json;
use crate::gateway::{
    CallOptions, ChatMessage, ChatRequest, DecodingConfig, Gateway, GatewayError, Modality,
    ModelEndpoint, RefusalPolicy,
};
use crate::templates::{Markers, TemplateError, TemplateStore};

#[derive(Debug, thiserror::Error)]
pub enum Meme2TextError {
    #[error("question {question_id}: {message}")]
    Render {
        question_id: String,
        message: String,
    },
    #[error("invalid question bank {bank_id}: {message}")]
    Bank { bank_id: String, message: String },
    #[error("unknown question bank {0:?}")]
    UnknownBank(String),
    #[error("endpoint {0} is not vision-capable")]
    NotVision(String),
    #[error("meme {meme_id}: describe question failed: {source}")]
    Describe {
        meme_id: String,
        source: GatewayError,
    },
    #[error("meme {meme_id}: integration failed: {message}")]
    Integration { meme_id: String, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Describe,
    Human,
    HumanCount,
    Gender,
    Race,
    Appearance,
    Disability,
    Celebrity,
    AdultContent,
    Female,
    Sexual,
    Politician,
    PoliticalIssue,
}

impl Attribute {
    pub fn display_name(self) -> &'static str {
        match self {
            Attribute::Describe => "Description",
            Attribute::Human => "Human presence",
            Attribute::HumanCount => "Number of people",
            Attribute::Gender => "Gender",
            Attribute::Race => "Race",
            Attribute::Appearance => "Physical appearance",
            Attribute::Disability => "Disability",
            Attribute::Celebrity => "Celebrity",
            Attribute::AdultContent => "Adult content",
            Attribute::Female => "Female presence",
            Attribute::Sexual => "Sexualization",
            Attribute::Politician => "Politician",
            Attribute::PoliticalIssue => "Political issue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub question_id: String,
    pub attribute: Attribute,
    pub text: String,
    #[serde(default)]
    pub uses_ignore: bool,
    #[serde(default)]
    pub uses_fm: bool,
    #[serde(default)]
    pub uses_ocr: bool,
    #[serde(default)]
    pub gated_by_human: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionBank {
    pub bank_id: String,
    pub version: String,
    pub describe: QuestionTemplate,
    #[serde(default)]
    pub human: Option<QuestionTemplate>,
    #[serde(default)]
    pub identity: Vec<QuestionTemplate>,
    #[serde(default)]
    pub context: Vec<QuestionTemplate>,
}

const PACKAGED_BANKS: [(&str, &str); 6] = [
    ("generic", include_str!("../assets/banks/generic.toml")),
    (
        "politics-harmeme",
        include_str!("../assets/banks/politics-harmeme.toml"),
    ),
    (
        "politics-harmp",
        include_str!("../assets/banks/politics-harmp.toml"),
    ),
    (
        "politics-multioff",
        include_str!("../assets/banks/politics-multioff.toml"),
    ),
    ("misogyny", include_str!("../assets/banks/misogyny.toml")),
    ("pride", include_str!("../assets/banks/pride.toml")),
];

impl QuestionBank {
    pub fn packaged_ids() -> impl Iterator<Item = &'static str> {
        PACKAGED_BANKS.iter().map(|(id, _)| *id)
    }

    pub fn packaged(bank_id: &str) -> Result<Self, Meme2TextError> {
        let (_, text) = PACKAGED_BANKS
            .iter()
            .find(|(id, _)| *id == bank_id)
            .ok_or_else(|| Meme2TextError::UnknownBank(bank_id.to_string()))?;
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, Meme2TextError> {
        let bank: QuestionBank = toml::from_str(text).map_err(|e| Meme2TextError::Bank {
            bank_id: "?".into(),
            message: e.to_string(),
        })?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn load(path: &Path) -> Result<Self, Meme2TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| Meme2TextError::Bank {
            bank_id: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Identity then context questions, in bank order.
    pub fn follow_ups(&self) -> impl Iterator<Item = &QuestionTemplate> {
        self.identity.iter().chain(self.context.iter())
    }

    pub fn all_questions(&self) -> impl Iterator<Item = &QuestionTemplate> {
        std::iter::once(&self.describe)
            .chain(self.human.iter())
            .chain(self.follow_ups())
    }

    pub fn gated_count(&self) -> usize {
        self.follow_ups().filter(|q| q.gated_by_human).count()
    }

    pub fn ungated_count(&self) -> usize {
        self.follow_ups().filter(|q| !q.gated_by_human).count()
    }

    pub fn question(&self, question_id: &str) -> Option<&QuestionTemplate> {
        self.all_questions().find(|q| q.question_id == question_id)
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn validate(&self) -> Result<(), Meme2TextError> {
        let fail = |message: String| Meme2TextError::Bank {
            bank_id: self.bank_id.clone(),
            message,
        };
        if self.describe.attribute != Attribute::Describe {
            return Err(fail("describe question must have attribute describe".into()));
        }
        if let Some(h) = &self.human {
            if h.attribute != Attribute::Human || !h.uses_fm || h.gated_by_human {
                return Err(fail(
                    "human question must be an ungated yes/no question with attribute human"
                        .into(),
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for q in self.all_questions() {
            if !seen.insert(q.question_id.as_str()) {
                return Err(fail(format!("duplicate question id {}", q.question_id)));
            }
            if q.uses_ocr != q.text.contains("[OCR]") {
                return Err(fail(format!(
                    "question {}: uses_ocr does not match the [OCR] marker",
                    q.question_id
                )));
            }
            if q.text.contains("[Fm]") && !q.uses_fm {
                return Err(fail(format!(
                    "question {}: [Fm] marker without uses_fm",
                    q.question_id
                )));
            }
            if q.text.contains("[Ignore]") && !q.uses_ignore {
                return Err(fail(format!(
                    "question {}: [Ignore] marker without uses_ignore",
                    q.question_id
                )));
            }
            if q.gated_by_human && self.human.is_none() {
                return Err(fail(format!(
                    "question {} is gated but the bank has no human question",
                    q.question_id
                )));
            }
        }
        if self.describe.gated_by_human {
            return Err(fail("describe question cannot be gated".into()));
        }
        Ok(())
    }
}

fn apply_marker(text: &mut String, marker: &str, value: &str, enabled: bool) {
    if text.contains(marker) {
        *text = text.replace(marker, if enabled { value } else { "" });
    } else if enabled {
        if !text.ends_with(' ') {
            text.push(' ');
        }
        text.push_str(value);
    }
}

/// Substitutes `[OCR]` and adds the `[Ignore]` and `[Fm]` instructions when flagged.
/// Explicit markers in the text are replaced in place; otherwise the
/// instructions are appended, `[Ignore]` first.
pub fn render_question(
    template: &QuestionTemplate,
    ocr_text: &str,
    markers: &Markers,
) -> Result<String, Meme2TextError> {
    let mut text = template.text.clone();
    if template.uses_ocr {
        if ocr_text.trim().is_empty() {
            return Err(Meme2TextError::Render {
                question_id: template.question_id.clone(),
                message: "question needs the overlaid caption but none was given".into(),
            });
        }
        text = text.replace("[OCR]", ocr_text);
    }
    apply_marker(&mut text, "[Ignore]", &markers.ignore, template.uses_ignore);
    apply_marker(&mut text, "[Fm]", &markers.fm, template.uses_fm);
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinaryParse {
    Yes,
    No,
    Failed(String),
}

impl BinaryParse {
    pub fn as_flag(&self) -> Option<bool> {
        match self {
            BinaryParse::Yes => Some(true),
            BinaryParse::No => Some(false),
            BinaryParse::Failed(_) => None,
        }
    }
}

pub fn parse_binary(raw: &str) -> BinaryParse {
    let folded = raw.trim().to_lowercase();
    if folded.starts_with("yes") {
        BinaryParse::Yes
    } else if folded.starts_with("no") {
        BinaryParse::No
    } else {
        BinaryParse::Failed(raw.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueAnswer {
    pub question_id: String,
    pub attribute: Attribute,
    pub endpoint_id: String,
    pub raw_text: String,
    /// Yes/no reading for `[Fm]` questions; `None` for open questions or unparseable replies.
    pub parsed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub question_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueSet {
    pub meme_id: String,
    pub low_fidelity_description: String,
    /// Answers in bank order, human gate first.
    pub answers: Vec<CueAnswer>,
    pub human_present: Option<bool>,
    pub source_lmm: String,
    pub partial: bool,
    #[serde(default)]
    pub failures: Vec<QuestionFailure>,
    /// `[Fm]` questions whose replies did not start with yes or no.
    #[serde(default)]
    pub parse_failures: Vec<String>,
}

impl CueSet {
    pub fn answer(&self, question_id: &str) -> Option<&CueAnswer> {
        self.answers.iter().find(|a| a.question_id == question_id)
    }
}

/// Which vision endpoint answers which question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueRouting {
    pub default: ModelEndpoint,
    #[serde(default)]
    pub overrides: BTreeMap<Attribute, ModelEndpoint>,
}

impl CueRouting {
    pub fn single(endpoint: ModelEndpoint) -> Self {
        Self {
            default: endpoint,
            overrides: BTreeMap::new(),
        }
    }

    pub fn endpoint_for(&self, attribute: Attribute) -> &ModelEndpoint {
        self.overrides.get(&attribute).unwrap_or(&self.default)
    }

    fn validate(&self) -> Result<(), Meme2TextError> {
        for ep in std::iter::once(&self.default).chain(self.overrides.values()) {
            if ep.modality != Modality::Vision {
                return Err(Meme2TextError::NotVision(ep.id.clone()));
            }
        }
        Ok(())
    }
}

async fn ask(
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    meme: &MemeRecord,
    question: &QuestionTemplate,
    prompt: String,
    decoding: &DecodingConfig,
) -> Result<String, GatewayError> {
    let request = ChatRequest::single(ChatMessage::user_with_image(meme.image_path(), prompt));
    let opts = CallOptions::tagged(format!("cues:{}", question.question_id));
    gateway
        .complete_with(endpoint, &request, decoding, opts)
        .await
        .map(|r| r.text)
}

fn cue_answer(question: &QuestionTemplate, endpoint: &ModelEndpoint, raw: String) -> CueAnswer {
    let parsed = if question.uses_fm {
        parse_binary(&raw).as_flag()
    } else {
        None
    };
    CueAnswer {
        question_id: question.question_id.clone(),
        attribute: question.attribute,
        endpoint_id: endpoint.id.clone(),
        raw_text: raw,
        parsed,
    }
}

/// Runs the question bank against one meme.
///
/// The describe question goes first, then the human gate; gated questions are
/// asked only when the gate answers yes. The remaining questions run
/// concurrently. Any failed follow-up marks the set partial.
pub async fn extract_cues(
    gateway: &Gateway,
    meme: &MemeRecord,
    bank: &QuestionBank,
    routing: &CueRouting,
    templates: &TemplateStore,
    decoding: &DecodingConfig,
) -> Result<CueSet, Meme2TextError> {
    routing.validate()?;
    let markers = &templates.markers;

    let describe_ep = routing.endpoint_for(Attribute::Describe);
    let prompt = render_question(&bank.describe, &meme.ocr_text, markers)?;
    let low_fidelity_description = ask(gateway, describe_ep, meme, &bank.describe, prompt, decoding)
        .await
        .map_err(|source| Meme2TextError::Describe {
            meme_id: meme.meme_id.clone(),
            source,
        })?;

    let mut answers = Vec::new();
    let mut failures = Vec::new();
    let mut parse_failures = Vec::new();
    let mut human_present = None;

    if let Some(gate) = &bank.human {
        let ep = routing.endpoint_for(gate.attribute);
        let prompt = render_question(gate, &meme.ocr_text, markers)?;
        match ask(gateway, ep, meme, gate, prompt, decoding).await {
            Ok(raw) => {
                let answer = cue_answer(gate, ep, raw);
                if answer.parsed.is_none() {
                    parse_failures.push(gate.question_id.clone());
                }
                human_present = Some(answer.parsed.unwrap_or(false));
                answers.push(answer);
            }
            Err(e) => {
                failures.push(QuestionFailure {
                    question_id: gate.question_id.clone(),
                    error: e.to_string(),
                });
                human_present = Some(false);
            }
        }
    }

    let ask_gated = human_present == Some(true);
    let selected: Vec<&QuestionTemplate> = bank
        .follow_ups()
        .filter(|q| !q.gated_by_human || ask_gated)
        .collect();
    let mut prompts = Vec::with_capacity(selected.len());
    for q in &selected {
        prompts.push(render_question(q, &meme.ocr_text, markers)?);
    }
    let replies = join_all(selected.iter().zip(prompts).map(|(q, prompt)| {
        let ep = routing.endpoint_for(q.attribute);
        async move { (ep, ask(gateway, ep, meme, q, prompt, decoding).await) }
    }))
    .await;
    for (q, (ep, reply)) in selected.iter().zip(replies) {
        match reply {
            Ok(raw) => {
                let answer = cue_answer(q, ep, raw);
                if q.uses_fm && answer.parsed.is_none() {
                    parse_failures.push(q.question_id.clone());
                }
                answers.push(answer);
            }
            Err(e) => failures.push(QuestionFailure {
                question_id: q.question_id.clone(),
                error: e.to_string(),
            }),
        }
    }

    Ok(CueSet {
        meme_id: meme.meme_id.clone(),
        low_fidelity_description,
        partial: !failures.is_empty(),
        answers,
        human_present,
        source_lmm: routing.default.id.clone(),
        failures,
        parse_failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub meme_id: String,
    pub high_fidelity_text: String,
    pub source_lmm: String,
    pub source_llm: String,
    pub fallback_used: bool,
}

/// The `[VIG]` block: one numbered line per item, the low-fidelity description first.
pub fn format_vig(cues: &CueSet) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "\n1. {}: {}",
        Attribute::Describe.display_name(),
        cues.low_fidelity_description.trim()
    ));
    for (i, a) in cues.answers.iter().enumerate() {
        out.push_str(&format!(
            "\n{}. {}: {}",
            i + 2,
            a.attribute.display_name(),
            a.raw_text.trim()
        ));
    }
    out
}

pub fn build_integration_prompt(
    cues: &CueSet,
    ocr_text: &str,
    context: &DatasetContext,
    templates: &TemplateStore,
) -> Result<String, Meme2TextError> {
    let template = templates.integration(&context.integration_prompt_id)?;
    Ok(template
        .replace("[VIG]", &format_vig(cues))
        .replace("[OCR]", ocr_text))
}

fn fallback_text(cues: &CueSet) -> String {
    std::iter::once(cues.low_fidelity_description.trim())
        .chain(cues.answers.iter().map(|a| a.raw_text.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Merges a cue set into a single description. A refusal falls back to the
/// concatenated raw answers with `fallback_used` set.
#[allow(clippy::too_many_arguments)]
pub async fn integrate(
    gateway: &Gateway,
    cues: &CueSet,
    ocr_text: &str,
    context: &DatasetContext,
    llm: &ModelEndpoint,
    templates: &TemplateStore,
    refusal: &RefusalPolicy,
    decoding: &DecodingConfig,
) -> Result<Description, Meme2TextError> {
    let integration_err = |message: String| Meme2TextError::Integration {
        meme_id: cues.meme_id.clone(),
        message,
    };
    if cues.low_fidelity_description.trim().is_empty() {
        return Err(integration_err("cue set has an empty description".into()));
    }
    let prompt = build_integration_prompt(cues, ocr_text, context, templates)?;
    let request = ChatRequest::single(ChatMessage::user(prompt));
    let response = gateway
        .complete_with(llm, &request, decoding, CallOptions::tagged("integrate"))
        .await
        .map_err(|e| integration_err(e.to_string()))?;
    let (text, fallback_used) = if refusal.detect(&response) {
        tracing::warn!(meme = %cues.meme_id, "integration refused; using raw cues");
        (fallback_text(cues), true)
    } else if response.text.trim().is_empty() {
        return Err(integration_err("empty response".into()));
    } else {
        (response.text.trim().to_string(), false)
    };
    Ok(Description {
        meme_id: cues.meme_id.clone(),
        high_fidelity_text: text,
        source_lmm: cues.source_lmm.clone(),
        source_llm: llm.id.clone(),
        fallback_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ContextId, Split};
    use crate::gateway::{ChatResponse, FnBackend, TranscriptSink};
    use std::sync::Arc;

    fn markers() -> &'static Markers {
        &TemplateStore::packaged().markers
    }

    fn q(text: &str) -> QuestionTemplate {
        QuestionTemplate {
            question_id: "q".into(),
            attribute: Attribute::Race,
            text: text.into(),
            uses_ignore: false,
            uses_fm: false,
            uses_ocr: false,
            gated_by_human: false,
        }
    }

    #[test]
    fn every_packaged_bank_validates() {
        for id in QuestionBank::packaged_ids() {
            QuestionBank::packaged(id).unwrap();
        }
    }

    #[test]
    fn generic_bank_covers_identity_attributes() {
        let bank = QuestionBank::packaged("generic").unwrap();
        for attr in [
            Attribute::Race,
            Attribute::Gender,
            Attribute::Disability,
            Attribute::Appearance,
            Attribute::Celebrity,
        ] {
            assert!(
                bank.identity
                    .iter()
                    .any(|q| q.attribute == attr && q.gated_by_human),
                "{attr:?}"
            );
        }
    }

    #[test]
    fn plain_template_renders_unchanged() {
        let t = q("What is shown?");
        assert_eq!(
            render_question(&t, "anything", markers()).unwrap(),
            "What is shown?"
        );
    }

    #[test]
    fn mami_describe_embeds_caption() {
        let bank = QuestionBank::packaged("misogyny").unwrap();
        let p = render_question(&bank.describe, "X", markers()).unwrap();
        assert!(p.contains(r#"The overlaid text on the image reads: "X""#), "{p}");
        assert!(matches!(
            render_question(&bank.describe, "  ", markers()),
            Err(Meme2TextError::Render { .. })
        ));
    }

    #[test]
    fn ignore_then_fm_are_appended() {
        let mut t = q("Is there any human subject in the given image?");
        t.uses_ignore = true;
        t.uses_fm = true;
        assert_eq!(
            render_question(&t, "", markers()).unwrap(),
            "Is there any human subject in the given image? Ignore any overlaid text or caption. Start your response with \"Yes,\" or \"No,\" before giving the explanation."
        );
    }

    #[test]
    fn binary_parsing() {
        assert_eq!(
            parse_binary("Yes, there is one man in the image."),
            BinaryParse::Yes
        );
        assert_eq!(parse_binary("No."), BinaryParse::No);
        assert_eq!(parse_binary("  YES"), BinaryParse::Yes);
        assert!(matches!(
            parse_binary("The image shows a dog."),
            BinaryParse::Failed(_)
        ));
    }

    #[test]
    fn parse_binary_over_fixed_corpus() {
        let corpus = [
            ("Yes, a woman.", Some(true)),
            ("yes", Some(true)),
            ("No, nobody.", Some(false)),
            ("no", Some(false)),
            ("Nope.", Some(false)),
            ("There is a dog.", None),
            ("It is unclear.", None),
            ("  Yes.", Some(true)),
            ("Maybe.", None),
            ("", None),
        ];
        for (raw, want) in corpus {
            assert_eq!(parse_binary(raw).as_flag(), want, "{raw:?}");
        }
    }

    fn cues_with(n: usize) -> CueSet {
        CueSet {
            meme_id: "m".into(),
            low_fidelity_description: "A man at a desk.".into(),
            answers: [
                Attribute::Race,
                Attribute::Gender,
                Attribute::Disability,
                Attribute::Appearance,
                Attribute::Celebrity,
            ]
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, attribute)| CueAnswer {
                question_id: format!("q{i}"),
                attribute,
                endpoint_id: "v".into(),
                raw_text: format!("answer number {i}"),
                parsed: None,
            })
            .collect(),
            human_present: Some(true),
            source_lmm: "v".into(),
            partial: false,
            failures: vec![],
            parse_failures: vec![],
        }
    }

    #[test]
    fn vig_lists_items_in_order() {
        let vig = format_vig(&cues_with(5));
        let lines: Vec<&str> = vig.trim_start().lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "1. Description: A man at a desk.");
        assert_eq!(lines[1], "2. Race: answer number 0");
        assert_eq!(lines[5], "6. Celebrity: answer number 4");
        assert_eq!(format_vig(&cues_with(0)).trim_start().lines().count(), 1);
    }

    fn text_ep() -> ModelEndpoint {
        ModelEndpoint {
            id: "llm".into(),
            base_url: url::Url::parse("http://mock/v1").unwrap(),
            model_name: "llm".into(),
            modality: Modality::Text,
            credential_ref: String::new(),
        }
    }

    #[tokio::test]
    async fn integration_refusal_falls_back() {
        let gw = Gateway::new(
            Arc::new(FnBackend::new(|_, _| {
                Ok(ChatResponse::stop("I'm sorry, but I can't assist with that."))
            })),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        let cues = cues_with(2);
        let d = integrate(
            &gw,
            &cues,
            "cap",
            &ContextId::Fhm.context(),
            &text_ep(),
            TemplateStore::packaged(),
            &RefusalPolicy::default(),
            &DecodingConfig::text_default(),
        )
        .await
        .unwrap();
        assert!(d.fallback_used);
        assert_eq!(
            d.high_fidelity_text,
            "A man at a desk.\nanswer number 0\nanswer number 1"
        );
    }

    #[tokio::test]
    async fn integration_prompt_holds_every_answer_once() {
        let seen = Arc::new(std::sync::Mutex::new(String::new()));
        let s = seen.clone();
        let gw = Gateway::new(
            Arc::new(FnBackend::new(move |_, req| {
                *s.lock().unwrap() = req.last_user_text();
                Ok(ChatResponse::stop("A unified description."))
            })),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        let cues = cues_with(5);
        let d = integrate(
            &gw,
            &cues,
            "the caption",
            &ContextId::Mami.context(),
            &text_ep(),
            TemplateStore::packaged(),
            &RefusalPolicy::default(),
            &DecodingConfig::text_default(),
        )
        .await
        .unwrap();
        assert!(!d.fallback_used);
        let prompt = seen.lock().unwrap().clone();
        for a in &cues.answers {
            assert_eq!(prompt.matches(&a.raw_text).count(), 1);
        }
        assert!(prompt.contains(r#"reads: "the caption""#));

        let empty = Gateway::new(
            Arc::new(FnBackend::new(|_, _| Ok(ChatResponse::stop("  ")))),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        assert!(integrate(
            &empty,
            &cues,
            "",
            &ContextId::Fhm.context(),
            &text_ep(),
            TemplateStore::packaged(),
            &RefusalPolicy::default(),
            &DecodingConfig::text_default(),
        )
        .await
        .is_err());
    }

    #[tokio::test]
    async fn describe_only_bank_yields_description_only() {
        let bank = QuestionBank {
            bank_id: "tiny".into(),
            version: "1".into(),
            describe: QuestionTemplate {
                attribute: Attribute::Describe,
                ..q("What is shown?")
            },
            human: None,
            identity: vec![],
            context: vec![],
        };
        let gw = Gateway::new(
            Arc::new(FnBackend::new(|_, _| Ok(ChatResponse::stop("A cat.")))),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        let vision = ModelEndpoint {
            modality: Modality::Vision,
            ..text_ep()
        };
        let meme = MemeRecord {
            meme_id: "m".into(),
            context: ContextId::Fhm,
            split: Split::Test,
            image_ref: "m.png".into(),
            ocr_text: String::new(),
            gold_label: None,
        };
        let cues = extract_cues(
            &gw,
            &meme,
            &bank,
            &CueRouting::single(vision),
            TemplateStore::packaged(),
            &DecodingConfig::vision_default(),
        )
        .await
        .unwrap();
        assert_eq!(cues.low_fidelity_description, "A cat.");
        assert!(cues.answers.is_empty());
        assert_eq!(cues.human_present, None);
        assert_eq!(gw.transcript().count(), 1);

        assert!(matches!(
            extract_cues(
                &gw,
                &meme,
                &bank,
                &CueRouting::single(text_ep()),
                TemplateStore::packaged(),
                &DecodingConfig::vision_default(),
            )
            .await,
            Err(Meme2TextError::NotVision(_))
        ));
    }
}
