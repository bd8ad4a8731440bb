//! Scheme-specific prompt construction, classification calls and label extraction.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextId, FewShotExemplar, Label, LabelLexicon};
use crate::gateway::{
    CallOptions, ChatMessage, ChatRequest, DecodingConfig, Gateway, GatewayError, Modality,
    ModelEndpoint, Priority,
};
use crate::guidelines::{render_guidelines, GuidelineSet};
use crate::target::PrideVariant;
use crate::templates::{TemplateError, TemplateStore};

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("{scheme} request for meme {meme_id}: {message}")]
    Request {
        meme_id: String,
        scheme: Scheme,
        message: String,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "mcot")]
    MCoT,
    #[serde(rename = "ucot")]
    UCoT,
    #[serde(rename = "ucotplus")]
    UCoTPlus,
    #[serde(rename = "ucotplus_fs")]
    UCoTPlusFS,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::MCoT, Scheme::UCoT, Scheme::UCoTPlus, Scheme::UCoTPlusFS];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::MCoT => "mcot",
            Scheme::UCoT => "ucot",
            Scheme::UCoTPlus => "ucotplus",
            Scheme::UCoTPlusFS => "ucotplus_fs",
        }
    }

    pub fn is_multimodal(self) -> bool {
        self == Scheme::MCoT
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::MCoT => "M-CoT",
            Scheme::UCoT => "U-CoT",
            Scheme::UCoTPlus => "U-CoT+",
            Scheme::UCoTPlusFS => "U-CoT+FS",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .replace('+', "plus");
        match norm.as_str() {
            "mcot" => Ok(Scheme::MCoT),
            "ucot" => Ok(Scheme::UCoT),
            "ucotplus" => Ok(Scheme::UCoTPlus),
            "ucotplusfs" => Ok(Scheme::UCoTPlusFS),
            _ => Err(format!("unknown scheme {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub meme_id: String,
    pub scheme: Scheme,
    pub context: ContextId,
    /// Meme description; required by the unimodal schemes.
    pub description: Option<String>,
    /// Meme image; required by M-CoT.
    pub image_ref: Option<PathBuf>,
    pub ocr_text: String,
    pub guidelines: Option<GuidelineSet>,
    pub exemplars: Option<Vec<FewShotExemplar>>,
    pub cot_trigger: String,
    /// Task clause for the pride prompt; `None` lists every clause.
    pub pride_variant: Option<PrideVariant>,
}

impl ClassifyRequest {
    fn err(&self, message: impl Into<String>) -> ClassifierError {
        ClassifierError::Request {
            meme_id: self.meme_id.clone(),
            scheme: self.scheme,
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.cot_trigger.trim().is_empty() {
            return Err(self.err("chain-of-thought trigger is empty"));
        }
        match self.scheme {
            Scheme::MCoT => {
                if self.image_ref.is_none() {
                    return Err(self.err("M-CoT needs the meme image"));
                }
            }
            _ => {
                if self
                    .description
                    .as_deref()
                    .is_none_or(|d| d.trim().is_empty())
                {
                    return Err(self.err("unimodal schemes need a meme description"));
                }
            }
        }
        if self.scheme == Scheme::UCoTPlus && self.guidelines.is_none() {
            return Err(self.err("U-CoT+ needs a guideline set"));
        }
        if self.scheme == Scheme::UCoTPlusFS && self.exemplars.as_ref().is_none_or(Vec::is_empty) {
            return Err(self.err("U-CoT+FS needs few-shot exemplars"));
        }
        Ok(())
    }
}

/// The guideline-walkthrough trigger for U-CoT+, the generic one otherwise.
pub fn default_trigger(scheme: Scheme, templates: &TemplateStore) -> String {
    match scheme {
        Scheme::UCoTPlus => templates.cot.guideline.clone(),
        _ => templates.cot.generic.clone(),
    }
}

pub fn guideline_block(set: &GuidelineSet, templates: &TemplateStore) -> String {
    if set.rules.is_empty() {
        return String::new();
    }
    format!(
        "\n{}\n{}",
        templates.classification.guideline_header,
        render_guidelines(set)
    )
}

fn demos_block(exemplars: &[FewShotExemplar], lexicon: &LabelLexicon, templates: &TemplateStore) -> String {
    if exemplars.is_empty() {
        return String::new();
    }
    let mut out = format!("\n{}", templates.classification.demos_header);
    for (i, e) in exemplars.iter().enumerate() {
        out.push_str(&format!(
            "\nExample {}: {}\nClassification: {}",
            i + 1,
            e.description_text.trim(),
            lexicon.token(e.gold_label)
        ));
    }
    out
}

pub fn contract_line(lexicon: &LabelLexicon, templates: &TemplateStore) -> String {
    templates
        .classification
        .contract
        .replace("[POS]", &lexicon.positive)
        .replace("[NEG]", &lexicon.negative)
}

pub fn build_prompt(req: &ClassifyRequest, templates: &TemplateStore) -> Result<String, ClassifierError> {
    req.validate()?;
    let context = req.context.context();
    let template = templates.classify(&context.classify_prompt_id)?;
    let gl = req
        .guidelines
        .as_ref()
        .map(|g| guideline_block(g, templates))
        .unwrap_or_default();
    let demos = req
        .exemplars
        .as_deref()
        .map(|e| demos_block(e, &context.label_lexicon, templates))
        .unwrap_or_default();
    let subject = match req.scheme {
        Scheme::MCoT => templates.classification.mcot_subject.clone(),
        _ => req.description.clone().unwrap_or_default().trim().to_string(),
    };
    let mut prompt = template.text.clone();
    if let Some(tasks) = &template.tasks {
        let clause = req.pride_variant.unwrap_or(PrideVariant::All).clause(tasks);
        prompt = prompt.replace("[TASK]", clause);
    }
    let prompt = prompt
        .replace("<GL>", &gl)
        .replace("[DEMOS]", &demos)
        .replace("[OCR]", &req.ocr_text)
        .replace("[M2T]", &subject)
        .replace("[CoT]", &req.cot_trigger);
    Ok(format!(
        "{}\n{}",
        prompt,
        contract_line(&context.label_lexicon, templates)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Matched,
    FallbackMatched,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeVerdict {
    pub meme_id: String,
    pub scheme: Scheme,
    pub label: Label,
    pub rationale: String,
    pub raw_output: String,
    pub source_lmm: String,
    pub source_llm: Option<String>,
    pub extraction_status: ExtractionStatus,
}

fn contract_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^classification\s*:(.*)$").unwrap())
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '_'
}

/// Whether `token` occurs in `text` with word-character boundaries, where
/// hyphens count as word characters (so "non-hateful" does not contain "hateful").
pub fn contains_token(text: &str, token: &str) -> bool {
    let hay = text.to_lowercase();
    let needle = token.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(pos) = hay[start..].find(&needle) {
        let at = start + pos;
        let end = at + needle.len();
        let before = hay[..at].chars().next_back();
        let after = hay[end..].chars().next();
        if !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char) {
            return true;
        }
        start = at + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

fn tail(text: &str, chars: usize) -> &str {
    let n = text.chars().count();
    if n <= chars {
        return text;
    }
    let skip = text.char_indices().nth(n - chars).map_or(0, |(i, _)| i);
    &text[skip..]
}

/// Reads the binary verdict from a rationale.
///
/// First the last line starting with `Classification:` is matched exactly
/// (case-insensitive, surrounding punctuation stripped) against the lexicon.
/// Failing that, the last 200 characters must contain exactly one of the two
/// tokens. Otherwise extraction fails and the label defaults to negative.
pub fn extract_label(raw_output: &str, lexicon: &LabelLexicon) -> (Label, ExtractionStatus) {
    let contract_value = raw_output.lines().rev().find_map(|line| {
        let l = line.trim().trim_start_matches(['*', '#', '>', ' ']);
        contract_re().captures(l).map(|c| c[1].to_string())
    });
    if let Some(value) = contract_value {
        let v = value
            .trim()
            .trim_matches(|c: char| c.is_whitespace() || "*\"'`.[](){}:;!".contains(c))
            .to_lowercase();
        if v == lexicon.positive.to_lowercase() {
            return (Label::Positive, ExtractionStatus::Matched);
        }
        if v == lexicon.negative.to_lowercase() {
            return (Label::Negative, ExtractionStatus::Matched);
        }
    }
    let t = tail(raw_output, 200);
    match (contains_token(t, &lexicon.positive), contains_token(t, &lexicon.negative)) {
        (true, false) => (Label::Positive, ExtractionStatus::FallbackMatched),
        (false, true) => (Label::Negative, ExtractionStatus::FallbackMatched),
        _ => (Label::Negative, ExtractionStatus::Failed),
    }
}

/// Builds the prompt, calls `endpoint` and extracts the verdict. M-CoT
/// requests attach the meme image and need a vision endpoint.
pub async fn classify(
    gateway: &Gateway,
    req: &ClassifyRequest,
    endpoint: &ModelEndpoint,
    decoding: &DecodingConfig,
    templates: &TemplateStore,
    source_lmm: &str,
    priority: Priority,
) -> Result<SchemeVerdict, ClassifierError> {
    let prompt = build_prompt(req, templates)?;
    let message = match req.scheme {
        Scheme::MCoT => {
            if endpoint.modality != Modality::Vision {
                return Err(req.err(format!("endpoint {} cannot see images", endpoint.id)));
            }
            ChatMessage::user_with_image(req.image_ref.clone().unwrap_or_default(), prompt)
        }
        _ => ChatMessage::user(prompt),
    };
    let opts = CallOptions {
        priority,
        tag: Some(format!("classify:{}", req.scheme.as_str())),
    };
    let resp = gateway
        .complete_with(endpoint, &ChatRequest::single(message), decoding, opts)
        .await?;
    let lexicon = req.context.context().label_lexicon;
    let (label, extraction_status) = extract_label(&resp.text, &lexicon);
    Ok(SchemeVerdict {
        meme_id: req.meme_id.clone(),
        scheme: req.scheme,
        label,
        rationale: resp.text.clone(),
        raw_output: resp.text,
        source_lmm: source_lmm.to_string(),
        source_llm: (req.scheme != Scheme::MCoT).then(|| endpoint.id.clone()),
        extraction_status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatResponse, FnBackend, TranscriptSink};
    use std::sync::Arc;

    fn base(scheme: Scheme, context: ContextId) -> ClassifyRequest {
        ClassifyRequest {
            meme_id: "m1".into(),
            scheme,
            context,
            description: Some("Two people shaking hands at a podium".into()),
            image_ref: None,
            ocr_text: "when the deal goes through".into(),
            guidelines: None,
            exemplars: None,
            cot_trigger: TemplateStore::packaged().cot.generic.clone(),
            pride_variant: None,
        }
    }

    fn lex(ctx: ContextId) -> LabelLexicon {
        ctx.context().label_lexicon
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("U-CoT+".parse::<Scheme>().unwrap(), Scheme::UCoTPlus);
        assert_eq!("ucot+fs".parse::<Scheme>().unwrap(), Scheme::UCoTPlusFS);
        assert_eq!("M-CoT".parse::<Scheme>().unwrap(), Scheme::MCoT);
        assert!("cot".parse::<Scheme>().is_err());
    }

    #[test]
    fn ucotplus_fhm_prompt() {
        let mut r = base(Scheme::UCoTPlus, ContextId::Fhm);
        let gl = GuidelineSet::packaged("fhm").unwrap();
        r.guidelines = Some(gl.clone());
        let p = build_prompt(&r, TemplateStore::packaged()).unwrap();
        assert!(p.contains("classify the content as either hateful or non-hateful"));
        assert!(p.contains(&render_guidelines(&gl)));
        assert!(p.contains(r#"The caption overlaid on the image reads: "when the deal goes through"."#));
        assert!(p.ends_with("\"Classification: hateful\" or \"Classification: non-hateful\"."));
    }

    #[test]
    fn ucot_equals_ucotplus_with_empty_guidelines() {
        for ctx in [ContextId::Fhm, ContextId::HarMeme, ContextId::PrideMm] {
            let plain = base(Scheme::UCoT, ctx);
            let mut plus = base(Scheme::UCoTPlus, ctx);
            plus.guidelines = Some(GuidelineSet::empty("x", ctx));
            assert_eq!(
                build_prompt(&plain, TemplateStore::packaged()).unwrap(),
                build_prompt(&plus, TemplateStore::packaged()).unwrap()
            );
        }
    }

    #[test]
    fn few_shot_pairs_precede_target() {
        let mut r = base(Scheme::UCoTPlusFS, ContextId::HarMeme);
        r.exemplars = Some(
            (0..4)
                .map(|i| FewShotExemplar {
                    description_text: format!("demo meme {i}"),
                    gold_label: Label::from_bool(i % 2 == 0),
                })
                .collect(),
        );
        let p = build_prompt(&r, TemplateStore::packaged()).unwrap();
        let target = p.find("Meme content you need to classify").unwrap();
        for i in 0..4 {
            assert!(p.find(&format!("demo meme {i}")).unwrap() < target);
        }
        assert_eq!(p.matches("\nClassification: harmful").count(), 2);
        assert_eq!(p.matches("\nClassification: harmless").count(), 2);
    }

    #[test]
    fn harmeme_names_its_topic() {
        let mut r = base(Scheme::UCoTPlus, ContextId::HarMeme);
        r.guidelines = Some(GuidelineSet::packaged("harmeme").unwrap());
        assert!(build_prompt(&r, TemplateStore::packaged())
            .unwrap()
            .contains("COVID-19 pandemic"));
    }

    #[test]
    fn scheme_requirements() {
        let r = base(Scheme::MCoT, ContextId::Fhm);
        assert!(matches!(
            build_prompt(&r, TemplateStore::packaged()),
            Err(ClassifierError::Request { .. })
        ));
        let r = base(Scheme::UCoTPlus, ContextId::Fhm);
        assert!(build_prompt(&r, TemplateStore::packaged()).is_err());
        let mut r = base(Scheme::UCoT, ContextId::Fhm);
        r.description = None;
        assert!(build_prompt(&r, TemplateStore::packaged()).is_err());
        let mut r = base(Scheme::UCoT, ContextId::Fhm);
        r.cot_trigger = " ".into();
        assert!(build_prompt(&r, TemplateStore::packaged()).is_err());
    }

    #[test]
    fn pride_variants_select_clauses() {
        let t = TemplateStore::packaged();
        let tasks = t.classify("pridemm").unwrap().tasks.clone().unwrap();
        let mut r = base(Scheme::UCoT, ContextId::PrideMm);
        r.pride_variant = Some(PrideVariant::D);
        let p = build_prompt(&r, t).unwrap();
        assert!(p.contains(&tasks.d));
        assert!(!p.contains("A. If targeting"));
        r.pride_variant = None;
        assert!(build_prompt(&r, t).unwrap().contains("A. If targeting"));
    }

    #[test]
    fn extraction_examples() {
        let mami = lex(ContextId::Mami);
        assert_eq!(
            extract_label("Step 1...\nClassification: misogynistic", &mami),
            (Label::Positive, ExtractionStatus::Matched)
        );
        let harm = lex(ContextId::HarMeme);
        assert_eq!(
            extract_label("After review the meme is harmless overall.", &harm),
            (Label::Negative, ExtractionStatus::FallbackMatched)
        );
        assert_eq!(
            extract_label("It could be harmful or it could be harmless.", &harm),
            (Label::Negative, ExtractionStatus::Failed)
        );
        let fhm = lex(ContextId::Fhm);
        assert_eq!(
            extract_label("The content is non-hateful.", &fhm),
            (Label::Negative, ExtractionStatus::FallbackMatched)
        );
        assert_eq!(
            extract_label("**Classification:** **Hateful**", &fhm),
            (Label::Positive, ExtractionStatus::Matched)
        );
    }

    #[test]
    fn contract_line_wins_over_tail_tokens() {
        let harm = lex(ContextId::HarMeme);
        let text = "Classification: harmless\nNote: not harmful in any way, harmful jokes absent.";
        assert_eq!(
            extract_label(text, &harm),
            (Label::Negative, ExtractionStatus::Matched)
        );
    }

    #[tokio::test]
    async fn classify_passes_rationale_through() {
        let gw = Gateway::new(
            Arc::new(FnBackend::new(|_, _| {
                Ok(ChatResponse::stop("Reasoning.\nClassification: harmful"))
            })),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        let ep = ModelEndpoint {
            id: "llm".into(),
            base_url: url::Url::parse("http://mock/v1").unwrap(),
            model_name: "llm".into(),
            modality: Modality::Text,
            credential_ref: String::new(),
        };
        let r = base(Scheme::UCoT, ContextId::HarMeme);
        let v = classify(
            &gw,
            &r,
            &ep,
            &DecodingConfig::text_default(),
            TemplateStore::packaged(),
            "qwen",
            Priority::Batch,
        )
        .await
        .unwrap();
        assert_eq!(v.label, Label::Positive);
        assert_eq!(v.extraction_status, ExtractionStatus::Matched);
        assert_eq!(v.rationale, "Reasoning.\nClassification: harmful");
        assert_eq!(v.source_llm.as_deref(), Some("llm"));

        let mut m = base(Scheme::MCoT, ContextId::HarMeme);
        m.image_ref = Some("x.png".into());
        assert!(classify(
            &gw,
            &m,
            &ep,
            &DecodingConfig::vision_default(),
            TemplateStore::packaged(),
            "qwen",
            Priority::Batch
        )
        .await
        .is_err());
    }
}
