//! Fine-grained target identification.
//!
//! Hateful-meme contexts detect which protected groups a meme involves and
//! generate group-specific hateful-form phrases that extend the guidelines.
//! Pride contexts run six entity questions in one conversation, then pick the
//! meme's target category, which selects the classification task clause.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{
    CallOptions, ChatMessage, ChatRequest, DecodingConfig, Gateway, GatewayError, ModelEndpoint,
};
use crate::meme2text::parse_binary;
use crate::templates::TemplateStore;

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("description is empty")]
    EmptyDescription,
    #[error("hateful forms need at least one detected group")]
    NoGroups,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("seed file: {0}")]
    Seeds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtectedGroup {
    Women,
    #[serde(rename = "LGBTQ")]
    Lgbtq,
    Disabilities,
    Muslims,
    MiddleEastern,
    Jewish,
    AfricanDescent,
    AfricanAmericans,
    EastAsian,
    SouthAsian,
    NativeAmericans,
    Other,
}

impl ProtectedGroup {
    pub const ALL: [ProtectedGroup; 12] = [
        ProtectedGroup::Women,
        ProtectedGroup::Lgbtq,
        ProtectedGroup::Disabilities,
        ProtectedGroup::Muslims,
        ProtectedGroup::MiddleEastern,
        ProtectedGroup::Jewish,
        ProtectedGroup::AfricanDescent,
        ProtectedGroup::AfricanAmericans,
        ProtectedGroup::EastAsian,
        ProtectedGroup::SouthAsian,
        ProtectedGroup::NativeAmericans,
        ProtectedGroup::Other,
    ];

    /// 1-based position in the option list of the detection prompt.
    pub fn option_number(self) -> usize {
        Self::ALL.iter().position(|g| *g == self).unwrap() + 1
    }

    pub fn from_option_number(n: usize) -> Option<Self> {
        n.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    /// Option text exactly as listed in the detection prompt.
    pub fn canonical_name(self) -> &'static str {
        match self {
            ProtectedGroup::Women => "Women (Female)",
            ProtectedGroup::Lgbtq => "LGBTQ Community",
            ProtectedGroup::Disabilities => "People with Disabilities",
            ProtectedGroup::Muslims => "Muslims and Islamic culture",
            ProtectedGroup::MiddleEastern => "Individuals of Middle Eastern descent",
            ProtectedGroup::Jewish => "Jewish individuals",
            ProtectedGroup::AfricanDescent => "Individuals of African descent",
            ProtectedGroup::AfricanAmericans => "African Americans",
            ProtectedGroup::EastAsian => "Individuals of East Asian descent",
            ProtectedGroup::SouthAsian => "Individuals of South Asian descent",
            ProtectedGroup::NativeAmericans => "Native Americans",
            ProtectedGroup::Other => "Other protected groups not listed",
        }
    }

    /// Lowercase stem used to find the group in free text.
    fn keyword(self) -> &'static str {
        match self {
            ProtectedGroup::Women => "women",
            ProtectedGroup::Lgbtq => "lgbt",
            ProtectedGroup::Disabilities => "disabilit",
            ProtectedGroup::Muslims => "muslim",
            ProtectedGroup::MiddleEastern => "middle east",
            ProtectedGroup::Jewish => "jew",
            ProtectedGroup::AfricanDescent => "african descent",
            ProtectedGroup::AfricanAmericans => "african american",
            ProtectedGroup::EastAsian => "east asian",
            ProtectedGroup::SouthAsian => "south asian",
            ProtectedGroup::NativeAmericans => "native american",
            ProtectedGroup::Other => "other",
        }
    }

    pub fn slug(self) -> String {
        self.canonical_name()
            .to_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl fmt::Display for ProtectedGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

pub const NO_GROUP_SENTINEL: &str = "No specific protected group involved";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedGroupFinding {
    pub groups: BTreeSet<ProtectedGroup>,
    pub none_found: bool,
    pub raw_rationale: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn number_list_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[*#]+\s*)?(?:(?:final\s+)?(?:answer|answers|options?|groups?)\s*:?\s*)?\**\s*(\d{1,2}(?:\s*(?:,|;|and|&)\s*\d{1,2})*)\s*\.?\s*\**\s*$").unwrap()
    })
}

fn numbered_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*]\s*)?\**(\d{1,2})[.)]\**\s*(.*)$").unwrap())
}

/// Reads detected groups from a detection reply.
///
/// A group matches when its canonical option name appears (case-insensitive),
/// when a numbered line `N. <name>` names it, or when a line is nothing but
/// option numbers. Without any match, the no-group sentinel yields
/// `none_found`; anything else also yields `none_found` with a warning.
pub fn parse_protected_groups(raw: &str) -> ProtectedGroupFinding {
    let lower = raw.to_lowercase();
    let mut groups = BTreeSet::new();
    for g in ProtectedGroup::ALL {
        if lower.contains(&g.canonical_name().to_lowercase()) {
            groups.insert(g);
        }
    }
    for line in raw.lines() {
        if let Some(c) = numbered_line_re().captures(line) {
            let n: usize = c[1].parse().unwrap_or(0);
            if let Some(g) = ProtectedGroup::from_option_number(n) {
                if c[2].to_lowercase().trim_start().starts_with(g.keyword()) {
                    groups.insert(g);
                }
            }
        }
        if let Some(c) = number_list_re().captures(line) {
            for n in c[1]
                .split(|ch: char| !ch.is_ascii_digit())
                .filter_map(|s| s.parse::<usize>().ok())
            {
                if let Some(g) = ProtectedGroup::from_option_number(n) {
                    groups.insert(g);
                }
            }
        }
    }
    let mut warnings = Vec::new();
    let none_found = if !groups.is_empty() {
        false
    } else {
        if !lower.contains(&NO_GROUP_SENTINEL.to_lowercase()) {
            warnings.push("no protected-group option or sentinel recognized".to_string());
        }
        true
    };
    ProtectedGroupFinding {
        groups,
        none_found,
        raw_rationale: raw.to_string(),
        warnings,
    }
}

pub fn build_protected_groups_prompt(
    description: &str,
    ocr_text: &str,
    templates: &TemplateStore,
) -> String {
    templates
        .target
        .protected_groups
        .replace("[M2T]", description)
        .replace("[OCR]", ocr_text)
        .replace("[CoT]", &templates.cot.generic)
}

pub async fn detect_protected_groups(
    gateway: &Gateway,
    description: &str,
    ocr_text: &str,
    llm: &ModelEndpoint,
    templates: &TemplateStore,
    decoding: &DecodingConfig,
) -> Result<ProtectedGroupFinding, TargetError> {
    if description.trim().is_empty() {
        return Err(TargetError::EmptyDescription);
    }
    let prompt = build_protected_groups_prompt(description, ocr_text, templates);
    let resp = gateway
        .complete_with(
            llm,
            &ChatRequest::single(ChatMessage::user(prompt)),
            decoding,
            CallOptions::tagged("target:groups"),
        )
        .await?;
    let finding = parse_protected_groups(&resp.text);
    for w in &finding.warnings {
        tracing::warn!(warning = %w, "protected group detection");
    }
    Ok(finding)
}

/// Seed phrases (`[FS]`) per protected group, versioned for caching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExamples {
    pub version: String,
    pub seeds: BTreeMap<ProtectedGroup, Vec<String>>,
}

impl SeedExamples {
    pub fn packaged() -> &'static SeedExamples {
        static SEEDS: OnceLock<SeedExamples> = OnceLock::new();
        SEEDS.get_or_init(|| {
            toml::from_str(include_str!("../assets/hateful_forms_seeds.toml"))
                .expect("packaged seed file is valid")
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TargetError> {
        let text = std::fs::read_to_string(path).map_err(|e| TargetError::Seeds(e.to_string()))?;
        toml::from_str(&text).map_err(|e| TargetError::Seeds(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HatefulFormsList {
    pub per_group: BTreeMap<ProtectedGroup, Vec<String>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn build_hateful_forms_prompt(
    groups: &[ProtectedGroup],
    seeds: &SeedExamples,
    templates: &TemplateStore,
) -> String {
    let mut items = Vec::with_capacity(groups.len() + 1);
    for (i, g) in groups.iter().enumerate() {
        let fs = seeds
            .seeds
            .get(g)
            .map(|s| s.join(", "))
            .unwrap_or_default();
        let mut item = templates.target.hateful_forms_item.clone();
        if fs.is_empty() {
            item = item.replace(" e.g., [FS]", "");
        }
        items.push(
            item.replace("[N]", &(i + 1).to_string())
                .replace("[TG]", g.canonical_name())
                .replace("[FS]", &fs),
        );
    }
    items.push(templates.target.hateful_forms_footer.clone());
    items.join("\n")
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*\u{2022}]|\d{1,2}[.)])\s+(.*)$").unwrap())
}

fn is_heading_for(line: &str, group: ProtectedGroup, index: usize) -> bool {
    let t = line.trim();
    if t.starts_with("- ") || t.starts_with("* ") || t.starts_with('\u{2022}') {
        return false;
    }
    if !t.to_lowercase().contains(group.keyword()) {
        return false;
    }
    let numbered = t
        .trim_start_matches(['#', '*', ' '])
        .strip_prefix(&index.to_string())
        .is_some_and(|rest| rest.starts_with('.') || rest.starts_with(')'));
    numbered || t.starts_with('#') || t.starts_with("**") || t.trim_end_matches('*').ends_with(':')
}

fn clean_phrase(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '*' || c == '"')
        .trim()
        .trim_end_matches(['.', ';', ','])
        .trim()
        .to_string()
}

fn phrases_of(lines: &[&str]) -> Vec<String> {
    let bullets: Vec<String> = lines
        .iter()
        .filter_map(|l| bullet_re().captures(l).map(|c| clean_phrase(&c[1])))
        .filter(|p| !p.is_empty())
        .collect();
    if !bullets.is_empty() {
        return bullets;
    }
    lines
        .iter()
        .flat_map(|l| l.split([',', ';']))
        .map(clean_phrase)
        .filter(|p| !p.is_empty())
        .collect()
}

/// Splits a hateful-forms reply into per-group phrase lists.
///
/// Sections start at a heading line naming the group, searched in request
/// order. With a single group and no heading, the whole reply is its section.
/// If any section is missing, every list is left empty and a warning is recorded.
pub fn parse_hateful_forms(raw: &str, groups: &[ProtectedGroup]) -> HatefulFormsList {
    let lines: Vec<&str> = raw.lines().collect();
    let mut starts = Vec::with_capacity(groups.len());
    let mut from = 0;
    for (i, g) in groups.iter().enumerate() {
        match (from..lines.len()).find(|&j| is_heading_for(lines[j], *g, i + 1)) {
            Some(j) => {
                starts.push(j);
                from = j + 1;
            }
            None => break,
        }
    }
    let mut per_group = BTreeMap::new();
    let mut warnings = Vec::new();
    if starts.len() == groups.len() && !groups.is_empty() {
        for (i, g) in groups.iter().enumerate() {
            let end = starts.get(i + 1).copied().unwrap_or(lines.len());
            per_group.insert(*g, phrases_of(&lines[starts[i] + 1..end]));
        }
    } else if groups.len() == 1 {
        per_group.insert(groups[0], phrases_of(&lines));
    } else {
        warnings.push("could not split hateful forms reply into per-group sections".to_string());
        for g in groups {
            per_group.insert(*g, Vec::new());
        }
    }
    HatefulFormsList {
        per_group,
        warnings,
    }
}

type FormsKey = (Vec<ProtectedGroup>, String);

/// Hateful-forms generations keyed by (group set, seed version).
#[derive(Default)]
pub struct HatefulFormsCache {
    entries: Mutex<HashMap<FormsKey, HatefulFormsList>>,
}

impl HatefulFormsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub async fn generate_hateful_forms(
    gateway: &Gateway,
    finding: &ProtectedGroupFinding,
    seeds: &SeedExamples,
    llm: &ModelEndpoint,
    templates: &TemplateStore,
    decoding: &DecodingConfig,
    cache: Option<&HatefulFormsCache>,
) -> Result<HatefulFormsList, TargetError> {
    if finding.none_found || finding.groups.is_empty() {
        return Err(TargetError::NoGroups);
    }
    let groups: Vec<ProtectedGroup> = finding.groups.iter().copied().collect();
    let key = (groups.clone(), seeds.version.clone());
    if let Some(c) = cache {
        if let Some(hit) = c.entries.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
    }
    let prompt = build_hateful_forms_prompt(&groups, seeds, templates);
    let resp = gateway
        .complete_with(
            llm,
            &ChatRequest::single(ChatMessage::user(prompt)),
            decoding,
            CallOptions::tagged("target:forms"),
        )
        .await?;
    let forms = parse_hateful_forms(&resp.text, &groups);
    if let Some(c) = cache {
        c.entries.lock().unwrap().insert(key, forms.clone());
    }
    Ok(forms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrideTarget {
    Undirected,
    SpecificIndividual,
    #[serde(rename = "LGBTQCommunity")]
    LgbtqCommunity,
    Organization,
}

impl PrideTarget {
    pub const ALL: [PrideTarget; 4] = [
        PrideTarget::Undirected,
        PrideTarget::SpecificIndividual,
        PrideTarget::LgbtqCommunity,
        PrideTarget::Organization,
    ];

    pub fn option_name(self) -> &'static str {
        match self {
            PrideTarget::Undirected => "Undirected",
            PrideTarget::SpecificIndividual => "Specific Individual",
            PrideTarget::LgbtqCommunity => "LGBTQ+ Community",
            PrideTarget::Organization => "Organization",
        }
    }

    fn pattern(self) -> &'static Regex {
        static RES: OnceLock<[Regex; 4]> = OnceLock::new();
        let res = RES.get_or_init(|| {
            [
                Regex::new(r"(?i)\bundirected\b").unwrap(),
                Regex::new(r"(?i)\bspecific\s+individuals?\b").unwrap(),
                Regex::new(r"(?i)\blgbtq\+?\s+community\b").unwrap(),
                Regex::new(r"(?i)\borganizations?\b").unwrap(),
            ]
        });
        &res[PrideTarget::ALL.iter().position(|t| *t == self).unwrap()]
    }

    /// Classification task clause this target selects.
    pub fn variant(self) -> PrideVariant {
        match self {
            PrideTarget::Undirected | PrideTarget::LgbtqCommunity => PrideVariant::A,
            PrideTarget::SpecificIndividual => PrideVariant::C,
            PrideTarget::Organization => PrideVariant::D,
        }
    }
}

/// Task clauses of the pride classification prompt; `All` lists every clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrideVariant {
    All,
    A,
    B,
    C,
    D,
}

impl PrideVariant {
    pub fn clause(self, tasks: &crate::templates::PrideTasks) -> &str {
        match self {
            PrideVariant::All => &tasks.all,
            PrideVariant::A => &tasks.a,
            PrideVariant::B => &tasks.b,
            PrideVariant::C => &tasks.c,
            PrideVariant::D => &tasks.d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityQuestion {
    Country,
    Politics,
    Company,
    Individual,
    Organization,
    Subgroup,
}

impl EntityQuestion {
    pub const ALL: [EntityQuestion; 6] = [
        EntityQuestion::Country,
        EntityQuestion::Politics,
        EntityQuestion::Company,
        EntityQuestion::Individual,
        EntityQuestion::Organization,
        EntityQuestion::Subgroup,
    ];

    fn uses_fm(self) -> bool {
        matches!(
            self,
            EntityQuestion::Country | EntityQuestion::Politics | EntityQuestion::Company
        )
    }

    fn text(self, templates: &TemplateStore) -> &str {
        let t = &templates.target;
        match self {
            EntityQuestion::Country => &t.pride_country,
            EntityQuestion::Politics => &t.pride_politics,
            EntityQuestion::Company => &t.pride_company,
            EntityQuestion::Individual => &t.pride_individual,
            EntityQuestion::Organization => &t.pride_organization,
            EntityQuestion::Subgroup => &t.pride_subgroup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnswer {
    pub raw_text: String,
    pub flag: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrideTargetFinding {
    pub entity_answers: BTreeMap<EntityQuestion, EntityAnswer>,
    pub target: PrideTarget,
    pub raw_rationale: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn build_entity_prompt(
    question: EntityQuestion,
    description: &str,
    templates: &TemplateStore,
) -> String {
    let t = &templates.target;
    let mut p = format!(
        "{}{}{}",
        t.pride_entity_prefix,
        question.text(templates),
        t.pride_entity_description.replace("[M2T]", description)
    );
    if question.uses_fm() {
        p.push(' ');
        p.push_str(&templates.markers.fm);
    } else {
        p.push('\n');
        p.push_str(&templates.cot.generic);
    }
    p
}

pub fn build_pride_target_prompt(description: &str, templates: &TemplateStore) -> String {
    templates
        .target
        .pride_target
        .replace("[M2T]", description)
        .replace("[CoT]", &templates.cot.generic)
}

fn answer_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*[*#]*\s*(?:final\s+)?(?:target(?:\s+subject)?|answer|category)\s*\**\s*:\s*(.*)$")
            .unwrap()
    })
}

fn targets_in(text: &str) -> BTreeSet<usize> {
    PrideTarget::ALL
        .iter()
        .enumerate()
        .filter(|(_, t)| t.pattern().is_match(text))
        .map(|(i, _)| i)
        .collect()
}

/// Picks the target category: the last `Target:` style line first, then the whole reply.
/// Anything other than exactly one category falls back to `Undirected` with a warning.
pub fn parse_pride_target(raw: &str) -> (PrideTarget, Vec<String>) {
    if let Some(value) = raw
        .lines()
        .rev()
        .find_map(|l| answer_line_re().captures(l).map(|c| c[1].to_string()))
    {
        let mut found = targets_in(&value);
        if found.is_empty() {
            let digits = value.trim().trim_start_matches(['*', '[', '(']);
            if let Some(n) = digits
                .chars()
                .next()
                .and_then(|c| c.to_digit(10))
                .filter(|n| (1..=4).contains(n))
            {
                found.insert(n as usize - 1);
            }
        }
        if found.len() == 1 {
            return (PrideTarget::ALL[*found.iter().next().unwrap()], Vec::new());
        }
    }
    let found = targets_in(raw);
    if found.len() == 1 {
        return (PrideTarget::ALL[*found.iter().next().unwrap()], Vec::new());
    }
    let why = if found.is_empty() {
        "no target category recognized"
    } else {
        "several target categories named"
    };
    (
        PrideTarget::Undirected,
        vec![format!("{why}; defaulting to Undirected")],
    )
}

/// Runs the six entity questions and the target question as one conversation.
pub async fn classify_pride_target(
    gateway: &Gateway,
    description: &str,
    llm: &ModelEndpoint,
    templates: &TemplateStore,
    decoding: &DecodingConfig,
) -> Result<PrideTargetFinding, TargetError> {
    if description.trim().is_empty() {
        return Err(TargetError::EmptyDescription);
    }
    let mut messages = Vec::new();
    let mut entity_answers = BTreeMap::new();
    for q in EntityQuestion::ALL {
        messages.push(ChatMessage::user(build_entity_prompt(q, description, templates)));
        let resp = gateway
            .complete_with(
                llm,
                &ChatRequest::new(messages.clone()),
                decoding,
                CallOptions::tagged(format!("target:entity:{}", serde_json::to_value(q).unwrap().as_str().unwrap())),
            )
            .await?;
        let flag = if q.uses_fm() {
            parse_binary(&resp.text).as_flag()
        } else {
            None
        };
        messages.push(ChatMessage::assistant(resp.text.clone()));
        entity_answers.insert(
            q,
            EntityAnswer {
                raw_text: resp.text,
                flag,
            },
        );
    }
    messages.push(ChatMessage::user(build_pride_target_prompt(description, templates)));
    let resp = gateway
        .complete_with(
            llm,
            &ChatRequest::new(messages),
            decoding,
            CallOptions::tagged("target:pride"),
        )
        .await?;
    let (target, warnings) = parse_pride_target(&resp.text);
    for w in &warnings {
        tracing::warn!(warning = %w, "pride target classification");
    }
    Ok(PrideTargetFinding {
        entity_answers,
        target,
        raw_rationale: resp.text,
        warnings,
    })
}
