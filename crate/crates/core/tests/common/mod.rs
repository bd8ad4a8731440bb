//! Fixture prompts rendered for golden-file comparison.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use memelens_core::classifier::{build_prompt, guideline_block, ClassifyRequest};
use memelens_core::corpus::{FewShotExemplar, Label};
use memelens_core::meme2text::{build_integration_prompt, render_question, CueAnswer, CueSet, QuestionBank};
use memelens_core::target::{
    build_entity_prompt, build_hateful_forms_prompt, build_pride_target_prompt,
    build_protected_groups_prompt, EntityQuestion, PrideVariant, ProtectedGroup, SeedExamples,
};
use memelens_core::{classifier, ContextId, GuidelineSet, Scheme, TemplateStore};

pub const SOURCE_CONTEXTS: [ContextId; 6] = [
    ContextId::Fhm,
    ContextId::HarMeme,
    ContextId::HarmP,
    ContextId::MultiOff,
    ContextId::Mami,
    ContextId::PrideMm,
];

pub const OCR: &str = "when you finally finish the group project alone";
pub const DESCRIPTION: &str = "A tired student slumps over a desk covered in papers while three classmates relax on a sofa in the background";

/// Markers that must never survive rendering.
pub const RAW_MARKERS: [&str; 11] = [
    "[OCR]", "[Ignore]", "[Fm]", "<GL>", "[M2T]", "[VIG]", "[CoT]", "[DEMOS]", "[TASK]", "[POS]",
    "[NEG]",
];

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn dir_name(ctx: ContextId) -> String {
    ctx.as_str().to_ascii_lowercase()
}

fn exemplars() -> Vec<FewShotExemplar> {
    [
        ("A cartoon frog holds a sign mocking a religious group", Label::Positive),
        ("A dog wearing sunglasses lounges by a pool", Label::Negative),
        ("A crowd photo captioned with a slur against immigrants", Label::Positive),
        ("Two friends laughing over a burnt birthday cake", Label::Negative),
    ]
    .into_iter()
    .map(|(d, l)| FewShotExemplar {
        description_text: d.into(),
        gold_label: l,
    })
    .collect()
}

pub fn request(ctx: ContextId, scheme: Scheme) -> ClassifyRequest {
    let t = TemplateStore::packaged();
    let context = ctx.context();
    ClassifyRequest {
        meme_id: "fixture".into(),
        scheme,
        context: ctx,
        description: (scheme != Scheme::MCoT).then(|| DESCRIPTION.to_string()),
        image_ref: (scheme == Scheme::MCoT).then(|| PathBuf::from("fixture.png")),
        ocr_text: OCR.into(),
        guidelines: (scheme == Scheme::UCoTPlus)
            .then(|| GuidelineSet::packaged(&context.guideline_id).unwrap()),
        exemplars: (scheme == Scheme::UCoTPlusFS).then(exemplars),
        cot_trigger: classifier::default_trigger(scheme, t),
        pride_variant: (ctx == ContextId::PrideMm && scheme != Scheme::MCoT).then_some(PrideVariant::D),
    }
}

fn cue_set(bank: &QuestionBank) -> CueSet {
    let answers = bank
        .human
        .iter()
        .chain(bank.follow_ups())
        .map(|q| CueAnswer {
            question_id: q.question_id.clone(),
            attribute: q.attribute,
            endpoint_id: "vision".into(),
            raw_text: if q.uses_fm {
                format!("Yes, answer to {}.", q.question_id)
            } else {
                format!("Answer to {}.", q.question_id)
            },
            parsed: q.uses_fm.then_some(true),
        })
        .collect();
    CueSet {
        meme_id: "fixture".into(),
        low_fidelity_description: "A student at a desk with papers.".into(),
        answers,
        human_present: Some(true),
        source_lmm: "vision".into(),
        partial: false,
        failures: vec![],
        parse_failures: vec![],
    }
}

/// Every golden prompt as (relative path, text).
pub fn render_all() -> Vec<(String, String)> {
    let t = TemplateStore::packaged();
    let mut out = Vec::new();
    for ctx in SOURCE_CONTEXTS {
        let dir = dir_name(ctx);
        let context = ctx.context();
        let bank = QuestionBank::packaged(&context.question_bank_id).unwrap();

        let mut cues = String::new();
        for q in bank.all_questions() {
            let p = render_question(q, OCR, &t.markers).unwrap();
            cues.push_str(&format!("## {}\n{}\n\n", q.question_id, p));
        }
        out.push((format!("{dir}/cues.txt"), cues));
        out.push((
            format!("{dir}/integration.txt"),
            build_integration_prompt(&cue_set(&bank), OCR, &context, t).unwrap(),
        ));
        for scheme in Scheme::ALL {
            out.push((
                format!("{dir}/{}.txt", scheme.as_str()),
                build_prompt(&request(ctx, scheme), t).unwrap(),
            ));
        }
    }
    out.push((
        "fhm/target_groups.txt".into(),
        build_protected_groups_prompt(DESCRIPTION, OCR, t),
    ));
    out.push((
        "fhm/hateful_forms.txt".into(),
        build_hateful_forms_prompt(
            &[ProtectedGroup::Women, ProtectedGroup::Jewish],
            SeedExamples::packaged(),
            t,
        ),
    ));
    let mut pride = String::new();
    for q in EntityQuestion::ALL {
        pride.push_str(&format!("## {q:?}\n{}\n\n", build_entity_prompt(q, DESCRIPTION, t)));
    }
    pride.push_str(&format!("## Target\n{}\n", build_pride_target_prompt(DESCRIPTION, t)));
    out.push(("pridemm/target.txt".into(), pride));
    out
}

/// Compares rendered prompts with the committed files; with `bless` the
/// files are rewritten instead. Returns one message per problem.
pub fn check_golden(bless: bool) -> Vec<String> {
    let root = golden_dir();
    let mut problems = Vec::new();
    for (rel, text) in render_all() {
        for m in RAW_MARKERS {
            if text.contains(m) {
                problems.push(format!("{rel}: unsubstituted marker {m}"));
            }
        }
        let path = root.join(&rel);
        if bless {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        match std::fs::read_to_string(&path) {
            Ok(expected) if expected == text => {}
            Ok(_) => problems.push(format!("{rel}: differs from golden file")),
            Err(e) => problems.push(format!("{rel}: {e}")),
        }
    }
    problems
}

/// UCoT must equal UCoT+ with the guideline block cut out, for every context.
pub fn check_ablation_identity() -> Vec<String> {
    let t = TemplateStore::packaged();
    let mut problems = Vec::new();
    for ctx in SOURCE_CONTEXTS {
        let plus = request(ctx, Scheme::UCoTPlus);
        let block = guideline_block(plus.guidelines.as_ref().unwrap(), t);
        let with = build_prompt(&plus, t).unwrap();
        let mut plain = plus.clone();
        plain.scheme = Scheme::UCoT;
        plain.guidelines = None;
        plain.cot_trigger = plus.cot_trigger.clone();
        let without = build_prompt(&plain, t).unwrap();
        if with.matches(&block).count() != 1 || with.replacen(&block, "", 1) != without {
            problems.push(format!("{ctx}: U-CoT differs from U-CoT+ minus guidelines"));
        }
    }
    problems
}

/// Golden files on disk that no longer correspond to a rendered prompt.
pub fn stale_golden_files() -> Vec<String> {
    let rendered: BTreeSet<String> = render_all().into_iter().map(|(p, _)| p).collect();
    let mut stale = Vec::new();
    let root = golden_dir();
    for ctx in SOURCE_CONTEXTS {
        let dir = root.join(dir_name(ctx));
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let rel = format!("{}/{}", dir_name(ctx), e.file_name().to_string_lossy());
            if !rendered.contains(&rel) {
                stale.push(rel);
            }
        }
    }
    stale
}
