//! Versioned prompt templates and the small substitution renderer behind
//! them.
//!
//! Templates live in `templates/<id>.txt` and are compiled into the binary.
//! Lines starting with `#!` are file headers and never reach the model.
//! Placeholders are written `{{name}}`; rendering fails if a placeholder has
//! no value.

use std::collections::BTreeMap;

use thiserror::Error;

pub const INPUT_BEGIN: &str = "=== BEGIN INPUT ===";
pub const INPUT_END: &str = "=== END INPUT ===";
/// Header line introducing one video's script inside a multi-video prompt.
pub const VIDEO_HEADER_PREFIX: &str = "=== VIDEO ";

pub const CLIP_DESCRIBE: &str = "clip_describe_v1";
pub const SPEAKER_ATTRIBUTION: &str = "speaker_attribution_v1";
pub const SCRIPT_SYNTHESIZE: &str = "script_synthesize_v1";
pub const SCRIPT_MERGE: &str = "script_merge_v1";
pub const SCRIPT_SUMMARIZE: &str = "script_summarize_v1";
pub const SCRIPT_REFINE: &str = "script_refine_v1";
pub const AUDIO_DESCRIPTION: &str = "audio_description_v1";
pub const QA_ANSWER: &str = "qa_answer_v1";
pub const QA_LOCATE: &str = "qa_locate_v1";
pub const AGENT_STEP: &str = "agent_step_v1";

const TEMPLATES: &[(&str, &str)] = &[
    (CLIP_DESCRIBE, include_str!("../templates/clip_describe_v1.txt")),
    (SPEAKER_ATTRIBUTION, include_str!("../templates/speaker_attribution_v1.txt")),
    (SCRIPT_SYNTHESIZE, include_str!("../templates/script_synthesize_v1.txt")),
    (SCRIPT_MERGE, include_str!("../templates/script_merge_v1.txt")),
    (SCRIPT_SUMMARIZE, include_str!("../templates/script_summarize_v1.txt")),
    (SCRIPT_REFINE, include_str!("../templates/script_refine_v1.txt")),
    (AUDIO_DESCRIPTION, include_str!("../templates/audio_description_v1.txt")),
    (QA_ANSWER, include_str!("../templates/qa_answer_v1.txt")),
    (QA_LOCATE, include_str!("../templates/qa_locate_v1.txt")),
    (AGENT_STEP, include_str!("../templates/agent_step_v1.txt")),
];

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} has no value for {{{{{name}}}}}")]
    MissingVariable { template: String, name: String },
}

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(id, _)| *id)
}

pub fn template_source(id: &str) -> Result<&'static str, TemplateError> {
    TEMPLATES
        .iter()
        .find(|(tid, _)| *tid == id)
        .map(|(_, src)| *src)
        .ok_or_else(|| TemplateError::UnknownTemplate(id.to_string()))
}

pub fn render(id: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let src = template_source(id)?;
    let body: String = src
        .lines()
        .filter(|l| !l.starts_with("#!"))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut out = String::with_capacity(body.len() + vars.values().map(String::len).sum::<usize>());
    let mut rest = body.as_str();
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| TemplateError::MissingVariable {
            template: id.to_string(),
            name: after.chars().take(20).collect(),
        })?;
        let name = after[..close].trim();
        let value = vars.get(name).ok_or_else(|| TemplateError::MissingVariable {
            template: id.to_string(),
            name: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

/// The text between the input markers, or the whole prompt if it has none.
pub fn input_section(prompt: &str) -> &str {
    match (prompt.find(INPUT_BEGIN), prompt.rfind(INPUT_END)) {
        (Some(b), Some(e)) if e > b => prompt[b + INPUT_BEGIN.len()..e].trim_matches('\n'),
        _ => prompt,
    }
}
