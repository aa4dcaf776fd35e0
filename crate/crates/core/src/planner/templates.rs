use serde::Deserialize;
use std::sync::OnceLock;

#[derive(Debug, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub prediction: PredictionTemplates,
    pub execution: ExecutionTemplates,
}

#[derive(Debug, Deserialize)]
pub struct PredictionTemplates {
    pub system: String,
    pub baseline: String,
    pub overview_caption: String,
    pub cover_intro: String,
    pub cover_caption: String,
    pub manual_intro: String,
    pub manual_caption: String,
    pub examples_intro: String,
    pub example_header: String,
    pub example_caption: String,
    pub oracle_intro: String,
    pub schema: String,
}

#[derive(Debug, Deserialize)]
pub struct ExecutionTemplates {
    pub system: String,
    pub scene: String,
    pub scene_caption: String,
    pub schema: String,
}

pub fn templates() -> &'static PromptTemplates {
    static TEMPLATES: OnceLock<PromptTemplates> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        toml::from_str(include_str!("../../assets/prompts.toml")).expect("bundled prompt templates parse")
    })
}

/// Replaces each `{key}` with its value. Unknown braces are left alone.
pub fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.trim().to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
