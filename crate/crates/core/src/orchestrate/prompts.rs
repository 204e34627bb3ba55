//! Prompt templates. Defaults ship under `prompts/` and can be overridden
//! per file from a directory.

use std::path::Path;

use crate::template::{self, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub single_step: String,
    pub planner: String,
    pub optimizer: String,
    pub extractor: String,
    pub classifier: String,
    pub reextractor: String,
    pub instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            single_step: include_str!("../../prompts/single_step.txt").to_string(),
            planner: include_str!("../../prompts/planner.txt").to_string(),
            optimizer: include_str!("../../prompts/optimizer.txt").to_string(),
            extractor: include_str!("../../prompts/extractor.txt").to_string(),
            classifier: include_str!("../../prompts/classifier.txt").to_string(),
            reextractor: include_str!("../../prompts/reextractor.txt").to_string(),
            instruction: include_str!("../../prompts/instruction.txt").to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} uses placeholder {{{placeholder}}}, allowed: {allowed:?}")]
    Placeholder {
        name: &'static str,
        placeholder: String,
        allowed: &'static [&'static str],
    },
    #[error(transparent)]
    Render(#[from] TemplateError),
}

impl PromptTemplates {
    const FILES: [(&'static str, &'static [&'static str]); 7] = [
        ("single_step", &["slow_code"]),
        ("planner", &["slow_code", "taxonomy"]),
        ("optimizer", &["slow_code", "strategies"]),
        ("extractor", &["slow_code", "fast_code"]),
        ("classifier", &["taxonomy"]),
        ("reextractor", &["slow_code", "fast_code", "taxonomy"]),
        ("instruction", &["taxonomy"]),
    ];

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "single_step" => &mut self.single_step,
            "planner" => &mut self.planner,
            "optimizer" => &mut self.optimizer,
            "extractor" => &mut self.extractor,
            "classifier" => &mut self.classifier,
            "reextractor" => &mut self.reextractor,
            "instruction" => &mut self.instruction,
            other => unreachable!("unknown template {other}"),
        }
    }

    /// Defaults, with `<dir>/<name>.txt` replacing each template that exists.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let mut templates = Self::default();
        for (name, _) in Self::FILES {
            let path = dir.as_ref().join(format!("{name}.txt"));
            if path.exists() {
                *templates.slot(name) = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        templates.validate()?;
        Ok(templates)
    }

    /// Every template only references the placeholders it is rendered with.
    pub fn validate(&self) -> Result<(), PromptError> {
        let mut copy = self.clone();
        for (name, allowed) in Self::FILES {
            for placeholder in template::placeholders(copy.slot(name)) {
                if !allowed.contains(&placeholder.as_str()) {
                    return Err(PromptError::Placeholder {
                        name,
                        placeholder,
                        allowed,
                    });
                }
            }
        }
        Ok(())
    }
}
