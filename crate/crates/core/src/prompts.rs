//! Prompt templates.
//!
//! Templates are plain text with `{NAME}` placeholders and `{#NAME}...{/NAME}`
//! blocks that are kept only when the flag `NAME` is set. A placeholder may
//! expand to text or to a sequence of message parts (images with captions),
//! so a rendered template is a list of [`Part`]s. Placeholders that no
//! variable names are left as written.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use regex::Regex;
use std::sync::LazyLock;
use thiserror::Error;

use crate::llm::Part;

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Z][A-Z0-9_]*)\}").unwrap());
static BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)\{#([A-Z][A-Z0-9_]*)\}(.*?)\{/([A-Z][A-Z0-9_]*)\}").unwrap());

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("template {name}: block {{#{open}}} closed by {{/{close}}}")]
    Unbalanced { name: String, open: String, close: String },
}

#[derive(Debug, Clone)]
enum Fill {
    Text(String),
    Parts(Vec<Part>),
}

/// Values for one rendering.
#[derive(Debug, Clone, Default)]
pub struct Vars {
    fills: BTreeMap<String, Fill>,
    flags: BTreeSet<String>,
}

impl Vars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, name: &str, value: impl Into<String>) -> Self {
        self.fills.insert(name.to_string(), Fill::Text(value.into()));
        self
    }

    pub fn parts(mut self, name: &str, parts: Vec<Part>) -> Self {
        self.fills.insert(name.to_string(), Fill::Parts(parts));
        self
    }

    pub fn flag(mut self, name: &str, on: bool) -> Self {
        if on {
            self.flags.insert(name.to_string());
        } else {
            self.flags.remove(name);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    source: String,
}

impl Template {
    pub fn new(name: impl Into<String>, source: impl Into<String>) -> Result<Self, TemplateError> {
        let template = Self {
            name: name.into(),
            source: source.into(),
        };
        for cap in BLOCK.captures_iter(&template.source) {
            if cap[1] != cap[3] {
                return Err(TemplateError::Unbalanced {
                    name: template.name.clone(),
                    open: cap[1].to_string(),
                    close: cap[3].to_string(),
                });
            }
        }
        Ok(template)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Renders to message parts; adjacent text is merged.
    pub fn render(&self, vars: &Vars) -> Vec<Part> {
        let text = BLOCK.replace_all(&self.source, |cap: &regex::Captures| {
            if vars.flags.contains(&cap[1]) {
                cap[2].to_string()
            } else {
                String::new()
            }
        });
        let mut parts = Vec::new();
        let mut buffer = String::new();
        let mut last = 0;
        for cap in PLACEHOLDER.captures_iter(&text) {
            let whole = cap.get(0).unwrap();
            buffer.push_str(&text[last..whole.start()]);
            last = whole.end();
            match vars.fills.get(&cap[1]) {
                Some(Fill::Text(value)) => buffer.push_str(value),
                Some(Fill::Parts(items)) => {
                    for item in items {
                        match item {
                            Part::Text { text } => buffer.push_str(text),
                            image => {
                                flush(&mut parts, &mut buffer);
                                parts.push(image.clone());
                            }
                        }
                    }
                }
                None => buffer.push_str(whole.as_str()),
            }
        }
        buffer.push_str(&text[last..]);
        flush(&mut parts, &mut buffer);
        parts
    }

    /// Rendering with all parts flattened to text (images as `[image: name]`).
    pub fn render_text(&self, vars: &Vars) -> String {
        self.render(vars)
            .into_iter()
            .map(|p| match p {
                Part::Text { text } => text,
                Part::Image { image } => format!("[image: {}]", image.name()),
            })
            .collect()
    }
}

fn flush(parts: &mut Vec<Part>, buffer: &mut String) {
    let trimmed = buffer.trim_end();
    if !trimmed.trim().is_empty() {
        parts.push(Part::Text {
            text: trimmed.trim_start_matches('\n').to_string(),
        });
    }
    buffer.clear();
}

macro_rules! template_set {
    ($($field:ident => $file:literal),* $(,)?) => {
        /// Every prompt the agents use, one file each.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptTemplates {
            $(pub $field: Template,)*
        }

        impl Default for PromptTemplates {
            fn default() -> Self {
                Self {
                    $($field: Template::new($file, include_str!(concat!("../templates/", $file)))
                        .expect("built-in template"),)*
                }
            }
        }

        impl PromptTemplates {
            /// File names recognised by [`PromptTemplates::from_dir`].
            pub const FILES: &'static [&'static str] = &[$($file),*];

            /// Built-in templates overridden by any same-named file in `dir`.
            pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
                let dir = dir.as_ref();
                let mut set = Self::default();
                $(
                    let path = dir.join($file);
                    if path.exists() {
                        let text = std::fs::read_to_string(&path)
                            .map_err(|source| TemplateError::Io { path: path.clone(), source })?;
                        set.$field = Template::new($file, text)?;
                    }
                )*
                Ok(set)
            }

            /// Writes every template into `dir`, for editing.
            pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), TemplateError> {
                let dir = dir.as_ref();
                $(
                    let path = dir.join($file);
                    std::fs::write(&path, self.$field.source())
                        .map_err(|source| TemplateError::Io { path, source })?;
                )*
                Ok(())
            }
        }
    };
}

template_set! {
    action_system => "action_system.txt",
    action_fallback_system => "action_fallback_system.txt",
    action_user => "action_user.txt",
    action_format_reminder => "action_format_reminder.txt",
    planning_system => "planning_system.txt",
    planning_user => "planning_user.txt",
    plan_format_reminder => "plan_format_reminder.txt",
    reverie_note => "reverie_note.txt",
    replan_system => "replan_system.txt",
    replan_user => "replan_user.txt",
    describe_system => "describe_system.txt",
    describe_user => "describe_user.txt",
    target_system => "target_system.txt",
    target_user => "target_user.txt",
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ImageRef;

    #[test]
    fn placeholders_and_blocks() {
        let t = Template::new("t", "A {X}{#F} flagged{/F} {UNKNOWN} end").unwrap();
        assert_eq!(t.render_text(&Vars::new().text("X", "x")), "A x {UNKNOWN} end");
        assert_eq!(
            t.render_text(&Vars::new().text("X", "x").flag("F", true)),
            "A x flagged {UNKNOWN} end"
        );
    }

    #[test]
    fn json_braces_are_not_placeholders() {
        let t = Template::new("t", "{\n  \"Thought\": \"...\"\n}").unwrap();
        assert_eq!(t.render_text(&Vars::new()), t.source());
    }

    #[test]
    fn parts_interleave_images() {
        let t = Template::new("t", "Maps:\n{MAPS}\nAfter").unwrap();
        let parts = t.render(&Vars::new().parts(
            "MAPS",
            vec![
                Part::Text {
                    text: "Floor 0:".into(),
                },
                Part::Image {
                    image: ImageRef::png("f0", vec![]),
                },
            ],
        ));
        assert_eq!(parts.len(), 3);
        assert_eq!(
            parts[0],
            Part::Text {
                text: "Maps:\nFloor 0:".into()
            }
        );
        assert!(matches!(parts[1], Part::Image { .. }));
        assert_eq!(parts[2], Part::Text { text: "After".into() });
    }

    #[test]
    fn unbalanced_block_is_rejected() {
        assert!(matches!(
            Template::new("t", "{#A}x{/B}"),
            Err(TemplateError::Unbalanced { .. })
        ));
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("target_user.txt"), "Where is {INSTRUCTION} going?").unwrap();
        let set = PromptTemplates::from_dir(dir.path()).unwrap();
        assert_eq!(set.target_user.source(), "Where is {INSTRUCTION} going?");
        assert_eq!(set.planning_system, PromptTemplates::default().planning_system);
    }

    #[test]
    fn fallback_template_has_no_plan_or_replan() {
        let t = PromptTemplates::default();
        let text = t.action_fallback_system.render_text(&Vars::new()).to_lowercase();
        assert!(!text.contains("global plan"));
        assert!(!text.contains("replan"));
        let without_tip = t.action_system.render_text(&Vars::new()).to_lowercase();
        assert!(!without_tip.contains("replan"));
        let with_tip = t.action_system.render_text(&Vars::new().flag("REPLAN", true));
        assert!(with_tip.contains("feel free to trigger a 'replan'"));
    }
}
