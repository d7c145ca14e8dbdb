//! Prompt templates with `{placeholder}` substitution.
//!
//! The three generation prompts ship embedded in the binary and can be
//! overridden by files on disk. Rendering is byte-exact: everything outside
//! a `{...}` span is emitted untouched, and every span must resolve.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    QuestionGeneration,
    AnswerGeneration,
    RationaleGeneration,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [
        TemplateKind::QuestionGeneration,
        TemplateKind::AnswerGeneration,
        TemplateKind::RationaleGeneration,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::QuestionGeneration => "question_generation.txt",
            TemplateKind::AnswerGeneration => "answer_generation.txt",
            TemplateKind::RationaleGeneration => "rationale_generation.txt",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateKind::QuestionGeneration => {
                include_str!("../../templates/question_generation.txt")
            }
            TemplateKind::AnswerGeneration => include_str!("../../templates/answer_generation.txt"),
            TemplateKind::RationaleGeneration => {
                include_str!("../../templates/rationale_generation.txt")
            }
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::QuestionGeneration => "question-generation",
            TemplateKind::AnswerGeneration => "answer-generation",
            TemplateKind::RationaleGeneration => "rationale-generation",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Template {
    pub kind: TemplateKind,
    text: String,
}

impl Template {
    pub fn builtin(kind: TemplateKind) -> Self {
        Template {
            kind,
            text: kind.builtin_text().to_string(),
        }
    }

    /// Load one template from `<dir>/<canonical file name>`.
    pub fn from_dir(kind: TemplateKind, dir: &Path) -> Result<Self> {
        let path = dir.join(kind.file_name());
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("template {}: {e}", path.display())))?;
        Ok(Template { kind, text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String> {
        render_prompt(&self.text, values)
    }
}

/// The full prompt set, builtin by default or loaded from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub question: Template,
    pub answer: Template,
    pub rationale: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            question: Template::builtin(TemplateKind::QuestionGeneration),
            answer: Template::builtin(TemplateKind::AnswerGeneration),
            rationale: Template::builtin(TemplateKind::RationaleGeneration),
        }
    }
}

impl TemplateSet {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Ok(TemplateSet {
            question: Template::from_dir(TemplateKind::QuestionGeneration, dir)?,
            answer: Template::from_dir(TemplateKind::AnswerGeneration, dir)?,
            rationale: Template::from_dir(TemplateKind::RationaleGeneration, dir)?,
        })
    }
}

/// Substitute every `{name}` span from `values`. Unknown names and unclosed
/// braces are errors; text outside spans passes through byte for byte.
pub fn render_prompt(template: &str, values: &BTreeMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Data("template: unclosed { placeholder".into()))?;
        let name = &after[..close];
        match values.get(name) {
            Some(v) => out.push_str(v),
            None => {
                return Err(Error::Data(format!(
                    "template: no value for placeholder {{{name}}}"
                )))
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Render a choice list the way the prompts show one: `['a', 'b', ...]`.
/// An empty list has no meaningful rendering and is rejected.
pub fn choices_literal(choices: &[String]) -> Result<String> {
    if choices.is_empty() {
        return Err(Error::Data("template: no value for placeholder {choices}".into()));
    }
    let quoted: Vec<String> = choices
        .iter()
        .map(|c| format!("'{}'", c.replace('\\', "\\\\").replace('\'', "\\'")))
        .collect();
    Ok(format!("[{}]", quoted.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn question_template_opens_with_the_teacher_line() {
        let t = Template::builtin(TemplateKind::QuestionGeneration);
        let rendered = t
            .render(&vals(&[
                ("question", "key k1 maps to which value"),
                ("choices", "[]"),
            ]))
            .unwrap();
        assert!(rendered.starts_with("Please act as a professional teacher."));
        assert!(rendered.contains(
            "Given Question and Multiple Choices:\nkey k1 maps to which value,\n[]"
        ));
        assert!(!rendered.contains('{'));
    }

    #[test]
    fn answer_template_demands_a_letter() {
        let t = Template::builtin(TemplateKind::AnswerGeneration);
        let rendered = t
            .render(&vals(&[
                ("question", "q"),
                ("choices", "['a', 'b']"),
            ]))
            .unwrap();
        assert!(rendered.starts_with("Please act as a professional teacher."));
        assert!(rendered.contains("FINAL ANSWER: <your final choice"));
        assert!(rendered.contains("Given Question and Choices:\nq,\n['a', 'b']"));
    }

    #[test]
    fn rationale_template_keeps_the_worked_example() {
        let t = Template::builtin(TemplateKind::RationaleGeneration);
        let rendered = t
            .render(&vals(&[
                ("question", "q"),
                ("choices.text", "['a', 'b']"),
                ("choices.text[choices.label.index(answerKey)]", "'b'"),
            ]))
            .unwrap();
        assert!(rendered.contains("Question: The sun is responsible for"));
        assert!(rendered.contains("plants sprouting, blooming and wilting"));
        assert!(rendered.contains("'<end>'"));
        assert!(rendered.ends_with("Rationale:\n"));
        assert!(rendered.contains("Please explain:\n\nQuestion: q\n\nChoices: ['a', 'b']\n\nAnswer: 'b'\n"));
    }

    #[test]
    fn rendering_is_byte_exact_outside_spans() {
        let out = render_prompt("a {x} b {x}{y} c", &vals(&[("x", "1"), ("y", "2")])).unwrap();
        assert_eq!(out, "a 1 b 12 c");
    }

    #[test]
    fn missing_value_and_unclosed_brace_are_errors() {
        assert!(render_prompt("{nope}", &BTreeMap::new()).is_err());
        assert!(render_prompt("text {question", &vals(&[("question", "q")])).is_err());
    }

    #[test]
    fn empty_choices_cannot_be_rendered() {
        assert!(choices_literal(&[]).is_err());
        let lit = choices_literal(&["it's".into(), "b".into()]).unwrap();
        assert_eq!(lit, r"['it\'s', 'b']");
    }

    #[test]
    fn template_files_on_disk_match_the_builtins() {
        // The shipped files are the source of the embedded text.
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let set = TemplateSet::from_dir(&dir).unwrap();
        for (loaded, kind) in [
            (&set.question, TemplateKind::QuestionGeneration),
            (&set.answer, TemplateKind::AnswerGeneration),
            (&set.rationale, TemplateKind::RationaleGeneration),
        ] {
            assert_eq!(loaded.text(), Template::builtin(kind).text());
        }
    }
}
