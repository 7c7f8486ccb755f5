//! Prompt templates with `{placeholder}` substitution.
//!
//! A template set holds one prompt per pipeline stage. Four sets ship with
//! the crate (`gsm`, `math`, `code`, `tom`); a directory containing the six
//! stage files can replace them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use thiserror::Error;

/// Variable names shared by templates and offline providers.
pub mod vars {
    pub const STAGE: &str = "stage";
    pub const DESCRIPTION: &str = "description";
    pub const COUNT: &str = "count";
    pub const DEPTH: &str = "depth";
    pub const SAMPLES: &str = "samples";
    pub const DIMENSION: &str = "dimension";
    pub const VALUES: &str = "values";
    pub const FORBIDDEN: &str = "forbidden";
    pub const INSTRUCTION: &str = "instruction";
    pub const BATCH: &str = "batch";
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown bundled template set `{0}` (expected gsm, math, code or tom)")]
    UnknownSet(String),
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pivot,
    Dimension,
    Coverage,
    Draw,
    Sample,
    Answer,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Pivot, Stage::Dimension, Stage::Coverage, Stage::Draw, Stage::Sample, Stage::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pivot => "pivot",
            Stage::Dimension => "dimension",
            Stage::Coverage => "coverage",
            Stage::Draw => "draw",
            Stage::Sample => "sample",
            Stage::Answer => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub pivot: String,
    pub dimension: String,
    pub coverage: String,
    pub draw: String,
    pub sample: String,
    pub answer: String,
}

macro_rules! bundled_set {
    ($dir:literal) => {
        TemplateSet {
            pivot: include_str!(concat!("../templates/", $dir, "/pivot.txt")).to_string(),
            dimension: include_str!(concat!("../templates/", $dir, "/dimension.txt")).to_string(),
            coverage: include_str!(concat!("../templates/", $dir, "/coverage.txt")).to_string(),
            draw: include_str!(concat!("../templates/", $dir, "/draw.txt")).to_string(),
            sample: include_str!(concat!("../templates/", $dir, "/sample.txt")).to_string(),
            answer: include_str!(concat!("../templates/", $dir, "/answer.txt")).to_string(),
        }
    };
}

impl TemplateSet {
    pub fn bundled(name: &str) -> Result<Self, TemplateError> {
        match name {
            "gsm" => Ok(bundled_set!("gsm")),
            "math" => Ok(bundled_set!("math")),
            "code" => Ok(bundled_set!("code")),
            "tom" => Ok(bundled_set!("tom")),
            other => Err(TemplateError::UnknownSet(other.to_string())),
        }
    }

    /// Reads `<stage>.txt` for every stage from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |stage: Stage| {
            let path = dir.join(format!("{}.txt", stage.name()));
            std::fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })
        };
        Ok(Self {
            pivot: read(Stage::Pivot)?,
            dimension: read(Stage::Dimension)?,
            coverage: read(Stage::Coverage)?,
            draw: read(Stage::Draw)?,
            sample: read(Stage::Sample)?,
            answer: read(Stage::Answer)?,
        })
    }

    /// A bundled set name, or a path to a template directory.
    pub fn resolve(spec: &str) -> Result<Self, TemplateError> {
        let path = Path::new(spec);
        if path.is_dir() {
            Self::load_dir(path)
        } else {
            Self::bundled(spec)
        }
    }

    pub fn get(&self, stage: Stage) -> &str {
        match stage {
            Stage::Pivot => &self.pivot,
            Stage::Dimension => &self.dimension,
            Stage::Coverage => &self.coverage,
            Stage::Draw => &self.draw,
            Stage::Sample => &self.sample,
            Stage::Answer => &self.answer,
        }
    }

    /// Renders the stage prompt. The stage name is added to `values`.
    pub fn render(&self, stage: Stage, values: &mut BTreeMap<String, String>) -> String {
        values.insert(vars::STAGE.to_string(), stage.name().to_string());
        render(self.get(stage), values)
    }
}

/// Replaces `{name}` with `values[name]`; unknown placeholders and other
/// braces (JSON examples) are left alone.
pub fn render(template: &str, values: &BTreeMap<String, String>) -> String {
    static PLACEHOLDER: OnceLock<Regex> = OnceLock::new();
    let re = PLACEHOLDER.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap());
    re.replace_all(template, |caps: &Captures| match values.get(&caps[1]) {
        Some(v) => v.clone(),
        None => caps[0].to_string(),
    })
    .into_owned()
}

/// Numbered list, one item per line.
pub fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_known_placeholders_only() {
        let mut v = BTreeMap::new();
        v.insert("description".to_string(), "math".to_string());
        v.insert("count".to_string(), "3".to_string());
        let out = render("Write {count} items about {description}; keep {other} and {\"k\": 1}", &v);
        assert_eq!(out, "Write 3 items about math; keep {other} and {\"k\": 1}");
    }

    #[test]
    fn every_bundled_set_has_stage_placeholders() {
        for name in ["gsm", "math", "code", "tom"] {
            let set = TemplateSet::bundled(name).unwrap();
            for stage in Stage::ALL {
                let t = set.get(stage);
                assert!(t.contains("```json"), "{name}/{}", stage.name());
            }
            assert!(set.pivot.contains("{description}") && set.pivot.contains("{count}"));
            assert!(set.dimension.contains("{samples}") && set.dimension.contains("{forbidden}"));
            assert!(set.coverage.contains("{dimension}") && set.coverage.contains("{values}"));
            assert!(set.sample.contains("{description}") && set.sample.contains("{count}"));
            assert!(set.answer.contains("{instruction}"));
        }
    }

    #[test]
    fn unknown_set_is_an_error() {
        assert!(matches!(TemplateSet::bundled("nope"), Err(TemplateError::UnknownSet(_))));
    }

    #[test]
    fn directory_sets_load() {
        let dir = tempfile::tempdir().unwrap();
        for stage in Stage::ALL {
            std::fs::write(dir.path().join(format!("{}.txt", stage.name())), stage.name()).unwrap();
        }
        let set = TemplateSet::resolve(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(set.answer, "answer");
        std::fs::remove_file(dir.path().join("draw.txt")).unwrap();
        assert!(TemplateSet::load_dir(dir.path()).is_err());
    }

    #[test]
    fn render_records_stage() {
        let set = TemplateSet::bundled("gsm").unwrap();
        let mut v = BTreeMap::new();
        v.insert("instruction".to_string(), "2+2?".to_string());
        let prompt = set.render(Stage::Answer, &mut v);
        assert!(prompt.contains("2+2?"));
        assert_eq!(v["stage"], "answer");
    }
}
