use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::backend::Stage;

pub const PLACEHOLDERS: [&str; 6] = [
    "max_objects",
    "example",
    "label_list",
    "stage1_json",
    "stage2_json",
    "min_captions",
];

pub const BUNDLED_SETS: [&str; 3] = ["general", "cirr_r", "hotel"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("{stage} template uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("{stage} template lacks required placeholder {{{name}}}")]
    MissingRequired { stage: Stage, name: String },
    #[error("missing_placeholder: no value for {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template for {got} used where {expected} was expected")]
    StageMismatch { expected: Stage, got: Stage },
    #[error("unknown template set {0:?}")]
    UnknownSet(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub fn required_placeholders(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Stage1 => &["max_objects"],
        Stage::Stage2 => &["stage1_json"],
        Stage::Stage3 => &["stage1_json", "stage2_json"],
        Stage::SingleStage => &[],
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z0-9_]+)\}").expect("static pattern"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(stage: Stage, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let used = Self::placeholders_in(&body);
        if let Some(name) = used.iter().find(|n| !PLACEHOLDERS.contains(&n.as_str())) {
            return Err(TemplateError::UnknownPlaceholder {
                stage,
                name: name.clone(),
            });
        }
        if let Some(name) = required_placeholders(stage)
            .iter()
            .find(|r| !used.iter().any(|u| u == *r))
        {
            return Err(TemplateError::MissingRequired {
                stage,
                name: name.to_string(),
            });
        }
        Ok(Self { stage, body })
    }

    fn placeholders_in(body: &str) -> Vec<String> {
        placeholder_regex()
            .captures_iter(body)
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Single-pass literal substitution; substituted values are never rescanned.
    pub fn render(&self, params: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        for name in Self::placeholders_in(&self.body) {
            if !params.contains_key(&name) {
                return Err(TemplateError::MissingPlaceholder(name));
            }
        }
        Ok(placeholder_regex()
            .replace_all(&self.body, |c: &regex::Captures<'_>| params[&c[1]].clone())
            .into_owned())
    }
}

/// Templates for every stage plus default values for the optional placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub name: String,
    pub stage1: PromptTemplate,
    pub stage2: PromptTemplate,
    pub stage3: PromptTemplate,
    pub single_stage: PromptTemplate,
    pub example: String,
    pub labels: Vec<String>,
    pub min_captions: String,
    pub default_max_objects: usize,
}

struct Bundled {
    stage1: &'static str,
    stage2: &'static str,
    stage3: &'static str,
    single_stage: &'static str,
    example: &'static str,
    labels: &'static str,
    captions: &'static str,
    max_objects: usize,
}

macro_rules! bundled {
    ($dir:literal, $labels:expr, $max:expr) => {
        Bundled {
            stage1: include_str!(concat!("../../templates/", $dir, "/stage1.txt")),
            stage2: include_str!(concat!("../../templates/", $dir, "/stage2.txt")),
            stage3: include_str!(concat!("../../templates/", $dir, "/stage3.txt")),
            single_stage: include_str!(concat!("../../templates/", $dir, "/single_stage.txt")),
            example: include_str!(concat!("../../templates/", $dir, "/example.txt")),
            labels: $labels,
            captions: include_str!(concat!("../../templates/", $dir, "/captions.txt")),
            max_objects: $max,
        }
    };
}

fn bundled(name: &str) -> Option<Bundled> {
    Some(match name {
        "general" => bundled!("general", "", 10),
        "cirr_r" => bundled!("cirr_r", "", 6),
        "hotel" => bundled!(
            "hotel",
            include_str!("../../templates/hotel/labels.txt"),
            10
        ),
        _ => return None,
    })
}

fn lines(s: &str) -> Vec<String> {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl TemplateSet {
    pub fn bundled(name: &str) -> Result<Self, TemplateError> {
        let b = bundled(name).ok_or_else(|| TemplateError::UnknownSet(name.to_string()))?;
        Ok(Self {
            name: name.to_string(),
            stage1: PromptTemplate::new(Stage::Stage1, b.stage1)?,
            stage2: PromptTemplate::new(Stage::Stage2, b.stage2)?,
            stage3: PromptTemplate::new(Stage::Stage3, b.stage3)?,
            single_stage: PromptTemplate::new(Stage::SingleStage, b.single_stage)?,
            example: b.example.trim().to_string(),
            labels: lines(b.labels),
            min_captions: b.captions.trim().to_string(),
            default_max_objects: b.max_objects,
        })
    }

    /// Loads `stage1.txt`, `stage2.txt`, `stage3.txt` and optionally
    /// `single_stage.txt`, `example.txt`, `labels.txt`, `captions.txt` from
    /// `dir`; absent optional files come from the bundled `base` set.
    pub fn load_dir(dir: &Path, base: &str) -> Result<Self, TemplateError> {
        let mut set = Self::bundled(base)?;
        set.name = dir.display().to_string();
        let read = |file: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(file);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        };
        let required = |file: &str| -> Result<String, TemplateError> {
            read(file)?.ok_or_else(|| TemplateError::Io {
                path: dir.join(file).display().to_string(),
                message: "not found".into(),
            })
        };
        set.stage1 = PromptTemplate::new(Stage::Stage1, required("stage1.txt")?)?;
        set.stage2 = PromptTemplate::new(Stage::Stage2, required("stage2.txt")?)?;
        set.stage3 = PromptTemplate::new(Stage::Stage3, required("stage3.txt")?)?;
        if let Some(s) = read("single_stage.txt")? {
            set.single_stage = PromptTemplate::new(Stage::SingleStage, s)?;
        }
        if let Some(s) = read("example.txt")? {
            set.example = s.trim().to_string();
        }
        if let Some(s) = read("labels.txt")? {
            set.labels = lines(&s);
        }
        if let Some(s) = read("captions.txt")? {
            set.min_captions = s.trim().to_string();
        }
        Ok(set)
    }

    pub fn template(&self, stage: Stage) -> &PromptTemplate {
        match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
            Stage::Stage3 => &self.stage3,
            Stage::SingleStage => &self.single_stage,
        }
    }

    /// Values for the optional placeholders.
    pub fn base_params(&self, max_objects: usize) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("max_objects".to_string(), max_objects.to_string()),
            ("example".to_string(), self.example.clone()),
            ("label_list".to_string(), self.labels.join(", ")),
            ("min_captions".to_string(), self.min_captions.clone()),
        ])
    }
}
