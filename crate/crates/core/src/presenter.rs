//! Worker-facing task templates and the answers they accept.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical::fingerprint;

pub const OBJECT_PLACEHOLDER: &str = "{{object}}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AnswerSchema {
    Labels { labels: Vec<String> },
    Text,
}

impl AnswerSchema {
    pub fn labels(labels: &[&str]) -> Self {
        AnswerSchema::Labels {
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn label_set(&self) -> Option<&[String]> {
        match self {
            AnswerSchema::Labels { labels } => Some(labels),
            AnswerSchema::Text => None,
        }
    }

    pub fn accepts(&self, answer: &Value) -> bool {
        match (self, answer) {
            (AnswerSchema::Labels { labels }, Value::String(s)) => labels.iter().any(|l| l == s),
            (AnswerSchema::Text, Value::String(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PresenterError {
    #[error("invalid presenter: {0}")]
    Invalid(String),
    #[error("cannot load presenter from {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presenter {
    pub name: String,
    pub template: String,
    pub answer_schema: AnswerSchema,
    pub version_hash: String,
}

impl Presenter {
    pub fn new(
        name: impl Into<String>,
        template: impl Into<String>,
        answer_schema: AnswerSchema,
    ) -> Result<Self, PresenterError> {
        let template = template.into();
        if template.trim().is_empty() {
            return Err(PresenterError::Invalid("empty template".into()));
        }
        if let AnswerSchema::Labels { labels } = &answer_schema {
            let distinct: BTreeSet<&String> = labels.iter().collect();
            if distinct.len() < 2 {
                return Err(PresenterError::Invalid(format!(
                    "label schema needs at least 2 distinct labels, got {}",
                    distinct.len()
                )));
            }
        }
        let version_hash =
            fingerprint(&json!({ "template": template, "answer_schema": answer_schema }));
        Ok(Self {
            name: name.into(),
            template,
            answer_schema,
            version_hash,
        })
    }

    /// Loads `template.html` and `schema.json` from a presenter directory.
    pub fn from_dir(dir: &Path) -> Result<Self, PresenterError> {
        let load = |reason: String| PresenterError::Load {
            path: dir.display().to_string(),
            reason,
        };
        let template = std::fs::read_to_string(dir.join("template.html"))
            .map_err(|e| load(format!("template.html: {e}")))?;
        let schema_text = std::fs::read_to_string(dir.join("schema.json"))
            .map_err(|e| load(format!("schema.json: {e}")))?;
        let schema: AnswerSchema =
            serde_json::from_str(&schema_text).map_err(|e| load(format!("schema.json: {e}")))?;
        let name = dir.file_name().map_or_else(
            || "presenter".to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        Self::new(name, template, schema)
    }

    /// Yes/No image labeling.
    pub fn image_label() -> Self {
        Self::new(
            "image-label",
            "<div class=\"task\"><img src=\"{{object}}\" alt=\"image\"><p>Does this image match the description?</p></div>",
            AnswerSchema::labels(&["Yes", "No"]),
        )
        .expect("built-in presenter is valid")
    }

    /// Pairwise record matching for entity resolution.
    pub fn entity_match() -> Self {
        Self::new(
            "entity-match",
            "<div class=\"task\"><pre>{{object}}</pre><p>Do these two records refer to the same entity?</p></div>",
            AnswerSchema::labels(&["match", "nonmatch"]),
        )
        .expect("built-in presenter is valid")
    }

    /// Substitutes the object into the template. Strings are inserted raw,
    /// other values as JSON.
    pub fn render(&self, object: &Value) -> String {
        let text = match object {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        self.template.replace(OBJECT_PLACEHOLDER, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_label_is_invalid() {
        let err =
            Presenter::new("p", "<p>{{object}}</p>", AnswerSchema::labels(&["Yes"])).unwrap_err();
        assert!(matches!(err, PresenterError::Invalid(_)));
        let err = Presenter::new(
            "p",
            "<p>{{object}}</p>",
            AnswerSchema::labels(&["Yes", "Yes"]),
        )
        .unwrap_err();
        assert!(matches!(err, PresenterError::Invalid(_)));
    }

    #[test]
    fn empty_template_is_invalid() {
        assert!(Presenter::new("p", "  ", AnswerSchema::Text).is_err());
    }

    #[test]
    fn version_hash_tracks_template_and_schema_only() {
        let a = Presenter::new("a", "<p>{{object}}</p>", AnswerSchema::Text).unwrap();
        let b = Presenter::new("b", "<p>{{object}}</p>", AnswerSchema::Text).unwrap();
        let c = Presenter::new("a", "<p>{{object}}!</p>", AnswerSchema::Text).unwrap();
        assert_eq!(a.version_hash, b.version_hash);
        assert_ne!(a.version_hash, c.version_hash);
    }

    #[test]
    fn schema_wire_format() {
        let s: AnswerSchema =
            serde_json::from_str(r#"{"type":"labels","labels":["Yes","No"]}"#).unwrap();
        assert_eq!(s, AnswerSchema::labels(&["Yes", "No"]));
        let t: AnswerSchema = serde_json::from_str(r#"{"type":"text"}"#).unwrap();
        assert_eq!(t, AnswerSchema::Text);
        assert!(s.accepts(&json!("Yes")));
        assert!(!s.accepts(&json!("Maybe")));
        assert!(t.accepts(&json!("anything")));
    }

    #[test]
    fn loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("template.html"), "<img src=\"{{object}}\">").unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            r#"{"type":"labels","labels":["Yes","No"]}"#,
        )
        .unwrap();
        let p = Presenter::from_dir(dir.path()).unwrap();
        assert_eq!(p.render(&json!("u.png")), "<img src=\"u.png\">");
    }
}
