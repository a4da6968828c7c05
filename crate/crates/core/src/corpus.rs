//! Tool documentation: loading, saving and rendering the tool library.
//!
//! The on-disk format is JSONL, one tool per line:
//!
//! ```text
//! {"id": "...", "name": "...", "description": "...",
//!  "parameters": {"p": {"description": "...", "type": "...", "required": true}}}
//! ```
//!
//! `id` falls back to `name` when absent. Keys this module does not know are
//! kept in [`ToolDoc::extra`] and written back verbatim.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(default)]
    pub description: String,
    #[serde(rename = "type", default)]
    pub type_name: String,
    #[serde(default)]
    pub required: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ParamSpec {
    pub fn new(type_name: impl Into<String>, description: impl Into<String>, required: bool) -> Self {
        Self {
            description: description.into(),
            type_name: type_name.into(),
            required,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolDoc {
    pub id: String,
    pub name: String,
    pub description: String,
    pub parameters: IndexMap<String, ParamSpec>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    /// Canonical single-line `{"name", "description", "parameters"}` object.
    #[default]
    SchemaJson,
    /// `name: description`
    NameDesc,
    /// `name(param1, param2, ...)`
    FeedbackLine,
}

impl std::str::FromStr for RenderStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schema_json" => Ok(RenderStyle::SchemaJson),
            "name_desc" => Ok(RenderStyle::NameDesc),
            "feedback_line" => Ok(RenderStyle::FeedbackLine),
            other => Err(Error::InvalidArgument(format!("unknown render style {other:?}"))),
        }
    }
}

impl RenderStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderStyle::SchemaJson => "schema_json",
            RenderStyle::NameDesc => "name_desc",
            RenderStyle::FeedbackLine => "feedback_line",
        }
    }
}

impl ToolDoc {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            id: name.clone(),
            name,
            description: description.into(),
            parameters: IndexMap::new(),
            extra: Map::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_param(mut self, name: impl Into<String>, spec: ParamSpec) -> Self {
        self.parameters.insert(name.into(), spec);
        self
    }

    /// Builds a tool from one parsed JSON object. Structural checks only.
    pub fn from_json(value: Value) -> std::result::Result<Self, String> {
        let Value::Object(mut obj) = value else {
            return Err("expected a JSON object".into());
        };
        let name = match obj.shift_remove("name") {
            Some(Value::String(s)) if !s.trim().is_empty() => s,
            Some(Value::String(_)) => return Err("\"name\" is empty".into()),
            Some(_) => return Err("\"name\" must be a string".into()),
            None => return Err("missing \"name\"".into()),
        };
        let id = match obj.shift_remove("id") {
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(Value::String(_)) => return Err("\"id\" is empty".into()),
            Some(Value::Null) | None => name.clone(),
            Some(_) => return Err("\"id\" must be a string".into()),
        };
        let description = match obj.shift_remove("description") {
            Some(Value::String(s)) => s,
            Some(Value::Null) | None => String::new(),
            Some(_) => return Err("\"description\" must be a string".into()),
        };
        let parameters = match obj.shift_remove("parameters") {
            Some(Value::Null) | None => IndexMap::new(),
            Some(v @ Value::Object(_)) => serde_json::from_value::<IndexMap<String, ParamSpec>>(v)
                .map_err(|e| format!("\"parameters\": {e}"))?,
            Some(_) => return Err("\"parameters\" must be an object".into()),
        };
        Ok(ToolDoc {
            id,
            name,
            description,
            parameters,
            extra: obj,
        })
    }

    /// Full JSON object as written to a corpus file.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        obj.insert("name".into(), Value::String(self.name.clone()));
        obj.insert("description".into(), Value::String(self.description.clone()));
        obj.insert("parameters".into(), self.parameters_json());
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        Value::Object(obj)
    }

    fn parameters_json(&self) -> Value {
        serde_json::to_value(&self.parameters).expect("parameter specs always serialize")
    }

    /// Schema object without the tool name, used when a tool must be described
    /// without revealing what it is called.
    pub fn schema_without_name(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("description".into(), Value::String(self.description.clone()));
        obj.insert("parameters".into(), self.parameters_json());
        Value::Object(obj)
    }

    pub fn render(&self, style: RenderStyle) -> String {
        match style {
            RenderStyle::SchemaJson => {
                let mut obj = Map::new();
                obj.insert("name".into(), Value::String(self.name.clone()));
                obj.insert("description".into(), Value::String(self.description.clone()));
                obj.insert("parameters".into(), self.parameters_json());
                Value::Object(obj).to_string()
            }
            RenderStyle::NameDesc => format!("{}: {}", self.name, self.description),
            RenderStyle::FeedbackLine => {
                let params: Vec<&str> = self.parameters.keys().map(String::as_str).collect();
                format!("{}({})", self.name, params.join(", "))
            }
        }
    }

    /// Inverse of [`RenderStyle::SchemaJson`] rendering. The id is the name.
    pub fn from_schema_json(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s)?;
        ToolDoc::from_json(value).map_err(|message| Error::CorpusParse { line: 1, message })
    }

    /// Equality on name, description and parameters.
    pub fn canonical_eq(&self, other: &ToolDoc) -> bool {
        self.name == other.name
            && self.description == other.description
            && self.parameters == other.parameters
    }
}

pub fn render_tool_doc(tool: &ToolDoc, style: RenderStyle) -> String {
    tool.render(style)
}

/// An ordered, immutable tool library.
#[derive(Debug, Clone, Default)]
pub struct ToolCorpus {
    tools: Vec<ToolDoc>,
    id_index: HashMap<String, usize>,
}

impl PartialEq for ToolCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.tools == other.tools
    }
}

impl ToolCorpus {
    /// Builds a corpus, rejecting duplicate ids. Line numbers in errors are
    /// 1-based positions in `tools`.
    pub fn new(tools: Vec<ToolDoc>) -> Result<Self> {
        let mut id_index = HashMap::with_capacity(tools.len());
        for (pos, tool) in tools.iter().enumerate() {
            if id_index.insert(tool.id.clone(), pos).is_some() {
                return Err(Error::DuplicateTool {
                    id: tool.id.clone(),
                    line: pos + 1,
                });
            }
        }
        Ok(Self { tools, id_index })
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[ToolDoc] {
        &self.tools
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ToolDoc> {
        self.tools.iter()
    }

    pub fn get(&self, id: &str) -> Option<&ToolDoc> {
        self.id_index.get(id).map(|&pos| &self.tools[pos])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    /// Resolves a tool by id first, then by exact name.
    pub fn resolve(&self, id_or_name: &str) -> Option<&ToolDoc> {
        self.get(id_or_name)
            .or_else(|| self.tools.iter().find(|t| t.name == id_or_name))
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut tools = Vec::new();
        let mut id_index = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::CorpusParse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
                line: line_no,
                message: e.to_string(),
            })?;
            let tool = ToolDoc::from_json(value).map_err(|message| Error::CorpusParse {
                line: line_no,
                message,
            })?;
            if id_index.contains_key(&tool.id) {
                return Err(Error::DuplicateTool {
                    id: tool.id,
                    line: line_no,
                });
            }
            id_index.insert(tool.id.clone(), tools.len());
            tools.push(tool);
        }
        Ok(Self { tools, id_index })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for tool in &self.tools {
            out.push_str(&tool.to_json().to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the canonical JSONL serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<ToolCorpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ToolCorpus::from_reader(file)
}

pub fn save_corpus(corpus: &ToolCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(corpus.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modify_password() -> ToolDoc {
        ToolDoc::new("ModifyPassword", "Modify the password of a user account.")
            .with_param("token", ParamSpec::new("string", "User token", true))
            .with_param("old_password", ParamSpec::new("string", "Old password", true))
            .with_param("new_password", ParamSpec::new("string", "New password", true))
    }

    #[test]
    fn feedback_line_lists_parameters_in_order() {
        assert_eq!(
            modify_password().render(RenderStyle::FeedbackLine),
            "ModifyPassword(token, old_password, new_password)"
        );
        assert_eq!(ToolDoc::new("ToolName", "x").render(RenderStyle::FeedbackLine), "ToolName()");
    }

    #[test]
    fn name_desc_rendering() {
        assert_eq!(
            modify_password().render(RenderStyle::NameDesc),
            "ModifyPassword: Modify the password of a user account."
        );
    }

    #[test]
    fn schema_json_has_fixed_key_order_and_round_trips() {
        let tool = modify_password();
        let s = tool.render(RenderStyle::SchemaJson);
        assert!(s.starts_with(r#"{"name":"ModifyPassword","description":"#));
        assert!(!s.contains('\n'));
        let back = ToolDoc::from_schema_json(&s).unwrap();
        assert!(back.canonical_eq(&tool));
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let corpus = ToolCorpus::from_reader("".as_bytes()).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn three_lines_three_tools() {
        let data = r#"{"name":"a","description":"x"}
{"name":"b","description":"y","parameters":{}}
{"id":"c-1","name":"c","description":"z"}
"#;
        let corpus = ToolCorpus::from_reader(data.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.position("c-1"), Some(2));
        assert_eq!(corpus.get("a").unwrap().id, "a");
        for (pos, tool) in corpus.iter().enumerate() {
            assert_eq!(corpus.position(&tool.id), Some(pos));
        }
    }

    #[test]
    fn duplicate_id_names_the_id_and_line() {
        let data = r#"{"name":"A","description":""}
{"name":"ModifyPassword","description":""}
{"name":"B","description":""}
{"name":"C","description":""}
{"name":"ModifyPassword","description":"again"}
"#;
        match ToolCorpus::from_reader(data.as_bytes()) {
            Err(Error::DuplicateTool { id, line }) => {
                assert_eq!(id, "ModifyPassword");
                assert_eq!(line, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let data = "{\"name\":\"a\"}\n{not json\n";
        match ToolCorpus::from_reader(data.as_bytes()) {
            Err(Error::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing_name = "{\"description\":\"x\"}\n";
        assert!(matches!(
            ToolCorpus::from_reader(missing_name.as_bytes()),
            Err(Error::CorpusParse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_keys_survive_a_round_trip() {
        let data = r#"{"name":"a","description":"x","category":"web","meta":{"v":1}}"#;
        let corpus = ToolCorpus::from_reader(data.as_bytes()).unwrap();
        let tool = &corpus.tools()[0];
        assert_eq!(tool.extra["category"], "web");
        let again = ToolCorpus::from_reader(corpus.to_jsonl().as_bytes()).unwrap();
        assert_eq!(again, corpus);
        assert_eq!(again.to_jsonl(), corpus.to_jsonl());
    }
}
