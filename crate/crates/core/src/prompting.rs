//! Chain-of-thought prompt compilation for the two reasoning scales.
//!
//! Templates and worked examples are data files (see `prompts/`), each
//! starting with the version line [`PROMPT_FORMAT`]. The built-in library
//! embeds the shipped files; [`PromptLibrary::load_dir`] swaps in edited
//! copies without a rebuild.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const PROMPT_FORMAT: &str = "cotmr-prompt-v1";

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

pub const CAPTION_MARKER: &str = "FINAL_CAPTION:";
pub const EXISTENT_MARKER: &str = "EXISTENT_OBJECTS:";
pub const NONEXISTENT_MARKER: &str = "NONEXISTENT_OBJECTS:";

pub const IMAGE_HEADERS: [&str; 4] = [
    "Image understanding",
    "Modification text understanding",
    "Modification implementation",
    "Target image caption generation",
];

pub const OBJECT_HEADERS: [&str; 4] = [
    "Describe the Reference Image",
    "Understand the Modification Instructions",
    "Apply the Modifications",
    "Determine the Content of the Target Image",
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot read prompt file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt file {file}: {reason}")]
    Malformed { file: String, reason: String },
}

/// Which reasoning pass a prompt drives. `Joint` is the single merged pass
/// that asks for the caption and both object lists at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Image,
    Object,
    Joint,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Image => "image",
            Scale::Object => "object",
            Scale::Joint => "joint",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Scale::Image),
            "object" => Ok(Scale::Object),
            "joint" => Ok(Scale::Joint),
            other => Err(format!("unknown scale '{other}' (expected image, object or joint)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    NoCot,
    CircotZeroShot,
    #[default]
    CircotFewShot,
}

impl PromptMode {
    /// The command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            PromptMode::NoCot => "no-cot",
            PromptMode::CircotZeroShot => "circot-0",
            PromptMode::CircotFewShot => "circot-fs",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-cot" | "no_cot" => Ok(PromptMode::NoCot),
            "circot-0" | "circot_zero_shot" => Ok(PromptMode::CircotZeroShot),
            "circot-fs" | "circot_few_shot" => Ok(PromptMode::CircotFewShot),
            other => Err(format!(
                "unknown prompt mode '{other}' (expected no-cot, circot-0 or circot-fs)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One piece of message content. Image parts carry the image id; backends
/// resolve it to a locator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "lowercase")]
pub enum Part {
    Text(String),
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn joined_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub decoding: Decoding,
}

impl ChatRequest {
    /// Plain-text rendering used for traces and prompt snapshots.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            out.push_str(&format!("<|{role}|>\n"));
            for p in &m.parts {
                match p {
                    Part::Text(t) => out.push_str(t),
                    Part::Image(id) => out.push_str(&format!("<image:{id}>")),
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn last_user(&self) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.role == Role::User)
    }

    /// All image ids referenced anywhere in the request.
    pub fn image_ids(&self) -> Vec<&str> {
        self.messages
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter_map(|p| match p {
                Part::Image(id) => Some(id.as_str()),
                Part::Text(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkedExample {
    pub user: String,
    pub assistant: String,
}

/// A fully resolved prompt for one scale and mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub scale: Scale,
    pub system: String,
    pub direct_task: String,
    pub subtask_headers: Vec<String>,
    pub step_instructions: Vec<String>,
    pub worked_examples: Vec<WorkedExample>,
    pub output_contract: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ScaleText {
    system: String,
    direct: String,
    subtasks: Vec<(String, String)>,
    contract: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    image: ScaleText,
    object: ScaleText,
    joint: ScaleText,
    image_examples: Vec<WorkedExample>,
    object_examples: Vec<WorkedExample>,
    joint_examples: Vec<WorkedExample>,
}

const TEMPLATE_FILES: [(&str, &str); 6] = [
    ("image.txt", include_str!("../prompts/image.txt")),
    ("object.txt", include_str!("../prompts/object.txt")),
    ("joint.txt", include_str!("../prompts/joint.txt")),
    ("image_examples.txt", include_str!("../prompts/image_examples.txt")),
    ("object_examples.txt", include_str!("../prompts/object_examples.txt")),
    ("joint_examples.txt", include_str!("../prompts/joint_examples.txt")),
];

fn strip_version<'a>(text: &'a str, file: &str) -> Result<&'a str, PromptError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if first.trim_end() != PROMPT_FORMAT {
        return Err(PromptError::Malformed {
            file: file.into(),
            reason: format!("first line must be '{PROMPT_FORMAT}'"),
        });
    }
    Ok(rest)
}

/// Splits `[tag] rest-of-line` sections. Section bodies are trimmed.
fn sections(body: &str) -> Vec<(String, String, String)> {
    let mut out: Vec<(String, String, String)> = Vec::new();
    for line in body.lines() {
        if let Some(after) = line.strip_prefix('[') {
            if let Some((tag, rest)) = after.split_once(']') {
                if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_lowercase()) {
                    out.push((tag.to_string(), rest.trim().to_string(), String::new()));
                    continue;
                }
            }
        }
        if let Some(last) = out.last_mut() {
            last.2.push_str(line);
            last.2.push('\n');
        }
    }
    for s in &mut out {
        s.2 = s.2.trim().to_string();
    }
    out
}

fn parse_scale_text(text: &str, file: &str, headers: &[&str; 4]) -> Result<ScaleText, PromptError> {
    let malformed = |reason: String| PromptError::Malformed {
        file: file.into(),
        reason,
    };
    let mut system = None;
    let mut direct = None;
    let mut contract = None;
    let mut subtasks = Vec::new();
    for (tag, arg, body) in sections(strip_version(text, file)?) {
        match tag.as_str() {
            "system" => system = Some(body),
            "direct" => direct = Some(body),
            "contract" => contract = Some(body),
            "subtask" => subtasks.push((arg, body)),
            other => return Err(malformed(format!("unknown section [{other}]"))),
        }
    }
    let got: Vec<&str> = subtasks.iter().map(|(h, _)| h.as_str()).collect();
    if got != headers {
        return Err(malformed(format!(
            "subtask headers {got:?} do not match {headers:?}"
        )));
    }
    Ok(ScaleText {
        system: system.ok_or_else(|| malformed("missing [system]".into()))?,
        direct: direct.ok_or_else(|| malformed("missing [direct]".into()))?,
        subtasks,
        contract: contract.ok_or_else(|| malformed("missing [contract]".into()))?,
    })
}

fn parse_examples(text: &str, file: &str) -> Result<Vec<WorkedExample>, PromptError> {
    let malformed = |reason: &str| PromptError::Malformed {
        file: file.into(),
        reason: reason.into(),
    };
    let mut out = Vec::new();
    let mut user: Option<String> = None;
    let mut in_example = false;
    for (tag, _, body) in sections(strip_version(text, file)?) {
        match tag.as_str() {
            "example" => {
                if user.is_some() {
                    return Err(malformed("example without [assistant]"));
                }
                in_example = true;
            }
            "user" if in_example && user.is_none() => user = Some(body),
            "assistant" if in_example => {
                let u = user.take().ok_or_else(|| malformed("[assistant] before [user]"))?;
                out.push(WorkedExample {
                    user: u,
                    assistant: body,
                });
                in_example = false;
            }
            _ => return Err(malformed("unexpected section order")),
        }
    }
    if user.is_some() {
        return Err(malformed("example without [assistant]"));
    }
    Ok(out)
}

impl PromptLibrary {
    /// The shipped templates.
    pub fn builtin() -> Self {
        let texts: Vec<(&str, String)> = TEMPLATE_FILES
            .iter()
            .map(|(name, body)| (*name, body.to_string()))
            .collect();
        Self::from_texts(&texts).expect("built-in prompt files are valid")
    }

    /// Loads the six template files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut texts = Vec::new();
        for (name, _) in TEMPLATE_FILES {
            let path = dir.join(name);
            let body = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            texts.push((name, body));
        }
        Self::from_texts(&texts)
    }

    fn from_texts(texts: &[(&str, String)]) -> Result<Self, PromptError> {
        let get = |name: &str| {
            texts
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.as_str())
                .unwrap_or_default()
        };
        Ok(Self {
            image: parse_scale_text(get("image.txt"), "image.txt", &IMAGE_HEADERS)?,
            object: parse_scale_text(get("object.txt"), "object.txt", &OBJECT_HEADERS)?,
            joint: parse_scale_text(get("joint.txt"), "joint.txt", &IMAGE_HEADERS)?,
            image_examples: parse_examples(get("image_examples.txt"), "image_examples.txt")?,
            object_examples: parse_examples(get("object_examples.txt"), "object_examples.txt")?,
            joint_examples: parse_examples(get("joint_examples.txt"), "joint_examples.txt")?,
        })
    }

    fn scale_text(&self, scale: Scale) -> &ScaleText {
        match scale {
            Scale::Image => &self.image,
            Scale::Object => &self.object,
            Scale::Joint => &self.joint,
        }
    }

    pub fn output_contract(&self, scale: Scale) -> &str {
        &self.scale_text(scale).contract
    }

    pub fn template(&self, scale: Scale, mode: PromptMode) -> PromptTemplate {
        let text = self.scale_text(scale);
        let worked_examples = if mode == PromptMode::CircotFewShot {
            match scale {
                Scale::Image => self.image_examples.clone(),
                Scale::Object => self.object_examples.clone(),
                Scale::Joint => self.joint_examples.clone(),
            }
        } else {
            Vec::new()
        };
        PromptTemplate {
            scale,
            system: text.system.clone(),
            direct_task: text.direct.clone(),
            subtask_headers: text.subtasks.iter().map(|(h, _)| h.clone()).collect(),
            step_instructions: text.subtasks.iter().map(|(_, b)| b.clone()).collect(),
            worked_examples,
            output_contract: text.contract.clone(),
        }
    }

    /// Compiles the chat request for one reasoning pass.
    pub fn build_prompt(
        &self,
        scale: Scale,
        mode: PromptMode,
        reference_image: &str,
        modification_text: &str,
    ) -> ChatRequest {
        let template = self.template(scale, mode);
        let system = match mode {
            PromptMode::NoCot => format!("{}\n\n{}", template.system, template.direct_task),
            PromptMode::CircotZeroShot | PromptMode::CircotFewShot => {
                let mut s = format!(
                    "{}\n\nWork through the following four subtasks in order. Within each subtask, think step by step and number your steps.",
                    template.system
                );
                for (i, (header, steps)) in template
                    .subtask_headers
                    .iter()
                    .zip(&template.step_instructions)
                    .enumerate()
                {
                    s.push_str(&format!("\n\n{}. {header}\n{steps}", i + 1));
                }
                s
            }
        };

        let mut messages = vec![ChatMessage::text(Role::System, system)];
        for ex in &template.worked_examples {
            messages.push(ChatMessage::text(Role::User, ex.user.clone()));
            messages.push(ChatMessage::text(Role::Assistant, ex.assistant.clone()));
        }
        messages.push(ChatMessage {
            role: Role::User,
            parts: vec![
                Part::Image(reference_image.to_string()),
                Part::Text(format!("Modification text: {modification_text}")),
                Part::Text(template.output_contract),
            ],
        });
        ChatRequest {
            messages,
            decoding: Decoding::default(),
        }
    }
}

/// The marker grammar the reply must end with, from the built-in library.
pub fn output_contract(scale: Scale) -> String {
    PromptLibrary::builtin().output_contract(scale).to_string()
}

/// [`PromptLibrary::build_prompt`] on the built-in templates.
pub fn build_prompt(
    scale: Scale,
    mode: PromptMode,
    reference_image: &str,
    modification_text: &str,
) -> ChatRequest {
    PromptLibrary::builtin().build_prompt(scale, mode, reference_image, modification_text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positions(text: &str, headers: &[&str]) -> Vec<Option<usize>> {
        headers.iter().map(|h| text.find(h)).collect()
    }

    #[test]
    fn image_few_shot_has_ordered_headers_and_examples() {
        let req = build_prompt(Scale::Image, PromptMode::CircotFewShot, "img_1", "make it red");
        let system = req.messages[0].joined_text();
        let pos = positions(&system, &IMAGE_HEADERS);
        assert!(pos.iter().all(Option::is_some));
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let examples = req.messages.iter().filter(|m| m.role == Role::Assistant).count();
        assert!(examples >= 1);
    }

    #[test]
    fn object_zero_shot() {
        let req = build_prompt(Scale::Object, PromptMode::CircotZeroShot, "img_1", "add a hat");
        assert!(req.render().contains("Determine the Content of the Target Image"));
        assert!(req.messages.iter().all(|m| m.role != Role::Assistant));
    }

    #[test]
    fn no_cot_has_no_headers() {
        for scale in [Scale::Image, Scale::Object, Scale::Joint] {
            let req = build_prompt(scale, PromptMode::NoCot, "img_1", "make it red");
            let text = req.render();
            for h in IMAGE_HEADERS.iter().chain(OBJECT_HEADERS.iter()) {
                assert!(!text.contains(h), "{scale}: found header {h}");
            }
            assert!(text.contains(&output_contract(scale)));
        }
    }

    #[test]
    fn final_user_message_shape() {
        let req = build_prompt(Scale::Image, PromptMode::CircotFewShot, "img_9", "swap the dog for a cat");
        let last = req.messages.last().unwrap();
        assert_eq!(last.role, Role::User);
        let images = last.parts.iter().filter(|p| matches!(p, Part::Image(_))).count();
        assert_eq!(images, 1);
        assert_eq!(req.image_ids(), vec!["img_9"]);
        assert_eq!(last.joined_text().matches("swap the dog for a cat").count(), 1);
        assert_eq!(last.parts.last(), Some(&Part::Text(output_contract(Scale::Image))));
        assert_eq!(req.decoding.temperature, 0.0);
        assert_eq!(req.decoding.max_tokens, 1024);
    }

    #[test]
    fn contracts() {
        assert!(output_contract(Scale::Image).contains(CAPTION_MARKER));
        let obj = output_contract(Scale::Object);
        assert!(obj.contains(EXISTENT_MARKER) && obj.contains(NONEXISTENT_MARKER));
        let joint = output_contract(Scale::Joint);
        for m in [CAPTION_MARKER, EXISTENT_MARKER, NONEXISTENT_MARKER] {
            assert!(joint.contains(m));
        }
        assert_eq!(output_contract(Scale::Image), output_contract(Scale::Image));
    }

    #[test]
    fn examples_empty_unless_few_shot() {
        let lib = PromptLibrary::builtin();
        for scale in [Scale::Image, Scale::Object, Scale::Joint] {
            assert_eq!(lib.template(scale, PromptMode::CircotFewShot).worked_examples.len(), 2);
            assert!(lib.template(scale, PromptMode::CircotZeroShot).worked_examples.is_empty());
            assert!(lib.template(scale, PromptMode::NoCot).worked_examples.is_empty());
        }
    }

    #[test]
    fn wire_shape_of_parts() {
        let json = serde_json::to_string(&Part::Image("x".into())).unwrap();
        assert_eq!(json, r#"{"type":"image","data":"x"}"#);
    }

    #[test]
    fn rejects_bad_version_line() {
        let err = parse_examples("cotmr-prompt-v0\n[example]\n", "f").unwrap_err();
        assert!(err.to_string().contains("first line"));
    }

    #[test]
    fn rejects_reordered_headers() {
        let text = "cotmr-prompt-v1\n[system]\ns\n[direct]\nd\n[subtask] Modification text understanding\na\n[subtask] Image understanding\nb\n[subtask] Modification implementation\nc\n[subtask] Target image caption generation\nd\n[contract]\nFINAL_CAPTION: x\n";
        assert!(parse_scale_text(text, "f", &IMAGE_HEADERS).is_err());
    }

    #[test]
    fn load_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in TEMPLATE_FILES {
            std::fs::write(dir.path().join(name), body).unwrap();
        }
        assert_eq!(PromptLibrary::load_dir(dir.path()).unwrap(), PromptLibrary::builtin());
    }
}
