//! Story plans: pages, panels, dialogue and story sections.

mod config;
mod enforce;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, GatewayRequest, Message, ModelGateway};
use crate::reply::parse_reply;

pub use config::{BackendKind, PanelCounts, PlacementWeights, ProjectConfig, CONFIG_SCHEMA_VERSION};
pub use enforce::enforce_structure;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Extra planner attempts after a reply that violates the plan schema.
const REPROMPTS: usize = 2;

#[derive(Debug, Error)]
pub enum StoryError {
    #[error("story prompt is empty")]
    EmptyPrompt,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("panel {panel_id} references unknown section {section_id}")]
    UnknownSection { panel_id: String, section_id: String },
    #[error("planner reply unusable ({reason})")]
    Unparseable { reason: String, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BubbleKind {
    #[default]
    Speech,
    Narration,
    Thought,
    Shout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueLine {
    #[serde(default)]
    pub speaker: Option<String>,
    pub text: String,
    #[serde(default)]
    pub kind: BubbleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub panel_id: String,
    pub description: String,
    pub section_id: String,
    #[serde(default)]
    pub dialogue: Vec<DialogueLine>,
    #[serde(default)]
    pub shot_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpec {
    pub index: usize,
    pub context: String,
    pub panels: Vec<PanelSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub section_id: String,
    pub description: String,
    pub scene: String,
    #[serde(default)]
    pub characters: Vec<String>,
    #[serde(default)]
    pub key_objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPlan {
    #[serde(default = "plan_schema")]
    pub schema_version: u32,
    pub pages: Vec<PageSpec>,
    pub sections: Vec<SectionSpec>,
}

fn plan_schema() -> u32 {
    PLAN_SCHEMA_VERSION
}

impl StoryPlan {
    pub fn panels(&self) -> impl Iterator<Item = (&PageSpec, &PanelSpec)> {
        self.pages.iter().flat_map(|p| p.panels.iter().map(move |q| (p, q)))
    }

    pub fn section(&self, id: &str) -> Option<&SectionSpec> {
        self.sections.iter().find(|s| s.section_id == id)
    }

    pub fn dialogue_lines(&self) -> usize {
        self.panels().map(|(_, p)| p.dialogue.len()).sum()
    }

    /// Schema rules that structural enforcement cannot repair.
    pub fn check_schema(&self) -> Result<(), StoryError> {
        let bad = |m: String| Err(StoryError::InvalidPlan(m));
        if self.pages.is_empty() {
            return bad("plan has no pages".into());
        }
        if self.sections.is_empty() {
            return bad("plan has no sections".into());
        }
        let mut ids = HashSet::new();
        for s in &self.sections {
            if !ids.insert(s.section_id.as_str()) {
                return bad(format!("duplicate section {}", s.section_id));
            }
        }
        for page in &self.pages {
            if page.panels.is_empty() {
                return bad(format!("page {} has no panels", page.index));
            }
            for p in &page.panels {
                if p.description.trim().is_empty() {
                    return bad(format!("panel {} has an empty description", p.panel_id));
                }
                if !ids.contains(p.section_id.as_str()) {
                    return Err(StoryError::UnknownSection {
                        panel_id: p.panel_id.clone(),
                        section_id: p.section_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Schema rules plus the configured page and panel counts.
    pub fn validate(&self, config: &ProjectConfig) -> Result<(), StoryError> {
        self.check_schema()?;
        if self.pages.len() != config.page_count {
            return Err(StoryError::InvalidPlan(format!(
                "{} pages, config wants {}",
                self.pages.len(),
                config.page_count
            )));
        }
        let mut panel_ids = HashSet::new();
        for (i, page) in self.pages.iter().enumerate() {
            if page.index != i {
                return Err(StoryError::InvalidPlan(format!("page {i} has index {}", page.index)));
            }
            if page.panels.len() != config.panel_count(i) {
                return Err(StoryError::InvalidPlan(format!(
                    "page {i} has {} panels, config wants {}",
                    page.panels.len(),
                    config.panel_count(i)
                )));
            }
            for p in &page.panels {
                if !panel_ids.insert(p.panel_id.as_str()) {
                    return Err(StoryError::InvalidPlan(format!("duplicate panel id {}", p.panel_id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoryError> {
        let text = std::fs::read_to_string(path)?;
        let plan: StoryPlan = serde_json::from_str(&text)
            .map_err(|e| StoryError::InvalidPlan(format!("{}: {e}", path.display())))?;
        plan.check_schema()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::fsutil::write_json(path, self)
    }
}

const PLANNER_SYSTEM: &str = "You are a manga story planner. Turn the user's story into a \
page-by-page plan and group consecutive panels into story sections that share one scene, \
one cast of characters and the same key objects. Reply with JSON only, matching:\n\
{\"pages\":[{\"index\":0,\"context\":\"what happens on this page\",\"panels\":[\
{\"panel_id\":\"p0_0\",\"description\":\"visual description, no dialogue\",\
\"section_id\":\"s0\",\"dialogue\":[{\"speaker\":\"Name or null\",\"text\":\"...\",\
\"kind\":\"speech|narration|thought|shout\"}],\"shot_hint\":\"optional camera framing or null\"}]}],\
\"sections\":[{\"section_id\":\"s0\",\"description\":\"...\",\"scene\":\"setting description\",\
\"characters\":[\"Name\"],\"key_objects\":[\"object\"]}]}";

fn planner_request(prompt: &str, config: &ProjectConfig) -> String {
    let counts: Vec<String> = (0..config.page_count)
        .map(|i| format!("page {i}: {} panels", config.panel_count(i)))
        .collect();
    format!(
        "Story:\n{}\n\nPages: {}\n{}\nStyle: {}\nDialogue language: {}",
        prompt.trim(),
        config.page_count,
        counts.join("\n"),
        config.style,
        config.language
    )
}

/// One planner call (plus reprompts on schema violations), followed by
/// [`enforce_structure`].
pub fn plan_story(
    prompt: &str,
    config: &ProjectConfig,
    gateway: &ModelGateway,
) -> Result<StoryPlan, StoryError> {
    if prompt.trim().is_empty() {
        return Err(StoryError::EmptyPrompt);
    }
    config.validate()?;
    let mut messages = vec![
        Message::system(PLANNER_SYSTEM),
        Message::user(planner_request(prompt, config)),
    ];
    let mut failure = None;
    for _ in 0..=REPROMPTS {
        let request = GatewayRequest::chat(gateway.models().chat.clone(), messages.clone());
        let raw = gateway.call(&request)?.into_text()?;
        let parsed = parse_reply::<StoryPlan>(&raw).and_then(|plan| {
            plan.check_schema().map_err(|e| e.to_string())?;
            Ok(plan)
        });
        match parsed {
            Ok(plan) => return Ok(enforce_structure(plan, config)),
            Err(reason) => {
                messages.push(Message::assistant(raw.clone()));
                messages.push(Message::user(format!(
                    "The plan is not usable: {reason}. Reply again with the full plan as JSON only."
                )));
                failure = Some((reason, raw));
            }
        }
    }
    let (reason, raw) = failure.expect("at least one attempt");
    Err(StoryError::Unparseable { reason, raw })
}

/// The plan's sections that at least one panel uses, plus a warning for each
/// unused section that was dropped.
pub fn extract_sections(plan: &StoryPlan) -> Result<(Vec<SectionSpec>, Vec<String>), StoryError> {
    let known: HashSet<&str> = plan.sections.iter().map(|s| s.section_id.as_str()).collect();
    let mut used = HashSet::new();
    for (_, p) in plan.panels() {
        if !known.contains(p.section_id.as_str()) {
            return Err(StoryError::UnknownSection {
                panel_id: p.panel_id.clone(),
                section_id: p.section_id.clone(),
            });
        }
        used.insert(p.section_id.as_str());
    }
    let mut warnings = vec![];
    let mut sections = vec![];
    for s in &plan.sections {
        if used.contains(s.section_id.as_str()) {
            sections.push(s.clone());
        } else {
            let w = format!("section {} is not used by any panel; dropped", s.section_id);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok((sections, warnings))
}
