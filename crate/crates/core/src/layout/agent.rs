//! The layout agent: prompts a chat model for panel rectangles and critiques
//! its own proposals.

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayRequest, Message, ModelGateway};
use crate::reply::parse_reply;

use super::{project, Layout, LayoutConstraints, Panel};

pub const DEFAULT_REFINE_ROUNDS: usize = 2;

/// Extra attempts after an unusable layout reply.
const PARSE_RETRIES: usize = 2;

/// Below this coefficient of variation of panel areas the critique asks for
/// more size contrast.
const LOW_VARIATION: f64 = 0.15;

/// Where a page's layout came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutSource {
    User,
    Template,
    Agent,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLayout {
    pub layout: Layout,
    pub source: LayoutSource,
    /// Why the fallback grid was used, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub layout: Layout,
    /// Proposals requested from the agent.
    pub rounds: usize,
    pub accepted: bool,
}

const SYSTEM: &str = "You are a manga layout artist. You design the panel layout of one \
manga page. Coordinates are fractions of the page: x grows to the right, y grows \
downward, (0,0) is the top-left corner. Panels are read right-to-left within a row, \
rows top-to-bottom. Panels should tile the page without overlapping. Reply with JSON \
only, in the form {\"panels\":[{\"id\":\"p0\",\"x\":0.5,\"y\":0.0,\"w\":0.5,\"h\":0.5}]}.";

#[derive(Deserialize)]
struct WireLayout {
    panels: Vec<Panel>,
}

/// The user message for a fresh layout request.
pub fn layout_prompt(page_context: &str, constraints: &LayoutConstraints) -> String {
    format!(
        "Page content:\n{}\n\nDesign a layout with exactly {} panels. Every panel must cover \
         at least {} of the page area and have a width/height ratio between {} and {}. \
         Give larger panels to dramatic moments.",
        page_context.trim(),
        constraints.panel_count,
        constraints.min_panel_area,
        constraints.min_aspect,
        constraints.max_aspect
    )
}

fn parse_layout(
    text: &str,
    page_index: usize,
    constraints: &LayoutConstraints,
) -> Result<Layout, String> {
    let wire: WireLayout = parse_reply(text)?;
    let layout = Layout::new(page_index, wire.panels);
    project(&layout, constraints).map_err(|e| e.to_string())
}

fn chat(gateway: &ModelGateway, messages: Vec<Message>) -> Result<String, crate::gateway::GatewayError> {
    let request = GatewayRequest::chat(gateway.models().chat.clone(), messages);
    gateway.call(&request)?.into_text()
}

/// Asks the layout agent for a page layout and projects it.
///
/// Unusable replies are retried with the parse error appended. When the
/// gateway fails or every attempt is unusable, a uniform grid is returned
/// with source [`LayoutSource::Fallback`].
pub fn generate_layout(
    page_index: usize,
    page_context: &str,
    constraints: &LayoutConstraints,
    gateway: &ModelGateway,
) -> Result<GeneratedLayout, super::LayoutError> {
    constraints.validate()?;
    let mut messages = vec![
        Message::system(SYSTEM),
        Message::user(layout_prompt(page_context, constraints)),
    ];
    let mut last_error = String::new();
    for _ in 0..=PARSE_RETRIES {
        let text = match chat(gateway, messages.clone()) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("layout agent unavailable for page {page_index}: {e}");
                last_error = e.to_string();
                break;
            }
        };
        match parse_layout(&text, page_index, constraints) {
            Ok(layout) => {
                return Ok(GeneratedLayout {
                    layout,
                    source: LayoutSource::Agent,
                    fallback_reason: None,
                })
            }
            Err(e) => {
                messages.push(Message::assistant(text));
                messages.push(Message::user(format!(
                    "That layout could not be used ({e}). Reply again with JSON only."
                )));
                last_error = e;
            }
        }
    }
    let grid = Layout::uniform_grid(page_index, constraints.panel_count, constraints.grid_resolution);
    Ok(GeneratedLayout {
        layout: project(&grid, constraints)?,
        source: LayoutSource::Fallback,
        fallback_reason: Some(last_error),
    })
}

fn panel_passes(p: &Panel, c: &LayoutConstraints) -> bool {
    let a = p.region.aspect();
    p.region.area() >= c.min_panel_area && a >= c.min_aspect && a <= c.max_aspect
}

/// Every panel meets the minimum area and the aspect bounds. Aspect is `w / h`
/// in page-normalized units.
pub fn passes_acceptance(layout: &Layout, constraints: &LayoutConstraints) -> bool {
    layout.panels.iter().all(|p| panel_passes(p, constraints))
}

pub fn pass_fraction(layout: &Layout, constraints: &LayoutConstraints) -> f64 {
    if layout.is_empty() {
        return 0.0;
    }
    let ok = layout.panels.iter().filter(|p| panel_passes(p, constraints)).count();
    ok as f64 / layout.len() as f64
}

/// Automatic critique lines fed to the agent during refinement.
pub fn critique(layout: &Layout, constraints: &LayoutConstraints) -> Vec<String> {
    let mut out = vec![];
    for p in &layout.panels {
        let area = p.region.area();
        if area < constraints.min_panel_area {
            out.push(format!(
                "Panel {} covers {:.4} of the page, below the minimum {}.",
                p.id, area, constraints.min_panel_area
            ));
        }
        let a = p.region.aspect();
        if a < constraints.min_aspect || a > constraints.max_aspect {
            out.push(format!(
                "Panel {} has width/height ratio {:.3}, outside [{}, {}].",
                p.id, a, constraints.min_aspect, constraints.max_aspect
            ));
        }
    }
    if layout.len() >= 3 {
        let areas: Vec<f64> = layout.panels.iter().map(|p| p.region.area()).collect();
        let mean = areas.iter().sum::<f64>() / areas.len() as f64;
        let var = areas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / areas.len() as f64;
        if var.sqrt() / mean < LOW_VARIATION {
            out.push("Panel sizes are nearly uniform; vary them to pace the page.".into());
        }
    }
    out
}

/// Critique-and-revise rounds on a projected layout.
///
/// Returns the first proposal that passes [`passes_acceptance`], otherwise the
/// candidate with the highest [`pass_fraction`] (the input wins ties). A layout
/// that already passes is returned without any gateway call.
pub fn refine_layout(
    layout: &Layout,
    page_context: &str,
    constraints: &LayoutConstraints,
    gateway: &ModelGateway,
    max_rounds: usize,
) -> RefineOutcome {
    if passes_acceptance(layout, constraints) {
        return RefineOutcome {
            layout: layout.clone(),
            rounds: 0,
            accepted: true,
        };
    }
    let mut best = (pass_fraction(layout, constraints), layout.clone());
    let mut current = layout.clone();
    let mut rounds = 0;
    while rounds < max_rounds {
        rounds += 1;
        let notes = critique(&current, constraints);
        let serialized = serde_json::to_string(&current).expect("layout serializes");
        let messages = vec![
            Message::system(SYSTEM),
            Message::user(format!(
                "{}\n\nCurrent layout:\n{}\n\nProblems:\n- {}\n\nPropose a revised layout.",
                layout_prompt(page_context, constraints),
                serialized,
                notes.join("\n- ")
            )),
        ];
        let text = match chat(gateway, messages) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("layout refinement stopped: {e}");
                break;
            }
        };
        let Ok(candidate) = parse_layout(&text, layout.page_index, constraints) else {
            continue;
        };
        if passes_acceptance(&candidate, constraints) {
            return RefineOutcome {
                layout: candidate,
                rounds,
                accepted: true,
            };
        }
        let score = pass_fraction(&candidate, constraints);
        if score > best.0 {
            best = (score, candidate.clone());
        }
        current = candidate;
    }
    RefineOutcome {
        layout: best.1,
        rounds,
        accepted: false,
    }
}
