//! Re-records the replay fixtures under `tests/fixtures/` from a scripted
//! responder. Run after changing any prompt template:
//!
//! ```text
//! cargo run -p mangaflow-cli --example record_fixtures
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mangaflow::gateway::{GatewayRequest, GatewayResponse, ModelGateway, Payload, TransportError};
use mangaflow::metabench::readability_judge;
use mangaflow::pipeline::{Project, StoryInput, UserInputs};
use mangaflow::render::StubBackend;
use mangaflow::story::{PanelCounts, ProjectConfig};
use serde_json::json;

pub const PROMPT: &str = "After class, Ren and Mika step into an empty classroom. A pale glow \
spreads across the blackboard and the room folds into a doorway of light. They tumble out \
into a crowded night market in China, lanterns swaying over food stalls.";

/// Judge cases: ground truth and the judge's reply (overlap, self-reported score).
pub const JUDGE_CASES: [(u8, u8); 10] = [
    (92, 5),
    (70, 4),
    (39, 1),
    (40, 2),
    (59, 3),
    (60, 3),
    (79, 4),
    (80, 4),
    (89, 5),
    (90, 5),
];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn plan_reply() -> String {
    let line = |speaker: Option<&str>, text: &str, kind: &str| json!({"speaker": speaker, "text": text, "kind": kind});
    json!({
        "pages": [
            {"index": 0, "context": "Ren and Mika enter the classroom and it turns into a portal", "panels": [
                {"panel_id": "p0_0", "description": "Ren slides the classroom door open, Mika behind him, late afternoon light",
                 "section_id": "s0", "dialogue": [line(Some("Ren"), "Nobody's here. Let's grab our bags and go.", "speech")],
                 "shot_hint": "wide shot"},
                {"panel_id": "p0_1", "description": "The blackboard begins to glow with a pale light",
                 "section_id": "s0", "dialogue": [line(None, "Then the blackboard began to shine.", "narration")]},
                {"panel_id": "p0_2", "description": "Mika grabs Ren's sleeve, eyes wide",
                 "section_id": "s0", "dialogue": [line(Some("Mika"), "Ren, what is that?!", "shout"),
                                                   line(Some("Ren"), "Don't let go.", "speech")],
                 "shot_hint": "close-up"},
                {"panel_id": "p0_3", "description": "The whole room folds into a doorway of light",
                 "section_id": "s0", "dialogue": []}
            ]},
            {"index": 1, "context": "They land in a night market in China", "panels": [
                {"panel_id": "p1_0", "description": "Ren and Mika tumble onto a busy market street under red lanterns",
                 "section_id": "s1", "dialogue": [line(Some("Mika"), "Where... are we?", "speech")]},
                {"panel_id": "p1_1", "description": "Steam rises from a dumpling stall, the cook waves at them",
                 "section_id": "s1", "dialogue": [line(Some("Ren"), "Smells like dinner.", "thought")]},
                {"panel_id": "p1_2", "description": "Ren and Mika look up at lanterns stretching down the street",
                 "section_id": "s1", "dialogue": [line(Some("Mika"), "This isn't our town anymore.", "speech")],
                 "shot_hint": "low angle"}
            ]}
        ],
        "sections": [
            {"section_id": "s0", "description": "the empty classroom turns into a portal",
             "scene": "a school classroom after hours", "characters": ["Ren", "Mika"], "key_objects": ["blackboard"]},
            {"section_id": "s1", "description": "arrival in a night market",
             "scene": "a night market street in China with red lanterns", "characters": ["Ren", "Mika"], "key_objects": []}
        ]
    })
    .to_string()
}

/// A deliberately off-grid proposal; projection snaps it.
fn layout_reply(panels: usize) -> String {
    let rects: Vec<[f64; 4]> = match panels {
        4 => vec![
            [0.0, 0.0, 1.0, 0.31],
            [0.46, 0.31, 0.54, 0.36],
            [0.0, 0.31, 0.46, 0.36],
            [0.0, 0.67, 1.0, 0.33],
        ],
        3 => vec![[0.0, 0.0, 1.0, 0.42], [0.52, 0.42, 0.48, 0.58], [0.0, 0.42, 0.52, 0.58]],
        n => (0..n).map(|k| [0.0, k as f64 / n as f64, 1.0, 1.0 / n as f64]).collect(),
    };
    let panels: Vec<_> = rects
        .iter()
        .enumerate()
        .map(|(k, r)| json!({"id": format!("a{k}"), "x": r[0], "y": r[1], "w": r[2], "h": r[3]}))
        .collect();
    json!({ "panels": panels }).to_string()
}

/// Faces in the upper part of each panel, one per listed speaker, and a
/// subject box in the lower middle.
fn anchors_reply(prompt: &str) -> String {
    let mut anchors = vec![];
    for line in prompt.lines().filter(|l| l.starts_with("- ")) {
        let Some((id, rest)) = line[2..].split_once(": [") else { continue };
        let Some((nums, speakers)) = rest.split_once("] speakers: ") else { continue };
        let n: Vec<f64> = nums.split(',').filter_map(|x| x.trim().parse().ok()).collect();
        let [x, y, w, h] = n[..] else { continue };
        let names: Vec<&str> = speakers.split(", ").filter(|s| !s.is_empty() && *s != "none").collect();
        for (k, name) in names.iter().enumerate() {
            let fx = x + w * (0.15 + 0.45 * k as f64);
            anchors.push(json!({"panel_id": id, "kind": "face", "label": name,
                                "box": [fx, y + h * 0.3, w * 0.2, h * 0.2]}));
        }
        anchors.push(json!({"panel_id": id, "kind": "subject", "box": [x + w * 0.3, y + h * 0.55, w * 0.4, h * 0.35]}));
    }
    json!({ "anchors": anchors }).to_string()
}

fn swatch(seed: &str) -> Vec<u8> {
    let d = mangaflow::digest::sha256_hex(seed.as_bytes());
    let b = hex_byte(&d[..2]);
    let g = hex_byte(&d[2..4]);
    let img = image::RgbImage::from_fn(32, 32, |x, y| {
        let on = (x / 8 + y / 8) % 2 == 0;
        image::Rgb(if on { [b, g, 128] } else { [255 - b, 255 - g, 96] })
    });
    mangaflow::raster::encode_png(&img)
}

fn hex_byte(s: &str) -> u8 {
    u8::from_str_radix(s, 16).unwrap_or(0)
}

fn judge_reply(overlap: u8, score: u8) -> String {
    json!({
        "summary": "Two students pass through a glowing classroom into a night market.",
        "overlap_percent": overlap,
        "matched_elements": ["Ren and Mika", "classroom portal"],
        "missing_or_wrong_elements": if overlap < 90 { vec!["later destinations"] } else { vec![] },
        "score": score,
        "reason": format!("about {overlap}% of the story is conveyed"),
    })
    .to_string()
}

pub fn judge_truth(k: usize) -> String {
    format!("{PROMPT} Ground truth variant {k}.")
}

fn responder(req: &GatewayRequest) -> Result<GatewayResponse, TransportError> {
    let text = |messages: &[mangaflow::gateway::Message]| -> String {
        messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    };
    match &req.payload {
        Payload::Image { prompt, .. } => Ok(GatewayResponse::Image(swatch(prompt))),
        Payload::Multimodal { messages, .. } => {
            let all = text(messages);
            if let Some(k) = (0..JUDGE_CASES.len()).find(|k| all.contains(&format!("variant {k}."))) {
                // The last case answers badly once to exercise the reprompt.
                if k == JUDGE_CASES.len() - 1 && !all.contains("could not be parsed") {
                    return Ok(GatewayResponse::Text("I think it is mostly fine.".into()));
                }
                let (o, s) = JUDGE_CASES[k];
                return Ok(GatewayResponse::Text(judge_reply(o, s)));
            }
            Ok(GatewayResponse::Text(anchors_reply(&all)))
        }
        Payload::Chat { messages } => {
            let all = text(messages);
            if all.contains("story planner") {
                Ok(GatewayResponse::Text(plan_reply()))
            } else if all.contains("layout artist") {
                let n = if all.contains("exactly 4 panels") { 4 } else { 3 };
                Ok(GatewayResponse::Text(layout_reply(n)))
            } else {
                let name = all.split('`').nth(1).unwrap_or("it");
                Ok(GatewayResponse::Text(format!(
                    "{name}: clean ink lines, simple shapes, a distinct silhouette and one accent colour."
                )))
            }
        }
    }
}

fn clear(dir: &Path) {
    if dir.exists() {
        std::fs::remove_dir_all(dir).expect("clear fixture dir");
    }
    std::fs::create_dir_all(dir).expect("create fixture dir");
}

fn main() {
    let demo = fixtures().join("demo");
    clear(&demo);
    let mut config = ProjectConfig::new(2, PanelCounts::PerPage(vec![4, 3]));
    config.seed = 7;
    mangaflow::fsutil::write_json(&demo.join("config.json"), &config).unwrap();
    std::fs::write(demo.join("prompt.txt"), PROMPT).unwrap();

    let work = tempfile::tempdir().unwrap();
    let project = work.path().join("demo");
    let cassette = demo.join("cassette.json");
    let gw = ModelGateway::record(&cassette, Arc::new(responder)).unwrap();
    let p = Project::init(&project, &config, &StoryInput::Prompt(PROMPT.into()), &UserInputs::default()).unwrap();
    let comic = p.generate(&gw, &StubBackend).unwrap();
    println!("demo: {} calls, {}", gw.calls(), comic.archive_path.display());

    let judge = fixtures().join("judge");
    clear(&judge);
    let page = judge.join("page_001.png");
    std::fs::copy(p.paths.page(0), &page).unwrap();
    let gw = ModelGateway::record(judge.join("cassette.json"), Arc::new(responder)).unwrap();
    for k in 0..JUDGE_CASES.len() {
        let out = readability_judge(std::slice::from_ref(&page), &judge_truth(k), &gw).unwrap();
        println!("judge {k}: {:?}", out.record.map(|r| (r.overlap_percent, r.score)));
    }
}
