#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mangaflow::gateway::{GatewayRequest, GatewayResponse, ModelGateway, Payload, TransportError};
use mangaflow::story::{
    BubbleKind, DialogueLine, PageSpec, PanelCounts, PanelSpec, ProjectConfig, SectionSpec, StoryPlan,
};

pub fn line(speaker: &str, text: &str) -> DialogueLine {
    DialogueLine {
        speaker: Some(speaker.into()),
        text: text.into(),
        kind: BubbleKind::Speech,
    }
}

pub fn plan() -> StoryPlan {
    let panel = |id: &str, desc: &str, lines: Vec<DialogueLine>| PanelSpec {
        panel_id: id.into(),
        description: desc.into(),
        section_id: "s0".into(),
        dialogue: lines,
        shot_hint: None,
    };
    StoryPlan {
        schema_version: 1,
        pages: vec![
            PageSpec {
                index: 0,
                context: "Ren waits at the station".into(),
                panels: vec![
                    panel("p0_0", "Ren checks the clock", vec![line("Ren", "She is late again.")]),
                    panel("p0_1", "Mika runs up the stairs", vec![line("Mika", "Sorry! The bus broke down!")]),
                    panel("p0_2", "The train doors open", vec![]),
                ],
            },
            PageSpec {
                index: 1,
                context: "They board the train".into(),
                panels: vec![
                    panel("p1_0", "Ren and Mika sit down", vec![line("Ren", "We made it.")]),
                    panel("p1_1", "Mika laughs", vec![line("Mika", "Barely.")]),
                ],
            },
        ],
        sections: vec![SectionSpec {
            section_id: "s0".into(),
            description: "the morning commute".into(),
            scene: "a small train station".into(),
            characters: vec!["Ren".into(), "Mika".into()],
            key_objects: vec![],
        }],
    }
}

pub fn config() -> ProjectConfig {
    let mut c = ProjectConfig::new(2, PanelCounts::PerPage(vec![3, 2]));
    c.page_px = [600, 848];
    c.gutter_px = 12;
    c
}

pub fn png() -> Vec<u8> {
    mangaflow::raster::encode_png(&image::RgbImage::from_pixel(64, 64, image::Rgb([90, 120, 150])))
}

pub fn strips(n: usize) -> String {
    let panels: Vec<String> = (0..n)
        .map(|k| format!(r#"{{"id":"q{k}","x":0,"y":{},"w":1,"h":{}}}"#, k as f64 / n as f64, 1.0 / n as f64))
        .collect();
    format!(r#"{{"panels":[{}]}}"#, panels.join(","))
}

/// Answers every request plausibly and counts calls by kind.
pub fn responder(layout_calls: Arc<AtomicUsize>) -> impl Fn(&GatewayRequest) -> Result<GatewayResponse, TransportError> {
    move |req: &GatewayRequest| match &req.payload {
        Payload::Image { .. } => Ok(GatewayResponse::Image(png())),
        Payload::Multimodal { .. } => Ok(GatewayResponse::Text(
            r#"{"anchors":[{"panel_id":"p0_0","kind":"face","box":[0.6,0.05,0.2,0.1],"label":"Ren"}]}"#.into(),
        )),
        Payload::Chat { messages } => {
            let all: String = messages.iter().map(|m| m.content.as_str()).collect();
            if all.contains("layout artist") {
                layout_calls.fetch_add(1, Ordering::SeqCst);
                let n = if all.contains("exactly 3 panels") { 3 } else { 2 };
                Ok(GatewayResponse::Text(strips(n)))
            } else {
                Ok(GatewayResponse::Text("A tall figure in a school uniform.".into()))
            }
        }
    }
}

pub fn live(layout_calls: Arc<AtomicUsize>) -> ModelGateway {
    ModelGateway::live(Arc::new(responder(layout_calls)))
}

