//! Benchmark tasks, layout and lettering metrics, judges and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, GatewayRequest, ImageRef, Message, ModelGateway};
use crate::geometry::{greedy_match, multi_cover_area, union_area};
use crate::layout::{
    generate_layout, is_projected, project, refine_layout, Layout, LayoutError,
};
use crate::story::ProjectConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TASK_SCHEMA_VERSION: u32 = 1;
pub const OCCM_EPSILON: f64 = 1e-6;

const READABILITY_TEMPLATE: &str = include_str!("../prompts/readability.txt");

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{targets} target pages but {generated} generated pages")]
    PageMismatch { targets: usize, generated: usize },
    #[error("no pages to score")]
    NoPages,
    #[error("unknown rubric {0:?}")]
    UnknownRubric(String),
    #[error("ingested metrics given more than once: {0:?}")]
    DuplicateExternal(Vec<String>),
    #[error("invalid ingestion file {path}: {reason}")]
    BadIngest { path: PathBuf, reason: String },
    #[error("task {story_id}: {reason}")]
    InvalidTask { story_id: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutScores {
    pub count_accuracy: f64,
    pub layout_iou: f64,
    pub coverage: f64,
    pub overlap: f64,
}

/// Page-aligned layout metrics: panel count hit rate, greedy-matched IoU,
/// union coverage and multiply-covered area, each averaged over pages.
pub fn layout_metrics(targets: &[Layout], generated: &[Layout]) -> Result<LayoutScores, MetricError> {
    if targets.len() != generated.len() {
        return Err(MetricError::PageMismatch {
            targets: targets.len(),
            generated: generated.len(),
        });
    }
    if targets.is_empty() {
        return Err(MetricError::NoPages);
    }
    let n = targets.len() as f64;
    let mut s = LayoutScores {
        count_accuracy: 0.0,
        layout_iou: 0.0,
        coverage: 0.0,
        overlap: 0.0,
    };
    for (t, g) in targets.iter().zip(generated) {
        let (tr, gr) = (t.regions(), g.regions());
        s.count_accuracy += if tr.len() == gr.len() { 1.0 } else { 0.0 };
        s.layout_iou += greedy_match(&tr, &gr).page_score();
        s.coverage += union_area(&gr);
        if gr.len() >= 2 {
            s.overlap += multi_cover_area(&gr, 2);
        }
    }
    s.count_accuracy /= n;
    s.layout_iou /= n;
    s.coverage /= n;
    s.overlap /= n;
    Ok(s)
}

/// On-stage character count matching, in percent: the relative count error
/// under an exponential penalty. `epsilon` only stands in for an expected
/// count of zero; for any positive count the error is relative to the count
/// itself.
pub fn occm(detected: u32, expected: u32, epsilon: f64) -> f64 {
    let d = detected as f64;
    let e = expected as f64;
    (-(d - e).abs() / e.max(epsilon)).exp() * 100.0
}

fn flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" | "" => Ok(false),
        other => Err(serde::de::Error::custom(format!("not a boolean: {other:?}"))),
    }
}

/// One annotator's verdict on one panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpsRecord {
    pub story_id: String,
    pub page: usize,
    pub panel_id: String,
    #[serde(deserialize_with = "flag")]
    pub has_text: bool,
    #[serde(deserialize_with = "flag")]
    pub face_occluded: bool,
    pub annotator_id: String,
}

pub fn read_bps_csv(path: &Path) -> Result<Vec<BpsRecord>, MetricError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Bubble placement score: per text panel the mean over annotators of "no
/// face occluded", then the mean over panels. `None` without text panels.
pub fn bps(records: &[BpsRecord]) -> Option<f64> {
    let mut panels: BTreeMap<(&str, usize, &str), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.has_text) {
        let e = panels
            .entry((r.story_id.as_str(), r.page, r.panel_id.as_str()))
            .or_default();
        e.0 += if r.face_occluded { 0.0 } else { 1.0 };
        e.1 += 1;
    }
    if panels.is_empty() {
        return None;
    }
    let sum: f64 = panels.values().map(|(ok, n)| ok / *n as f64).sum();
    Some(sum / panels.len() as f64)
}

/// Detected versus expected character count for one panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub story_id: String,
    pub page: usize,
    pub panel_id: String,
    pub detected: u32,
    pub expected: u32,
}

pub fn read_count_csv(path: &Path) -> Result<Vec<CountRecord>, MetricError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Mean OCCM over panels, `None` for no panels.
pub fn mean_occm(records: &[CountRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let sum: f64 = records
        .iter()
        .map(|r| occm(r.detected, r.expected, OCCM_EPSILON))
        .sum();
    Some(sum / records.len() as f64)
}

/// Score band for a story-overlap percentage.
pub fn rubric_score(overlap_percent: u8) -> u8 {
    match overlap_percent {
        0..=39 => 1,
        40..=59 => 2,
        60..=79 => 3,
        80..=89 => 4,
        _ => 5,
    }
}

pub fn readability_prompt(ground_truth: &str) -> String {
    READABILITY_TEMPLATE.replace("{ground_truth_story}", ground_truth.trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadabilityRecord {
    pub score: u8,
    pub overlap_percent: u8,
    pub summary: String,
    pub matched_elements: Vec<String>,
    pub missing_or_wrong_elements: Vec<String>,
    pub reason: String,
    /// The score the judge reported, when it differed from the rubric.
    #[serde(default)]
    pub model_score: Option<i64>,
    #[serde(default)]
    pub correction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityOutcome {
    pub record: Option<ReadabilityRecord>,
    /// The last reply, kept when it could not be parsed.
    pub raw: Option<String>,
    pub attempts: usize,
}

#[derive(Deserialize)]
struct JudgeReply {
    summary: String,
    overlap_percent: f64,
    #[serde(default)]
    matched_elements: Vec<String>,
    #[serde(default)]
    missing_or_wrong_elements: Vec<String>,
    #[serde(default)]
    score: Option<i64>,
    #[serde(default)]
    reason: String,
}

/// Parses a judge reply and forces the score onto the rubric.
pub fn parse_readability(text: &str) -> Result<ReadabilityRecord, String> {
    let r: JudgeReply = crate::reply::parse_reply(text)?;
    if !r.overlap_percent.is_finite() {
        return Err("overlap_percent is not a number".into());
    }
    let overlap = r.overlap_percent.round().clamp(0.0, 100.0) as u8;
    let score = rubric_score(overlap);
    let (model_score, correction) = match r.score {
        Some(s) if s == score as i64 => (None, None),
        Some(s) => (
            Some(s),
            Some(format!("judge score {s} replaced by {score} for overlap {overlap}")),
        ),
        None => (None, Some(format!("judge gave no score; {score} from overlap {overlap}"))),
    };
    Ok(ReadabilityRecord {
        score,
        overlap_percent: overlap,
        summary: r.summary,
        matched_elements: r.matched_elements,
        missing_or_wrong_elements: r.missing_or_wrong_elements,
        reason: r.reason,
        model_score,
        correction,
    })
}

/// Asks the multimodal judge to summarize the pages and rate their overlap
/// with the ground truth. One reprompt on an unparseable reply.
pub fn readability_judge(
    pages: &[PathBuf],
    ground_truth: &str,
    gateway: &ModelGateway,
) -> Result<ReadabilityOutcome, MetricError> {
    let images = pages
        .iter()
        .map(ImageRef::from_file)
        .collect::<Result<Vec<_>, _>>()?;
    let mut messages = vec![Message::user(readability_prompt(ground_truth))];
    let mut raw = String::new();
    for attempt in 1..=2 {
        let request = GatewayRequest::multimodal(
            gateway.models().multimodal.clone(),
            messages.clone(),
            images.clone(),
        );
        raw = gateway.call(&request)?.into_text()?;
        match parse_readability(&raw) {
            Ok(record) => {
                return Ok(ReadabilityOutcome {
                    record: Some(record),
                    raw: None,
                    attempts: attempt,
                })
            }
            Err(e) => {
                messages.push(Message::assistant(raw.clone()));
                messages.push(Message::user(format!(
                    "The reply could not be parsed ({e}). Answer again with the strict JSON only."
                )));
            }
        }
    }
    Ok(ReadabilityOutcome {
        record: None,
        raw: Some(raw),
        attempts: 2,
    })
}

/// Registered 0-4 rubrics: id and the aspect judged.
pub const RUBRICS: [(&str, &str); 4] = [
    ("scene", "the environment and background"),
    ("shot", "the camera perspective and composition"),
    ("character_interaction", "the interaction between characters"),
    ("individual_action", "the gestures and poses of individual characters"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore {
    pub score: Option<u8>,
    /// The reply was outside 0..=4 and was clamped.
    pub flagged: bool,
    pub raw: Option<String>,
}

fn first_integer(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |k| start + k);
    let negative = start > 0 && bytes[start - 1] == b'-';
    let v: i64 = text[start..end].parse().ok()?;
    Some(if negative { -v } else { v })
}

/// One 0-4 Likert judgement of `image` against `prompt`.
pub fn rubric_judge(
    image: &Path,
    prompt: &str,
    rubric_id: &str,
    gateway: &ModelGateway,
) -> Result<RubricScore, MetricError> {
    let (_, aspect) = RUBRICS
        .iter()
        .find(|(id, _)| *id == rubric_id)
        .ok_or_else(|| MetricError::UnknownRubric(rubric_id.to_string()))?;
    let text = format!(
        "Score from 0 to 4 how well the image matches the prompt with respect to {aspect}. \
0 means no match and 4 a perfect match.\nPrompt: {prompt}\nReply with the integer only."
    );
    let request = GatewayRequest::multimodal(
        gateway.models().multimodal.clone(),
        vec![Message::user(text)],
        vec![ImageRef::from_file(image)?],
    );
    let reply = match gateway.call(&request).and_then(|r| r.into_text()) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("rubric judge unavailable: {e}");
            return Ok(RubricScore { score: None, flagged: false, raw: None });
        }
    };
    Ok(match first_integer(&reply) {
        Some(v) => RubricScore {
            score: Some(v.clamp(0, 4) as u8),
            flagged: !(0..=4).contains(&v),
            raw: None,
        },
        None => RubricScore { score: None, flagged: false, raw: Some(reply) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub value: f64,
    pub source: String,
}

/// Metric values computed elsewhere, such as embedding-based consistency
/// scores.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedScores {
    pub source: String,
    pub scores: BTreeMap<String, f64>,
}

/// Reads either `{"source": .., "scores": {metric: value}}` or a bare
/// `{metric: value}` object, labelled with the file name.
pub fn load_ingested(path: &Path) -> Result<IngestedScores, MetricError> {
    let bad = |reason: String| MetricError::BadIngest {
        path: path.to_path_buf(),
        reason,
    };
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| bad(e.to_string()))?;
    let default_source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (source, map) = match v.get("scores") {
        Some(s) => (
            v.get("source")
                .and_then(|s| s.as_str())
                .map(String::from)
                .unwrap_or(default_source),
            s,
        ),
        None => (default_source, &v),
    };
    let obj = map.as_object().ok_or_else(|| bad("expected an object of scores".into()))?;
    let mut scores = BTreeMap::new();
    for (k, val) in obj {
        let x = val
            .as_f64()
            .ok_or_else(|| bad(format!("{k} is not a number")))?;
        scores.insert(k.clone(), x);
    }
    Ok(IngestedScores { source, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub story_id: String,
    pub count_accuracy: Option<f64>,
    pub layout_iou: Option<f64>,
    pub coverage: Option<f64>,
    pub overlap: Option<f64>,
    pub occm: Option<f64>,
    pub bps: Option<f64>,
    pub readability_score: Option<f64>,
    #[serde(default)]
    pub readability: Option<ReadabilityRecord>,
    #[serde(default)]
    pub external: BTreeMap<String, ExternalScore>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn empty(story_id: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            story_id: story_id.into(),
            count_accuracy: None,
            layout_iou: None,
            coverage: None,
            overlap: None,
            occm: None,
            bps: None,
            readability_score: None,
            readability: None,
            external: BTreeMap::new(),
            notes: vec![],
        }
    }

    pub fn set_layout(&mut self, s: LayoutScores) {
        self.count_accuracy = Some(s.count_accuracy);
        self.layout_iou = Some(s.layout_iou);
        self.coverage = Some(s.coverage);
        self.overlap = Some(s.overlap);
    }

    pub fn set_readability(&mut self, r: ReadabilityRecord) {
        self.readability_score = Some(r.score as f64);
        self.readability = Some(r);
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-metric means over the stories that have the metric, with ingested
/// scores merged in. A metric name given by two ingestion files is an error.
pub fn aggregate(reports: &[EvalReport], ingested: &[IngestedScores]) -> Result<EvalReport, MetricError> {
    let mut out = EvalReport::empty("aggregate");
    out.count_accuracy = mean(reports.iter().map(|r| r.count_accuracy));
    out.layout_iou = mean(reports.iter().map(|r| r.layout_iou));
    out.coverage = mean(reports.iter().map(|r| r.coverage));
    out.overlap = mean(reports.iter().map(|r| r.overlap));
    out.occm = mean(reports.iter().map(|r| r.occm));
    out.bps = mean(reports.iter().map(|r| r.bps));
    out.readability_score = mean(reports.iter().map(|r| r.readability_score));
    if let [only] = reports {
        out.readability = only.readability.clone();
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for file in ingested {
        for k in file.scores.keys() {
            *seen.entry(k).or_default() += 1;
        }
    }
    let dups: Vec<String> = seen
        .iter()
        .filter(|(_, &n)| n > 1)
        .map(|(k, _)| k.to_string())
        .collect();
    if !dups.is_empty() {
        return Err(MetricError::DuplicateExternal(dups));
    }
    for file in ingested {
        for (k, &value) in &file.scores {
            out.external.insert(
                k.clone(),
                ExternalScore {
                    value,
                    source: file.source.clone(),
                },
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub stories: Vec<EvalReport>,
    pub aggregate: EvalReport,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |x| format!("{:.2}%", x * 100.0))
}

fn num(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |x| format!("{x:.2}"))
}

/// Plain-text table: one row per story and an aggregate row, then ingested
/// scores.
pub fn report_table(summary: &EvalSummary) -> String {
    let header = ["Story", "Count", "IoU", "Cov.", "Ovl.", "OCCM", "Bubble", "Read."];
    let row = |r: &EvalReport| {
        vec![
            r.story_id.clone(),
            pct(r.count_accuracy),
            pct(r.layout_iou),
            pct(r.coverage),
            pct(r.overlap),
            num(r.occm),
            pct(r.bps),
            num(r.readability_score),
        ]
    };
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    rows.extend(summary.stories.iter().map(row));
    rows.push(row(&summary.aggregate));
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                if c == 0 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 || i == rows.len() - 2 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    if !summary.aggregate.external.is_empty() {
        out.push_str("\nExternal scores\n");
        for (k, v) in &summary.aggregate.external {
            out.push_str(&format!("{k}: {} ({})\n", v.value, v.source));
        }
    }
    out
}

/// A story with its target page structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTask {
    pub story_id: String,
    pub prompt: String,
    #[serde(default)]
    pub characters: Vec<String>,
    pub page_count: usize,
    pub panel_counts: Vec<usize>,
    pub target_layouts: Vec<Layout>,
    /// Reference text for the readability judge; the prompt when absent.
    #[serde(default)]
    pub ground_truth: Option<String>,
}

impl BenchTask {
    pub fn validate(&self, grid_resolution: u32) -> Result<(), MetricError> {
        let invalid = |reason: String| MetricError::InvalidTask {
            story_id: self.story_id.clone(),
            reason,
        };
        if self.panel_counts.len() != self.page_count || self.target_layouts.len() != self.page_count {
            return Err(invalid("page_count, panel_counts and target_layouts disagree".into()));
        }
        for (i, (l, &n)) in self.target_layouts.iter().zip(&self.panel_counts).enumerate() {
            if l.len() != n {
                return Err(invalid(format!("page {i} has {} panels, expected {n}", l.len())));
            }
            if !is_projected(l, grid_resolution) {
                return Err(invalid(format!("page {i} target layout is not projected")));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> &str {
        self.ground_truth.as_deref().unwrap_or(&self.prompt)
    }

    pub fn digest(&self) -> String {
        crate::digest::json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub schema_version: u32,
    pub tasks: Vec<BenchTask>,
}

impl TaskFile {
    pub fn load(path: &Path, grid_resolution: u32) -> Result<Self, MetricError> {
        let file: TaskFile = crate::fsutil::read_json(path)?;
        for t in &file.tasks {
            t.validate(grid_resolution)?;
        }
        Ok(file)
    }
}

/// Builds target layouts for a story with the layout agent, one critique
/// pass per page, and projection.
pub fn build_bench_task(
    story_id: &str,
    prompt: &str,
    characters: &[String],
    config: &ProjectConfig,
    gateway: &ModelGateway,
) -> Result<BenchTask, LayoutError> {
    let mut layouts = vec![];
    let mut counts = vec![];
    for page in 0..config.page_count {
        let c = config.layout_constraints(page);
        let context = format!("{}\n\nPage {} of {}.", prompt.trim(), page + 1, config.page_count);
        let generated = generate_layout(page, &context, &c, gateway)?;
        let refined = refine_layout(&generated.layout, &context, &c, gateway, config.refine_rounds);
        layouts.push(project(&refined.layout, &c)?);
        counts.push(c.panel_count);
    }
    Ok(BenchTask {
        story_id: story_id.to_string(),
        prompt: prompt.to_string(),
        characters: characters.to_vec(),
        page_count: config.page_count,
        panel_counts: counts,
        target_layouts: layouts,
        ground_truth: None,
    })
}

/// Inputs to [`run_eval`] beyond the tasks and outputs.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Recover generated layouts from page pixels instead of manifests.
    pub extract_layouts: bool,
    /// Run the readability judge on stories with ground truth.
    pub readability: bool,
    pub bps_csv: Option<PathBuf>,
    pub counts_csv: Option<PathBuf>,
    pub ingest: Vec<PathBuf>,
    pub grid_resolution: u32,
}

/// The manifest directory of a story: `<outputs>/<story>/` or
/// `<outputs>/<story>/out/`.
pub fn story_output_dir(outputs: &Path, story_id: &str) -> Option<PathBuf> {
    let base = outputs.join(story_id);
    [base.clone(), base.join("out")]
        .into_iter()
        .find(|d| d.join("manifest.json").is_file())
}

fn generated_layouts(dir: &Path, options: &EvalOptions) -> Result<(Vec<Layout>, Vec<PathBuf>), String> {
    let manifest = crate::compose::ComicManifest::load(dir).map_err(|e| format!("manifest: {e}"))?;
    let mut layouts = vec![];
    let mut images = vec![];
    for page in &manifest.pages {
        let path = dir.join(&page.file);
        if options.extract_layouts {
            let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let g = options.grid_resolution.max(1);
            layouts.push(crate::layout::extract_layout(&img, page.index, g).map_err(|e| e.to_string())?);
        } else {
            layouts.push(page.layout.clone());
        }
        images.push(path);
    }
    Ok((layouts, images))
}

fn eval_story(
    task: &BenchTask,
    outputs: &Path,
    options: &EvalOptions,
    bps_rows: &[BpsRecord],
    count_rows: &[CountRecord],
    gateway: &ModelGateway,
) -> EvalReport {
    let mut r = EvalReport::empty(&task.story_id);
    let bps_rows: Vec<BpsRecord> = bps_rows.iter().filter(|b| b.story_id == task.story_id).cloned().collect();
    r.bps = bps(&bps_rows);
    let count_rows: Vec<CountRecord> =
        count_rows.iter().filter(|c| c.story_id == task.story_id).cloned().collect();
    r.occm = mean_occm(&count_rows);
    let Some(dir) = story_output_dir(outputs, &task.story_id) else {
        r.notes.push("output absent".into());
        return r;
    };
    let (layouts, images) = match generated_layouts(&dir, options) {
        Ok(x) => x,
        Err(e) => {
            r.notes.push(format!("output unreadable: {e}"));
            return r;
        }
    };
    match layout_metrics(&task.target_layouts, &layouts) {
        Ok(s) => r.set_layout(s),
        Err(e) => r.notes.push(e.to_string()),
    }
    if options.readability && task.ground_truth.is_some() {
        match readability_judge(&images, task.ground_truth(), gateway) {
            Ok(ReadabilityOutcome { record: Some(rec), .. }) => r.set_readability(rec),
            Ok(ReadabilityOutcome { raw, .. }) => {
                r.notes.push(format!("readability unparseable: {}", raw.unwrap_or_default()))
            }
            Err(e) => r.notes.push(format!("readability: {e}")),
        }
    }
    r
}

/// Scores every task against `<outputs>/<story_id>`. Stories are scored
/// concurrently; a missing output leaves that story's metrics absent.
pub fn run_eval(
    tasks: &TaskFile,
    outputs: &Path,
    options: &EvalOptions,
    gateway: &ModelGateway,
) -> Result<EvalSummary, MetricError> {
    use rayon::prelude::*;
    let bps_rows = match &options.bps_csv {
        Some(p) => read_bps_csv(p)?,
        None => vec![],
    };
    let count_rows = match &options.counts_csv {
        Some(p) => read_count_csv(p)?,
        None => vec![],
    };
    let ingested = options
        .ingest
        .iter()
        .map(|p| load_ingested(p))
        .collect::<Result<Vec<_>, _>>()?;
    let stories: Vec<EvalReport> = tasks
        .tasks
        .par_iter()
        .map(|t| eval_story(t, outputs, options, &bps_rows, &count_rows, gateway))
        .collect();
    let aggregate = aggregate(&stories, &ingested)?;
    Ok(EvalSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        stories,
        aggregate,
    })
}

/// Writes `report.json` and `report.txt` into `dir`; returns the JSON path.
pub fn write_report(summary: &EvalSummary, dir: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("report.json");
    crate::fsutil::write_json(&path, summary)?;
    crate::fsutil::write_atomic(&dir.join("report.txt"), report_table(summary).as_bytes())?;
    Ok(path)
}
