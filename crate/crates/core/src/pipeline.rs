//! Project directories and the end-to-end generation pipeline.
//!
//! A project is a directory of plain files. Every stage records a digest of
//! its inputs in `state.json`; a stage whose digest is unchanged and whose
//! outputs are still on disk is skipped, so re-running an unchanged project
//! makes no gateway calls and rewrites identical bytes.
//!
//! ```text
//! config.json  prompt.txt  plan.json  user_refs.json  templates.json
//! layouts/user/page_###.json     user-supplied layouts
//! layouts/page_###.json          projected layout and its source
//! cache/sections/<key>/          section memories
//! panels/page_###/<panel>.png    rendered panels, plus assets.json
//! pages/page_###.raw.png         composed, unlettered
//! pages/page_###.anchors.json    detected anchors
//! letters/page_###.json          user-edited lettering
//! out/page_###.png  out/page_###.letter.json  out/manifest.json  out/comic.cbz
//! state.json  events.jsonl  task.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{self, ComicArtifact, PageArtifact};
use crate::digest::json_digest;
use crate::gateway::{GatewayError, ModelGateway};
use crate::layout::{
    generate_layout, project, refine_layout, retrieve_template, GeneratedLayout, Layout,
    LayoutError, LayoutSource, TemplateLibrary,
};
use crate::lettering::{self, AnchorBox, AnchorDetection, TextElement};
use crate::memory::{self, SectionMemory, UserRefs};
use crate::metabench::{BenchTask, TaskFile, TASK_SCHEMA_VERSION};
use crate::render::{self, PanelAsset, RenderBackend, RenderError, StubBackend};
use crate::story::{self, PageSpec, ProjectConfig, StoryError, StoryPlan};

/// Broad error classes; the command line maps them to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Validation,
    Gateway,
    Io,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: impl Into<String>, kind: ErrorKind, message: impl ToString) -> Self {
        Self {
            stage: stage.into(),
            kind,
            message: message.to_string(),
        }
    }

    pub fn validation(stage: impl Into<String>, message: impl ToString) -> Self {
        Self::new(stage, ErrorKind::Validation, message)
    }

    fn io(stage: &str, e: impl ToString) -> Self {
        Self::new(stage, ErrorKind::Io, e)
    }
}

fn story_err(e: StoryError) -> PipelineError {
    let kind = match &e {
        StoryError::Gateway(_) | StoryError::Unparseable { .. } => ErrorKind::Gateway,
        StoryError::Io(_) => ErrorKind::Io,
        _ => ErrorKind::Validation,
    };
    PipelineError::new("plan", kind, e)
}

fn layout_err(e: LayoutError) -> PipelineError {
    let kind = match &e {
        LayoutError::Io(_) => ErrorKind::Io,
        _ => ErrorKind::Validation,
    };
    PipelineError::new("layout", kind, e)
}

fn memory_err(e: memory::MemoryError) -> PipelineError {
    let kind = match &e {
        memory::MemoryError::Gateway { .. } => ErrorKind::Gateway,
        memory::MemoryError::Io(_) => ErrorKind::Io,
        _ => ErrorKind::Validation,
    };
    PipelineError::new("memory", kind, e)
}

/// File locations inside a project directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectPaths {
    pub root: PathBuf,
}

fn page_name(i: usize) -> String {
    format!("page_{:03}", i + 1)
}

impl ProjectPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn prompt(&self) -> PathBuf {
        self.root.join("prompt.txt")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn user_refs(&self) -> PathBuf {
        self.root.join("user_refs.json")
    }
    pub fn templates(&self) -> PathBuf {
        self.root.join("templates.json")
    }
    pub fn user_layout(&self, i: usize) -> PathBuf {
        self.root.join("layouts/user").join(format!("{}.json", page_name(i)))
    }
    pub fn layout(&self, i: usize) -> PathBuf {
        self.root.join("layouts").join(format!("{}.json", page_name(i)))
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn panel_dir(&self, i: usize) -> PathBuf {
        self.root.join("panels").join(page_name(i))
    }
    pub fn assets(&self, i: usize) -> PathBuf {
        self.panel_dir(i).join("assets.json")
    }
    pub fn raw_page(&self, i: usize) -> PathBuf {
        self.root.join("pages").join(format!("{}.raw.png", page_name(i)))
    }
    pub fn raw_artifact(&self, i: usize) -> PathBuf {
        self.root.join("pages").join(format!("{}.json", page_name(i)))
    }
    pub fn anchors(&self, i: usize) -> PathBuf {
        self.root.join("pages").join(format!("{}.anchors.json", page_name(i)))
    }
    pub fn user_letters(&self, i: usize) -> PathBuf {
        self.root.join("letters").join(format!("{}.json", page_name(i)))
    }
    pub fn out_dir(&self) -> PathBuf {
        self.root.join("out")
    }
    pub fn page(&self, i: usize) -> PathBuf {
        self.out_dir().join(compose::page_file_name(i))
    }
    pub fn page_artifact(&self, i: usize) -> PathBuf {
        self.out_dir().join(format!("{}.json", page_name(i)))
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }
    pub fn task(&self) -> PathBuf {
        self.root.join("task.json")
    }
}

/// Stage digests, edit counters and re-render variants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    /// Stage key (`plan`, `layout/0`, `render/0/p0_1`, ...) to input digest.
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
    #[serde(default)]
    pub version: u64,
    #[serde(default)]
    pub page_versions: BTreeMap<usize, u64>,
    /// Re-render count per `page/panel`; feeds the panel seed.
    #[serde(default)]
    pub variants: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventStatus {
    Started,
    Done,
    Skipped,
    Flagged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub stage: String,
    #[serde(default)]
    pub page: Option<usize>,
    #[serde(default)]
    pub panel: Option<String>,
    pub status: EventStatus,
    #[serde(default)]
    pub message: String,
}

/// Append-only, totally ordered event log mirrored to `events.jsonl`.
pub struct EventLog {
    path: PathBuf,
    events: Mutex<Vec<Event>>,
    changed: Condvar,
}

impl EventLog {
    pub fn open(path: PathBuf) -> std::io::Result<Self> {
        let events = match std::fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![],
            Err(e) => return Err(e),
        };
        Ok(Self {
            path,
            events: Mutex::new(events),
            changed: Condvar::new(),
        })
    }

    pub fn emit(
        &self,
        stage: &str,
        page: Option<usize>,
        panel: Option<&str>,
        status: EventStatus,
        message: impl Into<String>,
    ) -> Event {
        let mut events = self.events.lock().unwrap();
        let event = Event {
            seq: events.last().map_or(1, |e| e.seq + 1),
            stage: stage.to_string(),
            page,
            panel: panel.map(String::from),
            status,
            message: message.into(),
        };
        let line = serde_json::to_string(&event).expect("event serializes");
        let written = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            log::warn!("event log write failed: {e}");
        }
        events.push(event.clone());
        self.changed.notify_all();
        event
    }

    pub fn since(&self, seq: u64) -> Vec<Event> {
        let events = self.events.lock().unwrap();
        events.iter().filter(|e| e.seq > seq).cloned().collect()
    }

    /// Events after `seq`, waiting up to `timeout` for the first one.
    pub fn wait_since(&self, seq: u64, timeout: Duration) -> Vec<Event> {
        let events = self.events.lock().unwrap();
        let (events, _) = self
            .changed
            .wait_timeout_while(events, timeout, |ev| ev.last().is_none_or(|e| e.seq <= seq))
            .unwrap();
        events.iter().filter(|e| e.seq > seq).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.events.lock().unwrap().last().map_or(0, |e| e.seq)
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Plan,
    Memory,
    Layout,
    Render,
    Compose,
    Letter,
    Comic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PageOutput {
    Layout(GeneratedLayout),
    Panels(Vec<PanelAsset>),
    Page(PageArtifact),
}

/// What [`Project::run_until`] produced for its last stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutput {
    Plan(StoryPlan),
    Memory(Vec<SectionMemory>),
    Pages(Vec<PageOutput>),
    Comic(ComicArtifact),
}

/// Where the story comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum StoryInput {
    Prompt(String),
    Plan(StoryPlan),
}

/// Optional user controls supplied before generation.
#[derive(Debug, Clone, Default)]
pub struct UserInputs {
    pub layouts: BTreeMap<usize, Layout>,
    pub refs: Option<UserRefs>,
    pub templates: Option<TemplateLibrary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub layout: bool,
    pub render: bool,
    pub compose: bool,
    pub letter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageState {
    pub index: usize,
    pub version: u64,
    pub layout: Option<Layout>,
    pub layout_source: Option<LayoutSource>,
    pub assets: Vec<PanelAsset>,
    pub artifact: Option<PageArtifact>,
    pub elements: Vec<TextElement>,
    pub flags: StageFlags,
}

/// Snapshot of everything a client needs to show a project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub version: u64,
    pub config: ProjectConfig,
    pub plan: Option<StoryPlan>,
    pub memories: Vec<SectionMemory>,
    pub pages: Vec<PageState>,
    pub plan_done: bool,
    pub comic_done: bool,
    pub last_event: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PanelAssets {
    assets: Vec<PanelAsset>,
    #[serde(default)]
    flags: Vec<String>,
}

pub struct Project {
    pub paths: ProjectPaths,
    pub config: ProjectConfig,
    pub events: EventLog,
    state: Mutex<StageState>,
}

fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> Result<(), PipelineError> {
    crate::fsutil::write_json(path, value).map_err(|e| PipelineError::io(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    crate::fsutil::read_json(path).ok()
}

impl Project {
    /// Creates or updates a project directory from its inputs.
    pub fn init(
        root: impl Into<PathBuf>,
        config: &ProjectConfig,
        story: &StoryInput,
        user: &UserInputs,
    ) -> Result<Self, PipelineError> {
        config
            .validate()
            .map_err(|e| PipelineError::validation("config", e))?;
        let paths = ProjectPaths::new(root);
        std::fs::create_dir_all(&paths.root).map_err(|e| PipelineError::io("init", e))?;
        write_json("init", &paths.config(), config)?;
        match story {
            StoryInput::Prompt(p) => {
                if p.trim().is_empty() {
                    return Err(PipelineError::validation("plan", StoryError::EmptyPrompt));
                }
                crate::fsutil::write_atomic(&paths.prompt(), p.as_bytes())
                    .map_err(|e| PipelineError::io("init", e))?;
            }
            StoryInput::Plan(plan) => {
                plan.validate(config).map_err(story_err)?;
                let _ = std::fs::remove_file(paths.prompt());
                write_json("init", &paths.plan(), plan)?;
            }
        }
        for (&i, layout) in &user.layouts {
            if i >= config.page_count {
                return Err(PipelineError::validation(
                    "layout",
                    format!("user layout for page {i} but the project has {} pages", config.page_count),
                ));
            }
            layout.validate().map_err(layout_err)?;
            write_json("init", &paths.user_layout(i), layout)?;
        }
        if let Some(refs) = &user.refs {
            write_json("init", &paths.user_refs(), refs)?;
        }
        if let Some(t) = &user.templates {
            t.validate(config.grid_resolution).map_err(layout_err)?;
            write_json("init", &paths.templates(), t)?;
        }
        Self::open(paths.root)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let paths = ProjectPaths::new(root);
        let config = ProjectConfig::load(&paths.config())
            .map_err(|e| PipelineError::validation("config", e))?;
        let state = read_json(&paths.state()).unwrap_or_default();
        let events = EventLog::open(paths.events()).map_err(|e| PipelineError::io("events", e))?;
        Ok(Self {
            paths,
            config,
            events,
            state: Mutex::new(state),
        })
    }

    fn digest_is(&self, key: &str, digest: &str) -> bool {
        self.state.lock().unwrap().digests.get(key).map(String::as_str) == Some(digest)
    }

    fn set_digest(&self, key: String, digest: String) -> Result<(), PipelineError> {
        let mut s = self.state.lock().unwrap();
        s.digests.insert(key, digest);
        write_json("state", &self.paths.state(), &*s)
    }

    fn clear_digests(&self, pred: impl Fn(&str) -> bool) -> Result<(), PipelineError> {
        let mut s = self.state.lock().unwrap();
        s.digests.retain(|k, _| !pred(k));
        write_json("state", &self.paths.state(), &*s)
    }

    fn bump_version(&self, page: Option<usize>) -> Result<u64, PipelineError> {
        let mut s = self.state.lock().unwrap();
        s.version += 1;
        if let Some(i) = page {
            *s.page_versions.entry(i).or_default() += 1;
        }
        let v = s.version;
        write_json("state", &self.paths.state(), &*s)?;
        Ok(v)
    }

    pub fn version(&self) -> u64 {
        self.state.lock().unwrap().version
    }

    pub fn stage_state(&self) -> StageState {
        self.state.lock().unwrap().clone()
    }

    fn variant(&self, page: usize, panel: &str) -> u32 {
        let s = self.state.lock().unwrap();
        s.variants.get(&format!("{page}/{panel}")).copied().unwrap_or(0)
    }

    fn user_refs(&self) -> UserRefs {
        read_json(&self.paths.user_refs()).unwrap_or_default()
    }

    fn check_page(&self, i: usize) -> Result<(), PipelineError> {
        if i >= self.config.page_count {
            return Err(PipelineError::validation(
                "page",
                format!("page {i} out of range (project has {})", self.config.page_count),
            ));
        }
        Ok(())
    }

    /// Runs the planner unless a plan with the same inputs exists.
    pub fn plan(&self, gateway: &ModelGateway) -> Result<StoryPlan, PipelineError> {
        let Ok(prompt) = std::fs::read_to_string(self.paths.prompt()) else {
            let plan = StoryPlan::load(&self.paths.plan()).map_err(story_err)?;
            plan.validate(&self.config).map_err(story_err)?;
            return Ok(plan);
        };
        let c = &self.config;
        let digest = json_digest(&(&prompt, c.page_count, (0..c.page_count).map(|i| c.panel_count(i)).collect::<Vec<_>>(), &c.style, &c.language));
        if self.digest_is("plan", &digest) {
            if let Ok(plan) = StoryPlan::load(&self.paths.plan()) {
                self.events.emit("plan", None, None, EventStatus::Skipped, "");
                return Ok(plan);
            }
        }
        self.events.emit("plan", None, None, EventStatus::Started, "");
        let plan = story::plan_story(&prompt, c, gateway).map_err(|e| {
            self.events.emit("plan", None, None, EventStatus::Failed, e.to_string());
            story_err(e)
        })?;
        plan.save(&self.paths.plan()).map_err(|e| PipelineError::io("plan", e))?;
        self.set_digest("plan".into(), digest)?;
        self.events.emit("plan", None, None, EventStatus::Done, "");
        Ok(plan)
    }

    /// Loads or builds the memory of every section, in plan order.
    pub fn memories(
        &self,
        plan: &StoryPlan,
        gateway: &ModelGateway,
    ) -> Result<BTreeMap<String, SectionMemory>, PipelineError> {
        let (sections, warnings) = story::extract_sections(plan).map_err(story_err)?;
        for w in warnings {
            self.events.emit("memory", None, None, EventStatus::Flagged, w);
        }
        let refs = self.user_refs();
        let mut out = BTreeMap::new();
        for s in &sections {
            let (m, status) =
                memory::load_or_build(s, &refs, &self.config.style, &self.paths.cache(), gateway)
                    .map_err(memory_err)?;
            let status = match status {
                memory::CacheStatus::Hit => EventStatus::Skipped,
                _ => EventStatus::Done,
            };
            self.events.emit("memory", None, Some(&s.section_id), status, "");
            for w in &m.warnings {
                self.events.emit("memory", None, Some(&s.section_id), EventStatus::Flagged, w.clone());
            }
            out.insert(s.section_id.clone(), m);
        }
        Ok(out)
    }

    /// Reads the current projected layout of page `i`.
    pub fn layout(&self, i: usize) -> Option<GeneratedLayout> {
        read_json(&self.paths.layout(i))
    }

    /// Chooses the page layout: the user's layout when given, else a library
    /// template, else the layout agent with critique rounds. The result is
    /// projected and its panels take the plan's ids in reading order.
    pub fn layout_page(
        &self,
        i: usize,
        plan: &StoryPlan,
        gateway: &ModelGateway,
    ) -> Result<GeneratedLayout, PipelineError> {
        let page = &plan.pages[i];
        let c = self.config.layout_constraints(i);
        let user: Option<Layout> = read_json(&self.paths.user_layout(i));
        let templates: Option<TemplateLibrary> = read_json(&self.paths.templates());
        let ids: Vec<&str> = page.panels.iter().map(|p| p.panel_id.as_str()).collect();
        let context = page_context(page);
        let digest = json_digest(&(
            &context,
            &ids,
            &c,
            &user,
            &templates,
            self.config.refine_rounds,
        ));
        let key = format!("layout/{i}");
        if self.digest_is(&key, &digest) {
            if let Some(g) = self.layout(i) {
                self.events.emit("layout", Some(i), None, EventStatus::Skipped, "");
                return Ok(g);
            }
        }
        self.events.emit("layout", Some(i), None, EventStatus::Started, "");
        let tags: Vec<String> = context
            .split(|ch: char| !ch.is_alphanumeric())
            .filter(|w| w.len() > 2)
            .map(str::to_lowercase)
            .collect();
        let generated = if let Some(u) = user {
            GeneratedLayout {
                layout: project(&u, &c).map_err(layout_err)?,
                source: LayoutSource::User,
                fallback_reason: None,
            }
        } else if let Some(t) = templates.as_ref().and_then(|lib| retrieve_template(lib, c.panel_count, &tags)) {
            GeneratedLayout {
                layout: project(&t, &c).map_err(layout_err)?,
                source: LayoutSource::Template,
                fallback_reason: None,
            }
        } else {
            let g = generate_layout(i, &context, &c, gateway).map_err(layout_err)?;
            if let Some(reason) = &g.fallback_reason {
                self.events.emit("layout", Some(i), None, EventStatus::Flagged, format!("fallback grid: {reason}"));
            }
            let refined = refine_layout(&g.layout, &context, &c, gateway, self.config.refine_rounds);
            GeneratedLayout {
                layout: project(&refined.layout, &c).map_err(layout_err)?,
                ..g
            }
        };
        let mut layout = generated.layout;
        layout.page_index = i;
        let generated = GeneratedLayout {
            layout: assign_ids(layout, &ids),
            ..generated
        };
        write_json("layout", &self.paths.layout(i), &generated)?;
        self.set_digest(key, digest)?;
        self.events.emit("layout", Some(i), None, EventStatus::Done, format!("{:?}", generated.source).to_lowercase());
        Ok(generated)
    }

    fn assets(&self, i: usize) -> PanelAssets {
        read_json(&self.paths.assets(i)).unwrap_or_default()
    }

    /// Renders every panel of page `i` whose inputs changed, up to
    /// `max_parallel_renders` at a time. A failed render is replaced by a stub
    /// panel and the page is flagged.
    pub fn render_page(
        &self,
        i: usize,
        plan: &StoryPlan,
        layout: &Layout,
        memories: &BTreeMap<String, SectionMemory>,
        backend: &dyn RenderBackend,
    ) -> Result<Vec<PanelAsset>, PipelineError> {
        let page = &plan.pages[i];
        let refs = self.user_refs();
        let previous = self.assets(i);
        let dir = self.paths.panel_dir(i);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io("render", e))?;
        struct Job {
            panel_id: String,
            prompt: render::PanelPrompt,
            refs: Vec<memory::RefAsset>,
            dims: (u32, u32),
            digest: String,
        }
        let mut jobs = vec![];
        for panel in &page.panels {
            let m = memories.get(&panel.section_id).ok_or_else(|| {
                PipelineError::validation("render", format!("no memory for section {}", panel.section_id))
            })?;
            let variant = self.variant(i, &panel.panel_id);
            let prompt = render::build_panel_prompt(i, panel, layout, m, &self.config, variant)
                .map_err(|e| PipelineError::validation("render", e))?;
            let bundle = memory::compose_ref(m, panel, &refs, self.config.max_refs);
            let region = layout.panel(&panel.panel_id).expect("prompt built").region;
            let dims = render::panel_dims(&region, self.config.page_px, render::MIN_SIDE_PX, render::SIDE_MULTIPLE);
            let ref_digests: Vec<String> = bundle.iter().map(|r| r.digest()).collect();
            let digest = json_digest(&(prompt.digest(), &ref_digests, dims, backend.id()));
            jobs.push(Job {
                panel_id: panel.panel_id.clone(),
                prompt,
                refs: bundle,
                dims,
                digest,
            });
        }
        let clean = |job: &Job| -> Option<PanelAsset> {
            if !self.digest_is(&format!("render/{i}/{}", job.panel_id), &job.digest) {
                return None;
            }
            let a = previous.assets.iter().find(|a| a.panel_id == job.panel_id)?;
            let sha = crate::digest::file_sha256(&a.image_path).ok()?;
            (sha == a.image_sha256).then(|| a.clone())
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.max_parallel_renders.max(1))
            .build()
            .map_err(|e| PipelineError::io("render", e))?;
        let results: Vec<(PanelAsset, Option<String>, bool)> = pool.install(|| {
            jobs.par_iter()
                .map(|job| -> Result<_, PipelineError> {
                    if let Some(a) = clean(job) {
                        return Ok((a, None, true));
                    }
                    let out = dir.join(format!("{}.png", job.panel_id));
                    match render::render_panel(&job.prompt, &job.refs, job.dims, backend, &out) {
                        Ok(a) => Ok((a, None, false)),
                        Err(e @ (RenderError::Gateway { .. } | RenderError::BadImage(_))) => {
                            let a = render::render_panel(&job.prompt, &job.refs, job.dims, &StubBackend, &out)
                                .map_err(|e| PipelineError::io("render", e))?;
                            Ok((a, Some(format!("stub_substituted:{}: {e}", job.panel_id)), false))
                        }
                        Err(e) => Err(PipelineError::io("render", e)),
                    }
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut flags = vec![];
        let mut assets = vec![];
        for (job, (asset, flag, skipped)) in jobs.iter().zip(results) {
            let status = if skipped { EventStatus::Skipped } else { EventStatus::Done };
            self.events.emit("render", Some(i), Some(&job.panel_id), status, "");
            match flag {
                // Left without a digest so the next run tries the backend again.
                Some(f) => {
                    self.events.emit("render", Some(i), Some(&job.panel_id), EventStatus::Flagged, f.clone());
                    flags.push(f);
                }
                None if !skipped => {
                    self.set_digest(format!("render/{i}/{}", job.panel_id), job.digest.clone())?;
                }
                None => {}
            }
            assets.push(asset);
        }
        flags.sort();
        flags.dedup();
        write_json("render", &self.paths.assets(i), &PanelAssets { assets: assets.clone(), flags })?;
        Ok(assets)
    }

    /// Composites page `i` into `pages/page_###.raw.png`.
    pub fn compose_page(&self, i: usize, layout: &Layout, assets: &[PanelAsset]) -> Result<PageArtifact, PipelineError> {
        let c = &self.config;
        let shas: Vec<(&str, &str)> = assets
            .iter()
            .map(|a| (a.panel_id.as_str(), a.image_sha256.as_str()))
            .collect();
        let flags = self.assets(i).flags;
        let digest = json_digest(&(layout, &shas, &flags, c.page_px, c.gutter_px, c.border_px));
        let key = format!("compose/{i}");
        if self.digest_is(&key, &digest) {
            if let Some(a) = read_json::<PageArtifact>(&self.paths.raw_artifact(i)) {
                if crate::digest::file_sha256(&a.image_path).ok().as_deref() == Some(&a.image_sha256) {
                    self.events.emit("compose", Some(i), None, EventStatus::Skipped, "");
                    return Ok(a);
                }
            }
        }
        let mut page = compose::compose_page(assets, layout, c, &self.paths.raw_page(i))
            .map_err(|e| PipelineError::io("compose", e))?;
        page.flags = flags;
        write_json("compose", &self.paths.raw_artifact(i), &page)?;
        self.set_digest(key, digest)?;
        self.events.emit("compose", Some(i), None, EventStatus::Done, "");
        Ok(page)
    }

    fn anchors(&self, i: usize, raw: &PageArtifact, plan_page: &PageSpec, gateway: &ModelGateway) -> Result<AnchorDetection, PipelineError> {
        #[derive(Serialize, Deserialize)]
        struct Stored {
            anchors: Vec<AnchorBox>,
            degraded: bool,
            warnings: Vec<String>,
        }
        let digest = json_digest(&(&raw.image_sha256, &raw.placements, plan_page));
        let key = format!("anchors/{i}");
        if self.digest_is(&key, &digest) {
            if let Some(s) = read_json::<Stored>(&self.paths.anchors(i)) {
                return Ok(AnchorDetection {
                    anchors: s.anchors,
                    degraded: s.degraded,
                    warnings: s.warnings,
                });
            }
        }
        let d = lettering::detect_anchors(raw, plan_page, gateway);
        write_json(
            "letter",
            &self.paths.anchors(i),
            &Stored {
                anchors: d.anchors.clone(),
                degraded: d.degraded,
                warnings: d.warnings.clone(),
            },
        )?;
        self.set_digest(key, digest)?;
        Ok(d)
    }

    /// Places and draws lettering on page `i`. User-edited letters, when
    /// present, replace automatic placement.
    pub fn letter_page(
        &self,
        i: usize,
        plan: &StoryPlan,
        raw: &PageArtifact,
        gateway: &ModelGateway,
    ) -> Result<PageArtifact, PipelineError> {
        let plan_page = &plan.pages[i];
        let user: Option<Vec<TextElement>> = read_json(&self.paths.user_letters(i));
        let c = &self.config;
        let digest = json_digest(&(
            &raw.image_sha256,
            &raw.flags,
            plan_page,
            &user,
            c.font_px,
            c.min_font_px,
            &c.placement_weights,
        ));
        let key = format!("letter/{i}");
        if self.digest_is(&key, &digest) {
            if let Some(a) = read_json::<PageArtifact>(&self.paths.page_artifact(i)) {
                if crate::digest::file_sha256(&a.image_path).ok().as_deref() == Some(&a.image_sha256) {
                    self.events.emit("letter", Some(i), None, EventStatus::Skipped, "");
                    return Ok(a);
                }
            }
        }
        let mut extra = vec![];
        let elements = match user {
            Some(e) => e,
            None => {
                let d = self.anchors(i, raw, plan_page, gateway)?;
                if d.degraded {
                    extra.push("lettering_degraded".to_string());
                    self.events.emit("letter", Some(i), None, EventStatus::Flagged, d.warnings.join("; "));
                }
                lettering::plan_lettering(raw, plan_page, &d.anchors, c)
            }
        };
        let mut page = lettering::raster_text(raw, &elements, &self.paths.page(i))
            .map_err(|e| PipelineError::io("letter", e))?;
        page.flags.extend(extra);
        write_json("letter", &self.paths.page_artifact(i), &page)?;
        self.set_digest(key, digest)?;
        self.events.emit("letter", Some(i), None, EventStatus::Done, "");
        Ok(page)
    }

    /// Digest of the config without the gateway mode, which does not change
    /// outputs.
    pub fn config_digest(&self) -> String {
        let mut c = self.config.clone();
        c.mode = Default::default();
        json_digest(&c)
    }

    /// Writes the manifest and CBZ from the lettered pages.
    pub fn comic(&self, plan: &StoryPlan, pages: &[PageArtifact]) -> Result<ComicArtifact, PipelineError> {
        let comic = compose::compose_comic(pages, &self.config_digest(), &json_digest(plan), &self.paths.out_dir())
            .map_err(|e| PipelineError::io("comic", e))?;
        self.events.emit("comic", None, None, EventStatus::Done, "");
        Ok(comic)
    }

    /// The project's own layouts as a benchmark task.
    pub fn self_task(&self, plan: &StoryPlan) -> Result<BenchTask, PipelineError> {
        let mut layouts = vec![];
        for i in 0..self.config.page_count {
            layouts.push(
                self.layout(i)
                    .ok_or_else(|| PipelineError::validation("task", format!("page {i} has no layout")))?
                    .layout,
            );
        }
        let prompt = std::fs::read_to_string(self.paths.prompt()).unwrap_or_else(|_| {
            plan.panels()
                .map(|(_, p)| p.description.clone())
                .collect::<Vec<_>>()
                .join(" ")
        });
        let story_id = self
            .paths
            .root
            .file_name()
            .map_or("project".into(), |n| n.to_string_lossy().into_owned());
        Ok(BenchTask {
            story_id,
            prompt,
            characters: plan.sections.iter().flat_map(|s| s.characters.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
            page_count: self.config.page_count,
            panel_counts: layouts.iter().map(Layout::len).collect(),
            target_layouts: layouts,
            ground_truth: None,
        })
    }

    /// The whole pipeline. Stage outputs persist as they complete, so a
    /// failure leaves earlier stages intact for the next run.
    pub fn generate(&self, gateway: &ModelGateway, backend: &dyn RenderBackend) -> Result<ComicArtifact, PipelineError> {
        match self.run_until(Stage::Comic, None, gateway, backend)? {
            StageOutput::Comic(c) => Ok(c),
            _ => unreachable!("comic stage yields a comic"),
        }
    }

    /// Runs every stage up to and including `stage`; clean stages are
    /// skipped. `page` restricts the per-page stages to one page.
    pub fn run_until(
        &self,
        stage: Stage,
        page: Option<usize>,
        gateway: &ModelGateway,
        backend: &dyn RenderBackend,
    ) -> Result<StageOutput, PipelineError> {
        let result = self.run_inner(stage, page, gateway, backend);
        if let Err(e) = &result {
            self.events.emit(&e.stage, page, None, EventStatus::Failed, e.message.clone());
        }
        result
    }

    fn run_inner(
        &self,
        stage: Stage,
        page: Option<usize>,
        gateway: &ModelGateway,
        backend: &dyn RenderBackend,
    ) -> Result<StageOutput, PipelineError> {
        let plan = self.plan(gateway)?;
        if stage == Stage::Plan {
            return Ok(StageOutput::Plan(plan));
        }
        let memories = self.memories(&plan, gateway)?;
        if stage == Stage::Memory {
            return Ok(StageOutput::Memory(memories.into_values().collect()));
        }
        let pages = match page {
            Some(i) if stage != Stage::Comic => {
                self.check_page(i)?;
                vec![i]
            }
            _ => (0..self.config.page_count).collect(),
        };
        let mut out = vec![];
        for i in pages {
            let layout = self.layout_page(i, &plan, gateway)?;
            if stage == Stage::Layout {
                out.push(PageOutput::Layout(layout));
                continue;
            }
            let assets = self.render_page(i, &plan, &layout.layout, &memories, backend)?;
            if stage == Stage::Render {
                out.push(PageOutput::Panels(assets));
                continue;
            }
            let raw = self.compose_page(i, &layout.layout, &assets)?;
            if stage == Stage::Compose {
                out.push(PageOutput::Page(raw));
                continue;
            }
            out.push(PageOutput::Page(self.letter_page(i, &plan, &raw, gateway)?));
        }
        if stage != Stage::Comic {
            return Ok(StageOutput::Pages(out));
        }
        let pages: Vec<PageArtifact> = out
            .into_iter()
            .map(|o| match o {
                PageOutput::Page(p) => p,
                _ => unreachable!("lettered pages"),
            })
            .collect();
        let comic = self.comic(&plan, &pages)?;
        let task = TaskFile {
            schema_version: TASK_SCHEMA_VERSION,
            tasks: vec![self.self_task(&plan)?],
        };
        write_json("task", &self.paths.task(), &task)?;
        Ok(StageOutput::Comic(comic))
    }

    fn load_plan(&self) -> Result<StoryPlan, PipelineError> {
        StoryPlan::load(&self.paths.plan()).map_err(story_err)
    }

    /// Replaces the layout of page `i` with the projection of `layout` and
    /// resets every later stage of that page.
    pub fn put_layout(&self, i: usize, layout: &Layout) -> Result<(Layout, u64), PipelineError> {
        self.check_page(i)?;
        layout.validate().map_err(layout_err)?;
        let plan = self.load_plan()?;
        let c = self.config.layout_constraints(i);
        let ids: Vec<&str> = plan.pages[i].panels.iter().map(|p| p.panel_id.as_str()).collect();
        let mut projected = project(layout, &c).map_err(layout_err)?;
        projected.page_index = i;
        let projected = assign_ids(projected, &ids);
        write_json("layout", &self.paths.user_layout(i), &projected)?;
        let generated = GeneratedLayout {
            layout: projected.clone(),
            source: LayoutSource::User,
            fallback_reason: None,
        };
        write_json("layout", &self.paths.layout(i), &generated)?;
        let templates: Option<TemplateLibrary> = read_json(&self.paths.templates());
        let digest = json_digest(&(
            page_context(&plan.pages[i]),
            &ids,
            &c,
            &Some(&projected),
            &templates,
            self.config.refine_rounds,
        ));
        self.set_digest(format!("layout/{i}"), digest)?;
        self.reset_after_layout(i)?;
        let v = self.bump_version(Some(i))?;
        self.events.emit("layout", Some(i), None, EventStatus::Done, "edited");
        Ok((projected, v))
    }

    fn reset_after_layout(&self, i: usize) -> Result<(), PipelineError> {
        let render = format!("render/{i}/");
        let keys = [format!("compose/{i}"), format!("anchors/{i}"), format!("letter/{i}")];
        self.clear_digests(|k| k.starts_with(&render) || keys.iter().any(|x| x == k))
    }

    pub fn letters(&self, i: usize) -> Result<Vec<TextElement>, PipelineError> {
        self.check_page(i)?;
        Ok(read_json::<PageArtifact>(&self.paths.page_artifact(i))
            .map(|p| p.elements)
            .unwrap_or_default())
    }

    /// Replaces the lettering of page `i` and re-rasterizes it.
    pub fn put_letters(&self, i: usize, elements: &[TextElement], gateway: &ModelGateway) -> Result<(PageArtifact, u64), PipelineError> {
        self.check_page(i)?;
        let raw: PageArtifact = read_json(&self.paths.raw_artifact(i))
            .ok_or_else(|| PipelineError::validation("letter", format!("page {i} has not been composed")))?;
        validate_letters(&raw, elements).map_err(|e| PipelineError::validation("letter", e))?;
        std::fs::create_dir_all(self.paths.root.join("letters")).map_err(|e| PipelineError::io("letter", e))?;
        write_json("letter", &self.paths.user_letters(i), &elements)?;
        let plan = self.load_plan()?;
        let page = self.letter_page(i, &plan, &raw, gateway)?;
        self.refresh_comic(&plan)?;
        let v = self.bump_version(Some(i))?;
        Ok((page, v))
    }

    /// Renders one panel again with a fresh seed variant. Composition and
    /// lettering of the page are reset.
    pub fn rerender(
        &self,
        i: usize,
        panel_id: &str,
        gateway: &ModelGateway,
        backend: &dyn RenderBackend,
    ) -> Result<(PanelAsset, u64), PipelineError> {
        self.check_page(i)?;
        let plan = self.load_plan()?;
        if !plan.pages[i].panels.iter().any(|p| p.panel_id == panel_id) {
            return Err(PipelineError::validation("render", format!("page {i} has no panel {panel_id}")));
        }
        let layout = self
            .layout(i)
            .ok_or_else(|| PipelineError::validation("render", format!("page {i} has no layout")))?
            .layout;
        {
            let mut s = self.state.lock().unwrap();
            *s.variants.entry(format!("{i}/{panel_id}")).or_default() += 1;
        }
        self.clear_digests(|k| k == format!("render/{i}/{panel_id}") || k == format!("compose/{i}") || k == format!("letter/{i}"))?;
        let memories = self.memories(&plan, gateway)?;
        let assets = self.render_page(i, &plan, &layout, &memories, backend)?;
        let asset = assets.into_iter().find(|a| a.panel_id == panel_id).expect("panel rendered");
        let v = self.bump_version(Some(i))?;
        Ok((asset, v))
    }

    /// Composes and letters page `i` again from its current layout and panels,
    /// then refreshes the archive.
    pub fn recompose(
        &self,
        i: usize,
        gateway: &ModelGateway,
        backend: &dyn RenderBackend,
    ) -> Result<(PageArtifact, u64), PipelineError> {
        self.check_page(i)?;
        let plan = self.load_plan()?;
        let layout = self
            .layout(i)
            .ok_or_else(|| PipelineError::validation("compose", format!("page {i} has no layout")))?
            .layout;
        let memories = self.memories(&plan, gateway)?;
        let assets = self.render_page(i, &plan, &layout, &memories, backend)?;
        let raw = self.compose_page(i, &layout, &assets)?;
        let page = self.letter_page(i, &plan, &raw, gateway)?;
        self.refresh_comic(&plan)?;
        let v = self.bump_version(Some(i))?;
        Ok((page, v))
    }

    fn refresh_comic(&self, plan: &StoryPlan) -> Result<(), PipelineError> {
        let pages: Option<Vec<PageArtifact>> = (0..self.config.page_count)
            .map(|i| read_json(&self.paths.page_artifact(i)))
            .collect();
        if let Some(pages) = pages {
            self.comic(plan, &pages)?;
        }
        Ok(())
    }

    pub fn state(&self) -> ProjectState {
        let plan = StoryPlan::load(&self.paths.plan()).ok();
        let memories = plan
            .as_ref()
            .and_then(|p| story::extract_sections(p).ok())
            .map(|(sections, _)| {
                let refs = self.user_refs();
                sections
                    .iter()
                    .filter_map(|s| memory::load_cached(s, &refs, &self.config.style, &self.paths.cache()))
                    .collect()
            })
            .unwrap_or_default();
        let s = self.stage_state();
        let pages = (0..self.config.page_count)
            .map(|i| {
                let generated = self.layout(i);
                let assets = self.assets(i).assets;
                let artifact: Option<PageArtifact> = read_json(&self.paths.page_artifact(i));
                let render_prefix = format!("render/{i}/");
                let rendered = plan.as_ref().is_some_and(|p| {
                    !p.pages[i].panels.is_empty()
                        && p.pages[i]
                            .panels
                            .iter()
                            .all(|x| s.digests.contains_key(&format!("{render_prefix}{}", x.panel_id)))
                });
                PageState {
                    index: i,
                    version: s.page_versions.get(&i).copied().unwrap_or(0),
                    layout_source: generated.as_ref().map(|g| g.source),
                    layout: generated.map(|g| g.layout),
                    assets,
                    elements: artifact.as_ref().map(|a| a.elements.clone()).unwrap_or_default(),
                    artifact,
                    flags: StageFlags {
                        layout: s.digests.contains_key(&format!("layout/{i}")),
                        render: rendered,
                        compose: s.digests.contains_key(&format!("compose/{i}")),
                        letter: s.digests.contains_key(&format!("letter/{i}")),
                    },
                }
            })
            .collect();
        ProjectState {
            version: s.version,
            config: self.config.clone(),
            plan_done: plan.is_some(),
            plan,
            memories,
            pages,
            comic_done: self.paths.out_dir().join(compose::ARCHIVE_NAME).exists(),
            last_event: self.events.last_seq(),
        }
    }
}

fn page_context(page: &PageSpec) -> String {
    let mut s = page.context.trim().to_string();
    for p in &page.panels {
        s.push_str(&format!("\n- {}", p.description.trim()));
    }
    s
}

/// Keeps the layout's ids when they are exactly the plan's ids, otherwise
/// renames panels in reading order to the plan's ids in narrative order.
pub fn assign_ids(layout: Layout, ids: &[&str]) -> Layout {
    let have: BTreeSet<&str> = layout.panels.iter().map(|p| p.id.as_str()).collect();
    let want: BTreeSet<&str> = ids.iter().copied().collect();
    if have == want {
        layout
    } else {
        layout.with_ids(ids)
    }
}

/// Checks user-supplied lettering against the composed page.
pub fn validate_letters(page: &PageArtifact, elements: &[TextElement]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for e in elements {
        if !seen.insert(e.order_index) {
            return Err(format!("order_index {} is used twice", e.order_index));
        }
        if !page.placements.iter().any(|p| p.panel_id == e.panel_id) {
            return Err(format!("element {} names unknown panel {}", e.order_index, e.panel_id));
        }
        let b = &e.bubble;
        if !b.is_valid() || b.x < 0.0 || b.y < 0.0 || b.right() > 1.0 + 1e-9 || b.bottom() > 1.0 + 1e-9 {
            return Err(format!("element {} bubble must lie within the page", e.order_index));
        }
        if e.font_px == 0 {
            return Err(format!("element {} font_px must be positive", e.order_index));
        }
        if let Some([x, y]) = e.tail_to {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(format!("element {} tail must point inside the page", e.order_index));
            }
            if !matches!(e.kind, story::BubbleKind::Speech | story::BubbleKind::Shout) {
                return Err(format!("element {} of this kind cannot have a tail", e.order_index));
            }
        }
    }
    Ok(())
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        PipelineError::new("gateway", ErrorKind::Gateway, e)
    }
}
