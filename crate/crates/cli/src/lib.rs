//! Command line entry points and the local studio service.

pub mod server;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use mangaflow::gateway::{GatewayError, GatewayMode, ModelGateway, ENV_CASSETTE, ENV_MODE};
use mangaflow::layout::{extract_layout, Layout, TemplateLibrary};
use mangaflow::memory::UserRefs;
use mangaflow::metabench::{run_eval, write_report, EvalOptions, MetricError, TaskFile};
use mangaflow::pipeline::{ErrorKind, PageOutput, PipelineError, Project, Stage, StageOutput, StoryInput, UserInputs};
use mangaflow::render::{GatewayBackend, RenderBackend, RenderError, RenderJob, StubBackend};
use mangaflow::story::{BackendKind, ProjectConfig, StoryPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mangaflow", version, about = "Controllable manga generation")]
pub struct Cli {
    /// Project config JSON; required when creating a project.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    pub project: PathBuf,
    /// Gateway mode: live, record, replay or off.
    #[arg(long, global = true, env = ENV_MODE)]
    pub mode: Option<GatewayMode>,
    /// Cassette file for record and replay; defaults to `<project>/cassette.json`.
    #[arg(long, global = true, env = ENV_CASSETTE)]
    pub cassette: Option<PathBuf>,
    /// Panel backend: stub or gateway.
    #[arg(long, global = true, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Port for `serve`.
    #[arg(long, global = true, default_value_t = 8787)]
    pub port: u16,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "stub" => Ok(BackendKind::Stub),
        "gateway" => Ok(BackendKind::Gateway),
        other => Err(format!("unknown backend `{other}` (stub or gateway)")),
    }
}

#[derive(Debug, Args, Default)]
pub struct StoryArgs {
    /// Story prompt text.
    #[arg(long, conflicts_with_all = ["prompt_file", "plan"])]
    pub prompt: Option<String>,
    /// File holding the story prompt.
    #[arg(long, conflicts_with = "plan")]
    pub prompt_file: Option<PathBuf>,
    /// A finished story plan, skipping the planner.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// User layout for one page, as `PAGE=layout.json` (pages count from 0).
    #[arg(long = "user-layout", value_name = "PAGE=FILE")]
    pub user_layouts: Vec<String>,
    /// User reference assets (JSON map of name to reference).
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Template library for layout retrieval.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PageArg {
    /// Restrict the stage to one page (counting from 0).
    #[arg(long)]
    pub page: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan the story into pages, panels and sections.
    Plan(StoryArgs),
    /// Choose and project page layouts.
    Layout(PageArg),
    /// Build section memories.
    Memory,
    /// Render panels.
    Render(PageArg),
    /// Composite pages.
    Compose(PageArg),
    /// Place and draw lettering.
    Letter(PageArg),
    /// Run the whole pipeline and write the CBZ.
    Generate(StoryArgs),
    /// Recover a panel layout from a page image.
    ExtractLayout {
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        page: usize,
        #[arg(long, default_value_t = 48)]
        grid: u32,
        /// Write the layout here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score comic outputs against benchmark tasks.
    Eval {
        #[arg(long)]
        tasks: PathBuf,
        /// Directory with one output directory per story id.
        #[arg(long)]
        outputs: PathBuf,
        /// Where report.json and report.txt go.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Recover generated layouts from page pixels.
        #[arg(long)]
        extract: bool,
        /// Run the readability judge on stories with ground truth.
        #[arg(long)]
        readability: bool,
        #[arg(long)]
        bps: Option<PathBuf>,
        #[arg(long)]
        counts: Option<PathBuf>,
        /// External metric files to merge into the report.
        #[arg(long)]
        ingest: Vec<PathBuf>,
        #[arg(long, default_value_t = 48)]
        grid: u32,
    },
    /// Serve the project to the studio.
    Serve,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl ToString) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match e.kind {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Gateway => EXIT_GATEWAY,
            ErrorKind::Io => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self {
            code: EXIT_GATEWAY,
            message: e.to_string(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let code = match e {
            MetricError::Gateway(_) => EXIT_GATEWAY,
            MetricError::Io(_) => EXIT_FAILURE,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Panel backend that owns its gateway handle.
#[derive(Clone)]
pub enum Backend {
    Stub,
    Gateway(Arc<ModelGateway>),
}

impl RenderBackend for Backend {
    fn id(&self) -> String {
        match self {
            Backend::Stub => StubBackend.id(),
            Backend::Gateway(g) => GatewayBackend { gateway: g }.id(),
        }
    }

    fn render(&self, job: &RenderJob<'_>) -> Result<image::RgbImage, RenderError> {
        match self {
            Backend::Stub => StubBackend.render(job),
            Backend::Gateway(g) => GatewayBackend { gateway: g }.render(job),
        }
    }
}

impl Cli {
    /// Gateway from flags, then environment, then the project config.
    pub fn gateway(&self, config: Option<&ProjectConfig>) -> Result<ModelGateway, CliError> {
        let mode = self
            .mode
            .or(config.map(|c| c.mode))
            .unwrap_or_default();
        let cassette = self
            .cassette
            .clone()
            .unwrap_or_else(|| self.project.join("cassette.json"));
        if mode == GatewayMode::Replay && !cassette.exists() {
            return Err(CliError {
                code: EXIT_GATEWAY,
                message: format!("replay cassette {} not found", cassette.display()),
            });
        }
        Ok(ModelGateway::from_mode(mode, Some(cassette))?)
    }

    pub fn backend(&self, config: &ProjectConfig, gateway: &Arc<ModelGateway>) -> Backend {
        match self.backend.clone().unwrap_or_else(|| config.backend.clone()) {
            BackendKind::Stub => Backend::Stub,
            BackendKind::Gateway => Backend::Gateway(gateway.clone()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    mangaflow::fsutil::read_json(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn user_inputs(story: &StoryArgs, config: &ProjectConfig) -> Result<UserInputs, CliError> {
    let mut layouts = BTreeMap::new();
    for spec in &story.user_layouts {
        let (page, file) = spec
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("--user-layout expects PAGE=FILE, got {spec}")))?;
        let page: usize = page
            .parse()
            .map_err(|_| CliError::validation(format!("bad page number in {spec}")))?;
        let layout: Layout = read_json(Path::new(file))?;
        layouts.insert(page, layout);
    }
    let refs: Option<UserRefs> = story.refs.as_deref().map(read_json).transpose()?;
    let templates = match &story.templates {
        Some(p) => Some(
            TemplateLibrary::load(p, config.grid_resolution).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    Ok(UserInputs {
        layouts,
        refs,
        templates,
    })
}

fn has_story(story: &StoryArgs) -> bool {
    story.prompt.is_some() || story.prompt_file.is_some() || story.plan.is_some()
}

/// Creates the project when story inputs are given, else opens it.
fn project(cli: &Cli, story: Option<&StoryArgs>) -> Result<Project, CliError> {
    let Some(story) = story.filter(|s| has_story(s)) else {
        return Ok(Project::open(&cli.project)?);
    };
    let config: ProjectConfig = match &cli.config {
        Some(p) => ProjectConfig::load(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
        None => ProjectConfig::load(&cli.project.join("config.json"))
            .map_err(|_| CliError::validation("a new project needs --config"))?,
    };
    let input = if let Some(p) = &story.plan {
        StoryInput::Plan(StoryPlan::load(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?)
    } else if let Some(p) = &story.prompt_file {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        StoryInput::Prompt(text)
    } else {
        StoryInput::Prompt(story.prompt.clone().unwrap_or_default())
    };
    let user = user_inputs(story, &config)?;
    Ok(Project::init(&cli.project, &config, &input, &user)?)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn stage(cli: &Cli, stage: Stage, page: Option<usize>, story: Option<&StoryArgs>) -> Result<(), CliError> {
    let p = project(cli, story)?;
    let gateway = Arc::new(cli.gateway(Some(&p.config))?);
    let backend = cli.backend(&p.config, &gateway);
    match p.run_until(stage, page, &gateway, &backend)? {
        StageOutput::Plan(_) => println!("{}", p.paths.plan().display()),
        StageOutput::Memory(m) => {
            for s in m {
                println!("{}", s.section_id);
            }
        }
        StageOutput::Pages(pages) => {
            for o in pages {
                match o {
                    PageOutput::Layout(g) => println!("{}", p.paths.layout(g.layout.page_index).display()),
                    PageOutput::Panels(assets) => {
                        for a in assets {
                            println!("{}", a.image_path.display());
                        }
                    }
                    PageOutput::Page(a) => println!("{}", a.image_path.display()),
                }
            }
        }
        StageOutput::Comic(c) => println!("{}", c.archive_path.display()),
    }
    log::info!("{} gateway calls", gateway.calls());
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Plan(s) => stage(&cli, Stage::Plan, None, Some(s)),
        Command::Memory => stage(&cli, Stage::Memory, None, None),
        Command::Layout(a) => stage(&cli, Stage::Layout, a.page, None),
        Command::Render(a) => stage(&cli, Stage::Render, a.page, None),
        Command::Compose(a) => stage(&cli, Stage::Compose, a.page, None),
        Command::Letter(a) => stage(&cli, Stage::Letter, a.page, None),
        Command::Generate(s) => stage(&cli, Stage::Comic, None, Some(s)),
        Command::ExtractLayout { image, page, grid, out } => {
            let img = image::open(image).map_err(|e| CliError::validation(format!("{}: {e}", image.display())))?;
            let layout = extract_layout(&img, *page, *grid).map_err(CliError::validation)?;
            match out {
                Some(o) => layout.save(o).map_err(CliError::validation)?,
                None => print_json(&layout),
            }
            Ok(())
        }
        Command::Eval {
            tasks,
            outputs,
            out,
            extract,
            readability,
            bps,
            counts,
            ingest,
            grid,
        } => {
            let tasks = TaskFile::load(tasks, *grid)?;
            let gateway = if *readability { cli.gateway(None)? } else { ModelGateway::off() };
            let options = EvalOptions {
                extract_layouts: *extract,
                readability: *readability,
                bps_csv: bps.clone(),
                counts_csv: counts.clone(),
                ingest: ingest.clone(),
                grid_resolution: *grid,
            };
            let summary = run_eval(&tasks, outputs, &options, &gateway)?;
            let path = write_report(&summary, out).map_err(|e| CliError {
                code: EXIT_FAILURE,
                message: e.to_string(),
            })?;
            print!("{}", mangaflow::metabench::report_table(&summary));
            println!("{}", path.display());
            Ok(())
        }
        Command::Serve => {
            let p = Project::open(&cli.project)?;
            let gateway = Arc::new(cli.gateway(Some(&p.config))?);
            let backend = cli.backend(&p.config, &gateway);
            let state = Arc::new(server::AppState::new(p, gateway, backend));
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError {
                code: EXIT_FAILURE,
                message: e.to_string(),
            })?;
            rt.block_on(async {
                let addr = std::net::SocketAddr::from(([127, 0, 0, 1], cli.port));
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("serving {} on http://{addr}/v1", cli.project.display());
                axum::serve(listener, server::router(state)).await
            })
            .map_err(|e| CliError {
                code: EXIT_FAILURE,
                message: e.to_string(),
            })
        }
    }
}
