//! `cpam` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use cpam_core::evaluation::{EmbeddingClient, EvalError};
use cpam_core::mask::TaskKind;
use cpam_core::mask_input::{Click, DiskSegmenter, MaskInputError, MaskResolver, MaskSpec, SegmentationClient};
use cpam_core::pipeline::{
    edit_image, write_run_outputs, Controllers, EditParams, EditRequest, NoObserver, PipelineError, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use cpam_sd::ClipScorer;

use crate::bench::{run_bench, BenchOptions};
use crate::config::{make_backend, parse_device, Config};
use crate::segment::{stub_router, HttpSegmenter};
use crate::service::Service;
use crate::InterfaceError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cpam", version, about = "Mask-guided attention control for real image editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edit one image.
    Edit(EditArgs),
    /// Run and score a dataset, resuming from checkpoints.
    Bench(BenchArgs),
    /// Start the HTTP job service.
    Serve(ServeArgs),
    /// Serve a disk-shaped stub segmentation endpoint.
    SegmentStub(StubArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `toy` or `sd15`; overrides the config file.
    #[arg(long)]
    pub backend: Option<String>,
    /// `cpu` or `cuda:N`.
    #[arg(long)]
    pub device: Option<String>,
    /// Diffusers weight directory for sd15.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl BackendArgs {
    fn config(&self) -> Result<Config, InterfaceError> {
        let mut c = Config::load_or_default(self.config.as_deref())?;
        if let Some(b) = &self.backend {
            c.backend = b.clone();
        }
        if let Some(d) = &self.device {
            c.device = d.clone();
        }
        if let Some(w) = &self.weights {
            c.weights = Some(w.clone());
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mask_source").required(true).args(["mask", "clicks", "mask_text"])))]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Source mask PNG.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Points as `x,y[,+|-]` separated by `;`.
    #[arg(long)]
    pub clicks: Option<String>,
    /// Phrase sent to the segmentation service.
    #[arg(long)]
    pub mask_text: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// replace, pose, background, remove or region.
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, default_value = "")]
    pub object_word: String,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    pub guidance: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the original object at its location.
    #[arg(long)]
    pub retain_object: bool,
    #[arg(long)]
    pub no_preservation: bool,
    #[arg(long)]
    pub no_localized_extraction: bool,
    /// Output PNG; the manifest and mask thumbnails go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub segment_endpoint: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report path; `.txt` and `.csv` are written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Checkpoint directory; defaults to `<report>.work`.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_preservation: bool,
    #[arg(long)]
    pub no_localized_extraction: bool,
    /// Directory with a ViT-B/32 CLIP `model.safetensors` and `tokenizer.json`.
    #[arg(long)]
    pub clip_weights: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub queue_size: Option<usize>,
    #[arg(long)]
    pub segment_endpoint: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct StubArgs {
    #[arg(long, default_value = "127.0.0.1:8090")]
    pub bind: String,
    /// Disk radius in pixels.
    #[arg(long, default_value_t = 24.0)]
    pub radius: f64,
}

pub fn parse_clicks(s: &str) -> Result<Vec<Click>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let parts: Vec<&str> = p.split(',').map(str::trim).collect();
            let coord = |v: &str| v.parse::<u32>().map_err(|_| format!("bad click coordinate {v:?} in {p:?}"));
            match parts.as_slice() {
                [x, y] => Ok(Click {
                    x: coord(x)?,
                    y: coord(y)?,
                    positive: true,
                }),
                [x, y, sign] => Ok(Click {
                    x: coord(x)?,
                    y: coord(y)?,
                    positive: match *sign {
                        "+" | "1" => true,
                        "-" | "0" => false,
                        other => return Err(format!("click label must be + or -, got {other:?}")),
                    },
                }),
                _ => Err(format!("click {p:?} is not x,y[,+|-]")),
            }
        })
        .collect()
}

fn controllers(no_preservation: bool, no_localized: bool) -> Controllers {
    Controllers {
        preservation: !no_preservation,
        localized_extraction: !no_localized,
    }
}

enum Failure {
    Validation(String),
    Pipeline(String),
}

impl From<InterfaceError> for Failure {
    fn from(e: InterfaceError) -> Self {
        match &e {
            InterfaceError::Config(_) => Failure::Validation(e.to_string()),
            InterfaceError::Pipeline(PipelineError::MaskInput(m)) | InterfaceError::MaskInput(m) => {
                if mask_input_is_validation(m) {
                    Failure::Validation(e.to_string())
                } else {
                    Failure::Pipeline(e.to_string())
                }
            }
            InterfaceError::Pipeline(p) if p.is_validation() => Failure::Validation(e.to_string()),
            InterfaceError::Eval(EvalError::Load { .. } | EvalError::CountMismatch { .. } | EvalError::EmptyReport) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Pipeline(e.to_string()),
        }
    }
}

fn mask_input_is_validation(e: &MaskInputError) -> bool {
    !matches!(e, MaskInputError::Transport { .. } | MaskInputError::Rejected(_))
}

fn edit_request(args: &EditArgs) -> Result<EditRequest, Failure> {
    let prompt = args.prompt.clone().unwrap_or_default();
    if args.task != TaskKind::RemoveObject && prompt.trim().is_empty() {
        return Err(Failure::Validation(format!("--prompt is required for --task {}", args.task)));
    }
    if !args.image.is_file() {
        return Err(Failure::Validation(format!("--image {} does not exist", args.image.display())));
    }
    let spec = match (&args.mask, &args.clicks, &args.mask_text) {
        (Some(path), _, _) => MaskSpec::File { path: path.clone() },
        (_, Some(c), _) => MaskSpec::Clicks {
            points: parse_clicks(c).map_err(|e| Failure::Validation(format!("--clicks: {e}")))?,
        },
        (_, _, Some(phrase)) => MaskSpec::TextPhrase { phrase: phrase.clone() },
        _ => return Err(Failure::Validation("one of --mask, --clicks or --mask-text is required".into())),
    };
    let mut params = EditParams::new(args.task, &prompt, &args.object_word);
    params.guidance_scale = args.guidance;
    params.steps = args.steps;
    params.seed = args.seed;
    params.schedule.retain_object = args.retain_object;
    params.controllers = controllers(args.no_preservation, args.no_localized_extraction);
    params.validate().map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(EditRequest {
        image: args.image.clone(),
        source_mask_spec: spec,
        params,
    })
}

fn cmd_edit(args: &EditArgs) -> Result<(), Failure> {
    let request = edit_request(args)?;
    let config = args.backend.config()?;
    let backend = make_backend(&config.backend, &config.device, config.weights.as_deref())?;
    let endpoint = args.segment_endpoint.clone().or(config.segmentation_endpoint.clone());
    let client = endpoint.map(|e| Arc::new(HttpSegmenter::new(&e)) as Arc<dyn SegmentationClient>);
    let resolver = MaskResolver::new(client);
    let result = edit_image(&request, backend.as_ref(), &resolver, &mut NoObserver).map_err(InterfaceError::from)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = write_run_outputs(&result, &request, &args.out).map_err(InterfaceError::from)?;
    println!("{} ({})", manifest.output_image, manifest.output_sha256);
    Ok(())
}

fn load_clip(dir: &Path, device: &str) -> Result<ClipScorer, InterfaceError> {
    let device = parse_device(device)?;
    ClipScorer::load(&dir.join("model.safetensors"), &dir.join("tokenizer.json"), &device)
        .map_err(|e| InterfaceError::Backend(e.to_string()))
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    if args.limit == Some(0) {
        return Err(InterfaceError::Eval(EvalError::EmptyReport).into());
    }
    let config = args.backend.config()?;
    let backend = make_backend(&config.backend, &config.device, config.weights.as_deref())?;
    let clip = match &args.clip_weights {
        Some(dir) => Some(load_clip(dir, &config.device)?),
        None => None,
    };
    let opts = BenchOptions {
        dataset: args.dataset.clone(),
        limit: args.limit,
        report: args.report.clone(),
        work_dir: args
            .work_dir
            .clone()
            .unwrap_or_else(|| args.report.with_extension("work")),
        steps: args.steps,
        seed: args.seed,
        controllers: controllers(args.no_preservation, args.no_localized_extraction),
    };
    let outcome = run_bench(&opts, &backend, clip.as_ref().map(|c| c as &dyn EmbeddingClient))?;
    println!(
        "{} records ({} computed, {} resumed); report at {}",
        outcome.records.len(),
        outcome.computed,
        outcome.records.len() - outcome.computed,
        opts.report.with_extension("txt").display()
    );
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Pipeline(e.to_string()))
}

fn cmd_serve(args: &ServeArgs) -> Result<(), Failure> {
    let mut config = args.backend.config()?;
    if let Some(b) = &args.bind {
        config.bind = b.clone();
    }
    if let Some(s) = &args.store {
        config.store_path = s.clone();
    }
    if let Some(q) = args.queue_size {
        config.queue_size = q;
    }
    if let Some(e) = &args.segment_endpoint {
        config.segmentation_endpoint = Some(e.clone());
    }
    let backend = make_backend(&config.backend, &config.device, config.weights.as_deref())?;
    let service = Service::open(config, backend, None)?;
    service.start_workers();
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&service.config().bind)
            .await
            .map_err(|e| Failure::Validation(format!("cannot bind {}: {e}", service.config().bind)))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(InterfaceError::from)?);
        axum::serve(listener, service.router())
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Pipeline(e.to_string()))
    })?;
    service.shutdown();
    Ok(())
}

fn cmd_stub(args: &StubArgs) -> Result<(), Failure> {
    let client: Arc<dyn SegmentationClient> = Arc::new(DiskSegmenter { radius: args.radius });
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .map_err(|e| Failure::Validation(format!("cannot bind {}: {e}", args.bind)))?;
        eprintln!("segmentation stub on http://{}", listener.local_addr().map_err(InterfaceError::from)?);
        axum::serve(listener, stub_router(client))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Pipeline(e.to_string()))
    })
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Edit(a) => cmd_edit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
        Command::SegmentStub(a) => cmd_stub(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            EXIT_VALIDATION
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            EXIT_FAILURE
        }
    }
}
