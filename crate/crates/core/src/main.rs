use std::io::{self, BufReader, Read};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnseg::ensemble::EmbeddingTable;
use attnseg::eval::{evaluate, load_detections, GroundTruth};
use attnseg::pipeline::{run_pipeline, write_detections, PipelineConfig, SceneBundle};
use attnseg::prompting::{Connectivity, IterConfig};
use attnseg::segment::wire::{handle_line, serve_lines, SegmentRequest};
use attnseg::segment::{MockSegmenter, Segmenter, SegmenterHandle};
use attnseg::synthetic::{generate, SyntheticConfig};

#[derive(Parser)]
#[command(name = "attnseg", version, about = "Point-prompted segmentation from cached VLM attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a scene bundle and write detections.
    Run(RunArgs),
    /// Class-agnostic average recall over (detections, ground truth) pairs.
    Eval {
        #[arg(long = "det", required = true)]
        det: Vec<PathBuf>,
        #[arg(long = "gt", required = true)]
        gt: Vec<PathBuf>,
    },
    /// Write a seeded synthetic corpus.
    GenSynthetic {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write corner-view caches for --multiscale runs.
        #[arg(long)]
        with_views: bool,
    },
    /// Serve the label-image mock segmenter over stdio or HTTP.
    ServeMock {
        #[arg(long)]
        labels: PathBuf,
        /// Listen address, e.g. 127.0.0.1:8080; stdio when absent.
        #[arg(long)]
        http: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    /// mock:<labels.pgm>, exec:<command> or http:<url>
    #[arg(long)]
    segmenter: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(4..=8))]
    connectivity: u8,
    #[arg(long, default_value_t = 5)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    absolute_floor: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    #[arg(long)]
    per_label_nms: bool,
    #[arg(long)]
    multiscale: bool,
    /// Category embedding table for mapping labels onto a fixed vocabulary.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Skip column regularization before rollout (ablation).
    #[arg(long)]
    no_regularize: bool,
    /// Write each upsampled attention map as a 16-bit PGM.
    #[arg(long)]
    dump_maps: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Worker processes for exec: backends.
    #[arg(long, default_value_t = 1)]
    pool: usize,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Input(String),
    Backend(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (msg, code) = match self {
            Failure::Input(m) => (m, 1),
            Failure::Backend(m) => (m, 2),
        };
        eprintln!("error: {msg}");
        ExitCode::from(code)
    }
}

fn input(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let connectivity = Connectivity::from_neighbors(args.connectivity)
        .ok_or_else(|| Failure::Input(format!("connectivity must be 4 or 8, got {}", args.connectivity)))?;
    let embeddings = args.embeddings.as_ref().map(EmbeddingTable::load).transpose().map_err(input)?;
    let cfg = PipelineConfig {
        iter: IterConfig {
            tau: args.tau,
            connectivity,
            max_iters: args.max_iters,
            absolute_floor: args.absolute_floor,
        },
        nms_iou: args.nms_iou,
        per_label_nms: args.per_label_nms,
        multiscale: args.multiscale,
        regularize: !args.no_regularize,
        embeddings,
        dump_maps: args.dump_maps,
        workers: args.workers,
    };
    let (bundle, base) = SceneBundle::load(&args.scene).map_err(input)?;
    let seg = SegmenterHandle::from_spec(&args.segmenter, args.pool).map_err(|e| {
        if args.segmenter.starts_with("mock:") {
            input(e)
        } else {
            Failure::Backend(e.to_string())
        }
    })?;
    let dets = run_pipeline(&bundle, &base, &seg, &cfg).map_err(|e| {
        if e.is_backend() {
            Failure::Backend(e.to_string())
        } else {
            input(e)
        }
    })?;
    log::info!("{} detections", dets.len());
    write_detections(&args.out, &dets).map_err(|e| Failure::Input(format!("writing {}: {e}", args.out.display())))
}

fn eval(det: Vec<PathBuf>, gt: Vec<PathBuf>) -> Result<(), Failure> {
    if det.len() != gt.len() {
        return Err(Failure::Input(format!("{} --det files but {} --gt files", det.len(), gt.len())));
    }
    let mut pairs = Vec::with_capacity(det.len());
    for (d, g) in det.iter().zip(&gt) {
        pairs.push((load_detections(d).map_err(input)?, GroundTruth::load(g).map_err(input)?));
    }
    let report = evaluate(&pairs).map_err(input)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn handle(mock: &MockSegmenter, req: &SegmentRequest) -> Result<Vec<attnseg::ScoredMask>, attnseg::SegmentError> {
    mock.segment_raw(&req.image, &req.to_prompts())
}

fn serve_mock(labels: PathBuf, http: Option<String>) -> Result<(), Failure> {
    let mock = MockSegmenter::load(&labels).map_err(input)?;
    let Some(addr) = http else {
        let stdin = io::stdin().lock();
        return serve_lines(stdin, io::stdout().lock(), |req| handle(&mock, req)).map_err(input);
    };
    let server = tiny_http::Server::http(&addr).map_err(|e| Failure::Input(format!("binding {addr}: {e}")))?;
    eprintln!("listening on {}", server.server_addr());
    for mut request in server.incoming_requests() {
        let mut body = String::new();
        let response = if request.url() != "/segment" {
            tiny_http::Response::from_string("not found").with_status_code(404)
        } else if let Err(e) = BufReader::new(request.as_reader()).read_to_string(&mut body) {
            tiny_http::Response::from_string(e.to_string()).with_status_code(400)
        } else {
            let line = handle_line(&body, |req| handle(&mock, req)).to_line();
            tiny_http::Response::from_string(line).with_header(
                "Content-Type: application/json"
                    .parse::<tiny_http::Header>()
                    .expect("static header"),
            )
        };
        if let Err(e) = request.respond(response) {
            log::warn!("responding: {e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Eval { det, gt } => eval(det, gt),
        Command::GenSynthetic {
            scenes,
            seed,
            out,
            with_views,
        } => {
            let cfg = SyntheticConfig {
                with_views,
                ..Default::default()
            };
            generate(&out, scenes, seed, &cfg).map(|c| {
                let adv = c.scenes.iter().filter(|s| s.adversarial).count();
                println!("wrote {} scenes ({adv} collapse-adversarial) to {}", c.scenes.len(), out.display());
            })
            .map_err(input)
        }
        Command::ServeMock { labels, http } => serve_mock(labels, http),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
