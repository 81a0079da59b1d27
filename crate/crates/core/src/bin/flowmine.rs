use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use flowmine::config::Config;
use flowmine::ensemble::mine_supervision;
use flowmine::error::{Error, Result};
use flowmine::experiment::{bench, stability, stability_csv, SceneSource};
use flowmine::fit::{fit, FitTrace, SupervisionMode};
use flowmine::geometry::{FlowField, FrameWindow};
use flowmine::io::{self, Archive, TargetsFile, Versioned};
use flowmine::loss::Objective;
use flowmine::metrics::{angle_deg, evaluate, render_table, STABILITY_ZERO_NORM};
use flowmine::segment::{label_window_heuristic, ClusterSet};
use flowmine::synth::{generate, SceneSpec};

#[derive(Parser)]
#[command(name = "flowmine", version, about = "Temporal supervision mining for LiDAR scene flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene archive.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PLY file per frame.
        #[arg(long)]
        ply: bool,
    },
    /// Mine per-cluster supervision targets for one source frame.
    Supervise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Current network flow of the source frame; zero when omitted.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        dump_diagnostics: bool,
        /// Ignore stored labels and segment heuristically.
        #[arg(long)]
        relabel: bool,
    },
    /// Evaluate the training objective for a flow and a targets file.
    Loss {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a flow field by gradient descent with re-mined targets.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `flow.bin,trace.json`
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
        /// Source frame; defaults to the second-to-last frame.
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Per-iteration loss and angular error as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a predicted flow against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Per-point class codes (0 background, 1 car, 2 other, 3 pedestrian, 4 VRU).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Point payload used for the evaluation-region filter.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direction stability of mined targets across a scene.
    Stability {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "teflow,two_frame")]
        modes: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock timing of supervision mining.
    Bench {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", io::to_json(value)?);
    Ok(())
}

/// Window at `t` with labels; falls back to heuristic segmentation when
/// requested or when the archive carries no dynamic labels.
fn labeled_window(
    archive: &Archive,
    t: usize,
    cfg: &Config,
    relabel: bool,
) -> Result<(FrameWindow, ClusterSet)> {
    let window = archive.window(t, cfg.history)?;
    let unlabeled = window.frames.iter().all(|f| !f.dynamic_mask.contains(&true));
    if relabel || unlabeled {
        let c = &cfg.clustering;
        let (w, cs) = label_window_heuristic(&window, c.motion_threshold, c.eps, c.min_cluster_size)?;
        return Ok((w, cs));
    }
    let cs = ClusterSet::from_frame(window.source(), cfg.clustering.min_cluster_size);
    Ok((window, cs))
}

fn source_flow(path: &Option<PathBuf>, window: &FrameWindow) -> Result<FlowField> {
    let flow = match path {
        Some(p) => io::read_flow(p)?,
        None => FlowField::zeros(window.source().len()),
    };
    flow.check_for(window.source())?;
    Ok(flow)
}

fn parse_mode(s: &str) -> Result<SupervisionMode> {
    match s {
        "teflow" => Ok(SupervisionMode::Teflow),
        "two_frame" | "two_frame_baseline" => Ok(SupervisionMode::TwoFrameBaseline),
        other => Err(Error::Config(format!("unknown mode {other:?}"))),
    }
}

fn fit_csv(trace: &FitTrace, gt: &[flowmine::geometry::Vec3]) -> String {
    let mut s = String::from("iteration,loss_remined,loss_after_step,mean_angle_error_deg\n");
    for e in &trace.entries {
        let errs: Vec<f64> = e
            .cluster_flow
            .iter()
            .filter_map(|(&id, f)| gt.get(id as usize).map(|g| angle_deg(f, g, STABILITY_ZERO_NORM)))
            .collect();
        let err = if errs.is_empty() {
            String::new()
        } else {
            format!("{:.6}", errs.iter().sum::<f64>() / errs.len() as f64)
        };
        s.push_str(&format!(
            "{},{:.12e},{:.12e},{err}\n",
            e.iteration, e.loss_remined, e.loss_after_step
        ));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, ply } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let scene = generate(&SceneSpec::from_toml(&text)?)?;
            io::write_scene(&out, &scene)?;
            if ply {
                for (i, f) in scene.frames.iter().enumerate() {
                    io::write_ply(out.join(format!("points_{i:04}.ply")), f)?;
                }
            }
        }
        Command::Supervise {
            input,
            frame,
            config,
            out,
            flow,
            dump_diagnostics,
            relabel,
        } => {
            let cfg = load_config(&config)?;
            let archive = Archive::open(&input)?;
            let (window, clusters) = labeled_window(&archive, frame, &cfg, relabel)?;
            let flow = source_flow(&flow, &window)?;
            let sup = mine_supervision(&window, &clusters, &flow, &cfg.ensembling)?;
            let file = TargetsFile::new(frame, cfg.history, cfg.ensembling, &sup, dump_diagnostics);
            io::write_json(&out, &file)?;
        }
        Command::Loss {
            input,
            flow,
            targets,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let archive = Archive::open(&input)?;
            let t: TargetsFile = io::read_json(&targets)?;
            let mut cfg = cfg;
            cfg.history = t.history;
            let (window, clusters) = labeled_window(&archive, t.frame, &cfg, false)?;
            let flow = source_flow(&Some(flow), &window)?;
            let report = Objective::new(&window, &clusters, cfg.loss)?.report(&flow, &t.target_map())?;
            let v = Versioned::new(report);
            match out {
                Some(p) => io::write_json(p, &v)?,
                None => print_json(&v)?,
            }
        }
        Command::Fit {
            input,
            config,
            out,
            frame,
            init,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let archive = Archive::open(&input)?;
            if archive.len() < 2 {
                return Err(Error::OutOfRange { t: 0, h: cfg.history, frames: archive.len() });
            }
            let t = frame.unwrap_or(archive.len() - 2);
            let (window, clusters) = labeled_window(&archive, t, &cfg, false)?;
            let initial = source_flow(&init, &window)?;
            let (flow, trace) = fit(&window, &clusters, &initial, &cfg.ensembling, &cfg.loss, &cfg.fit)?;
            let [flow_path, trace_path] = <[PathBuf; 2]>::try_from(out)
                .map_err(|_| Error::Config("--out takes flow.bin,trace.json".into()))?;
            io::write_flow(&flow_path, &flow)?;
            io::write_json(&trace_path, &Versioned::new(&trace))?;
            if let Some(p) = csv {
                let gt = archive.object_flow(t)?;
                write_text(&p, &fit_csv(&trace, &gt))?;
            }
        }
        Command::Eval {
            pred,
            gt,
            labels,
            config,
            points,
            out,
        } => {
            let cfg = load_config(&config)?;
            let pred = io::read_flow(&pred)?;
            let gt = io::read_flow(&gt)?;
            let classes = io::read_classes(&labels)?;
            let points = points.map(io::read_points).transpose()?;
            let report = evaluate(&pred, &gt, &classes, points.as_deref(), &cfg.eval)?;
            print!("{}", render_table(&report));
            if let Some(p) = out {
                io::write_json(p, &Versioned::new(&report))?;
            }
        }
        Command::Stability {
            scene,
            modes,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let archive = Archive::open(&scene)?;
            let runs = modes
                .iter()
                .map(|m| stability(&archive, &cfg, parse_mode(m)?))
                .collect::<Result<Vec<_>>>()?;
            write_text(&out, &stability_csv(&runs))?;
            for r in &runs {
                println!(
                    "{:?}: mean change {:.3} deg, mean error {:.3} deg, occluded error {}",
                    r.mode,
                    r.mean_change_deg,
                    r.mean_error_deg,
                    r.mean_error_occluded_deg.map_or("-".into(), |e| format!("{e:.3} deg"))
                );
            }
        }
        Command::Bench {
            input,
            repeat,
            frame,
            config,
        } => {
            let cfg = load_config(&config)?;
            let archive = Archive::open(&input)?;
            let t = frame.unwrap_or(archive.len().saturating_sub(2));
            print_json(&Versioned::new(bench(&archive, t, &cfg, repeat)?))?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TFM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("TFM_THREADS must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ErrorReport {
    error: &'static str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", io::to_json(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
