//! `m2p`: command-line driver for corpus generation, training, evaluation,
//! tracking, gradient checking and visualisation.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use m2p_core::data::{
    load_corpus, write_corpus, write_tracks, Clip, CorpusSpec, DataError, TrackPoint,
};
use m2p_core::eval::{
    build_queries, evaluate, query_heatmap, track_points, write_report, EvalError, ModelTracker,
    Query, QueryMode,
};
use m2p_core::geometry::Point2;
use m2p_core::model::{image_to_grid, Checkpoint, ModelError, ModelParams};
use m2p_core::train::{gradcheck, train_from, GradcheckConfig, TrainConfig, TrainError};

#[derive(Parser, Debug)]
#[command(
    name = "m2p",
    version,
    about = "Mask-to-point correspondence learning on synthetic video"
)]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON training config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic corpus to a directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write `checkpoint.m2p` and `train_log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory, overriding the config corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate on held-out clips and write `eval_<mode>.csv/.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to evaluate; the seeded initialisation when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "first")]
        mode: QueryMode,
    },
    /// Track query points through a clip and write `tracks.csv`.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Clip name; the first held-out clip when omitted.
        #[arg(long)]
        clip: Option<String>,
        /// `x,y,frame` in image pixels; repeatable.
        #[arg(long, required = true)]
        query: Vec<QueryArg>,
    },
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Also write `gradcheck.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write SVG heatmaps for a query and a track overlay for a clip.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        clip: Option<String>,
        /// Heatmap query `x,y,frame`; the first ground-truth point when omitted.
        #[arg(long)]
        query: Option<QueryArg>,
    },
}

#[derive(Debug, Clone, Copy)]
struct QueryArg(Query);

impl FromStr for QueryArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected x,y,frame, got {s:?}"));
        }
        let x: f64 = parts[0].parse().map_err(|_| format!("bad x in {s:?}"))?;
        let y: f64 = parts[1].parse().map_err(|_| format!("bad y in {s:?}"))?;
        let frame: usize = parts[2]
            .parse()
            .map_err(|_| format!("bad frame in {s:?}"))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(format!("non-finite coordinate in {s:?}"));
        }
        Ok(QueryArg(Query {
            frame,
            position: Point2::new(x, y),
        }))
    }
}

/// Failure with the exit code it maps to.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) | TrainError::Data(DataError::BadConfig(_)) => {
                Failure::Config(e.to_string())
            }
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::from(TrainError::from(e))
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            TrainConfig::from_json(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        if let CorpusSpec::Generate(g) = &mut cfg.corpus {
            g.seed = seed;
        }
    }
    Ok(cfg)
}

fn with_corpus(mut cfg: TrainConfig, corpus: &Option<PathBuf>) -> TrainConfig {
    if let Some(dir) = corpus {
        cfg.corpus = CorpusSpec::Path(dir.clone());
    }
    cfg
}

fn load_params(cfg: &TrainConfig, checkpoint: &Option<PathBuf>) -> Result<ModelParams, Failure> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(ck.params)
        }
        None => Ok(ModelParams::init(cfg.seed, cfg.model)),
    }
}

fn pick_clip(cfg: &TrainConfig, name: &Option<String>) -> Result<Clip, Failure> {
    let corpus = load_corpus(&cfg.corpus)?;
    let mut all = corpus.heldout.into_iter().chain(corpus.train);
    match name {
        Some(n) => all
            .find(|c| &c.name == n)
            .ok_or_else(|| Failure::Runtime(format!("no clip named {n:?} in the corpus"))),
        None => all
            .next()
            .ok_or_else(|| Failure::Runtime("corpus is empty".into())),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_failure(dir))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            let corpus = load_corpus(&cfg.corpus)?;
            write_corpus(&out, &corpus)?;
            println!(
                "wrote {} train and {} held-out clips to {}",
                corpus.train.len(),
                corpus.heldout.len(),
                out.display()
            );
        }
        Command::Train {
            common,
            out,
            corpus,
            checkpoint,
        } => {
            let mut cfg = with_corpus(load_config(&common)?, &corpus);
            cfg.validate()?;
            create_dir(&out)?;
            cfg.checkpoint_path = Some(out.join("checkpoint.m2p"));
            cfg.log_path = Some(out.join("train_log.csv"));
            let resume = match &checkpoint {
                Some(path) => Some(
                    Checkpoint::load(path)
                        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
                ),
                None => None,
            };
            log::info!("training {} iterations, seed {}", cfg.iterations, cfg.seed);
            let outcome = train_from(&cfg, resume)?;
            if let Some(last) = outcome.log.last() {
                println!("final_l_total {}", num(last.l_total));
            }
            if let Some(d) = outcome.final_delta_avg {
                println!("heldout_delta_avg {}", num(d));
            }
        }
        Command::Eval {
            common,
            out,
            checkpoint,
            corpus,
            mode,
        } => {
            let cfg = with_corpus(load_config(&common)?, &corpus);
            let params = load_params(&cfg, &checkpoint)?;
            let data = load_corpus(&cfg.corpus)?;
            let tracker = ModelTracker {
                params: &params,
                matching: cfg.matching(),
            };
            let res = (cfg.eval_resolution[0], cfg.eval_resolution[1]);
            let report = evaluate(&tracker, &data.heldout, mode, res)?;
            write_report(&out, &format!("eval_{}", mode.name()), &report)?;
            let a = &report.aggregate;
            for (t, d) in m2p_core::eval::THRESHOLDS.iter().zip(&a.delta) {
                println!("delta{t} {}", num(*d));
            }
            println!("delta_avg {}", num(a.delta_avg));
            println!("n_points {}", a.n_points);
        }
        Command::Track {
            common,
            out,
            checkpoint,
            corpus,
            clip,
            query,
        } => {
            let cfg = with_corpus(load_config(&common)?, &corpus);
            let params = load_params(&cfg, &checkpoint)?;
            let clip = pick_clip(&cfg, &clip)?;
            let queries: Vec<Query> = query.iter().map(|q| q.0).collect();
            let tracks = track_points(&params, &clip, &queries, &cfg.matching())?;
            create_dir(&out)?;
            write_tracks(&out.join("tracks.csv"), &tracks)?;
            for t in &tracks.tracks {
                let TrackPoint { x, y, .. } = t.points.last().copied().expect("clip has frames");
                println!("track {} last {} {}", t.id, num(x), num(y));
            }
        }
        Command::Gradcheck { common, out } => {
            let cfg = load_config(&common)?;
            let gc = GradcheckConfig::for_training(&cfg);
            let report = gradcheck(&gc, cfg.seed)?;
            for c in &report.checks {
                println!(
                    "{} {} {} checked={}",
                    c.term,
                    c.block,
                    num(c.max_rel_error),
                    c.checked
                );
            }
            let worst = report.max_rel_error();
            println!("max_rel_error {}", num(worst));
            if let Some(dir) = out {
                create_dir(&dir)?;
                let path = dir.join("gradcheck.json");
                let json = serde_json::to_string_pretty(&report).expect("report serialises");
                fs::write(&path, json).map_err(io_failure(&path))?;
            }
            if worst.is_nan() || worst >= 1e-4 {
                return Err(Failure::Runtime(format!(
                    "gradient check failed: max relative error {worst:e}"
                )));
            }
        }
        Command::Viz {
            common,
            out,
            checkpoint,
            corpus,
            clip,
            query,
        } => {
            let cfg = with_corpus(load_config(&common)?, &corpus);
            let params = load_params(&cfg, &checkpoint)?;
            let clip = pick_clip(&cfg, &clip)?;
            create_dir(&out)?;
            let gt = clip.gt_tracks.as_ref();
            let query = match query {
                Some(q) => q.0,
                None => gt
                    .and_then(|g| {
                        g.tracks.iter().find_map(|t| {
                            t.first_visible().map(|f| Query {
                                frame: f,
                                position: t.points[f].position(),
                            })
                        })
                    })
                    .unwrap_or(Query {
                        frame: 0,
                        position: Point2::new(
                            clip.frames[0].width as f64 / 2.0,
                            clip.frames[0].height as f64 / 2.0,
                        ),
                    }),
            };
            let matching = cfg.matching();
            let track = track_points(&params, &clip, &[query], &matching)?;
            let patch = params.config.patch;
            let to_grid = |p: Point2| (image_to_grid(p.x, patch), image_to_grid(p.y, patch));
            let gt_track = gt.and_then(|g| {
                g.tracks.iter().find(|t| {
                    t.points
                        .get(query.frame)
                        .is_some_and(|p| p.visible && (p.position() - query.position).norm() < 1e-9)
                })
            });
            let maps = (0..clip.num_frames())
                .map(|t| query_heatmap(&params, &clip, &query, t, &matching))
                .collect::<Result<Vec<_>, _>>()?;
            let panels: Vec<svg::HeatmapPanel<'_>> = maps
                .iter()
                .enumerate()
                .map(|(t, map)| svg::HeatmapPanel {
                    frame: t,
                    map,
                    predicted: Some(to_grid(track.tracks[0].points[t].position())),
                    ground_truth: gt_track
                        .map(|g| g.points[t])
                        .filter(|p| p.visible)
                        .map(|p| to_grid(p.position())),
                })
                .collect();
            let title = format!(
                "{} query ({:.1}, {:.1}) @ frame {}",
                clip.name, query.position.x, query.position.y, query.frame
            );
            let heat_path = out.join("heatmap.svg");
            fs::write(&heat_path, svg::heatmaps(&title, &panels, 6.0))
                .map_err(io_failure(&heat_path))?;

            let (pred, gt_eval) = match gt {
                Some(g) => {
                    let (queries, gt_eval) = build_queries(g, QueryMode::First);
                    (
                        track_points(&params, &clip, &queries, &matching)?,
                        Some(gt_eval),
                    )
                }
                None => (track, None),
            };
            let overlay =
                svg::track_overlay(&clip.name, &clip.frames[0], &pred, gt_eval.as_ref(), 4.0);
            let track_path = out.join("tracks.svg");
            fs::write(&track_path, overlay).map_err(io_failure(&track_path))?;
            println!("wrote {} and {}", heat_path.display(), track_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("M2P_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
