//! `scnn` command-line tool: gradient checks, cost benchmarks, toy
//! training, curve extraction, corpus generation and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use scnn_core::corpus::{self, ExtractOptions};
use scnn_core::costbench::{self, BenchMethod, BenchSpec, Threading};
use scnn_core::lanepost::{DecodeParams, DEFAULT_EXIST_THRESHOLD, DEFAULT_RESPONSE_FLOOR, DEFAULT_ROW_STEP};
use scnn_core::laneval::{self, EvalOptions, DEFAULT_IOU_THRESHOLD, DEFAULT_STROKE_WIDTH};
use scnn_core::scnn::{self, Direction, PropagationConfig, Scheme};
use scnn_core::toytrain::{self, Insertion, NetConfig, SceneConfig, StackConfig, TrainConfig};

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected C,H,W, got `{s}`"));
    };
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    Ok([num(a)?, num(b)?, num(c)?])
}

type CmdResult = Result<Outcome, Box<dyn std::error::Error>>;

/// JSON printed to stdout plus whether the run counts as a success.
struct Outcome {
    body: Value,
    ok: bool,
}

#[derive(Parser)]
#[command(name = "scnn", version, about = "Spatial slice-wise message passing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirArg {
    Down,
    Up,
    Right,
    Left,
}

impl From<DirArg> for Direction {
    fn from(d: DirArg) -> Self {
        match d {
            DirArg::Down => Direction::Down,
            DirArg::Up => Direction::Up,
            DirArg::Right => Direction::Right,
            DirArg::Left => Direction::Left,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    #[value(alias = "sequential")]
    Seq,
    #[value(alias = "parallel")]
    Par,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Seq => Scheme::Sequential,
            SchemeArg::Par => Scheme::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Scnn,
    Meanfield,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThreadArg {
    Single,
    Multi,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum StackArg {
    None,
    TopHidden,
    Output,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of one propagation pass.
    Gradcheck {
        /// C,H,W of the random input.
        #[arg(long, value_parser = parse_triple, default_value = "2,5,4")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 3)]
        w: usize,
        #[arg(long, value_enum, default_value = "down")]
        dir: DirArg,
        #[arg(long, value_enum, default_value = "seq")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median wall time and message count of SCNN-DULR or mean field.
    Bench {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// C,H,W of the input.
        #[arg(long, value_parser = parse_triple)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 9)]
        w: usize,
        #[arg(long, default_value_t = 10)]
        n_iter: usize,
        #[arg(long, default_value_t = 21)]
        kernel_size: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, value_enum, default_value = "single")]
        threads: ThreadArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy lane net on synthetic occluded scenes.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.9)]
        poly_power: f64,
        #[arg(long, default_value_t = 0.4)]
        bg_weight: f64,
        #[arg(long, default_value_t = 0.1)]
        exist_weight: f64,
        #[arg(long)]
        grad_clip: Option<f64>,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        lanes: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
        #[arg(long, default_value_t = 0.5)]
        occlusion: f64,
        #[arg(long, value_enum, default_value = "none")]
        scnn: StackArg,
        #[arg(long, default_value_t = 9)]
        kernel_width: usize,
        #[arg(long, value_enum, default_value = "seq")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out scenes scored after training.
        #[arg(long, default_value_t = 50)]
        eval_scenes: usize,
        #[arg(long, default_value_t = 8)]
        row_step: usize,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Checkpoint directory; metrics.jsonl is written next to the weights.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode probability maps into lane curves.
    Extract {
        #[arg(long, conflicts_with = "dir", requires = "out")]
        probmap: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus directory: reads probmaps/*.scnt, writes pred/*.json.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ROW_STEP)]
        row_step: usize,
        #[arg(long, default_value_t = DEFAULT_EXIST_THRESHOLD)]
        exist_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_RESPONSE_FLOOR)]
        floor: f64,
        #[arg(long)]
        lanes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        exist_window: usize,
    },
    /// Score a list of prediction/ground-truth curve files.
    Eval {
        #[arg(long)]
        list: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        #[arg(long, default_value_t = DEFAULT_STROKE_WIDTH)]
        width: f64,
        /// Categories scored by false positives only.
        #[arg(long, value_delimiter = ',', default_value = "crossroad")]
        fp_only: Vec<String>,
    },
    /// Write painted probability maps, ground truth and a list file.
    GenCorpus {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        occlusion: f64,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        lanes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_echo(result: Value, config: Value, impl_defaults: &[&str]) -> Value {
    let mut map = match result {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    map.insert("config".into(), config);
    map.insert("impl_defaults".into(), json!(impl_defaults));
    Value::Object(map)
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Gradcheck {
            dims,
            w,
            dir,
            scheme,
            seed,
        } => {
            let cfg = PropagationConfig::new(dir.into(), scheme.into());
            let report = scnn::gradcheck(dims[0], dims[1], dims[2], w, cfg, seed)?;
            let ok = report.pass;
            let config = json!({
                "dims": dims, "w": w, "dir": Direction::from(dir), "scheme": Scheme::from(scheme), "seed": seed,
                "step": scnn::GRADCHECK_STEP, "tolerance": scnn::GRADCHECK_TOL,
            });
            Ok(Outcome {
                body: with_echo(serde_json::to_value(report)?, config, &["dims", "w", "dir", "scheme", "seed"]),
                ok,
            })
        }
        Command::Bench {
            method,
            shape,
            w,
            n_iter,
            kernel_size,
            repetitions,
            warmup,
            threads,
            seed,
        } => {
            let method = match method {
                MethodArg::Scnn => BenchMethod::ScnnDulr,
                MethodArg::Meanfield => BenchMethod::MeanField,
            };
            let spec = BenchSpec {
                w,
                n_iter,
                kernel_size,
                repetitions,
                warmup,
                threading: match threads {
                    ThreadArg::Single => Threading::Single,
                    ThreadArg::Multi => Threading::Multi,
                },
                seed,
                ..BenchSpec::new(method, shape)
            };
            eprintln!("benchmarking {:?} on {:?}", spec.method, spec.shape);
            let result = costbench::run_bench(&spec)?;
            Ok(Outcome {
                body: with_echo(
                    serde_json::to_value(result)?,
                    serde_json::to_value(&spec)?,
                    &["kernel_size", "repetitions", "warmup", "threads", "seed"],
                ),
                ok: true,
            })
        }
        Command::TrainToy {
            steps,
            batch,
            lr,
            momentum,
            weight_decay,
            poly_power,
            bg_weight,
            exist_weight,
            grad_clip,
            layers,
            hidden,
            lanes,
            height,
            width,
            occlusion,
            scnn,
            kernel_width,
            scheme,
            seed,
            eval_scenes,
            row_step,
            iou,
            out,
        } => {
            let stack = match scnn {
                StackArg::None => None,
                StackArg::TopHidden | StackArg::Output => Some(StackConfig {
                    kernel_width,
                    scheme: scheme.into(),
                    ..StackConfig::new(if scnn == StackArg::TopHidden {
                        Insertion::TopHidden
                    } else {
                        Insertion::Output
                    })
                }),
            };
            let cfg = TrainConfig {
                net: NetConfig {
                    layers,
                    hidden,
                    lanes,
                    stack,
                    ..NetConfig::default()
                },
                scene: SceneConfig {
                    height,
                    width,
                    lanes,
                    occlusion_rate: occlusion,
                },
                steps,
                batch,
                base_lr: lr,
                momentum,
                weight_decay,
                poly_power,
                loss: toytrain::LossWeights {
                    background: bg_weight,
                    existence: exist_weight,
                },
                grad_clip,
                seed,
                init: Default::default(),
            };
            let mut log_file = match &out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
                }
                None => None,
            };
            eprintln!("training for {steps} steps");
            let run = toytrain::train(&cfg, log_file.as_mut().map(|f| f as &mut dyn std::io::Write))?;
            drop(log_file);
            if let Some(dir) = &out {
                run.net.save(dir)?;
            }
            let params = DecodeParams {
                row_step,
                ..DecodeParams::default()
            };
            let eval = toytrain::evaluate(&run.net, &cfg.scene, seed, eval_scenes, &params, iou)?;
            let result = json!({
                "param_count": run.net.param_count(),
                "initial_loss": run.history.first().map(|m| m.loss),
                "final_loss": run.history.last().map(|m| m.loss),
                "eval": eval,
                "checkpoint": out,
            });
            let mut config = serde_json::to_value(&cfg)?;
            config["eval_scenes"] = json!(eval_scenes);
            config["decode"] = serde_json::to_value(params)?;
            config["iou"] = json!(iou);
            Ok(Outcome {
                body: with_echo(
                    result,
                    config,
                    &[
                        "steps", "batch", "layers", "hidden", "lanes", "height", "width", "occlusion", "exist_weight",
                        "grad_clip", "seed", "eval_scenes", "row_step",
                    ],
                ),
                ok: true,
            })
        }
        Command::Extract {
            probmap,
            out,
            dir,
            row_step,
            exist_threshold,
            floor,
            lanes,
            exist_window,
        } => {
            let opts = ExtractOptions {
                decode: DecodeParams {
                    row_step,
                    exist_threshold,
                    response_floor: floor,
                },
                lanes,
                exist_window,
            };
            let result = match (probmap, out, dir) {
                (Some(p), Some(o), None) => {
                    let curves = corpus::extract_file(&p, &o, &opts)?;
                    json!({ "written": [o], "lanes_found": curves.lanes.iter().filter(|l| l.exists).count() })
                }
                (None, _, Some(d)) => {
                    let written = corpus::extract_dir(&d, &opts)?;
                    eprintln!("extracted {} files", written.len());
                    json!({ "written": written })
                }
                _ => return Err("give either --probmap with --out, or --dir".into()),
            };
            Ok(Outcome {
                body: with_echo(result, serde_json::to_value(opts)?, &["floor", "lanes", "exist_window"]),
                ok: true,
            })
        }
        Command::Eval {
            list,
            iou,
            width,
            fp_only,
        } => {
            let opts = EvalOptions {
                iou_threshold: iou,
                width,
                fp_only,
            };
            let (report, errors) = laneval::evaluate_corpus(&list, &opts)?;
            for e in &errors {
                eprintln!("skipped: {e}");
            }
            let mut body = serde_json::to_value(report)?;
            body["skipped"] = json!(errors.len());
            let config = json!({ "list": list, "iou": iou, "width": width, "fp_only": opts.fp_only });
            Ok(Outcome {
                body: with_echo(body, config, &["fp_only"]),
                ok: true,
            })
        }
        Command::GenCorpus {
            n,
            seed,
            occlusion,
            height,
            width,
            lanes,
            out,
        } => {
            let scene = SceneConfig {
                height,
                width,
                lanes,
                occlusion_rate: occlusion,
            };
            let summary = corpus::gen_corpus(&out, n, seed, &scene)?;
            eprintln!("wrote {n} images under {}", out.display());
            let config = json!({ "n": n, "seed": seed, "scene": scene, "out": out });
            Ok(Outcome {
                body: with_echo(
                    serde_json::to_value(summary)?,
                    config,
                    &["n", "seed", "occlusion", "height", "width", "lanes"],
                ),
                ok: true,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.body).expect("JSON values serialize"));
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
