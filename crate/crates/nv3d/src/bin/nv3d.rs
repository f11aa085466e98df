//! Command-line front end: synthetic data export, training, inference,
//! evaluation, memory/time benchmarking and the self-check suites.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures
//! (including failed checks).

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use nv3d::apsp::{apsp_forward, ContextPair, GradMode};
use nv3d::check;
use nv3d::io::{self, Checkpoint, ManifestEntry};
use nv3d::losses;
use nv3d::net::Network;
use nv3d::taskgen::{self, TaskKind, TaskSpec};
use nv3d::tensor::{self, Dtype, Scalar, Tensor};
use nv3d::train::{self, TrainConfig};
use nv3d::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nv3d",
    version,
    about = "Memory-adaptive in-context learning for volumetric images"
)]
struct Cli {
    /// Cap the worker thread pool (default: one worker per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::from_str(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic episodes as .nvol volumes plus a TSV manifest.
    GenData {
        /// Comma-separated task names (default: all eight).
        #[arg(long, value_delimiter = ',', value_parser = parse_task)]
        tasks: Option<Vec<TaskKind>>,
        /// Number of episodes, assigned round-robin over the tasks.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Solved example pairs per episode (the target pair is extra).
        #[arg(long, default_value_t = 3)]
        context_size: usize,
        /// Cubic volume side length.
        #[arg(long, default_value_t = 16)]
        side: usize,
        /// Base seed; episode i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw the random augmentation pipeline per episode.
        #[arg(long)]
        augment: bool,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written at the end; holds the final parameters and
        /// optimizer state, so it can be resumed.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint's step counter and state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the best-validation parameters here.
        #[arg(long)]
        best_out: Option<PathBuf>,
    },
    /// Run a checkpoint on one target volume given solved context pairs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volume to transform.
        #[arg(long)]
        target: PathBuf,
        /// Context pair as IN:OUT volume paths; repeat for more pairs.
        #[arg(long = "context", value_name = "IN:OUT", required = true)]
        context: Vec<String>,
        /// Streaming chunk size; the prediction is identical for any value.
        #[arg(long, default_value_t = 3)]
        mini_context: usize,
        /// Task name; mask tasks also write a 0.5-thresholded companion.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        /// Output volume path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over tasks and context sizes into a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated task names (default: the tasks it trained on).
        #[arg(long, value_delimiter = ',', value_parser = parse_task)]
        tasks: Option<Vec<TaskKind>>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        context_sizes: Vec<usize>,
        /// Fresh episodes per (task, context size) cell.
        #[arg(long, default_value_t = 8)]
        repeats: usize,
        /// Volume side (default: the trained side).
        #[arg(long)]
        side: Option<usize>,
        #[arg(long, default_value_t = 3)]
        mini_context: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; omitted = print the CSV to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure peak tensor bytes and wall time per (L, ell) combination.
    Bench {
        /// Optional checkpoint; default is a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Context sizes to profile.
        #[arg(long = "l-list", value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
        l_list: Vec<usize>,
        /// Streaming chunk sizes to profile.
        #[arg(long = "ell-list", value_delimiter = ',', default_values_t = [1usize, 2, 4])]
        ell_list: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; omitted = print to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the self-verification suites and print one line per check.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Inject a deliberate gradient fault and verify it is detected.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Suite {
    Invariants,
    Gradients,
    All,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    #[value(name = "under_scale")]
    UnderScale,
    #[value(name = "drop_len_weight")]
    DropLenWeight,
}

impl From<FaultArg> for GradMode {
    fn from(f: FaultArg) -> GradMode {
        match f {
            FaultArg::UnderScale => GradMode::UnderScale,
            FaultArg::DropLenWeight => GradMode::DropLenWeight,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    let env_seed = match std::env::var("NV3D_SEED") {
        Ok(s) => match s.trim().parse::<u64>() {
            Ok(v) => Some(v),
            Err(_) => {
                eprintln!("error: NV3D_SEED must be an unsigned integer, got {s:?}");
                std::process::exit(1);
            }
        },
        Err(_) => None,
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            std::process::exit(1);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd, env_seed) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn run(cmd: Cmd, env_seed: Option<u64>) -> Result<i32> {
    match cmd {
        Cmd::GenData {
            tasks,
            count,
            context_size,
            side,
            seed,
            augment,
            out,
        } => {
            let tasks = tasks.unwrap_or_else(|| TaskKind::ALL.to_vec());
            let seed = env_seed.unwrap_or(seed);
            gen_data(&tasks, count, context_size, side, seed, augment, &out)?;
            Ok(0)
        }
        Cmd::Train {
            config,
            out,
            resume,
            best_out,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = TrainConfig::from_text(&text)?;
            if let Some(s) = env_seed {
                cfg.seed = s;
            }
            match cfg.dtype {
                Dtype::F32 => run_train::<f32>(cfg, resume.as_deref(), &out, best_out.as_deref())?,
                Dtype::F64 => run_train::<f64>(cfg, resume.as_deref(), &out, best_out.as_deref())?,
            }
            Ok(0)
        }
        Cmd::Infer {
            checkpoint,
            target,
            context,
            mini_context,
            task,
            out,
        } => {
            let ck = io::read_checkpoint(&checkpoint)?;
            let cfg = config_of(&ck)?;
            match cfg.dtype {
                Dtype::F32 => {
                    run_infer::<f32>(&ck, &target, &context, mini_context, task, &out)?
                }
                Dtype::F64 => {
                    run_infer::<f64>(&ck, &target, &context, mini_context, task, &out)?
                }
            }
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            tasks,
            context_sizes,
            repeats,
            side,
            mini_context,
            seed,
            out,
        } => {
            let ck = io::read_checkpoint(&checkpoint)?;
            let cfg = config_of(&ck)?;
            let tasks = tasks.unwrap_or_else(|| cfg.tasks.clone());
            let side = side.unwrap_or(cfg.side);
            let seed = env_seed.unwrap_or(seed);
            let rows = match cfg.dtype {
                Dtype::F32 => {
                    let (_, state) = train::unpack_checkpoint::<f32>(&ck)?;
                    train::evaluate(&state.net, &tasks, &context_sizes, repeats, side, mini_context, seed)?
                }
                Dtype::F64 => {
                    let (_, state) = train::unpack_checkpoint::<f64>(&ck)?;
                    train::evaluate(&state.net, &tasks, &context_sizes, repeats, side, mini_context, seed)?
                }
            };
            match out {
                Some(path) => {
                    io::write_report(&path, &rows)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => print!("{}", io::render_report(&rows)),
            }
            Ok(0)
        }
        Cmd::Bench {
            checkpoint,
            l_list,
            ell_list,
            side,
            seed,
            out,
        } => {
            let seed = env_seed.unwrap_or(seed);
            let csv = match checkpoint {
                Some(path) => {
                    let ck = io::read_checkpoint(&path)?;
                    let cfg = config_of(&ck)?;
                    match cfg.dtype {
                        Dtype::F32 => {
                            let (_, state) = train::unpack_checkpoint::<f32>(&ck)?;
                            bench(&state.net, &l_list, &ell_list, side, seed)?
                        }
                        Dtype::F64 => {
                            let (_, state) = train::unpack_checkpoint::<f64>(&ck)?;
                            bench(&state.net, &l_list, &ell_list, side, seed)?
                        }
                    }
                }
                None => {
                    let net = Network::<f32>::init(Default::default(), seed)?;
                    bench(&net, &l_list, &ell_list, side, seed)?
                }
            };
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("wrote benchmark to {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(0)
        }
        Cmd::Check { suite, fault } => {
            let report = match fault {
                Some(mode) => check::fault_checks(mode.into()),
                None => match suite {
                    Suite::Invariants => check::invariant_checks(),
                    Suite::Gradients => check::gradient_checks(),
                    Suite::All => check::all_checks(),
                },
            };
            print!("{}", report.render());
            if report.all_passed() {
                Ok(0)
            } else {
                let failed = report.lines.iter().filter(|l| !l.passed).count();
                eprintln!("{failed} check(s) failed");
                Ok(2)
            }
        }
    }
}

fn config_of(ck: &Checkpoint) -> Result<TrainConfig> {
    let map = io::parse_config(&ck.config)?;
    TrainConfig::from_map(&map)
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    tasks: &[TaskKind],
    count: usize,
    context_size: usize,
    side: usize,
    seed: u64,
    augment: bool,
    out: &Path,
) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::invalid("gen-data needs at least one task"));
    }
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let kind = tasks[i % tasks.len()];
        let ep_seed = seed + i as u64;
        let spec = TaskSpec::new(kind, side).with_augment(augment);
        let ep = taskgen::sample_episode(&spec, context_size, ep_seed)?;
        let mut pairs = Vec::with_capacity(ep.context.len() + 1);
        let dump = |tag: String, input: &Tensor<f64>, output: &Tensor<f64>| -> Result<(String, String)> {
            let in_name = format!("ep{i:05}_{tag}_in.nvol");
            let out_name = format!("ep{i:05}_{tag}_out.nvol");
            io::write_nvol(&out.join(&in_name), &input.cast::<f32>())?;
            io::write_nvol(&out.join(&out_name), &output.cast::<f32>())?;
            Ok((in_name, out_name))
        };
        for (j, p) in ep.context.iter().enumerate() {
            pairs.push(dump(format!("ctx{j}"), &p.input, &p.output)?);
        }
        pairs.push(dump("target".into(), &ep.target.input, &ep.target.output)?);
        entries.push(ManifestEntry {
            kind,
            seed: ep_seed,
            pairs,
        });
    }
    let manifest = out.join("manifest.tsv");
    io::write_manifest(&manifest, &entries)?;
    println!(
        "wrote {count} episodes ({} files) to {}",
        count * (context_size + 1) * 2 + 1,
        out.display()
    );
    Ok(())
}

fn run_train<T: Scalar>(
    cfg: TrainConfig,
    resume: Option<&Path>,
    out: &Path,
    best_out: Option<&Path>,
) -> Result<()> {
    let resume_state = match resume {
        Some(path) => {
            let ck = io::read_checkpoint(path)?;
            let stored = config_of(&ck)?;
            if stored.dtype != cfg.dtype {
                return Err(Error::invalid(format!(
                    "resume checkpoint is {:?} but the config asks for {:?}",
                    stored.dtype, cfg.dtype
                )));
            }
            let (_, state) = train::unpack_checkpoint::<T>(&ck)?;
            Some(state)
        }
        None => None,
    };
    let result = train::train::<T>(&cfg, resume_state, |log| println!("{log}"))?;
    let ck = train::pack_checkpoint(
        &cfg,
        &result.last,
        Some(&result.adam),
        result.steps_done,
        result.lr,
        result.best_val,
    );
    io::write_checkpoint(out, &ck)?;
    if let Some(path) = best_out {
        let best = train::pack_checkpoint(
            &cfg,
            &result.best,
            None,
            result.steps_done,
            result.lr,
            result.best_val,
        );
        io::write_checkpoint(path, &best)?;
    }
    println!(
        "done: steps={} best_val={:.6} checkpoint={}",
        result.steps_done,
        result.best_val,
        out.display()
    );
    Ok(())
}

fn run_infer<T: Scalar>(
    ck: &Checkpoint,
    target: &Path,
    context: &[String],
    mini: usize,
    task: Option<TaskKind>,
    out: &Path,
) -> Result<()> {
    let (_, state) = train::unpack_checkpoint::<T>(ck)?;
    let x = io::read_nvol(target)?.cast::<T>();
    let mut pairs = Vec::with_capacity(context.len());
    for spec in context {
        let (a, b) = spec.split_once(':').ok_or_else(|| {
            Error::invalid(format!("context {spec:?} is not of the form IN:OUT"))
        })?;
        let input = io::read_nvol(Path::new(a))?.cast::<T>();
        let output = io::read_nvol(Path::new(b))?.cast::<T>();
        pairs.push(ContextPair::new(input, output)?);
    }
    let y = apsp_forward(&state.net, &x, &pairs, mini)?;
    io::write_nvol(out, &y.cast::<f32>())?;
    println!("wrote {}", out.display());
    if let Some(kind) = task {
        if losses::is_mask_task(kind) {
            let half = T::from_f64(0.5);
            let mask = y.map(|v| if v > half { T::one() } else { T::zero() });
            let stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "out".into());
            let mask_path = out.with_file_name(format!("{stem}_mask.nvol"));
            io::write_nvol(&mask_path, &mask.cast::<f32>())?;
            println!("wrote {}", mask_path.display());
        }
    }
    Ok(())
}

fn bench<T: Scalar>(
    net: &Network<T>,
    l_list: &[usize],
    ell_list: &[usize],
    side: usize,
    seed: u64,
) -> Result<String> {
    if l_list.is_empty() || ell_list.is_empty() {
        return Err(Error::invalid("bench needs at least one L and one ell"));
    }
    let max_l = *l_list.iter().max().unwrap();
    let pairs64 = check::noise_pairs(max_l, side, seed.wrapping_mul(2).wrapping_add(9))?;
    let pairs: Vec<ContextPair<T>> = pairs64.iter().map(|p| p.cast::<T>()).collect();
    let x = check::noise_volume(side, seed.wrapping_mul(2).wrapping_add(1))?.cast::<T>();
    let mut csv = String::from("L,ell,peak_bytes,seconds\n");
    for &l in l_list {
        for &ell in ell_list {
            let slice = &pairs[..l];
            let baseline = tensor::reset_peak();
            let started = Instant::now();
            let y = apsp_forward(net, &x, slice, ell)?;
            let secs = started.elapsed().as_secs_f64();
            let peak = tensor::mem_stats().peak_bytes - baseline;
            drop(y);
            csv.push_str(&format!("{l},{ell},{peak},{secs:.6}\n"));
        }
    }
    Ok(csv)
}
