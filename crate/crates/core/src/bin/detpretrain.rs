use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use detpretrain::commands::{cmd_ablation, cmd_evaluate, cmd_gradcheck, cmd_pretrain, cmd_propose, cmd_synth, write_text, EvalOptions};
use detpretrain::evaluation::StratifyConfig;
use detpretrain::numerics::OpKind;
use detpretrain::segmentation::SegmentationParams;
use detpretrain::training::TrainConfig;

const THREADS_ENV: &str = "DETPRETRAIN_THREADS";

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_parser(value_parser!(PathBuf)).required(true).help(help)
}

fn cli() -> Command {
    let pretrain = TrainConfig::KEYS.iter().fold(
        Command::new("pretrain")
            .about("Pre-train a model pair from a key = value config; flags override config keys")
            .arg(Arg::new("config").long("config").value_parser(value_parser!(PathBuf)))
            .arg(Arg::new("ablation").long("ablation").action(ArgAction::SetTrue).help("run the four loss-routing x proposal-source joint configurations")),
        |cmd, key| cmd.arg(Arg::new(*key).long(*key).value_name("VALUE")),
    );
    Command::new("detpretrain")
        .about("Self-supervised detector pre-training with unsupervised region proposals")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("propose")
                .about("Cache selective-search proposals for every image of a corpus")
                .arg(path_arg("corpus", "directory of .ppm images"))
                .arg(path_arg("cache", "output directory for .props files"))
                .arg(Arg::new("scale").long("scale").value_parser(value_parser!(f64)))
                .arg(Arg::new("sigma").long("sigma").value_parser(value_parser!(f64)))
                .arg(Arg::new("min_size").long("min_size").value_parser(value_parser!(usize))),
        )
        .subcommand(pretrain)
        .subcommand(
            Command::new("evaluate")
                .about("Class-agnostic recall, mAP and stratified errors of RPN proposals")
                .arg(path_arg("checkpoint", "model checkpoint"))
                .arg(path_arg("corpus", "directory of .ppm images with .gt annotations"))
                .arg(Arg::new("k").long("k").value_parser(value_parser!(usize)))
                .arg(Arg::new("iou").long("iou").value_parser(value_parser!(f64)))
                .arg(Arg::new("bg_thresh").long("bg_thresh").value_parser(value_parser!(f64)))
                .arg(Arg::new("format").long("format").value_parser(["table", "kv"]).default_value("table"))
                .arg(Arg::new("detections").long("detections").value_parser(value_parser!(PathBuf)).help("write detections here"))
                .arg(Arg::new("plot").long("plot").value_parser(value_parser!(PathBuf)).help("write an SVG precision/recall plot here")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every loss and layer family")
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0"))
                .arg(Arg::new("inject_fault").long("inject_fault").value_parser(value_parser!(OpKind)).hide(true)),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate an annotated synthetic corpus")
                .arg(Arg::new("n").long("n").value_parser(value_parser!(usize)).required(true))
                .arg(path_arg("out", "output directory"))
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0")),
        )
}

/// Exit status 1: the command ran but validation or the work itself failed.
fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn run(m: &ArgMatches) -> Result<ExitCode, detpretrain::Error> {
    match m.subcommand() {
        Some(("propose", a)) => {
            let d = SegmentationParams::default();
            let params = SegmentationParams {
                scale: a.get_one("scale").copied().unwrap_or(d.scale),
                sigma: a.get_one("sigma").copied().unwrap_or(d.sigma),
                min_size: a.get_one("min_size").copied().unwrap_or(d.min_size),
            };
            let s = cmd_propose(a.get_one::<PathBuf>("corpus").unwrap(), a.get_one::<PathBuf>("cache").unwrap(), &params)?;
            println!("{s}");
        }
        Some(("pretrain", a)) => {
            let mut cfg = match a.get_one::<PathBuf>("config") {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for key in TrainConfig::KEYS {
                if let Some(v) = a.get_one::<String>(key) {
                    cfg.set(key, v)?;
                }
            }
            cfg.validate()?;
            if a.get_flag("ablation") {
                for (name, r) in cmd_ablation(&cfg)? {
                    let last = r.log.last().map(|l| l.to_string()).unwrap_or_default();
                    println!("{name}: {} ({last})", r.checkpoint.display());
                }
            } else {
                let r = cmd_pretrain(&cfg)?;
                if let Some(last) = r.log.last() {
                    println!("final {last}");
                }
                println!("checkpoint {} ({} images skipped, {} snapshots)", r.checkpoint.display(), r.skipped_images, r.snapshots.len());
            }
        }
        Some(("evaluate", a)) => {
            let d = EvalOptions::default();
            let iou = a.get_one("iou").copied().unwrap_or(d.iou);
            let opts = EvalOptions {
                k: a.get_one("k").copied().unwrap_or(d.k),
                iou,
                stratify: StratifyConfig { fg_thresh: iou, bg_thresh: a.get_one("bg_thresh").copied().unwrap_or(d.stratify.bg_thresh) },
                ..d
            };
            let r = cmd_evaluate(a.get_one::<PathBuf>("checkpoint").unwrap(), a.get_one::<PathBuf>("corpus").unwrap(), &opts)?;
            if a.get_one::<String>("format").map(String::as_str) == Some("kv") {
                print!("{}", r.to_key_values());
            } else {
                print!("{r}");
            }
            if let Some(p) = a.get_one::<PathBuf>("detections") {
                write_text(p, &r.detections_text())?;
            }
            if let Some(p) = a.get_one::<PathBuf>("plot") {
                write_text(p, &r.pr_svg)?;
            }
        }
        Some(("gradcheck", a)) => {
            let r = cmd_gradcheck(*a.get_one("seed").unwrap(), a.get_one::<OpKind>("inject_fault").copied())?;
            println!("{r}");
            if !r.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Some(("synth", a)) => {
            let s = cmd_synth(*a.get_one("n").unwrap(), a.get_one::<PathBuf>("out").unwrap(), *a.get_one("seed").unwrap())?;
            println!("{s}");
        }
        _ => unreachable!("subcommand_required"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    return fail(e);
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    run(&matches).unwrap_or_else(fail)
}
