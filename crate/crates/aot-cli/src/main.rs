//! Command-line surface: synthetic data generation, sequence running, toy
//! training, the multi-object scaling benchmark, and attention-map dumps.
//!
//! Exit codes: 0 success, 2 usage/parse/shape errors, 3 capacity (more
//! objects than identities), 4 unstable benchmark timings.

mod args;
mod commands;

use aot_core::error::Error;

pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match e {
            Error::Capacity { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<args::UsageError> for CliError {
    fn from(e: args::UsageError) -> CliError {
        CliError {
            code: 2,
            message: e.0,
        }
    }
}

const USAGE: &str = "aot: multi-object video mask propagation engine

Usage:
  aot gen            --out DIR [--size 64] [--frames 5] [--objects 3]
                     [--shapes rect,ellipse] [--speed 3] [--seed 7]
                     [--no-occlusion]
  aot run            --frames DIR --ref MASK.pgm --variant aot-t|aot-s|aot-b|aot-l
                     --weights DIR --out DIR [--baseline none|softmax|softagg]
  aot train          --out DIR [--steps 500] [--lr 1e-3] [--wd 0.01] [--seed 7]
                     [--seqs 8] [--holdout 2] [--size 64] [--seq-len 5]
                     [--objects 3] [--teacher-forcing] [--variant aot-s]
                     [--channels 32] [--heads 2] [--lambda 7] [--m 10]
  aot bench-scaling  --sizes 64,128 --objects 1,2,5,10 --repeats 20 --out CSV
                     (--random-init | --weights DIR) [--seed 7] [--channels 32]
                     [--heads 2] [--layers 2] [--lambda 7]
  aot dump-attention --frames DIR --ref MASK.pgm --weights DIR --layer L
                     --kind long|short --frame T --out DIR

Frames are PPM (P6) files frame_0001.ppm, ...; label rasters are PGM (P5)
files with object indices as pixel values (0 = background). AOT_THREADS caps
internal parallelism and is echoed into benchmark CSV headers.
";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = match argv.split_first() {
        None => {
            eprintln!("{USAGE}");
            2
        }
        Some((cmd, rest)) => {
            let outcome = match cmd.as_str() {
                "gen" => commands::gen::run(rest),
                "run" => commands::run::run(rest),
                "train" => commands::train::run(rest),
                "bench-scaling" => commands::bench::run(rest),
                "dump-attention" => commands::dump::run(rest),
                "help" | "--help" | "-h" => {
                    println!("{USAGE}");
                    Ok(())
                }
                other => Err(CliError {
                    code: 2,
                    message: format!("unknown command {other:?}"),
                }),
            };
            match outcome {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {}", e.message);
                    if e.code == 2 {
                        eprintln!("\n{USAGE}");
                    }
                    e.code
                }
            }
        }
    };
    std::process::exit(code);
}
