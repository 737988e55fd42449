//! `fskd` — dataset generation, episodic training, evaluation, detection
//! figures, uncertainty-weighted warping, gradient checking, and universal
//! prototype computation, all driven by one flat configuration file.

mod args;
mod commands;
mod errors;
mod figures;

use errors::CliError;

const USAGE: &str = "\
fskd <command> [options]

commands:
  gen-data    --config FILE [key=value ...]        generate the creature dataset
  train       --config FILE [--resume DIR] [k=v]   train a detector
  eval        --config FILE --checkpoint FILE      PCK metrics, calibration, overlays
  warp        --query FILE (--corr FILE | --checkpoint FILE) [--mode M] --out DIR
  grad-check  [--config FILE] [--out FILE]         finite-difference gradient suite
  ukp         --config FILE --checkpoint FILE      universal keypoint prototypes

options accept flat config overrides as key=value; see configs/ for examples.";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" {
        println!("{USAGE}");
        std::process::exit(if argv.is_empty() { 2 } else { 0 });
    }
    let command = argv[0].as_str();
    let rest = &argv[1..];
    let outcome = match command {
        "gen-data" => commands::gen_data(rest),
        "train" => commands::train(rest),
        "eval" => commands::eval(rest),
        "warp" => commands::warp(rest),
        "grad-check" => commands::grad_check(rest),
        "ukp" => commands::ukp(rest),
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    };
    if let Err(e) = outcome {
        // single-line machine-parsable failure report
        eprintln!("error: {}: {}", e.code, e.message.replace('\n', " "));
        std::process::exit(e.exit_code);
    }
}
