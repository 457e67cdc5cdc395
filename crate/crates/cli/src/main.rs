use std::io::{self, Write};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use rfcn_cli::commands::{
    eval_cmd, gen_phantom, gradcheck_cmd, predict_cmd, train_cmd, EvalArgs, GenPhantomArgs, GradcheckArgs, PredictArgs,
    TrainArgs,
};

/// FCN/RFCN left-ventricle segmentation of short-axis slice stacks.
#[derive(Debug, Parser)]
#[command(name = "rfcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a family of synthetic stacks and a manifest.
    GenPhantom(GenPhantomArgs),
    /// Train FCN or RFCN; the per-epoch CSV log goes to stdout.
    Train(TrainArgs),
    /// Score a checkpoint on a stack directory and write a JSON report.
    Eval(EvalArgs),
    /// Segment one stack.
    Predict(PredictArgs),
    /// Finite-difference check of every layer and an end-to-end RFCN.
    Gradcheck(GradcheckArgs),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenPhantom(args) => {
            let paths = gen_phantom(&args)?;
            eprintln!("wrote {} stacks to {}", paths.len(), args.out.display());
        }
        Command::Train(args) => {
            train_cmd(&args, &mut io::stdout().lock(), &mut io::stderr())?;
        }
        Command::Eval(args) => {
            let report = eval_cmd(&args)?;
            let a = &report.aggregate;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "slices {}  dice {:.4} ({:.4})  gc {}%  apd {} mm",
                a.slices,
                a.dice_mean,
                a.dice_sd,
                fmt(a.gc_percent),
                fmt(a.apd_good_mean_mm)
            );
        }
        Command::Predict(args) => {
            let masks = predict_cmd(&args)?;
            eprintln!("wrote {} slice masks to {}", masks.len(), args.out.display());
        }
        Command::Gradcheck(args) => {
            let mut out = io::stdout().lock();
            let ok = gradcheck_cmd(&args, &mut out)?;
            out.flush()?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
