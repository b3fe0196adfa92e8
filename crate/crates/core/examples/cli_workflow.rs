//! Drives the command-line front end in-process through a tiny end-to-end run:
//! simulate, the three training stages, evaluation and separation.

use clap::Parser;
use geco::cli::{execute, Cli};

fn main() {
    let out = std::env::temp_dir().join("geco-cli-workflow");
    let out = out.to_str().expect("utf-8 temp path");
    let tiny = [
        "--set", "splits.train=40", "--set", "splits.val=4", "--set", "splits.test=8",
        "--set", "training.separator.epochs=2", "--set", "training.geco.epochs=2",
        "--set", "training.finetune.epochs=2",
    ];
    let mix = format!("{out}/data/test/");
    let steps: Vec<Vec<&str>> = vec![
        vec!["simulate"],
        vec!["train-sep"],
        vec!["train-geco"],
        vec!["finetune"],
        vec!["eval", "--mode", "sep_only"],
        vec!["eval", "--mode", "fastgeco"],
    ];
    for step in steps {
        let mut argv = vec!["geco"];
        argv.extend(&step);
        argv.extend(["--out", out, "--force"]);
        argv.extend(tiny);
        match execute(Cli::parse_from(&argv)) {
            Ok(msg) => println!("{}: {msg}", step.join(" ")),
            Err(e) => {
                eprintln!("{}: {e}", step.join(" "));
                std::process::exit(geco::cli::exit_code(&e));
            }
        }
    }
    let first = std::fs::read_dir(&mix)
        .expect("simulated test split")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.to_string_lossy().ends_with("_mix.wav"))
        .expect("a test mixture");
    let argv = ["geco", "separate", first.to_str().unwrap(), "--mode", "geco", "--out", out, "--force"];
    match execute(Cli::parse_from(argv)) {
        Ok(msg) => println!("separate:\n{msg}"),
        Err(e) => eprintln!("separate: {e}"),
    }
}
