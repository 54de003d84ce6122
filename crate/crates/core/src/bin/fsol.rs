use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use fsol::cli::{self, RunConfig};

fn command() -> Command {
    let keys = RunConfig::keys();
    let sub = |name: &'static str, about: &'static str| {
        let mut c = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").short('c').value_name("FILE").help("key = value config file"))
            .arg(
                Arg::new("synth")
                    .long("synth")
                    .value_name("PRESET")
                    .value_parser(["default"])
                    .help("use generated scenes, same as --dataset synth"),
            )
            .arg(Arg::new("no-sq").long("no-sq").action(ArgAction::SetTrue).help("same as --use-sq false"))
            .arg(Arg::new("no-dc").long("no-dc").action(ArgAction::SetTrue).help("same as --use-dc false"))
            .arg(Arg::new("no-ccdc").long("no-ccdc").action(ArgAction::SetTrue).help("same as --use-ccdc false"));
        for k in &keys {
            c = c.arg(Arg::new(k.clone()).long(k.replace('_', "-")).value_name("VALUE").hide_short_help(true));
        }
        c
    };
    Command::new("fsol")
        .about("One-shot object localization from a single exemplar box")
        .subcommand_required(true)
        .subcommand(sub("train", "train on the configured dataset and save checkpoint.bin"))
        .subcommand(sub("eval", "score a checkpoint (or dumped maps) on one split"))
        .subcommand(sub("predict", "localize objects in --image given --exemplar"))
        .subcommand(sub("verify", "run the self-check suites"))
        .subcommand(sub("synth", "write synthetic scenes and annotations.json"))
}

fn resolve(m: &ArgMatches) -> fsol::Result<RunConfig> {
    let mut overrides = Vec::new();
    for k in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(&k) {
            overrides.push((k, v.clone()));
        }
    }
    if m.get_one::<String>("synth").is_some() {
        overrides.push(("dataset".to_string(), "\"synth\"".to_string()));
    }
    for (flag, key) in [("no-sq", "use_sq"), ("no-dc", "use_dc"), ("no-ccdc", "use_ccdc")] {
        if m.get_flag(flag) {
            overrides.push((key.to_string(), "false".to_string()));
        }
    }
    RunConfig::resolve(m.get_one::<String>("config").map(PathBuf::from).as_deref(), &overrides)
}

fn run() -> fsol::Result<bool> {
    let matches = command().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(m)?;
    let log = |s: &str| eprintln!("{s}");
    match name {
        "train" => {
            cli::cmd_train(&cfg, log)?;
        }
        "eval" => print!("{}", cli::cmd_eval(&cfg, log)?.to_text()),
        "predict" => {
            let pts = cli::cmd_predict(&cfg)?;
            println!("image_id,x,y");
            for p in &pts.points {
                println!("{},{},{}", pts.image_id, p.x, p.y);
            }
        }
        "verify" => {
            let report = cli::cmd_verify(&cfg)?;
            print!("{}", report.to_text());
            return Ok(report.passed());
        }
        "synth" => println!("wrote {} scenes to {}", cli::cmd_synth(&cfg)?, cfg.out_dir.display()),
        _ => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
