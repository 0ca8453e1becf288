use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crumb::config::{flag_name, RunConfig, KEYS};
use crumb::pipeline::{parse_grid_axis, run_ablate, run_pretrain, run_report, run_stream};
use crumb::{Error, Result};

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("key = value configuration file"),
    );
    KEYS.iter().fold(cmd, |cmd, spec| {
        cmd.arg(
            Arg::new(spec.key)
                .long(flag_name(spec.key))
                .value_name("VALUE")
                .help(spec.help)
                .help_heading("Configuration overrides"),
        )
    })
}

fn cli() -> Command {
    Command::new("crumb")
        .about("Stream learning with compositional replay of codebook-quantized feature maps")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_flags(
            Command::new("pretrain").about("Pretrain extractor, classifier and codebook on held-out classes"),
        ))
        .subcommand(with_config_flags(
            Command::new("stream").about("Run the class-incremental stream from a pretrained checkpoint"),
        ))
        .subcommand(
            Command::new("report")
                .about("Aggregate run directories into accuracy tables and paired t-tests")
                .arg(
                    Arg::new("runs")
                        .required(true)
                        .num_args(1..)
                        .value_name("RUN_DIR")
                        .help("finished stream run directories"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .short('o')
                        .required(true)
                        .value_name("DIR")
                        .help("directory for accuracy.csv, runs.csv and ttest.csv"),
                )
                .arg(
                    Arg::new("filter")
                        .long("filter")
                        .action(ArgAction::SetTrue)
                        .help("drop runs with weak first-task accuracy (0.8, then 0.6, then 0.4)"),
                ),
        )
        .subcommand(with_config_flags(
            Command::new("ablate")
                .about("Expand a configuration grid into child stream runs and report them")
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .action(ArgAction::Append)
                        .required(true)
                        .value_name("KEY=V1,V2"),
                ),
        ))
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(&PathBuf::from(path))?,
        None => RunConfig::default(),
    };
    for spec in KEYS {
        if let Some(v) = m.get_one::<String>(spec.key) {
            cfg.set(spec.key, v.clone())?;
        }
    }
    Ok(cfg)
}

fn run(matches: &ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("pretrain", m)) => {
            let metrics = run_pretrain(&run_config(m)?)?;
            println!(
                "pretrain: {} epochs, train top-1 {:.4}{}",
                metrics.epochs,
                metrics.train_accuracy,
                metrics
                    .test_accuracy
                    .map(|a| format!(", test top-1 {a:.4}"))
                    .unwrap_or_default()
            );
        }
        Some(("stream", m)) => {
            let outcome = run_stream(&run_config(m)?)?;
            match outcome.summary {
                Some(s) => println!(
                    "stream: {} tasks, final all-seen top-1 {:.4}, buffer {} exemplars / {} bytes -> {}",
                    s.tasks_completed,
                    s.final_all_seen,
                    s.buffer_len,
                    s.buffer_bytes,
                    outcome.out_dir.display()
                ),
                None => println!("stream: stopped early -> {}", outcome.out_dir.display()),
            }
        }
        Some(("report", m)) => {
            let runs: Vec<PathBuf> = m.get_many::<String>("runs").unwrap().map(PathBuf::from).collect();
            let out = PathBuf::from(m.get_one::<String>("out").unwrap());
            let r = run_report(&runs, &out, m.get_flag("filter"))?;
            println!("report: {} run(s), {} comparison(s)", r.runs.len(), r.comparisons.len());
            for (name, t) in &r.comparisons {
                println!("  {name}: t = {:.4}, df = {}, p = {:.4e}", t.t, t.df, t.p);
            }
        }
        Some(("ablate", m)) => {
            let axes = m
                .get_many::<String>("grid")
                .unwrap()
                .map(|s| parse_grid_axis(s))
                .collect::<Result<Vec<_>>>()?;
            let children = run_ablate(&run_config(m)?, &axes)?;
            println!("ablate: {} child runs", children.len());
        }
        _ => return Err(Error::Config("unknown subcommand".into())),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
