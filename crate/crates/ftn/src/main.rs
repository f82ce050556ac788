use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use ftn::config::{key_names, Experiment, Settings};
use ftn::experiments::{best_per_method, classify, grid_search, recovery};
use ftn::{selftest, CliError};

fn with_overrides(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("INI configuration file; defaults are used for missing keys"),
    );
    key_names().fold(cmd, |cmd, key| {
        let arg = Arg::new(key).long(key).value_name("VALUE").help("overrides the configuration key of the same name");
        let arg = match key {
            "armijo" => arg.num_args(0..=1).default_missing_value("true").conflicts_with("fixed-step"),
            _ => arg,
        };
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    Command::new("ftn")
        .about("Train functional tree tensor networks with (natural) Riemannian gradient methods")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_overrides(Command::new("recovery").about("Recovery problem under change of basis")))
        .subcommand(with_overrides(Command::new("classify").about("Image classification with multinomial logistic loss")))
        .subcommand(
            Command::new("selftest").about("Tiny-instance oracle suite").arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .value_name("PATH")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("also verify the Stiefel invariants of a saved checkpoint"),
            ),
        )
        .subcommand(
            with_overrides(Command::new("grid-search").about("Repeat a run over values of one configuration key"))
                .arg(Arg::new("param").long("param").required(true).value_name("KEY").help("configuration key to vary, e.g. fixed-step"))
                .arg(
                    Arg::new("values")
                        .long("values")
                        .required(true)
                        .num_args(1..)
                        .value_delimiter(',')
                        .value_name("V")
                        .help("values to try (comma or space separated)"),
                )
                .arg(
                    Arg::new("kind")
                        .long("kind")
                        .value_parser(["recovery", "classify"])
                        .help("experiment kind when not given by the config file (default classify)"),
                ),
        )
}

/// The experiment named in a config file, if any.
fn experiment_in(path: &Path) -> Result<Option<Experiment>, CliError> {
    let ini = ini::Ini::load_from_file(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let found = ini.iter().find_map(|(_, props)| props.get("experiment").map(str::to_string));
    match found.as_deref().map(str::trim) {
        None => Ok(None),
        Some("recovery") => Ok(Some(Experiment::Recovery)),
        Some("classify") => Ok(Some(Experiment::Classify)),
        Some(other) => Err(CliError::Config(format!("unknown experiment '{other}'"))),
    }
}

fn settings(exp: Experiment, m: &ArgMatches) -> Result<Settings, CliError> {
    let mut s = match m.get_one::<PathBuf>("config") {
        Some(p) => Settings::load(exp, p)?,
        None => Settings::defaults(exp),
    };
    for key in key_names() {
        if let Some(v) = m.get_one::<String>(key) {
            s.set(key, v)?;
        }
    }
    Ok(s)
}

/// Worker count: explicit flag, then `FTN_THREADS`, then the config value;
/// 0 means all available cores.
fn init_threads(s: &Settings, m: &ArgMatches) -> Result<(), CliError> {
    let mut threads = s.threads()?;
    if m.get_one::<String>("threads").is_none() {
        if let Ok(v) = std::env::var("FTN_THREADS") {
            threads = v.trim().parse().map_err(|_| CliError::Config(format!("bad FTN_THREADS value '{v}'")))?;
        }
    }
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> Result<(), CliError> {
    match matches.subcommand() {
        Some(("recovery", m)) => {
            let s = settings(Experiment::Recovery, m)?;
            init_threads(&s, m)?;
            let out = s.output_dir()?;
            let report = recovery(&s, Some(&out))?;
            print!("{}", report.summary());
            println!("outputs written to {}", out.display());
        }
        Some(("classify", m)) => {
            let s = settings(Experiment::Classify, m)?;
            init_threads(&s, m)?;
            let out = s.output_dir()?;
            let report = classify(&s, Some(&out))?;
            print!("{}", report.summary());
            println!("outputs written to {}", out.display());
        }
        Some(("selftest", m)) => {
            let checks = selftest::run_all(m.get_one::<PathBuf>("checkpoint").map(PathBuf::as_path));
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                return Err(CliError::Numerical(ftn_core::FtnError::InvalidArgument(format!("self test failed: {}", c.name))));
            }
        }
        Some(("grid-search", m)) => {
            let from_file = match m.get_one::<PathBuf>("config") {
                Some(p) => experiment_in(p)?,
                None => None,
            };
            let exp = match (from_file, m.get_one::<String>("kind").map(String::as_str)) {
                (Some(e), _) => e,
                (None, Some("recovery")) => Experiment::Recovery,
                _ => Experiment::Classify,
            };
            let s = settings(exp, m)?;
            init_threads(&s, m)?;
            let param = m.get_one::<String>("param").expect("required");
            let values: Vec<String> = m.get_many::<String>("values").expect("required").cloned().collect();
            let out = s.output_dir()?.join("grid");
            let points = grid_search(&s, param, &values, Some(&out))?;
            println!("{:<14} {:<10} {:>14}", param, "method", "score");
            for p in &points {
                println!("{:<14} {:<10} {:>14}", p.value, p.method.to_string(), p.score.map_or("failed".into(), |v| format!("{v:.6}")));
            }
            for (method, value, score) in best_per_method(exp, &points) {
                println!("best for {method}: {param} = {value} (score {score:.6})");
            }
            println!("outputs written to {}", out.display());
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
