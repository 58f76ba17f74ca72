//! `bifdetect`: simulate, identify, tune and detect from the command line.

mod commands;
mod config;
mod target_file;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};

use commands::CliError;
use config::{RunConfig, KEYS};

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("key = value configuration file"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help_heading("Config overrides")
                .help(*help),
        )
    })
}

fn path_arg(name: &'static str, required: bool, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn cli() -> Command {
    Command::new("bifdetect")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Detect local bifurcations from trajectory data via learned conjugacies")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .global(true)
                .value_name("N")
                .value_parser(value_parser!(usize))
                .help("worker threads (default: available parallelism)"),
        )
        .subcommand(with_config_args(
            Command::new("simulate").about("Write one dataset per parameter on the grid"),
        ))
        .subcommand(
            with_config_args(Command::new("koopman").about("Scan Koopman eigenvalues and select a target"))
                .arg(path_arg("dataset", true, "dataset CSV")),
        )
        .subcommand(
            with_config_args(Command::new("tune").about("Write the mu, beta and P sweep tables"))
                .arg(path_arg("dataset", true, "dataset CSV"))
                .arg(path_arg("target", false, "target file (default: built from the config)")),
        )
        .subcommand(
            with_config_args(Command::new("detect").about("Sweep the parameter grid and flag bifurcations"))
                .arg(path_arg("target", false, "target file (default: built from the config)")),
        )
        .subcommand(with_config_args(
            Command::new("resonance").about("Check the reference spectrum for resonances"),
        ))
}

/// File values first, then command-line overrides in key order.
fn load_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut pairs = match m.get_one::<PathBuf>("config") {
        Some(path) => RunConfig::parse_file(path).map_err(CliError::config)?,
        None => Vec::new(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            pairs.push((key.to_string(), v.clone()));
        }
    }
    RunConfig::from_pairs(&pairs).map_err(CliError::config)
}

fn init_logging() {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if std::env::var_os("NO_COLOR").is_some() {
        builder.write_style(env_logger::WriteStyle::Never);
    }
    builder.init();
}

fn run(matches: &ArgMatches) -> Result<(), CliError> {
    if let Some(&jobs) = matches.get_one::<usize>("jobs") {
        if jobs == 0 {
            return Err(CliError::config("jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::new(commands::EXIT_OTHER, e.to_string()))?;
    }
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    let path = |key: &str| sub.get_one::<PathBuf>(key).map(PathBuf::as_path);
    match name {
        "simulate" => commands::cmd_simulate(&cfg),
        "koopman" => commands::cmd_koopman(&cfg, path("dataset").expect("required")),
        "tune" => commands::cmd_tune(&cfg, path("dataset").expect("required"), path("target")),
        "detect" => commands::cmd_detect(&cfg, path("target")),
        "resonance" => commands::cmd_resonance(&cfg),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    init_logging();
    match run(&matches) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn overrides_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "tau = 0.2\nM = 7\n").unwrap();
        let m = cli()
            .try_get_matches_from(["bifdetect", "simulate", "--config", path.to_str().unwrap(), "--tau", "0.05", "--alpha0", "-3"])
            .unwrap();
        let cfg = load_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!((cfg.tau, cfg.m, cfg.alpha0), (0.05, 7, -3.0));
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!(cli().try_get_matches_from(["bifdetect", "simulate", "--colour", "blue"]).is_err());
    }
}
