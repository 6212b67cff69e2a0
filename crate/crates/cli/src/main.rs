mod args;
mod commands;
mod config;
mod error;
mod io;
mod manifest;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches};
use serde_json::json;

use crate::args::{Cli, Command};
use crate::error::{exit_code, CliError, CliResult};
use crate::manifest::{absolutize, digest_file, read_manifest, RunManifest, RunRecord};

fn report_error(err: &CliError) -> i32 {
    let category = err.category();
    eprintln!("error: {err}");
    eprintln!("{}", json!({"error": {"category": category.as_str(), "message": err.to_string()}}));
    err.exit_code()
}

fn dispatch(command: &Command, record: &mut RunRecord) -> CliResult<()> {
    match command {
        Command::GenPop(a) => commands::gen_pop(a, record),
        Command::Sample(a) => commands::sample(a, record),
        Command::Estimate(a) => commands::estimate(a, record),
        Command::Bands(a) => commands::bands(a, record),
        Command::McStudy(a) => commands::mc_study(a, record),
        Command::OracleCheck(a) => commands::oracle_check(a, record),
        Command::RateStudy(a) => commands::rate(a, record),
        Command::Replay(_) => Err(CliError::Internal("replay is not dispatched".into())),
    }
}

fn flush_stdout(record: &RunRecord) -> CliResult<()> {
    if !record.stdout.is_empty() {
        let mut out = std::io::stdout().lock();
        out.write_all(&record.stdout)?;
        out.flush()?;
    }
    Ok(())
}

fn emit_manifest(manifest: &RunManifest, path: Option<&Path>) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    match path {
        Some(p) => {
            std::fs::write(p, &bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display())))?
        }
        None => eprintln!("{}", serde_json::to_string(manifest)?),
    }
    Ok(())
}

fn manifest_for(command: &Command, record: RunRecord, started: Instant) -> RunManifest {
    RunManifest {
        command: command.name().to_string(),
        config: command.clone(),
        seed: command.seed(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: rayon::current_num_threads(),
        inputs: record.inputs,
        outputs: record.outputs,
        duration_seconds: started.elapsed().as_secs_f64(),
    }
}

fn replay(from: &Path, manifest_out: Option<&Path>, started: Instant) -> CliResult<()> {
    let original = read_manifest(from)?;
    if matches!(original.config, Command::Replay(_)) {
        return Err(CliError::Config("cannot replay a replay manifest".into()));
    }
    for input in &original.inputs {
        let now = digest_file(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Data(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let mut record = RunRecord::default();
    dispatch(&original.config, &mut record)?;
    flush_stdout(&record)?;
    let mismatched: Vec<String> = original
        .outputs
        .iter()
        .filter(|o| !record.outputs.contains(o))
        .map(|o| o.path.display().to_string())
        .collect();
    let identical = mismatched.is_empty() && record.outputs.len() == original.outputs.len();
    eprintln!(
        "{}",
        json!({"replayed": original.command, "identical": identical, "outputs": record.outputs.len(), "mismatched": mismatched})
    );
    let command = Command::Replay(args::ReplayArgs {
        from: from.to_path_buf(),
    });
    emit_manifest(&manifest_for(&command, record, started), manifest_out)?;
    if !identical {
        return Err(CliError::Internal(format!(
            "replay of {} produced different outputs: {}",
            original.command,
            if mismatched.is_empty() {
                "output count differs".to_string()
            } else {
                mismatched.join(", ")
            }
        )));
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    let manifest_out = cli.manifest.map(std::path::absolute).transpose()?;
    let mut command = cli.command;
    absolutize(&mut command)?;
    if let Command::Replay(a) = &command {
        return replay(&a.from, manifest_out.as_deref(), started);
    }
    let mut record = RunRecord::default();
    dispatch(&command, &mut record)?;
    flush_stdout(&record)?;
    let path = manifest_out.or_else(|| record.default_manifest_path(&command));
    emit_manifest(&manifest_for(&command, record, started), path.as_deref())
}

fn run(argv: Vec<String>) -> i32 {
    let cmd = Cli::command();
    let argv = match config::find_config_path(&argv) {
        Some(path) => match config::merge_config(&argv, Path::new(&path), &cmd) {
            Ok(v) => v,
            Err(e) => return report_error(&e),
        },
        None => argv,
    };
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let message = e.kind().to_string();
            eprintln!("{}", json!({"error": {"category": "config", "message": message}}));
            return exit_code(curveband_core::ErrorCategory::Config);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report_error(&CliError::Config(e.to_string())),
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn main() {
    std::process::exit(run(std::env::args().collect()));
}
