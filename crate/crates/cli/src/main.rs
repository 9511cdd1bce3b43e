mod args;
mod commands;
mod failure;
mod manifest;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Session;
use failure::{Failure, EXIT_COMPARISON};
use manifest::{digest, normalize_args, sha256_file, FileDigest, RunManifest, MANIFEST_NAME};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(run(&argv) as u8)
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => failure::EXIT_VALIDATION,
            };
        }
    };
    let outcome = match &cli.command {
        Command::Replay { manifest } => replay(manifest, &cli.common.out),
        _ => execute(&cli, &argv[1..]),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn execute(cli: &Cli, raw_args: &[String]) -> Result<(), Failure> {
    let out = &cli.common.out;
    fs::create_dir_all(out)
        .map_err(|e| Failure::validation(format!("cannot create output directory `{}`: {e}", out.display())))?;
    let mut session = Session::new(&cli.common);
    let result = match &cli.command {
        Command::Spectrum => commands::spectrum(&mut session),
        Command::Sweep { axis } => commands::sweep_cmd(&mut session, axis),
        Command::Oracle {
            regime,
            target,
            tolerance,
        } => commands::oracle(&mut session, *regime, *target, *tolerance),
        Command::Fit(cmd) => commands::fit(&mut session, cmd),
        Command::Replay { .. } => unreachable!("replay is dispatched separately"),
    };
    print!("{}", session.report);
    for w in &session.warnings {
        eprintln!("warning: {w}");
    }
    // Outputs are kept, with their manifest, even when a comparison fails.
    if !session.outputs.is_empty() {
        let outputs = session
            .outputs
            .iter()
            .map(|p| {
                let mut d = digest(p)?;
                d.path = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(d)
            })
            .collect::<std::io::Result<Vec<FileDigest>>>()?;
        let m = RunManifest {
            command: command_name(&cli.command),
            args: normalize_args(raw_args),
            tool_version: VERSION.into(),
            config: session.config.clone(),
            inputs: session.inputs.clone(),
            seed: session.seed,
            outputs,
            warnings: session.warnings.clone(),
            exit_code: result.as_ref().map_or_else(|f| f.code, |_| 0),
        };
        m.write(out)?;
    }
    result
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Spectrum => "spectrum".into(),
        Command::Sweep { .. } => "sweep".into(),
        Command::Oracle { .. } => "oracle".into(),
        Command::Fit(f) => format!("fit {}", f.name()),
        Command::Replay { .. } => "replay".into(),
    }
}

/// Re-runs a recorded command into `out` and checks every output digest.
fn replay(manifest_path: &Path, out: &Path) -> Result<(), Failure> {
    let recorded = RunManifest::read(manifest_path)
        .map_err(|e| Failure::validation(format!("cannot read manifest `{}`: {e}", manifest_path.display())))?;
    if let (Ok(a), Ok(b)) = (
        fs::canonicalize(manifest_path.parent().unwrap_or(Path::new("."))),
        fs::canonicalize(out),
    ) {
        if a == b {
            return Err(Failure::validation(
                "replay --out must differ from the directory holding the manifest",
            ));
        }
    }
    if recorded.tool_version != VERSION {
        eprintln!(
            "warning: manifest written by version {}, replaying with {VERSION}",
            recorded.tool_version
        );
    }
    for input in &recorded.inputs {
        let now = sha256_file(Path::new(&input.path))
            .map_err(|e| Failure::validation(format!("input `{}` unavailable: {e}", input.path)))?;
        if now != input.sha256 {
            return Err(Failure::validation(format!("input `{}` changed since the recorded run", input.path)));
        }
    }

    let mut argv = vec!["opo-noise".to_string()];
    argv.extend(recorded.args.iter().cloned());
    argv.push("--out".into());
    argv.push(out.display().to_string());
    let code = run(&argv);
    if code != recorded.exit_code {
        return Err(Failure {
            code: if code == 0 { EXIT_COMPARISON } else { code },
            message: format!(
                "replayed `{}` exited with {code}, recorded run exited with {}",
                recorded.command, recorded.exit_code
            ),
        });
    }

    let fresh = RunManifest::read(&out.join(MANIFEST_NAME))?;
    let mut mismatched = Vec::new();
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|d| d.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => println!("identical: {}", old.path),
            _ => mismatched.push(old.path.clone()),
        }
    }
    if fresh.outputs.len() != recorded.outputs.len() {
        mismatched.push(format!("output count {} vs {}", fresh.outputs.len(), recorded.outputs.len()));
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_COMPARISON,
            message: format!("replay differs from the recorded run: {}", mismatched.join(", ")),
        })
    }
}
