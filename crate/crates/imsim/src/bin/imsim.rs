//! Command-line front end: run or validate scenario files.
//!
//! Exit codes: 0 when every expectation passes, 1 when any fails,
//! 2 when a scenario cannot be loaded. Nothing else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use imsim::runner::run_scenario;
use imsim::scenario;

const USAGE: &str = "\
imsim - deterministic IMS core-network simulator

USAGE:
    imsim run <file> [--trace <out>] [--cdr <out>] [--seed <n>]
    imsim validate <file>
    imsim run-all <dir> [--seed <n>]

Scenario files are line-oriented; see README.md for the grammar.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("validate") => cmd_validate(&args[1..]),
        Some("run-all") => cmd_run_all(&args[1..]),
        _ => {
            eprint!("{USAGE}");
            2
        }
    };
    ExitCode::from(code as u8)
}

struct RunOpts {
    file: PathBuf,
    trace_out: Option<PathBuf>,
    cdr_out: Option<PathBuf>,
    seed: u64,
}

fn parse_run_opts(args: &[String]) -> Result<RunOpts, String> {
    let mut file = None;
    let mut trace_out = None;
    let mut cdr_out = None;
    let mut seed = 0u64;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--trace" => trace_out = Some(PathBuf::from(it.next().ok_or("--trace needs a path")?)),
            "--cdr" => cdr_out = Some(PathBuf::from(it.next().ok_or("--cdr needs a path")?)),
            "--seed" => {
                seed = it
                    .next()
                    .ok_or("--seed needs a number")?
                    .parse()
                    .map_err(|_| "bad --seed value".to_string())?
            }
            other if file.is_none() && !other.starts_with("--") => {
                file = Some(PathBuf::from(other))
            }
            other => return Err(format!("unexpected argument `{other}`")),
        }
    }
    Ok(RunOpts {
        file: file.ok_or("missing scenario file")?,
        trace_out,
        cdr_out,
        seed,
    })
}

fn cmd_run(args: &[String]) -> i32 {
    let opts = match parse_run_opts(args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            return 2;
        }
    };
    run_one(
        &opts.file,
        opts.seed,
        opts.trace_out.as_deref(),
        opts.cdr_out.as_deref(),
    )
}

fn run_one(file: &Path, seed: u64, trace_out: Option<&Path>, cdr_out: Option<&Path>) -> i32 {
    let sc = match scenario::load(file) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return 2;
        }
    };
    let report = run_scenario(sc, seed);
    for e in &report.expects {
        let status = if e.passed { "PASS" } else { "FAIL" };
        println!("{status} {}", e.description);
        if !e.passed {
            println!("     {}", e.detail);
        }
    }
    if let Some(path) = trace_out {
        if let Err(e) = std::fs::write(path, &report.trace) {
            eprintln!("cannot write trace: {e}");
        }
    }
    if let Some(path) = cdr_out {
        if let Err(e) = std::fs::write(path, &report.cdr) {
            eprintln!("cannot write cdr log: {e}");
        }
    }
    let failed = report.expects.iter().filter(|e| !e.passed).count();
    println!(
        "{}: {} expectations, {} failed",
        file.display(),
        report.expects.len(),
        failed
    );
    report.exit_code
}

fn cmd_validate(args: &[String]) -> i32 {
    let Some(file) = args.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    match scenario::load(Path::new(file)) {
        Ok(sc) => {
            println!(
                "{file}: ok ({} nodes, {} users, {} actions, {} expectations)",
                sc.nodes.len(),
                sc.users.len(),
                sc.actions.len(),
                sc.expects.len()
            );
            0
        }
        Err(e) => {
            eprintln!("{file}: {e}");
            2
        }
    }
}

/// Batch mode: every `*.scn` file in the directory, one simulation per
/// thread since runs share nothing.
fn cmd_run_all(args: &[String]) -> i32 {
    let Some(dir) = args.first().filter(|a| !a.starts_with("--")) else {
        eprint!("{USAGE}");
        return 2;
    };
    let mut seed = 0u64;
    if let Some(pos) = args.iter().position(|a| a == "--seed") {
        match args.get(pos + 1).and_then(|s| s.parse().ok()) {
            Some(s) => seed = s,
            None => {
                eprintln!("error: bad --seed value");
                return 2;
            }
        }
    }
    let mut files: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "scn"))
            .collect(),
        Err(e) => {
            eprintln!("{dir}: {e}");
            return 2;
        }
    };
    files.sort();
    if files.is_empty() {
        eprintln!("{dir}: no .scn files");
        return 2;
    }

    let results: Vec<(PathBuf, i32)> = std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .iter()
            .map(|f| {
                let f = f.clone();
                scope.spawn(move || {
                    let code = match scenario::load(&f) {
                        Ok(sc) => run_scenario(sc, seed).exit_code,
                        Err(_) => 2,
                    };
                    (f, code)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("runner thread"))
            .collect()
    });

    let mut worst = 0;
    for (file, code) in &results {
        let label = match code {
            0 => "PASS",
            1 => "FAIL",
            _ => "LOAD-ERROR",
        };
        println!("{label} {}", file.display());
    }
    if results.iter().any(|(_, c)| *c == 2) {
        worst = 2;
    } else if results.iter().any(|(_, c)| *c == 1) {
        worst = 1;
    }
    worst
}
