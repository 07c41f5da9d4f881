use clap::{Parser, Subcommand};
use sqgforge::cli_io::{self, CommandOutput, EXIT_USAGE};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sqgforge", version, about = "Desk-scale alternating convex integration for momentum SQG")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "SQGFORGE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the parameter inequalities in rigor mode.
    Params {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        a: f64,
        #[arg(long, default_value_t = 6)]
        qmax: usize,
        #[arg(long, default_value_t = 0.1)]
        smallness: f64,
        /// Write the CSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact audit of the direction sets.
    Geometry {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Run a manifest.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "sqgforge-out")]
        out: PathBuf,
    },
    /// Operator identity suite on random band-limited fields.
    CheckIdentities {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Gnuplot columns from a CSV table or an SQGF snapshot.
    Report { path: PathBuf },
}

fn emit(out: CommandOutput, file: Option<&PathBuf>) -> i32 {
    match file {
        Some(p) => {
            if let Err(e) = std::fs::write(p, &out.stdout) {
                eprintln!("error: {}: {e}", p.display());
                return cli_io::EXIT_IO;
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.stdout.as_bytes());
        }
    }
    out.code
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    sqgforge::par::init_threads(cli.threads.unwrap_or(0));
    let code = match cli.command {
        Command::Params {
            beta,
            b,
            a,
            qmax,
            smallness,
            out,
        } => emit(cli_io::cmd_params(beta, b, a, qmax, smallness), out.as_ref()),
        Command::Geometry { corrupt } => emit(cli_io::cmd_geometry(corrupt), None),
        Command::Run { config, out } => emit(cli_io::cmd_run(&config, &out), None),
        Command::CheckIdentities { seed, n, count } => emit(cli_io::cmd_check_identities(seed, n, count), None),
        Command::Report { path } => emit(cli_io::cmd_report(&path), None),
    };
    std::process::exit(code);
}
