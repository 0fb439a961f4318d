use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use maskfed::datadist::{generate_synthetic, SyntheticSpec};
use maskfed::fixedpoint::decode_model;
use maskfed::harness::{
    read_model, run_client, run_coordinator, run_mock, run_regime_suite, Experiment, HarnessError, MockOptions,
    OutputDir, RecordingStream, RunConfig,
};
use maskfed::metrics::EvalReport;
use maskfed::protocol::connect_clients;
use maskfed::trainer::predict;
use maskfed::Dataset;

#[derive(Parser)]
#[command(name = "maskfed", version, about = "Federated logistic regression with pairwise-masked aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spawn every client as a child process and coordinate the session.
    Run(RunArgs),
    /// Coordinate a session with clients that are already listening.
    Coordinator(CoordinatorArgs),
    /// Serve one client of a session.
    Client(ClientArgs),
    /// Simulate all clients in one process.
    Mock(MockArgs),
    /// Run the three data-distribution regimes and compare them.
    Suite(ConfigArg),
    /// Write a synthetic two-cluster dataset as CSV.
    GenData(GenDataArgs),
    /// Score a saved model on a CSV dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct OutArgs {
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the raw bytes received from each client into this directory.
    #[arg(long, hide = true)]
    record_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CoordinatorArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    out: OutArgs,
    /// Fault injection: this client drops out when round `--crash-round` starts.
    #[arg(long, hide = true, requires = "crash_round")]
    crash_client: Option<u32>,
    #[arg(long, hide = true, requires = "crash_client")]
    crash_round: Option<u64>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    id: u32,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, hide = true)]
    crash_at_round: Option<u64>,
}

#[derive(Args)]
struct MockArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Average in floating point instead of the fixed-point path.
    #[arg(long)]
    float_aggregate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 2.0)]
    sep: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Target correlation between the label and the age attribute.
    #[arg(long, default_value_t = 0.3)]
    corr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Coordinator(a) => cmd_coordinator(a),
        Cmd::Client(a) => cmd_client(a),
        Cmd::Mock(a) => cmd_mock(a),
        Cmd::Suite(a) => cmd_suite(a),
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn load_experiment(path: &Path, out: Option<PathBuf>) -> Result<Experiment, HarnessError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Experiment::load(cfg)
}

fn coordinate(exp: &Experiment, record_dir: Option<&Path>) -> Result<(), HarnessError> {
    let out = OutputDir::create(&exp.cfg.out_dir)?;
    let links = connect_clients(&exp.session_config())?;
    let result = match record_dir {
        None => run_coordinator(exp, links, Some(&out)).map(|_| ()),
        Some(dir) => {
            let links: Vec<_> = links.into_iter().map(RecordingStream::new).collect();
            let logs: Vec<Arc<Mutex<Vec<u8>>>> = links.iter().map(|l| l.received()).collect();
            let result = run_coordinator(exp, links, Some(&out)).map(|_| ());
            let rec = OutputDir::create(dir)?;
            for (id, log) in logs.iter().enumerate() {
                rec.write(&format!("received_client_{id}.bin"), &log.lock().unwrap())?;
            }
            result
        }
    };
    if result.is_ok() {
        info!("final model written to {}", out.path.join(maskfed::harness::FINAL_MODEL).display());
    }
    result
}

fn cmd_coordinator(a: CoordinatorArgs) -> Result<(), HarnessError> {
    let exp = load_experiment(&a.config.config, a.out.out)?;
    coordinate(&exp, a.out.record_dir.as_deref())
}

struct Children(Vec<Child>);

impl Children {
    fn kill_all(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
        }
    }

    fn wait_all(&mut self) -> bool {
        let mut clean = true;
        for c in &mut self.0 {
            match c.wait() {
                Ok(status) if status.success() => {}
                Ok(status) => {
                    warn!("client process {} exited with {status}", c.id());
                    clean = false;
                }
                Err(e) => {
                    warn!("waiting for client process {}: {e}", c.id());
                    clean = false;
                }
            }
        }
        clean
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        self.kill_all();
        for c in &mut self.0 {
            let _ = c.wait();
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), HarnessError> {
    let exp = load_experiment(&a.config.config, a.out.out)?;
    let exe = std::env::current_exe().map_err(|e| HarnessError::io(Path::new("maskfed"), e))?;
    let mut children = Children(Vec::new());
    for c in &exp.cfg.clients {
        let mut cmd = Command::new(&exe);
        cmd.arg("client").arg("--id").arg(c.id.to_string()).arg("--config").arg(&a.config.config).stdin(Stdio::null());
        if a.crash_client == Some(c.id) {
            cmd.arg("--crash-at-round").arg(a.crash_round.unwrap().to_string());
        }
        let child = cmd.spawn().map_err(|e| HarnessError::io(&exe, e))?;
        info!("spawned client {} as process {}", c.id, child.id());
        children.0.push(child);
    }
    match coordinate(&exp, a.out.record_dir.as_deref()) {
        Ok(()) => {
            if !children.wait_all() {
                warn!("some client processes did not exit cleanly");
            }
            Ok(())
        }
        Err(e) => {
            children.kill_all();
            Err(e)
        }
    }
}

fn cmd_client(a: ClientArgs) -> Result<(), HarnessError> {
    let exp = load_experiment(&a.config.config, None)?;
    let entry = exp
        .cfg
        .clients
        .iter()
        .find(|c| c.id == a.id)
        .ok_or_else(|| HarnessError::Config(format!("client {} is not in the roster", a.id)))?;
    let listener = TcpListener::bind(&entry.addr).map_err(|e| HarnessError::io(Path::new(&entry.addr), e))?;
    info!("client {} listening on {}", a.id, entry.addr);
    let summary = run_client(&exp, a.id, listener, a.crash_at_round)?;
    info!("client {} done after {} rounds", a.id, summary.rounds_completed);
    Ok(())
}

fn cmd_mock(a: MockArgs) -> Result<(), HarnessError> {
    let exp = load_experiment(&a.config.config, a.out)?;
    let out = OutputDir::create(&exp.cfg.out_dir)?;
    let opts = MockOptions { float_aggregate: a.float_aggregate };
    let run = run_mock(&exp, opts, Some(&out), |_, _, _| {})?;
    print!("{}", run.final_report.to_table());
    Ok(())
}

fn cmd_suite(a: ConfigArg) -> Result<(), HarnessError> {
    let cfg = RunConfig::load(&a.config)?;
    let data = Arc::new(Dataset::load(&cfg.dataset_path)?);
    let report = run_regime_suite(&cfg, data, true)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), HarnessError> {
    let spec =
        SyntheticSpec { rows: a.rows, dim: a.dim, separation: a.sep, age_label_correlation: a.corr, seed: a.seed };
    let data = generate_synthetic(&spec)?;
    data.save(&a.out)?;
    info!("wrote {} rows to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), HarnessError> {
    let model = decode_model(&read_model(&a.model)?);
    let data = Dataset::load(&a.data)?;
    let scores = data
        .rows
        .iter()
        .map(|r| Ok((predict(&model, &r.features)?, r.label)))
        .collect::<Result<Vec<_>, maskfed::trainer::TrainerError>>()?;
    let report = EvalReport::from_scores(0, &scores, "")?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}
