use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use p4gcn::dataio::{self, DatasetBundle, Delimiter};
use p4gcn::model::StateMode;
use p4gcn::runner::{self, ModelSnapshot, RunError, TrainConfig, TransportKind};
use p4gcn::sandwich::CipherMode;

#[derive(Parser)]
#[command(name = "p4gcn", version, about = "Vertical federated social recommendation with a sandwich-encrypted GCN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics next to the published reference row.
    Stats(DataArgs),
    /// Train both parties and write a run report.
    Train(TrainArgs),
    /// Score a saved model on the test split of a dataset.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the protocol checks on toy shapes.
    Selftest {
        #[arg(long, value_enum, default_value_t = Mode::He)]
        mode: Mode,
        #[arg(long, default_value_t = 512)]
        key_bits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    He,
    Plaintext,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    Stored,
    Fresh,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inprocess,
    Socket,
}

#[derive(Args)]
struct DataArgs {
    /// filmtrust, ciaodvd, douban or epinions, read from <data-dir>/<name>/.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Explicit ratings file (user item rating).
    #[arg(long, requires = "trust")]
    ratings: Option<PathBuf>,
    /// Explicit trust file (truster trustee [weight]).
    #[arg(long, requires = "ratings")]
    trust: Option<PathBuf>,
    /// Generate a planted dataset with this many users instead of loading one.
    #[arg(long, conflicts_with_all = ["dataset", "ratings"])]
    synthetic: Option<usize>,
    #[arg(long)]
    rating_min: Option<f64>,
    #[arg(long)]
    rating_max: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Mode::Plaintext)]
    mode: Mode,
    #[arg(long, overrides_with = "dp")]
    no_dp: bool,
    #[arg(long, overrides_with = "no_dp")]
    dp: bool,
    #[arg(long, default_value_t = 15.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    /// Records per batch, 0 for full batch.
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    clip: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_social: bool,
    #[arg(long, value_enum, default_value_t = StateArg::Stored)]
    state: StateArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    laplacian_inverse_n: bool,
    #[arg(long, default_value_t = 1024)]
    key_bits: usize,
    #[arg(long, default_value_t = p4gcn::paillier::DEFAULT_FRAC_BITS)]
    frac_bits: u32,
    #[arg(long, value_enum, default_value_t = TransportArg::Inprocess)]
    transport: TransportArg,
    /// Evaluate only after the last epoch.
    #[arg(long)]
    final_eval_only: bool,
    /// Report file (JSON); the table always goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where to save the trained model for `evaluate`.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Budget(String),
    Protocol(String),
    Other(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Failure::Usage(e.to_string()),
            RunError::BudgetExceeded { .. } => Failure::Budget(e.to_string()),
            RunError::Protocol(_) => Failure::Protocol(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<dataio::DataError> for Failure {
    fn from(e: dataio::DataError) -> Self {
        Failure::Other(e.to_string())
    }
}

fn range_override(data: &DataArgs) -> Result<Option<(f64, f64)>, Failure> {
    match (data.rating_min, data.rating_max) {
        (Some(lo), Some(hi)) => Ok(Some((lo, hi))),
        (None, None) => Ok(None),
        _ => Err(Failure::Usage("--rating-min and --rating-max go together".into())),
    }
}

fn load(data: &DataArgs) -> Result<DatasetBundle, Failure> {
    let range = range_override(data)?;
    if let Some(users) = data.synthetic {
        let range = range.unwrap_or((1.0, 5.0));
        let items = (users * 3 / 4).max(2);
        let (r, t) = dataio::synthetic(users, items, 12, 3, range, data.split_seed);
        return Ok(dataio::assemble("synthetic", &r, &t, range, data.test_fraction, data.split_seed)?);
    }
    if let (Some(r), Some(t)) = (&data.ratings, &data.trust) {
        let range = range.ok_or_else(|| Failure::Usage("explicit files need --rating-min and --rating-max".into()))?;
        let name = data.dataset.clone().unwrap_or_else(|| "custom".into());
        return Ok(dataio::load_bundle(&name, r, t, Delimiter::Auto, range, data.test_fraction, data.split_seed)?);
    }
    let name = data
        .dataset
        .as_deref()
        .ok_or_else(|| Failure::Usage("one of --dataset, --ratings/--trust or --synthetic is required".into()))?;
    if dataio::dataset_spec(name).is_none() {
        return Err(Failure::Usage(format!("unknown dataset {name:?}")));
    }
    Ok(dataio::load_named(name, &data.data_dir, data.test_fraction, data.split_seed)?)
}

fn stats(data: &DataArgs) -> Result<(), Failure> {
    let reference = dataio::reference_stats();
    if let Some(name) = &data.dataset {
        if let Some(r) = reference.get(name.as_str()) {
            println!("{}  (reference)", r.table_row());
        }
    }
    match load(data) {
        Ok(bundle) => {
            let measured = dataio::stats(&bundle);
            println!("{}  (measured)", measured.table_row());
            if let Some(r) = reference.get(bundle.name.as_str()) {
                for line in dataio::compare_with_reference(&measured, r) {
                    println!("  {line}");
                }
            }
            Ok(())
        }
        Err(e) if data.dataset.as_deref().is_some_and(|n| reference.contains_key(n)) => {
            if let Failure::Other(msg) = &e {
                eprintln!("measured row unavailable: {msg}");
                Ok(())
            } else {
                Err(e)
            }
        }
        Err(e) => Err(e),
    }
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let bundle = load(&args.data)?;
    let config = TrainConfig {
        dim: args.dim,
        hidden: args.hidden,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        clip: args.clip,
        beta: args.beta,
        epsilon: args.epsilon,
        delta: args.delta,
        cipher: match args.mode {
            Mode::He => CipherMode::He,
            Mode::Plaintext => CipherMode::Plaintext,
        },
        dp: !args.no_dp,
        fusion: !args.no_fusion,
        social: !args.no_social,
        state_mode: match args.state {
            StateArg::Stored => StateMode::Stored,
            StateArg::Fresh => StateMode::Fresh,
        },
        seed: args.seed,
        rating_range: range_override(&args.data)?,
        laplacian_inverse_n: args.laplacian_inverse_n,
        key_bits: args.key_bits,
        frac_bits: args.frac_bits,
        init_std: 0.1,
        transport: match args.transport {
            TransportArg::Inprocess => TransportKind::InProcess,
            TransportArg::Socket => TransportKind::Socket,
        },
        eval_every_epoch: !args.final_eval_only,
    };
    let started = std::time::Instant::now();
    let outcome = runner::train_full(&bundle, &config)?;
    let report = &outcome.report;
    print!("{}", report.table());
    eprintln!("wall time {:.2}s", started.elapsed().as_secs_f64());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json() + "\n")
            .map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &args.save_model {
        ModelSnapshot {
            state: outcome.state.clone(),
            social_output: outcome.social_output.clone(),
        }
        .save(path)
        .map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    }
    if let Some(c) = &report.comm {
        if !c.matches_closed_form && config.state_mode == StateMode::Stored {
            return Err(Failure::Protocol(format!(
                "ciphertext count {} differs from closed form {}",
                c.ciphertexts, c.expected_ciphertexts
            )));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Stats(data) => stats(&data),
        Command::Train(args) => train(&args),
        Command::Evaluate { data, model } => {
            let bundle = load(&data)?;
            let snap = ModelSnapshot::load(&model).map_err(|e| Failure::Other(format!("{}: {e}", model.display())))?;
            let (rmse, mae) = snap.evaluate(&bundle)?;
            println!("rmse {rmse:.5} mae {mae:.5} on {} test ratings", bundle.test.len());
            Ok(())
        }
        Command::Selftest { mode, key_bits, seed } => {
            let cipher = match mode {
                Mode::He => CipherMode::He,
                Mode::Plaintext => CipherMode::Plaintext,
            };
            let checks = runner::selftest(cipher, key_bits, seed);
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Protocol("selftest failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (2, m),
                Failure::Budget(m) => (3, m),
                Failure::Protocol(m) => (4, m),
                Failure::Other(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
