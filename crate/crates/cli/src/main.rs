//! Command-line front end: training, evaluation, scoring, synthetic data,
//! attention dumps and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use parnet::data::{generate, load_dataset};
use parnet::eval::{dump_attention, evaluate, report_table, DEFAULT_KS};
use parnet::training::{pipeline_grad_check, train, ProbeShape};
use parnet::{Checkpoint, Dataset, Error, ParNet, ParamStore, SyntheticSpec, TrainConfig};

#[derive(Parser)]
#[command(name = "parnet", version, about = "Image-caption matching with position-aware relations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Object features file (PARF).
    #[arg(long)]
    features: PathBuf,
    /// Captions file (JSON lines).
    #[arg(long)]
    captions: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K in both retrieval directions.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        /// Print reports as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Similarity of one image and one caption.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        caption_id: u64,
    },
    /// Generate a synthetic dataset with planted spatial relations.
    Synth {
        /// JSON generator spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the attention weights of one pair as JSON.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        caption_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

enum Failure {
    Data(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(m) => Failure::Numeric(m),
            e => Failure::Data(e),
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn load_model(ckpt: &Path, data: &DataArgs) -> Result<(ParNet, ParamStore, Dataset), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = ck.model()?;
    let dataset = load_dataset(&data.features, &data.captions, Some(model.config.d_v), None)?;
    dataset.check_vocab(model.vocab_size)?;
    Ok((model, store, dataset))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, data, out } => {
            let config = read_config(&config)?;
            let dataset = load_dataset(&data.features, &data.captions, Some(config.d_v), None)?;
            let outcome = train(&config, &dataset)?;
            outcome.best.save(&out)?;
            let last = outcome.history.last();
            info!("wrote {}", out.display());
            println!(
                "trained {} epochs, {} steps; final loss {}; best validation R@1 {}",
                outcome.last.epoch,
                outcome.last.step,
                last.and_then(|h| h.mean_loss).map_or("-".into(), |l| format!("{l:.5}")),
                outcome.best.best_score.map_or("-".into(), |s| format!("{s:.2}")),
            );
        }
        Command::Evaluate { ckpt, data, k, json } => {
            let (model, store, dataset) = load_model(&ckpt, &data)?;
            let reports = evaluate(&model, &store, &dataset, &k)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports).map_err(Error::from)?);
            } else {
                print!("{}", report_table(&reports));
            }
        }
        Command::Score { ckpt, data, image_id, caption_id } => {
            let (model, store, dataset) = load_model(&ckpt, &data)?;
            let image = &dataset.images()[dataset.image_position(image_id)?];
            let caption = dataset.caption(caption_id)?;
            println!("{:.6}", model.score(&store, &image.objects, &caption.tokens)?);
        }
        Command::Synth { spec, seed, out_dir } => {
            let mut spec = match spec {
                Some(p) => SyntheticSpec::from_json(&fs::read_to_string(&p).map_err(Error::from)?)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            data.write(&out_dir)?;
            println!(
                "wrote {} scenes, {} captions, {} vocabulary entries to {}",
                data.scenes.len(),
                data.captions.len(),
                data.vocab.len(),
                out_dir.display()
            );
        }
        Command::DumpAttention { ckpt, data, image_id, caption_id, out } => {
            let (model, store, dataset) = load_model(&ckpt, &data)?;
            let record = dump_attention(&model, &store, &dataset, image_id, caption_id, &out)?;
            println!("score {:.6}; wrote {}", record.score, out.display());
        }
        Command::Gradcheck { config, tol, step } => {
            let config = read_config(&config)?;
            let report = pipeline_grad_check(&config, ProbeShape::default(), step, tol)?;
            for t in &report.tensors {
                let mark = if t.max_rel_error <= tol { "ok" } else { "FAIL" };
                println!("{:<40} {:>6} {:>10.3e} {mark}", t.name, t.entries, t.max_rel_error);
            }
            println!("max relative error {:.3e} (tolerance {tol:.1e})", report.max_rel_error());
            if !report.passed() {
                return Err(Failure::Numeric("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}
