use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetsep::conditions::ConceptValue;
use hetsep::corpus::{DomainName, ToyCorpusSpec};
use hetsep::experiments::{
    experiment_dir, output_root, prepare_manifest, preset, read_sweep_csv, render_sweep_plot, run_eval, run_sweep,
    run_train, synth_corpus, EvalSource, ExperimentConfig, ToyData, OUTPUT_ROOT_ENV,
};
use hetsep::Error;

#[derive(Parser)]
#[command(name = "hetsep", version, about = "Heterogeneous-condition speech separation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the toy corpus: WAV files plus train/val/test manifests.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        records_per_speaker: usize,
        /// en,fr,de,es proportions (percent or fractions).
        #[arg(long, value_delimiter = ',')]
        language_mix: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "8,1,1")]
        split: Vec<u32>,
    },
    /// Build manifests for a real collection from a CSV listing.
    PrepareManifest {
        #[arg(long)]
        domain: String,
        /// CSV with record_id,audio_path,speaker_id,gender,language columns.
        #[arg(long)]
        listing: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,1,1")]
        split: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a built-in config as TOML.
    Preset { name: String },
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest epoch state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict evaluation to these concepts, e.g. E_HIGH,G_MALE.
        #[arg(long, value_delimiter = ',')]
        concepts: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the generated eval mixtures to this directory.
        #[arg(long, conflicts_with = "eval_set")]
        materialize: Option<PathBuf>,
        /// Evaluate a previously materialized set instead of generating one.
        #[arg(long)]
        eval_set: Option<PathBuf>,
    },
    /// Train and evaluate one model per value of the config's sweep grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Redraw the plot of a sweep summary CSV.
    RenderPlots {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "swept value")]
        parameter: String,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => preset(name),
            (None, None) => Err(Error::Config("pass --config or --preset".into())),
        }
    }
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &ExperimentConfig, leaf: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| experiment_dir(cfg, &output_root()).join(leaf))
}

fn parse_domain(s: &str) -> Result<DomainName, Error> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase()))
        .map_err(|_| Error::Config(format!("unknown domain '{s}' (WSJ, SLIB, SVOX, TOY)")))
}

fn language_mix(raw: &[f64]) -> Result<[f64; 4], Error> {
    let sum: f64 = raw.iter().sum();
    if raw.len() != 4 || sum <= 0.0 || raw.iter().any(|p| *p < 0.0) {
        return Err(Error::Config(format!("language mix {raw:?} needs four non-negative shares")));
    }
    Ok([raw[0] / sum, raw[1] / sum, raw[2] / sum, raw[3] / sum])
}

fn split(raw: &[u32]) -> Result<[u32; 3], Error> {
    <[u32; 3]>::try_from(raw).map_err(|_| Error::Config(format!("split {raw:?} needs three train,val,test shares")))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthCorpus { out, seed, speakers, records_per_speaker, language_mix: mix, split: ratios } => {
            let mut spec = ToyCorpusSpec { n_speakers: speakers, records_per_speaker, seed, ..ToyCorpusSpec::default() };
            if let Some(mix) = mix {
                spec.language_mix = language_mix(&mix)?;
            }
            let set = synth_corpus(&ToyData { spec, split: split(&ratios)? }, &out)?;
            println!(
                "wrote {} ({} / {} / {} records)",
                out.display(),
                set.train.records.len(),
                set.val.records.len(),
                set.test.records.len()
            );
        }
        Command::PrepareManifest { domain, listing, out, split: ratios, seed } => {
            let set = prepare_manifest(parse_domain(&domain)?, &listing, split(&ratios)?, seed, &out)?;
            println!(
                "wrote {} ({} / {} / {} records)",
                out.display(),
                set.train.records.len(),
                set.val.records.len(),
                set.test.records.len()
            );
        }
        Command::Preset { name } => print!("{}", preset(&name)?.to_toml()?),
        Command::Train { config, out, resume } => {
            let cfg = config.load()?;
            let dir = out_dir(&out, &cfg, "train");
            let ckpt = run_train(&cfg, &dir, resume)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Eval { config, checkpoint, concepts, out, materialize, eval_set } => {
            let cfg = config.load()?;
            if !checkpoint.is_file() {
                return Err(Error::Checkpoint(format!("{} does not exist", checkpoint.display())));
            }
            let concepts = concepts
                .map(|list| list.iter().map(|c| c.parse::<ConceptValue>()).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            let source = match (materialize, eval_set) {
                (Some(dir), _) => EvalSource::Materialize(dir),
                (None, Some(dir)) => EvalSource::Load(dir),
                (None, None) => EvalSource::OnTheFly,
            };
            let dir = out_dir(&out, &cfg, "eval");
            let report = run_eval(&cfg, &checkpoint, concepts.as_deref(), &source, &dir)?;
            print!("{}", report.to_table(&cfg.name));
        }
        Command::Sweep { config, out } => {
            let cfg = config.load()?;
            let dir = out_dir(&out, &cfg, "sweep");
            let outcome = run_sweep(&cfg, &dir)?;
            println!("summary {}", outcome.csv.display());
            println!("plot {}", outcome.plot.display());
        }
        Command::RenderPlots { csv, out, parameter } => {
            let rows = read_sweep_csv(&csv)?;
            let svg = out.unwrap_or_else(|| csv.with_extension("svg"));
            render_sweep_plot(&rows, &parameter, &svg)?;
            println!("plot {}", svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    log::debug!("output root {} (override with {OUTPUT_ROOT_ENV})", output_root().display());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
