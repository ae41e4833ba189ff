// SPDX-License-Identifier: MIT OR Apache-2.0

//! `polysae` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure. Every error is a single stderr line starting with
//! `error[usage]:`, `error[data]:` or `error[numerical]:`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use polysae::eval::{encode_corpus, evaluate_tasks, mse, EvalReport, Split};
use polysae::interactions::{
    correlation_study, mine_latent_pairs, mine_triples, pair_records, pair_table, triple_table,
    FeatureStats,
};
use polysae::io::{
    load_checkpoint, read_corpus, read_labels, save_checkpoint, write_corpus, write_json,
    write_labels, Checkpoint, RunConfig, SynthConfig,
};
use polysae::linalg::Rng;
use polysae::model::{compositional_capacity, param_counts};
use polysae::synth::{calibrate_interaction_energy, default_scenario, generate};
use polysae::train::train_with;
use polysae::{Error, ModelConfig, PolySaeParams, Sparsifier};

#[derive(Parser)]
#[command(name = "polysae", version, about = "Polynomial sparse autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation corpus with planted interactions.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on an activation corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction error and sparse-probing report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Probe sizes; repeat or comma-separate.
        #[arg(long = "k-features", value_delimiter = ',', default_value = "1,5",
              value_parser = clap::builder::PossibleValuesParser::new(["1", "5"]))]
        k_features: Vec<String>,
        /// Seed of the 80/20 probe split.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Interaction tables and correlation study.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        #[command(flatten)]
        opts: AnalyzeOpts,
    },
    /// Parameter counts, capacity and orthonormality of a model.
    Inspect {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Pairs,
    Triples,
    Correlation,
}

#[derive(Args)]
struct AnalyzeOpts {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Candidate features, by activation mass (default: min(256, d_sae)).
    #[arg(long)]
    top_m: Option<usize>,
    /// Strength percentile for latent-pair mining.
    #[arg(long, default_value_t = 80.0)]
    percentile: f64,
    /// Co-occurrence percentile for latent-pair mining.
    #[arg(long, default_value_t = 20.0)]
    cooccurrence_percentile: f64,
    /// Print every candidate pair instead of the mined ones.
    #[arg(long)]
    all: bool,
    /// Strongest pairs to extend into triples.
    #[arg(long, default_value_t = 20)]
    top_pairs: usize,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if matches!(e, Error::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn with_path<T>(path: &Path, r: polysae::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let f = Failure::from(e);
        match f {
            Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
            Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
            other => other,
        }
    })
}

fn thousands(n: i128) -> String {
    let digits = n.unsigned_abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        out.insert(0, '-');
    }
    out
}

fn gen_synth(config: &Path, out: &Path) -> CliResult<()> {
    let cfg = with_path(config, SynthConfig::load(config))?;
    let mut gt = default_scenario(&cfg.scenario)?;
    let base = Rng::new(cfg.scenario.seed);
    if let Some(target) = cfg.interaction_energy {
        gt = calibrate_interaction_energy(&gt, target, &base.derive(1))?;
    }
    let corpus = generate(&gt, cfg.rows, &mut base.derive(2))?;
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    write_corpus(&out.join("activations.bin"), &corpus.activations)?;
    write_labels(&out.join("labels.json"), &corpus.labels)?;
    write_json(&out.join("ground_truth.json"), &gt)?;
    println!(
        "wrote {} rows (d = {}) and {} label tasks to {}",
        cfg.rows,
        gt.d(),
        corpus.labels.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: &Path, corpus_path: &Path, out: &Path) -> CliResult<()> {
    let cfg = with_path(config, RunConfig::load(config))?;
    let model = cfg.model();
    let tc = cfg.train();
    let corpus = with_path(corpus_path, read_corpus(corpus_path))?;
    if corpus.cols() != model.d {
        return Err(Failure::Data(format!(
            "corpus d = {} does not match config d = {}",
            corpus.cols(),
            model.d
        )));
    }
    let mut params = PolySaeParams::init(&model, &mut Rng::new(model.seed))?;
    params.lambda2 = cfg.lambda2_init;
    params.lambda3 = cfg.lambda3_init;

    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| Failure::Data(format!("{}: {e}", log_path.display())))?;
    let ck_dir = out.join("checkpoint");
    let outcome = train_with(params, &model, &tc, &corpus, |trainer, rec| {
        save_checkpoint(
            &ck_dir,
            &Checkpoint {
                model: trainer.model.clone(),
                train: Some(trainer.config.clone()),
                step: rec.step,
                params: trainer.params.clone(),
                optimizer: Some(trainer.state.clone()),
            },
        )?;
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    })?;
    let last = outcome.log.last();
    println!(
        "trained {} steps; final loss {}; checkpoint {}",
        last.map_or(0, |r| r.step),
        last.map_or("n/a".into(), |r| format!("{:.6}", r.loss)),
        ck_dir.display()
    );
    Ok(())
}

fn check_dims(model: &ModelConfig, d: usize, corpus: &Path) -> CliResult<()> {
    if d != model.d {
        return Err(Failure::Data(format!(
            "corpus {} has d = {d}, checkpoint has d = {}",
            corpus.display(),
            model.d
        )));
    }
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    corpus_path: &Path,
    labels_path: &Path,
    ks: &[usize],
    split_seed: u64,
) -> CliResult<()> {
    let ck = with_path(checkpoint, load_checkpoint(checkpoint))?;
    let corpus = with_path(corpus_path, read_corpus(corpus_path))?;
    check_dims(&ck.model, corpus.cols(), corpus_path)?;
    let labels = with_path(labels_path, read_labels(labels_path, corpus.rows()))?;
    let err = mse(&ck.params, &ck.model, &corpus)?;
    let codes = encode_corpus(&ck.params, &ck.model, &corpus)?;
    let split = Split::seeded(corpus.rows(), Split::DEFAULT_TEST_FRACTION, split_seed);
    let tasks = evaluate_tasks(&codes, &labels, &split, ks)?;
    let mut report = EvalReport::new(err, tasks);
    report
        .metadata
        .insert("sparsifier".into(), ck.model.sparsifier.name().into());
    if ck.model.sparsifier == Sparsifier::BatchTopK {
        report.metadata.insert(
            "inference".into(),
            "batchtopk model encoded with per-token top-k".into(),
        );
    }
    report.metadata.insert("split_seed".into(), split_seed.to_string());
    print!("{}", report.to_text());
    Ok(())
}

fn analyze_cmd(what: Analysis, o: &AnalyzeOpts) -> CliResult<()> {
    let ck = with_path(&o.checkpoint, load_checkpoint(&o.checkpoint))?;
    let corpus = with_path(&o.corpus, read_corpus(&o.corpus))?;
    check_dims(&ck.model, corpus.cols(), &o.corpus)?;
    let d_sae = ck.model.d_sae;
    let top_m = o.top_m.unwrap_or(256.min(d_sae));
    if top_m > d_sae || top_m < 2 {
        return Err(Failure::Usage(format!(
            "--top-m {top_m} must lie in [2, d_sae = {d_sae}]"
        )));
    }
    let codes = encode_corpus(&ck.params, &ck.model, &corpus)?;
    match what {
        Analysis::Correlation => {
            let s = correlation_study(&ck.params, &codes, top_m)?;
            println!("top_m = {top_m}");
            println!("pairs = {}", s.pairs.len());
            println!("r_poly = {}", s.r_poly);
            println!("r_cov = {}", s.r_cov);
        }
        Analysis::Pairs | Analysis::Triples => {
            let mut features = FeatureStats::from_codes(&codes, d_sae).top_features;
            features.truncate(top_m);
            features.sort_unstable();
            let pairs = pair_records(&ck.params, &codes, &features)?;
            if let Analysis::Triples = what {
                print!("{}", triple_table(&mine_triples(&ck.params, &codes, &pairs, o.top_pairs)?));
            } else if o.all {
                print!("{}", pair_table(&pairs));
            } else {
                let mined = mine_latent_pairs(&pairs, o.percentile, o.cooccurrence_percentile)?;
                print!("{}", pair_table(&mined));
            }
        }
    }
    Ok(())
}

fn inspect_cmd(checkpoint: Option<&Path>, config: Option<&Path>) -> CliResult<()> {
    let (model, ck) = match (checkpoint, config) {
        (Some(p), _) => {
            let ck = with_path(p, load_checkpoint(p))?;
            (ck.model.clone(), Some(ck))
        }
        (None, Some(p)) => (with_path(p, RunConfig::load(p))?.model(), None),
        (None, None) => unreachable!("clap requires one source"),
    };
    let counts = param_counts(&model);
    let r = model.ranks;
    println!("d = {}", model.d);
    println!("d_sae = {}", model.d_sae);
    println!("k = {}", model.k);
    println!("ranks = ({}, {}, {})", r.r1, r.r2, r.r3);
    println!("sparsifier = {}", model.sparsifier.name());
    println!("sae_params = {}", thousands(counts.sae_params as i128));
    println!("extra = {}", thousands(counts.polysae_extra as i128));
    println!("ratio = {:.2}%", 100.0 * counts.ratio);
    println!("compositional_capacity = {}", compositional_capacity(&model));
    if let Some(ck) = ck {
        println!("step = {}", ck.step);
        println!("lambda2 = {}", ck.params.lambda2);
        println!("lambda3 = {}", ck.params.lambda3);
        println!("orthonormality_residual = {:.3e}", ck.params.orthonormality_residual());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynth { config, out } => gen_synth(&config, &out),
        Command::Train {
            config,
            corpus,
            out,
        } => train_cmd(&config, &corpus, &out),
        Command::Eval {
            checkpoint,
            corpus,
            labels,
            k_features,
            split_seed,
        } => {
            let mut ks: Vec<usize> = k_features.iter().map(|k| k.parse().unwrap()).collect();
            ks.sort_unstable();
            ks.dedup();
            eval_cmd(&checkpoint, &corpus, &labels, &ks, split_seed)
        }
        Command::Analyze { what, opts } => analyze_cmd(what, &opts),
        Command::Inspect { checkpoint, config } => {
            inspect_cmd(checkpoint.as_deref(), config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            let rest: Vec<&str> = rendered.lines().skip(1).collect();
            eprintln!("{}", rest.join("\n").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error[data]: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error[numerical]: {m}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::thousands;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(25_182_976), "25,182,976");
        assert_eq!(thousands(-688_130), "-688,130");
    }
}
