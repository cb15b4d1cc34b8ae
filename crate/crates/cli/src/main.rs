use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anatomy_align::checkpoint::{self, write_atomic};
use anatomy_align::corpus::{self, AttributeVocabulary, GroupMap, RegionVocabulary};
use anatomy_align::eval::{self, EvalOptions};
use anatomy_align::gradcheck::{self, CheckConfig};
use anatomy_align::labelgen::{build_fine_labels, fine_labels_json_line, study_seed, LabelGenConfig};
use anatomy_align::losses::LossWeights;
use anatomy_align::metrics::{self, Rounding, ThresholdPolicy};
use anatomy_align::synth::{self, SynthConfig, SynthManifest};
use anatomy_align::trainer::{TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Anatomy-aware vision/language alignment pipeline.
#[derive(Parser, Debug)]
#[command(name = "anat-align", version)]
struct Cli {
    /// Worker threads (default: available cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Build fine-grained sentence labels for every study of a corpus.
    Labelgen(LabelgenArgs),
    /// Train the encoder with the staged schedule.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Aggregate a per-attribute metric table into attribute groups.
    Aggregate(AggregateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Label statistics of a corpus.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct VocabArgs {
    /// JSON list of attribute names (default: the built-in 20).
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// JSON list of region names (default: the built-in 29).
    #[arg(long)]
    regions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_studies: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LabelgenArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch index mixed into each study's label seed.
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Stage epochs as `e1,e2,e3`.
    #[arg(long)]
    epochs: Option<String>,
    /// Loss weights as `anat,fine,global`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `youden` or `fixed:<t>`.
    #[arg(long, default_value = "youden")]
    policy: String,
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Add per-region rows.
    #[arg(long)]
    region_rows: bool,
    /// `half_even` or `half_up`.
    #[arg(long, default_value = "half_even")]
    rounding: String,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Per-attribute CSV with columns `[model,]attribute,bmac,auc,f1`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "half_even")]
    rounding: String,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

fn classify(e: anatomy_align::Error) -> Failure {
    use anatomy_align::Error as E;
    match e {
        E::NonFinite(_) | E::Diverged { .. } => Failure::Runtime(e.into()),
        _ => Failure::Validation(e.into()),
    }
}

trait Validate<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Validate<T> for std::result::Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn core<T>(r: anatomy_align::Result<T>) -> Outcome<T> {
    r.map_err(classify)
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))
        .invalid()?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
            .invalid()
    } else {
        serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
            .invalid()
    }
}

fn vocabularies(v: &VocabArgs) -> Outcome<(AttributeVocabulary, RegionVocabulary)> {
    let a = match &v.attributes {
        Some(p) => core(AttributeVocabulary::load(p))?,
        None => AttributeVocabulary::default(),
    };
    let r = match &v.regions {
        Some(p) => core(RegionVocabulary::load(p))?,
        None => RegionVocabulary::default(),
    };
    Ok((a, r))
}

fn ensure_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()))
        .runtime()
}

fn write_output(path: &Path, bytes: &[u8]) -> Outcome<()> {
    core(write_atomic(path, bytes)).map_err(|f| match f {
        Failure::Validation(e) | Failure::Runtime(e) => Failure::Runtime(e),
    })
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: u64,
    wall_clock_seconds: f64,
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn start(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn finish(
        &self,
        manifest_path: &Path,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Outcome<()> {
        let m = RunManifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_output(manifest_path, &json_bytes(&m))
    }
}

fn parse_triple(s: &str, what: &str) -> Outcome<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Failure::Validation(anyhow::anyhow!("{what} needs three comma-separated values, got `{s}`")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| anyhow::anyhow!("{what}: `{p}` is not a number"))
            .invalid()?;
    }
    Ok(out)
}

fn cmd_synth(a: &SynthArgs) -> Outcome<()> {
    let run = Run::start("synth");
    let mut config: SynthConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.num_studies {
        config.num_studies = n;
    }
    let studies = core(synth::generate(&config))?;
    let attributes = core(config.attribute_vocabulary())?;
    let regions = core(config.region_vocabulary())?;
    ensure_dir(&a.out)?;
    let corpus_path = a.out.join("corpus.jsonl");
    let synth_manifest = a.out.join("synth_manifest.json");
    write_output(&corpus_path, corpus::corpus_to_string(&studies, &attributes, &regions).as_bytes())?;
    write_output(&synth_manifest, &json_bytes(&SynthManifest::new(&config)))?;
    log::info!("wrote {} studies to {}", studies.len(), corpus_path.display());
    run.finish(
        &a.out.join("manifest.json"),
        Some(config.seed),
        serde_json::to_value(&config).expect("serializable"),
        &[],
        &[&corpus_path, &synth_manifest],
    )
}

fn cmd_labelgen(a: &LabelgenArgs) -> Outcome<()> {
    let run = Run::start("labelgen");
    let (attributes, regions) = vocabularies(&a.vocab)?;
    let mut config: LabelGenConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    core(config.validate())?;
    let studies = core(corpus::load_corpus(&a.corpus, &attributes, &regions))?;
    let mut out = String::new();
    for s in &studies {
        let c = config.with_seed(study_seed(config.seed, a.epoch, &s.study_id));
        let labels = core(build_fine_labels(&s.findings, &attributes, &c))?;
        out.push_str(&fine_labels_json_line(&s.study_id, &labels));
        out.push('\n');
    }
    ensure_dir(&a.out)?;
    let path = a.out.join("fine_labels.jsonl");
    write_output(&path, out.as_bytes())?;
    run.finish(
        &a.out.join("manifest.json"),
        Some(config.seed),
        serde_json::json!({ "labelgen": config, "epoch": a.epoch }),
        &[&a.corpus],
        &[&path],
    )
}

fn cmd_train(a: &TrainArgs) -> Outcome<()> {
    let run = Run::start("train");
    let (attributes, regions) = vocabularies(&a.vocab)?;
    let mut config: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
        config.encoder.seed = s;
    }
    if let Some(e) = &a.epochs {
        let v = parse_triple(e, "--epochs")?;
        if v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(Failure::Validation(anyhow::anyhow!("--epochs takes non-negative integers")));
        }
        config.stage_epochs = [v[0] as usize, v[1] as usize, v[2] as usize];
    }
    if let Some(w) = &a.weights {
        let v = parse_triple(w, "--weights")?;
        config.weights = core(LossWeights::new(v[0], v[1], v[2]))?;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    core(config.validate())?;
    let studies = core(corpus::load_corpus(&a.corpus, &attributes, &regions))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let state = core(checkpoint::load_state(p))?;
            core(Trainer::resume(config.clone(), &studies, &attributes, state))?
        }
        None => core(Trainer::new(config.clone(), &studies, &attributes))?,
    };
    core(trainer.run())?;
    let (state, log) = trainer.into_parts();

    ensure_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.bin");
    let state_path = a.out.join("train_state.bin");
    let log_path = a.out.join("train_log.csv");
    let resolved = a.out.join("resolved_config.json");
    write_output(&ckpt, &checkpoint::params_to_bytes(&state.params))?;
    write_output(&state_path, &checkpoint::state_to_bytes(&state))?;
    write_output(&log_path, core(log.to_csv())?.as_bytes())?;
    write_output(&resolved, &json_bytes(&config))?;
    log::info!("trained {} steps, checksum {:016x}", state.progress.step, state.params.checksum());
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    run.finish(
        &a.out.join("manifest.json"),
        Some(config.seed),
        serde_json::to_value(&config).expect("serializable"),
        &inputs,
        &[&ckpt, &state_path, &log_path, &resolved],
    )
}

fn cmd_eval(a: &EvalArgs) -> Outcome<()> {
    let run = Run::start("eval");
    let (attributes, regions) = vocabularies(&a.vocab)?;
    let policy: ThresholdPolicy = core(a.policy.parse())?;
    let rounding: Rounding = core(a.rounding.parse())?;
    let params = core(checkpoint::load_checkpoint(&a.checkpoint))?;
    let studies = core(corpus::load_corpus(&a.corpus, &attributes, &regions))?;
    let groups = match &a.groups {
        Some(p) => Some(core(corpus::load_group_map(p, &attributes))?),
        None => None,
    };
    let options = EvalOptions {
        policy,
        rounding,
        groups: groups.as_ref(),
        regions: a.region_rows.then_some(&regions),
    };
    let report = core(eval::evaluate(&params, &studies, &attributes, &options))?;
    ensure_dir(&a.out)?;
    let csv_path = a.out.join("report.csv");
    let json_path = a.out.join("report.json");
    write_output(&csv_path, core(report.to_csv())?.as_bytes())?;
    write_output(&json_path, &json_bytes(&report.to_json()))?;
    run.finish(
        &a.out.join("manifest.json"),
        None,
        serde_json::json!({ "policy": policy, "rounding": rounding, "region_rows": a.region_rows }),
        &[&a.checkpoint, &a.corpus],
        &[&csv_path, &json_path],
    )
}

fn cmd_aggregate(a: &AggregateArgs) -> Outcome<()> {
    let run = Run::start("aggregate");
    let (attributes, _) = vocabularies(&a.vocab)?;
    let rounding: Rounding = core(a.rounding.parse())?;
    let file = fs::File::open(&a.input)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", a.input.display()))
        .invalid()?;
    let table = core(metrics::read_attribute_table(file))?;
    let groups: GroupMap = core(corpus::load_group_map(&a.groups, &attributes))?;
    let mut grouped = Vec::new();
    for model in table.models() {
        let rows = core(metrics::aggregate_groups(&table.rows_for(&model), &groups, &attributes))
            .map_err(|f| match (f, &model) {
                (Failure::Validation(e), Some(m)) => Failure::Validation(e.context(format!("model `{m}`"))),
                (f, _) => f,
            })?;
        grouped.extend(rows.into_iter().map(|r| (model.clone(), r)));
    }
    let refs: Vec<(Option<&str>, &metrics::MetricRow)> = grouped.iter().map(|(m, r)| (m.as_deref(), r)).collect();
    let mut buf = Vec::new();
    core(metrics::write_rows_csv(&mut buf, &refs, rounding))?;
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            write_output(path, &buf)?;
            let mut manifest = path.as_os_str().to_owned();
            manifest.push(".manifest.json");
            run.finish(
                Path::new(&manifest),
                None,
                serde_json::json!({ "rounding": rounding }),
                &[&a.input, &a.groups],
                &[path],
            )
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&buf).runtime()
        }
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome<()> {
    let run = Run::start("gradcheck");
    let mut config: CheckConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(p) = a.probes {
        config.probes = p;
    }
    let report = core(gradcheck::run_suite(&config))?;
    let bytes = json_bytes(&report);
    match &a.out {
        Some(path) => {
            write_output(path, &bytes)?;
            let mut manifest = path.as_os_str().to_owned();
            manifest.push(".manifest.json");
            run.finish(
                Path::new(&manifest),
                Some(config.seed),
                serde_json::to_value(config).expect("serializable"),
                &[],
                &[path],
            )?;
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes).runtime()?;
        }
    }
    if !report.passed {
        let failed: Vec<&str> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        return Err(Failure::Runtime(anyhow::anyhow!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Outcome<()> {
    let (attributes, regions) = vocabularies(&a.vocab)?;
    let studies = core(corpus::load_corpus(&a.corpus, &attributes, &regions))?;
    let stats = core(corpus::corpus_stats(&studies, &attributes, &regions))?;
    let positives: serde_json::Map<String, serde_json::Value> = attributes
        .names()
        .iter()
        .zip(&stats.attribute_positives)
        .map(|(n, c)| (n.clone(), (*c).into()))
        .collect();
    let value = serde_json::json!({
        "num_studies": stats.num_studies,
        "attribute_positives": positives,
        "region_attribute": stats.region_attribute,
    });
    let bytes = json_bytes(&value);
    match &a.out {
        Some(path) => write_output(path, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes).runtime()
        }
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Validation(anyhow::anyhow!("--threads must be >= 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Labelgen(a) => cmd_labelgen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANAT_ALIGN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
