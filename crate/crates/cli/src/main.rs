use std::collections::{BTreeMap, BTreeSet};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use exameval::backend::{BackendSpec, HttpConfig, SamplingParams};
use exameval::dataset::{load_dataset, validate_exam_year, Year};
use exameval::harness::{
    execute_run, load_answers, replay_run_dir, score_answers, write_run_dir, RoleBackendSpecs, RunConfig,
};
use exameval::pipeline::{AgentMode, FailurePolicy, PipelineConfig, Strategy};
use exameval::prompts::PromptOptions;
use exameval::report::{parse_summaries, render, render_score, ReportFormat};
use exameval::scoring::PassRule;

/// Exam-faithful evaluation of language models on bar exam multiple-choice
/// questions.
#[derive(Parser)]
#[command(name = "exameval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file and the per-year subject point sums.
    Validate {
        dataset: PathBuf,
        /// Limit checks to these years (R6, H30 or 2024). Defaults to every year.
        #[arg(long = "year")]
        years: Vec<Year>,
    },
    /// Run an evaluation and write its artifacts to a run directory.
    Run(Box<RunArgs>),
    /// Grade a file of `id<TAB>answer` lines.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        /// Grade only questions of this year.
        #[arg(long)]
        year: Option<Year>,
        #[arg(long)]
        lenient: bool,
        #[arg(long, default_value_t = 93)]
        pass_threshold: u32,
        #[arg(long, value_enum, default_value_t = ScoreFormat::Text)]
        format: ScoreFormat,
    },
    /// Tabulate summaries from run directories or summary.json files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Append the pass threshold and subject floors as a final row.
        #[arg(long)]
        pass_row: bool,
    },
    /// Re-run a recorded run from its transcript and compare summaries.
    Replay {
        run_dir: PathBuf,
        /// Dataset to use instead of the recorded path. Content must match.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum StrategyName {
    ZeroShot,
    FewShot,
    MultiAgent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ModeName {
    Shared,
    Separate,
}

/// Settings for `run`. Each can come from a flag, the TOML config file or a
/// default, in that order of precedence.
#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RunArgs {
    /// TOML file with any of the settings below (kebab-case keys).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Test years, comma separated (R6,R5 or 2024).
    #[arg(long, value_delimiter = ',')]
    test_years: Option<Vec<Year>>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyName>,
    /// Wrap the strategy in one self-verification pass.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    verify: Option<bool>,
    /// Few-shot demonstration count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    demo_seed: Option<u64>,
    #[arg(long, value_enum)]
    agent_mode: Option<ModeName>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// oracle, replay:<transcript>, http or http:<model>.
    #[arg(long)]
    backend: Option<String>,
    /// Backends per role for separate multi-agent mode, as role=backend.
    #[arg(long = "role-backend", value_parser = parse_role_pair)]
    role_backend: Option<Vec<(String, String)>>,
    /// Chat-completions URL. Falls back to EXAMEVAL_ENDPOINT.
    #[arg(long)]
    endpoint: Option<String>,
    /// Falls back to EXAMEVAL_MODEL.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API token.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    repeats: Option<u32>,
    #[arg(long)]
    run_seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_output_tokens: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    lenient: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_system_role: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    demonstrations_in_system: Option<bool>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    pass_threshold: Option<u32>,
    /// Stop at the first failed backend call instead of recording it.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    abort_on_error: Option<bool>,
}

fn parse_role_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(r, b)| (r.to_string(), b.to_string()))
        .ok_or_else(|| format!("expected role=backend, got {s:?}"))
}

/// Marks errors caused by how the command was invoked.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

macro_rules! merge {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )+
    };
}

impl RunArgs {
    fn merge_file(&mut self) -> Result<()> {
        let Some(path) = self.config.clone() else { return Ok(()) };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: RunArgs =
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        merge!(
            self, file, dataset, test_years, strategy, verify, k, demo_seed, agent_mode, batch_size, backend,
            role_backend, endpoint, model, api_key_env, label, repeats, run_seed, temperature, max_output_tokens,
            parallelism, lenient, no_system_role, demonstrations_in_system, templates, pass_threshold, abort_on_error
        );
        Ok(())
    }

    fn http_config(&self, model_override: Option<&str>) -> Result<HttpConfig> {
        let endpoint = self
            .endpoint
            .clone()
            .or_else(|| std::env::var("EXAMEVAL_ENDPOINT").ok())
            .ok_or_else(|| usage("http backend needs --endpoint or EXAMEVAL_ENDPOINT"))?;
        let model = model_override
            .map(str::to_string)
            .or_else(|| self.model.clone())
            .or_else(|| std::env::var("EXAMEVAL_MODEL").ok())
            .ok_or_else(|| usage("http backend needs --model or EXAMEVAL_MODEL"))?;
        let mut config = HttpConfig::new(endpoint, model);
        if let Some(var) = &self.api_key_env {
            config.api_key_env = Some(var.clone());
        }
        Ok(config)
    }

    fn backend_spec(&self, text: &str) -> Result<BackendSpec> {
        if let Some(model) = text.strip_prefix("http:") {
            return Ok(BackendSpec::Http(self.http_config(Some(model))?));
        }
        let http = if text == "http" { Some(self.http_config(None)?) } else { None };
        BackendSpec::parse_cli(text, http).map_err(usage)
    }

    fn strategy(&self) -> Result<Strategy> {
        let base = match self.strategy.unwrap_or(StrategyName::ZeroShot) {
            StrategyName::ZeroShot => Strategy::ZeroShot,
            StrategyName::FewShot => Strategy::FewShot { k: self.k.unwrap_or(3), seed: self.demo_seed.unwrap_or(0) },
            StrategyName::MultiAgent => Strategy::MultiAgent {
                mode: match self.agent_mode.unwrap_or(ModeName::Shared) {
                    ModeName::Shared => AgentMode::Shared,
                    ModeName::Separate => AgentMode::Separate,
                },
                batch_size: self.batch_size.unwrap_or(20),
            },
        };
        let strategy = if self.verify.unwrap_or(false) { Strategy::SelfVerify { inner: Box::new(base) } } else { base };
        strategy.validate().map_err(|e| usage(e.to_string()))?;
        Ok(strategy)
    }

    fn role_backends(&self) -> Result<Option<RoleBackendSpecs>> {
        let Some(pairs) = &self.role_backend else { return Ok(None) };
        let mut roles: BTreeMap<&str, BackendSpec> = BTreeMap::new();
        for (role, backend) in pairs {
            if !["retriever", "verifier", "extractor", "reasoner"].contains(&role.as_str()) {
                return Err(usage(format!("unknown agent role {role:?}")));
            }
            roles.insert(role.as_str(), self.backend_spec(backend)?);
        }
        let mut take = |role: &str| roles.remove(role).ok_or_else(|| usage(format!("missing backend for role {role}")));
        Ok(Some(RoleBackendSpecs {
            retriever: take("retriever")?,
            verifier: take("verifier")?,
            extractor: take("extractor")?,
            reasoner: take("reasoner")?,
        }))
    }

    fn resolve(mut self) -> Result<(RunConfig, PathBuf)> {
        self.merge_file()?;
        let out = self.out.clone().ok_or_else(|| usage("run needs --out <dir>"))?;
        let dataset = self.dataset.clone().ok_or_else(|| usage("run needs --dataset"))?;
        let test_years: BTreeSet<Year> = self.test_years.clone().unwrap_or_default().into_iter().collect();
        if test_years.is_empty() {
            return Err(usage("run needs --test-years"));
        }
        let repeats = self.repeats.unwrap_or(3);
        if repeats == 0 {
            return Err(usage("--repeats must be at least 1"));
        }
        if self.parallelism == Some(0) {
            return Err(usage("--parallelism must be at least 1"));
        }
        let strategy = self.strategy()?;
        let role_backends = self.role_backends()?;
        if matches!(strategy, Strategy::MultiAgent { mode: AgentMode::Separate, .. })
            && role_backends.is_none()
        {
            return Err(usage("separate agent mode needs --role-backend for all four roles"));
        }
        let defaults = SamplingParams::default();
        let mut pipeline = PipelineConfig::new(strategy);
        pipeline.repeats = repeats;
        pipeline.run_seed = self.run_seed;
        pipeline.sampling = SamplingParams {
            temperature: self.temperature.unwrap_or(defaults.temperature),
            max_output_tokens: self.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            seed: None,
        };
        pipeline.parallelism = self.parallelism.unwrap_or(pipeline.parallelism);
        pipeline.lenient = self.lenient.unwrap_or(false);
        pipeline.failure_policy =
            if self.abort_on_error.unwrap_or(false) { FailurePolicy::Abort } else { FailurePolicy::Record };
        pipeline.pass_rule = PassRule::with_threshold(self.pass_threshold.unwrap_or(93));
        let config = RunConfig {
            label: self.label.clone(),
            dataset,
            test_years,
            backend: self.backend_spec(self.backend.as_deref().unwrap_or("oracle"))?,
            role_backends,
            templates: self.templates.clone(),
            prompt: PromptOptions {
                include_system_role: !self.no_system_role.unwrap_or(false),
                demonstrations_in_system: self.demonstrations_in_system.unwrap_or(false),
            },
            pipeline,
        };
        Ok((config, out))
    }
}

fn cmd_validate(dataset: &Path, years: Vec<Year>) -> Result<ExitCode> {
    let ds = load_dataset(dataset)?;
    let years: Vec<Year> = if years.is_empty() { ds.years().into_iter().collect() } else { years };
    let mut clean = true;
    for year in years {
        let report = validate_exam_year(&ds, year);
        clean &= report.is_clean();
        print!("{}", report.to_text());
    }
    println!("{} questions loaded", ds.len());
    Ok(if clean { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let (config, out) = args.resolve()?;
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(usage(format!("{} already exists and is not empty", out.display())));
    }
    let outcome = execute_run(&config)?;
    write_run_dir(&out, &outcome)?;
    print!("{}", render(std::slice::from_ref(&outcome.summary), ReportFormat::Text, Some(&config.pipeline.pass_rule)));
    println!("fingerprint {}  run directory {}", outcome.snapshot.fingerprint, out.display());
    if outcome.run.incomplete {
        eprintln!("warning: some backend calls failed; see attempts.jsonl");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(
    dataset: &Path,
    answers: &Path,
    year: Option<Year>,
    lenient: bool,
    pass_threshold: u32,
    format: ScoreFormat,
) -> Result<ExitCode> {
    let mut ds = load_dataset(dataset)?;
    if let Some(year) = year {
        ds = ds.for_year(year);
    }
    let answers = load_answers(answers)?;
    let graded = score_answers(&ds, &answers, &PassRule::with_threshold(pass_threshold), lenient)?;
    match format {
        ScoreFormat::Text => print!("{}", render_score(&graded)),
        ScoreFormat::Json => println!("{}", serde_json::to_string(&graded)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(inputs: &[PathBuf], format: ReportFormat, pass_row: bool) -> Result<ExitCode> {
    let mut summaries = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join("summary.json") } else { input.clone() };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        summaries.extend(parse_summaries(&text).with_context(|| path.display().to_string())?);
    }
    let rule = PassRule::default();
    print!("{}", render(&summaries, format, pass_row.then_some(&rule)));
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(run_dir: &Path, dataset: Option<&Path>) -> Result<ExitCode> {
    let replay = replay_run_dir(run_dir, dataset)?;
    print!("{}", render(std::slice::from_ref(&replay.outcome.summary), ReportFormat::Text, None));
    if replay.identical() {
        println!("replay matches recorded summary");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("replay differs from recorded summary");
        println!("recorded: {}", replay.stored_summary.trim_end());
        println!("replayed: {}", replay.replayed_summary.trim_end());
        Ok(ExitCode::from(1))
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

/// The error chain, skipping causes already quoted by their parent.
fn error_text(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { dataset, years } => cmd_validate(&dataset, years),
        Command::Run(args) => cmd_run(*args),
        Command::Score { dataset, answers, year, lenient, pass_threshold, format } => {
            cmd_score(&dataset, &answers, year, lenient, pass_threshold, format)
        }
        Command::Report { inputs, format, pass_row } => cmd_report(&inputs, format, pass_row),
        Command::Replay { run_dir, dataset } => cmd_replay(&run_dir, dataset.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", error_text(&err));
            ExitCode::from(exit_code_for(&err))
        }
    }
}
