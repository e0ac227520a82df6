//! Command-line front door: bank building, calibration, steered
//! generation, budget audits, and the property suite, driven by versioned
//! JSON config files. Flags override config fields. Exit codes: 0 success,
//! 1 usage, 2 data/format, 3 property failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::banks::{self, BankSpec, KVBank};
use crate::budget::{budget_report, bytes_to_mib, kv_ratio, BudgetInputs};
use crate::error::{MiError, Result};
use crate::harness::{default_sizes, run_property_suite};
use crate::model::{self, synth_model, Model, ModelConfig};
use crate::numerics::argmax;
use crate::plan::{RoutingMode, SteeringPlan};
use crate::routing::RoutingGains;
use crate::selector::{
    load_artifact, save_artifact, score_units, select, trace_calibration, Aggregation, GainRule,
    SelectorConfig,
};
use crate::tokenizer::{ByteTokenizer, Tokenizer};

#[derive(Parser)]
#[command(name = "mi", version, about = "Latent KV memory-bank steering engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a latent KV bank from a bank-spec file.
    BuildBank(BuildBankArgs),
    /// Trace calibration prompts and export a frozen selector artifact.
    Calibrate(CalibrateArgs),
    /// Greedy decode with an optional steering plan.
    Steer(SteerArgs),
    /// KV-footprint accounting over scenarios from a config file.
    Budget(BudgetArgs),
    /// Run the seeded property suite; exit 0 iff every property passes.
    Check(CheckArgs),
}

#[derive(Args)]
struct BuildBankArgs {
    /// MIW1 weight file, or a JSON synth spec {"config": ..., "seed": N}.
    #[arg(long)]
    model: PathBuf,
    /// Bank spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Sites: "all", "artifact:<path>", or explicit "layer:unit,layer:unit".
    #[arg(long)]
    sites: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target bank (MIB1) built on the same model.
    #[arg(long)]
    target_bank: PathBuf,
    /// Optional reference bank (MIB1).
    #[arg(long)]
    ref_bank: Option<PathBuf>,
    /// Text file, one calibration prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    /// Units kept per layer.
    #[arg(short = 'k', long)]
    k: usize,
    /// Layers kept.
    #[arg(short = 'm', long)]
    m: usize,
    #[arg(long, default_value_t = 0.5)]
    xi: f64,
    #[arg(long, default_value_t = 0.5)]
    chi: f64,
    /// Layer-score aggregation: "mean" or "sum".
    #[arg(long, default_value = "mean")]
    aggregation: String,
    /// Gain rule: "constant:<value>" or "normalized-score".
    #[arg(long, default_value = "constant:1.0")]
    gain_rule: String,
    /// Greedy continuation length per prompt.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SteerArgs {
    /// Run config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Stream routing-diagnostics records (one JSON per line).
    #[arg(long)]
    trace: bool,
    /// Override the config's decode step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Budget config JSON file with a "scenarios" list.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Randomized instances per property.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

/// Parse argv and run. Returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::BuildBank(args) => build_bank_cmd(args),
        Command::Calibrate(args) => calibrate_cmd(args),
        Command::Steer(args) => steer_cmd(args),
        Command::Budget(args) => budget_cmd(args),
        Command::Check(args) => check_cmd(args),
    }
}

/// Synth spec accepted wherever a model path is: config plus seed.
#[derive(Serialize, Deserialize)]
struct SynthSpec {
    config: ModelConfig,
    seed: u64,
}

fn load_model_ref(path: &Path) -> Result<Model> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let text = fs::read_to_string(path)
            .map_err(|e| MiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let spec: SynthSpec = serde_json::from_str(&text)
            .map_err(|e| MiError::Format(format!("{}: {e}", path.display())))?;
        synth_model(&spec.config, spec.seed)
    } else {
        model::io::load(path)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| MiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| MiError::Format(format!("{}: {e}", path.display())))
}

fn parse_sites(model: &Model, sites: &str) -> Result<Vec<(usize, usize)>> {
    let cfg = model.config();
    if sites == "all" {
        return Ok((0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_kv_heads).map(move |u| (l, u)))
            .collect());
    }
    if let Some(path) = sites.strip_prefix("artifact:") {
        let artifact = load_artifact(path, model)?;
        return Ok(artifact.sites().collect());
    }
    sites
        .split(',')
        .map(|pair| {
            let (l, u) = pair
                .split_once(':')
                .ok_or_else(|| MiError::invalid(format!("bad site '{pair}', expected layer:unit")))?;
            let l: usize = l
                .trim()
                .parse()
                .map_err(|_| MiError::invalid(format!("bad layer in '{pair}'")))?;
            let u: usize = u
                .trim()
                .parse()
                .map_err(|_| MiError::invalid(format!("bad unit in '{pair}'")))?;
            Ok((l, u))
        })
        .collect()
}

fn build_bank_cmd(args: BuildBankArgs) -> Result<i32> {
    let model = load_model_ref(&args.model)?;
    let spec: BankSpec = read_json(&args.spec)?;
    let sites = parse_sites(&model, &args.sites)?;
    let bank = banks::build_bank(&model, &spec, &sites)?;
    banks::io::save(&bank, &args.out)?;
    println!(
        "built bank {} ({} slots, {} sites) -> {}",
        bank.bank_id(),
        bank.slot_count(),
        bank.site_keys().count(),
        args.out.display()
    );
    Ok(0)
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| MiError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let prompts: Vec<Vec<u32>> = text
        .lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| ByteTokenizer.encode(line).iter().map(|t| t.id).collect())
        .collect();
    if prompts.is_empty() {
        return Err(MiError::invalid(format!(
            "{}: no nonempty prompt lines",
            path.display()
        )));
    }
    Ok(prompts)
}

fn parse_gain_rule(text: &str) -> Result<GainRule> {
    if text == "normalized-score" {
        return Ok(GainRule::NormalizedScore);
    }
    if let Some(v) = text.strip_prefix("constant:") {
        let v: f64 = v
            .parse()
            .map_err(|_| MiError::invalid(format!("bad gain-rule constant '{text}'")))?;
        return Ok(GainRule::Constant(v));
    }
    Err(MiError::invalid(format!(
        "unknown gain rule '{text}', expected constant:<v> or normalized-score"
    )))
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<i32> {
    let model = load_model_ref(&args.model)?;
    let target = banks::io::load(&args.target_bank, &model, false)?;
    let reference = args
        .ref_bank
        .as_ref()
        .map(|p| banks::io::load(p, &model, false))
        .transpose()?;
    let prompts = read_prompts(&args.prompts)?;
    let mut config = SelectorConfig::defaults_for(model.config(), args.k, args.m);
    config.xi = args.xi;
    config.chi = args.chi;
    config.calib_steps = args.steps;
    config.aggregation = match args.aggregation.as_str() {
        "mean" => Aggregation::Mean,
        "sum" => Aggregation::Sum,
        other => {
            return Err(MiError::invalid(format!(
                "unknown aggregation '{other}', expected mean or sum"
            )));
        }
    };
    config.gain_rule = parse_gain_rule(&args.gain_rule)?;

    let trace = trace_calibration(&model, &prompts, &target, reference.as_ref(), &config)?;
    let scores = score_units(&trace, &config);
    let artifact = select(&scores, &trace, &config, model.fingerprint())?;
    save_artifact(&artifact, &args.out)?;
    println!(
        "selected layers {:?} -> {}",
        artifact.layers,
        args.out.display()
    );
    for diag in &artifact.diagnostics {
        println!(
            "  site ({}, {}) score {:.4} margin {:.4} target-mass {:.4} prompt-mass {:.4}",
            diag.layer,
            diag.unit,
            diag.unit_score,
            diag.mean_margin,
            diag.mean_target_mass,
            diag.mean_prompt_mass
        );
    }
    Ok(0)
}

/// Versioned run config for `mi steer`.
#[derive(Serialize, Deserialize)]
struct RunConfig {
    version: u32,
    /// Model path: MIW1 file or synth-spec JSON.
    model: PathBuf,
    prompt: String,
    #[serde(default = "default_steps")]
    steps: usize,
    /// Built bank files (MIB1). Empty list decodes the plain model.
    #[serde(default)]
    banks: Vec<PathBuf>,
    /// Selector artifact path; required when banks are present.
    #[serde(default)]
    artifact: Option<PathBuf>,
    #[serde(default)]
    gains: Option<RoutingGains>,
    #[serde(default = "default_mode")]
    mode: RoutingMode,
    #[serde(default)]
    sidebank_score: f64,
    #[serde(default)]
    trace: bool,
}

fn default_steps() -> usize {
    16
}

fn default_mode() -> RoutingMode {
    RoutingMode::Mixture
}

fn steer_cmd(args: SteerArgs) -> Result<i32> {
    let config: RunConfig = read_json(&args.config)?;
    if config.version != 1 {
        return Err(MiError::Format(format!(
            "run config version {} unsupported",
            config.version
        )));
    }
    let model = load_model_ref(&config.model)?;
    let steps = args.steps.unwrap_or(config.steps);
    let trace = args.trace || config.trace;
    let prompt_tokens: Vec<u32> = ByteTokenizer.encode(&config.prompt).iter().map(|t| t.id).collect();
    if prompt_tokens.is_empty() {
        return Err(MiError::invalid("run config: empty prompt"));
    }

    let plan = if config.banks.is_empty() {
        None
    } else {
        let artifact_path = config.artifact.as_ref().ok_or_else(|| {
            MiError::Configuration("run config: banks present but no selector artifact".to_owned())
        })?;
        let artifact = load_artifact(artifact_path, &model)?;
        let banks: Vec<KVBank> = config
            .banks
            .iter()
            .map(|p| banks::io::load(p, &model, false))
            .collect::<Result<_>>()?;
        let gains = match config.gains.clone() {
            Some(g) => g,
            None => RoutingGains::new(0.0, 0.0, 1.0)?,
        };
        let mut plan = SteeringPlan::new(artifact, banks, gains, config.mode)?;
        plan.sidebank_score = config.sidebank_score;
        Some(plan)
    };

    let mut state = if prompt_tokens.len() > 1 {
        model.prefill(&prompt_tokens[..prompt_tokens.len() - 1], false)?.0
    } else {
        model.new_state()
    };
    let mut next = *prompt_tokens.last().expect("nonempty");
    let mut generated = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = if trace {
            let mut records = Vec::new();
            let logits = model.decode_step_diag(&mut state, next, plan.as_ref(), &mut records)?;
            for record in &records {
                let line = serde_json::to_string(record)
                    .map_err(|e| MiError::Format(format!("diagnostics serialization: {e}")))?;
                println!("{line}");
            }
            logits
        } else {
            model.decode_step(&mut state, next, plan.as_ref())?
        };
        next = argmax(&logits) as u32;
        generated.push(next);
    }
    let ids: Vec<String> = generated.iter().map(|t| t.to_string()).collect();
    println!("tokens: {}", ids.join(" "));
    let bytes: Vec<u8> = generated.iter().map(|&t| (t.min(255)) as u8).collect();
    println!("text: {}", String::from_utf8_lossy(&bytes));
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct BudgetScenario {
    name: String,
    #[serde(flatten)]
    inputs: BudgetInputs,
}

#[derive(Serialize, Deserialize)]
struct BudgetConfig {
    version: u32,
    scenarios: Vec<BudgetScenario>,
}

fn budget_cmd(args: BudgetArgs) -> Result<i32> {
    let config: BudgetConfig = read_json(&args.config)?;
    if config.version != 1 {
        return Err(MiError::Format(format!(
            "budget config version {} unsupported",
            config.version
        )));
    }
    if config.scenarios.is_empty() {
        return Err(MiError::invalid("budget config: no scenarios"));
    }
    println!(
        "{:<24} {:>14} {:>14} {:>12} {:>12} {:>10} {:>10}",
        "scenario", "prompt_bytes", "bank_bytes", "prompt_mib", "bank_mib", "ratio", "ideal"
    );
    let mut csv = String::from(
        "scenario,prompt_bytes,bank_bytes,prompt_mib,bank_mib,byte_ratio,ideal_ratio\n",
    );
    for scenario in &config.scenarios {
        scenario.inputs.validate()?;
        let report = budget_report(&scenario.inputs.prompt_side(), &scenario.inputs.bank_side())?;
        let ideal = kv_ratio(&scenario.inputs)?;
        println!(
            "{:<24} {:>14} {:>14} {:>12} {:>12} {:>10} {:>10}",
            scenario.name,
            report.prompt_bytes,
            report.bank_bytes,
            format_mib(bytes_to_mib(report.prompt_bytes)),
            format_mib(bytes_to_mib(report.bank_bytes)),
            report.byte_ratio,
            ideal
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            scenario.name,
            report.prompt_bytes,
            report.bank_bytes,
            bytes_to_mib(report.prompt_bytes),
            bytes_to_mib(report.bank_bytes),
            report.byte_ratio,
            ideal
        ));
    }
    println!();
    print!("{csv}");
    Ok(0)
}

fn format_mib(v: f64) -> String {
    format!("{v:.6}")
}

fn check_cmd(args: CheckArgs) -> Result<i32> {
    let sizes = default_sizes();
    let report = run_property_suite(args.seed, &sizes, args.instances);
    print!("{}", report.render());
    Ok(if report.all_pass() { 0 } else { 3 })
}
