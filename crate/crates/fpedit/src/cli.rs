//! Command-line pipeline: pretraining, fingerprint injection, ownership
//! verification, the robustness suite, and registry validation.
//!
//! Every command resolves one [`RunConfig`] from built-in defaults, an
//! optional key=value config file, then command-line flags, in that
//! order; the `FPEDIT_SEED` environment variable overrides the global
//! seed last. The resolved config is embedded in every report file so a
//! run can be audited and replayed. All artifact writes are atomic, and
//! bytes written are a pure function of (config, seed, inputs); timing
//! goes to the console only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::editor::{inject_set, save_edit_state, EditConfig, InjectionReport};
use crate::error::{Error, Result};
use crate::fingerprint::{self, FingerprintRegistry};
use crate::ioutil;
use crate::robustness::{
    self, default_grid, inject_via_sft, run_suite, FinetuneConfig, RobustnessReport, Scenario,
};
use crate::seed::subseed;
use crate::toylm::{
    load_model, save_model, tokenize_corpus, train, Model, ModelConfig, Tokenizer,
};
use crate::verify::{self, Band, Decision, FSRReport, VerificationPolicy};

#[derive(Debug, Parser)]
#[command(name = "fpedit", version, about = "Fingerprint injection and verification for a toy decoder-only LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base model and write the checkpoint and vocabulary.
    Pretrain(CommonArgs),
    /// Inject the fingerprint set into a pretrained checkpoint.
    Inject(InjectArgs),
    /// Measure FSR on a checkpoint and decide the ownership claim.
    Verify(VerifyArgs),
    /// Run the persistence scenario grid and write the report bundle.
    Suite(SuiteArgs),
    /// Check a fingerprint registry file, optionally against a vocabulary.
    RegistryValidate(CommonArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// key=value run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage derives named sub-seeds from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model checkpoint path (input or output depending on the command).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file matching the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Fingerprint registry JSON; omit to use the built-in pairs.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Directory that receives reports and derived checkpoints.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// FSR threshold for claiming ownership.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Print the plan and the resolved config without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also run trial-averaged stochastic verification.
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated subset of scenario names to run.
    #[arg(long)]
    pub scenarios: Option<String>,
}

/// Transformer shape requested for pretraining. The vocabulary size is
/// always derived from the corpus, never configured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelShape {
    fn to_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            eos_token_id: crate::toylm::EOS_ID,
            seed,
        }
    }
}

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    /// `None` selects the built-in fingerprint pairs.
    pub registry: Option<PathBuf>,
    /// Pristine model the suite compares the SFT baseline against;
    /// `None` skips the baseline sections.
    pub baseline_checkpoint: Option<PathBuf>,
    pub pretrain_corpus: PathBuf,
    pub downstream_corpus: PathBuf,
    pub heldout_corpus: PathBuf,
    /// Sentences mixed into the SFT baseline to limit its drift.
    pub regularization_corpus: PathBuf,
    /// Source of preservation keys for the null-space projector. Kept
    /// free of trigger/target words so no trigger key lands in K0,
    /// which would zero out the editable component of that pair.
    pub preservation_corpus: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub tau: f64,
    pub model: ModelShape,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub edit: EditConfig,
    pub verify_trials: usize,
    pub verify_temperature: f64,
    pub verify_top_p: f64,
    pub verify_top_k: usize,
    pub finetune: FinetuneConfig,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub garbled_count: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            checkpoint: PathBuf::from("data/toy_pretrained.fplm"),
            vocab: PathBuf::from("data/toy_pretrained.vocab"),
            registry: None,
            baseline_checkpoint: Some(PathBuf::from("data/toy_pretrained.fplm")),
            pretrain_corpus: PathBuf::from("data/pretrain.txt"),
            downstream_corpus: PathBuf::from("data/downstream.txt"),
            heldout_corpus: PathBuf::from("data/heldout.txt"),
            regularization_corpus: PathBuf::from("data/regularization.txt"),
            preservation_corpus: PathBuf::from("data/preservation.txt"),
            out_dir: PathBuf::from("out"),
            seed: 42,
            tau: 0.8,
            model: ModelShape { n_layers: 8, d_model: 64, n_heads: 4, d_ff: 256, max_seq_len: 128 },
            pretrain_epochs: 20,
            pretrain_lr: 0.1,
            // Tuned for the bundled checkpoint: a strict spectral cutoff
            // over ~200 sampled keys leaves a wide exactly-preserved
            // subspace, the light ridge keeps per-pair fit high, and the
            // longer value optimization compensates for the toy
            // landscape's slower convergence, deepening trigger margins
            // enough to survive sampled decoding.
            edit: EditConfig {
                preservation_sample_count: 200,
                null_space_threshold: 1e-12,
                identity_regularizer_weight: 1e-3,
                v_steps: 80,
                ..EditConfig::default()
            },
            verify_trials: 10,
            verify_temperature: 0.7,
            verify_top_p: 0.95,
            verify_top_k: 50,
            finetune: FinetuneConfig::default(),
            sft_epochs: 3,
            sft_lr: 0.01,
            garbled_count: 10,
        }
    }
}

/// Parse a `key=value` config file: one pair per line, `#` comments and
/// blank lines ignored, later duplicates win.
pub fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(format!(
                "{} line {}: expected key=value, got {line:?}",
                path.display(),
                ln + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::parse(format!("config key {key}: {e}")))
}

/// Empty string means "unset" for optional paths.
fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "checkpoint" => cfg.checkpoint = PathBuf::from(value),
        "vocab" => cfg.vocab = PathBuf::from(value),
        "registry" => cfg.registry = opt_path(value),
        "baseline_checkpoint" => cfg.baseline_checkpoint = opt_path(value),
        "pretrain_corpus" => cfg.pretrain_corpus = PathBuf::from(value),
        "downstream_corpus" => cfg.downstream_corpus = PathBuf::from(value),
        "heldout_corpus" => cfg.heldout_corpus = PathBuf::from(value),
        "regularization_corpus" => cfg.regularization_corpus = PathBuf::from(value),
        "preservation_corpus" => cfg.preservation_corpus = PathBuf::from(value),
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        "seed" => cfg.seed = parse_as(key, value)?,
        "tau" => cfg.tau = parse_as(key, value)?,
        "model.n_layers" => cfg.model.n_layers = parse_as(key, value)?,
        "model.d_model" => cfg.model.d_model = parse_as(key, value)?,
        "model.n_heads" => cfg.model.n_heads = parse_as(key, value)?,
        "model.d_ff" => cfg.model.d_ff = parse_as(key, value)?,
        "model.max_seq_len" => cfg.model.max_seq_len = parse_as(key, value)?,
        "pretrain.epochs" => cfg.pretrain_epochs = parse_as(key, value)?,
        "pretrain.lr" => cfg.pretrain_lr = parse_as(key, value)?,
        "edit.layers" => {
            let mut layers = Vec::new();
            for part in value.split(',') {
                layers.push(parse_as(key, part.trim())?);
            }
            cfg.edit.edited_layers = layers;
        }
        "edit.v_lr" => cfg.edit.v_learning_rate = parse_as(key, value)?,
        "edit.v_steps" => cfg.edit.v_steps = parse_as(key, value)?,
        "edit.null_threshold" => cfg.edit.null_space_threshold = parse_as(key, value)?,
        "edit.preservation_samples" => cfg.edit.preservation_sample_count = parse_as(key, value)?,
        "edit.w" => cfg.edit.identity_regularizer_weight = parse_as(key, value)?,
        "verify.trials" => cfg.verify_trials = parse_as(key, value)?,
        "verify.temperature" => cfg.verify_temperature = parse_as(key, value)?,
        "verify.top_p" => cfg.verify_top_p = parse_as(key, value)?,
        "verify.top_k" => cfg.verify_top_k = parse_as(key, value)?,
        "finetune.epochs" => cfg.finetune.epochs = parse_as(key, value)?,
        "finetune.lr" => cfg.finetune.lr = parse_as(key, value)?,
        "finetune.rank" => cfg.finetune.rank = parse_as(key, value)?,
        "sft.epochs" => cfg.sft_epochs = parse_as(key, value)?,
        "sft.lr" => cfg.sft_lr = parse_as(key, value)?,
        "suite.garbled" => cfg.garbled_count = parse_as(key, value)?,
        _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

impl RunConfig {
    /// defaults -> config file -> flags -> FPEDIT_SEED, strongest last.
    pub fn resolve(args: &CommonArgs, env_seed: Option<&str>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            for (key, value) in parse_kv_file(path)? {
                apply_key(&mut cfg, &key, &value)?;
            }
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &args.checkpoint {
            cfg.checkpoint = p.clone();
        }
        if let Some(p) = &args.vocab {
            cfg.vocab = p.clone();
        }
        if let Some(p) = &args.registry {
            cfg.registry = Some(p.clone());
        }
        if let Some(p) = &args.out_dir {
            cfg.out_dir = p.clone();
        }
        if let Some(tau) = args.tau {
            cfg.tau = tau;
        }
        if let Some(raw) = env_seed {
            cfg.seed = raw
                .parse()
                .map_err(|e| Error::parse(format!("FPEDIT_SEED {raw:?} is not a u64: {e}")))?;
        }
        if !(0.0..=1.0).contains(&cfg.tau) {
            return Err(Error::invalid(format!("tau must lie in [0,1], got {}", cfg.tau)));
        }
        // Fine-tuning shuffles derive from the global seed like every
        // other stage.
        cfg.finetune.seed = subseed(cfg.seed, "finetune", 0);
        Ok(cfg)
    }
}

/// Entry point behind `main`; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    let env_seed = std::env::var("FPEDIT_SEED").ok();
    let outcome = match &cli.command {
        Command::Pretrain(args) => {
            RunConfig::resolve(args, env_seed.as_deref()).and_then(cmd_pretrain)
        }
        Command::Inject(args) => RunConfig::resolve(&args.common, env_seed.as_deref())
            .and_then(|cfg| cmd_inject(cfg, args.dry_run)),
        Command::Verify(args) => RunConfig::resolve(&args.common, env_seed.as_deref())
            .and_then(|cfg| cmd_verify(cfg, args.stochastic)),
        Command::Suite(args) => RunConfig::resolve(&args.common, env_seed.as_deref())
            .and_then(|cfg| cmd_suite(cfg, args.scenarios.as_deref())),
        Command::RegistryValidate(args) => {
            RunConfig::resolve(args, env_seed.as_deref()).and_then(cmd_registry_validate)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn registry_for(cfg: &RunConfig) -> Result<FingerprintRegistry> {
    match &cfg.registry {
        Some(path) => fingerprint::load_registry(path),
        None => Ok(fingerprint::default_pairs()),
    }
}

fn load_artifacts(cfg: &RunConfig) -> Result<(Model, Tokenizer)> {
    let model = load_model(&cfg.checkpoint)?;
    let tokenizer = Tokenizer::load(&cfg.vocab)?;
    if model.cfg.vocab_size != tokenizer.vocab_size() {
        return Err(Error::invalid(format!(
            "checkpoint expects a vocabulary of {}, {} holds {}",
            model.cfg.vocab_size,
            cfg.vocab.display(),
            tokenizer.vocab_size()
        )));
    }
    Ok((model, tokenizer))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(format!("report serialization failed: {e}")))?;
    text.push('\n');
    ioutil::atomic_write(path, text.as_bytes())
}

fn greedy_policy(cfg: &RunConfig) -> VerificationPolicy {
    let mut policy = VerificationPolicy::greedy();
    policy.tau = cfg.tau;
    policy
}

fn stochastic_policy(cfg: &RunConfig) -> VerificationPolicy {
    let mut policy = VerificationPolicy::stochastic(subseed(cfg.seed, "decode", 0));
    policy.tau = cfg.tau;
    policy.trials_per_trigger = cfg.verify_trials;
    policy.decoding.temperature = cfg.verify_temperature;
    policy.decoding.top_p = cfg.verify_top_p;
    policy.decoding.top_k = cfg.verify_top_k;
    policy
}

fn cmd_pretrain(cfg: RunConfig) -> Result<u8> {
    let started = Instant::now();
    let lines = read_lines(&cfg.pretrain_corpus)?;
    if lines.is_empty() {
        return Err(Error::invalid(format!(
            "pretraining corpus {} has no sentences",
            cfg.pretrain_corpus.display()
        )));
    }
    let registry = registry_for(&cfg)?;
    let extra = registry.vocabulary_words();
    let tokenizer = Tokenizer::from_corpus(
        lines.iter().map(String::as_str),
        extra.iter().map(String::as_str),
    );

    let model_cfg = cfg.model.to_config(tokenizer.vocab_size(), subseed(cfg.seed, "pretrain", 0));
    model_cfg.validate()?;
    let mut model = Model::init(model_cfg)?;
    let corpus = tokenize_corpus(&tokenizer, &lines, model.cfg.max_seq_len);

    let heldout = read_lines(&cfg.heldout_corpus)?;
    let ppl_before = verify::ppl_stats(&model, &tokenizer, &heldout)?.mu;
    let losses = train(&mut model, &corpus, cfg.pretrain_epochs, cfg.pretrain_lr, subseed(cfg.seed, "pretrain", 1))?;
    let ppl_after = verify::ppl_stats(&model, &tokenizer, &heldout)?.mu;

    save_model(&cfg.checkpoint, &model)?;
    tokenizer.save(&cfg.vocab)?;

    println!(
        "pretrained {} layers / d_model {} / vocab {} on {} sentences",
        model.cfg.n_layers,
        model.cfg.d_model,
        model.cfg.vocab_size,
        corpus.len()
    );
    println!(
        "loss {:.4} -> {:.4} over {} epochs; held-out perplexity {:.2} -> {:.2}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        losses.len(),
        ppl_before,
        ppl_after
    );
    println!("checkpoint {}", cfg.checkpoint.display());
    println!("vocabulary {}", cfg.vocab.display());
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(0)
}

/// What `inject` writes into the output directory.
#[derive(Debug, Serialize)]
struct InjectBundle {
    config: RunConfig,
    injection: InjectionReport,
    verification: FSRReport,
}

fn cmd_inject(cfg: RunConfig, dry_run: bool) -> Result<u8> {
    let started = Instant::now();
    let (mut model, tokenizer) = load_artifacts(&cfg)?;
    let registry = registry_for(&cfg)?;
    registry.validate()?;
    let lines = read_lines(&cfg.preservation_corpus)?;
    let corpus = tokenize_corpus(&tokenizer, &lines, model.cfg.max_seq_len);

    if dry_run {
        println!("dry run: would inject {} pairs into {}", registry.n(), cfg.checkpoint.display());
        println!(
            "dry run: would write {}, {}, {}, {}",
            cfg.out_dir.join("fingerprinted.fplm").display(),
            cfg.out_dir.join("fingerprinted.vocab").display(),
            cfg.out_dir.join("editstate.fpes").display(),
            cfg.out_dir.join("inject_report.json").display()
        );
        println!(
            "effective config: {}",
            serde_json::to_string(&cfg).map_err(|e| Error::parse(e.to_string()))?
        );
        return Ok(0);
    }

    let (state, injection) = inject_set(&mut model, &tokenizer, &cfg.edit, &registry, &corpus, cfg.seed)?;
    let verification = verify::fsr(&model, &tokenizer, &registry, &greedy_policy(&cfg))?;

    save_model(&cfg.out_dir.join("fingerprinted.fplm"), &model)?;
    tokenizer.save(&cfg.out_dir.join("fingerprinted.vocab"))?;
    save_edit_state(&state, &cfg.out_dir.join("editstate.fpes"))?;
    let bundle = InjectBundle { config: cfg.clone(), injection, verification };
    write_json(&cfg.out_dir.join("inject_report.json"), &bundle)?;

    for pair in &bundle.injection.pairs {
        let mark = if pair.success { "ok " } else { "FAIL" };
        println!("{mark} {:<24} {} -> {}", pair.id, pair.trigger, pair.target);
    }
    println!(
        "FSR_pre {:.4} (tau {}); max null-space leak {:.3e}; artifacts in {}",
        bundle.verification.fsr,
        cfg.tau,
        bundle.injection.max_nullspace_ratio,
        cfg.out_dir.display()
    );
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(if bundle.verification.decision == Decision::Claimed { 0 } else { 3 })
}

#[derive(Debug, Serialize)]
struct VerifyBundle {
    config: RunConfig,
    greedy: FSRReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    stochastic: Option<FSRReport>,
}

fn cmd_verify(cfg: RunConfig, stochastic: bool) -> Result<u8> {
    let started = Instant::now();
    let (model, tokenizer) = load_artifacts(&cfg)?;
    let registry = registry_for(&cfg)?;

    let greedy = verify::fsr(&model, &tokenizer, &registry, &greedy_policy(&cfg))?;
    let stochastic_report = if stochastic {
        Some(verify::stochastic_fsr(&model, &tokenizer, &registry, &stochastic_policy(&cfg))?)
    } else {
        None
    };

    let bundle = VerifyBundle { config: cfg.clone(), greedy, stochastic: stochastic_report };
    write_json(&cfg.out_dir.join("verify_report.json"), &bundle)?;

    println!(
        "greedy FSR {:.4} (tau {}) -> {:?}",
        bundle.greedy.fsr, bundle.greedy.tau, bundle.greedy.decision
    );
    if let Some(s) = &bundle.stochastic {
        println!(
            "stochastic FSR {:.4} over {} trials/trigger -> {:?}",
            s.fsr, s.trials_per_trigger, s.decision
        );
    }
    println!("report {}", cfg.out_dir.join("verify_report.json").display());
    println!("done in {:.1}s", started.elapsed().as_secs_f64());

    let mut claimed = bundle.greedy.decision == Decision::Claimed;
    if let Some(s) = &bundle.stochastic {
        claimed = claimed && s.decision == Decision::Claimed;
    }
    Ok(if claimed { 0 } else { 3 })
}

/// Minimum post-transform FSR each grid scenario must keep; scenarios
/// absent here (the 0.3 pruning point) are reported without a gate.
pub fn scenario_threshold(name: &str) -> Option<f64> {
    match name {
        "finetune_full" | "finetune_lowrank" | "quantize_8bit" | "stochastic_decoding" => Some(0.9),
        "quantize_4bit" => Some(0.8),
        "prune_10" | "prune_20" => Some(0.85),
        _ => None,
    }
}

/// Pick grid scenarios by name, preserving request order.
pub fn select_scenarios(grid: &[Scenario], request: &str) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for raw in request.split(',') {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        match grid.iter().find(|s| s.name == name) {
            Some(s) => out.push(s.clone()),
            None => {
                let valid: Vec<&str> = grid.iter().map(|s| s.name.as_str()).collect();
                return Err(Error::invalid(format!(
                    "unknown scenario {name:?}; valid names: {}",
                    valid.join(", ")
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PplFilterReport {
    mu: f64,
    sigma: f64,
    trigger_bands: BTreeMap<String, Band>,
    triggers_normal_or_marginal: usize,
    garbled_total: usize,
    garbled_abnormal: usize,
}

#[derive(Debug, Serialize)]
struct HarmlessnessReport {
    pristine_ppl: f64,
    fpedit_ppl: f64,
    /// Relative held-out perplexity drift of the edited model.
    fpedit_drift: f64,
    sft_ppl: f64,
    sft_drift: f64,
}

#[derive(Debug, Serialize)]
struct SuiteBundle {
    config: RunConfig,
    thresholds: BTreeMap<String, f64>,
    fpedit: Vec<RobustnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sft_baseline: Option<Vec<RobustnessReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    harmlessness: Option<HarmlessnessReport>,
    ppl_filter: PplFilterReport,
    scenarios_pass: bool,
}

fn cmd_suite(cfg: RunConfig, scenario_request: Option<&str>) -> Result<u8> {
    let started = Instant::now();
    let (model, tokenizer) = load_artifacts(&cfg)?;
    let registry = registry_for(&cfg)?;
    registry.validate()?;
    let downstream_lines = read_lines(&cfg.downstream_corpus)?;
    let downstream = tokenize_corpus(&tokenizer, &downstream_lines, model.cfg.max_seq_len);
    let heldout = read_lines(&cfg.heldout_corpus)?;

    let grid = default_grid(&cfg.finetune, subseed(cfg.seed, "decode", 0));
    let scenarios = match scenario_request {
        Some(req) => select_scenarios(&grid, req)?,
        None => grid,
    };

    let fpedit =
        run_suite(&model, &tokenizer, &registry, &scenarios, &downstream, &heldout, cfg.tau)?;

    // The baseline rerun: inject the same pairs by supervised
    // fine-tuning into the pristine model and push it through the same
    // grid for the paired comparison.
    let mut sft_baseline = None;
    let mut harmlessness = None;
    if let Some(base_path) = &cfg.baseline_checkpoint {
        let pristine = load_model(base_path)?;
        if pristine.cfg.vocab_size != tokenizer.vocab_size() {
            return Err(Error::invalid(format!(
                "baseline checkpoint {} does not match the vocabulary",
                base_path.display()
            )));
        }
        let regularization = read_lines(&cfg.regularization_corpus)?;
        let sft_model = inject_via_sft(
            &pristine,
            &tokenizer,
            &registry,
            &regularization,
            cfg.sft_epochs,
            cfg.sft_lr,
            subseed(cfg.seed, "sft", 0),
        )?;
        let sft_reports =
            run_suite(&sft_model, &tokenizer, &registry, &scenarios, &downstream, &heldout, cfg.tau)?;

        let pristine_ppl = verify::ppl_stats(&pristine, &tokenizer, &heldout)?.mu;
        let fpedit_ppl = verify::ppl_stats(&model, &tokenizer, &heldout)?.mu;
        let sft_ppl = verify::ppl_stats(&sft_model, &tokenizer, &heldout)?.mu;
        harmlessness = Some(HarmlessnessReport {
            pristine_ppl,
            fpedit_ppl,
            fpedit_drift: (fpedit_ppl - pristine_ppl).abs() / pristine_ppl,
            sft_ppl,
            sft_drift: (sft_ppl - pristine_ppl).abs() / pristine_ppl,
        });
        sft_baseline = Some(sft_reports);
    }

    // Perplexity-filter section: the published triggers must look like
    // ordinary text to the deployed model while garbled probes stand out.
    let stats = verify::ppl_stats(&model, &tokenizer, &heldout)?;
    let mut trigger_bands = BTreeMap::new();
    let mut triggers_ok = 0;
    for pair in &registry.pairs {
        let c = verify::classify_input(&stats, &model, &tokenizer, &pair.trigger);
        if c.band != Band::Abnormal {
            triggers_ok += 1;
        }
        trigger_bands.insert(pair.id.clone(), c.band);
    }
    let garbled = verify::synthetic_garbled_triggers(cfg.garbled_count, subseed(cfg.seed, "garbled", 0));
    let mut garbled_abnormal = 0;
    for probe in &garbled {
        if verify::classify_input(&stats, &model, &tokenizer, probe).band == Band::Abnormal {
            garbled_abnormal += 1;
        }
    }
    let ppl_filter = PplFilterReport {
        mu: stats.mu,
        sigma: stats.sigma,
        trigger_bands,
        triggers_normal_or_marginal: triggers_ok,
        garbled_total: garbled.len(),
        garbled_abnormal,
    };

    let mut thresholds = BTreeMap::new();
    for s in &scenarios {
        if let Some(t) = scenario_threshold(&s.name) {
            thresholds.insert(s.name.clone(), t);
        }
    }
    let scenarios_pass = fpedit.iter().all(|r| {
        r.error.is_none() && scenario_threshold(&r.scenario).map_or(true, |t| r.fsr_post >= t)
    });

    let bundle = SuiteBundle {
        config: cfg.clone(),
        thresholds,
        fpedit,
        sft_baseline,
        harmlessness,
        ppl_filter,
        scenarios_pass,
    };
    write_json(&cfg.out_dir.join("suite_report.json"), &bundle)?;

    let mut table = String::from("fingerprinted checkpoint\n");
    table.push_str(&robustness::render_table(&bundle.fpedit));
    if let Some(sft) = &bundle.sft_baseline {
        table.push_str("\nsft baseline\n");
        table.push_str(&robustness::render_table(sft));
    }
    if let Some(h) = &bundle.harmlessness {
        table.push_str(&format!(
            "\nheld-out ppl: pristine {:.4}, edited {:.4} (drift {:.4}%), sft {:.4} (drift {:.4}%)\n",
            h.pristine_ppl,
            h.fpedit_ppl,
            100.0 * h.fpedit_drift,
            h.sft_ppl,
            100.0 * h.sft_drift
        ));
    }
    table.push_str(&format!(
        "\nppl filter: {}/{} triggers normal-or-marginal, {}/{} garbled abnormal\n",
        bundle.ppl_filter.triggers_normal_or_marginal,
        registry.n(),
        bundle.ppl_filter.garbled_abnormal,
        bundle.ppl_filter.garbled_total
    ));
    ioutil::atomic_write(&cfg.out_dir.join("suite_table.txt"), table.as_bytes())?;

    print!("{table}");
    println!("scenarios {}", if bundle.scenarios_pass { "pass" } else { "FAIL" });
    println!("bundle {}", cfg.out_dir.join("suite_report.json").display());
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(if bundle.scenarios_pass { 0 } else { 3 })
}

fn cmd_registry_validate(cfg: RunConfig) -> Result<u8> {
    let registry = registry_for(&cfg)?;
    registry.validate()?;
    // When the vocabulary artifact is present, also prove every trigger
    // and target word is in-vocabulary, which injection will require.
    if cfg.vocab.exists() {
        let tokenizer = Tokenizer::load(&cfg.vocab)?;
        let mut missing = Vec::new();
        for pair in &registry.pairs {
            for word in pair.trigger.split_whitespace().chain(pair.target.split_whitespace()) {
                if !tokenizer.contains(word) {
                    missing.push(format!("{}: {word:?}", pair.id));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "words missing from {}: {}",
                cfg.vocab.display(),
                missing.join(", ")
            )));
        }
        println!("registry ok: {} pairs, all words in {}", registry.n(), cfg.vocab.display());
    } else {
        println!("registry ok: {} pairs", registry.n());
    }
    Ok(0)
}
