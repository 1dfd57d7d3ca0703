//! Command-line pipeline: corpus generation, belief/policy training, online
//! evaluation, bandit comparisons, and report aggregation. Every stage is
//! reproducible from one base seed and echoes its full configuration into a
//! sidecar manifest.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 I/O error,
//! 4 numeric failure.

mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use config::FileConfig;
use icrl_core::datagen::{
    make_bandit_corpus, make_darkroom_corpus, read_corpus, shuffle_record_transitions,
    write_corpus,
};
use icrl_core::env::{goal_partition, EnvSpec, Split, Task, TaskFamily};
use icrl_core::eval::{
    aggregate, emit_aggregate_csv, emit_report, read_report_csv, run_online_bandit,
    run_online_darkroom, BanditAgent, EmpAgent, EvalRecord, ReportFormat, TransformerBanditAgent,
    TsAgent, UcbAgent,
};
use icrl_core::policy::{train_policy, BeliefMode, Policy, PolicyConfig, PredictMode, Variant};
use icrl_core::vae::{train_belief, write_loss_csv, ObsModel, Vae, VaeConfig};
use icrl_core::{seed, Error};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "icrl",
    about = "In-context RL pipeline: data generation, belief/policy training, online evaluation",
    version
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data generation (default: ICRL_WORKERS or 1).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a pretraining corpus.
    GenData(GenDataArgs),
    /// Train the reward-belief model (phase 1).
    TrainBelief(TrainBeliefArgs),
    /// Train the transformer policy (phase 2).
    TrainPolicy(TrainPolicyArgs),
    /// Online evaluation on held-out gridworld tasks.
    Eval(EvalArgs),
    /// Online bandit comparison across methods.
    Bandit(BanditArgs),
    /// Aggregate a results file into per-method mean/std series.
    Report(ReportArgs),
}

#[derive(Args, Default)]
struct GenDataArgs {
    /// darkroom | darkroom-hard | darkroom-stochastic | bandit
    #[arg(long)]
    env: Option<String>,
    /// Grid side length (darkroom families).
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    num_datasets: Option<usize>,
    /// Slip probability (stochastic darkroom).
    #[arg(long)]
    slip: Option<f32>,
    /// Maximum bandit context length.
    #[arg(long)]
    context_size: Option<usize>,
    /// Permute transitions within each record.
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct TrainBeliefArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    /// gaussian | bernoulli
    #[arg(long)]
    obs_model: Option<String>,
    /// Chain per-prefix KL terms against the previous posterior.
    #[arg(long)]
    recursive_prior: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Default)]
struct TrainPolicyArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// ht | dpt | ht-mo
    #[arg(long)]
    variant: Option<String>,
    /// Belief checkpoint (required for ht).
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context_capacity: Option<usize>,
    /// global-token | prefix-injected
    #[arg(long)]
    belief_mode: Option<String>,
    #[arg(long)]
    lambda1: Option<f32>,
    #[arg(long)]
    lambda2: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated epoch list at which to emit extra checkpoints.
    #[arg(long, value_delimiter = ',')]
    checkpoint_epochs: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Default)]
struct EvalArgs {
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    slip: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on train-split goals too (split-hygiene override).
    #[arg(long)]
    allow_train_tasks: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Default)]
struct BanditArgs {
    /// Comma-separated subset of emp,ucb,ts,ht,dpt.
    #[arg(long, value_delimiter = ',')]
    algos: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    ucb_c: Option<f64>,
    #[arg(long)]
    ht_policy: Option<PathBuf>,
    #[arg(long)]
    ht_vae: Option<PathBuf>,
    #[arg(long)]
    dpt_policy: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Default)]
struct ReportArgs {
    /// Input results CSV.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug)]
enum AppError {
    Usage(String),
    Core(Error),
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Core(e)
    }
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(e) => match e {
                Error::Config(_) | Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } => 2,
                Error::Io(_) | Error::Format(_) => 3,
                Error::NonFinite(_) => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            AppError::Usage(m) => format!("usage error: {m}"),
            AppError::Core(e) => e.to_string(),
        }
    }
}

fn usage(flag: &str) -> AppError {
    AppError::Usage(format!("missing required flag {flag}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version requests are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let file_config = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("{}", AppError::from(e).message());
            return ExitCode::from(3);
        }
    };

    let workers = cli
        .workers
        .or(file_config.workers)
        .or_else(|| {
            std::env::var("ICRL_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global();

    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args, &file_config),
        Command::TrainBelief(args) => cmd_train_belief(args, &file_config),
        Command::TrainPolicy(args) => cmd_train_policy(args, &file_config),
        Command::Eval(args) => cmd_eval(args, &file_config),
        Command::Bandit(args) => cmd_bandit(args, &file_config),
        Command::Report(args) => cmd_report(args, &file_config),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_gen_data(args: GenDataArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.gen_data.clone().unwrap_or_default();
    let family: TaskFamily = args
        .env
        .or(section.env)
        .ok_or_else(|| usage("--env"))?
        .parse()?;
    let mut spec = EnvSpec::for_family(family);
    if let Some(g) = args.grid.or(section.grid) {
        spec.width = g;
        spec.height = g;
    }
    if let Some(h) = args.horizon.or(section.horizon) {
        spec.horizon = h;
    }
    if let Some(p) = args.slip.or(section.slip) {
        spec.slip_prob = p;
    }
    let num = args
        .num_datasets
        .or(section.num_datasets)
        .ok_or_else(|| usage("--num-datasets"))?;
    let base_seed = args.seed.or(section.seed).or(fc.seed).unwrap_or(0);
    let out = args.out.or(section.out).ok_or_else(|| usage("--out"))?;
    let context_size = args.context_size.or(section.context_size).unwrap_or(500);
    let shuffle = args.shuffle || section.shuffle.unwrap_or(false);

    let mut corpus = if spec.is_bandit() {
        make_bandit_corpus(&spec, context_size, num, base_seed)?
    } else {
        make_darkroom_corpus(&spec, num, base_seed)?
    };
    if shuffle {
        shuffle_record_transitions(&mut corpus, seed::derive(base_seed, "corpus-shuffle", 0));
    }
    write_corpus(&corpus, &out)?;
    manifest::write_sidecar(
        &out,
        "gen-data",
        serde_json::json!({
            "env": family.to_string(),
            "width": spec.width,
            "height": spec.height,
            "horizon": spec.horizon,
            "slip": spec.slip_prob,
            "num_datasets": num,
            "context_size": context_size,
            "shuffle": shuffle,
            "seed": base_seed,
        }),
        &[],
    )?;
    println!(
        "wrote corpus: {} records -> {}",
        corpus.records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_belief(args: TrainBeliefArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.train_belief.clone().unwrap_or_default();
    let corpus_path = args
        .corpus
        .or(section.corpus)
        .ok_or_else(|| usage("--corpus"))?;
    let out = args.out.or(section.out).ok_or_else(|| usage("--out"))?;
    let corpus = read_corpus(&corpus_path)?;
    let encoding = corpus.manifest.encoding();

    let default_latent = if corpus.manifest.env.is_bandit() { 5 } else { 10 };
    let mut cfg = VaeConfig::new(
        encoding,
        args.latent_dim
            .or(section.latent_dim)
            .unwrap_or(default_latent),
    );
    // binary rewards take the bernoulli head; bandit rewards are gaussian
    cfg.obs_model = match args.obs_model.or(section.obs_model).as_deref() {
        Some("gaussian") => ObsModel::Gaussian,
        Some("bernoulli") => ObsModel::Bernoulli,
        Some(other) => {
            return Err(AppError::Core(Error::Config(format!(
                "unknown obs model: {other}"
            ))))
        }
        None if corpus.manifest.env.is_bandit() => ObsModel::Gaussian,
        None => ObsModel::Bernoulli,
    };
    if let Some(e) = args.epochs.or(section.epochs) {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size.or(section.batch_size) {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr.or(section.lr) {
        cfg.learning_rate = lr;
    }
    if let Some(beta) = args.beta.or(section.beta) {
        cfg.beta = beta;
    }
    cfg.recursive_prior = args.recursive_prior || section.recursive_prior.unwrap_or(false);

    let train_seed = args.seed.or(section.seed).or(fc.seed).unwrap_or(0);
    let (vae, log) = train_belief(&corpus, cfg.clone(), train_seed)?;
    vae.save(&out)?;
    if let Some(csv) = args.loss_csv.or(section.loss_csv) {
        write_loss_csv(&log, &csv)?;
    }
    manifest::write_sidecar(
        &out,
        "train-belief",
        serde_json::json!({
            "corpus": corpus_path.display().to_string(),
            "config": cfg,
            "seed": train_seed,
        }),
        &[("corpus", manifest::file_checksum(&corpus_path)?)],
    )?;
    println!(
        "trained belief model ({} epochs) -> {}",
        cfg.epochs,
        out.display()
    );
    Ok(())
}

fn cmd_train_policy(args: TrainPolicyArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.train_policy.clone().unwrap_or_default();
    let corpus_path = args
        .corpus
        .or(section.corpus)
        .ok_or_else(|| usage("--corpus"))?;
    let variant: Variant = args
        .variant
        .or(section.variant)
        .ok_or_else(|| usage("--variant"))?
        .parse()?;
    let out = args.out.or(section.out).ok_or_else(|| usage("--out"))?;
    let vae_path = args.vae.or(section.vae);
    if variant == Variant::Ht && vae_path.is_none() {
        return Err(AppError::Core(Error::Config(
            "--variant ht requires --vae".into(),
        )));
    }
    let vae = vae_path.as_deref().map(Vae::load).transpose()?;

    let corpus = read_corpus(&corpus_path)?;
    let encoding = corpus.manifest.encoding();
    let default_capacity = corpus.manifest.context_size;
    let mut cfg = PolicyConfig::new(
        encoding,
        variant,
        args.context_capacity
            .or(section.context_capacity)
            .unwrap_or(default_capacity),
    );
    if let Some(e) = args.embed_dim.or(section.embed_dim) {
        cfg.embed_dim = e;
    }
    if let Some(l) = args.layers.or(section.layers) {
        cfg.layers = l;
    }
    if let Some(h) = args.heads.or(section.heads) {
        cfg.heads = h;
    }
    if let Some(mode) = args.belief_mode.or(section.belief_mode).as_deref() {
        cfg.belief_mode = match mode {
            "global-token" => BeliefMode::GlobalToken,
            "prefix-injected" => BeliefMode::PrefixInjected,
            other => {
                return Err(AppError::Core(Error::Config(format!(
                    "unknown belief mode: {other}"
                ))))
            }
        };
    }
    if let Some(v) = &vae {
        cfg.belief_dim = match cfg.belief_mode {
            BeliefMode::GlobalToken => cfg.expected_belief_dim(v.config.latent_dim),
            BeliefMode::PrefixInjected => v.config.latent_dim,
        };
    }
    if let Some(l1) = args.lambda1.or(section.lambda1) {
        cfg.lambda1 = l1;
    }
    if let Some(l2) = args.lambda2.or(section.lambda2) {
        cfg.lambda2 = l2;
    }
    if let Some(lr) = args.lr.or(section.lr) {
        cfg.learning_rate = lr;
    }
    if let Some(wd) = args.weight_decay.or(section.weight_decay) {
        cfg.weight_decay = wd;
    }
    if let Some(e) = args.epochs.or(section.epochs) {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size.or(section.batch_size) {
        cfg.batch_size = b;
    }
    cfg.reward_obs = if corpus.manifest.env.is_bandit() {
        ObsModel::Gaussian
    } else {
        ObsModel::Bernoulli
    };

    let checkpoint_epochs = if args.checkpoint_epochs.is_empty() {
        section.checkpoint_epochs.unwrap_or_default()
    } else {
        args.checkpoint_epochs
    };
    let train_seed = args.seed.or(section.seed).or(fc.seed).unwrap_or(0);

    let (policy, log) =
        train_policy(&corpus, vae.as_ref(), cfg.clone(), train_seed, |epoch, p| {
            // sweep files are named by 1-based epoch
            let human = epoch + 1;
            if checkpoint_epochs.contains(&human) {
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
                let swept = out.with_file_name(format!("{stem}.epoch{human}.ckpt"));
                p.save(&swept)?;
                println!("checkpoint at epoch {human} -> {}", swept.display());
            }
            Ok(())
        })?;
    policy.save(&out)?;
    if let Some(csv) = args.loss_csv.or(section.loss_csv) {
        write_loss_csv(&log, &csv)?;
    }
    let mut checksums = vec![("corpus", manifest::file_checksum(&corpus_path)?)];
    if let Some(p) = &vae_path {
        checksums.push(("vae", manifest::file_checksum(p)?));
    }
    manifest::write_sidecar(
        &out,
        "train-policy",
        serde_json::json!({
            "corpus": corpus_path.display().to_string(),
            "vae": vae_path.as_ref().map(|p| p.display().to_string()),
            "config": cfg,
            "checkpoint_epochs": checkpoint_epochs,
            "seed": train_seed,
        }),
        &checksums,
    )?;
    println!("trained {variant} policy -> {}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.eval.clone().unwrap_or_default();
    let policy_path = args
        .policy
        .or(section.policy)
        .ok_or_else(|| usage("--policy"))?;
    let out = args.out.or(section.out).ok_or_else(|| usage("--out"))?;
    let policy = Policy::load(&policy_path)?;
    let vae_path = args.vae.or(section.vae);
    let vae = vae_path.as_deref().map(Vae::load).transpose()?;

    let episodes = args.episodes.or(section.episodes).unwrap_or(40);
    let trials = args.trials.or(section.trials).unwrap_or(20);
    let seeds = args.seeds.or(section.seeds).unwrap_or(10);
    let base_seed = args.seed.or(section.seed).or(fc.seed).unwrap_or(0);
    let slip = args.slip.or(section.slip).unwrap_or(0.0);
    let format: ReportFormat = args
        .format
        .or(section.format)
        .unwrap_or_else(|| "csv".to_string())
        .parse()?;

    let enc = policy.config.encoding;
    let (width, height) = (enc.width, enc.height);
    let horizon = args
        .horizon
        .or(section.horizon)
        .unwrap_or(if width >= 40 { 400 } else { 100 });
    let (_, test_goals) = goal_partition(width, height);
    let allow_train = args.allow_train_tasks || section.allow_train_tasks.unwrap_or(false);

    let method = policy.config.variant.to_string();
    let mut records = Vec::new();
    for s in 0..seeds {
        for t in 0..trials {
            let goal = test_goals[t % test_goals.len()];
            let task = icrl_core::env::DarkroomTask::new(width, height, goal, slip, horizon);
            let mut rng = seed::rng(base_seed, "eval-trial", s * 1_000_003 + t as u64);
            let returns = run_online_darkroom(
                &policy,
                vae.as_ref(),
                &task,
                episodes,
                &mut rng,
                allow_train,
            )?;
            for (ep, ret) in returns.iter().enumerate() {
                records.push(EvalRecord {
                    method: method.clone(),
                    seed: s,
                    trial: t as u32,
                    index: ep as u32 + 1,
                    value: *ret as f64,
                });
            }
        }
        eprintln!("eval seed {s}: done");
    }
    emit_report(&records, &out, format)?;
    let mut checksums = vec![("policy", manifest::file_checksum(&policy_path)?)];
    if let Some(p) = &vae_path {
        checksums.push(("vae", manifest::file_checksum(p)?));
    }
    manifest::write_sidecar(
        &out,
        "eval",
        serde_json::json!({
            "policy": policy_path.display().to_string(),
            "vae": vae_path.as_ref().map(|p| p.display().to_string()),
            "episodes": episodes, "trials": trials, "seeds": seeds,
            "horizon": horizon, "slip": slip, "seed": base_seed,
        }),
        &checksums,
    )?;
    println!("wrote {} records -> {}", records.len(), out.display());
    Ok(())
}

fn cmd_bandit(args: BanditArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.bandit.clone().unwrap_or_default();
    let algos = if args.algos.is_empty() {
        section
            .algos
            .unwrap_or_else(|| vec!["emp".into(), "ucb".into(), "ts".into()])
    } else {
        args.algos
    };
    let out = args.out.or(section.out).ok_or_else(|| usage("--out"))?;
    let steps = args.steps.or(section.steps).unwrap_or(500);
    let trials = args.trials.or(section.trials).unwrap_or(20);
    let seeds = args.seeds.or(section.seeds).unwrap_or(10);
    let ucb_c = args.ucb_c.or(section.ucb_c).unwrap_or(1.0);
    let base_seed = args.seed.or(section.seed).or(fc.seed).unwrap_or(0);
    let format: ReportFormat = args
        .format
        .or(section.format)
        .unwrap_or_else(|| "csv".to_string())
        .parse()?;

    let ht = args
        .ht_policy
        .or(section.ht_policy)
        .as_deref()
        .map(Policy::load)
        .transpose()?;
    let ht_vae = args
        .ht_vae
        .or(section.ht_vae)
        .as_deref()
        .map(Vae::load)
        .transpose()?;
    let dpt = args
        .dpt_policy
        .or(section.dpt_policy)
        .as_deref()
        .map(Policy::load)
        .transpose()?;

    let spec = EnvSpec::for_family(TaskFamily::Bandit);
    let mut records = Vec::new();
    for algo in &algos {
        for s in 0..seeds {
            for t in 0..trials {
                let mut task_rng =
                    seed::rng(base_seed, "bandit-task", s * 1_000_003 + t as u64);
                let Task::Bandit(task) = spec.sample_task(Split::Test, &mut task_rng) else {
                    unreachable!()
                };
                let mut rng = seed::rng(base_seed, "bandit-run", s * 1_000_003 + t as u64);
                let mut agent: Box<dyn BanditAgent> = match algo.as_str() {
                    "emp" => Box::new(EmpAgent::new(task.k())),
                    "ucb" => Box::new(UcbAgent::new(task.k(), ucb_c)),
                    "ts" => Box::new(TsAgent::new(task.k())),
                    "ht" => {
                        let p = ht.as_ref().ok_or_else(|| {
                            AppError::Core(Error::Config(
                                "ht requested without --ht-policy".into(),
                            ))
                        })?;
                        Box::new(TransformerBanditAgent::new(
                            p,
                            ht_vae.as_ref(),
                            PredictMode::Sample,
                        )?)
                    }
                    "dpt" => {
                        let p = dpt.as_ref().ok_or_else(|| {
                            AppError::Core(Error::Config(
                                "dpt requested without --dpt-policy".into(),
                            ))
                        })?;
                        Box::new(TransformerBanditAgent::new(p, None, PredictMode::Sample)?)
                    }
                    other => {
                        return Err(AppError::Core(Error::Config(format!(
                            "unknown bandit algorithm: {other}"
                        ))))
                    }
                };
                let curve = run_online_bandit(agent.as_mut(), &task, steps, &mut rng)?;
                for (i, regret) in curve.iter().enumerate() {
                    records.push(EvalRecord {
                        method: algo.clone(),
                        seed: s,
                        trial: t as u32,
                        index: i as u32 + 1,
                        value: *regret,
                    });
                }
            }
        }
        eprintln!("bandit {algo}: done");
    }
    emit_report(&records, &out, format)?;
    manifest::write_sidecar(
        &out,
        "bandit",
        serde_json::json!({
            "algos": algos, "steps": steps, "trials": trials, "seeds": seeds,
            "ucb_c": ucb_c, "seed": base_seed,
        }),
        &[],
    )?;
    println!("wrote {} records -> {}", records.len(), out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs, fc: &FileConfig) -> Result<(), AppError> {
    let section = fc.report.clone().unwrap_or_default();
    let input = args.input.or(section.input).ok_or_else(|| usage("--in"))?;
    let out = args
        .out
        .or(section.out)
        .unwrap_or_else(|| input.with_extension("agg.csv"));
    let records = read_report_csv(&input)?;
    let rows = aggregate(&records)?;
    emit_aggregate_csv(&rows, &out)?;
    println!(
        "aggregated {} records into {} series rows -> {}",
        records.len(),
        rows.len(),
        out.display()
    );
    Ok(())
}
