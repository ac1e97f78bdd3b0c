//! `hglmrec` command-line interface: dataset prep, training, evaluation,
//! recommendation, ablation sweeps, gradient checks and cost reports.
//!
//! Every command resolves its configuration (defaults overridden by
//! flags), writes the resolved `config.json` next to its artifacts, and
//! exits nonzero with a typed error message on failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hglmrec_core::config::{ModelConfig, RunConfig};
use hglmrec_core::data::{
    build_candidate_sets, chronological_split, filter_min_interactions, parse_interactions,
    Behaviour, Dataset, ParseMode, Split, SplitSpec,
};
use hglmrec_core::harness::{ablation_run, Variant, ALL_VARIANTS};
use hglmrec_core::hypergraph::incidence_stats;
use hglmrec_core::moa::{AgentSpec, MoaRunner};
use hglmrec_core::pipeline::{build_graph, ego_for_user, Model};
use hglmrec_core::tape::Tape;
use hglmrec_core::train::{grad_check, train, TrainIndex};
use hglmrec_core::{checkpoint, cost, eval, moa};

#[derive(Parser)]
#[command(name = "hglmrec", about = "Hypergraph + mixture-of-agents recommender", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// One flag set shared by all commands; each command validates the
/// subset it needs. Flag names are part of the external contract.
#[derive(Args, Clone)]
struct Opts {
    /// Input file: interaction log (most commands) or cost log (`cost`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hyperedge time window in seconds (0 = no windowing)
    #[arg(long)]
    window: Option<i64>,
    /// Embedding dimension d
    #[arg(long)]
    dim: Option<usize>,
    /// Agents per MoA layer, comma separated (e.g. 3,3,1)
    #[arg(long)]
    layers: Option<String>,
    /// Agent roster JSON file; omitted = all-mock roster from the seed
    #[arg(long)]
    agents: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warm-up steps
    #[arg(long)]
    warmup: Option<usize>,
    /// L2 / weight-decay coefficient
    #[arg(long)]
    lambda: Option<f64>,
    /// Negatives per positive (training) / per instance (evaluation)
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "prompt-template")]
    prompt_template: Option<String>,
    /// Price table (TOML, one [[endpoint]] block per priced endpoint)
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ablation variants, comma separated
    #[arg(long)]
    variants: Option<String>,
    /// Recommendation list length
    #[arg(long)]
    k: Option<usize>,
    /// User id for recommend
    #[arg(long)]
    user: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split an interaction log
    Prep(Opts),
    /// Train a model and write a checkpoint
    Train(Opts),
    /// Evaluate a checkpoint on the held-out split
    Eval(Opts),
    /// Top-k recommendations for one user
    Recommend(Opts),
    /// Train and evaluate ablation variants
    Ablate(Opts),
    /// Finite-difference gradient verification
    Gradcheck(Opts),
    /// Price a cost log
    Cost(Opts),
}

type DynError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prep(o) => cmd_prep(&o),
        Command::Train(o) => cmd_train(&o),
        Command::Eval(o) => cmd_eval(&o),
        Command::Recommend(o) => cmd_recommend(&o),
        Command::Ablate(o) => cmd_ablate(&o),
        Command::Gradcheck(o) => cmd_gradcheck(&o),
        Command::Cost(o) => cmd_cost(&o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Resolve the run configuration: defaults overridden by flags.
fn resolve(opts: &Opts) -> Result<RunConfig, DynError> {
    let mut rc = RunConfig::default();
    rc.data = opts.data.as_ref().map(|p| p.display().to_string());
    if let Some(w) = opts.window {
        rc.model.window_seconds = w;
    }
    if let Some(d) = opts.dim {
        if d == 0 {
            return Err("--dim must be >= 1".into());
        }
        rc.model.d = d;
    }
    if let Some(layers) = &opts.layers {
        let parsed: Result<Vec<usize>, _> =
            layers.split(',').map(|s| s.trim().parse::<usize>()).collect();
        let parsed = parsed.map_err(|_| format!("--layers: cannot parse \"{layers}\""))?;
        if parsed.iter().any(|&n| n == 0) {
            return Err("--layers: every layer needs at least one agent".into());
        }
        rc.model.moa_layers = parsed;
    }
    if let Some(t) = &opts.prompt_template {
        rc.model.prompt_template = t.clone();
    }
    if let Some(e) = opts.epochs {
        rc.train.epochs = e;
    }
    if let Some(lr) = opts.lr {
        rc.train.learning_rate = lr;
    }
    if let Some(w) = opts.warmup {
        rc.train.warmup_steps = w;
    }
    if let Some(l) = opts.lambda {
        rc.train.weight_decay = l;
    }
    if let Some(n) = opts.negatives {
        rc.train.negatives_per_positive = n;
        rc.split.n_negatives = n;
    }
    if let Some(s) = opts.seed {
        rc.seed = s;
        rc.train.seed = s;
        rc.split.seed = s;
    }
    rc.agents = opts.agents.as_ref().map(|p| p.display().to_string());
    rc.prices = opts.prices.as_ref().map(|p| p.display().to_string());
    rc.out = opts.out.as_ref().map(|p| p.display().to_string());
    rc.checkpoint = opts.checkpoint.as_ref().map(|p| p.display().to_string());
    Ok(rc)
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, DynError> {
    value.as_ref().ok_or_else(|| format!("missing required flag {flag}").into())
}

fn out_dir(opts: &Opts) -> Result<&PathBuf, DynError> {
    let dir = require(&opts.out, "--out")?;
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn write_config(dir: &Path, rc: &RunConfig) -> Result<(), DynError> {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(rc)?)?;
    Ok(())
}

/// Load, parse (strict) and 5-core filter the interaction log.
fn load_dataset(rc: &RunConfig) -> Result<Dataset, DynError> {
    let path = rc.data.as_ref().ok_or("missing required flag --data")?;
    let file = fs::File::open(path).map_err(|e| format!("--data {path}: {e}"))?;
    let (records, _) = parse_interactions(BufReader::new(file), ',', false, ParseMode::Strict)?;
    let ds = Dataset::from_records(records);
    let (filtered, _) = filter_min_interactions(&ds, rc.min_interactions)?;
    Ok(filtered)
}

fn split_with_candidates(ds: &Dataset, spec: &SplitSpec) -> Result<Split, DynError> {
    let mut split = chronological_split(ds, spec)?;
    split.validation = build_candidate_sets(&split.validation, ds, spec, 0)?;
    split.test = build_candidate_sets(&split.test, ds, spec, 1)?;
    Ok(split)
}

/// Build the agent runner: roster file if given, else all-mock from seed.
fn build_runner(rc: &RunConfig, model: &ModelConfig) -> Result<MoaRunner, DynError> {
    match &rc.agents {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("--agents {path}: {e}"))?;
            let roster: Vec<AgentSpec> = serde_json::from_str(&text)
                .map_err(|e| format!("--agents {path}: {e}"))?;
            Ok(MoaRunner::new(model, roster)?)
        }
        None => Ok(MoaRunner::all_mock(model, rc.seed)),
    }
}

fn write_cost_log(dir: &Path, log: &[moa::CostRecord]) -> Result<(), DynError> {
    let f = fs::File::create(dir.join("cost_log.jsonl"))?;
    cost::write_cost_log(f, log)?;
    Ok(())
}

fn cmd_prep(opts: &Opts) -> Result<(), DynError> {
    let rc = resolve(opts)?;
    let dir = out_dir(opts)?;
    let ds = load_dataset(&rc)?;
    let split = split_with_candidates(&ds, &rc.split)?;
    let graph = build_graph(&ds, &rc.model);
    let stats = incidence_stats(&graph, ds.records.len());

    fs::write(dir.join("dataset.json"), serde_json::to_string(&ds)?)?;
    fs::write(dir.join("train.json"), serde_json::to_string(&split.train)?)?;
    for (name, instances) in [
        ("validation_instances.jsonl", &split.validation),
        ("test_instances.jsonl", &split.test),
    ] {
        let mut text = String::new();
        for inst in instances {
            text.push_str(&serde_json::to_string(inst)?);
            text.push('\n');
        }
        fs::write(dir.join(name), text)?;
    }
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    fs::write(
        dir.join("split_report.json"),
        serde_json::to_string_pretty(&split.report)?,
    )?;
    write_config(dir, &rc)?;
    println!(
        "prepared {} users, {} items, {} events, {} hyperedges; {} eval users",
        ds.n_users(),
        ds.n_items(),
        ds.records.len(),
        stats.n_hyperedges,
        split.report.evaluated_users
    );
    Ok(())
}

fn cmd_train(opts: &Opts) -> Result<(), DynError> {
    let rc = resolve(opts)?;
    let dir = out_dir(opts)?;
    let ds = load_dataset(&rc)?;
    let split = split_with_candidates(&ds, &rc.split)?;
    let graph = build_graph(&split.train, &rc.model);
    let mut model = Model::init(rc.model.clone(), ds.n_users(), ds.n_items(), rc.seed);
    let runner = build_runner(&rc, &rc.model)?;
    let mut cost_log = Vec::new();
    let log = train(
        &mut model,
        &split.train,
        &graph,
        &split.validation,
        &runner,
        &rc.train,
        &mut cost_log,
    )?;

    checkpoint::save(&model, &dir.join("checkpoint.hgrc"))?;
    let mut text = String::new();
    for entry in &log {
        text.push_str(&serde_json::to_string(entry)?);
        text.push('\n');
    }
    fs::write(dir.join("train_log.jsonl"), text)?;
    write_cost_log(dir, &cost_log)?;
    write_config(dir, &rc)?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs; final mean loss {:.6}, val HR@5 {:.4}, val NDCG@5 {:.4}",
            log.len(),
            last.mean_loss,
            last.val_hr5,
            last.val_ndcg5
        );
    } else {
        println!("trained 0 epochs; checkpoint equals initialisation");
    }
    Ok(())
}

fn load_checkpoint(opts: &Opts) -> Result<Model, DynError> {
    let path = require(&opts.checkpoint, "--checkpoint")?;
    Ok(checkpoint::load(path)?)
}

fn cmd_eval(opts: &Opts) -> Result<(), DynError> {
    let mut rc = resolve(opts)?;
    let dir = out_dir(opts)?;
    let model = load_checkpoint(opts)?;
    rc.model = model.config.clone();
    let ds = load_dataset(&rc)?;
    if ds.n_users() != model.n_users || ds.n_items() != model.n_items {
        return Err(format!(
            "checkpoint was trained on {} users / {} items but --data yields {} / {}",
            model.n_users,
            model.n_items,
            ds.n_users(),
            ds.n_items()
        )
        .into());
    }
    let split = split_with_candidates(&ds, &rc.split)?;
    let graph = build_graph(&split.train, &model.config);
    let runner = build_runner(&rc, &model.config)?;
    let mut cost_log = Vec::new();
    let report = eval::evaluate_instances(
        &model,
        &graph,
        &split.test,
        &runner,
        Behaviour::Buy,
        &mut cost_log,
    )?;
    fs::write(dir.join("eval_report.jsonl"), report.to_jsonl())?;
    write_cost_log(dir, &cost_log)?;
    write_config(dir, &rc)?;
    print!("{}", report.to_table("test"));
    Ok(())
}

fn cmd_recommend(opts: &Opts) -> Result<(), DynError> {
    let rc = resolve(opts)?;
    let model = load_checkpoint(opts)?;
    let user_id = require(&opts.user, "--user")?;
    let k = *opts.k.as_ref().unwrap_or(&model.config.prompt_k);
    if k == 0 {
        return Err("--k must be >= 1".into());
    }
    let ds = load_dataset(&rc)?;
    let user = ds.user_of(user_id)?;
    let graph = build_graph(&ds, &model.config);
    let runner = build_runner(&rc, &model.config)?;
    let touched = &hglmrec_core::data::interacted_items(&ds)[user];
    let candidates: Vec<usize> = (0..ds.n_items()).filter(|i| !touched.contains(i)).collect();
    if candidates.len() < k {
        return Err(format!(
            "user {user_id} has only {} unseen items, need {k}",
            candidates.len()
        )
        .into());
    }
    let ego = ego_for_user(&graph, user, &model.config)?;
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let mut cost_log = Vec::new();
    let fwd = hglmrec_core::pipeline::user_forward(
        &mut tape,
        &model,
        &bindings,
        &ego,
        &runner,
        &mut cost_log,
        false,
    )?;
    let probs = moa::score_items(
        &mut tape,
        fwd.moa_out,
        &candidates,
        Behaviour::Buy,
        &bindings,
        model.n_items,
    )?;
    let v = tape.value(probs);
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(row, &item)| (item, v[[row, 0]]))
        .collect();
    // descending score, ties by ascending item index
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (rank, (item, score)) in scored.iter().take(k).enumerate() {
        let id = ds.item_id_of(*item).unwrap_or("<unknown>");
        println!("{} {id} {score:.6}", rank + 1);
    }
    Ok(())
}

fn cmd_ablate(opts: &Opts) -> Result<(), DynError> {
    let rc = resolve(opts)?;
    let dir = out_dir(opts)?;
    let variants: Vec<Variant> = match &opts.variants {
        Some(list) => list
            .split(',')
            .map(|s| Variant::parse(s.trim()))
            .collect::<Result<_, _>>()?,
        None => ALL_VARIANTS.to_vec(),
    };
    let ds = load_dataset(&rc)?;
    let reports = ablation_run(&rc.model, &rc.train, &ds, &rc.split, &variants)?;
    for report in &reports {
        fs::write(
            dir.join(format!("ablation_{}.json", report.variant)),
            serde_json::to_string_pretty(report)?,
        )?;
        print!("{}", report.report.to_table(report.variant));
    }
    write_config(dir, &rc)?;
    Ok(())
}

fn cmd_gradcheck(opts: &Opts) -> Result<(), DynError> {
    let rc = resolve(opts)?;
    let ds = load_dataset(&rc)?;
    let model = Model::init(rc.model.clone(), ds.n_users(), ds.n_items(), rc.seed);
    let runner = build_runner(&rc, &rc.model)?;
    let graph = build_graph(&ds, &rc.model);
    let index = TrainIndex::build(&ds);
    let mut samples = Vec::new();
    for u in index.active_users().into_iter().take(2) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
            hglmrec_core::config::sub_seed(rc.seed, &format!("gradcheck.{u}")),
        );
        if let Some(s) = index.sample_user(
            &graph,
            u,
            rc.model.hops,
            rc.train.negatives_per_positive,
            &mut rng,
        )? {
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err("no usable training samples for gradient check".into());
    }
    let report = grad_check(
        &model,
        &samples,
        &runner,
        rc.train.weight_decay,
        1e-4,
        200,
        rc.seed,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.pass_rate < 0.99 {
        return Err(format!("gradient check failed: pass rate {:.4}", report.pass_rate).into());
    }
    Ok(())
}

fn cmd_cost(opts: &Opts) -> Result<(), DynError> {
    let data = require(&opts.data, "--data")?;
    let prices_path = require(&opts.prices, "--prices")?;
    let file = fs::File::open(data).map_err(|e| format!("--data {}: {e}", data.display()))?;
    let log = cost::read_cost_log(BufReader::new(file))?;
    let prices = cost::PriceTable::load(prices_path)?;
    let report = cost::cost_report(&log, &prices)?;
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cost_report.jsonl"), report.to_jsonl())?;
    }
    print!("{}", report.to_table());
    Ok(())
}
