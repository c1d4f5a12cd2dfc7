mod settings;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retlab::datagen::{generate_corpus, Corpus, CorpusSpec, PoolScope};
use retlab::encoder::{estimate_flops, layer_ratio, prune, EncoderConfig};
use retlab::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use retlab::losses::{AlphaMode, AlphaSchedule, DistillVariant, MacMode, TemperatureSchedule};
use retlab::modality::TaskType;
use retlab::retrieval::{
    build_index, dataset_code, embed_normalized, evaluate_with_index, lambda_sweep, load_index,
    modality_separation, save_index, search_topk, write_pca_csv, EvalMeta, KSettings, ScopeFilter,
};
use retlab::trainer::{
    load_checkpoint, run_stage, save_checkpoint, short_hash, write_loss_curve, AdamConfig, Stage,
    StageInit, TrainConfig,
};

use settings::Settings;

#[derive(Parser)]
#[command(name = "retlab", version, about = "Layer-pruned multimodal retrieval toolkit")]
struct Cli {
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Keep the first k blocks of a checkpoint.
    Prune(PruneArgs),
    /// Write normalized query embeddings as CSV.
    Embed(EmbedArgs),
    /// Build and save the candidate index.
    Index(IndexArgs),
    /// Retrieve candidates for one query.
    Search(SearchArgs),
    /// Recall@k report over the test queries.
    Eval(EvalArgs),
    /// Analytic forward FLOPs of a pruned encoder.
    Flops(FlopsArgs),
    /// Compare backward against finite differences for every loss.
    GradCheck(GradCheckArgs),
    /// Stage-2 training and evaluation for several decay rates.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated task codes, e.g. `t2t,t2i`.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<TaskType>,
}

#[derive(Args, Clone)]
struct TrainingFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    alpha_mode: Option<AlphaMode>,
    #[arg(long)]
    distill_variant: Option<DistillVariant>,
    #[arg(long)]
    distill_tau: Option<f64>,
    #[arg(long)]
    mac_mode: Option<MacMode>,
    #[arg(long)]
    shards: Option<usize>,
    /// Per-shard batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run shards one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Teacher (stage 1) or starting student (stage 2).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a two-component PCA projection of the index.
    #[arg(long)]
    pca: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Test query id.
    #[arg(long)]
    query: u32,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "local")]
    scope: PoolScope,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Prebuilt index; built on the fly when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long = "scope", default_values_t = vec![PoolScope::Local])]
    scopes: Vec<PoolScope>,
    #[arg(long = "k", default_values_t = vec![5])]
    ks: Vec<usize>,
    /// Per-dataset cutoff override, `TAG=K`.
    #[arg(long = "k-for", value_parser = parse_k_override)]
    k_for: Vec<(String, usize)>,
    /// Report CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seq: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Stage-1 student every run starts from.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5, 0.7])]
    lambdas: Vec<f64>,
    #[arg(long = "scope", default_values_t = vec![PoolScope::Local])]
    scopes: Vec<PoolScope>,
    #[arg(long = "k", default_values_t = vec![5])]
    ks: Vec<usize>,
    #[command(flatten)]
    training: TrainingFlags,
}

fn parse_k_override(s: &str) -> std::result::Result<(String, usize), String> {
    let (tag, k) = s.split_once('=').ok_or("expected TAG=K")?;
    let k = k.parse().map_err(|e| format!("bad k: {e}"))?;
    Ok((tag.to_string(), k))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&settings, a)?,
        Command::Train(a) => train(&settings, a)?,
        Command::Prune(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let pruned = prune(&ckpt.encoder, a.k)?;
            save_checkpoint(&a.out, &pruned, None)?;
            println!(
                "pruned {} -> {} blocks, {} parameters",
                ckpt.encoder.config().n_layers,
                a.k,
                pruned.param_count()
            );
        }
        Command::Embed(a) => embed(a)?,
        Command::Index(a) => index(a)?,
        Command::Search(a) => search(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Flops(a) => flops(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::Sweep(a) => sweep(&settings, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(s: &Settings, a: GenDataArgs) -> Result<()> {
    let d = CorpusSpec::default();
    let spec = CorpusSpec {
        n_concepts: s.pick(a.concepts, "concepts", d.n_concepts)?,
        noise: s.pick(a.noise, "noise", d.noise)?,
        distractors: s.pick(a.distractors, "distractors", d.distractors)?,
        test_fraction: s.pick(a.test_fraction, "test_fraction", d.test_fraction)?,
        seed: s.pick(a.seed, "seed", d.seed)?,
        tasks: if a.tasks.is_empty() { d.tasks } else { a.tasks },
        ..d
    };
    let corpus = generate_corpus(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    corpus.save(&a.out)?;
    println!(
        "wrote {} train queries, {} test queries, {} candidates to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.candidates.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(s: &Settings, f: &TrainingFlags, stage: Stage) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let temperature = TemperatureSchedule {
        tau0: s.pick(f.tau0, "tau0", d.temperature.tau0)?,
        lambda: s.pick(f.lambda, "lambda", d.temperature.lambda)?,
        mode: s.pick(f.mac_mode, "mac_mode", d.temperature.mode)?,
    };
    Ok(TrainConfig {
        stage,
        shards: s.pick(f.shards, "shards", d.shards)?,
        per_shard_batch: s.pick(f.batch, "batch", d.per_shard_batch)?,
        epochs: s.pick(f.epochs, "epochs", d.epochs)?,
        adam: AdamConfig {
            lr: s.pick(f.lr, "lr", d.adam.lr)?,
            ..d.adam
        },
        seed: s.pick(f.seed, "seed", d.seed)?,
        temperature,
        alpha: AlphaSchedule::for_mode(s.pick(f.alpha_mode, "alpha_mode", d.alpha.mode)?),
        distill: s.pick(f.distill_variant, "distill_variant", d.distill)?,
        distill_tau: s.pick(f.distill_tau, "distill_tau", d.distill_tau)?,
        k: s.pick(f.k, "k", 3)?,
        parallel: !f.sequential,
    })
}

fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    let stage = Stage::from_index(s.pick(a.stage, "stage", 0)?)?;
    let corpus = Corpus::load(&a.corpus)?;
    let cfg = train_config(s, &a.training, stage)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let model = EncoderConfig {
        vocab_size: corpus.spec.vocab_size(),
        d_model: s.pick(a.d_model, "d_model", 16)?,
        n_heads: s.pick(a.heads, "heads", 2)?,
        n_layers: s.pick(a.layers, "layers", 8)?,
        max_seq: s.pick(a.max_seq, "max_seq", 32)?,
        k: 1,
    };
    let start = match (stage, &init) {
        (Stage::TeacherBootstrap, None) => StageInit::Fresh(model),
        (Stage::TeacherBootstrap, Some(_)) => bail!("stage 0 trains from scratch; drop --init"),
        (Stage::Pretrain, Some(c)) => StageInit::Teacher(&c.encoder),
        (Stage::InstructionTune, Some(c)) => StageInit::Resume(&c.encoder),
        (_, None) => bail!("stage {} needs --init", stage.index()),
    };
    let report = run_stage(&corpus, &cfg, start)?;
    save_checkpoint(&a.out, &report.encoder, Some(&report.optimizer))?;
    if let Some(path) = &a.curve {
        write_loss_curve(path, &report.curve)?;
    }
    for e in &report.curve {
        println!(
            "epoch {} contrastive {:.6} distill {:.6} total {:.6} tau_hard {}",
            e.epoch, e.contrastive, e.distill, e.total, e.tau_hard
        );
    }
    println!(
        "stage {} done: {} steps, config hash {}, checkpoint {}",
        stage.index(),
        report.steps,
        cfg.config_hash(report.encoder.config()),
        a.out.display()
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let enc = load_checkpoint(&a.checkpoint)?.encoder;
    let corpus = Corpus::load(&a.corpus)?;
    let c = *enc.config();
    let mut out = String::from("id");
    for j in 0..c.d_model {
        write!(out, ",e{j}")?;
    }
    out.push('\n');
    for q in &corpus.test {
        let v = embed_normalized(&enc, &q.prompt(c.max_seq)?, c.k)?;
        write!(out, "{}", q.id)?;
        for x in v {
            write!(out, ",{x}")?;
        }
        out.push('\n');
    }
    std::fs::write(&a.out, out)?;
    println!("embedded {} queries at depth {}", corpus.test.len(), c.k);
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let enc = load_checkpoint(&a.checkpoint)?.encoder;
    let corpus = Corpus::load(&a.corpus)?;
    let idx = build_index(&enc, &corpus.candidates, enc.config().k)?;
    save_index(&a.out, &idx)?;
    println!("indexed {} candidates, dim {}", idx.len(), idx.dim());
    if let Ok(sep) = modality_separation(&idx) {
        println!(
            "modality separation: intra {:.4} inter {:.4} gap {:.4}",
            sep.intra, sep.inter, sep.gap
        );
    }
    if let Some(path) = &a.pca {
        write_pca_csv(path, &idx)?;
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let enc = load_checkpoint(&a.checkpoint)?.encoder;
    let corpus = Corpus::load(&a.corpus)?;
    let idx = load_index(&a.index)?;
    let q = corpus
        .test
        .iter()
        .find(|q| q.id == a.query)
        .with_context(|| format!("no test query with id {}", a.query))?;
    let v = embed_normalized(&enc, &q.prompt(enc.config().max_seq)?, enc.config().k)?;
    let filter = match a.scope {
        PoolScope::Local => ScopeFilter::Dataset(dataset_code(&q.dataset)?),
        PoolScope::Global => ScopeFilter::All,
    };
    println!("rank,id,score,gold");
    for (rank, (id, score)) in search_topk(&idx, &v, a.k, filter)?.into_iter().enumerate() {
        println!("{},{id},{score:.6},{}", rank + 1, id == q.gold);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let enc = retlab::trainer::decode_checkpoint(&bytes)?.encoder;
    let corpus = Corpus::load(&a.corpus)?;
    let idx = match &a.index {
        Some(p) => load_index(p)?,
        None => build_index(&enc, &corpus.candidates, enc.config().k)?,
    };
    let ks = KSettings {
        default: a.ks,
        per_dataset: a.k_for.into_iter().map(|(t, k)| (t, vec![k])).collect(),
    };
    let meta = EvalMeta {
        checkpoint: file_label(&a.checkpoint),
        config_hash: short_hash(&bytes),
    };
    let report = evaluate_with_index(&enc, &idx, &corpus, &a.scopes, &ks, meta)?;
    match &a.out {
        Some(p) => {
            report.write_csv(p)?;
            println!("wrote {} rows to {}", report.rows.len(), p.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let config = EncoderConfig {
        vocab_size: 1,
        d_model: a.d_model,
        n_heads: 1,
        n_layers: a.layers,
        max_seq: a.seq,
        k: a.layers.max(1),
    };
    let pruned = estimate_flops(&config, a.k, a.seq)?;
    let full = estimate_flops(&config, a.layers, a.seq)?;
    println!("flops k={}: {} (layers {}, embedding {})", a.k, pruned.total, pruned.layers, pruned.embedding);
    println!("flops L={}: {}", a.layers, full.total);
    println!("layer ratio k/L: {:.4}", layer_ratio(&config, a.k, a.seq)?);
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let cases = run_gradient_suite(&seeds)?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{status} {} seed {} max rel err {:.3e}", c.name, c.seed, c.max_rel_error);
    }
    println!("{} cases, {failed} above {GRAD_TOLERANCE:e}", cases.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn sweep(s: &Settings, a: SweepArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let start = load_checkpoint(&a.init)?.encoder;
    let cfg = train_config(s, &a.training, Stage::InstructionTune)?;
    let ks = KSettings::uniform(a.ks);
    std::fs::create_dir_all(&a.out_dir)?;
    for point in lambda_sweep(&corpus, &cfg, &start, &a.lambdas, &a.scopes, &ks)? {
        let stem = format!("lambda-{}", point.lambda);
        save_checkpoint(&a.out_dir.join(format!("{stem}.ckpt")), &point.encoder, None)?;
        point.report.write_csv(&a.out_dir.join(format!("{stem}.csv")))?;
        let mean = point.report.mean_recall(a.scopes[0], ks.default[0]).unwrap_or(f64::NAN);
        println!(
            "lambda {} config hash {} mean recall@{} {:.4}",
            point.lambda, point.report.config_hash, ks.default[0], mean
        );
    }
    Ok(())
}
