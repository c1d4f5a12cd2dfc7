mod common;

use retlab::encoder::{prune, Encoder};
use retlab::losses::{
    cosine_similarity_on, infonce_on, mac_loss_on, pretraining_loss_on, self_distill_on,
    AlphaSchedule, DistillInputs, DistillVariant, MacMode, ModalityTags, TemperatureSchedule,
};
use retlab::numeric::{Graph, Tensor};
use retlab::trainer::{
    adam_update, compute_gradients, decode_checkpoint, encode_checkpoint, load_checkpoint,
    run_stage, save_checkpoint, train_step, training_pairs, AdamConfig, OptimizerState, PairSide,
    Stage, StageInit, TeacherCache, TrainConfig, TrainPair,
};
use retlab::Error;

use common::{small_corpus, small_model, text_corpus};

fn cfg(stage: Stage, shards: usize, per_shard: usize) -> TrainConfig {
    TrainConfig {
        stage,
        shards,
        per_shard_batch: per_shard,
        epochs: 1,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        seed: 7,
        k: 2,
        distill_tau: 0.5,
        ..TrainConfig::default()
    }
}

/// Single graph over the whole batch: forward, loss and backward with no
/// sharding at all.
fn reference_gradients(
    student: &Encoder,
    teacher: Option<&TeacherCache>,
    batch: &[&TrainPair],
    cfg: &TrainConfig,
    progress: f64,
) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars = student.register(&mut g, true);
    let depth = student.config().k;
    let (mut qs, mut cs) = (Vec::new(), Vec::new());
    for p in batch {
        let h = student.forward_on(&mut g, &vars, &p.query, depth).unwrap();
        qs.push(g.slice_rows(h, p.query.ret_position(), 1).unwrap());
        let h = student.forward_on(&mut g, &vars, &p.candidate, depth).unwrap();
        cs.push(g.slice_rows(h, p.candidate.ret_position(), 1).unwrap());
    }
    let q = g.concat_rows(&qs).unwrap();
    let c = g.concat_rows(&cs).unwrap();
    let s = cosine_similarity_on(&mut g, q, c).unwrap();
    let tau = cfg.temperature.tau0;
    let loss = match cfg.stage {
        Stage::TeacherBootstrap => infonce_on(&mut g, s, tau).unwrap(),
        Stage::Pretrain => {
            let t = teacher.unwrap();
            let rows = |side| {
                let r: Vec<Vec<f64>> = batch.iter().map(|p| t.get(p.sample_id, side).unwrap().to_vec()).collect();
                let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
                Tensor::from_rows(&refs).unwrap()
            };
            let tq = g.constant(rows(PairSide::Query));
            let tc = g.constant(rows(PairSide::Candidate));
            let lc = infonce_on(&mut g, s, tau).unwrap();
            let inputs = DistillInputs {
                teacher_query: tq,
                student_query: q,
                teacher_candidate: tc,
                student_candidate: c,
            };
            let ld = self_distill_on(&mut g, inputs, cfg.distill, cfg.distill_tau).unwrap();
            let a = retlab::losses::alpha_at(&cfg.alpha, progress).unwrap();
            pretraining_loss_on(&mut g, lc, ld, a).unwrap()
        }
        Stage::InstructionTune => {
            let th = retlab::losses::tau_hard_at(&cfg.temperature, progress).unwrap();
            let tags = ModalityTags(batch.iter().map(|p| p.target).collect());
            mac_loss_on(&mut g, s, &tags, th, tau, cfg.temperature.mode).unwrap()
        }
    };
    let grads = g.backward(loss).unwrap();
    vars.as_slice().iter().map(|v| grads.get(*v).unwrap().clone()).collect()
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y).unwrap()).fold(0.0, f64::max)
}

#[test]
fn shard_gradients_match_single_graph_reference() {
    let corpus = small_corpus(1);
    let model = small_model(&corpus, 2);
    let student = Encoder::init(model, 3).unwrap();
    let pairs = training_pairs(&corpus, Stage::InstructionTune, model.max_seq).unwrap();
    let stride = pairs.len() / 8;
    let batch: Vec<&TrainPair> = pairs.iter().step_by(stride).take(8).collect();
    assert!(batch.iter().any(|p| p.target != batch[0].target));
    for mode in [MacMode::Mac, MacMode::Reverse, MacMode::Off] {
        let mut c = cfg(Stage::InstructionTune, 1, 8);
        c.temperature.mode = mode;
        let reference = reference_gradients(&student, None, &batch, &c, 0.5);
        for w in [1, 2, 4] {
            let c = TrainConfig {
                shards: w,
                per_shard_batch: 8 / w,
                ..c.clone()
            };
            let got = compute_gradients(&student, None, &batch, &c, 0.5).unwrap();
            assert!(max_diff(&got.grads, &reference) < 1e-10, "W={w} {mode:?}");
        }
    }
}

#[test]
fn distillation_gradients_match_reference_for_every_variant() {
    let corpus = text_corpus(2);
    let teacher = Encoder::init(small_model(&corpus, 3), 5).unwrap();
    let student = prune(&teacher, 2).unwrap();
    let pairs = training_pairs(&corpus, Stage::Pretrain, 16).unwrap();
    let cache = TeacherCache::build(&teacher, &pairs).unwrap();
    let batch: Vec<&TrainPair> = pairs.iter().take(4).collect();
    for variant in [DistillVariant::Mse, DistillVariant::MseNormalized, DistillVariant::Cosine, DistillVariant::Kl] {
        let mut c = cfg(Stage::Pretrain, 1, 4);
        c.distill = variant;
        c.alpha = AlphaSchedule::dynamic();
        let reference = reference_gradients(&student, Some(&cache), &batch, &c, 0.25);
        for w in [1, 2, 4] {
            let c = TrainConfig {
                shards: w,
                per_shard_batch: 4 / w,
                ..c.clone()
            };
            let got = compute_gradients(&student, Some(&cache), &batch, &c, 0.25).unwrap();
            assert!(max_diff(&got.grads, &reference) < 1e-10, "W={w} {variant:?}");
        }
    }
}

#[test]
fn post_step_weights_agree_across_shard_counts() {
    let corpus = small_corpus(4);
    let model = small_model(&corpus, 2);
    let student = Encoder::init(model, 9).unwrap();
    let pairs = training_pairs(&corpus, Stage::InstructionTune, model.max_seq).unwrap();
    let batch: Vec<&TrainPair> = pairs.iter().take(8).collect();
    let opt = OptimizerState::new(AdamConfig::default(), &Encoder::param_shapes(&model)).unwrap();
    let step = |w: usize| {
        let c = cfg(Stage::InstructionTune, w, 8 / w);
        train_step(&student, None, &batch, &c, &opt, 0.0).unwrap().encoder
    };
    let one = step(1);
    for w in [2, 4] {
        let other = step(w);
        let a: Vec<Tensor> = one.params().into_iter().cloned().collect();
        let b: Vec<Tensor> = other.params().into_iter().cloned().collect();
        assert!(max_diff(&a, &b) < 1e-10);
    }
}

#[test]
fn sequential_and_parallel_shards_give_identical_checkpoints() {
    let corpus = small_corpus(5);
    let model = small_model(&corpus, 2);
    let start = Encoder::init(model, 1).unwrap();
    let mut c = cfg(Stage::InstructionTune, 4, 2);
    c.epochs = 2;
    let run = |parallel: bool| {
        let c = TrainConfig { parallel, ..c.clone() };
        let r = run_stage(&corpus, &c, StageInit::Resume(&start)).unwrap();
        encode_checkpoint(&r.encoder, Some(&r.optimizer)).unwrap()
    };
    assert_eq!(run(true), run(false));
    assert_eq!(run(true), run(true));
}

#[test]
fn adam_matches_scalar_oracle_over_ten_steps() {
    let target = [1.5, -0.25, 3.0];
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut params = Tensor::vector(vec![0.0, 1.0, -2.0]).unwrap();
    let mut state = OptimizerState::new(cfg, &[vec![3]]).unwrap();
    let (mut x, mut m, mut v) = ([0.0, 1.0, -2.0], [0.0; 3], [0.0; 3]);
    for t in 1..=10 {
        let grad: Vec<f64> = params.data().iter().zip(target).map(|(p, q)| 2.0 * (p - q)).collect();
        let (next, s) = adam_update(&[&params], &[Tensor::vector(grad).unwrap()], &state).unwrap();
        params = next[0].clone();
        state = s;
        for i in 0..3 {
            let g = 2.0 * (x[i] - target[i]);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            x[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
    }
    assert_eq!(state.step, 10);
    for i in 0..3 {
        assert!((params.data()[i] - x[i]).abs() < 1e-12);
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let corpus = text_corpus(6);
    let model = small_model(&corpus, 2);
    let c = TrainConfig {
        epochs: 0,
        ..cfg(Stage::TeacherBootstrap, 1, 4)
    };
    let r = run_stage(&corpus, &c, StageInit::Fresh(model)).unwrap();
    assert_eq!(r.encoder, Encoder::init(model, c.seed).unwrap());
    assert!(r.curve.is_empty());
}

#[test]
fn full_pipeline_is_deterministic_and_respects_stage_contracts() {
    let corpus = small_corpus(8);
    let model = small_model(&corpus, 3);
    let c0 = TrainConfig {
        epochs: 2,
        ..cfg(Stage::TeacherBootstrap, 2, 4)
    };
    let t1 = run_stage(&corpus, &c0, StageInit::Fresh(model)).unwrap();
    let t2 = run_stage(&corpus, &c0, StageInit::Fresh(model)).unwrap();
    assert_eq!(
        encode_checkpoint(&t1.encoder, Some(&t1.optimizer)).unwrap(),
        encode_checkpoint(&t2.encoder, Some(&t2.optimizer)).unwrap()
    );
    assert_eq!(t1.distill_evaluations, 0);

    let teacher = t1.encoder;
    let snapshot = encode_checkpoint(&teacher, None).unwrap();
    let c1 = TrainConfig {
        epochs: 2,
        ..cfg(Stage::Pretrain, 2, 4)
    };
    let s1 = run_stage(&corpus, &c1, StageInit::Teacher(&teacher)).unwrap();
    assert_eq!(encode_checkpoint(&teacher, None).unwrap(), snapshot);
    assert_eq!(s1.encoder.config().n_layers, 2);
    assert_eq!(s1.distill_evaluations, s1.steps);
    assert!(s1.curve.iter().all(|e| e.distill > 0.0 && e.alpha1 == 0.9));

    let c2 = TrainConfig {
        epochs: 2,
        ..cfg(Stage::InstructionTune, 2, 4)
    };
    let s2 = run_stage(&corpus, &c2, StageInit::Resume(&s1.encoder)).unwrap();
    assert!(s2.steps > 0);
    assert_eq!(s2.distill_evaluations, 0);
    assert_eq!(s2.curve[0].tau_hard, 0.05);
    assert_eq!(s2.curve[1].tau_hard, 0.045);
}

#[test]
fn stage_contract_violations_are_configuration_errors() {
    let corpus = small_corpus(9);
    let model = small_model(&corpus, 2);
    let enc = Encoder::init(model, 0).unwrap();
    let pairs = training_pairs(&corpus, Stage::Pretrain, 16).unwrap();
    let batch: Vec<&TrainPair> = pairs.iter().take(4).collect();
    let opt = OptimizerState::new(AdamConfig::default(), &Encoder::param_shapes(&model)).unwrap();
    let c1 = cfg(Stage::Pretrain, 1, 4);
    assert!(matches!(train_step(&enc, None, &batch, &c1, &opt, 0.0), Err(Error::Config(_))));
    let cache = TeacherCache::build(&enc, &pairs).unwrap();
    let c2 = cfg(Stage::InstructionTune, 1, 4);
    assert!(matches!(train_step(&enc, Some(&cache), &batch, &c2, &opt, 0.0), Err(Error::Config(_))));
    assert!(matches!(run_stage(&corpus, &c1, StageInit::Fresh(model)), Err(Error::Config(_))));
    let no_text = corpus.restricted_to(&[retlab::TaskType::TextToImage]).unwrap();
    let c0 = cfg(Stage::TeacherBootstrap, 1, 4);
    assert!(matches!(run_stage(&no_text, &c0, StageInit::Fresh(model)), Err(Error::Config(_))));
}

#[test]
fn equal_tags_without_decay_reproduce_an_infonce_step() {
    let corpus = text_corpus(10);
    let model = small_model(&corpus, 2);
    let enc = Encoder::init(model, 4).unwrap();
    let pairs = training_pairs(&corpus, Stage::InstructionTune, 16).unwrap();
    let batch: Vec<&TrainPair> = pairs.iter().take(6).collect();
    let opt = OptimizerState::new(AdamConfig::default(), &Encoder::param_shapes(&model)).unwrap();
    let mut mac = cfg(Stage::InstructionTune, 2, 3);
    mac.temperature = TemperatureSchedule {
        tau0: 0.05,
        lambda: 0.0,
        mode: MacMode::Mac,
    };
    let plain = TrainConfig {
        stage: Stage::TeacherBootstrap,
        ..mac.clone()
    };
    let a = train_step(&enc, None, &batch, &mac, &opt, 0.7).unwrap();
    let b = train_step(&enc, None, &batch, &plain, &opt, 0.7).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.losses.total, b.losses.total);
}

#[test]
fn checkpoint_files_round_trip_and_reject_damage() {
    let corpus = small_corpus(11);
    let model = small_model(&corpus, 2);
    let r = run_stage(&corpus, &cfg(Stage::InstructionTune, 1, 4), StageInit::Resume(&Encoder::init(model, 2).unwrap())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &r.encoder, Some(&r.optimizer)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.encoder, r.encoder);
    assert_eq!(back.optimizer.as_ref(), Some(&r.optimizer));
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Format { .. })));
}
