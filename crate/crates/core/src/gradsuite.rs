//! Backward-versus-finite-difference checks over every loss and an
//! end-to-end encoder, shared by the `grad-check` command and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{assemble_prompt, Encoder, EncoderConfig, Side};
use crate::error::Result;
use crate::losses::{
    cosine_similarity_on, infonce_on, mac_loss_on, pretraining_loss_on, self_distill_on,
    DistillInputs, DistillVariant, MacMode, ModalityTags,
};
use crate::modality::{Modality, TaskType};
use crate::numeric::{finite_diff_grad, max_relative_error, Graph, Tensor, Var, DEFAULT_STEP};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Compares the gradient of `f` with respect to each input against central
/// differences and returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            x,
            DEFAULT_STEP,
        )?;
        let analytic = grads.get(vars[i]).expect("tracked input");
        worst = worst.max(max_relative_error(analytic, &numeric)?);
    }
    Ok(worst)
}

const TAU: f64 = 0.05;
const TAU_HARD: f64 = 0.041;

fn loss_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (4, 3);
    let q = randn(&mut rng, n, d);
    let c = randn(&mut rng, n, d);
    let tq = randn(&mut rng, n, d);
    let tc = randn(&mut rng, n, d);
    let tags = ModalityTags(
        (0..n)
            .map(|_| Modality::ALL[rng.random_range(0..Modality::ALL.len())])
            .collect(),
    );
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(GradCase {
            name: name.to_string(),
            seed,
            max_rel_error: err,
        })
    };

    push(
        "infonce",
        check_inputs(&[q.clone(), c.clone()], |g, v| {
            let s = cosine_similarity_on(g, v[0], v[1])?;
            infonce_on(g, s, TAU)
        })?,
    );
    for (name, mode) in [("mac_loss/mac", MacMode::Mac), ("mac_loss/reverse", MacMode::Reverse), ("mac_loss/off", MacMode::Off)] {
        push(
            name,
            check_inputs(&[q.clone(), c.clone()], |g, v| {
                let s = cosine_similarity_on(g, v[0], v[1])?;
                mac_loss_on(g, s, &tags, TAU_HARD, TAU, mode)
            })?,
        );
    }
    for (name, variant) in [
        ("self_distill/mse", DistillVariant::Mse),
        ("self_distill/mse-normalized", DistillVariant::MseNormalized),
        ("self_distill/cosine", DistillVariant::Cosine),
        ("self_distill/kl", DistillVariant::Kl),
    ] {
        push(
            name,
            check_inputs(&[tq.clone(), q.clone(), tc.clone(), c.clone()], |g, v| {
                let inputs = DistillInputs {
                    teacher_query: v[0],
                    student_query: v[1],
                    teacher_candidate: v[2],
                    student_candidate: v[3],
                };
                self_distill_on(g, inputs, variant, 0.5)
            })?,
        );
    }
    push(
        "pretraining_loss",
        check_inputs(&[tq, q, tc, c], |g, v| {
            let s = cosine_similarity_on(g, v[1], v[3])?;
            let lc = infonce_on(g, s, TAU)?;
            let inputs = DistillInputs {
                teacher_query: v[0],
                student_query: v[1],
                teacher_candidate: v[2],
                student_candidate: v[3],
            };
            let ld = self_distill_on(g, inputs, DistillVariant::Mse, 1.0)?;
            pretraining_loss_on(g, lc, ld, (0.9, 0.1))
        })?,
    );
    Ok(out)
}

/// Configuration of the end-to-end encoder check.
pub fn grad_check_encoder_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 68,
        d_model: 4,
        n_heads: 2,
        n_layers: 2,
        max_seq: 10,
        k: 2,
    }
}

/// InfoNCE over the [RET] states of random query/candidate prompts,
/// differentiated with respect to every encoder weight.
fn encoder_case(seed: u64) -> Result<GradCase> {
    let config = grad_check_encoder_config();
    let base = Encoder::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut prompts = Vec::new();
    for _ in 0..3 {
        let q: Vec<u32> = (0..3).map(|_| rng.random_range(64..68)).collect();
        let c: Vec<u32> = (0..2).map(|_| rng.random_range(64..68)).collect();
        prompts.push((
            assemble_prompt(&q, Modality::Text, Side::Query(TaskType::TextToText), config.max_seq)?,
            assemble_prompt(&c, Modality::Text, Side::Candidate, config.max_seq)?,
        ));
    }
    let params: Vec<Tensor> = base.params().into_iter().cloned().collect();
    let err = check_inputs(&params, |g, vars| {
        let enc = Encoder::from_params(config, vars.iter().map(|v| g.value(*v).clone()).collect())?;
        let ev = enc.bind(vars)?;
        let mut qs = Vec::new();
        let mut cs = Vec::new();
        for (q, c) in &prompts {
            let h = enc.forward_on(g, &ev, q, config.k)?;
            qs.push(g.slice_rows(h, q.ret_position(), 1)?);
            let h = enc.forward_on(g, &ev, c, config.k)?;
            cs.push(g.slice_rows(h, c.ret_position(), 1)?);
        }
        let qm = g.concat_rows(&qs)?;
        let cm = g.concat_rows(&cs)?;
        let s = cosine_similarity_on(g, qm, cm)?;
        infonce_on(g, s, 0.5)
    })?;
    Ok(GradCase {
        name: "encoder/2-layer d4".to_string(),
        seed,
        max_rel_error: err,
    })
}

/// Every case for every seed.
pub fn run_gradient_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(loss_cases(seed)?);
        out.push(encoder_case(seed)?);
    }
    Ok(out)
}
