use crate::datagen::{Corpus, PoolScope};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::trainer::{run_stage, Stage, StageInit, TrainConfig};

use super::eval::{evaluate, EvalMeta, EvalReport, KSettings};

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub lambda: f64,
    pub encoder: Encoder,
    pub report: EvalReport,
}

/// Stage-2 training from the same start for every λ, each followed by an
/// evaluation tagged with that run's config hash.
pub fn lambda_sweep(
    corpus: &Corpus,
    base: &TrainConfig,
    start: &Encoder,
    lambdas: &[f64],
    scopes: &[PoolScope],
    ks: &KSettings,
) -> Result<Vec<SweepPoint>> {
    if base.stage != Stage::InstructionTune {
        return Err(Error::config("the λ sweep runs stage 2"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.temperature.lambda = lambda;
            let report = run_stage(corpus, &cfg, StageInit::Resume(start))?;
            let hash = cfg.config_hash(report.encoder.config());
            let eval = evaluate(
                &report.encoder,
                corpus,
                scopes,
                ks,
                EvalMeta {
                    checkpoint: format!("lambda-{lambda}"),
                    config_hash: hash,
                },
            )?;
            Ok(SweepPoint {
                lambda,
                encoder: report.encoder,
                report: eval,
            })
        })
        .collect()
}
