use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{Corpus, PoolScope};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::modality::TaskType;

use super::index::{build_index, dataset_code, embed_normalized, recall_at_k, search_topk, EmbeddingIndex, ScopeFilter};

/// Recall cutoffs: `default` for every dataset unless overridden by tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KSettings {
    pub default: Vec<usize>,
    pub per_dataset: BTreeMap<String, Vec<usize>>,
}

impl Default for KSettings {
    fn default() -> Self {
        Self::uniform(vec![5])
    }
}

impl KSettings {
    pub fn uniform(ks: Vec<usize>) -> Self {
        Self {
            default: ks,
            per_dataset: BTreeMap::new(),
        }
    }

    pub fn for_dataset(&self, tag: &str) -> &[usize] {
        self.per_dataset.get(tag).unwrap_or(&self.default)
    }

    fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.default).chain(self.per_dataset.values());
        for ks in all {
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::config("recall cutoffs must be a non-empty list of positive k"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub task: TaskType,
    pub dataset: String,
    pub scope: PoolScope,
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub checkpoint: String,
    pub corpus_seed: u64,
    pub config_hash: String,
}

pub const REPORT_HEADER: &str = "task,dataset,scope,k,recall,checkpoint,config_hash";

impl EvalReport {
    pub fn recall(&self, task: TaskType, scope: PoolScope, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.scope == scope && r.k == k)
            .map(|r| r.recall)
    }

    /// Unweighted mean over tasks for one scope and cutoff.
    pub fn mean_recall(&self, scope: PoolScope, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scope == scope && r.k == k)
            .map(|r| r.recall)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.task,
                r.dataset,
                r.scope.name(),
                r.k,
                r.recall,
                self.checkpoint,
                self.config_hash
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Run metadata copied into every report row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalMeta {
    pub checkpoint: String,
    pub config_hash: String,
}

pub fn evaluate(
    encoder: &Encoder,
    corpus: &Corpus,
    scopes: &[PoolScope],
    ks: &KSettings,
    meta: EvalMeta,
) -> Result<EvalReport> {
    check_vocab(encoder, corpus)?;
    let index = build_index(encoder, &corpus.candidates, encoder.config().k)?;
    evaluate_with_index(encoder, &index, corpus, scopes, ks, meta)
}

fn check_vocab(encoder: &Encoder, corpus: &Corpus) -> Result<()> {
    if corpus.spec.vocab_size() > encoder.config().vocab_size {
        return Err(Error::config(format!(
            "corpus emits {} token ids but the checkpoint vocabulary has {}",
            corpus.spec.vocab_size(),
            encoder.config().vocab_size
        )));
    }
    Ok(())
}

/// Scores every test query against a prebuilt candidate index.
pub fn evaluate_with_index(
    encoder: &Encoder,
    index: &EmbeddingIndex,
    corpus: &Corpus,
    scopes: &[PoolScope],
    ks: &KSettings,
    meta: EvalMeta,
) -> Result<EvalReport> {
    check_vocab(encoder, corpus)?;
    ks.validate()?;
    if index.dim() != encoder.config().d_model {
        return Err(Error::config(format!(
            "index width {} does not match checkpoint d_model {}",
            index.dim(),
            encoder.config().d_model
        )));
    }
    let mut scopes = scopes.to_vec();
    scopes.sort();
    scopes.dedup();
    if scopes.is_empty() {
        return Err(Error::config("evaluation needs at least one scope"));
    }
    let depth = encoder.config().k;
    let max_seq = encoder.config().max_seq;

    // (query id, per-scope ranked ids)
    let ranked = corpus
        .test
        .par_iter()
        .map(|q| {
            let v = embed_normalized(encoder, &q.prompt(max_seq)?, depth)?;
            let kmax = *ks.for_dataset(&q.dataset).iter().max().expect("validated");
            let local = ScopeFilter::Dataset(dataset_code(&q.dataset)?);
            let per_scope = scopes
                .iter()
                .map(|s| {
                    let filter = match s {
                        PoolScope::Local => local,
                        PoolScope::Global => ScopeFilter::All,
                    };
                    Ok(search_topk(index, &v, kmax, filter)?.into_iter().map(|r| r.0).collect())
                })
                .collect::<Result<Vec<Vec<u32>>>>()?;
            Ok((q.id, per_scope))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells: BTreeMap<(TaskType, String), Vec<usize>> = BTreeMap::new();
    for (i, q) in corpus.test.iter().enumerate() {
        cells.entry((q.task, q.dataset.clone())).or_default().push(i);
    }
    let mut rows = Vec::new();
    for ((task, dataset), members) in &cells {
        let gold: BTreeMap<u32, u32> = members.iter().map(|&i| (corpus.test[i].id, corpus.test[i].gold)).collect();
        for (si, scope) in scopes.iter().enumerate() {
            let results: BTreeMap<u32, Vec<u32>> = members
                .iter()
                .map(|&i| (ranked[i].0, ranked[i].1[si].clone()))
                .collect();
            let mut cut = ks.for_dataset(dataset).to_vec();
            cut.sort_unstable();
            cut.dedup();
            for k in cut {
                rows.push(EvalRow {
                    task: *task,
                    dataset: dataset.clone(),
                    scope: *scope,
                    k,
                    recall: recall_at_k(&results, &gold, k)?,
                });
            }
        }
    }
    Ok(EvalReport {
        rows,
        checkpoint: meta.checkpoint,
        corpus_seed: corpus.spec.seed,
        config_hash: meta.config_hash,
    })
}
