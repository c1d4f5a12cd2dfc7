use std::collections::HashSet;

use rayon::prelude::*;

use crate::datagen::Candidate;
use crate::encoder::{extract_ret_embedding, Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::NORMALIZE_EPS;
use crate::modality::{Modality, TaskType};

/// Dataset code stored in an index: the task index behind a dataset tag.
pub fn dataset_code(tag: &str) -> Result<u8> {
    let task: TaskType = tag.parse()?;
    Ok(task.index() as u8)
}

pub fn dataset_tag_of(code: u8) -> Result<String> {
    TaskType::ALL
        .get(code as usize)
        .map(|t| t.code().to_string())
        .ok_or_else(|| Error::Lookup(format!("unknown dataset code {code}")))
}

/// Flat index of unit-norm candidate embeddings stored at 32 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u32>,
    modalities: Vec<Modality>,
    datasets: Vec<u8>,
    dim: usize,
    vectors: Vec<f32>,
}

impl EmbeddingIndex {
    pub fn new(
        ids: Vec<u32>,
        modalities: Vec<Modality>,
        datasets: Vec<u8>,
        dim: usize,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        let n = ids.len();
        if modalities.len() != n || datasets.len() != n || vectors.len() != n * dim {
            return Err(Error::dim(
                "EmbeddingIndex",
                &[n, dim],
                &[modalities.len(), datasets.len(), vectors.len()],
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::contract(format!("duplicate index id {dup}")));
        }
        Ok(Self {
            ids,
            modalities,
            datasets,
            dim,
            vectors,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            modalities: Vec::new(),
            datasets: Vec::new(),
            dim,
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn datasets(&self) -> &[u8] {
        &self.datasets
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }
}

/// `v / max(‖v‖, eps)`, so an all-zero vector stays zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORMALIZE_EPS);
    v.iter().map(|x| x / norm).collect()
}

/// Normalized [RET] embedding at depth `k_layers`.
pub fn embed_normalized(encoder: &Encoder, tokens: &TokenSequence, k_layers: usize) -> Result<Vec<f64>> {
    let hidden = encoder.forward(tokens, k_layers)?;
    Ok(l2_normalize(&extract_ret_embedding(&hidden, tokens, k_layers)?.vector))
}

pub fn build_index(encoder: &Encoder, candidates: &[Candidate], k_layers: usize) -> Result<EmbeddingIndex> {
    let max_seq = encoder.config().max_seq;
    let rows = candidates
        .par_iter()
        .map(|c| {
            let tokens = c.prompt(max_seq)?;
            let v = embed_normalized(encoder, &tokens, k_layers)?;
            Ok((dataset_code(&c.dataset)?, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = encoder.config().d_model;
    let mut vectors = Vec::with_capacity(rows.len() * dim);
    let mut datasets = Vec::with_capacity(rows.len());
    for (code, v) in rows {
        datasets.push(code);
        vectors.extend(v.iter().map(|&x| x as f32));
    }
    EmbeddingIndex::new(
        candidates.iter().map(|c| c.id).collect(),
        candidates.iter().map(|c| c.modality).collect(),
        datasets,
        dim,
        vectors,
    )
}

/// Which index rows a search may return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeFilter {
    All,
    Dataset(u8),
}

impl ScopeFilter {
    fn admits(self, dataset: u8) -> bool {
        match self {
            ScopeFilter::All => true,
            ScopeFilter::Dataset(d) => d == dataset,
        }
    }
}

fn rank(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Cosine top-k: descending score, ties by ascending id.
pub fn search_topk(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    scope: ScopeFilter,
) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(Error::contract("search k must be at least 1"));
    }
    if query.len() != index.dim {
        return Err(Error::dim("search_topk", &[query.len()], &[index.dim]));
    }
    let mut scored: Vec<(u32, f64)> = (0..index.len())
        .filter(|&r| scope.admits(index.datasets[r]))
        .map(|r| {
            let s = index
                .vector(r)
                .iter()
                .zip(query)
                .map(|(&v, q)| v as f64 * q)
                .sum();
            (index.ids[r], s)
        })
        .collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_by(rank);
    Ok(scored)
}

/// Fraction of queries whose gold id is among their first `k` results.
/// Queries without results count as misses.
pub fn recall_at_k(
    results: &std::collections::BTreeMap<u32, Vec<u32>>,
    gold: &std::collections::BTreeMap<u32, u32>,
    k: usize,
) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::contract("recall over zero queries"));
    }
    let hits = gold
        .iter()
        .filter(|(q, g)| {
            results
                .get(q)
                .is_some_and(|ranked| ranked.iter().take(k).any(|id| id == *g))
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean pairwise cosine within and across modality groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
    pub gap: f64,
}

/// Uses per-group vector sums: within a group the mean over ordered pairs
/// `i ≠ j` is `(‖Σv‖² − Σ‖v‖²) / (n(n−1))`, across groups `Σa·Σb / (n_a n_b)`.
pub fn modality_separation(index: &EmbeddingIndex) -> Result<Separation> {
    let d = index.dim;
    let mut groups: Vec<(Modality, usize, Vec<f64>, f64)> = Vec::new();
    for r in 0..index.len() {
        let m = index.modalities[r];
        let pos = match groups.iter().position(|g| g.0 == m) {
            Some(p) => p,
            None => {
                groups.push((m, 0, vec![0.0; d], 0.0));
                groups.len() - 1
            }
        };
        let g = &mut groups[pos];
        g.1 += 1;
        for (s, &v) in g.2.iter_mut().zip(index.vector(r)) {
            *s += v as f64;
        }
        g.3 += index.vector(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    groups.sort_by_key(|g| g.0);
    if groups.len() < 2 {
        return Err(Error::contract("modality separation needs at least two modalities"));
    }
    if let Some(g) = groups.iter().find(|g| g.1 < 2) {
        return Err(Error::contract(format!(
            "modality {} has fewer than two candidates",
            g.0.name()
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut intra_sum, mut intra_pairs) = (0.0, 0.0);
    let (mut inter_sum, mut inter_pairs) = (0.0, 0.0);
    for (i, a) in groups.iter().enumerate() {
        intra_sum += dot(&a.2, &a.2) - a.3;
        intra_pairs += (a.1 * (a.1 - 1)) as f64;
        for b in &groups[i + 1..] {
            inter_sum += dot(&a.2, &b.2);
            inter_pairs += (a.1 * b.1) as f64;
        }
    }
    let intra = intra_sum / intra_pairs;
    let inter = inter_sum / inter_pairs;
    Ok(Separation {
        intra,
        inter,
        gap: intra - inter,
    })
}
