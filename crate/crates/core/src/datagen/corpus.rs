use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render, CorpusSpec};
use crate::encoder::prompt::{assemble_prompt, instruction_token, Side, TokenSequence};
use crate::error::{Error, Result};
use crate::modality::{Modality, TaskType};

pub const MANIFEST_FILE: &str = "corpus.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";

/// One query with its gold candidate. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub task: TaskType,
    pub dataset: String,
    pub modality: Modality,
    pub tokens: Vec<u32>,
    pub gold: u32,
    pub instr: u32,
}

impl Sample {
    pub fn prompt(&self, max_seq: usize) -> Result<TokenSequence> {
        assemble_prompt(&self.tokens, self.modality, Side::Query(self.task), max_seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u32,
    pub dataset: String,
    pub modality: Modality,
    pub tokens: Vec<u32>,
    pub concept: u64,
}

impl Candidate {
    pub fn prompt(&self, max_seq: usize) -> Result<TokenSequence> {
        assemble_prompt(&self.tokens, self.modality, Side::Candidate, max_seq)
            .map_err(|e| Error::Length(format!("candidate {}: {e}", self.id)))
    }
}

/// Generated corpus: training queries, held-out test queries and every
/// candidate across all dataset pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub candidates: Vec<Candidate>,
    by_id: HashMap<u32, usize>,
}

/// Dataset tag of a task's pool.
pub fn dataset_tag(task: TaskType) -> String {
    task.code().to_string()
}

/// Builds the corpus. For every task and concept: one query rendering, one
/// positive candidate rendering with independent noise, and `distractors`
/// candidates rendered from concepts that never appear as queries.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n = spec.n_concepts;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let mut is_test = vec![false; n];
    for &c in &order[..n_test] {
        is_test[c] = true;
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut candidates = Vec::new();
    let mut next_query = 0u32;
    for &task in &spec.tasks {
        let dataset = dataset_tag(task);
        for concept in 0..n {
            let query_tokens = render(spec, concept as u64, task.query_modality(), spec.noise, &mut rng);
            let cand_tokens = render(spec, concept as u64, task.target_modality(), spec.noise, &mut rng);
            let gold = candidates.len() as u32;
            candidates.push(Candidate {
                id: gold,
                dataset: dataset.clone(),
                modality: task.target_modality(),
                tokens: cand_tokens,
                concept: concept as u64,
            });
            let sample = Sample {
                id: next_query,
                task,
                dataset: dataset.clone(),
                modality: task.query_modality(),
                tokens: query_tokens,
                gold,
                instr: instruction_token(task),
            };
            next_query += 1;
            if is_test[concept] {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
        for d in 0..n * spec.distractors {
            let concept = (n + d) as u64;
            let tokens = render(spec, concept, task.target_modality(), spec.noise, &mut rng);
            candidates.push(Candidate {
                id: candidates.len() as u32,
                dataset: dataset.clone(),
                modality: task.target_modality(),
                tokens,
                concept,
            });
        }
    }
    Corpus::from_parts(spec.clone(), train, test, candidates)
}

impl Corpus {
    pub fn from_parts(
        spec: CorpusSpec,
        train: Vec<Sample>,
        test: Vec<Sample>,
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if by_id.insert(c.id, i).is_some() {
                return Err(Error::config(format!("duplicate candidate id {}", c.id)));
            }
        }
        let corpus = Self {
            spec,
            train,
            test,
            candidates,
            by_id,
        };
        for s in corpus.train.iter().chain(&corpus.test) {
            corpus.candidate(s.gold)?;
        }
        Ok(corpus)
    }

    pub fn candidate(&self, id: u32) -> Result<&Candidate> {
        self.by_id
            .get(&id)
            .map(|&i| &self.candidates[i])
            .ok_or_else(|| Error::Lookup(format!("unknown candidate id {id}")))
    }

    /// Gold candidate id of every query, train and test.
    pub fn gold_map(&self) -> BTreeMap<u32, u32> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| (s.id, s.gold))
            .collect()
    }

    /// Copy restricted to the given tasks; candidate pools of other tasks are
    /// dropped too.
    pub fn restricted_to(&self, tasks: &[TaskType]) -> Result<Self> {
        let keep: Vec<String> = tasks.iter().map(|&t| dataset_tag(t)).collect();
        let mut spec = self.spec.clone();
        spec.tasks.retain(|t| tasks.contains(t));
        Self::from_parts(
            spec,
            self.train.iter().filter(|s| tasks.contains(&s.task)).cloned().collect(),
            self.test.iter().filter(|s| tasks.contains(&s.task)).cloned().collect(),
            self.candidates
                .iter()
                .filter(|c| keep.contains(&c.dataset))
                .cloned()
                .collect(),
        )
    }

    pub fn pools(&self) -> CandidatePools {
        CandidatePools::new(&self.candidates)
    }

    /// Writes the manifest and three JSON-lines files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(QUERIES_FILE), &self.test)?;
        write_jsonl(&dir.join(CANDIDATES_FILE), &self.candidates)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        spec.validate()?;
        let train = read_jsonl(&dir.join(TRAIN_FILE))?;
        let test = read_jsonl(&dir.join(QUERIES_FILE))?;
        let candidates = read_jsonl(&dir.join(CANDIDATES_FILE))?;
        Self::from_parts(spec, train, test, candidates)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::config(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    /// Candidates sharing the query's dataset tag.
    Local,
    /// Every candidate of every dataset.
    Global,
}

impl PoolScope {
    pub fn name(self) -> &'static str {
        match self {
            PoolScope::Local => "local",
            PoolScope::Global => "global",
        }
    }
}

impl std::fmt::Display for PoolScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PoolScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(PoolScope::Local),
            "global" => Ok(PoolScope::Global),
            other => Err(Error::config(format!("unknown pool scope {other:?}"))),
        }
    }
}

/// Candidate ids grouped by dataset tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidatePools {
    local: BTreeMap<String, Vec<u32>>,
    global: Vec<u32>,
}

impl CandidatePools {
    pub fn new(candidates: &[Candidate]) -> Self {
        let mut local: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for c in candidates {
            local.entry(c.dataset.clone()).or_default().push(c.id);
        }
        let mut global: Vec<u32> = candidates.iter().map(|c| c.id).collect();
        global.sort_unstable();
        for ids in local.values_mut() {
            ids.sort_unstable();
        }
        Self { local, global }
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.local.keys().map(String::as_str)
    }

    /// Candidate ids a query from `dataset` is scored against.
    pub fn pool(&self, dataset: &str, scope: PoolScope) -> Result<&[u32]> {
        let local = self
            .local
            .get(dataset)
            .ok_or_else(|| Error::Lookup(format!("unknown dataset tag {dataset:?}")))?;
        Ok(match scope {
            PoolScope::Local => local,
            PoolScope::Global => &self.global,
        })
    }
}
