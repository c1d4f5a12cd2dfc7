//! Simulated data-parallel shards: batch partitioning, embedding gather and
//! gradient all-reduce. Reductions always run in ascending shard id, so the
//! result is independent of the order in which shards finished.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// A shard's slice of the global batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardContext {
    pub shard_id: usize,
    pub range: Range<usize>,
}

/// Splits a global batch of `global` items into `world` equal, contiguous
/// slices.
pub fn split_batch(global: usize, world: usize) -> Result<Vec<ShardContext>> {
    if world == 0 || global == 0 || global % world != 0 {
        return Err(Error::config(format!(
            "global batch {global} cannot be split across {world} shards"
        )));
    }
    let per = global / world;
    Ok((0..world)
        .map(|s| ShardContext {
            shard_id: s,
            range: s * per..(s + 1) * per,
        })
        .collect())
}

fn ordered<T>(items: Vec<(usize, T)>, world: usize) -> Result<Vec<T>> {
    let mut slots: Vec<Option<T>> = (0..world).map(|_| None).collect();
    for (id, item) in items {
        let slot = slots
            .get_mut(id)
            .ok_or_else(|| Error::Aggregation(format!("shard {id} outside world of {world}")))?;
        if slot.replace(item).is_some() {
            return Err(Error::Aggregation(format!("shard {id} reported twice")));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or_else(|| Error::Aggregation(format!("shard {id} did not report"))))
        .collect()
}

/// Concatenates per-shard embedding rows in ascending shard id.
pub fn gather_shards(locals: Vec<(usize, Tensor)>, world: usize) -> Result<Tensor> {
    let parts = ordered(locals, world)?;
    let (_, width) = parts[0].dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in &parts {
        let (r, c) = p.dims2()?;
        if c != width {
            return Err(Error::Aggregation(format!(
                "embedding width {c} differs from {width}"
            )));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, width, data)
}

/// Sums per-shard gradient lists elementwise in ascending shard id.
pub fn all_reduce_grads(shard_grads: Vec<(usize, Vec<Tensor>)>, world: usize) -> Result<Vec<Tensor>> {
    let parts = ordered(shard_grads, world)?;
    let mut iter = parts.into_iter();
    let first = iter.next().expect("world >= 1");
    let mut acc: Vec<Vec<f64>> = first.iter().map(Tensor::to_vec).collect();
    let shapes: Vec<Vec<usize>> = first.iter().map(|t| t.shape().to_vec()).collect();
    for (offset, grads) in iter.enumerate() {
        let shard = offset + 1;
        if grads.len() != acc.len() {
            return Err(Error::Aggregation(format!(
                "shard {shard} reported {} gradients, expected {}",
                grads.len(),
                acc.len()
            )));
        }
        for ((a, g), shape) in acc.iter_mut().zip(&grads).zip(&shapes) {
            if g.shape() != shape.as_slice() {
                return Err(Error::Aggregation(format!(
                    "shard {shard} gradient shape {:?} differs from {shape:?}",
                    g.shape()
                )));
            }
            for (x, y) in a.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    acc.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s, d))
        .collect()
}
