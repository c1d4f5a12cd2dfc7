//! Prompt framing around a sample's content tokens.
//!
//! Layout: `[INSTR] [MOD] content.. [SEP] [SUM] [RET]`. Content for an
//! image+text input is stored image tokens first, text tokens second.

use crate::error::{Error, Result};
use crate::modality::{Modality, TaskType};

pub mod vocab {
    //! Reserved token ids. Everything below [`RESERVED_END`] is framing.

    pub const PAD: u32 = 0;
    pub const RET: u32 = 1;
    pub const SEP: u32 = 2;
    pub const MOD_TEXT: u32 = 3;
    pub const MOD_IMAGE: u32 = 4;
    pub const MOD_IMAGE_TEXT: u32 = 5;
    pub const SUM_TEXT: u32 = 6;
    pub const SUM_IMAGE: u32 = 7;
    pub const SUM_IMAGE_TEXT: u32 = 8;
    /// Fixed no-op instruction carried by every candidate prompt.
    pub const INSTR_CANDIDATE: u32 = 9;
    /// First of eight per-task instruction tokens, in `TaskType::ALL` order.
    pub const INSTR_BASE: u32 = 16;
    pub const RESERVED_END: u32 = 64;
}

/// Framing tokens added around the content.
pub const FRAME_LEN: usize = 5;

/// Which side of the retrieval pair a prompt is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query(TaskType),
    Candidate,
}

/// Token ids of one prompt; the final position is always [`vocab::RET`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.last() != Some(&vocab::RET) {
            return Err(Error::contract("token sequence must end with [RET]"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ret_position(&self) -> usize {
        self.ids.len() - 1
    }
}

pub fn instruction_token(task: TaskType) -> u32 {
    vocab::INSTR_BASE + task.index() as u32
}

pub fn modality_marker(m: Modality) -> u32 {
    match m {
        Modality::Text => vocab::MOD_TEXT,
        Modality::Image => vocab::MOD_IMAGE,
        Modality::ImageText => vocab::MOD_IMAGE_TEXT,
    }
}

pub fn summary_marker(m: Modality) -> u32 {
    match m {
        Modality::Text => vocab::SUM_TEXT,
        Modality::Image => vocab::SUM_IMAGE,
        Modality::ImageText => vocab::SUM_IMAGE_TEXT,
    }
}

/// Frames `content` for the given side. Fails when the framed prompt would
/// exceed `max_seq`.
pub fn assemble_prompt(
    content: &[u32],
    modality: Modality,
    side: Side,
    max_seq: usize,
) -> Result<TokenSequence> {
    let total = content.len() + FRAME_LEN;
    if total > max_seq {
        return Err(Error::Length(format!(
            "prompt of {total} tokens exceeds max_seq {max_seq}"
        )));
    }
    let instr = match side {
        Side::Query(task) => instruction_token(task),
        Side::Candidate => vocab::INSTR_CANDIDATE,
    };
    let mut ids = Vec::with_capacity(total);
    ids.push(instr);
    ids.push(modality_marker(modality));
    ids.extend_from_slice(content);
    ids.push(vocab::SEP);
    ids.push(summary_marker(modality));
    ids.push(vocab::RET);
    Ok(TokenSequence { ids })
}
