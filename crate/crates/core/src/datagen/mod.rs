//! Deterministic synthetic multimodal retrieval corpus.
//!
//! Every concept owns a sequence of *atoms*, `atom(c, j) = mix(c, j) mod V_t`,
//! where `mix` is the splitmix64 finalizer applied to `c·φ ⊕ j`. A concept's
//! base renderings are:
//!
//! * text: `TEXT_BASE + atom(c, j)` for `j < n_t`;
//! * image: position `p < n_i` carries atom `j = ⌊p·n_t/n_i⌋` and emits
//!   `IMAGE_BASE + mix(IMAGE_SALT ⊕ (2·atom + p mod 2)) mod V_i`, so every
//!   image token is a fixed function of one text atom;
//! * image+text: the image rendering followed by the text rendering.
//!
//! Noise then resamples each position independently, with probability `p`,
//! uniformly from that position's vocabulary range. Text and image ranges
//! are disjoint, which separates the modalities in embedding space unless
//! training aligns them.

mod corpus;

pub use corpus::{
    generate_corpus, Candidate, CandidatePools, Corpus, PoolScope, Sample, CANDIDATES_FILE,
    MANIFEST_FILE, QUERIES_FILE, TRAIN_FILE,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::vocab::RESERVED_END;
use crate::error::{Error, Result};
use crate::modality::{Modality, TaskType};

pub const TEXT_BASE: u32 = 100;
pub const IMAGE_BASE: u32 = 5000;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const IMAGE_SALT: u64 = 0xD1B5_4A32_D192_ED03;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(concept: u64, j: u64) -> u64 {
    splitmix64(concept.wrapping_mul(GOLDEN) ^ j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_concepts: usize,
    pub tasks: Vec<TaskType>,
    /// Text ids occupy `[TEXT_BASE, TEXT_BASE + text_vocab)`.
    pub text_vocab: u32,
    /// Image ids occupy `[IMAGE_BASE, IMAGE_BASE + image_vocab)`.
    pub image_vocab: u32,
    pub text_len: usize,
    pub image_len: usize,
    pub noise: f64,
    /// Extra candidates per concept in every dataset pool.
    pub distractors: usize,
    /// Share of concepts whose queries are held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        use TaskType::*;
        Self {
            n_concepts: 2000,
            tasks: vec![
                TextToImage,
                ImageToText,
                TextToText,
                ImageToImage,
                ImageTextToImage,
                TextToImageText,
            ],
            text_vocab: 512,
            image_vocab: 1024,
            text_len: 8,
            image_len: 16,
            noise: 0.1,
            distractors: 2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("corpus needs at least one task"));
        }
        if self.n_concepts == 0 {
            return Err(Error::config("corpus needs at least one concept"));
        }
        if self.text_vocab == 0 || self.image_vocab == 0 {
            return Err(Error::config("vocabulary ranges must be non-empty"));
        }
        if TEXT_BASE < RESERVED_END || TEXT_BASE + self.text_vocab > IMAGE_BASE {
            return Err(Error::config(format!(
                "text range [{TEXT_BASE}, {}) overlaps the image range",
                TEXT_BASE + self.text_vocab
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1)", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::config(format!(
                "test fraction {} outside [0, 1]",
                self.test_fraction
            )));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::config("duplicate task in corpus spec"));
        }
        Ok(())
    }

    /// Smallest token-table size that covers every id this corpus can emit.
    pub fn vocab_size(&self) -> usize {
        (IMAGE_BASE + self.image_vocab) as usize
    }

    /// Content length of a rendering in the given modality.
    pub fn content_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_len,
            Modality::Image => self.image_len,
            Modality::ImageText => self.text_len + self.image_len,
        }
    }

    pub fn text_range(&self) -> std::ops::Range<u32> {
        TEXT_BASE..TEXT_BASE + self.text_vocab
    }

    pub fn image_range(&self) -> std::ops::Range<u32> {
        IMAGE_BASE..IMAGE_BASE + self.image_vocab
    }

    /// Whether `tokens` lie in the ranges of `modality`, image part first.
    pub fn tokens_in_range(&self, modality: Modality, tokens: &[u32]) -> bool {
        let (text, image) = (self.text_range(), self.image_range());
        match modality {
            Modality::Text => tokens.iter().all(|t| text.contains(t)),
            Modality::Image => tokens.iter().all(|t| image.contains(t)),
            Modality::ImageText => {
                tokens.len() == self.image_len + self.text_len
                    && tokens[..self.image_len].iter().all(|t| image.contains(t))
                    && tokens[self.image_len..].iter().all(|t| text.contains(t))
            }
        }
    }

    fn atom(&self, concept: u64, j: usize) -> u64 {
        mix(concept, j as u64) % self.text_vocab as u64
    }

    fn base_text(&self, concept: u64) -> Vec<u32> {
        (0..self.text_len)
            .map(|j| TEXT_BASE + self.atom(concept, j) as u32)
            .collect()
    }

    fn base_image(&self, concept: u64) -> Vec<u32> {
        (0..self.image_len)
            .map(|p| {
                let j = if self.text_len > 0 {
                    p * self.text_len / self.image_len
                } else {
                    p
                };
                let key = 2 * self.atom(concept, j) + (p % 2) as u64;
                IMAGE_BASE + (splitmix64(IMAGE_SALT ^ key) % self.image_vocab as u64) as u32
            })
            .collect()
    }
}

fn add_noise<R: Rng>(tokens: &mut [u32], range: std::ops::Range<u32>, p: f64, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    for t in tokens {
        if rng.random::<f64>() < p {
            *t = rng.random_range(range.clone());
        }
    }
}

/// Renders `concept` in `modality`, resampling each position with
/// probability `noise`.
pub fn render<R: Rng>(
    spec: &CorpusSpec,
    concept: u64,
    modality: Modality,
    noise: f64,
    rng: &mut R,
) -> Vec<u32> {
    match modality {
        Modality::Text => {
            let mut t = spec.base_text(concept);
            add_noise(&mut t, spec.text_range(), noise, rng);
            t
        }
        Modality::Image => {
            let mut i = spec.base_image(concept);
            add_noise(&mut i, spec.image_range(), noise, rng);
            i
        }
        Modality::ImageText => {
            let mut i = spec.base_image(concept);
            add_noise(&mut i, spec.image_range(), noise, rng);
            let mut t = spec.base_text(concept);
            add_noise(&mut t, spec.text_range(), noise, rng);
            i.extend(t);
            i
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_render_is_pure() {
        let spec = CorpusSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        for m in Modality::ALL {
            assert_eq!(render(&spec, 42, m, 0.0, &mut r1), render(&spec, 42, m, 0.0, &mut r2));
        }
    }

    #[test]
    fn image_text_is_image_then_text() {
        let spec = CorpusSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let it = render(&spec, 7, Modality::ImageText, 0.0, &mut rng);
        assert_eq!(it.len(), spec.image_len + spec.text_len);
        assert_eq!(&it[..spec.image_len], render(&spec, 7, Modality::Image, 0.0, &mut rng));
        assert_eq!(&it[spec.image_len..], render(&spec, 7, Modality::Text, 0.0, &mut rng));
        assert!(spec.tokens_in_range(Modality::ImageText, &it));
    }

    #[test]
    fn noise_stays_in_range() {
        let spec = CorpusSpec {
            noise: 0.9,
            ..CorpusSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 0..50 {
            for m in Modality::ALL {
                let toks = render(&spec, c, m, spec.noise, &mut rng);
                assert!(spec.tokens_in_range(m, &toks));
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = |f: fn(&mut CorpusSpec)| {
            let mut s = CorpusSpec::default();
            f(&mut s);
            s.validate().is_err()
        };
        assert!(bad(|s| s.tasks.clear()));
        assert!(bad(|s| s.noise = 1.0));
        assert!(bad(|s| s.text_vocab = 4901));
        assert!(bad(|s| s.tasks.push(TaskType::TextToImage)));
        assert!(CorpusSpec::default().validate().is_ok());
    }
}
