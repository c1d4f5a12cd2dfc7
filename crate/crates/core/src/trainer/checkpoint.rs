//! Checkpoint file layout, all integers and floats little-endian:
//!
//! ```text
//! "PUMACKPT"  8 bytes
//! version     u8 (currently 1)
//! config      u32 × 6: vocab_size, d_model, n_heads, n_layers, max_seq, k
//! weights     f64 per element, tensors in encoder parameter order
//! has_optim   u8 (0 or 1)
//! [step u64, lr f64, beta1 f64, beta2 f64, eps f64,
//!  first moments then second moments, f64, parameter order]
//! ```

use std::path::Path;

use crate::bytes::{put_f64s, put_u32, put_u64, Reader};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::optim::{AdamConfig, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PUMACKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub optimizer: Option<OptimizerState>,
}

pub fn encode_checkpoint(encoder: &Encoder, optimizer: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let c = encoder.config();
    let mut out = Vec::with_capacity(64 + 8 * encoder.param_count() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for field in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.max_seq, c.k] {
        let v = u32::try_from(field)
            .map_err(|_| Error::config(format!("config field {field} exceeds u32")))?;
        put_u32(&mut out, v);
    }
    for t in encoder.params() {
        put_f64s(&mut out, t.data());
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            let shapes = Encoder::param_shapes(c);
            let matches = |ts: &[Tensor]| {
                ts.len() == shapes.len() && ts.iter().zip(&shapes).all(|(t, s)| t.shape() == s.as_slice())
            };
            if !matches(&state.m) || !matches(&state.v) {
                return Err(Error::config("optimizer moments do not match the encoder parameters"));
            }
            out.push(1);
            put_u64(&mut out, state.step);
            let a = state.config;
            put_f64s(&mut out, &[a.lr, a.beta1, a.beta2, a.eps]);
            for t in state.m.iter().chain(&state.v) {
                put_f64s(&mut out, t.data());
            }
        }
    }
    Ok(out)
}

fn read_tensors(r: &mut Reader, shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor>> {
    shapes
        .iter()
        .map(|s| Tensor::new(s.clone(), r.f64s(s.iter().product(), what)?))
        .collect()
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_at = r.offset();
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u32("config")? as usize;
    }
    let [vocab_size, d_model, n_heads, n_layers, max_seq, k] = fields;
    let config = EncoderConfig {
        vocab_size,
        d_model,
        n_heads,
        n_layers,
        max_seq,
        k,
    };
    config
        .validate()
        .map_err(|e| Error::format(config_at, format!("invalid config: {e}")))?;
    let shapes = Encoder::param_shapes(&config);
    let params = read_tensors(&mut r, &shapes, "weights")?;
    let flag_at = r.offset();
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let h = r.f64s(4, "optimizer hyperparameters")?;
            let m = read_tensors(&mut r, &shapes, "first moments")?;
            let v = read_tensors(&mut r, &shapes, "second moments")?;
            Some(OptimizerState {
                config: AdamConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                },
                step,
                m,
                v,
            })
        }
        other => return Err(Error::format(flag_at, format!("optimizer flag {other} is not 0 or 1"))),
    };
    r.finish()?;
    Ok(Checkpoint {
        encoder: Encoder::from_params(config, params)?,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, encoder: &Encoder, optimizer: Option<&OptimizerState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(encoder, optimizer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Encoder {
        Encoder::init(
            EncoderConfig {
                vocab_size: 20,
                d_model: 4,
                n_heads: 2,
                n_layers: 2,
                max_seq: 8,
                k: 2,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let enc = small();
        let mut state = OptimizerState::new(AdamConfig::default(), &Encoder::param_shapes(enc.config())).unwrap();
        state.step = 7;
        state.m[0] = enc.params()[0].map(|x| x * 0.5);
        let with = decode_checkpoint(&encode_checkpoint(&enc, Some(&state)).unwrap()).unwrap();
        assert_eq!(with.encoder, enc);
        assert_eq!(with.optimizer.as_ref(), Some(&state));
        let without = decode_checkpoint(&encode_checkpoint(&enc, None).unwrap()).unwrap();
        assert!(without.optimizer.is_none());
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode_checkpoint(&small(), None).unwrap();
        for cut in [3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        match decode_checkpoint(&extra) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_checkpoint(&small(), None).unwrap();
        bytes[8] = 2;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
        bytes[8] = 1;
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
