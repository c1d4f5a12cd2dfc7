//! Index file layout, little-endian:
//!
//! ```text
//! "PUMAIDX1"  8 bytes
//! count u32, dim u32
//! per record: id u32, modality u8, dataset u8, 2 zero bytes, dim × f32
//! ```

use std::path::Path;

use crate::bytes::{put_u32, Reader};
use crate::error::{Error, Result};
use crate::modality::Modality;

use super::index::{dataset_tag_of, EmbeddingIndex};

pub const INDEX_MAGIC: &[u8; 8] = b"PUMAIDX1";

pub fn encode_index(index: &EmbeddingIndex) -> Result<Vec<u8>> {
    let as_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::config(format!("index {what} {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(16 + index.len() * (8 + 4 * index.dim()));
    out.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut out, as_u32(index.len(), "count")?);
    put_u32(&mut out, as_u32(index.dim(), "dim")?);
    for r in 0..index.len() {
        put_u32(&mut out, index.ids()[r]);
        out.push(index.modalities()[r].code());
        out.push(index.datasets()[r]);
        out.extend_from_slice(&[0, 0]);
        for v in index.vector(r) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_index(buf: &[u8]) -> Result<EmbeddingIndex> {
    let mut r = Reader::new(buf);
    r.expect_magic(INDEX_MAGIC)?;
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let record = 8 + 4 * dim;
    let left = buf.len() - r.offset() as usize;
    if count.checked_mul(record).is_none_or(|need| need > left) {
        return Err(Error::format(
            r.offset(),
            format!("{count} records of {record} bytes do not fit in {left} bytes"),
        ));
    }
    let (mut ids, mut modalities, mut datasets) = (Vec::new(), Vec::new(), Vec::new());
    let mut vectors = Vec::with_capacity(count * dim);
    for _ in 0..count {
        ids.push(r.u32("record id")?);
        let at = r.offset();
        let code = r.u8("modality")?;
        modalities.push(
            Modality::from_code(code)
                .ok_or_else(|| Error::format(at, format!("unknown modality code {code}")))?,
        );
        let at = r.offset();
        let dataset = r.u8("dataset")?;
        dataset_tag_of(dataset).map_err(|e| Error::format(at, e.to_string()))?;
        datasets.push(dataset);
        r.take(2, "padding")?;
        vectors.extend(r.f32s(dim, "vector")?);
    }
    r.finish()?;
    EmbeddingIndex::new(ids, modalities, datasets, dim, vectors)
}

pub fn save_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    std::fs::write(path, encode_index(index)?)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    decode_index(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingIndex {
        EmbeddingIndex::new(
            vec![4, 2],
            vec![Modality::Image, Modality::ImageText],
            vec![0, 5],
            3,
            vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let idx = sample();
        assert_eq!(decode_index(&encode_index(&idx).unwrap()).unwrap(), idx);
        let empty = EmbeddingIndex::empty(7);
        let back = decode_index(&encode_index(&empty).unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 7);
    }

    #[test]
    fn corruption_reports_offsets() {
        let bytes = encode_index(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(decode_index(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_index(&bytes[..bytes.len() - 2]), Err(Error::Format { offset: 16, .. })));
        let mut bad = bytes.clone();
        bad[20] = 9;
        assert!(matches!(decode_index(&bad), Err(Error::Format { offset: 20, .. })));
    }
}
