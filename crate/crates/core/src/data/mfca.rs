//! MFCA feature archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MFCA" | u32 item_count | u32 frame_dim
//! per item: u16 id_len | id (UTF-8) | u32 frame_count | frame_count*frame_dim f32
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, FrameSequence, Item, SpeechSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFCA";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format(format!(
                "truncated archive while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// If a final item's payload holds whole frames of some other width, the
/// archive is mislabelled rather than cut short.
fn payload_dim_mismatch(payload_bytes: usize, frames: usize, declared: usize) -> Option<usize> {
    if frames == 0 || payload_bytes % (4 * frames) != 0 {
        return None;
    }
    let dim = payload_bytes / (4 * frames);
    (dim > 0 && dim != declared).then_some(dim)
}

pub fn decode_feature_archive(bytes: &[u8]) -> Result<SpeechSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad archive magic {magic:?}")));
    }
    let count = r.u32("item count")? as usize;
    let dim = r.u32("frame dim")? as usize;
    if dim == 0 {
        return Err(Error::Shape("archive declares frame dimension 0".into()));
    }
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for n in 0..count {
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| Error::Format(format!("item {n} id is not UTF-8")))?
            .to_string();
        let frames = r.u32("frame count")? as usize;
        if frames == 0 {
            return Err(Error::EmptyItem(format!("item {id:?} has zero frames")));
        }
        let needed = frames * dim * 4;
        let last = n + 1 == count;
        if last && r.remaining() != needed {
            if let Some(actual) = payload_dim_mismatch(r.remaining(), frames, dim) {
                return Err(Error::Shape(format!(
                    "item {id:?} holds {actual}-dim frames, archive declares {dim}"
                )));
            }
        }
        let raw = r.take(needed, "frame values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        items.push(Item {
            id,
            data: FrameSequence::new(dim, values)?,
            label: None,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last item",
            r.remaining()
        )));
    }
    Dataset::new(items, Vec::new(), dim)
}

pub fn encode_feature_archive(set: &SpeechSet) -> Result<Vec<u8>> {
    let dim = set.feature_dim();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for item in set.items() {
        if item.data.dim() != dim {
            return Err(Error::Shape(format!(
                "item {:?} has dimension {}, archive uses {dim}",
                item.id,
                item.data.dim()
            )));
        }
        let id = item.id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Argument(format!("id {:?} longer than 65535 bytes", item.id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(item.data.len() as u32).to_le_bytes());
        for v in item.data.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Loads an archive; items keep file order and carry no labels.
pub fn load_feature_archive(path: &Path) -> Result<SpeechSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_archive(&bytes)
}

pub fn write_feature_archive(set: &SpeechSet, path: &Path) -> Result<()> {
    let bytes = encode_feature_archive(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn archive(dim: u32, items: &[(&str, u32, Vec<f32>)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(items.len() as u32).to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        for (id, frames, vals) in items {
            b.extend_from_slice(&(id.len() as u16).to_le_bytes());
            b.extend_from_slice(id.as_bytes());
            b.extend_from_slice(&frames.to_le_bytes());
            for v in vals {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    #[test]
    fn single_item_three_frames() {
        let vals: Vec<f32> = (0..39).map(|i| i as f32 * 0.5).collect();
        let bytes = archive(13, &[("w1", 3, vals)]);
        let set = decode_feature_archive(&bytes).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.data(0).len(), 3);
        assert_eq!(set.feature_dim(), 13);
        assert_eq!(encode_feature_archive(&set).unwrap(), bytes);
    }

    #[test]
    fn undersized_frame_is_shape_error() {
        let bytes = archive(13, &[("w1", 1, vec![0.25; 12])]);
        assert!(matches!(decode_feature_archive(&bytes), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_frame_item_is_rejected() {
        let bytes = archive(13, &[("w1", 0, vec![])]);
        assert!(matches!(decode_feature_archive(&bytes), Err(Error::EmptyItem(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = archive(2, &[("a", 1, vec![1.0, 2.0])]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_archive(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_feature_archive(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn writer_rejects_mixed_dimensions() {
        let items = vec![Item {
            id: "a".to_string(),
            data: FrameSequence::new(3, vec![0.0; 6]).unwrap(),
            label: None,
        }];
        assert!(matches!(Dataset::new(items, vec![], 2), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn archives_round_trip_byte_for_byte(
            dim in 1u32..6,
            lens in proptest::collection::vec(1u32..5, 0..6),
            seed in any::<u32>(),
        ) {
            let mut items = Vec::new();
            let mut x = seed;
            for (n, &len) in lens.iter().enumerate() {
                let vals: Vec<f32> = (0..len * dim)
                    .map(|_| {
                        x = x.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                        f32::from_bits(x & 0x7f7f_ffff)
                    })
                    .collect();
                items.push((format!("item-{n}"), len, vals));
            }
            let refs: Vec<(&str, u32, Vec<f32>)> =
                items.iter().map(|(id, l, v)| (id.as_str(), *l, v.clone())).collect();
            let bytes = archive(dim, &refs);
            let set = decode_feature_archive(&bytes).unwrap();
            prop_assert_eq!(encode_feature_archive(&set).unwrap(), bytes);
        }
    }
}
