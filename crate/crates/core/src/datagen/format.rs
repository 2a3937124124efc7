//! Binary dataset container.
//!
//! ```text
//! magic  "WSCD-TOY"            8 bytes
//! version                      u16
//! image side (pixels)          u16
//! record count                 u64
//! per record:
//!   split (0 train, 1 test)    u8
//!   image                      side*side*3 bytes, interleaved RGB
//!   text                       u32 length + UTF-8
//!   scene descriptor           u32 length + UTF-8
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::{PairDataset, PairRecord, SceneSpec, Split};
use crate::bytes::{put_string, Reader};
use crate::error::{Error, FormatFault, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"WSCD-TOY";
pub const DATASET_VERSION: u16 = 1;

pub(super) fn encode(ds: &PairDataset) -> Result<Vec<u8>> {
    let side = u16::try_from(ds.image_size)
        .map_err(|_| Error::Data(format!("image size {} does not fit the format", ds.image_size)))?;
    let px = ds.image_size * ds.image_size * 3;
    let mut out = Vec::with_capacity(20 + ds.records.len() * (px + 64));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&side.to_le_bytes());
    out.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    for (i, r) in ds.records.iter().enumerate() {
        if r.image.len() != px {
            return Err(Error::Data(format!(
                "record {i} holds {} image bytes, expected {px}",
                r.image.len()
            )));
        }
        out.push(match r.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        out.extend_from_slice(&r.image);
        put_string(&mut out, &r.text);
        put_string(&mut out, &r.scene.descriptor());
    }
    Ok(out)
}

pub(super) fn decode(buf: &[u8]) -> Result<PairDataset> {
    let mut rd = Reader::new(buf, "dataset");
    let magic = rd.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(rd.fault(FormatFault::BadMagic, 0, format!("expected WSCD-TOY, found {magic:?}")));
    }
    let version = rd.u16("version")?;
    if version != DATASET_VERSION {
        return Err(rd.fault(
            FormatFault::Version,
            8,
            format!("version {version}, this build reads {DATASET_VERSION}"),
        ));
    }
    let side = rd.u16("image side")? as usize;
    if side == 0 {
        return Err(rd.fault(FormatFault::Corrupt, 10, "image side is zero"));
    }
    let count = rd.u64("record count")?;
    let px = side * side * 3;
    // A record needs at least split + image + two length prefixes.
    let min_record = 1 + px + 8;
    if count > (rd.remaining() / min_record) as u64 {
        return Err(rd.fault(
            FormatFault::Truncated,
            12,
            format!("{count} records cannot fit in {} remaining bytes", rd.remaining()),
        ));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = rd.offset();
        let split = match rd.u8("split")? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(rd.fault(FormatFault::Corrupt, at, format!("split tag {other}"))),
        };
        let image = rd.take(px, "image")?.to_vec();
        let text = rd.string("text")?;
        let scene_at = rd.offset();
        let desc = rd.string("scene")?;
        let scene = SceneSpec::from_descriptor(&desc)
            .map_err(|e| rd.fault(FormatFault::Corrupt, scene_at, e.to_string()))?;
        records.push(PairRecord {
            image,
            text,
            scene,
            split,
        });
    }
    if rd.remaining() != 0 {
        return Err(rd.fault(
            FormatFault::Corrupt,
            rd.offset(),
            format!("{} trailing bytes", rd.remaining()),
        ));
    }
    Ok(PairDataset {
        image_size: side,
        records,
    })
}

pub fn write_dataset(ds: &PairDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<PairDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fault_of(r: Result<PairDataset>) -> (FormatFault, u64) {
        match r {
            Err(Error::Format { fault, offset, .. }) => (fault, offset),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let ds = PairDataset::generate(3, 20, 5, 32);
        let bytes = encode(&ds).unwrap();
        assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn distinct_faults() {
        let ds = PairDataset::generate(3, 4, 1, 16);
        let bytes = encode(&ds).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(fault_of(decode(&bad)), (FormatFault::BadMagic, 0));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(fault_of(decode(&bad)), (FormatFault::Version, 8));

        for cut in [3, 11, 19, 100, bytes.len() - 1] {
            let (fault, _) = fault_of(decode(&bytes[..cut]));
            assert_eq!(fault, FormatFault::Truncated, "cut at {cut}");
        }
    }

    #[test]
    fn file_size_bound() {
        // 2000 records at 32 px: 3072 image bytes plus short strings each.
        let ds = PairDataset::generate(1, 2000, 0, 32);
        let n = encode(&ds).unwrap().len();
        assert!(n < 20_000_000, "{n}");
        assert!(n > 2000 * 3072);
    }
}
