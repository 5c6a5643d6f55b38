//! Binary dataset container and text manifest.
//!
//! ```text
//! magic          4 bytes "RWTD"
//! version        u32 LE  (currently 1)
//! count          u32 LE  number of subjects
//! per subject:
//!   block_len    u32 LE  bytes in the block below
//!   block:
//!     subject_id     u32
//!     image_size     u32
//!     frames         u32
//!     center_x, center_y, inner_radius            f64 ×3
//!     base_thickness                              f64 ×6
//!     amplitude                                   f64 ×6
//!     phase, contraction                          f64 ×2
//!     blood, myocardium, background, noise_sigma  f64 ×4
//!     spec_seed      u64
//!     pixels         frames × image_size² f64, row-major
//!     labels         frames × 6 f64 (thickness / image_size)
//!   crc32        u32 LE  CRC-32 (IEEE) of the block bytes
//! ```
//! All multi-byte values are little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CineSequence, Intensities, PhantomSpec, REGION_COUNT};
use crate::error::{Error, Result};
use crate::io_util::Reader;
use crate::model::RwtMatrix;

pub const MAGIC: &[u8; 4] = b"RWTD";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_block(seq: &CineSequence) -> Result<Vec<u8>> {
    let s = &seq.spec;
    let px = s.image_size * s.image_size;
    if seq.frames.len() != s.frames || seq.frames.iter().any(|f| f.len() != px) {
        return Err(Error::shape("encode_dataset", "frames disagree with spec"));
    }
    if seq.labels.frames() != s.frames || seq.labels.regions() != REGION_COUNT {
        return Err(Error::shape("encode_dataset", "labels disagree with spec"));
    }
    let mut b = Vec::with_capacity(128 + 8 * (px * s.frames + REGION_COUNT * s.frames));
    put_u32(&mut b, seq.subject_id);
    put_u32(&mut b, s.image_size as u32);
    put_u32(&mut b, s.frames as u32);
    put_f64s(&mut b, &[s.center.0, s.center.1, s.inner_radius]);
    put_f64s(&mut b, &s.base_thickness);
    put_f64s(&mut b, &s.amplitude);
    put_f64s(&mut b, &[s.phase, s.contraction]);
    put_f64s(
        &mut b,
        &[s.levels.blood, s.levels.myocardium, s.levels.background, s.noise_sigma],
    );
    b.extend_from_slice(&s.seed.to_le_bytes());
    for f in &seq.frames {
        put_f64s(&mut b, f);
    }
    put_f64s(&mut b, seq.labels.values());
    Ok(b)
}

fn decode_block(block: &[u8]) -> Result<CineSequence> {
    let mut r = Reader::new(block);
    let subject_id = r.u32("subject id")?;
    let image_size = r.u32("image size")? as usize;
    let frames = r.u32("frame count")? as usize;
    let head = r.f64s(3, "geometry")?;
    let base = r.f64s(REGION_COUNT, "base thickness")?;
    let amp = r.f64s(REGION_COUNT, "amplitude")?;
    let phase = r.f64("phase")?;
    let contraction = r.f64("contraction")?;
    let lv = r.f64s(4, "intensities")?;
    let seed = r.u64("spec seed")?;
    let spec = PhantomSpec {
        image_size,
        frames,
        center: (head[0], head[1]),
        inner_radius: head[2],
        base_thickness: base.try_into().unwrap(),
        amplitude: amp.try_into().unwrap(),
        phase,
        contraction,
        levels: Intensities {
            blood: lv[0],
            myocardium: lv[1],
            background: lv[2],
        },
        noise_sigma: lv[3],
        seed,
    };
    let px = image_size
        .checked_mul(image_size)
        .ok_or_else(|| Error::Malformed("image size overflows".into()))?;
    let images = (0..frames)
        .map(|_| r.f64s(px, "pixels"))
        .collect::<Result<Vec<_>>>()?;
    let labels = RwtMatrix::new(frames, REGION_COUNT, r.f64s(frames * REGION_COUNT, "labels")?)?;
    if !r.is_done() {
        return Err(Error::Malformed(format!(
            "subject {subject_id}: block has {} trailing bytes",
            block.len() - r.position()
        )));
    }
    Ok(CineSequence {
        subject_id,
        frames: images,
        labels,
        spec,
    })
}

pub fn encode_dataset(subjects: &[CineSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, subjects.len() as u32);
    for seq in subjects {
        let block = encode_block(seq)?;
        put_u32(&mut out, block.len() as u32);
        let crc = crc32fast::hash(&block);
        out.extend_from_slice(&block);
        put_u32(&mut out, crc);
    }
    Ok(out)
}

/// Decodes a whole dataset; any corruption fails the call without returning
/// partial data.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<CineSequence>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic { expected: "RWTD" });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("subject count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("block length")? as usize;
        let block = r.take(len, "subject block")?;
        let stored = r.u32("checksum")?;
        let computed = crc32fast::hash(block);
        if stored != computed {
            let subject = block
                .get(..4)
                .map_or(u32::MAX, |b| u32::from_le_bytes(b.try_into().unwrap()));
            return Err(Error::Checksum {
                subject,
                stored,
                computed,
            });
        }
        out.push(decode_block(block)?);
    }
    if !r.is_done() {
        return Err(Error::Malformed("trailing bytes after last subject".into()));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, subjects: &[CineSequence]) -> Result<()> {
    fs::write(path, encode_dataset(subjects)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<CineSequence>> {
    decode_dataset(&fs::read(path)?)
}

/// Tab-separated summary of every subject's parameters, one line each.
pub fn manifest(subjects: &[CineSequence]) -> String {
    let mut s = String::from(
        "subject\tseed\tcenter_x\tcenter_y\tinner_radius\tcontraction\tphase\tnoise_sigma\tbase_thickness\tamplitude\n",
    );
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    for seq in subjects {
        let p = &seq.spec;
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            seq.subject_id,
            p.seed,
            p.center.0,
            p.center.1,
            p.inner_radius,
            p.contraction,
            p.phase,
            p.noise_sigma,
            join(&p.base_thickness),
            join(&p.amplitude)
        );
    }
    s
}

/// `data.rwtd` → `data.rwtd.manifest.tsv`
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".manifest.tsv");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomRanges};

    fn small() -> Vec<CineSequence> {
        let ranges = PhantomRanges {
            image_size: 40,
            frames: 3,
            inner_radius: super::super::Range::new(6.0, 8.0),
            base_thickness: super::super::Range::new(3.0, 5.0),
            amplitude: super::super::Range::new(1.0, 2.0),
            contraction: super::super::Range::new(0.5, 1.0),
            ..PhantomRanges::default()
        };
        generate_dataset(3, 11, &ranges).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = small();
        let back = decode_dataset(&encode_dataset(&data).unwrap()).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn corruption_is_reported_by_kind() {
        let data = small();
        let bytes = encode_dataset(&data).unwrap();
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));

        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode_dataset(&v), Err(Error::Version { found: 2, .. })));

        let mut c = bytes.clone();
        let mid = 12 + 4 + 200;
        c[mid] ^= 0x40;
        assert!(matches!(decode_dataset(&c), Err(Error::Checksum { subject: 0, .. })));
    }

    #[test]
    fn manifest_has_one_line_per_subject() {
        let data = small();
        assert_eq!(manifest(&data).lines().count(), 1 + data.len());
    }
}
