//! Bag container: `DASMIL01`, a little-endian `u64` header length, the JSON
//! header, every patch as little-endian `f32` in header order, and a CRC32 of
//! everything between the length field and the checksum.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, Canvas, DatasetConfig, Instance, Point, PATCH_SIDE};
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 8] = b"DASMIL01";
const FORMAT_VERSION: u32 = 1;
const PATCH_BYTES: usize = PATCH_SIDE * PATCH_SIDE * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagFileHeader {
    pub format_version: u32,
    pub canvas: Canvas,
    pub bag_count: usize,
    pub instance_counts: Vec<usize>,
    pub labels: Vec<u8>,
    pub centroids: Vec<Vec<Point>>,
    pub digits: Vec<Vec<u8>>,
    #[serde(default)]
    pub config: Option<DatasetConfig>,
}

impl BagFileHeader {
    fn describe(bags: &[Bag], canvas: Canvas, config: Option<&DatasetConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            canvas,
            bag_count: bags.len(),
            instance_counts: bags.iter().map(Bag::len).collect(),
            labels: bags.iter().map(|b| b.label).collect(),
            centroids: bags.iter().map(Bag::centroids).collect(),
            digits: bags.iter().map(|b| b.instances.iter().map(|i| i.digit).collect()).collect(),
            config: config.cloned(),
        }
    }

    fn check(&self, offset: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Format { offset, msg });
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported bag format version {}", self.format_version));
        }
        let n = self.bag_count;
        if self.instance_counts.len() != n || self.labels.len() != n || self.centroids.len() != n || self.digits.len() != n
        {
            return bad(format!("header lists disagree with bag count {n}"));
        }
        for (i, &k) in self.instance_counts.iter().enumerate() {
            if self.centroids[i].len() != k || self.digits[i].len() != k {
                return bad(format!("bag {i}: centroid or digit count differs from {k}"));
            }
        }
        Ok(())
    }
}

/// Writes `bags` to `w`; returns the CRC32 trailer.
pub fn serialize_bags<W: Write>(mut w: W, bags: &[Bag], config: Option<&DatasetConfig>) -> Result<u32> {
    let canvas = match (bags.first(), config) {
        (Some(b), _) => b.canvas,
        (None, Some(c)) => c.canvas,
        (None, None) => DatasetConfig::default().canvas,
    };
    if let Some(b) = bags.iter().find(|b| b.canvas != canvas) {
        return Err(Error::Precondition(format!("mixed canvases {:?} and {:?}", canvas, b.canvas)));
    }
    let header = serde_json::to_vec(&BagFileHeader::describe(bags, canvas, config))?;
    let mut hasher = crc32fast::Hasher::new();
    w.write_all(BAG_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    hasher.update(&header);

    let mut buf = Vec::with_capacity(PATCH_BYTES);
    for bag in bags {
        for inst in &bag.instances {
            if inst.patch.len() != PATCH_SIDE * PATCH_SIDE {
                return Err(Error::Dimension(format!("patch has {} pixels", inst.patch.len())));
            }
            buf.clear();
            for p in &inst.patch {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            hasher.update(&buf);
            w.write_all(&buf)?;
        }
    }
    let crc = hasher.finalize();
    w.write_all(&crc.to_le_bytes())?;
    Ok(crc)
}

/// Reads a bag container, verifying structure and checksum.
pub fn deserialize_bags<R: Read>(mut r: R) -> Result<(BagFileHeader, Vec<Bag>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let fmt = |offset: usize, msg: &str| Error::Format { offset, msg: msg.to_string() };

    if bytes.len() < 16 {
        return Err(fmt(bytes.len(), "file too short for magic and header length"));
    }
    if &bytes[..8] != BAG_MAGIC {
        return Err(fmt(0, "bad magic, expected DASMIL01"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(8, "header length runs past end of file"))?;
    let header: BagFileHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| fmt(16, &format!("header JSON: {e}")))?;
    header.check(16)?;

    let total: usize = header.instance_counts.iter().sum();
    let payload_end = header_end + total * PATCH_BYTES;
    if bytes.len() < payload_end + 4 {
        return Err(fmt(bytes.len(), "truncated patch payload or checksum"));
    }
    if bytes.len() > payload_end + 4 {
        return Err(fmt(payload_end + 4, "trailing bytes after checksum"));
    }
    let expected = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[16..payload_end]);
    if expected != actual {
        return Err(Error::Checksum { expected, actual });
    }

    let mut patches = bytes[header_end..payload_end].chunks_exact(PATCH_BYTES).map(|c| {
        c.chunks_exact(4)
            .map(|f| f32::from_le_bytes(f.try_into().unwrap()))
            .collect::<Vec<f32>>()
    });
    let bags = (0..header.bag_count)
        .map(|i| Bag {
            instances: (0..header.instance_counts[i])
                .map(|j| Instance {
                    patch: patches.next().expect("payload length checked"),
                    centroid: header.centroids[i][j],
                    digit: header.digits[i][j],
                })
                .collect(),
            label: header.labels[i],
            canvas: header.canvas,
        })
        .collect();
    Ok((header, bags))
}

pub fn write_bags(path: &Path, bags: &[Bag], config: Option<&DatasetConfig>) -> Result<u32> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let crc = serialize_bags(&mut w, bags, config)?;
    w.flush()?;
    Ok(crc)
}

pub fn read_bags(path: &Path) -> Result<(BagFileHeader, Vec<Bag>)> {
    deserialize_bags(std::io::BufReader::new(std::fs::File::open(path)?))
}
