//! Embedding corpora on disk.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! magic    4 bytes  "DI2W"
//! version  u16      1
//! d        u32      embedding dimension
//! count    u32      number of records
//! records  count × {
//!     id_len u32, id utf-8 bytes,
//!     width u32, height u32,
//!     image embedding        d × f32,
//!     n_crops u32, n_crops × { x u32, y u32, w u32, h u32, d × f32 },
//!     n_tokens u32, n_tokens × u32,
//!     caption embedding      d × f32,
//! }
//! ```
//!
//! Each record pairs one image with its caption. The JSON-lines manifest sidecar
//! carries `{"id", "caption", "tokens"}` per record so captions stay readable.
//! Embeddings are held as `f64` in memory and persisted as `f32`; values that are
//! already `f32`-representable round-trip bit-exactly.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::ptc::CropBox;

pub const STORE_MAGIC: [u8; 4] = *b"DI2W";
pub const STORE_VERSION: u16 = 1;
/// Default embedding width (CLIP ViT-L/14 joint space).
pub const DEFAULT_DIM: usize = 768;
pub const MIN_DIM: usize = 8;

/// A finite real vector. All pipeline stages exchange these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Rounds every component through `f32`, the on-disk precision.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }

    pub fn normalized(&self) -> Result<Self> {
        l2_normalize(self)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Scales `v` to unit L2 norm. Zero vectors are rejected rather than turned
/// into NaNs.
pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    normalize_slice(v.values()).map(Embedding)
}

pub fn normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropCandidate {
    pub bbox: CropBox,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub embedding: Embedding,
    pub crop_candidates: Vec<CropCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub tokens: Vec<u32>,
    /// Sentence-level (`[CLS]`-role) text embedding of the caption.
    pub sentence_embedding: Embedding,
}

/// One image with its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub image: ImageRecord,
    pub caption: CaptionRecord,
}

impl StoreRecord {
    /// Checks dimensions, geometry and caption linkage. `crop_min`, when given,
    /// additionally enforces that images carrying crops are at least
    /// `2 · crop_min` on each side.
    pub fn validate(&self, d: usize, crop_min: Option<u32>) -> Result<()> {
        let img = &self.image;
        check_dim(&img.embedding, d, "image embedding")?;
        check_dim(&self.caption.sentence_embedding, d, "caption embedding")?;
        if self.caption.image_id != img.id {
            return Err(Error::UnknownImage(self.caption.image_id.clone()));
        }
        if self.caption.tokens.is_empty() {
            return Err(Error::Empty("caption tokens"));
        }
        if let (Some(min), false) = (crop_min, img.crop_candidates.is_empty()) {
            if img.width < 2 * min || img.height < 2 * min {
                return Err(Error::InfeasibleCrop(format!(
                    "image `{}` is {}x{}, below 2x crop_min={min}",
                    img.id, img.width, img.height
                )));
            }
        }
        for c in &img.crop_candidates {
            check_dim(&c.embedding, d, "crop embedding")?;
            if !c.bbox.fits_within(img.width, img.height) {
                return Err(Error::OutOfBounds(c.bbox.to_string()));
            }
        }
        Ok(())
    }
}

fn check_dim(e: &Embedding, d: usize, context: &'static str) -> Result<()> {
    if e.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: e.dim(),
            context,
        });
    }
    Ok(())
}

/// Validated, immutable collection of records sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Store {
    d: usize,
    records: Vec<StoreRecord>,
}

impl Store {
    pub fn new(d: usize, records: Vec<StoreRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(d, None)?;
            if !seen.insert(r.image.id.as_str()) {
                return Err(Error::DuplicateId(r.image.id.clone()));
            }
        }
        Ok(Self { d, records })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<StoreRecord> {
        self.records
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.image.id == id)
    }
}

/// Infers `d` from the first record; an empty list needs an explicit `d`.
pub fn write_store(records: &[StoreRecord], d: usize, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_store(records, d)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Store> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

pub fn encode_store(records: &[StoreRecord], d: usize) -> Result<Vec<u8>> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate(d, None)?;
        if !seen.insert(r.image.id.as_str()) {
            return Err(Error::DuplicateId(r.image.id.clone()));
        }
    }
    let mut out = Vec::with_capacity(14 + records.len() * (64 + 8 * d));
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    put_u32(&mut out, d, "dimension")?;
    put_u32(&mut out, records.len(), "record count")?;
    for r in records {
        let img = &r.image;
        put_u32(&mut out, img.id.len(), "id length")?;
        out.extend_from_slice(img.id.as_bytes());
        out.extend_from_slice(&img.width.to_le_bytes());
        out.extend_from_slice(&img.height.to_le_bytes());
        put_embedding(&mut out, &img.embedding, &img.id)?;
        put_u32(&mut out, img.crop_candidates.len(), "crop count")?;
        for c in &img.crop_candidates {
            for v in [c.bbox.x, c.bbox.y, c.bbox.w, c.bbox.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_embedding(&mut out, &c.embedding, &img.id)?;
        }
        put_u32(&mut out, r.caption.tokens.len(), "token count")?;
        for t in &r.caption.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        put_embedding(&mut out, &r.caption.sentence_embedding, &img.id)?;
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_embedding(out: &mut Vec<u8>, e: &Embedding, id: &str) -> Result<()> {
    for &v in e.values() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("record `{id}` (overflows f32)")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(v)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn embedding(&mut self, d: usize, what: &str) -> Result<Embedding> {
        let raw = self.take(4 * d, what)?;
        let mut values = Vec::with_capacity(d);
        for chunk in raw.chunks_exact(4) {
            let f = f32::from_le_bytes(chunk.try_into().unwrap());
            if !f.is_finite() {
                return Err(Error::NonFinite(what.to_string()));
            }
            values.push(f64::from(f));
        }
        Ok(Embedding(values))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<Store> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != STORE_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: STORE_MAGIC,
        });
    }
    let version = cur.u16("version")?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d = cur.u32("dimension")? as usize;
    let count = cur.u32("record count")? as usize;
    // Every record needs at least 24 bytes of fixed fields; reject absurd counts
    // before allocating.
    if count > bytes.len() / 24 + 1 {
        return Err(Error::Truncated(format!("header declares {count} records")));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id_len = cur.u32("id length")? as usize;
        let id = String::from_utf8(cur.take(id_len, "id")?.to_vec())
            .map_err(|_| Error::InvalidConfig(format!("record {i}: id is not utf-8")))?;
        let width = cur.u32("width")?;
        let height = cur.u32("height")?;
        let embedding = cur.embedding(d, "image embedding")?;
        let n_crops = cur.u32("crop count")? as usize;
        let mut crop_candidates = Vec::with_capacity(n_crops.min(1024));
        for _ in 0..n_crops {
            let x = cur.u32("crop x")?;
            let y = cur.u32("crop y")?;
            let w = cur.u32("crop w")?;
            let h = cur.u32("crop h")?;
            let embedding = cur.embedding(d, "crop embedding")?;
            crop_candidates.push(CropCandidate {
                bbox: CropBox { x, y, w, h },
                embedding,
            });
        }
        let n_tokens = cur.u32("token count")? as usize;
        let raw = cur.take(4 * n_tokens, "tokens")?;
        let tokens = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sentence_embedding = cur.embedding(d, "caption embedding")?;
        records.push(StoreRecord {
            caption: CaptionRecord {
                image_id: id.clone(),
                tokens,
                sentence_embedding,
            },
            image: ImageRecord {
                id,
                width,
                height,
                embedding,
                crop_candidates,
            },
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after {count} declared records",
            bytes.len() - cur.pos
        )));
    }
    Store::new(d, records)
}

/// One line of the JSON-lines manifest sidecar.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub caption: String,
    pub tokens: Vec<u32>,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    write_jsonl(path, entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::from_f32(v).unwrap()
    }

    fn record(id: &str, d: usize, seed: f32) -> StoreRecord {
        let e = |k: f32| emb(&(0..d).map(|i| seed + k + i as f32 * 0.25).collect::<Vec<_>>());
        StoreRecord {
            image: ImageRecord {
                id: id.into(),
                width: 224,
                height: 224,
                embedding: e(0.0),
                crop_candidates: vec![CropCandidate {
                    bbox: CropBox {
                        x: 0,
                        y: 0,
                        w: 40,
                        h: 33,
                    },
                    embedding: e(1.5),
                }],
            },
            caption: CaptionRecord {
                image_id: id.into(),
                tokens: vec![3, 1, 4],
                sentence_embedding: e(-2.0),
            },
        }
    }

    #[test]
    fn empty_store_is_header_only() {
        let bytes = encode_store(&[], 16).unwrap();
        assert_eq!(bytes.len(), 14);
        let store = decode_store(&bytes).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(store.dim(), 16);
    }

    #[test]
    fn two_records_round_trip_bitwise() {
        let recs = vec![record("a", 4, 0.1), record("b", 4, -7.3)];
        let bytes = encode_store(&recs, 4).unwrap();
        let back = decode_store(&bytes).unwrap();
        assert_eq!(back.records(), &recs[..]);
        assert_eq!(encode_store(back.records(), 4).unwrap(), bytes);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let recs = vec![record("a", 4, 0.0), record("b", 8, 0.0)];
        assert!(matches!(encode_store(&recs, 4), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![record("a", 4, 0.0), record("a", 4, 1.0)];
        assert!(matches!(encode_store(&recs, 4), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_store(&[record("a", 4, 0.0)], 4).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_store(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_store(&bad), Err(Error::UnsupportedVersion(9))));

        assert!(matches!(
            decode_store(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));

        let mut bad = bytes.clone();
        let off = 14 + 4 + 1 + 8; // first image embedding value
        bad[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_store(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let mut r = record("a", 4, 0.0);
        r.image.embedding = Embedding(vec![0.0, f64::INFINITY, 0.0, 0.0]);
        assert!(matches!(encode_store(&[r], 4), Err(Error::NonFinite(_))));
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn crop_outside_image_rejected() {
        let mut r = record("a", 4, 0.0);
        r.image.crop_candidates[0].bbox.x = 200;
        assert!(matches!(encode_store(&[r], 4), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn normalize_cases() {
        let v = l2_normalize(&Embedding::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
        let e1 = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&e1).unwrap(), e1);
        assert!(matches!(l2_normalize(&Embedding::zeros(2)), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![ManifestEntry {
            id: "img0".into(),
            caption: "cartoon dog".into(),
            tokens: vec![9, 12],
        }];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite_f32() -> impl Strategy<Value = f32> {
            -1e6f32..1e6f32
        }

        proptest! {
            #[test]
            fn normalize_is_unit_and_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
                prop_assume!(norm(&v) > 1e-9);
                let e = Embedding::new(v).unwrap();
                let n1 = l2_normalize(&e).unwrap();
                prop_assert!((n1.norm() - 1.0).abs() < 1e-12);
                let n2 = l2_normalize(&n1).unwrap();
                for (a, b) in n1.values().iter().zip(n2.values()) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }

            #[test]
            fn store_round_trip(
                d in 1usize..12,
                vals in prop::collection::vec(finite_f32(), 3 * 12 * 4),
                n in 0usize..4,
            ) {
                let recs: Vec<StoreRecord> = (0..n).map(|i| {
                    let e = |k: usize| emb(&vals[(i * 3 + k) * 12..(i * 3 + k) * 12 + d]);
                    StoreRecord {
                        image: ImageRecord {
                            id: format!("img{i}"), width: 100, height: 80,
                            embedding: e(0),
                            crop_candidates: vec![CropCandidate {
                                bbox: CropBox { x: 1, y: 2, w: 32, h: 40 }, embedding: e(1) }],
                        },
                        caption: CaptionRecord {
                            image_id: format!("img{i}"), tokens: vec![i as u32 + 1],
                            sentence_embedding: e(2),
                        },
                    }
                }).collect();
                let bytes = encode_store(&recs, d).unwrap();
                let back = decode_store(&bytes).unwrap();
                prop_assert_eq!(back.records(), &recs[..]);
            }
        }
    }
}
