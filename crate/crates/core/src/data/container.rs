//! The `ZDC1` dataset container.
//!
//! ```text
//! "ZDC1"                      4 bytes
//! header length               u64 LE
//! header                      UTF-8 JSON (see `Header`)
//! features                    n × 9 f32 LE, row-major
//! images                      n × H × W u16 LE, row-major
//! checksum                    u64 LE, XXH64 (seed 0) of every preceding byte
//! ```
//!
//! Offsets in the header are relative to the first byte after the header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::Detector;
use crate::{Error, Result};

pub const NUM_FEATURES: usize = 9;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["E", "vx", "vy", "vz", "px", "py", "pz", "m", "q"];
const MAGIC: &[u8; 4] = b"ZDC1";

/// Conditioning vector of one primary particle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticleFeatures {
    /// Energy (GeV).
    pub e: f32,
    pub vx: f32,
    pub vy: f32,
    pub vz: f32,
    pub px: f32,
    pub py: f32,
    pub pz: f32,
    /// Mass (GeV), discrete.
    pub m: f32,
    /// Charge (elementary units), discrete.
    pub q: f32,
}

impl ParticleFeatures {
    pub fn to_array(&self) -> [f32; NUM_FEATURES] {
        [self.e, self.vx, self.vy, self.vz, self.px, self.py, self.pz, self.m, self.q]
    }

    pub fn from_array(a: [f32; NUM_FEATURES]) -> Self {
        let [e, vx, vy, vz, px, py, pz, m, q] = a;
        Self { e, vx, vy, vz, px, py, pz, m, q }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite particle feature".into()));
        }
        if self.e < 0.0 || self.m < 0.0 {
            return Err(Error::Format(format!("negative energy or mass in {self:?}")));
        }
        Ok(())
    }

    /// Bit pattern used for exact equality (e.g. counting unique particles).
    pub fn key(&self) -> [u32; NUM_FEATURES] {
        self.to_array().map(f32::to_bits)
    }
}

/// One detector response: photon counts per fiber.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShowerImage {
    pub detector: Detector,
    pub pixels: Vec<u16>,
}

impl ShowerImage {
    pub fn new(detector: Detector, pixels: Vec<u16>) -> Result<Self> {
        if pixels.len() != detector.pixels() {
            return Err(Error::shape(
                "shower_image",
                format!("{} pixels for {detector} ({}x{})", pixels.len(), detector.height(), detector.width()),
            ));
        }
        Ok(Self { detector, pixels })
    }

    pub fn total(&self) -> u64 {
        self.pixels.iter().map(|&p| p as u64).sum()
    }
}

/// Particle features with their detector responses.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    detector: Detector,
    features: Vec<ParticleFeatures>,
    images: Vec<u16>,
}

impl Dataset {
    pub fn new(detector: Detector, features: Vec<ParticleFeatures>, images: Vec<u16>) -> Result<Self> {
        if images.len() != features.len() * detector.pixels() {
            return Err(Error::shape(
                "dataset",
                format!("{} features but {} pixels for {detector}", features.len(), images.len()),
            ));
        }
        for f in &features {
            f.validate()?;
        }
        Ok(Self { detector, features, images })
    }

    pub fn detector(&self) -> Detector {
        self.detector
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[ParticleFeatures] {
        &self.features
    }

    pub fn image(&self, i: usize) -> &[u16] {
        let p = self.detector.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn shower(&self, i: usize) -> ShowerImage {
        ShowerImage {
            detector: self.detector,
            pixels: self.image(i).to_vec(),
        }
    }

    pub fn images(&self) -> &[u16] {
        &self.images
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.detector.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            detector: self.detector,
            features: indices.iter().map(|&i| self.features[i]).collect(),
            images,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    detector: Detector,
    n: usize,
    height: usize,
    width: usize,
    feature_names: Vec<String>,
    feature_dtype: String,
    image_dtype: String,
    features_offset: u64,
    images_offset: u64,
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = ds.detector.dims();
    let header = Header {
        detector: ds.detector,
        n: ds.len(),
        height: h,
        width: w,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_dtype: "f32le".into(),
        image_dtype: "u16le".into(),
        features_offset: 0,
        images_offset: (ds.len() * NUM_FEATURES * 4) as u64,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + ds.len() * NUM_FEATURES * 4 + ds.images.len() * 2 + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for f in &ds.features {
        for v in f.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in &ds.images {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = xxh64(&buf, 0);
    buf.extend_from_slice(&digest.to_le_bytes());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 + 8 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing ZDC1 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = 12usize
        .checked_add(hlen)
        .filter(|&b| b + 8 <= bytes.len())
        .ok_or_else(|| Error::Integrity("header extends past end of file".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.feature_dtype != "f32le" || header.image_dtype != "u16le" {
        return Err(Error::Format(format!(
            "unsupported dtypes {}/{}",
            header.feature_dtype, header.image_dtype
        )));
    }
    if header.feature_names.len() != NUM_FEATURES {
        return Err(Error::Format(format!("expected {NUM_FEATURES} features, header lists {}", header.feature_names.len())));
    }
    if (header.height, header.width) != header.detector.dims() {
        return Err(Error::shape(
            "load_dataset",
            format!(
                "{} images must be {}x{}, header says {}x{}",
                header.detector,
                header.detector.height(),
                header.detector.width(),
                header.height,
                header.width
            ),
        ));
    }
    let n = header.n;
    let feat_len = n * NUM_FEATURES * 4;
    let img_len = n * header.height * header.width * 2;
    let payload = bytes.len() - body - 8;
    if header.features_offset as usize + feat_len > payload || header.images_offset as usize + img_len > payload {
        return Err(Error::Integrity(format!("payload of {payload} bytes too short for {n} records")));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if xxh64(&bytes[..bytes.len() - 8], 0) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let fbytes = &bytes[body + header.features_offset as usize..][..feat_len];
    let features = fbytes
        .chunks_exact(NUM_FEATURES * 4)
        .map(|row| {
            let mut a = [0f32; NUM_FEATURES];
            for (v, c) in a.iter_mut().zip(row.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
            ParticleFeatures::from_array(a)
        })
        .collect();
    let ibytes = &bytes[body + header.images_offset as usize..][..img_len];
    let images = ibytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Dataset::new(header.detector, features, images)
}
