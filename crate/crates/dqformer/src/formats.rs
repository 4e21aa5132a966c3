//! Little-endian binary formats for labeled clouds (DQPC) and panoptic
//! predictions (DQPR).
//!
//! Both start with a 16-byte header: magic, `u32` version, `u32` point count,
//! `u16` thing and `u16` stuff class counts. DQPC continues with one 22-byte
//! record per point (`f32` x, y, z, intensity, `u16` semantic, `u32`
//! instance). DQPR repeats the DQPC records, then holds `N_p` predicted
//! instance ids (`u32`) followed by `N_p` predicted classes (`u16`).

use std::path::Path;

use dqformer_core::cloud::LabeledPointCloud;
use dqformer_core::panoptic::PanopticLabeling;

use crate::error::{read_file, write_file, Error, Result};

pub const CLOUD_MAGIC: [u8; 4] = *b"DQPC";
pub const PREDICTION_MAGIC: [u8; 4] = *b"DQPR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize = 22;

/// A cloud with its predicted panoptic labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub cloud: LabeledPointCloud,
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
}

impl Prediction {
    pub fn labeling(&self) -> PanopticLabeling {
        PanopticLabeling {
            semantic: self.semantic.clone(),
            instance: self.instance.clone(),
            winner: vec![-1; self.semantic.len()],
            score: vec![0.0; self.semantic.len()],
        }
    }
}

fn validation(path: &Path, e: dqformer_core::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

fn encode_header(out: &mut Vec<u8>, magic: [u8; 4], cloud: &LabeledPointCloud) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&cloud.n_thing_classes.to_le_bytes());
    out.extend_from_slice(&cloud.n_stuff_classes.to_le_bytes());
}

fn encode_records(out: &mut Vec<u8>, cloud: &LabeledPointCloud) {
    for i in 0..cloud.len() {
        for v in cloud.positions[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&cloud.intensity[i].to_le_bytes());
        out.extend_from_slice(&cloud.semantic[i].to_le_bytes());
        out.extend_from_slice(&cloud.instance[i].to_le_bytes());
    }
}

/// DQPC bytes of a validated cloud.
pub fn encode_cloud(cloud: &LabeledPointCloud) -> dqformer_core::Result<Vec<u8>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(HEADER_BYTES + cloud.len() * RECORD_BYTES);
    encode_header(&mut out, CLOUD_MAGIC, cloud);
    encode_records(&mut out, cloud);
    Ok(out)
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos,
                format!("truncated: needed {n} more bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the header and checks that the file holds exactly `body(n)` more bytes.
fn decode_header<'a>(
    bytes: &'a [u8],
    path: &'a Path,
    magic: [u8; 4],
    body: impl Fn(usize) -> usize,
) -> Result<(Reader<'a>, LabeledPointCloud)> {
    let mut r = Reader { bytes, pos: 0, path };
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::format(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let n_things = r.u16()?;
    let n_stuff = r.u16()?;
    let expected = HEADER_BYTES + body(n);
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected),
            format!("expected {expected} bytes for {n} points, found {}", bytes.len()),
        ));
    }
    let cloud = LabeledPointCloud {
        positions: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
        semantic: Vec::with_capacity(n),
        instance: Vec::with_capacity(n),
        n_thing_classes: n_things,
        n_stuff_classes: n_stuff,
    };
    Ok((r, cloud))
}

fn decode_records(r: &mut Reader<'_>, cloud: &mut LabeledPointCloud, n: usize) -> Result<()> {
    for _ in 0..n {
        let p = [r.f32()?, r.f32()?, r.f32()?];
        cloud.positions.push(p);
        cloud.intensity.push(r.f32()?);
        cloud.semantic.push(r.u16()?);
        cloud.instance.push(r.u32()?);
    }
    Ok(())
}

fn point_count(bytes: &[u8]) -> usize {
    bytes
        .get(8..12)
        .map_or(0, |b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
}

/// Parses DQPC bytes; `path` only labels errors.
pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<LabeledPointCloud> {
    let (mut r, mut cloud) = decode_header(bytes, path, CLOUD_MAGIC, |n| n * RECORD_BYTES)?;
    decode_records(&mut r, &mut cloud, point_count(bytes))?;
    cloud.validate().map_err(|e| validation(path, e))?;
    Ok(cloud)
}

pub fn write_cloud(cloud: &LabeledPointCloud, path: &Path) -> Result<()> {
    let bytes = encode_cloud(cloud).map_err(|e| validation(path, e))?;
    write_file(path, &bytes)
}

pub fn read_cloud(path: &Path) -> Result<LabeledPointCloud> {
    decode_cloud(&read_file(path)?, path)
}

pub fn encode_prediction(p: &Prediction) -> dqformer_core::Result<Vec<u8>> {
    p.cloud.validate()?;
    let n = p.cloud.len();
    if p.semantic.len() != n || p.instance.len() != n {
        return Err(dqformer_core::Error::Contract(format!(
            "prediction has {} / {} labels for {n} points",
            p.semantic.len(),
            p.instance.len()
        )));
    }
    p.labeling().validate(p.cloud.n_thing_classes)?;
    let mut out = Vec::with_capacity(HEADER_BYTES + n * (RECORD_BYTES + 6));
    encode_header(&mut out, PREDICTION_MAGIC, &p.cloud);
    encode_records(&mut out, &p.cloud);
    for &i in &p.instance {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &s in &p.semantic {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_prediction(bytes: &[u8], path: &Path) -> Result<Prediction> {
    let (mut r, mut cloud) = decode_header(bytes, path, PREDICTION_MAGIC, |n| n * (RECORD_BYTES + 6))?;
    let n = point_count(bytes);
    decode_records(&mut r, &mut cloud, n)?;
    let instance = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let semantic = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    cloud.validate().map_err(|e| validation(path, e))?;
    let p = Prediction {
        cloud,
        semantic,
        instance,
    };
    if let Some(&s) = p.semantic.iter().find(|&&s| s >= p.cloud.n_classes()) {
        return Err(Error::Validation(format!("{}: predicted class {s} out of range", path.display())));
    }
    p.labeling()
        .validate(p.cloud.n_thing_classes)
        .map_err(|e| validation(path, e))?;
    Ok(p)
}

pub fn write_prediction(p: &Prediction, path: &Path) -> Result<()> {
    let bytes = encode_prediction(p).map_err(|e| validation(path, e))?;
    write_file(path, &bytes)
}

pub fn read_prediction(path: &Path) -> Result<Prediction> {
    decode_prediction(&read_file(path)?, path)
}
