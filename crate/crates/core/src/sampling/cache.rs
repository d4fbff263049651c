//! Binary sample cache: `"DSDF"`, version `u32`, strategy `u8`, count `u64`,
//! then `count` records of four little-endian `f32` (x, y, z, sdf).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{SamplingStrategy, SdfSample, SdfSampleSet};
use crate::error::{Error, Result};
use crate::geometry::Point3;

const MAGIC: &[u8; 4] = b"DSDF";
const VERSION: u32 = 1;

pub fn write_sample_cache<W: Write>(set: &SdfSampleSet, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(17 + set.samples.len() * 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(set.strategy.code());
    buf.extend_from_slice(&(set.samples.len() as u64).to_le_bytes());
    for s in &set.samples {
        for v in [s.point.x, s.point.y, s.point.z, s.sdf] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_sample_cache<R: Read>(mut r: R, shape_id: &str) -> Result<SdfSampleSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading sample cache: {e}")))?;
    if bytes.len() < 17 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DSDF header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let strategy = SamplingStrategy::from_code(bytes[8])?;
    let count = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let body = &bytes[17..];
    if body.len() != count * 16 {
        return Err(Error::Format(format!(
            "cache declares {count} records but holds {} bytes",
            body.len()
        )));
    }
    if count == 0 {
        return Err(Error::Format("empty sample cache".into()));
    }
    let samples = body
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            SdfSample {
                point: Point3::new(f(0), f(1), f(2)),
                sdf: f(3),
            }
        })
        .collect();
    Ok(SdfSampleSet {
        shape_id: shape_id.to_string(),
        strategy,
        samples,
    })
}

pub fn write_sample_cache_file(set: &SdfSampleSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sample_cache(set, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sample_cache_file(path: &Path, shape_id: &str) -> Result<SdfSampleSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sample_cache(std::io::BufReader::new(file), shape_id)
}
