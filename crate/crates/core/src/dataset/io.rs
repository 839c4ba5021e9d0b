//! Dataset binary format ("MXDS") and a flat-vector CSV importer.
//!
//! MXDS layout: magic `MXDS`, u32 LE version, u32 LE n/channels/height/width/
//! num_classes, n*c*h*w little-endian f64 pixels in `[0, 1]`, n little-endian
//! u32 labels, u32 LE CRC32 over pixels and labels. Split boundaries are not
//! stored; callers re-derive them from configuration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MXDS";
pub const DATASET_VERSION: u32 = 1;

/// Writes the dataset in MXDS format. Samples go out in canonical order, so
/// a round trip under the same split fractions reproduces the dataset.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let shape = dataset.sample_shape();
    if shape.len() != 3 {
        return Err(Error::InvalidDataset(format!(
            "MXDS stores [channels, height, width] samples, got {shape:?}"
        )));
    }

    let mut body = Vec::new();
    for s in dataset.samples() {
        for &v in s.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &y in dataset.labels() {
        body.extend_from_slice(&(y as u32).to_le_bytes());
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&body);
    let crc = hasher.finalize();

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [
        dataset.len() as u32,
        shape[0] as u32,
        shape[1] as u32,
        shape[2] as u32,
        dataset.num_classes() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&body)?;
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads an MXDS file, validating bounds, labels, and the checksum. Splits
/// are assigned from the given fractions.
pub fn load_dataset(path: &Path, train_fraction: f64, holdout_fraction: f64) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic("MXDS"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "MXDS",
            version,
        });
    }
    let n = read_u32(&mut r, "sample count")? as usize;
    let c = read_u32(&mut r, "channels")? as usize;
    let h = read_u32(&mut r, "height")? as usize;
    let w = read_u32(&mut r, "width")? as usize;
    let m = read_u32(&mut r, "class count")? as usize;

    let pixels = n * c * h * w;
    let mut body = vec![0u8; pixels * 8 + n * 4];
    read_exact(&mut r, &mut body, "payload")?;
    let stored_crc = read_u32(&mut r, "checksum")?;
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&body);
    if hasher.finalize() != stored_crc {
        return Err(Error::ChecksumMismatch);
    }

    let shape = vec![c, h, w];
    let per_sample = c * h * w;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(per_sample);
        for j in 0..per_sample {
            let off = (i * per_sample + j) * 8;
            let mut b = [0u8; 8];
            b.copy_from_slice(&body[off..off + 8]);
            let v = f64::from_le_bytes(b);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidDataset(format!(
                    "pixel {v} outside [0, 1] in sample {i}"
                )));
            }
            data.push(v);
        }
        samples.push(Tensor::new(shape.clone(), data)?);
    }
    let labels_off = pixels * 8;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = labels_off + i * 4;
        let mut b = [0u8; 4];
        b.copy_from_slice(&body[off..off + 4]);
        labels.push(u32::from_le_bytes(b) as usize);
    }

    let splits = Splits::contiguous(n, train_fraction, holdout_fraction)?;
    Dataset::new(shape, m, samples, labels, splits)
}

/// Imports a flat-vector CSV (`label,v0,v1,...`) as a dataset of shape
/// `[1, 1, d]`. Intended for bringing in externally converted data.
pub fn import_csv(
    path: &Path,
    num_classes: usize,
    train_fraction: f64,
    holdout_fraction: f64,
) -> Result<Dataset> {
    let r = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .ok_or_else(|| Error::InvalidDataset(format!("line {lineno}: empty")))?
            .trim()
            .parse()
            .map_err(|e| Error::InvalidDataset(format!("line {lineno}: bad label: {e}")))?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| Error::InvalidDataset(format!("line {lineno}: bad value: {e}")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::InvalidDataset(format!(
                    "line {lineno}: {} values, expected {d}",
                    values.len()
                )));
            }
            _ => {}
        }
        samples.push(Tensor::new(vec![1, 1, values.len()], values)?);
        labels.push(label);
    }
    let n = samples.len();
    let d = dim.ok_or_else(|| Error::InvalidDataset("empty CSV".into()))?;
    let splits = Splits::contiguous(n, train_fraction, holdout_fraction)?;
    Dataset::new(vec![1, 1, d], num_classes, samples, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, SyntheticSpec};
    use std::fs;

    fn small_dataset() -> Dataset {
        gen_synthetic(&SyntheticSpec {
            num_samples: 24,
            shape: vec![1, 4, 4],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mxds");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path, 0.8, 0.1).unwrap();
        assert_eq!(ds.len(), loaded.len());
        assert_eq!(ds.labels(), loaded.labels());
        for (a, b) in ds.samples().iter().zip(loaded.samples()) {
            assert_eq!(a.data(), b.data());
        }
        // Save-load-save produces identical bytes.
        let path2 = dir.path().join("data2.mxds");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mxds");
        save_dataset(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_dataset(&path, 0.8, 0.1),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mxds");
        save_dataset(&ds, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // First pixel starts after the 28-byte header; CRC must be patched to
        // isolate the bounds check.
        let header = 28;
        bytes[header..header + 8].copy_from_slice(&2.5f64.to_le_bytes());
        let body_len = bytes.len() - header - 4;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[header..header + body_len]);
        let crc = hasher.finalize();
        let crc_off = bytes.len() - 4;
        bytes[crc_off..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path, 0.8, 0.1),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mxds");
        fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            load_dataset(&path, 0.8, 0.1),
            Err(Error::BadMagic(_))
        ));
    }

    #[test]
    fn csv_importer_reads_flat_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        fs::write(&path, "0,0.1,0.2,0.3\n1,0.9,0.8,0.7\n").unwrap();
        let ds = import_csv(&path, 2, 0.5, 0.0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 1, 3]);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.samples()[1].data(), &[0.9, 0.8, 0.7]);
    }
}
