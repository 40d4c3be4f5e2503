//! Dataset archive: a directory holding `meta.json`, `labels.csv` and
//! `images.bin`.
//!
//! `images.bin` layout (little-endian):
//!
//! ```text
//! magic   8 bytes "FLIMG001"
//! n, h, w u32 each
//! pixels  n*h*w f32, row-major
//! crc     u32 CRC32 of the pixel bytes
//! ```

use std::path::Path;

use super::dataset::{LabeledDataset, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::io::{self, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FLIMG001";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.json";

pub fn encode_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, h, w) = match images.shape() {
        &[n, 1, h, w] | &[n, h, w] => (n, h, w),
        other => {
            return Err(Error::contract(format!("cannot archive images of shape {other:?}")));
        }
    };
    let mut out = Vec::with_capacity(24 + images.numel() * 4);
    out.extend_from_slice(MAGIC);
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    for v in images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes to `[n, 1, h, w]`.
pub fn decode_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, "image archive");
    if r.take(8)? != MAGIC {
        return Err(Error::Corrupt("not an FLIMG001 image file".into()));
    }
    let (n, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let numel = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Corrupt("image dims overflow".into()))?;
    if r.remaining() != numel * 4 + 4 {
        return Err(Error::Corrupt(format!(
            "image payload holds {} bytes, header needs {}",
            r.remaining().saturating_sub(4),
            numel * 4
        )));
    }
    let payload = r.take(numel * 4)?;
    let stored = r.u32()?;
    if crc32fast::hash(payload) != stored {
        return Err(Error::Corrupt("image payload CRC mismatch".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![n, 1, h, w], data).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn encode_labels(dataset: &LabeledDataset) -> String {
    let mut csv = format!("patient_id,image_index,{},{}\n", LABEL_NAMES[0], LABEL_NAMES[1]);
    for (i, (p, l)) in dataset.patient_ids().iter().zip(dataset.labels()).enumerate() {
        csv.push_str(&format!("{p},{i},{},{}\n", l[0] as u8, l[1] as u8));
    }
    csv
}

pub fn decode_labels(text: &str) -> Result<(Vec<String>, Vec<[bool; 2]>)> {
    let mut lines = text.lines();
    let header = format!("patient_id,image_index,{},{}", LABEL_NAMES[0], LABEL_NAMES[1]);
    if lines.next() != Some(header.as_str()) {
        return Err(Error::Parse("labels.csv header mismatch".into()));
    }
    let bit = |s: &str, line: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse(format!("labels.csv line {line}: bad label `{other}`"))),
    };
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let lineno = k + 2;
        if fields.len() != 4 {
            return Err(Error::Parse(format!("labels.csv line {lineno}: expected 4 fields")));
        }
        if fields[1].parse::<usize>().ok() != Some(k) {
            return Err(Error::Parse(format!("labels.csv line {lineno}: image_index out of order")));
        }
        ids.push(fields[0].to_string());
        labels.push([bit(fields[2], lineno)?, bit(fields[3], lineno)?]);
    }
    Ok((ids, labels))
}

pub fn write_archive(dir: &Path, dataset: &LabeledDataset, meta: &serde_json::Value) -> Result<()> {
    let meta = serde_json::to_string_pretty(meta).map_err(|e| Error::contract(e.to_string()))?;
    io::write_atomic(&dir.join(IMAGES_FILE), &encode_images(dataset.images())?)?;
    io::write_atomic(&dir.join(LABELS_FILE), encode_labels(dataset).as_bytes())?;
    io::write_atomic(&dir.join(META_FILE), format!("{meta}\n").as_bytes())
}

pub fn read_archive(dir: &Path) -> Result<(LabeledDataset, serde_json::Value)> {
    let images = decode_images(&io::read(&dir.join(IMAGES_FILE))?)?;
    let labels_path = dir.join(LABELS_FILE);
    let text = String::from_utf8(io::read(&labels_path)?)
        .map_err(|_| Error::Parse(format!("{} is not UTF-8", labels_path.display())))?;
    let (ids, labels) = decode_labels(&text)?;
    let meta_path = dir.join(META_FILE);
    let meta: serde_json::Value = serde_json::from_slice(&io::read(&meta_path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", meta_path.display())))?;
    let dataset = LabeledDataset::new(images, labels, ids).map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((dataset, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_and_corruption() {
        let t = Tensor::from_fn(&[3, 1, 2, 2], |i| i as f32 * 0.37 - 1.0);
        let mut bytes = encode_images(&t).unwrap();
        assert_eq!(decode_images(&bytes).unwrap(), t);
        bytes[30] ^= 1;
        assert!(matches!(decode_images(&bytes), Err(Error::Corrupt(_))));
        assert!(decode_images(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let ds = LabeledDataset::new(
            Tensor::zeros(&[3, 1, 1, 1]),
            vec![[true, false], [false, true], [false, false]],
            vec!["a".into(), "a".into(), "b".into()],
        )
        .unwrap();
        let (ids, labels) = decode_labels(&encode_labels(&ds)).unwrap();
        assert_eq!(ids, ds.patient_ids());
        assert_eq!(labels, ds.labels());
    }
}
