//! CSV and raw binary ingestion of labeled samples.
//!
//! Binary layout (all little-endian): magic `APRD`, `u32` version, `u32`
//! rows, `u32` cols, `rows * cols` `f64` values (row-major), `rows` `u32`
//! labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LabeledSet, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARY_MAGIC: &[u8; 4] = b"APRD";
pub const BINARY_VERSION: u32 = 1;

/// Reads `label,f0,...,f{D-1}` rows.
pub fn read_csv(path: &Path, split: SplitTag) -> Result<LabeledSet> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Decode("CSV header must start with `label`".into()));
    }
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Decode(format!("unexpected CSV column `{h}`, wanted f{i}")));
        }
    }
    let cols = headers.len() - 1;
    if cols == 0 {
        return Err(Error::Decode("CSV has no feature columns".into()));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != cols + 1 {
            return Err(Error::Decode(format!("row {} has {} fields", line + 1, record.len())));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| Error::Decode(format!("row {} label: {e}", line + 1)))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Decode(format!("row {} value `{field}`: {e}", line + 1)))?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Decode("CSV has no rows".into()));
    }
    LabeledSet::new(Tensor::new(vec![labels.len(), cols], data)?, labels, split)
}

pub fn write_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let cols = set.samples.cols();
    let mut header = vec!["label".to_string()];
    header.extend((0..cols).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, label) in set.labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(set.samples.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path, split: SplitTag) -> Result<LabeledSet> {
    decode_binary(&fs::read(path)?, split)
}

pub fn write_binary(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_binary(set)?)?;
    Ok(())
}

pub fn encode_binary(set: &LabeledSet) -> Result<Vec<u8>> {
    let rows = u32::try_from(set.len()).map_err(|_| Error::config("too many rows"))?;
    let cols = u32::try_from(set.samples.cols()).map_err(|_| Error::config("too many cols"))?;
    let mut out = Vec::with_capacity(16 + set.samples.len() * 8 + set.len() * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in set.samples.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &set.labels {
        let l = u32::try_from(l).map_err(|_| Error::config("label exceeds u32"))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8], split: SplitTag) -> Result<LabeledSet> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Decode("truncated binary header".into()))
    };
    if bytes.get(..4) != Some(BINARY_MAGIC.as_slice()) {
        return Err(Error::Decode("missing APRD magic".into()));
    }
    let version = word(4)?;
    if version != BINARY_VERSION {
        return Err(Error::Decode(format!("unsupported binary version {version}")));
    }
    let rows = word(8)? as usize;
    let cols = word(12)? as usize;
    let body = 16;
    let expected = body + rows * cols * 8 + rows * 4;
    if bytes.len() != expected {
        return Err(Error::Decode(format!(
            "binary matrix is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes[body..body + rows * cols * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = bytes[body + rows * cols * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    LabeledSet::new(Tensor::new(vec![rows, cols], data)?, labels, split)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Decode(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> LabeledSet {
        let x = Tensor::from_rows(&[vec![0.1, -2.5, 1e-300], vec![3.0, 4.0, -0.0]]).unwrap();
        LabeledSet::new(x, vec![4, 1], SplitTag::Train).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&p, &set()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("label,f0,f1,f2\n"));
        let back = read_csv(&p, SplitTag::Train).unwrap();
        assert_eq!(back.samples, set().samples);
        assert_eq!(back.labels, vec![4, 1]);
    }

    #[test]
    fn csv_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "y,f0\n1,2\n").unwrap();
        assert!(matches!(read_csv(&p, SplitTag::Train), Err(Error::Decode(_))));
    }

    #[test]
    fn binary_layout_and_round_trip() {
        let bytes = encode_binary(&set()).unwrap();
        assert_eq!(&bytes[..4], b"APRD");
        assert_eq!(bytes.len(), 16 + 6 * 8 + 2 * 4);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let back = decode_binary(&bytes, SplitTag::Test).unwrap();
        assert_eq!(back.samples, set().samples);
        assert_eq!(back.labels, vec![4, 1]);
        assert!(decode_binary(&bytes[..bytes.len() - 1], SplitTag::Test).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_binary(&bad, SplitTag::Test).is_err());
    }
}
