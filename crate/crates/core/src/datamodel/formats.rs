//! Unit text files, phoneme text files and the binary "DSUF" feature format.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{PhonemeSequence, UnitSequence};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"DSUF";
pub const FEATURE_FORMAT_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

/// Writes `#K=<K> rate=<hz>` followed by one unit per line.
pub fn write_units(seq: &UnitSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if seq.is_empty() {
        return Err(Error::validation("empty sequence"));
    }
    let k = seq.num_units();
    let mut out = format!("#K={k} rate={}\n", seq.unit_rate_hz());
    for &u in seq.units() {
        if u >= k {
            return Err(Error::validation(format!(
                "unit {u} out of range for K={k}"
            )));
        }
        out.push_str(&u.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_units(path: impl AsRef<Path>) -> Result<UnitSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|l| l.starts_with('#'))
        .ok_or_else(|| Error::format(path, "missing '#K=<K> rate=<hz>' header"))?;
    let (k, rate) = parse_units_header(header)
        .ok_or_else(|| Error::format(path, format!("malformed header {header:?}")))?;
    let mut units = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let u: usize = line.parse().map_err(|_| {
            Error::format(
                path,
                format!("line {}: {line:?} is not a unit id", lineno + 2),
            )
        })?;
        if u >= k {
            return Err(Error::format(
                path,
                format!("line {}: unit {u} out of range for K={k}", lineno + 2),
            ));
        }
        units.push(u);
    }
    UnitSequence::new(units, k, rate)
}

fn parse_units_header(header: &str) -> Option<(usize, f64)> {
    let mut k = None;
    let mut rate = None;
    for field in header.trim_start_matches('#').split_whitespace() {
        let (key, value) = field.split_once('=')?;
        match key {
            "K" => k = value.parse().ok(),
            "rate" => rate = value.parse().ok(),
            _ => return None,
        }
    }
    Some((k?, rate?))
}

/// Binary layout, little-endian: magic, version u32, rows u32, cols u32, rows·cols f32 row-major.
pub fn write_features(mat: &Matrix<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !mat.is_finite() {
        return Err(Error::validation(format!(
            "refusing to write non-finite features to {}",
            path.display()
        )));
    }
    let rows = u32::try_from(mat.rows()).map_err(|_| Error::validation("too many rows"))?;
    let cols = u32::try_from(mat.cols()).map_err(|_| Error::validation("too many columns"))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(FEATURE_MAGIC)?;
    write(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
    write(&rows.to_le_bytes())?;
    write(&cols.to_le_bytes())?;
    for v in mat.as_slice() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected DSUF"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn write_index_list(values: &[usize], path: &Path) -> Result<()> {
    let mut text = values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_index_list(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| Error::format(path, format!("{tok:?} is not an integer")))
        })
        .collect()
}

/// Space-separated phoneme ids on one line.
pub fn write_phonemes(seq: &PhonemeSequence, path: impl AsRef<Path>) -> Result<()> {
    write_index_list(seq.ids(), path.as_ref())
}

pub fn read_phonemes(path: impl AsRef<Path>, vocab_size: usize) -> Result<PhonemeSequence> {
    let path = path.as_ref();
    let ids = read_index_list(path)?;
    PhonemeSequence::new(ids, vocab_size).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.units");
        let seq = UnitSequence::new(vec![3, 3, 7], 100, 50.0).unwrap();
        write_units(&seq, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "#K=100 rate=50\n3\n3\n7\n"
        );
        assert_eq!(read_units(&path).unwrap(), seq);
    }

    #[test]
    fn empty_unit_sequence_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = UnitSequence::new(vec![], 100, 50.0).unwrap();
        let err = write_units(&seq, dir.path().join("e.units")).unwrap_err();
        assert!(err.to_string().contains("empty sequence"));
    }

    #[test]
    fn unit_file_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.units");
        fs::write(&p, "#K=100 rate=50\n0\n99\n").unwrap();
        assert_eq!(read_units(&p).unwrap().units(), &[0, 99]);
        fs::write(&p, "#K=100 rate=50\n100\n").unwrap();
        assert!(matches!(read_units(&p), Err(Error::Format { .. })));
        fs::write(&p, "#K=100 rate=50\nabc\n").unwrap();
        assert!(matches!(read_units(&p), Err(Error::Format { .. })));
        fs::write(&p, "1\n2\n").unwrap();
        assert!(read_units(&p).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn single_zero_feature_file_is_twenty_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.feat");
        write_features(&Matrix::zeros(1, 1), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"DSUF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..], &[0, 0, 0, 0]);
    }

    #[test]
    fn feature_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.feat");
        fs::write(&p, b"XXXX\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert!(read_features(&p).unwrap_err().to_string().contains("magic"));
        fs::write(&p, b"DSUF\x01\0\0\0\x02\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert!(read_features(&p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let nan = Matrix::from_vec(1, 1, vec![f32::NAN]).unwrap();
        assert!(write_features(&nan, &p).unwrap_err().is_validation());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn features_round_trip_bitwise(
            rows in 0usize..8, cols in 0usize..8,
            seed in proptest::collection::vec(-1e6f32..1e6, 64)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.feat");
            let m = Matrix::from_fn(rows, cols, |r, c| seed[r * 8 + c]);
            write_features(&m, &p).unwrap();
            let back = read_features(&p).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn units_round_trip(units in proptest::collection::vec(0usize..37, 1..50)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("u.units");
            let seq = UnitSequence::new(units, 37, 12.5).unwrap();
            write_units(&seq, &p).unwrap();
            prop_assert_eq!(read_units(&p).unwrap(), seq);
        }
    }
}
