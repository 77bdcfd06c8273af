use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::math::{logsumexp_unchecked, Tensor};

use super::source::LOG_FLOOR;

const BINARY_MAGIC: &[u8; 4] = b"LAT1";
const TEXT_HEADER: &str = "lat1";

/// Prefix-independent recognizer posteriors: row `t` is the log-distribution
/// of the token emitted at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    frames: Tensor,
}

impl Lattice {
    /// Floors every entry at [`LOG_FLOOR`] and checks that each row is a
    /// normalized log-distribution.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("lattice has no steps".into()));
        }
        let v = rows[0].len();
        if v == 0 {
            return Err(Error::Argument("lattice has an empty vocabulary".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * v);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != v {
                return Err(Error::Dimension(format!(
                    "lattice row {t} has {} entries, expected {v}",
                    row.len()
                )));
            }
            if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(Error::Numeric(format!("lattice row {t} holds NaN or +inf")));
            }
            let floored: Vec<f64> = row.iter().map(|&x| x.max(LOG_FLOOR)).collect();
            let norm = logsumexp_unchecked(&floored);
            if norm.abs() > 1e-5 {
                return Err(Error::Argument(format!(
                    "lattice row {t} is not normalized (logsumexp = {norm})"
                )));
            }
            data.extend(floored);
        }
        Ok(Lattice {
            frames: Tensor::new(vec![rows.len(), v], data)?,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_steps(&self) -> usize {
        self.frames.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.frames.cols()
    }

    pub fn row(&self, step: usize) -> &[f64] {
        self.frames.row(step)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{TEXT_HEADER} {} {}\n", self.num_steps(), self.vocab_size());
        for t in 0..self.num_steps() {
            let row = self.row(t);
            for (i, x) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "lattice",
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let (t, v) = match header.as_slice() {
            [TEXT_HEADER, t, v] => (
                t.parse::<usize>().map_err(|e| bad(format!("step count: {e}")))?,
                v.parse::<usize>().map_err(|e| bad(format!("vocab size: {e}")))?,
            ),
            _ => return Err(bad(format!("expected header `{TEXT_HEADER} <T> <V>`"))),
        };
        let mut rows = Vec::with_capacity(t);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let row = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {i}: {e}")))?;
            if row.len() != v {
                return Err(bad(format!("row {i} has {} values, header says {v}", row.len())));
            }
            rows.push(row);
        }
        if rows.len() != t {
            return Err(bad(format!("{} rows, header says {t}", rows.len())));
        }
        Lattice::from_rows(rows)
    }

    /// `LAT1`, then `T` and `V` as little-endian u32, then `T·V` little-endian
    /// f32 values.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.frames.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.num_steps() as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size() as u32).to_le_bytes());
        for &x in self.frames.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    pub fn parse_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            kind: "lattice",
            path: path.to_path_buf(),
            detail: detail.into(),
        };
        if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
            return Err(bad("missing LAT1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (t, v) = (word(4), word(8));
        if bytes.len() != 12 + 4 * t * v {
            return Err(bad("payload length does not match header"));
        }
        let rows = bytes[12..]
            .chunks_exact(4 * v.max(1))
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect()
            })
            .collect();
        Lattice::from_rows(rows)
    }

    /// Reads either encoding, chosen by the leading magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            return Lattice::parse_binary(&bytes, path);
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            kind: "lattice",
            path: path.to_path_buf(),
            detail: "not UTF-8 text".into(),
        })?;
        Lattice::parse_text(&text, path)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).at(path)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_binary()).at(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Lattice {
        Lattice::from_rows(vec![
            vec![0.25f64.ln(); 4],
            vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        ])
        .unwrap()
    }

    #[test]
    fn floors_negative_infinity() {
        let l = sample();
        assert_eq!(l.row(1)[0], 0.0);
        assert_eq!(l.row(1)[2], LOG_FLOOR);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(Lattice::from_rows(vec![vec![0.0, 0.0]]).is_err());
        assert!(Lattice::from_rows(vec![]).is_err());
        assert!(Lattice::from_rows(vec![vec![0.0], vec![0.0, LOG_FLOOR]]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let l = sample();
        let back = Lattice::parse_text(&l.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, l);
        assert!(Lattice::parse_text("lat1 3 4\n", Path::new("x")).is_err());
        assert!(Lattice::parse_text("lattice 1 1\n0\n", Path::new("x")).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let l = sample();
        let back = Lattice::parse_binary(&l.to_binary(), Path::new("x")).unwrap();
        for (a, b) in back.frames().data().iter().zip(l.frames().data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let mut bytes = l.to_binary();
        bytes.pop();
        assert!(Lattice::parse_binary(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn load_sniffs_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.lat"), dir.path().join("b.lat"));
        let l = sample();
        l.save_text(&a).unwrap();
        l.save_binary(&b).unwrap();
        assert_eq!(Lattice::load(&a).unwrap(), l);
        assert_eq!(Lattice::load(&b).unwrap().num_steps(), 2);
    }
}
