//! Plain-text tensor dumps.
//!
//! ```text
//! shape: 2 3
//! 1e0 2.5e0 -3e-1
//! 0e0 1e-7 4e0
//! ```
//!
//! The header lists the dimensions; values follow in row-major order,
//! whitespace separated, one row of the trailing dimension per line. Values
//! are written in shortest round-trip form so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub trait TensorDump {
    fn to_dump(&self) -> String;
    fn from_dump(text: &str) -> Result<Tensor>;
}

impl TensorDump for Tensor {
    fn to_dump(&self) -> String {
        let mut s = String::from("shape:");
        for d in self.shape() {
            write!(s, " {d}").unwrap();
        }
        s.push('\n');
        let width = self.shape().last().copied().unwrap_or(1).max(1);
        for row in self.data().chunks(width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    fn from_dump(text: &str) -> Result<Tensor> {
        let mut lines = text.splitn(2, '\n');
        let header = lines.next().unwrap_or("");
        let dims = header
            .strip_prefix("shape:")
            .ok_or_else(|| TensorError::Parse(format!("missing `shape:` header, got {header:?}")))?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>().map_err(|e| TensorError::Parse(format!("bad dimension {d:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let data = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| TensorError::Parse(format!("bad value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| TensorError::Parse(e.to_string()))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> std::io::Result<()> {
    std::fs::write(path, t.to_dump())
}

pub fn read_tensor(path: &Path) -> std::io::Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    Tensor::from_dump(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_format() {
        let t = Tensor::matrix(&[&[1.0, 2.5], &[-0.1, 1e-7]]);
        let s = t.to_dump();
        assert!(s.starts_with("shape: 2 2\n"));
        assert_eq!(Tensor::from_dump(&s).unwrap(), t);
    }

    #[test]
    fn rejects_missing_header_and_bad_count() {
        assert!(Tensor::from_dump("1 2 3").is_err());
        assert!(Tensor::from_dump("shape: 2 2\n1 2 3").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let t = Tensor::vector(vals);
            let back = Tensor::from_dump(&t.to_dump()).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
