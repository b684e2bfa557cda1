//! Text artifact formats.
//!
//! * `PDL-EMB v1 N=<n> D=<d>` then `n` lines of
//!   `<sample_id> <identity> <camera_id> <d floats>`.
//! * `PDL-CKPT v1 <key=value ...>` then named tensors, each introduced by
//!   `tensor <name> rows=<r> cols=<c>` and followed by `r` float lines.
//! * `PDL-DIST v1 N=<n>` then `n` lines of `n` floats.
//! * `PDL-CLUS v1 N=<n> clusters=<k> noise=<m>` then `n` lines of
//!   `<index> <label>` where noise is `-1`.
//!
//! Floats are written with Rust's shortest round-trip representation, so a
//! save/load cycle is bit-exact for finite values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::clustering::{ClusterAssignment, DistanceMatrix};
use crate::error::{PdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<usize>,
    pub matrix: Array2<f64>,
    pub identities: Vec<usize>,
    pub camera_ids: Vec<usize>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("PDL-EMB v1 N={} D={}\n", self.len(), self.dim());
        for i in 0..self.len() {
            let _ = write!(out, "{} {} {}", self.ids[i], self.identities[i], self.camera_ids[i]);
            for v in self.matrix.row(i) {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| PdlError::parse(1, "empty file"))?;
        let fields = parse_header(header, "PDL-EMB", 1)?;
        let n = header_usize(&fields, "N", 1)?;
        let d = header_usize(&fields, "D", 1)?;

        let mut ids = Vec::with_capacity(n);
        let mut identities = Vec::with_capacity(n);
        let mut camera_ids = Vec::with_capacity(n);
        let mut matrix = Array2::zeros((n, d));
        let mut row = 0;
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            if row == n {
                return Err(PdlError::parse(lineno, format!("more than N={n} rows")));
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != d + 3 {
                return Err(PdlError::parse(
                    lineno,
                    format!("expected 3 + D={d} fields, found {}", tokens.len()),
                ));
            }
            ids.push(parse_usize(tokens[0], lineno)?);
            identities.push(parse_usize(tokens[1], lineno)?);
            camera_ids.push(parse_usize(tokens[2], lineno)?);
            for (j, tok) in tokens[3..].iter().enumerate() {
                matrix[[row, j]] = parse_finite(tok, lineno)?;
            }
            row += 1;
        }
        if row != n {
            return Err(PdlError::parse(
                text.lines().count() + 1,
                format!("header declares N={n} rows, found {row}"),
            ));
        }
        Ok(EmbeddingTable {
            ids,
            matrix,
            identities,
            camera_ids,
        })
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    fs::write(path, table.to_text())?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::from_text(&fs::read_to_string(path)?)
}

/// A named row-major tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write_tensors(magic: &str, meta: &[(&str, String)], tensors: &[NamedTensor]) -> String {
    let mut out = format!("{magic} v1");
    for (k, v) in meta {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for t in tensors {
        let _ = writeln!(out, "tensor {} rows={} cols={}", t.name, t.rows, t.cols);
        for r in 0..t.rows {
            let row = &t.data[r * t.cols..(r + 1) * t.cols];
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Returns header key/values and tensors in file order.
/// Header `key=value` pairs and the tensors that follow them.
pub type TensorFile = (Vec<(String, String)>, Vec<NamedTensor>);

pub fn read_tensors(text: &str, magic: &str) -> Result<TensorFile> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| PdlError::parse(1, "empty file"))?;
    let meta = parse_header(header, magic, 1)?;
    let mut tensors = Vec::new();
    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 4 || tokens[0] != "tensor" {
            return Err(PdlError::parse(lineno, "expected `tensor <name> rows=<r> cols=<c>`"));
        }
        let kv = parse_kv(&tokens[2..], lineno)?;
        let rows = header_usize(&kv, "rows", lineno)?;
        let cols = header_usize(&kv, "cols", lineno)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| PdlError::parse(lineno, format!("tensor {} truncated", tokens[1])))?;
            let vals = line
                .split_whitespace()
                .map(|t| parse_finite(t, idx + 1))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != cols {
                return Err(PdlError::parse(
                    idx + 1,
                    format!("expected {cols} values, found {}", vals.len()),
                ));
            }
            data.extend(vals);
        }
        tensors.push(NamedTensor {
            name: tokens[1].to_string(),
            rows,
            cols,
            data,
        });
    }
    Ok((meta, tensors))
}

pub fn distance_to_text(d: &DistanceMatrix) -> String {
    let n = d.len();
    let mut out = format!("PDL-DIST v1 N={n}\n");
    for i in 0..n {
        let line: Vec<String> = (0..n).map(|j| format!("{:?}", d.get(i, j))).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn clusters_to_text(a: &ClusterAssignment) -> String {
    let mut out = format!(
        "PDL-CLUS v1 N={} clusters={} noise={}\n",
        a.len(),
        a.n_clusters(),
        a.n_noise()
    );
    for (i, label) in a.labels().iter().enumerate() {
        match label {
            Some(l) => {
                let _ = writeln!(out, "{i} {l}");
            }
            None => {
                let _ = writeln!(out, "{i} -1");
            }
        }
    }
    out
}

fn parse_header(line: &str, magic: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(magic) || tokens.next() != Some("v1") {
        return Err(PdlError::parse(lineno, format!("expected `{magic} v1` header")));
    }
    parse_kv(&tokens.collect::<Vec<_>>(), lineno)
}

fn parse_kv(tokens: &[&str], lineno: usize) -> Result<Vec<(String, String)>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| PdlError::parse(lineno, format!("malformed field `{t}`")))
        })
        .collect()
}

pub(crate) fn header_usize(fields: &[(String, String)], key: &str, lineno: usize) -> Result<usize> {
    let v = fields
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| PdlError::parse(lineno, format!("missing `{key}=`")))?;
    parse_usize(&v.1, lineno)
}

fn parse_usize(tok: &str, lineno: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| PdlError::parse(lineno, format!("`{tok}` is not a non-negative integer")))
}

fn parse_finite(tok: &str, lineno: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| PdlError::parse(lineno, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(PdlError::parse(lineno, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hand_written_fixture() {
        let text = "PDL-EMB v1 N=3 D=2\n0 5 1 0.5 -1.25\n1 5 0 3 1e-3\n2 7 2 -0.0 2.5\n";
        let t = EmbeddingTable::from_text(text).unwrap();
        assert_eq!(t.ids, vec![0, 1, 2]);
        assert_eq!(t.identities, vec![5, 5, 7]);
        assert_eq!(t.camera_ids, vec![1, 0, 2]);
        assert_eq!(t.matrix, array![[0.5, -1.25], [3.0, 0.001], [-0.0, 2.5]]);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let text = "PDL-EMB v1 N=2 D=2\n0 0 0 1 2\n1 0 0 1\n";
        match EmbeddingTable::from_text(text) {
            Err(PdlError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_and_non_finite() {
        assert!(EmbeddingTable::from_text("PDL-EMB v2 N=1 D=1\n0 0 0 1\n").is_err());
        assert!(EmbeddingTable::from_text("PDL-EMB v1 N=1\n0 0 0 1\n").is_err());
        assert!(EmbeddingTable::from_text("PDL-EMB v1 N=1 D=1\n0 0 0 NaN\n").is_err());
        assert!(EmbeddingTable::from_text("PDL-EMB v1 N=1 D=1\n0 0 0 inf\n").is_err());
        assert!(EmbeddingTable::from_text("PDL-EMB v1 N=2 D=1\n0 0 0 1\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let t = EmbeddingTable {
            ids: vec![0, 1],
            matrix: array![[0.1, 1.0 / 3.0], [f64::MIN_POSITIVE, -7.25e300]],
            identities: vec![3, 4],
            camera_ids: vec![0, 9],
        };
        save_embeddings(&path, &t).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), t);
    }

    #[test]
    fn tensors_round_trip() {
        let ts = vec![
            NamedTensor {
                name: "w".into(),
                rows: 2,
                cols: 3,
                data: vec![1.0, -2.5, 0.1, 4.0, 5.0, 1e-9],
            },
            NamedTensor {
                name: "b".into(),
                rows: 1,
                cols: 1,
                data: vec![0.0],
            },
        ];
        let text = write_tensors("PDL-CKPT", &[("epoch", "3".into())], &ts);
        let (meta, back) = read_tensors(&text, "PDL-CKPT").unwrap();
        assert_eq!(meta, vec![("epoch".to_string(), "3".to_string())]);
        assert_eq!(back, ts);
    }

    proptest! {
        #[test]
        fn embedding_round_trip_is_bit_exact(
            rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 0..6),
            seed_ids in proptest::collection::vec(0usize..1000, 6),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.concat();
            let t = EmbeddingTable {
                ids: (0..n).collect(),
                matrix: Array2::from_shape_vec((n, 3), flat).unwrap(),
                identities: seed_ids[..n].to_vec(),
                camera_ids: seed_ids[..n].iter().map(|i| i % 5).collect(),
            };
            let back = EmbeddingTable::from_text(&t.to_text()).unwrap();
            prop_assert_eq!(back.ids, t.ids);
            prop_assert_eq!(back.identities, t.identities);
            prop_assert_eq!(back.camera_ids, t.camera_ids);
            for (a, b) in back.matrix.iter().zip(t.matrix.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
