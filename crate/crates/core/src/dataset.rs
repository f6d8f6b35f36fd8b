//! Labelled datasets and their JSON-lines serialization.
//!
//! Line 1 is a header object `{"d": .., "K": .., "seed": .., ...}`; every later
//! line is a record `{"x": [[index, value], ...], "y": label}`. The constant
//! feature is stored explicitly at index 0.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, config_err, Result};
use crate::model::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Generation parameters and any other provenance, kept in key order.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(d: usize, k: usize, seed: u64) -> Self {
        Self { d, k, seed, extra: serde_json::Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    /// The generation temperature, when recorded.
    pub fn tau(&self) -> Option<f64> {
        self.extra.get("tau").and_then(serde_json::Value::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x: SparseVec,
    pub y: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    x: Vec<(usize, f64)>,
    y: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    header: DatasetHeader,
    records: Vec<Record>,
    hash: OnceLock<String>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.records == other.records
    }
}

impl Dataset {
    /// Validates `n ≥ 1`, shared dimension `d`, labels `< K`, and `x₀ = 1`.
    pub fn new(header: DatasetHeader, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(arg_err("dataset must contain at least one record"));
        }
        if header.k == 0 || header.d == 0 {
            return Err(config_err("dataset header needs d ≥ 1 and K ≥ 1"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.x.dim() != header.d {
                return Err(config_err(format!(
                    "record {i}: input dimension {} differs from d = {}",
                    r.x.dim(),
                    header.d
                )));
            }
            if r.y >= header.k {
                return Err(config_err(format!("record {i}: label {} out of range for K = {}", r.y, header.k)));
            }
            if r.x.get(0) != 1.0 {
                return Err(config_err(format!("record {i}: constant feature x₀ must be 1")));
            }
        }
        Ok(Self { header, records, hash: OnceLock::new() })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn d(&self) -> usize {
        self.header.d
    }

    pub fn k(&self) -> usize {
        self.header.k
    }

    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn inputs(&self) -> Vec<SparseVec> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    /// Largest `‖x‖₂`; equals `sup ‖T(x, y)‖₂` under class-conjunction features.
    pub fn max_input_norm(&self) -> f64 {
        self.records.iter().map(|r| r.x.norm()).fold(0.0, f64::max)
    }

    /// The records concatenated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        let records = (0..times).flat_map(|_| self.records.iter().cloned()).collect();
        Self { header: self.header.clone(), records, hash: OnceLock::new() }
    }

    /// Hex SHA-256 of the canonical JSON-lines encoding.
    pub fn content_hash(&self) -> &str {
        self.hash.get_or_init(|| {
            let mut buf = Vec::new();
            self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
            hex::encode(Sha256::digest(&buf))
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine { x: r.x.entries().to_vec(), y: r.y };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| config_err("empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line)?;
            records.push(Record { x: SparseVec::new(header.d, rec.x)?, y: rec.y });
        }
        Self::new(header, records)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let header = DatasetHeader::new(4, 3, 7).with("tau", 0.5);
        let records = vec![
            Record { x: SparseVec::new(4, vec![(0, 1.0), (2, 1.0)]).unwrap(), y: 2 },
            Record { x: SparseVec::new(4, vec![(0, 1.0), (1, 1.0), (3, 1.0)]).unwrap(), y: 0 },
        ];
        Dataset::new(header, records).unwrap()
    }

    #[test]
    fn jsonl_layout() {
        let mut buf = Vec::new();
        sample().write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"d":4,"K":3,"seed":7,"tau":0.5}"#);
        assert_eq!(lines[1], r#"{"x":[[0,1.0],[2,1.0]],"y":2}"#);
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn jsonl_round_trip_preserves_hash() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
        assert_eq!(back.header().tau(), Some(0.5));
    }

    #[test]
    fn validation() {
        let h = DatasetHeader::new(2, 2, 0);
        assert!(Dataset::new(h.clone(), vec![]).is_err());
        let no_const = Record { x: SparseVec::new(2, vec![(1, 1.0)]).unwrap(), y: 0 };
        assert!(Dataset::new(h.clone(), vec![no_const]).is_err());
        let bad_label = Record { x: SparseVec::new(2, vec![(0, 1.0)]).unwrap(), y: 2 };
        assert!(Dataset::new(h.clone(), vec![bad_label]).is_err());
        let bad_dim = Record { x: SparseVec::new(3, vec![(0, 1.0)]).unwrap(), y: 0 };
        assert!(Dataset::new(h, vec![bad_dim]).is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let ds = sample();
        assert_ne!(ds.content_hash(), ds.repeated(2).content_hash());
        assert_eq!(ds.content_hash().len(), 64);
    }
}
