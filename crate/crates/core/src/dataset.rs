//! Tabular binary-classification data and its CSV form.
//!
//! CSV layout: header `f0,...,f{d-1},label[,attr...]`, one row per sample,
//! UTF-8 with `.` as decimal separator. Extra columns become named
//! attributes (e.g. `age`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub features: Vec<f64>,
    pub label: u8,
    pub attributes: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn new(dim: usize, rows: Vec<Row>) -> Result<Self, DatasetError> {
        for (i, r) in rows.iter().enumerate() {
            if r.features.len() != dim {
                return Err(DatasetError::Row {
                    row: i,
                    reason: format!("expected {dim} features, found {}", r.features.len()),
                });
            }
            if r.label > 1 {
                return Err(DatasetError::Row { row: i, reason: format!("label {} is not binary", r.label) });
            }
        }
        Ok(Dataset { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn attribute(&self, row: usize, name: &str) -> Option<f64> {
        self.rows[row].attributes.get(name).copied()
    }

    fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            for k in r.attributes.keys() {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
        names.sort();
        names
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let attrs = self.attribute_names();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.extend(attrs.iter().cloned());
        out.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec: Vec<String> = r.features.iter().map(|x| x.to_string()).collect();
            rec.push(r.label.to_string());
            for a in &attrs {
                let v = r
                    .attributes
                    .get(a)
                    .ok_or_else(|| DatasetError::Row { row: i, reason: format!("missing attribute `{a}`") })?;
                rec.push(v.to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DatasetError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let label_col =
            header.iter().position(|h| h == "label").ok_or_else(|| DatasetError::Header("no `label` column".into()))?;
        for (i, h) in header.iter().take(label_col).enumerate() {
            if h != format!("f{i}") {
                return Err(DatasetError::Header(format!("expected `f{i}`, found `{h}`")));
            }
        }
        let dim = label_col;
        let attrs: Vec<String> = header.iter().skip(label_col + 1).map(str::to_owned).collect();

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |col: usize| -> Result<f64, DatasetError> {
                let field = rec.get(col).unwrap_or("");
                field.trim().parse::<f64>().map_err(|_| DatasetError::Row {
                    row: i,
                    reason: format!("`{field}` in column `{}` is not a number", &header[col]),
                })
            };
            let features = (0..dim).map(num).collect::<Result<Vec<_>, _>>()?;
            let label = match rec.get(label_col).map(str::trim) {
                Some("0") => 0,
                Some("1") => 1,
                other => return Err(DatasetError::Row { row: i, reason: format!("label {other:?} is not 0 or 1") }),
            };
            let mut attributes = BTreeMap::new();
            for (k, name) in attrs.iter().enumerate() {
                attributes.insert(name.clone(), num(label_col + 1 + k)?);
            }
            rows.push(Row { features, label, attributes });
        }
        Dataset::new(dim, rows)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Dataset::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}
