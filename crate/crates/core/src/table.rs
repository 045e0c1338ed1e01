//! Segment feature tables as CSV.
//!
//! Layout: a header row, then one row per segment with the columns
//! `id,row_min,col_min,row_max,col_max`, the fifteen features in canonical
//! order, and optionally a trailing `label` column holding `1`, `0`, or an
//! empty cell for segments excluded from training. Reals are written with
//! nine significant digits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::MetaLabel;
use crate::segments::{BoundingBox, SegmentFeatures, SegmentRecord, FEATURE_NAMES, NUM_FEATURES};

const KEY_COLUMNS: [&str; 5] = ["id", "row_min", "col_min", "row_max", "col_max"];
const LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: usize,
    pub bbox: BoundingBox,
    pub features: SegmentFeatures,
    /// `None` when the segment carries no training label.
    pub label: Option<MetaLabel>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
    /// Whether the table carries a `label` column.
    pub labelled: bool,
}

impl FeatureTable {
    /// Builds an unlabelled table from feature-filled segments.
    pub fn from_segments(segments: &[SegmentRecord]) -> Self {
        let rows = segments
            .iter()
            .map(|s| FeatureRow {
                id: s.id,
                bbox: s.bbox,
                features: s.features.expect("segment features must be computed"),
                label: None,
            })
            .collect();
        Self {
            rows,
            labelled: false,
        }
    }

    /// Attaches meta-training labels, one per row.
    pub fn with_labels(mut self, labels: &[Option<MetaLabel>]) -> Self {
        assert_eq!(labels.len(), self.rows.len(), "one label per row");
        for (row, label) in self.rows.iter_mut().zip(labels) {
            row.label = *label;
        }
        self.labelled = true;
        self
    }

    pub fn header(&self) -> Vec<&'static str> {
        let mut cols: Vec<&str> = KEY_COLUMNS.to_vec();
        cols.extend(FEATURE_NAMES);
        if self.labelled {
            cols.push(LABEL_COLUMN);
        }
        cols
    }

    /// Feature matrix and labels of the rows that carry a label.
    pub fn labelled_rows(&self) -> (Vec<[f64; NUM_FEATURES]>, Vec<MetaLabel>) {
        self.rows
            .iter()
            .filter_map(|r| r.label.map(|l| (r.features.to_array(), l)))
            .unzip()
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(self.header()).map_err(csv_err)?;
        for row in &self.rows {
            let mut record = vec![
                row.id.to_string(),
                row.bbox.row_min.to_string(),
                row.bbox.col_min.to_string(),
                row.bbox.row_max.to_string(),
                row.bbox.col_max.to_string(),
            ];
            record.extend(row.features.to_array().iter().map(|&v| format_sig9(v)));
            if self.labelled {
                record.push(match row.label {
                    Some(l) => l.value().to_string(),
                    None => String::new(),
                });
            }
            out.write_record(&record).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = input
            .headers()
            .map_err(|e| Error::Format(e.to_string()))?
            .clone();
        let names: Vec<&str> = headers.iter().collect();
        let mut expected: Vec<&str> = KEY_COLUMNS.to_vec();
        expected.extend(FEATURE_NAMES);
        let labelled = names.len() == expected.len() + 1 && names.last() == Some(&LABEL_COLUMN);
        if labelled {
            expected.push(LABEL_COLUMN);
        }
        if let Some(unknown) = names.iter().find(|n| !expected.contains(n)) {
            return Err(Error::Schema(format!("unknown column '{unknown}'")));
        }
        if names != expected {
            return Err(Error::Schema(format!(
                "columns must be exactly {}",
                expected.join(",")
            )));
        }

        let mut rows = Vec::new();
        for (line, record) in input.records().enumerate() {
            let record = record.map_err(|e| Error::Format(e.to_string()))?;
            let cell = |i: usize| record.get(i).unwrap_or("");
            let int = |i: usize| {
                cell(i).parse::<usize>().map_err(|_| {
                    Error::Format(format!(
                        "row {}: column '{}' is not a non-negative integer: '{}'",
                        line + 1,
                        expected[i],
                        cell(i)
                    ))
                })
            };
            let mut features = [0.0; NUM_FEATURES];
            for (k, slot) in features.iter_mut().enumerate() {
                let i = KEY_COLUMNS.len() + k;
                *slot = cell(i)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "row {}: column '{}' is not a number: '{}'",
                            line + 1,
                            expected[i],
                            cell(i)
                        ))
                    })?;
            }
            let label = if labelled {
                match cell(expected.len() - 1) {
                    "" => None,
                    "0" => Some(MetaLabel::False),
                    "1" => Some(MetaLabel::True),
                    other => {
                        return Err(Error::Format(format!(
                            "row {}: label must be 0, 1 or empty, got '{other}'",
                            line + 1
                        )))
                    }
                }
            } else {
                None
            };
            rows.push(FeatureRow {
                id: int(0)?,
                bbox: BoundingBox {
                    row_min: int(1)?,
                    col_min: int(2)?,
                    row_max: int(3)?,
                    col_max: int(4)?,
                },
                features: SegmentFeatures::from_array(features),
                label,
            });
        }
        Ok(Self { rows, labelled })
    }
}

pub fn write_feature_csv(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    table.write(std::io::BufWriter::new(file))
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureTable::read(std::io::BufReader::new(file))
}

/// Formats a real with nine significant digits, like C's `%.9g`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if negative { "-" } else { "" };
    if (-5..9).contains(&exp) {
        let body = if exp >= 0 {
            let split = exp as usize + 1;
            format!("{}.{}", &digits[..split], &digits[split..])
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        let body = body.trim_end_matches('0').trim_end_matches('.');
        format!("{sign}{body}")
    } else {
        let frac = digits[1..].trim_end_matches('0');
        let dot = if frac.is_empty() { "" } else { "." };
        format!("{sign}{}{dot}{frac}e{exp}", &digits[..1])
    }
}
