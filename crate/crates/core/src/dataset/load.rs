//! Delimited-text ingestion of the alloy dataset.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::composition::{element_index, ClassLabel, Composition, Property, PropertyVector, ELEMENTS, N_ELEMENTS};
use crate::error::{Error, Result};

const BUNDLED_MINI: &str = include_str!("../../data/mini_dataset.csv");

/// Rows whose raw sum deviates from 100 by more than this are rejected.
pub const LOAD_SUM_TOLERANCE: f64 = 0.5;
pub const MIN_ELEMENTS_PER_ROW: usize = 3;
pub const MAX_ELEMENTS_PER_ROW: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub composition: Composition,
    pub properties: PropertyVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedRow {
    pub composition: Composition,
    pub label: ClassLabel,
}

/// Column names the loader expects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub label_column: String,
    pub delimiter: u8,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            label_column: "label".into(),
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_accepted: usize,
    pub rejected: Vec<RowDiagnostic>,
    pub class_counts: BTreeMap<ClassLabel, usize>,
    pub property_counts: BTreeMap<Property, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadedDataset {
    pub regression: Vec<RegressionRow>,
    pub classification: Vec<ClassifiedRow>,
    pub report: LoadReport,
    /// SHA-256 over the raw input bytes.
    pub content_hash: String,
}

impl LoadedDataset {
    /// Distinct compositions across both subsets, first occurrence order.
    pub fn all_compositions(&self) -> Vec<Composition> {
        let mut out: Vec<Composition> = Vec::new();
        let iter = self
            .classification
            .iter()
            .map(|r| &r.composition)
            .chain(self.regression.iter().map(|r| &r.composition));
        for c in iter {
            if !out.iter().any(|o| o == c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn compositions_with_label(&self, label: ClassLabel) -> Vec<Composition> {
        self.classification
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.composition.clone())
            .collect()
    }
}

/// The bundled 200-row synthetic dataset.
pub fn bundled_mini_dataset() -> LoadedDataset {
    parse_dataset(BUNDLED_MINI.as_bytes(), &DatasetSchema::default()).expect("bundled mini dataset parses")
}

pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<LoadedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(file, schema)
}

pub fn parse_dataset(mut input: impl Read, schema: &DatasetSchema) -> Result<LoadedDataset> {
    let mut raw = Vec::new();
    input.read_to_end(&mut raw).map_err(|e| Error::io("<dataset>", e))?;
    let content_hash = hex::encode(Sha256::digest(&raw));

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(true)
        .from_reader(raw.as_slice());
    let headers = rdr.headers()?.clone();

    let mut element_cols = [usize::MAX; N_ELEMENTS];
    let mut property_cols: Vec<(usize, Property)> = Vec::new();
    let mut label_col = None;
    for (col, name) in headers.iter().enumerate() {
        let name = name.trim();
        if let Some(idx) = element_index(name) {
            element_cols[idx] = col;
        } else if let Some(p) = Property::from_column(name) {
            property_cols.push((col, p));
        } else if name == schema.label_column {
            label_col = Some(col);
        }
    }
    let missing: Vec<&str> = element_cols
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == usize::MAX)
        .map(|(i, _)| ELEMENTS[i])
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "header is missing element columns: {}",
            missing.join(", ")
        )));
    }

    let mut out = LoadedDataset {
        regression: Vec::new(),
        classification: Vec::new(),
        report: LoadReport::default(),
        content_hash,
    };
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        out.report.rows_read += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.report.rejected.push(RowDiagnostic {
                    row: row_no,
                    message: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        match parse_row(&rec, &element_cols, &property_cols, label_col) {
            Ok((composition, properties, label)) => {
                out.report.rows_accepted += 1;
                if let Some(label) = label {
                    *out.report.class_counts.entry(label).or_default() += 1;
                    out.classification.push(ClassifiedRow {
                        composition: composition.clone(),
                        label,
                    });
                }
                if !properties.is_empty() {
                    for p in Property::ALL {
                        if properties.get(p).is_some() {
                            *out.report.property_counts.entry(p).or_default() += 1;
                        }
                    }
                    out.regression.push(RegressionRow {
                        composition,
                        properties,
                    });
                }
            }
            Err(message) => {
                log::warn!("dataset row {row_no} rejected: {message}");
                out.report.rejected.push(RowDiagnostic { row: row_no, message });
            }
        }
    }
    Ok(out)
}

fn parse_row(
    rec: &csv::StringRecord,
    element_cols: &[usize; N_ELEMENTS],
    property_cols: &[(usize, Property)],
    label_col: Option<usize>,
) -> std::result::Result<(Composition, PropertyVector, Option<ClassLabel>), String> {
    let mut fractions = vec![0.0; N_ELEMENTS];
    for (e, &col) in element_cols.iter().enumerate() {
        let field = rec.get(col).unwrap_or("").trim();
        let v: f64 = if field.is_empty() {
            0.0
        } else {
            field
                .parse()
                .map_err(|_| format!("element {}: `{field}` is not a number", ELEMENTS[e]))?
        };
        if !v.is_finite() || !(0.0..=100.0).contains(&v) {
            return Err(format!("element {} = {v} outside [0, 100]", ELEMENTS[e]));
        }
        fractions[e] = v;
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 100.0).abs() > LOAD_SUM_TOLERANCE {
        return Err(format!(
            "composition sums to {sum:.4}, outside 100 ± {LOAD_SUM_TOLERANCE}"
        ));
    }
    let n = fractions.iter().filter(|&&f| f > 0.0).count();
    if !(MIN_ELEMENTS_PER_ROW..=MAX_ELEMENTS_PER_ROW).contains(&n) {
        return Err(format!(
            "{n} elements present, expected {MIN_ELEMENTS_PER_ROW}..={MAX_ELEMENTS_PER_ROW}"
        ));
    }
    let composition = Composition::normalized(fractions).map_err(|e| e.to_string())?;

    let mut properties = PropertyVector::default();
    for &(col, p) in property_cols {
        let field = rec.get(col).unwrap_or("").trim();
        if field.is_empty() || field.eq_ignore_ascii_case("nan") {
            continue;
        }
        let v: f64 = field
            .parse()
            .map_err(|_| format!("property {p}: `{field}` is not a number"))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format!("property {p} = {v} must be finite and non-negative"));
        }
        properties.set(p, Some(v));
    }

    let label = match label_col.and_then(|c| rec.get(c)).map(str::trim) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<ClassLabel>().map_err(|e| e.to_string())?),
    };
    if label.is_none() && properties.is_empty() {
        return Err("row has neither a label nor any property value".into());
    }
    Ok((composition, properties, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        let mut h: Vec<String> = ELEMENTS.iter().map(|s| s.to_string()).collect();
        h.extend(["Dmax", "Tg", "label"].map(String::from));
        h.join(",")
    }

    fn row(pairs: &[(usize, f64)], tail: &str) -> String {
        let mut v = vec!["0".to_string(); N_ELEMENTS];
        for &(i, f) in pairs {
            v[i] = f.to_string();
        }
        format!("{},{tail}", v.join(","))
    }

    #[test]
    fn bundled_file_parses_every_row() {
        let d = bundled_mini_dataset();
        let lines = BUNDLED_MINI.lines().filter(|l| !l.trim().is_empty()).count() - 1;
        assert_eq!(d.report.rows_read, lines);
        assert_eq!(d.report.rows_accepted, 200);
        assert!(d.report.rejected.is_empty());
        assert_eq!(d.classification.len(), 200);
        let total: usize = d.report.class_counts.values().sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn rejects_bad_sum_with_row_index() {
        let text = format!(
            "{}\n{}\n{}\n",
            header(),
            row(&[(0, 50.0), (1, 30.0), (3, 20.0)], "1.0,700,BMG"),
            row(&[(0, 50.0), (1, 30.0), (3, 19.2)], "1.0,700,BMG"),
        );
        let d = parse_dataset(text.as_bytes(), &DatasetSchema::default()).unwrap();
        assert_eq!(d.report.rows_accepted, 1);
        assert_eq!(d.report.rejected.len(), 1);
        assert_eq!(d.report.rejected[0].row, 2);
        assert!(d.report.rejected[0].message.contains("99.2"));
    }

    #[test]
    fn malformed_row_is_skipped_and_counted() {
        let text = format!(
            "{}\n{}\n{}\n",
            header(),
            row(&[(0, 50.0), (1, 30.0), (3, 20.0)], "x,700,BMG"),
            row(&[(0, 50.0), (1, 30.0), (3, 20.0)], ",,RMG"),
        );
        let d = parse_dataset(text.as_bytes(), &DatasetSchema::default()).unwrap();
        assert_eq!(d.report.rejected.len(), 1);
        assert_eq!(d.classification.len(), 1);
        assert!(d.regression.is_empty());
    }

    #[test]
    fn column_order_is_mapped_by_name() {
        let mut h: Vec<String> = ELEMENTS.iter().rev().map(|s| s.to_string()).collect();
        h.push("label".into());
        let mut v = vec!["0".to_string(); N_ELEMENTS];
        // reversed: Zr is the last element column
        v[N_ELEMENTS - 1] = "60".into();
        v[N_ELEMENTS - 2] = "25".into();
        v[N_ELEMENTS - 4] = "15".into();
        let text = format!("{}\n{},BMG\n", h.join(","), v.join(","));
        let d = parse_dataset(text.as_bytes(), &DatasetSchema::default()).unwrap();
        let c = &d.classification[0].composition;
        assert_eq!(c.get(element_index("Zr").unwrap()), 60.0);
        assert_eq!(c.get(element_index("Al").unwrap()), 15.0);
    }

    #[test]
    fn missing_element_column_is_an_error() {
        let text = "Zr,Cu,label\n50,50,BMG\n";
        assert!(parse_dataset(text.as_bytes(), &DatasetSchema::default()).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_dataset(Path::new("/nonexistent/x.csv"), &DatasetSchema::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
