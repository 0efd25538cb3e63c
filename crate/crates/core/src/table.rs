//! CSV helpers for row-labeled numeric matrices (`id,col_0,col_1,...`).

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: expected {expected} values, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    Number { row: usize, col: usize, value: String },
    #[error("table has no columns")]
    NoColumns,
}

/// A matrix with a label per row and a name per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub id_header: String,
    pub columns: Vec<String>,
    pub ids: Vec<String>,
    pub values: Array2<f64>,
}

pub fn write_labeled_matrix<W: Write>(
    out: W,
    id_header: &str,
    columns: &[String],
    ids: &[String],
    values: ArrayView2<f64>,
) -> Result<(), TableError> {
    assert_eq!(ids.len(), values.nrows(), "one id per row");
    assert_eq!(columns.len(), values.ncols(), "one name per column");
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = Vec::with_capacity(columns.len() + 1);
    header.push(id_header.to_owned());
    header.extend(columns.iter().cloned());
    wtr.write_record(&header)?;
    for (id, row) in ids.iter().zip(values.rows()) {
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(id.clone());
        record.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_labeled_matrix<R: Read>(input: R) -> Result<LabeledMatrix, TableError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(TableError::NoColumns);
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != columns.len() + 1 {
            return Err(TableError::Ragged {
                row,
                expected: columns.len() + 1,
                found: record.len(),
            });
        }
        ids.push(record[0].to_owned());
        for (col, field) in record.iter().skip(1).enumerate() {
            flat.push(field.parse::<f64>().map_err(|_| TableError::Number {
                row,
                col,
                value: field.to_owned(),
            })?);
        }
    }
    let values = Array2::from_shape_vec((ids.len(), columns.len()), flat).expect("shape checked per row");
    Ok(LabeledMatrix {
        id_header: header[0].to_owned(),
        columns,
        ids,
        values,
    })
}

/// `prefix_0, prefix_1, ...`
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let values = array![[0.1, 1.0 / 3.0], [-2.5e-17, 7.0]];
        let ids = vec!["a".to_string(), "b,c".to_string()];
        let mut buf = Vec::new();
        write_labeled_matrix(&mut buf, "id", &numbered("x", 2), &ids, values.view()).unwrap();
        let back = read_labeled_matrix(buf.as_slice()).unwrap();
        assert_eq!(back.ids, ids);
        assert_eq!(back.columns, vec!["x_0", "x_1"]);
        assert_eq!(back.values, values);
    }

    #[test]
    fn rejects_bad_numbers() {
        let text = "id,a\nx,notanumber\n";
        assert!(matches!(read_labeled_matrix(text.as_bytes()), Err(TableError::Number { .. })));
    }
}
