//! Column-oriented data tables and CSV ingestion.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One raw data column as read from a file or supplied by a caller.
#[derive(Clone, Debug, PartialEq)]
pub enum DataColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
    /// Several numeric columns gathered into one matrix-valued covariate
    /// (multi-dimensional continuous, or a discretised functional covariate).
    Matrix(DMatrix<f64>),
}

impl DataColumn {
    pub fn len(&self) -> usize {
        match self {
            DataColumn::Numeric(v) => v.len(),
            DataColumn::Categorical(v) => v.len(),
            DataColumn::Matrix(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<DataColumn>,
}

impl DataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_column(&mut self, name: impl Into<String>, col: DataColumn) -> Result<()> {
        if let Some(first) = self.columns.first() {
            if first.len() != col.len() {
                return Err(Error::DimensionMismatch(format!(
                    "column length {} does not match table length {}",
                    col.len(),
                    first.len()
                )));
            }
        }
        self.names.push(name.into());
        self.columns.push(col);
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&DataColumn> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn require_column(&self, name: &str) -> Result<&DataColumn> {
        self.column(name).ok_or_else(|| Error::UnknownColumn(name.to_owned()))
    }

    /// Gather every numeric column whose name starts with `prefix` (in file
    /// order) into one matrix-valued column. Used for functional covariates
    /// declared as a column-name prefix.
    pub fn gather_prefix(&self, prefix: &str) -> Result<DMatrix<f64>> {
        let mut cols: Vec<&Vec<f64>> = Vec::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            if name.starts_with(prefix) {
                match col {
                    DataColumn::Numeric(v) => cols.push(v),
                    _ => {
                        return Err(Error::Data(format!(
                            "column `{name}` under prefix `{prefix}` is not numeric"
                        )))
                    }
                }
            }
        }
        if cols.len() < 2 {
            return Err(Error::Data(format!(
                "functional prefix `{prefix}` matched {} columns; need at least 2",
                cols.len()
            )));
        }
        let n = cols[0].len();
        Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
    }

    /// Read a CSV file with a header row. A column is numeric iff every cell
    /// parses as a float; otherwise it is kept as categorical labels.
    pub fn from_csv_path(path: &Path) -> Result<DataTable> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_str(text: &str) -> Result<DataTable> {
        Self::from_csv_reader(text.as_bytes())
    }

    pub fn from_csv_reader<R: Read>(rdr: R) -> Result<DataTable> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rdr);
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Data(format!("csv header: {e}")))?
            .iter()
            .map(|s| s.trim().to_owned())
            .collect();
        if headers.is_empty() {
            return Err(Error::Data("csv file has no header row".into()));
        }
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("csv row: {e}")))?;
            if record.len() != headers.len() {
                return Err(Error::Data(format!(
                    "csv row has {} fields, expected {}",
                    record.len(),
                    headers.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                cells[j].push(field.trim().to_owned());
            }
        }
        let mut table = DataTable::new();
        for (name, col_cells) in headers.into_iter().zip(cells) {
            let parsed: Option<Vec<f64>> =
                col_cells.iter().map(|s| s.parse::<f64>().ok()).collect();
            let col = match parsed {
                Some(nums) => DataColumn::Numeric(nums),
                None => DataColumn::Categorical(col_cells),
            };
            table.push_column(name, col)?;
        }
        Ok(table)
    }
}

/// Canonical label for a numeric value coerced to a categorical level
/// (integral values drop the fractional part so 1 and 1.0 share a level).
pub fn numeric_label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
