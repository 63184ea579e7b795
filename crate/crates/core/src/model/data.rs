//! Column-oriented tables and compositional datasets with CSV I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::simplex::{closure, CompositionSample};

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// Missing cells are stored as NaN.
    Numeric(Vec<f64>),
    /// Missing cells are stored as empty strings.
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell values as level labels; numbers use their shortest decimal form.
    pub fn labels(&self) -> Vec<String> {
        match self {
            Column::Numeric(v) => v.iter().map(|x| format_number(*x)).collect(),
            Column::Categorical(v) => v.clone(),
        }
    }

    fn cell(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => format_number(v[row]),
            Column::Categorical(v) => v[row].clone(),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Shortest round-trip representation; NaN is written as an empty cell.
pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// Named columns of equal length, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Column>,
    rows: usize,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<(), ModelError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(ModelError::Parse(format!("duplicate column '{name}'")));
        }
        if !self.names.is_empty() && column.len() != self.rows {
            return Err(ModelError::DimensionMismatch {
                expected: self.rows,
                found: column.len(),
            });
        }
        self.rows = column.len();
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, column: Column) -> Result<Self, ModelError> {
        self.push(name, column)?;
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, name: &str) -> Option<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    pub fn column(&self, name: &str) -> Result<&Column, ModelError> {
        self.get(name)
            .ok_or_else(|| ModelError::UnknownColumn(name.to_string()))
    }

    /// Numeric column with every value finite.
    pub fn numeric(&self, name: &str) -> Result<&[f64], ModelError> {
        match self.column(name)? {
            Column::Numeric(v) => {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(ModelError::MissingValue {
                        column: name.to_string(),
                        row,
                    });
                }
                Ok(v)
            }
            Column::Categorical(_) => Err(ModelError::NotNumeric(name.to_string())),
        }
    }

    /// Level labels with no missing cell.
    pub fn labels(&self, name: &str) -> Result<Vec<String>, ModelError> {
        let labels = self.column(name)?.labels();
        if let Some(row) = labels.iter().position(|l| l.is_empty()) {
            return Err(ModelError::MissingValue {
                column: name.to_string(),
                row,
            });
        }
        Ok(labels)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            rows: rows.len(),
        }
    }

    /// Parse CSV with a header row. A column is numeric when every non-empty
    /// cell parses as a number.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Table, ModelError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| ModelError::Csv(e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record.map_err(|e| ModelError::Csv(e.to_string()))?;
            for (j, value) in record.iter().enumerate() {
                cells[j].push(value.trim().to_string());
            }
        }
        let mut table = Table::new();
        for (name, raw) in headers.into_iter().zip(cells) {
            let parsed: Option<Vec<f64>> = raw
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        Some(f64::NAN)
                    } else {
                        s.parse::<f64>().ok()
                    }
                })
                .collect();
            let all_missing = raw.iter().all(|s| s.is_empty());
            let column = match parsed {
                Some(v) if !all_missing => Column::Numeric(v),
                _ => Column::Categorical(raw),
            };
            table.push(name, column)?;
        }
        Ok(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Table, ModelError> {
        let file = std::fs::File::open(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)
            .map_err(|e| ModelError::Csv(e.to_string()))?;
        for r in 0..self.rows {
            let row: Vec<String> = self.columns.iter().map(|c| c.cell(r)).collect();
            w.write_record(&row).map_err(|e| ModelError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| ModelError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Closure constant implied by raw row sums: 100 when every row sums to
/// 100 within 0.5, 1 when every row sums to 1 within 0.005, otherwise 1
/// (rows are then treated as unnormalised positive amounts).
pub fn detect_kappa(rows: &[Vec<f64>]) -> f64 {
    let sums: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    if !sums.is_empty() && sums.iter().all(|s| (s - 100.0).abs() <= 0.5) {
        100.0
    } else {
        1.0
    }
}

/// Compositions plus covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub part_names: Vec<String>,
    pub composition: CompositionSample,
    pub covariates: Table,
}

impl Dataset {
    pub fn new(
        part_names: Vec<String>,
        composition: CompositionSample,
        covariates: Table,
    ) -> Result<Self, ModelError> {
        if part_names.len() != composition.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: composition.dim(),
                found: part_names.len(),
            });
        }
        if covariates.ncols() > 0 && covariates.nrows() != composition.len() {
            return Err(ModelError::DimensionMismatch {
                expected: composition.len(),
                found: covariates.nrows(),
            });
        }
        Ok(Self {
            part_names,
            composition,
            covariates,
        })
    }

    /// Split a table into composition columns `parts` and covariates.
    pub fn from_table(table: &Table, parts: &[String]) -> Result<Self, ModelError> {
        if parts.len() < 2 {
            return Err(ModelError::Parse("need at least two composition columns".into()));
        }
        let mut raw = vec![Vec::with_capacity(parts.len()); table.nrows()];
        for name in parts {
            let values = table.numeric(name)?;
            for (row, v) in raw.iter_mut().zip(values) {
                row.push(*v);
            }
        }
        let kappa = detect_kappa(&raw);
        let sample = CompositionSample::new(
            raw.iter()
                .map(|r| closure(r, kappa))
                .collect::<Result<Vec<_>, _>>()?,
        )?;
        let mut covariates = Table::new();
        for name in table.names() {
            if !parts.contains(name) {
                covariates.push(name.clone(), table.column(name)?.clone())?;
            }
        }
        Dataset::new(parts.to_vec(), sample, covariates)
    }

    pub fn from_csv_path(path: &Path, parts: &[String]) -> Result<Self, ModelError> {
        Self::from_table(&Table::from_csv_path(path)?, parts)
    }

    pub fn nrows(&self) -> usize {
        self.composition.len()
    }

    pub fn dim(&self) -> usize {
        self.composition.dim()
    }

    /// Parts first, then covariates.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        for (j, name) in self.part_names.iter().enumerate() {
            let col = self.composition.rows().iter().map(|c| c.parts()[j]).collect();
            t.push(name.clone(), Column::Numeric(col))
                .expect("part names are unique");
        }
        for name in self.covariates.names() {
            t.push(name.clone(), self.covariates.get(name).unwrap().clone())
                .expect("covariate names are unique");
        }
        t
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset, ModelError> {
        let comp = CompositionSample::new(
            rows.iter()
                .map(|&i| self.composition.rows()[i].clone())
                .collect(),
        )?;
        Dataset::new(self.part_names.clone(), comp, self.covariates.select_rows(rows))
    }
}
