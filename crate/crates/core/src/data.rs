//! Semicontinuous datasets: delimited-text ingestion and output, and the
//! `y = δ·z` decomposition feeding the two samplers.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::DatasetSummary;
use crate::error::{ConfigErrors, DataError, Error};
use crate::linalg::Mat;
use crate::part1::Part1Data;
use crate::part2::Part2Data;
use crate::scalar::Real;

/// Name given to the constant column prepended to `W`.
pub const INTERCEPT: &str = "intercept";

/// Which file columns play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub id: Option<String>,
    pub y: Option<String>,
    pub w: Vec<String>,
    pub x: Vec<String>,
    pub area: Option<String>,
    pub in_sample: Option<String>,
    /// Prepend a constant column to `W`.
    pub intercept: bool,
}

fn numbered(name: &str, prefix: char) -> bool {
    let mut chars = name.chars();
    chars.next() == Some(prefix) && {
        let rest = chars.as_str();
        !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())
    }
}

impl ColumnMap {
    /// The default mapping: `id`, `y`, `w1..`, `x1..`, `area` and
    /// `in_sample` where present, with an intercept.
    pub fn infer(header: &[String]) -> Self {
        let has = |n: &str| header.iter().any(|h| h == n).then(|| n.to_string());
        Self {
            id: has("id"),
            y: has("y"),
            w: header.iter().filter(|h| numbered(h, 'w')).cloned().collect(),
            x: header.iter().filter(|h| numbered(h, 'x')).cloned().collect(),
            area: has("area"),
            in_sample: has("in_sample"),
            intercept: true,
        }
    }
}

/// Units with response `y ≥ 0`, occurrence covariates `W` and intensity
/// covariates `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemicontinuousDataset<T: Real> {
    pub ids: Vec<String>,
    /// Absent for prediction-only files.
    pub y: Option<Vec<T>>,
    pub w: Mat<T>,
    pub w_names: Vec<String>,
    pub x: Mat<T>,
    pub x_names: Vec<String>,
    pub area: Option<Vec<String>>,
    pub in_sample: Option<Vec<bool>>,
}

impl<T: Real> SemicontinuousDataset<T> {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn r(&self) -> usize {
        self.w.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn response(&self) -> Result<&[T], DataError> {
        self.y.as_deref().ok_or_else(|| DataError::MissingColumn("y".into()))
    }

    /// `δ_i = I(y_i > 0)`.
    pub fn delta(&self) -> Result<Vec<bool>, DataError> {
        Ok(self.response()?.iter().map(|&v| v > T::zero()).collect())
    }

    /// Indices of positive-response units.
    pub fn positive(&self) -> Result<Vec<usize>, DataError> {
        Ok(self
            .response()?
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > T::zero())
            .map(|(i, _)| i)
            .collect())
    }

    pub fn w_row(&self, i: usize) -> Vec<T> {
        self.w.row(i).iter().copied().collect()
    }

    pub fn x_row(&self, i: usize) -> Vec<T> {
        self.x.row(i).iter().copied().collect()
    }

    /// Units at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            w: self.w.select_rows(idx),
            w_names: self.w_names.clone(),
            x: self.x.select_rows(idx),
            x_names: self.x_names.clone(),
            area: self.area.as_ref().map(|a| idx.iter().map(|&i| a[i].clone()).collect()),
            in_sample: self.in_sample.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn part1_data(&self) -> Result<Part1Data<T>, DataError> {
        Part1Data::new(self.delta()?, self.w.clone())
    }

    /// `(z, x)` rows of the positive units, `z` optionally on the log scale.
    pub fn part2_data(&self, log_z: bool) -> Result<Part2Data<T>, DataError> {
        let pos = self.positive()?;
        let y = self.response()?;
        let z: Vec<T> = pos.iter().map(|&i| y[i]).collect();
        Part2Data::new(&z, &self.x.select_rows(&pos), log_z)
    }

    /// Means and covariance of `(z, x)` over the positive units.
    pub fn summary(&self, log_z: bool) -> Result<DatasetSummary<T>, Error> {
        let y = self.response()?;
        let rows: Vec<Vec<T>> = self
            .positive()?
            .into_iter()
            .map(|i| {
                let z = if log_z { y[i].ln() } else { y[i] };
                std::iter::once(z).chain(self.x.row(i).iter().copied()).collect()
            })
            .collect();
        let mut names = vec![if log_z { "log_z".to_string() } else { "z".to_string() }];
        names.extend(self.x_names.iter().cloned());
        DatasetSummary::from_rows(&rows, names, self.r()).map_err(|e: ConfigErrors| e.into())
    }

    /// `"<n> units: <m> positive, <n - m> zero"`.
    pub fn summary_line(&self) -> String {
        match self.positive() {
            Ok(pos) => format!("{} units: {} positive, {} zero", self.n(), pos.len(), self.n() - pos.len()),
            Err(_) => format!("{} units (no response column)", self.n()),
        }
    }
}

fn parse_cell<T: Real>(raw: &str, line: usize, column: &str) -> Result<T, DataError> {
    let cell = |message: String| DataError::Cell {
        line,
        column: column.to_string(),
        message,
    };
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(cell("missing value".into()));
    }
    let v: T = s.parse().map_err(|_| cell(format!("'{s}' is not a number")))?;
    if !v.finite() {
        return Err(cell(format!("'{s}' is not finite")));
    }
    Ok(v)
}

fn parse_flag(raw: &str, line: usize, column: &str) -> Result<bool, DataError> {
    match raw.trim() {
        "1" | "true" | "TRUE" => Ok(true),
        "0" | "false" | "FALSE" => Ok(false),
        "" => Err(DataError::Cell {
            line,
            column: column.to_string(),
            message: "missing value".into(),
        }),
        s => Err(DataError::Cell {
            line,
            column: column.to_string(),
            message: format!("'{s}' is not 0/1"),
        }),
    }
}

/// Parse delimited text (tab, or comma when the header has no tab) with a
/// header line. `map = None` uses [`ColumnMap::infer`].
pub fn read_dataset<T: Real, R: Read>(mut input: R, map: Option<&ColumnMap>) -> Result<SemicontinuousDataset<T>, DataError> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| DataError::Invalid(format!("unreadable input: {e}")))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delim = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Invalid(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(DataError::Empty);
    }
    let inferred;
    let map = match map {
        Some(m) => m,
        None => {
            inferred = ColumnMap::infer(&header);
            &inferred
        }
    };
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let id_col = map.id.as_deref().map(col).transpose()?;
    let y_col = map.y.as_deref().map(col).transpose()?;
    let w_cols = map.w.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    let x_cols = map.x.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    let area_col = map.area.as_deref().map(col).transpose()?;
    let sample_col = map.in_sample.as_deref().map(col).transpose()?;

    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut x = Vec::new();
    let mut area = Vec::new();
    let mut in_sample = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Invalid(format!("row {}: {e}", row + 1)))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(row + 2);
        if rec.len() != header.len() {
            return Err(DataError::Cell {
                line,
                column: header.get(rec.len()).cloned().unwrap_or_default(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        ids.push(match id_col {
            Some(c) if !rec[c].is_empty() => rec[c].to_string(),
            Some(c) => {
                return Err(DataError::Cell {
                    line,
                    column: header[c].clone(),
                    message: "missing value".into(),
                })
            }
            None => (row + 1).to_string(),
        });
        if let Some(c) = y_col {
            let v: T = parse_cell(&rec[c], line, &header[c])?;
            if v < T::zero() {
                return Err(DataError::Cell {
                    line,
                    column: header[c].clone(),
                    message: format!("negative response {v}"),
                });
            }
            y.push(v);
        }
        if map.intercept {
            w.push(T::one());
        }
        for &c in &w_cols {
            w.push(parse_cell(&rec[c], line, &header[c])?);
        }
        for &c in &x_cols {
            x.push(parse_cell(&rec[c], line, &header[c])?);
        }
        if let Some(c) = area_col {
            if rec[c].is_empty() {
                return Err(DataError::Cell {
                    line,
                    column: header[c].clone(),
                    message: "missing value".into(),
                });
            }
            area.push(rec[c].to_string());
        }
        if let Some(c) = sample_col {
            in_sample.push(parse_flag(&rec[c], line, &header[c])?);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let r = w_cols.len() + usize::from(map.intercept);
    let mut w_names = Vec::with_capacity(r);
    if map.intercept {
        w_names.push(INTERCEPT.to_string());
    }
    w_names.extend(map.w.iter().cloned());
    Ok(SemicontinuousDataset {
        ids,
        y: y_col.map(|_| y),
        w: Mat::from_row_slice(n, r, &w),
        w_names,
        x: Mat::from_row_slice(n, x_cols.len(), &x),
        x_names: map.x.clone(),
        area: area_col.map(|_| area),
        in_sample: sample_col.map(|_| in_sample),
    })
}

pub fn load_dataset<T: Real>(path: &Path, map: Option<&ColumnMap>) -> Result<SemicontinuousDataset<T>, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_dataset(std::io::BufReader::new(f), map)?)
}

/// Tab-separated output readable by [`read_dataset`]; the intercept column
/// is omitted.
pub fn write_dataset<T: Real, W: Write>(out: &mut W, data: &SemicontinuousDataset<T>) -> std::io::Result<()> {
    let skip = usize::from(data.w_names.first().map(String::as_str) == Some(INTERCEPT));
    let mut head = vec!["id".to_string()];
    if data.y.is_some() {
        head.push("y".into());
    }
    head.extend(data.w_names[skip..].iter().cloned());
    head.extend(data.x_names.iter().cloned());
    if data.area.is_some() {
        head.push("area".into());
    }
    if data.in_sample.is_some() {
        head.push("in_sample".into());
    }
    writeln!(out, "{}", head.join("\t"))?;
    for i in 0..data.n() {
        let mut row = vec![data.ids[i].clone()];
        if let Some(y) = &data.y {
            row.push(y[i].to_string());
        }
        row.extend((skip..data.r()).map(|j| data.w[(i, j)].to_string()));
        row.extend((0..data.p()).map(|j| data.x[(i, j)].to_string()));
        if let Some(a) = &data.area {
            row.push(a[i].clone());
        }
        if let Some(s) = &data.in_sample {
            row.push(if s[i] { "1" } else { "0" }.into());
        }
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}
