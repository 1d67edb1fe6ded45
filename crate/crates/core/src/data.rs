//! Logits tables, file ingestion and seeded splits.
//!
//! Two on-disk formats are accepted:
//!
//! - CSV with header `z0,...,z{C-1},label`
//! - JSONL with one object per line: `{"logits": [...], "label": k}`

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::rng::{self, Purpose};

/// `N` samples of `C` raw logits plus an integer label each. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTable {
    num_classes: usize,
    logits: Vec<f64>,
    labels: Vec<usize>,
}

impl LogitsTable {
    /// Builds a table from row-major logits. Checks that every logit is
    /// finite and every label lies in `[0, C)`.
    pub fn new(num_classes: usize, logits: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if labels.is_empty() {
            return Err(Error::Validation("table has no samples".into()));
        }
        if logits.len() != labels.len() * num_classes {
            return Err(Error::Validation(format!(
                "expected {} logits for {} samples of {} classes, got {}",
                labels.len() * num_classes,
                labels.len(),
                num_classes,
                logits.len()
            )));
        }
        if let Some(pos) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite logit at row {}, column {}",
                pos / num_classes,
                pos % num_classes
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {label} at row {row} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            num_classes,
            logits,
            labels,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != num_classes) {
            return Err(Error::Validation(format!(
                "row {i} has {} logits, expected {num_classes}",
                rows[i].len()
            )));
        }
        if rows.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        Self::new(num_classes, rows.concat(), labels)
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.logits.chunks_exact(self.num_classes)
    }

    /// Copies the listed rows, in order, into a new table.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.num_samples() {
                return Err(argument(format!("index {i} out of range")));
            }
            logits.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.num_classes, logits, labels)
    }

    /// Writes the table as CSV with a `z0,...,label` header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.num_classes).map(|c| format!("z{c}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_write_error)?;
        for (row, &label) in self.rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|z| z.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec).map_err(csv_write_error)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: PathBuf::from("<csv>"),
            source: e,
        })
    }
}

fn csv_write_error(e: csv::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<csv>"),
        source: std::io::Error::other(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(argument(format!("unknown format '{other}' (expected csv or jsonl)"))),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

pub fn load_logits(path: &Path, format: Format) -> Result<LogitsTable> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        Format::Csv => read_csv(file, path),
        Format::Jsonl => read_jsonl(BufReader::new(file), path),
    }
}

/// Parses CSV logits. `origin` is only used in error messages.
pub fn read_csv<R: Read>(reader: R, origin: &Path) -> Result<LogitsTable> {
    let format_err = |line: usize, message: String| Error::Format {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| format_err(1, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 3 {
        return Err(format_err(
            1,
            format!("header needs at least two logit columns and a label, got {width} fields"),
        ));
    }
    if header.get(width - 1) != Some("label") {
        return Err(format_err(1, "last header column must be 'label'".into()));
    }
    let num_classes = width - 1;
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            format_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(format_err(
                line,
                format!("expected {width} fields, got {}", record.len()),
            ));
        }
        for (c, field) in record.iter().take(num_classes).enumerate() {
            let z: f64 = field
                .parse()
                .map_err(|_| format_err(line, format!("column z{c}: cannot parse '{field}'")))?;
            logits.push(z);
        }
        let label_field = &record[num_classes];
        let label: usize = label_field
            .parse()
            .map_err(|_| format_err(line, format!("cannot parse label '{label_field}'")))?;
        labels.push(label);
    }
    LogitsTable::new(num_classes, logits, labels)
}

#[derive(Deserialize)]
struct JsonRow {
    logits: Vec<f64>,
    label: usize,
}

/// Parses JSONL logits. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R, origin: &Path) -> Result<LogitsTable> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| Error::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if row.logits.len() != first {
                return Err(Error::Format {
                    path: origin.to_path_buf(),
                    line: line_no,
                    message: format!("expected {first} logits, got {}", row.logits.len()),
                });
            }
        }
        rows.push(row.logits);
        labels.push(row.label);
    }
    LogitsTable::from_rows(rows, labels)
}

/// Seeded partition of sample indices into calibration / CP / evaluation subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub calib_fraction: f64,
    pub cp_fraction: f64,
    pub seed: u64,
    pub calib_indices: Vec<usize>,
    pub cp_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

fn check_fractions(num_samples: usize, calib: f64, cp: f64) -> Result<(usize, usize)> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(calib) || !in_unit(cp) {
        return Err(argument(format!(
            "split fractions must lie in (0, 1), got calib={calib}, cp={cp}"
        )));
    }
    if calib + cp >= 1.0 {
        return Err(argument(format!(
            "calib + cp fractions must be < 1, got {}",
            calib + cp
        )));
    }
    let n_calib = (num_samples as f64 * calib).floor() as usize;
    let n_cp = (num_samples as f64 * cp).floor() as usize;
    if n_calib == 0 || n_cp == 0 {
        return Err(argument(format!(
            "{num_samples} samples give an empty subset (calib={n_calib}, cp={n_cp})"
        )));
    }
    Ok((n_calib, n_cp))
}

impl SplitPlan {
    /// Shuffles `0..num_samples` and cuts it into `floor(N·calib)` calibration
    /// rows, `floor(N·cp)` CP rows and the remainder for evaluation. Each
    /// index list is returned sorted.
    pub fn new(num_samples: usize, calib_fraction: f64, cp_fraction: f64, seed: u64) -> Result<Self> {
        let (n_calib, n_cp) = check_fractions(num_samples, calib_fraction, cp_fraction)?;
        let mut perm: Vec<usize> = (0..num_samples).collect();
        rng::shuffle(&mut rng::stream(seed, Purpose::Split, 0), &mut perm);
        let mut calib_indices = perm[..n_calib].to_vec();
        let mut cp_indices = perm[n_calib..n_calib + n_cp].to_vec();
        let mut eval_indices = perm[n_calib + n_cp..].to_vec();
        calib_indices.sort_unstable();
        cp_indices.sort_unstable();
        eval_indices.sort_unstable();
        Ok(Self {
            calib_fraction,
            cp_fraction,
            seed,
            calib_indices,
            cp_indices,
            eval_indices,
        })
    }

    /// Keeps the calibration rows and redraws the CP / evaluation partition
    /// of the remaining rows.
    pub fn redraw_cp(&self, seed: u64) -> Self {
        let mut rest: Vec<usize> = self
            .cp_indices
            .iter()
            .chain(&self.eval_indices)
            .copied()
            .collect();
        rest.sort_unstable();
        rng::shuffle(&mut rng::stream(seed, Purpose::Split, 1), &mut rest);
        let n_cp = self.cp_indices.len();
        let mut cp_indices = rest[..n_cp].to_vec();
        let mut eval_indices = rest[n_cp..].to_vec();
        cp_indices.sort_unstable();
        eval_indices.sort_unstable();
        Self {
            seed,
            cp_indices,
            eval_indices,
            ..self.clone()
        }
    }

    /// Calibration rows as in [`SplitPlan::new`]; the CP subset then takes up
    /// to `per_class` rows of each class from the shuffled remainder and the
    /// rest goes to evaluation.
    pub fn stratified_cp(
        table: &LogitsTable,
        calib_fraction: f64,
        per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = table.num_samples();
        if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
            return Err(argument(format!("calib fraction {calib_fraction} not in (0, 1)")));
        }
        if per_class == 0 {
            return Err(argument("per-class CP count must be positive"));
        }
        let n_calib = (n as f64 * calib_fraction).floor() as usize;
        if n_calib == 0 {
            return Err(argument("calibration subset would be empty"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng::stream(seed, Purpose::Split, 0), &mut perm);
        let mut taken = vec![0usize; table.num_classes()];
        let mut cp_indices = Vec::new();
        let mut eval_indices = Vec::new();
        for &i in &perm[n_calib..] {
            let y = table.label(i);
            if taken[y] < per_class {
                taken[y] += 1;
                cp_indices.push(i);
            } else {
                eval_indices.push(i);
            }
        }
        if eval_indices.is_empty() {
            return Err(argument("evaluation subset would be empty"));
        }
        let mut calib_indices = perm[..n_calib].to_vec();
        calib_indices.sort_unstable();
        cp_indices.sort_unstable();
        eval_indices.sort_unstable();
        Ok(Self {
            calib_fraction,
            cp_fraction: cp_indices.len() as f64 / n as f64,
            seed,
            calib_indices,
            cp_indices,
            eval_indices,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.calib_indices.len() + self.cp_indices.len() + self.eval_indices.len()
    }
}

pub fn make_split(
    table: &LogitsTable,
    calib_fraction: f64,
    cp_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    SplitPlan::new(table.num_samples(), calib_fraction, cp_fraction, seed)
}
