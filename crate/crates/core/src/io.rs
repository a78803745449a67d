//! Dataset loaders: CSV series, UCR-style text files and sktime `.ts` files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::{Dataset, Split, TimeSeries};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_value(tok: &str) -> Option<f64> {
    let t = tok.trim();
    if t == "?" || t.eq_ignore_ascii_case("nan") || t.is_empty() {
        return Some(f64::NAN);
    }
    t.parse().ok()
}

/// A CSV series plus the names of its feature columns.
#[derive(Debug, Clone)]
pub struct CsvSeries {
    pub series: TimeSeries,
    pub columns: Vec<String>,
}

/// Loads a CSV file whose first column may be a timestamp (detected when it
/// does not parse as a number). With `target`, only that named column is kept.
pub fn load_csv(path: impl AsRef<Path>, target: Option<&str>) -> Result<CsvSeries> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut skip_first: Option<bool> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let skip = *skip_first.get_or_insert_with(|| rec.get(0).and_then(parse_value).is_none());
        let row: Option<Vec<f64>> = rec.iter().skip(usize::from(skip)).map(parse_value).collect();
        let row = row.ok_or_else(|| parse_err(path, line, "non-numeric feature value"))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(path, line, format!("expected {} fields, got {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let offset = usize::from(skip_first.unwrap_or(false));
    let mut columns: Vec<String> = headers.into_iter().skip(offset).collect();
    let width = rows[0].len();
    let pick: Vec<usize> = match target {
        Some(name) => {
            let j = columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::invalid(format!("column {name:?} not found in {}", path.display())))?;
            columns = vec![name.to_string()];
            vec![j]
        }
        None => (0..width).collect(),
    };
    let mut values = Array2::zeros((rows.len(), pick.len()));
    for (t, row) in rows.iter().enumerate() {
        for (k, &j) in pick.iter().enumerate() {
            values[[t, k]] = row[j];
        }
    }
    let id = path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Ok(CsvSeries { series: TimeSeries::new(values, id)?, columns })
}

/// Instances with their raw string labels, before label indexing.
#[derive(Debug, Clone, Default)]
pub struct RawLabelled {
    pub instances: Vec<TimeSeries>,
    pub labels: Vec<String>,
    /// Class list declared in the file header, when present.
    pub declared_classes: Option<Vec<String>>,
}

/// Parses a univariate UCR-style text file: one instance per line,
/// `label<TAB>v1,v2,...` (values may also be tab separated).
pub fn parse_ucr(path: impl AsRef<Path>) -> Result<RawLabelled> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = RawLabelled::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, rest) = line
            .split_once('\t')
            .or_else(|| line.split_once(','))
            .ok_or_else(|| parse_err(path, line_no, "expected `label<TAB>values`"))?;
        let vals: Option<Vec<f64>> = rest.split([',', '\t']).map(parse_value).collect();
        let vals = vals.ok_or_else(|| parse_err(path, line_no, "unparseable value"))?;
        if vals.is_empty() {
            return Err(parse_err(path, line_no, "instance has no values"));
        }
        let ts = TimeSeries::univariate(&vals, format!("{}:{line_no}", path.display()))
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        out.instances.push(ts);
        out.labels.push(label.trim().to_string());
    }
    if out.instances.is_empty() {
        return Err(parse_err(path, 1, "no instances"));
    }
    Ok(out)
}

/// Parses the sktime `.ts` layout: `@` header lines, then one instance per
/// line with dimensions separated by `:` and the class label last.
pub fn parse_ts(path: impl AsRef<Path>) -> Result<RawLabelled> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = RawLabelled::default();
    let mut in_data = false;
    let mut has_labels = true;
    let mut dims: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("@data") {
                in_data = true;
            } else if let Some(rest) = lower.strip_prefix("@classlabel") {
                let mut it = line["@classLabel".len()..].split_whitespace();
                let flag = rest.split_whitespace().next().unwrap_or("");
                match flag {
                    "true" => {
                        it.next();
                        out.declared_classes = Some(it.map(str::to_string).collect());
                    }
                    "false" => has_labels = false,
                    _ => return Err(parse_err(path, line_no, "bad @classLabel")),
                }
            } else if let Some(rest) = lower.strip_prefix("@dimensions") {
                dims = Some(rest.trim().parse().map_err(|_| parse_err(path, line_no, "bad @dimensions"))?);
            } else if !line.starts_with('@') {
                return Err(parse_err(path, line_no, "data before @data"));
            }
            continue;
        }
        let mut parts: Vec<&str> = line.split(':').collect();
        let label = if has_labels {
            let l = parts.pop().ok_or_else(|| parse_err(path, line_no, "missing label"))?;
            Some(l.trim().to_string())
        } else {
            None
        };
        if parts.is_empty() {
            return Err(parse_err(path, line_no, "instance has no dimensions"));
        }
        if let Some(d) = dims {
            if parts.len() != d {
                return Err(parse_err(path, line_no, format!("expected {d} dimensions, got {}", parts.len())));
            }
        }
        let channels: Option<Vec<Vec<f64>>> = parts
            .iter()
            .map(|p| p.split(',').map(parse_value).collect::<Option<Vec<f64>>>())
            .collect();
        let channels = channels.ok_or_else(|| parse_err(path, line_no, "unparseable value"))?;
        let t = channels.iter().map(Vec::len).max().unwrap_or(0);
        let mut values = Array2::from_elem((t, channels.len()), f64::NAN);
        for (f, ch) in channels.iter().enumerate() {
            for (ti, &v) in ch.iter().enumerate() {
                values[[ti, f]] = v;
            }
        }
        let ts = TimeSeries::new(values, format!("{}:{line_no}", path.display()))
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if let Some(first) = out.instances.first() {
            if first.n_features() != ts.n_features() {
                return Err(parse_err(path, line_no, "dimension count changed between instances"));
            }
        }
        out.instances.push(ts);
        out.labels.push(label.unwrap_or_default());
    }
    if !in_data {
        return Err(parse_err(path, text.lines().count().max(1), "missing @data section"));
    }
    if out.instances.is_empty() {
        return Err(parse_err(path, text.lines().count().max(1), "no instances"));
    }
    if !has_labels {
        out.labels.clear();
    }
    Ok(out)
}

fn class_order(declared: Option<&[String]>, seen: &[&str]) -> Vec<String> {
    if let Some(d) = declared {
        if !d.is_empty() {
            return d.to_vec();
        }
    }
    let uniq: BTreeSet<&str> = seen.iter().copied().collect();
    let mut v: Vec<String> = uniq.into_iter().map(str::to_string).collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Builds one labelled dataset from TRAIN and TEST parts with a shared class
/// index.
pub fn labelled_dataset(name: &str, train: RawLabelled, test: RawLabelled) -> Result<Dataset> {
    let declared = train.declared_classes.clone().or_else(|| test.declared_classes.clone());
    let seen: Vec<&str> = train.labels.iter().chain(&test.labels).map(String::as_str).collect();
    let classes = class_order(declared.as_deref(), &seen);
    let index = |l: &String| -> Result<usize> {
        classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::invalid(format!("label {l:?} not among declared classes")))
    };
    let has_labels = !train.labels.is_empty();
    let mut instances = train.instances;
    let mut splits = vec![Split::Train; instances.len()];
    let mut labels = Vec::new();
    if has_labels {
        for l in &train.labels {
            labels.push(index(l)?);
        }
        for l in &test.labels {
            labels.push(index(l)?);
        }
    }
    splits.extend(std::iter::repeat_n(Split::Test, test.instances.len()));
    instances.extend(test.instances);
    let mut ds = Dataset::new(name, instances, has_labels.then_some(labels), splits)?;
    if has_labels {
        ds = ds.with_num_classes(classes.len())?;
    }
    ds.class_names = classes;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveFormat {
    Ucr,
    Ts,
}

/// Loads `<dir>/<name>_TRAIN.<ext>` and `<dir>/<name>_TEST.<ext>`.
pub fn load_archive(dir: impl AsRef<Path>, name: &str, format: ArchiveFormat) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (train, test) = archive_paths(dir, name, format);
    let parse = |p: &Path| match format {
        ArchiveFormat::Ucr => parse_ucr(p),
        ArchiveFormat::Ts => parse_ts(p),
    };
    labelled_dataset(name, parse(&train)?, parse(&test)?)
}

pub fn archive_paths(dir: &Path, name: &str, format: ArchiveFormat) -> (PathBuf, PathBuf) {
    let ext = match format {
        ArchiveFormat::Ucr => "tsv",
        ArchiveFormat::Ts => "ts",
    };
    (dir.join(format!("{name}_TRAIN.{ext}")), dir.join(format!("{name}_TEST.{ext}")))
}
