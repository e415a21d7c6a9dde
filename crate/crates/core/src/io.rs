//! File formats: logits CSV, point/weight CSV, JSON reports and manifests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::metrics::EvaluationRecord;
use crate::types::{EmpiricalMeasure, LogitsDataset, UNLABELED};

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            context: format!("reading {}", path.display()),
            source,
        },
        kind => parse_error(path, line, format!("{kind:?}")),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

/// Checks that `header` is `first,prefix_0,...,prefix_{K-1}` and returns `K`.
fn header_width(path: &Path, header: &csv::StringRecord, first: &str, prefix: &str) -> Result<usize> {
    if header.get(0).map(str::trim) != Some(first) {
        return Err(parse_error(path, 1, format!("header must start with `{first}`")));
    }
    let k = header.len() - 1;
    if k == 0 {
        return Err(parse_error(path, 1, format!("header has no `{prefix}_*` columns")));
    }
    for (c, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("{prefix}_{c}") {
            return Err(parse_error(
                path,
                1,
                format!("column {} is `{name}`, expected `{prefix}_{c}`", c + 2),
            ));
        }
    }
    Ok(k)
}

fn parse_float(path: &Path, line: u64, column: &str, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("{column}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("{column}: `{field}` is not finite")));
    }
    Ok(v)
}

/// Reads `label,logit_0,...,logit_{K-1}`; label `-1` marks an unlabeled row.
pub fn read_logits_csv(path: &Path) -> Result<LogitsDataset> {
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let k = header_width(path, &header, "label", "logit")?;

    let mut labels = Vec::new();
    let mut logits = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != k + 1 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", k + 1, record.len()),
            ));
        }
        let raw = record[0].trim();
        let label: i64 = raw
            .parse()
            .map_err(|_| parse_error(path, line, format!("label `{raw}` is not an integer")))?;
        labels.push(match label {
            UNLABELED => None,
            y if (0..k as i64).contains(&y) => Some(y as usize),
            y => {
                return Err(parse_error(
                    path,
                    line,
                    format!("label {y} outside [0, {k}) and not {UNLABELED}"),
                ))
            }
        });
        for c in 0..k {
            logits.push(parse_float(path, line, &format!("logit_{c}"), &record[c + 1])?);
        }
    }
    if labels.is_empty() {
        return Err(parse_error(path, 1, "no data rows"));
    }
    LogitsDataset::from_flat(k, labels, logits)
}

/// Writes the logits CSV with shortest round-trip float formatting.
pub fn write_logits_csv(path: &Path, data: &LogitsDataset) -> Result<()> {
    let k = data.num_classes();
    let mut out = String::from("label");
    for c in 0..k {
        out.push_str(&format!(",logit_{c}"));
    }
    out.push('\n');
    for (i, row) in data.rows().enumerate() {
        let label = data.label(i).map_or(UNLABELED, |y| y as i64);
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads `weight,x_0,...,x_{K-1}` rows into a measure; weights are normalized.
pub fn read_measure_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let k = header_width(path, &header, "weight", "x")?;

    let mut weights = Vec::new();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != k + 1 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", k + 1, record.len()),
            ));
        }
        let w = parse_float(path, line, "weight", &record[0])?;
        if w <= 0.0 {
            return Err(parse_error(path, line, format!("weight {w} is not positive")));
        }
        weights.push(w);
        for c in 0..k {
            points.push(parse_float(path, line, &format!("x_{c}"), &record[c + 1])?);
        }
    }
    if weights.is_empty() {
        return Err(parse_error(path, 1, "no data rows"));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().all(|&w| w == weights[0]) {
        return EmpiricalMeasure::uniform(k, points);
    }
    EmpiricalMeasure::new(k, points, weights.iter().map(|w| w / total).collect())
}

/// Scatter data for external plotting.
pub fn write_scatter_csv(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    let mut out = String::from("target_id,predicted,true_error\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.target_id, r.predicted, r.true_error));
    }
    write_atomic(path, out.as_bytes())
}

/// Pretty JSON whose floats always carry 17 significant digits.
struct FixedDigits {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with fixed 17-digit floats and a
/// trailing newline. Non-finite floats become `null`.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let formatter = FixedDigits {
        pretty: PrettyFormatter::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, formatter);
    value.serialize(&mut ser).map_err(|source| Error::Json {
        context: "serializing report".into(),
        source,
    })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("parsing {}", path.display()),
        source,
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let context = || format!("writing {}", path.display());
    fs::write(&tmp, bytes).map_err(|e| Error::io(context(), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(context(), e)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub target_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_error: Option<f64>,
    /// Second model's logits on the same rows, for GDE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_path: Option<String>,
}

/// List of targets; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub targets: Vec<ManifestEntry>,
}

fn schema_version() -> u32 {
    1
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.targets {
            if e.path.trim().is_empty() {
                return Err(Error::validation(format!("target {} has an empty path", e.target_id)));
            }
            if !seen.insert(e.target_id.as_str()) {
                return Err(Error::validation(format!("duplicate target_id {}", e.target_id)));
            }
            if let Some(t) = e.true_error {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::validation(format!(
                        "target {} has true_error {t} outside [0, 1]",
                        e.target_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads and validates a manifest, resolving paths to absolute locations.
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: Manifest = read_json(path)?;
        manifest.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.targets {
            e.path = base.join(&e.path).display().to_string();
            if let Some(p) = &mut e.second_path {
                *p = base.join(&*p).display().to_string();
            }
        }
        Ok(manifest)
    }
}
