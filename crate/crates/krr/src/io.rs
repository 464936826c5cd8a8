//! CSV and text formats.
//!
//! Data files are CSV with a header row. The outcome column is `y`. Inputs
//! are either numeric columns named `x` or `x<k>` (taken in header order) or
//! a single `ranking` column holding a permutation such as `"3,1,2"`, the
//! rank of each alternative. Other columns are ignored.
//!
//! Ranking lists may also be given as plain text, one comma-separated
//! permutation per line (`#` starts a comment).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use krr_core::kernels::InputShape;
use krr_core::{Dataset, EvalGrid, InputPoint, Ranking};
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

/// Grid used when `--grid auto` has no explicit size.
pub const DEFAULT_GRID_SIZE: usize = 512;

/// Largest `q` for which `--grid auto` enumerates every ranking.
pub const MAX_AUTO_RANKING_Q: usize = 8;

enum InputColumns {
    Vector(Vec<usize>),
    Ranking(usize),
}

struct Table {
    points: Vec<InputPoint>,
    ys: Option<Vec<f64>>,
}

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        kind => parse_error(path, line, format!("{:?}", kind)),
    }
}

fn is_x_column(name: &str) -> bool {
    name == "x" || (name.len() > 1 && name.starts_with('x') && name[1..].bytes().all(|b| b.is_ascii_digit()))
}

/// Parses a ranking written with `,`, `;` or whitespace separators.
pub fn parse_ranking(text: &str) -> std::result::Result<Ranking, String> {
    let ranks = text
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad rank entry {t:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ranking::from_ranks(ranks).map_err(|e| e.to_string())
}

fn read_table(path: &Path, need_y: bool) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let y_col = headers.iter().position(|h| h == "y");
    if need_y && y_col.is_none() {
        return Err(parse_error(path, 1, "missing y column"));
    }
    let ranking_col = headers.iter().position(|h| h == "ranking");
    let x_cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| is_x_column(h)).map(|(i, _)| i).collect();
    let columns = match (ranking_col, x_cols.is_empty()) {
        (Some(_), false) => return Err(parse_error(path, 1, "both ranking and x columns present")),
        (Some(c), true) => InputColumns::Ranking(c),
        (None, false) => InputColumns::Vector(x_cols),
        (None, true) => return Err(parse_error(path, 1, "no input columns (expected x, x1, ... or ranking)")),
    };

    let mut points = Vec::new();
    let mut ys = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            let text = field(i);
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(
                    path,
                    line,
                    format!("column {:?}: expected a finite number, got {text:?}", &headers[i]),
                )),
            }
        };
        let point = match &columns {
            InputColumns::Vector(cols) => InputPoint::Vector(cols.iter().map(|&c| number(c)).collect::<Result<_>>()?),
            InputColumns::Ranking(c) => {
                InputPoint::Ranking(parse_ranking(field(*c)).map_err(|msg| parse_error(path, line, msg))?)
            }
        };
        if let (Some(InputPoint::Ranking(first)), InputPoint::Ranking(r)) = (points.first(), &point) {
            if first.q() != r.q() {
                return Err(parse_error(
                    path,
                    line,
                    format!("ranking of {} alternatives, expected {}", r.q(), first.q()),
                ));
            }
        }
        if let Some(c) = y_col {
            if need_y {
                ys.push(number(c)?);
            }
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(parse_error(path, 2, "no data rows"));
    }
    Ok(Table { points, ys: need_y.then_some(ys) })
}

/// Reads a training set.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let table = read_table(path, true)?;
    Ok(Dataset::new(table.points, table.ys.unwrap_or_default())?)
}

/// Reads rankings from a text file, one per line.
pub fn read_ranking_lines(path: &Path) -> Result<Vec<InputPoint>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let r = parse_ranking(text).map_err(|msg| parse_error(path, i as u64 + 1, msg))?;
        out.push(InputPoint::Ranking(r));
    }
    if out.is_empty() {
        return Err(parse_error(path, 1, "no rankings"));
    }
    Ok(out)
}

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt")
}

/// Reads input points from a CSV (ignoring any `y`) or a ranking text file.
pub fn read_points(path: &Path) -> Result<Vec<InputPoint>> {
    if is_text(path) {
        read_ranking_lines(path)
    } else {
        Ok(read_table(path, false)?.points)
    }
}

/// Resolves a `--grid` argument: `auto`, `auto:N`, or a file path.
///
/// `auto:N` means `N` equispaced points on `[0, 1]` for scalar inputs and
/// every permutation for ranking inputs.
pub fn resolve_grid(arg: &str, shape: InputShape) -> Result<EvalGrid> {
    let size = if arg == "auto" {
        Some(DEFAULT_GRID_SIZE)
    } else if let Some(rest) = arg.strip_prefix("auto:") {
        Some(rest.parse::<usize>().map_err(|_| CliError::config(format!("bad grid size in {arg:?}")))?)
    } else {
        None
    };
    match (size, shape) {
        (Some(n), InputShape::Vector(1)) => Ok(EvalGrid::unit_interval(n)?),
        (Some(_), InputShape::Ranking(q)) if q <= MAX_AUTO_RANKING_Q => {
            Ok(EvalGrid::new(Ranking::all(q).into_iter().map(InputPoint::Ranking).collect())?)
        }
        (Some(_), InputShape::Ranking(q)) => Err(CliError::config(format!(
            "automatic ranking grids stop at q = {MAX_AUTO_RANKING_Q}, model has q = {q}"
        ))),
        (Some(_), InputShape::Vector(d)) => {
            Err(CliError::config(format!("automatic grids need scalar inputs, model has dimension {d}")))
        }
        (None, _) => Ok(EvalGrid::new(read_points(Path::new(arg))?)?),
    }
}

/// Reads a square matrix from a header-less CSV.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(path, line, format!("expected a finite number, got {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(parse_error(path, 1, "empty matrix"));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(parse_error(
            path,
            i as u64 + 1,
            format!("row has {} entries, expected {n} for a square matrix", r.len()),
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Text form of a float that parses back to the same bits.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Text form of an input point: the vector entries, or the ranking.
pub fn point_fields(p: &InputPoint) -> Vec<String> {
    match p {
        InputPoint::Vector(v) => v.iter().map(|&x| num(x)).collect(),
        InputPoint::Ranking(r) => vec![r.to_string()],
    }
}

/// Header names matching [`point_fields`].
pub fn point_headers(shape: InputShape) -> Vec<String> {
    match shape {
        InputShape::Vector(1) => vec!["x".into()],
        InputShape::Vector(d) => (1..=d).map(|k| format!("x{k}")).collect(),
        InputShape::Ranking(_) => vec!["ranking".into()],
    }
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map_err(|e| CliError::io(path, e))
}

/// Writes a CSV table.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes one float per line.
pub fn write_lines(path: &Path, values: &[f64]) -> Result<PathBuf> {
    let mut w = BufWriter::new(create(path)?);
    for v in values {
        writeln!(w, "{}", num(*v)).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.to_string()))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() as u64 + 1);
        parse_error(path, line, e.message().to_string())
    })
}
