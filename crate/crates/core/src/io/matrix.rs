//! Paired unspliced / spliced matrices and their file formats.
//!
//! CSV: a header row `cell,<gene_1>,...,<gene_G>` followed by one row per cell,
//! the cell id first. Values are written with Rust's shortest round-trip
//! formatting so a write/load cycle is exact.
//!
//! MTX: Matrix Market `coordinate real general`, rows are cells and columns are
//! genes (1-based). Entries that are absent are zero. Names live in two sidecar
//! files next to `<stem>.mtx`: `<stem>_cells.txt` and `<stem>_genes.txt`, one
//! name per line.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::preprocess::Provenance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Mtx,
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "mtx" => Ok(MatrixFormat::Mtx),
            other => Err(Error::Config(format!("unknown matrix format {other:?} (expected csv or mtx)"))),
        }
    }
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Mtx => "mtx",
        }
    }
}

/// N cells x G genes of paired unspliced / spliced values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub cell_ids: Vec<String>,
    pub gene_names: Vec<String>,
    pub unspliced: Array2<f64>,
    pub spliced: Array2<f64>,
    pub capture_times: Option<Vec<f64>>,
    pub labels: Option<Vec<String>>,
    pub provenance: Option<Provenance>,
}

impl ExpressionMatrix {
    pub fn new(cell_ids: Vec<String>, gene_names: Vec<String>, unspliced: Array2<f64>, spliced: Array2<f64>) -> Result<Self> {
        let m = Self { cell_ids, gene_names, unspliced, spliced, capture_times: None, labels: None, provenance: None };
        m.validate()?;
        Ok(m)
    }

    pub fn n_cells(&self) -> usize {
        self.unspliced.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.unspliced.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.unspliced.dim() != self.spliced.dim() {
            return Err(Error::Shape(format!(
                "unspliced {:?} and spliced {:?} differ",
                self.unspliced.dim(),
                self.spliced.dim()
            )));
        }
        let (n, g) = self.unspliced.dim();
        if self.cell_ids.len() != n || self.gene_names.len() != g {
            return Err(Error::Shape(format!(
                "{} cell ids and {} gene names for a {n}x{g} matrix",
                self.cell_ids.len(),
                self.gene_names.len()
            )));
        }
        unique("cell id", &self.cell_ids)?;
        unique("gene name", &self.gene_names)?;
        for (name, m) in [("unspliced", &self.unspliced), ("spliced", &self.spliced)] {
            if let Some(((i, j), v)) = m.indexed_iter().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Data(format!(
                    "{name} value {v} for cell {} gene {} must be finite and non-negative",
                    self.cell_ids[i], self.gene_names[j]
                )));
            }
        }
        if let Some(t) = &self.capture_times {
            if t.len() != n {
                return Err(Error::Shape(format!("{} capture times for {n} cells", t.len())));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} cells", l.len())));
            }
        }
        Ok(())
    }

    /// Rows `cells` in the given order, keeping gene columns and metadata.
    pub fn select_cells(&self, cells: &[usize]) -> ExpressionMatrix {
        let pick = |m: &Array2<f64>| Array2::from_shape_fn((cells.len(), m.ncols()), |(i, j)| m[[cells[i], j]]);
        ExpressionMatrix {
            cell_ids: cells.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            gene_names: self.gene_names.clone(),
            unspliced: pick(&self.unspliced),
            spliced: pick(&self.spliced),
            capture_times: self.capture_times.as_ref().map(|t| cells.iter().map(|&i| t[i]).collect()),
            labels: self.labels.as_ref().map(|l| cells.iter().map(|&i| l[i].clone()).collect()),
            provenance: self.provenance.clone(),
        }
    }
}

fn unique(what: &str, names: &[String]) -> Result<()> {
    let mut seen = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = seen.insert(n.as_str(), i) {
            return Err(Error::Data(format!("duplicate {what} {n:?} at positions {j} and {i}")));
        }
    }
    Ok(())
}

/// One labelled matrix as read from a single file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Array2<f64>,
}

pub fn read_csv_matrix(path: &Path) -> Result<LabelledMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::parse(path, e.to_string()),
        _ => Error::Csv(e),
    })?;
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::parse(path, "header needs a cell column and at least one gene"));
    }
    let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != cols.len() + 1 {
            return Err(Error::parse(path, format!("row {} has {} fields, expected {}", line + 2, record.len(), cols.len() + 1)));
        }
        rows.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: {field:?} is not a number", line + 2)))?;
            values.push(v);
        }
    }
    let values = Array2::from_shape_vec((rows.len(), cols.len()), values).expect("row lengths checked");
    Ok(LabelledMatrix { rows, cols, values })
}

pub fn write_csv_matrix(path: &Path, rows: &[String], cols: &[String], values: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell".to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(cols.len() + 1);
    for (i, id) in rows.iter().enumerate() {
        record.clear();
        record.push(id.clone());
        record.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn sidecar_paths(mtx: &Path) -> (PathBuf, PathBuf) {
    let stem = mtx.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
    let dir = mtx.parent().unwrap_or_else(|| Path::new(""));
    (dir.join(format!("{stem}_cells.txt")), dir.join(format!("{stem}_genes.txt")))
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn read_mtx_matrix(path: &Path) -> Result<LabelledMatrix> {
    let (cells_path, genes_path) = sidecar_paths(path);
    let rows = read_names(&cells_path)?;
    let cols = read_names(&genes_path)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();
    let (_, banner) = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let banner = banner.map_err(|e| Error::io(path, e))?.to_lowercase();
    let fields: Vec<&str> = banner.split_whitespace().collect();
    if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(Error::parse(path, "expected a '%%MatrixMarket matrix coordinate' banner"));
    }
    if !matches!(fields[3], "real" | "integer") || fields[4] != "general" {
        return Err(Error::parse(path, format!("unsupported field/symmetry {} {}", fields[3], fields[4])));
    }
    let mut size: Option<(usize, usize, usize)> = None;
    let mut values: Option<Array2<f64>> = None;
    let mut seen = 0;
    for (ln, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let bad = |msg: &str| Error::parse(path, format!("line {}: {msg}", ln + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        match size {
            None => {
                if parts.len() != 3 {
                    return Err(bad("size line needs rows, columns and entry count"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| bad("bad size"));
                let (r, c, nnz) = (p(parts[0])?, p(parts[1])?, p(parts[2])?);
                if r != rows.len() || c != cols.len() {
                    return Err(bad(&format!(
                        "matrix is {r}x{c} but sidecars name {} cells and {} genes",
                        rows.len(),
                        cols.len()
                    )));
                }
                size = Some((r, c, nnz));
                values = Some(Array2::zeros((r, c)));
            }
            Some((r, c, _)) => {
                if parts.len() != 3 {
                    return Err(bad("entry needs row, column and value"));
                }
                let i: usize = parts[0].parse().map_err(|_| bad("bad row index"))?;
                let j: usize = parts[1].parse().map_err(|_| bad("bad column index"))?;
                let v: f64 = parts[2].parse().map_err(|_| bad("bad value"))?;
                if i == 0 || j == 0 || i > r || j > c {
                    return Err(bad(&format!("index ({i}, {j}) outside {r}x{c}")));
                }
                values.as_mut().expect("allocated with size")[[i - 1, j - 1]] = v;
                seen += 1;
            }
        }
    }
    let (_, _, nnz) = size.ok_or_else(|| Error::parse(path, "missing size line"))?;
    if seen != nnz {
        return Err(Error::parse(path, format!("size line announces {nnz} entries, found {seen}")));
    }
    Ok(LabelledMatrix { rows, cols, values: values.expect("allocated with size") })
}

pub fn write_mtx_matrix(path: &Path, rows: &[String], cols: &[String], values: &Array2<f64>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let nnz = values.iter().filter(|&&v| v != 0.0).count();
    writeln!(w, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
    writeln!(w, "{} {} {nnz}", values.nrows(), values.ncols()).map_err(io)?;
    for ((i, j), v) in values.indexed_iter() {
        if *v != 0.0 {
            writeln!(w, "{} {} {v}", i + 1, j + 1).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let (cells_path, genes_path) = sidecar_paths(path);
    std::fs::write(&cells_path, rows.iter().map(|r| format!("{r}\n")).collect::<String>()).map_err(|e| Error::io(&cells_path, e))?;
    std::fs::write(&genes_path, cols.iter().map(|c| format!("{c}\n")).collect::<String>()).map_err(|e| Error::io(&genes_path, e))?;
    Ok(())
}

fn read_matrix(path: &Path, format: MatrixFormat) -> Result<LabelledMatrix> {
    match format {
        MatrixFormat::Csv => read_csv_matrix(path),
        MatrixFormat::Mtx => read_mtx_matrix(path),
    }
}

/// Permutation taking `names` into the order of `reference`, or an error naming
/// the first name that does not match.
fn alignment(what: &str, reference: &[String], names: &[String]) -> Result<Vec<usize>> {
    if reference.len() != names.len() {
        return Err(Error::Shape(format!("{} {what}s in unspliced but {} in spliced", reference.len(), names.len())));
    }
    unique(what, reference)?;
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    if index.len() != names.len() {
        unique(what, names)?;
    }
    reference
        .iter()
        .map(|r| index.get(r.as_str()).copied().ok_or_else(|| Error::Data(format!("{what} {r:?} missing from spliced matrix"))))
        .collect()
}

/// Load and align a matrix pair; the spliced matrix is reordered to the
/// unspliced cell and gene order.
pub fn load_matrices(unspliced_path: &Path, spliced_path: &Path, format: MatrixFormat) -> Result<ExpressionMatrix> {
    let u = read_matrix(unspliced_path, format)?;
    let s = read_matrix(spliced_path, format)?;
    let row_perm = alignment("cell", &u.rows, &s.rows)?;
    let col_perm = alignment("gene", &u.cols, &s.cols)?;
    let spliced = Array2::from_shape_fn(u.values.dim(), |(i, j)| s.values[[row_perm[i], col_perm[j]]]);
    ExpressionMatrix::new(u.rows, u.cols, u.values, spliced)
}

pub fn write_matrices(m: &ExpressionMatrix, unspliced_path: &Path, spliced_path: &Path, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => {
            write_csv_matrix(unspliced_path, &m.cell_ids, &m.gene_names, &m.unspliced)?;
            write_csv_matrix(spliced_path, &m.cell_ids, &m.gene_names, &m.spliced)
        }
        MatrixFormat::Mtx => {
            write_mtx_matrix(unspliced_path, &m.cell_ids, &m.gene_names, &m.unspliced)?;
            write_mtx_matrix(spliced_path, &m.cell_ids, &m.gene_names, &m.spliced)
        }
    }
}

/// Per-cell metadata: `cell,capture_time,label`. Either column may be empty for
/// every cell, in which case it is absent.
pub fn write_cell_metadata(path: &Path, m: &ExpressionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "capture_time", "label"])?;
    for (i, id) in m.cell_ids.iter().enumerate() {
        let t = m.capture_times.as_ref().map(|t| t[i].to_string()).unwrap_or_default();
        let l = m.labels.as_ref().map(|l| l[i].clone()).unwrap_or_default();
        w.write_record([id.as_str(), t.as_str(), l.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attach capture times and labels from a metadata file, matching cells by id.
pub fn read_cell_metadata(path: &Path, m: &mut ExpressionMatrix) -> Result<()> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_id: HashMap<String, (Option<f64>, Option<String>)> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        let t = match record.get(1).map(str::trim) {
            None | Some("") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|_| Error::parse(path, format!("bad capture time {v:?} for {id}")))?),
        };
        let l = record.get(2).filter(|v| !v.is_empty()).map(str::to_string);
        by_id.insert(id, (t, l));
    }
    let mut times = Vec::with_capacity(m.n_cells());
    let mut labels = Vec::with_capacity(m.n_cells());
    for id in &m.cell_ids {
        let (t, l) = by_id.get(id).ok_or_else(|| Error::Data(format!("cell {id:?} missing from {}", path.display())))?;
        times.push(*t);
        labels.push(l.clone());
    }
    m.capture_times = times.iter().all(Option::is_some).then(|| times.into_iter().flatten().collect());
    m.labels = labels.iter().all(Option::is_some).then(|| labels.into_iter().flatten().collect());
    Ok(())
}
