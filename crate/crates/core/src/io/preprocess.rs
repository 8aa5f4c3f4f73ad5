//! Size-factor normalization, dispersion-based gene selection and
//! nearest-neighbor moment smoothing.
//!
//! [`preprocess`] first derives a [`Provenance`] record from the raw data and
//! then applies it with [`replay`], so replaying a stored record on the same raw
//! matrix reproduces the processed matrix exactly.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::matrix::ExpressionMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 30;
pub const DEFAULT_COMPONENTS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub normalize: bool,
    /// Number of genes kept by spliced dispersion; `None` keeps every gene.
    pub top_genes: Option<usize>,
    /// Neighbor count for moment smoothing; `None` disables smoothing.
    pub neighbors: Option<usize>,
    pub components: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { normalize: true, top_genes: None, neighbors: Some(DEFAULT_NEIGHBORS), components: DEFAULT_COMPONENTS }
    }
}

impl PreprocessOptions {
    pub fn identity() -> Self {
        Self { normalize: false, top_genes: None, neighbors: None, components: DEFAULT_COMPONENTS }
    }
}

/// Everything needed to recompute the processed matrix from the raw one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub options: PreprocessOptions,
    /// Per-cell divisors applied to unspliced values (all 1 without normalization).
    pub size_factors_u: Vec<f64>,
    pub size_factors_s: Vec<f64>,
    /// Names of the kept genes, in output order.
    pub genes: Vec<String>,
    /// Neighbor lists (cell indices, self first) used for smoothing.
    pub neighbors: Option<Vec<Vec<usize>>>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cell totals divided by their median; cells with zero total keep factor 1.
pub fn size_factors(m: &Array2<f64>) -> Vec<f64> {
    let totals: Vec<f64> = m.sum_axis(Axis(1)).to_vec();
    let med = median(&totals);
    totals.iter().map(|&t| if t > 0.0 && med > 0.0 { t / med } else { 1.0 }).collect()
}

fn divide_rows(m: &Array2<f64>, factors: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, j]] / factors[i])
}

/// Variance over mean of each column (population variance); zero-mean columns get 0.
pub fn dispersion(m: &Array2<f64>) -> Vec<f64> {
    let mean = m.mean_axis(Axis(0)).expect("non-empty matrix");
    let var = m.var_axis(Axis(0), 0.0);
    mean.iter().zip(var.iter()).map(|(&mu, &v)| if mu > 0.0 { v / mu } else { 0.0 }).collect()
}

/// Indices of the `k` most dispersed genes, returned in ascending index order.
pub fn top_dispersed(m: &Array2<f64>, k: usize) -> Vec<usize> {
    let d = dispersion(m);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Scores of the leading principal components of the column-centered matrix.
pub fn principal_components(x: &Array2<f64>, components: usize) -> Array2<f64> {
    let (n, g) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty matrix");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let sym = nalgebra::DMatrix::from_fn(g, g, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = components.min(g);
    let basis = Array2::from_shape_fn((g, k), |(i, c)| eig.eigenvectors[(i, order[c])]);
    centered.dot(&basis)
}

/// For every row, itself followed by its `k - 1` nearest other rows (Euclidean,
/// ties toward the smaller index).
pub fn nearest_neighbors(points: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let k = k.clamp(1, n);
    (0..n)
        .map(|i| {
            let pi = points.row(i);
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dist: f64 = pi.iter().zip(points.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (dist, j)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k - 1 < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
                d.truncate(k - 1);
            }
            d.sort_by(cmp);
            std::iter::once(i).chain(d.into_iter().map(|(_, j)| j)).collect()
        })
        .collect()
}

fn smooth(m: &Array2<f64>, neighbors: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    for (i, nb) in neighbors.iter().enumerate() {
        let mut row = out.row_mut(i);
        for &j in nb {
            row += &m.row(j);
        }
        row /= nb.len() as f64;
    }
    out
}

fn select_columns(m: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), cols.len()), |(i, j)| m[[i, cols[j]]])
}

/// Run the pipeline on a raw matrix, recording its provenance.
pub fn preprocess(raw: &ExpressionMatrix, options: &PreprocessOptions) -> Result<ExpressionMatrix> {
    raw.validate()?;
    let (n, g) = (raw.n_cells(), raw.n_genes());
    if n == 0 || g == 0 {
        return Err(Error::Shape("cannot preprocess an empty matrix".into()));
    }
    if let Some(k) = options.top_genes {
        if k > g || k == 0 {
            return Err(Error::Config(format!("top_genes = {k} but {g} genes are available")));
        }
    }
    if options.neighbors == Some(0) || options.components == 0 {
        return Err(Error::Config("neighbor and component counts must be >= 1".into()));
    }
    let (fu, fs) = if options.normalize {
        (size_factors(&raw.unspliced), size_factors(&raw.spliced))
    } else {
        (vec![1.0; n], vec![1.0; n])
    };
    let s_norm = divide_rows(&raw.spliced, &fs);
    let keep: Vec<usize> = match options.top_genes {
        Some(k) => top_dispersed(&s_norm, k),
        None => (0..g).collect(),
    };
    let neighbors = options.neighbors.map(|k| {
        let log = select_columns(&s_norm, &keep).mapv(f64::ln_1p);
        let pcs = principal_components(&log, options.components);
        nearest_neighbors(&pcs, k)
    });
    let provenance = Provenance {
        options: options.clone(),
        size_factors_u: fu,
        size_factors_s: fs,
        genes: keep.iter().map(|&j| raw.gene_names[j].clone()).collect(),
        neighbors,
    };
    replay(raw, &provenance)
}

/// Apply a recorded transform to raw data.
pub fn replay(raw: &ExpressionMatrix, provenance: &Provenance) -> Result<ExpressionMatrix> {
    let n = raw.n_cells();
    if provenance.size_factors_u.len() != n || provenance.size_factors_s.len() != n {
        return Err(Error::Shape(format!("provenance covers {} cells, matrix has {n}", provenance.size_factors_u.len())));
    }
    let cols = provenance
        .genes
        .iter()
        .map(|name| {
            raw.gene_names
                .iter()
                .position(|g| g == name)
                .ok_or_else(|| Error::Data(format!("gene {name:?} from provenance not in matrix")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut u = select_columns(&divide_rows(&raw.unspliced, &provenance.size_factors_u), &cols);
    let mut s = select_columns(&divide_rows(&raw.spliced, &provenance.size_factors_s), &cols);
    if let Some(nb) = &provenance.neighbors {
        if nb.len() != n || nb.iter().flatten().any(|&j| j >= n) {
            return Err(Error::Shape("neighbor lists do not match the matrix".into()));
        }
        u = smooth(&u, nb);
        s = smooth(&s, nb);
    }
    let mut out = ExpressionMatrix::new(raw.cell_ids.clone(), provenance.genes.clone(), u, s)?;
    out.capture_times = raw.capture_times.clone();
    out.labels = raw.labels.clone();
    out.provenance = Some(provenance.clone());
    Ok(out)
}
