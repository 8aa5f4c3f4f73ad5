//! Synthetic unspliced / spliced data with known times, branches and
//! transcription schedules.
//!
//! Each gene has fixed rates `(alpha, beta, gamma)` and a relative transcription
//! rate `rho(t)` built from logistic steps. A lineage tree assigns cells to
//! branches; a child branch inherits its parent's schedule and adds its own
//! steps, each anchored so `rho` is continuous at the split. Every gene starts
//! at the steady state of `rho(0)` and is integrated with RK4.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ExpressionMatrix;
use crate::kinetics::{rk4_reference, steady_state, KineticState};

/// Integration step of the simulator.
pub const SIM_STEP: f64 = 1e-3;
/// Default noise level as a fraction of each gene's dynamic range.
pub const DEFAULT_NOISE: f64 = 0.1;
pub const HORIZON: f64 = 20.0;

fn logistic(x: f64) -> f64 {
    crate::nn::sigmoid(x)
}

/// `delta * logistic(sharpness * (t - center))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoStep {
    pub center: f64,
    pub delta: f64,
    pub sharpness: f64,
}

impl RhoStep {
    fn value(&self, t: f64) -> f64 {
        self.delta * logistic(self.sharpness * (t - self.center))
    }

    /// Contribution relative to the value at `anchor`, zero at the anchor.
    fn anchored(&self, t: f64, anchor: Option<f64>) -> f64 {
        match anchor {
            None => self.value(t),
            Some(a) => self.value(t) - self.value(a),
        }
    }
}

/// `rho(t) = clamp(base + sum of steps, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSchedule {
    pub base: f64,
    pub steps: Vec<RhoStep>,
}

impl RhoSchedule {
    pub fn constant(rho: f64) -> Self {
        Self { base: rho, steps: Vec::new() }
    }

    pub fn value(&self, t: f64) -> f64 {
        (self.base + self.steps.iter().map(|s| s.value(t)).sum::<f64>()).clamp(0.0, 1.0)
    }

    fn describe(&self) -> String {
        let mut out = format!("base={}", self.base);
        for s in &self.steps {
            out.push_str(&format!(";step(center={},delta={},sharpness={})", s.center, s.delta, s.sharpness));
        }
        out
    }
}

/// Logistic increase from `rho_low` to `rho_high` centred at `t_boost`.
pub fn boost_gene_schedule(t_boost: f64, rho_low: f64, rho_high: f64, sharpness: f64) -> Result<RhoSchedule> {
    if !(0.0 <= rho_low && rho_low < rho_high && rho_high <= 1.0) {
        return Err(Error::Domain(format!("boost needs 0 <= low < high <= 1, got {rho_low}, {rho_high}")));
    }
    if !(sharpness > 0.0) {
        return Err(Error::Domain(format!("boost sharpness must be > 0, got {sharpness}")));
    }
    Ok(RhoSchedule { base: rho_low, steps: vec![RhoStep { center: t_boost, delta: rho_high - rho_low, sharpness }] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeneKind {
    /// Switched on at `t_on` and off at `t_off`.
    Standard { t_on: f64, t_off: f64 },
    /// Starts at steady state and is switched off early.
    EarlyRepression { t_off: f64 },
    /// Silent until late induction at `t_on`.
    LateInduction { t_on: f64 },
    /// Transcription rises sharply from a low level at `t_boost`.
    Boost { t_boost: f64 },
    /// Induced only in the given branch.
    Marker { branch: usize },
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGene {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Schedule on the root branch.
    pub schedule: RhoSchedule,
    pub kind: GeneKind,
    /// State at `t = 0`; the steady state of `rho(0)` when absent.
    pub initial: Option<KineticState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub name: String,
    pub parent: Option<usize>,
    /// Time at which the branch begins (the split time for children).
    pub start: f64,
    pub duration: f64,
    /// Relative share of cells sampled on this branch.
    pub weight: f64,
    /// Extra steps per gene, anchored at `start`. Empty means none for any gene.
    pub steps: Vec<Vec<RhoStep>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageTree {
    pub branches: Vec<Branch>,
    pub genes: Vec<SimGene>,
}

impl LineageTree {
    pub fn single(genes: Vec<SimGene>, duration: f64) -> Self {
        let root = Branch { name: "root".into(), parent: None, start: 0.0, duration, weight: 1.0, steps: Vec::new() };
        Self { branches: vec![root], genes }
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("invalid lineage tree: {m}")));
        if self.branches.is_empty() {
            return bad("no branches".into());
        }
        if self.genes.is_empty() {
            return bad("no genes".into());
        }
        for (i, b) in self.branches.iter().enumerate() {
            match (i, b.parent) {
                (0, None) => {}
                (0, Some(_)) => return bad("branch 0 must be the root".into()),
                (_, None) => return bad(format!("branch {i} has no parent")),
                (_, Some(p)) if p >= i => return bad(format!("branch {i} lists parent {p}; parents must come first")),
                (_, Some(p)) => {
                    let parent = &self.branches[p];
                    if b.start < parent.start || b.start > parent.start + parent.duration {
                        return bad(format!("branch {i} splits at {} outside its parent's span", b.start));
                    }
                }
            }
            if !(b.duration > 0.0) || !(b.weight > 0.0) || !(b.start >= 0.0) {
                return bad(format!("branch {i} needs start >= 0, positive duration and weight"));
            }
            if !b.steps.is_empty() && b.steps.len() != self.genes.len() {
                return bad(format!("branch {i} has steps for {} of {} genes", b.steps.len(), self.genes.len()));
            }
        }
        for g in &self.genes {
            if !(g.alpha >= 0.0 && g.beta > 0.0 && g.gamma > 0.0) {
                return bad(format!("gene {} has invalid rates", g.name));
            }
        }
        Ok(())
    }

    fn lineage(&self, branch: usize) -> Vec<usize> {
        let mut chain = vec![branch];
        let mut b = branch;
        while let Some(p) = self.branches[b].parent {
            chain.push(p);
            b = p;
        }
        chain
    }

    /// Relative transcription rate of `gene` on `branch` at time `t`.
    pub fn rho(&self, branch: usize, gene: usize, t: f64) -> f64 {
        let g = &self.genes[gene];
        let mut v = g.schedule.base + g.schedule.steps.iter().map(|s| s.value(t)).sum::<f64>();
        for b in self.lineage(branch) {
            let br = &self.branches[b];
            if let Some(steps) = br.steps.get(gene) {
                v += steps.iter().map(|s| s.anchored(t, Some(br.start))).sum::<f64>();
            }
        }
        v.clamp(0.0, 1.0)
    }

    fn describe(&self, gene: usize) -> String {
        let mut d = self.genes[gene].schedule.describe();
        for (i, b) in self.branches.iter().enumerate() {
            if let Some(steps) = b.steps.get(gene).filter(|s| !s.is_empty()) {
                let extra = RhoSchedule { base: 0.0, steps: steps.clone() };
                d.push_str(&format!(";branch{i}[{}]", extra.describe()));
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub times: Vec<f64>,
    pub branch: Vec<usize>,
    pub branch_names: Vec<String>,
    /// True relative transcription rate, cells x genes.
    pub rho: Array2<f64>,
    /// Noise-free values, cells x genes.
    pub clean_u: Array2<f64>,
    pub clean_s: Array2<f64>,
    pub genes: Vec<SimGene>,
    pub noise_u: Vec<f64>,
    pub noise_s: Vec<f64>,
}

/// States of one gene on one branch at sorted `times`, starting from `initial` at the branch start.
fn integrate(tree: &LineageTree, branch: usize, gene: usize, initial: KineticState, times: &[f64]) -> Result<Vec<KineticState>> {
    let g = &tree.genes[gene];
    let start = tree.branches[branch].start;
    let mut grid = vec![start];
    for &t in times {
        if t > *grid.last().expect("non-empty") {
            grid.push(t);
        }
    }
    let rates = |t: f64, x: KineticState| (g.alpha * tree.rho(branch, gene, t) - g.beta * x.u, g.beta * x.u - g.gamma * x.s);
    let traj = rk4_reference(rates, initial, &grid, SIM_STEP, &[])?;
    Ok(times
        .iter()
        .map(|&t| {
            let k = grid.partition_point(|&x| x < t);
            traj[k.min(grid.len() - 1)]
        })
        .collect())
}

/// Noise-free states at arbitrary `(branch, time)` pairs for every gene, cells x genes.
pub fn trajectory(tree: &LineageTree, cells: &[(usize, f64)]) -> Result<(Array2<f64>, Array2<f64>)> {
    tree.validate()?;
    let nb = tree.branches.len();
    let n = cells.len();
    let g = tree.n_genes();
    let mut u = Array2::zeros((n, g));
    let mut s = Array2::zeros((n, g));
    for &(b, t) in cells {
        let br = tree.branches.get(b).ok_or_else(|| Error::Domain(format!("branch {b} does not exist")))?;
        if t < br.start {
            return Err(Error::Domain(format!("time {t} precedes the start of branch {b}")));
        }
    }
    for gene in 0..g {
        // state at the start of every branch, parents first
        let mut starts = vec![KineticState::default(); nb];
        let root_rho = tree.rho(0, gene, 0.0);
        let gi = &tree.genes[gene];
        starts[0] = match gi.initial {
            Some(x) => x,
            None => steady_state(gi.alpha * root_rho, gi.beta, gi.gamma)?,
        };
        for b in 0..nb {
            let mut queries: Vec<(f64, Option<usize>)> = Vec::new();
            for (i, &(cb, t)) in cells.iter().enumerate() {
                if cb == b {
                    queries.push((t, Some(i)));
                }
            }
            for child in &tree.branches {
                if child.parent == Some(b) {
                    queries.push((child.start, None));
                }
            }
            queries.sort_by(|a, b| a.0.total_cmp(&b.0));
            let times: Vec<f64> = queries.iter().map(|q| q.0).collect();
            let states = integrate(tree, b, gene, starts[b], &times)?;
            for ((t, cell), st) in queries.iter().zip(&states) {
                if let Some(i) = cell {
                    u[[*i, gene]] = st.u;
                    s[[*i, gene]] = st.s;
                }
                for (c, child) in tree.branches.iter().enumerate() {
                    if child.parent == Some(b) && child.start == *t {
                        starts[c] = *st;
                    }
                }
            }
        }
    }
    Ok((u, s))
}

/// Sample `n_cells` cells, integrate, and add Gaussian noise with standard deviation
/// `noise` times each gene's noise-free range, truncated at zero.
pub fn simulate(tree: &LineageTree, n_cells: usize, noise: f64, seed: u64) -> Result<(ExpressionMatrix, SyntheticTruth)> {
    tree.validate()?;
    if n_cells == 0 {
        return Err(Error::Config("n_cells must be >= 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = tree.branches.iter().map(|b| b.weight).sum();
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let mut x = rng.gen::<f64>() * total;
        let mut b = tree.branches.len() - 1;
        for (i, br) in tree.branches.iter().enumerate() {
            if x < br.weight {
                b = i;
                break;
            }
            x -= br.weight;
        }
        let br = &tree.branches[b];
        cells.push((b, br.start + rng.gen::<f64>() * br.duration));
    }
    let (clean_u, clean_s) = trajectory(tree, &cells)?;
    let g = tree.n_genes();
    let range = |m: &Array2<f64>, j: usize| {
        let col = m.column(j);
        col.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - col.fold(f64::INFINITY, |a, &b| a.min(b))
    };
    let noise_u: Vec<f64> = (0..g).map(|j| noise * range(&clean_u, j)).collect();
    let noise_s: Vec<f64> = (0..g).map(|j| noise * range(&clean_s, j)).collect();
    let mut u = clean_u.clone();
    let mut s = clean_s.clone();
    for i in 0..n_cells {
        let mut cell_rng = ChaCha8Rng::seed_from_u64(seed);
        cell_rng.set_stream(i as u64 + 1);
        for j in 0..g {
            let eu: f64 = StandardNormal.sample(&mut cell_rng);
            let es: f64 = StandardNormal.sample(&mut cell_rng);
            u[[i, j]] = (u[[i, j]] + noise_u[j] * eu).max(0.0);
            s[[i, j]] = (s[[i, j]] + noise_s[j] * es).max(0.0);
        }
    }
    let rho = Array2::from_shape_fn((n_cells, g), |(i, j)| tree.rho(cells[i].0, j, cells[i].1));
    let width = (n_cells.max(2) - 1).to_string().len();
    let cell_ids = (0..n_cells).map(|i| format!("cell{i:0width$}")).collect();
    let gene_names = tree.genes.iter().map(|g| g.name.clone()).collect();
    let mut matrix = ExpressionMatrix::new(cell_ids, gene_names, u, s)?;
    matrix.labels = Some(cells.iter().map(|&(b, _)| tree.branches[b].name.clone()).collect());
    let truth = SyntheticTruth {
        times: cells.iter().map(|c| c.1).collect(),
        branch: cells.iter().map(|c| c.0).collect(),
        branch_names: tree.branches.iter().map(|b| b.name.clone()).collect(),
        rho,
        clean_u,
        clean_s,
        genes: tree.genes.clone(),
        noise_u,
        noise_s,
    };
    Ok((matrix, truth))
}

/// Coarse capture labels `0..n_bins` from equal-count bins of the true time.
pub fn capture_time_labels(times: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if n_bins < 2 {
        return Err(Error::Config(format!("n_bins must be >= 2, got {n_bins}")));
    }
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * n_bins / n;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Single lineage with standard, early-repression and late-induction genes.
    S1,
    /// Two-way bifurcation at mid-time.
    S2,
    /// S1 plus transcriptional boost genes.
    S3,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Preset::S1),
            "S2" => Ok(Preset::S2),
            "S3" => Ok(Preset::S3),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected S1, S2 or S3)"))),
        }
    }
}

impl Preset {
    pub fn default_cells(self) -> usize {
        match self {
            Preset::S1 | Preset::S3 => 2000,
            Preset::S2 => 3000,
        }
    }
}

const SWITCH_SHARPNESS: f64 = 4.0;
const BOOST_SHARPNESS: f64 = 1.0;

fn rates(rng: &mut impl Rng) -> (f64, f64, f64) {
    (rng.gen_range(1.0..3.0), rng.gen_range(0.4..1.2), rng.gen_range(0.15..0.5))
}

fn step(center: f64, delta: f64) -> RhoStep {
    RhoStep { center, delta, sharpness: SWITCH_SHARPNESS }
}

fn standard_gene(name: String, rng: &mut impl Rng, span: (f64, f64)) -> SimGene {
    let (alpha, beta, gamma) = rates(rng);
    let len = span.1 - span.0;
    let t_on = rng.gen_range(span.0 + 0.05 * len..span.0 + 0.3 * len);
    let t_off = rng.gen_range(t_on + 0.25 * len..span.0 + 0.8 * len);
    SimGene {
        name,
        alpha,
        beta,
        gamma,
        schedule: RhoSchedule { base: 0.0, steps: vec![step(t_on, 1.0), step(t_off, -1.0)] },
        kind: GeneKind::Standard { t_on, t_off },
        initial: None,
    }
}

fn single_lineage_genes(rng: &mut impl Rng, n_standard: usize, n_early: usize, n_late: usize) -> Vec<SimGene> {
    let mut genes = Vec::new();
    let mut kinds = vec![0; n_standard];
    kinds.extend(std::iter::repeat(1).take(n_early));
    kinds.extend(std::iter::repeat(2).take(n_late));
    kinds.shuffle(rng);
    for (j, kind) in kinds.into_iter().enumerate() {
        let name = format!("g{j:03}");
        let gene = match kind {
            0 => standard_gene(name, rng, (0.0, HORIZON)),
            1 => {
                let (alpha, beta, gamma) = rates(rng);
                let t_off = rng.gen_range(1.0..4.0);
                SimGene {
                    name,
                    alpha,
                    beta,
                    gamma,
                    schedule: RhoSchedule { base: 1.0, steps: vec![step(t_off, -1.0)] },
                    kind: GeneKind::EarlyRepression { t_off },
                    initial: None,
                }
            }
            _ => {
                let (alpha, beta, gamma) = rates(rng);
                let t_on = rng.gen_range(13.0..17.0);
                SimGene {
                    name,
                    alpha,
                    beta,
                    gamma,
                    schedule: RhoSchedule { base: 0.0, steps: vec![step(t_on, 1.0)] },
                    kind: GeneKind::LateInduction { t_on },
                    initial: None,
                }
            }
        };
        genes.push(gene);
    }
    genes
}

/// The benchmark scenarios. Gene parameters are drawn from `seed`.
pub fn preset_tree(preset: Preset, seed: u64) -> LineageTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e11);
    match preset {
        Preset::S1 => LineageTree::single(single_lineage_genes(&mut rng, 60, 20, 20), HORIZON),
        Preset::S3 => {
            let mut genes = single_lineage_genes(&mut rng, 60, 20, 20);
            for k in 0..10 {
                let (alpha, beta, gamma) = rates(&mut rng);
                let t_boost = rng.gen_range(8.0..14.0);
                let low = rng.gen_range(0.05..0.2);
                genes.push(SimGene {
                    name: format!("boost{k:02}"),
                    alpha,
                    beta,
                    gamma,
                    schedule: boost_gene_schedule(t_boost, low, 1.0, BOOST_SHARPNESS).expect("valid levels"),
                    kind: GeneKind::Boost { t_boost },
                    initial: None,
                });
            }
            LineageTree::single(genes, HORIZON)
        }
        Preset::S2 => {
            let split = HORIZON / 2.0;
            let mut genes = Vec::new();
            let mut extra_a = Vec::new();
            let mut extra_b = Vec::new();
            for j in 0..50 {
                genes.push(standard_gene(format!("g{j:03}"), &mut rng, (0.0, HORIZON)));
                extra_a.push(Vec::new());
                extra_b.push(Vec::new());
            }
            for (k, own) in [1usize, 2].into_iter().flat_map(|b| std::iter::repeat(b).take(25)).enumerate() {
                let (alpha, beta, gamma) = rates(&mut rng);
                let on = rng.gen_range(split + 0.5..split + 4.0);
                genes.push(SimGene {
                    name: format!("marker{}_{k:02}", if own == 1 { "A" } else { "B" }),
                    alpha,
                    beta,
                    gamma,
                    schedule: RhoSchedule::constant(0.0),
                    kind: GeneKind::Marker { branch: own },
                    initial: None,
                });
                let induced = vec![step(on, 1.0)];
                if own == 1 {
                    extra_a.push(induced);
                    extra_b.push(Vec::new());
                } else {
                    extra_a.push(Vec::new());
                    extra_b.push(induced);
                }
            }
            let branch = |name: &str, steps| Branch {
                name: name.into(),
                parent: Some(0),
                start: split,
                duration: HORIZON - split,
                weight: 1.0,
                steps,
            };
            let root = Branch { name: "root".into(), parent: None, start: 0.0, duration: split, weight: 1.0, steps: Vec::new() };
            LineageTree { branches: vec![root, branch("A", extra_a), branch("B", extra_b)], genes }
        }
    }
}

pub fn simulate_preset(preset: Preset, n_cells: Option<usize>, noise: f64, seed: u64) -> Result<(ExpressionMatrix, SyntheticTruth)> {
    let tree = preset_tree(preset, seed);
    simulate(&tree, n_cells.unwrap_or(preset.default_cells()), noise, seed)
}

/// `truth.csv`: `cell_id,true_time,branch,capture_bin`.
pub fn write_truth(path: &Path, cell_ids: &[String], truth: &SyntheticTruth, capture: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "true_time", "branch", "capture_bin"])?;
    for (i, id) in cell_ids.iter().enumerate() {
        w.write_record([
            id.clone(),
            truth.times[i].to_string(),
            truth.branch_names[truth.branch[i]].clone(),
            capture[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `truth_params.csv`: `gene,alpha,beta,gamma,kind,schedule`.
pub fn write_truth_params(path: &Path, tree: &LineageTree) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gene", "alpha", "beta", "gamma", "kind", "schedule"])?;
    for (j, g) in tree.genes.iter().enumerate() {
        let kind = match g.kind {
            GeneKind::Standard { t_on, t_off } => format!("standard(t_on={t_on},t_off={t_off})"),
            GeneKind::EarlyRepression { t_off } => format!("early_repression(t_off={t_off})"),
            GeneKind::LateInduction { t_on } => format!("late_induction(t_on={t_on})"),
            GeneKind::Boost { t_boost } => format!("boost(t_boost={t_boost})"),
            GeneKind::Marker { branch } => format!("marker(branch={})", tree.branches[branch].name),
            GeneKind::Other => "other".into(),
        };
        w.write_record([g.name.clone(), g.alpha.to_string(), g.beta.to_string(), g.gamma.to_string(), kind, tree.describe(j)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read `truth.csv` back as `(cell_id, true_time, branch, capture_bin)` columns.
pub fn read_truth(path: &Path) -> Result<Vec<(String, f64, String, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| Error::parse(path, format!("missing column {k}")));
        let t = field(1)?.parse().map_err(|_| Error::parse(path, "bad true_time"))?;
        let bin = field(3)?.parse().map_err(|_| Error::parse(path, "bad capture_bin"))?;
        out.push((field(0)?.to_string(), t, field(2)?.to_string(), bin));
    }
    Ok(out)
}
