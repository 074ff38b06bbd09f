//! Experiment runner: grid families, parameter rules, CSV rows and field dumps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, CollocationSystem, Scheme};
use crate::diagnostics::{convergence_rate, linf_error, m_matrix_report, max_principle_bounds, max_principle_report};
use crate::error::{Error, Result};
use crate::grid::{build_grid, split_partition, uniform_partition, TensorGrid};
use crate::kernel::{KernelParams, DEFAULT_CHI2};
use crate::linsolve::{solve, SolveOptions, SolveReport};
use crate::problems::{catalog, find_case, ManufacturedCase, SourceMode};

/// Sequence of grids refined in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridFamily {
    /// `N` cells on every axis.
    Uniform(Vec<usize>),
    /// Cell counts per axis.
    Anisotropic(Vec<Vec<usize>>),
    /// `[n_left, n_right, n_other]`: axis 0 split at its midpoint, other axes uniform.
    Split(Vec<[usize; 3]>),
}

impl GridFamily {
    /// Parses `40,80`, `40x20,50x25` or `10+15x20,20+30x40`.
    pub fn parse(text: &str) -> Result<Self> {
        let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Invalid("empty grid list".into()));
        }
        let num = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad cell count '{s}' in '{text}'")))
        };
        if items.iter().any(|s| s.contains('+')) {
            let mut out = Vec::new();
            for it in &items {
                let (lr, rest) = it
                    .split_once('x')
                    .ok_or_else(|| Error::Invalid(format!("split grid '{it}' needs the form L+RxN")))?;
                let (l, r) = lr
                    .split_once('+')
                    .ok_or_else(|| Error::Invalid(format!("split grid '{it}' needs the form L+RxN")))?;
                out.push([num(l)?, num(r)?, num(rest)?]);
            }
            Ok(GridFamily::Split(out))
        } else if items.iter().any(|s| s.contains('x')) {
            items
                .iter()
                .map(|it| it.split('x').map(num).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
                .map(GridFamily::Anisotropic)
        } else {
            items.iter().map(|s| num(s)).collect::<Result<Vec<_>>>().map(GridFamily::Uniform)
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridFamily::Uniform(v) => v.len(),
            GridFamily::Anisotropic(v) => v.len(),
            GridFamily::Split(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every level is well formed and that levels refine.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Invalid("grid family is empty".into()));
        }
        let sizes: Vec<usize> = (0..self.len()).map(|k| self.level_size(k)).collect();
        if sizes.contains(&0) {
            return Err(Error::Invalid("cell counts must be positive".into()));
        }
        if let GridFamily::Split(v) = self {
            if v.iter().any(|t| t.contains(&0)) {
                return Err(Error::Invalid("cell counts must be positive".into()));
            }
        }
        if let GridFamily::Anisotropic(v) = self {
            if v.iter().flatten().any(|n| *n == 0) {
                return Err(Error::Invalid("cell counts must be positive".into()));
            }
        }
        if sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(format!("grid levels must increase, got {sizes:?}")));
        }
        Ok(())
    }

    /// Largest per-axis cell count of level `k`, used as `N` in rates.
    pub fn level_size(&self, k: usize) -> usize {
        match self {
            GridFamily::Uniform(v) => v[k],
            GridFamily::Anisotropic(v) => v[k].iter().copied().max().unwrap_or(0),
            GridFamily::Split(v) => (v[k][0] + v[k][1]).max(v[k][2]),
        }
    }

    pub fn label(&self, k: usize, dim: usize) -> String {
        match self {
            GridFamily::Uniform(v) => vec![v[k].to_string(); dim].join("x"),
            GridFamily::Anisotropic(v) => v[k].iter().map(|n| n.to_string()).collect::<Vec<_>>().join("x"),
            GridFamily::Split(v) => {
                let mut s = format!("{}+{}", v[k][0], v[k][1]);
                for _ in 1..dim {
                    s.push_str(&format!("x{}", v[k][2]));
                }
                s
            }
        }
    }

    /// Breakpoints per axis for level `k` on `domain`.
    pub fn partitions(&self, k: usize, domain: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
        let dim = domain.len();
        match self {
            GridFamily::Uniform(v) => Ok(domain.iter().map(|d| uniform_partition(d[0], d[1], v[k])).collect()),
            GridFamily::Anisotropic(v) => {
                if v[k].len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v[k].len(),
                    });
                }
                Ok(domain.iter().zip(&v[k]).map(|(d, n)| uniform_partition(d[0], d[1], *n)).collect())
            }
            GridFamily::Split(v) => {
                let [l, r, n] = v[k];
                let mut out = vec![split_partition(domain[0][0], 0.5 * (domain[0][0] + domain[0][1]), domain[0][1], l, r)];
                out.extend(domain[1..].iter().map(|d| uniform_partition(d[0], d[1], n)));
                Ok(out)
            }
        }
    }
}

/// How δ follows the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaRule {
    Fixed(f64),
    /// `δ = ratio · h_max`.
    Ratio(f64),
}

impl DeltaRule {
    pub fn delta(&self, h_max: f64) -> f64 {
        match self {
            DeltaRule::Fixed(d) => *d,
            DeltaRule::Ratio(r) => r * h_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match self {
            DeltaRule::Fixed(d) => *d,
            DeltaRule::Ratio(r) => *r,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Invalid(format!("delta rule needs a positive value, got {v}")));
        }
        Ok(())
    }
}

fn default_scheme() -> Scheme {
    Scheme::Collocation
}

fn default_chi2() -> Vec<f64> {
    vec![DEFAULT_CHI2]
}

fn default_tol() -> f64 {
    SolveOptions::default().tol
}

fn default_timing() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Runs every case of this example unless `cases` is given.
    #[serde(default)]
    pub example: Option<u32>,
    #[serde(default)]
    pub cases: Vec<String>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub grids: GridFamily,
    pub delta: DeltaRule,
    #[serde(default = "default_chi2")]
    pub chi2: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// When false every `wall_ms` is written as 0 so output is byte-stable.
    #[serde(default = "default_timing")]
    pub timing: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Directory receiving one `x y value` file per solve.
    #[serde(default)]
    pub dump: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Preset reproducing the published setup of an example; 6 is the χ² sweep.
    pub fn for_example(id: u32) -> Result<Self> {
        let base = |grids, delta| ExperimentConfig {
            example: Some(id),
            cases: Vec::new(),
            scheme: Scheme::Collocation,
            grids,
            delta,
            chi2: default_chi2(),
            tol: default_tol(),
            timing: true,
            out: None,
            dump: None,
        };
        let doubling = GridFamily::Uniform(vec![40, 80, 160, 320]);
        Ok(match id {
            1 => base(GridFamily::Uniform(vec![20, 25, 30, 35, 40, 50]), DeltaRule::Fixed(1.0 / 40.0)),
            2 | 4 => base(doubling, DeltaRule::Ratio(1.0)),
            3 => base(GridFamily::Uniform(vec![20, 30, 40, 50]), DeltaRule::Ratio(1.0)),
            5 => base(GridFamily::Uniform(vec![80]), DeltaRule::Fixed(1.0 / 40.0)),
            6 => {
                let mut c = base(GridFamily::Uniform(vec![40, 80, 160]), DeltaRule::Ratio(1.0));
                c.chi2 = vec![9.0, 16.0, 25.0, 36.0, 49.0];
                c
            }
            _ => return Err(Error::Invalid(format!("unknown example {id}; valid ids are 1 to 6"))),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Cases selected by this config, in catalog order.
    pub fn selected_cases(&self) -> Result<Vec<ManufacturedCase>> {
        if !self.cases.is_empty() {
            return self.cases.iter().map(|n| find_case(n)).collect();
        }
        let ex = self
            .example
            .ok_or_else(|| Error::Invalid("config names neither an example nor cases".into()))?;
        let source_example = if ex == 6 { 2 } else { ex };
        let out: Vec<ManufacturedCase> = catalog().into_iter().filter(|c| c.example == source_example).collect();
        if out.is_empty() {
            return Err(Error::Invalid(format!("unknown example {ex}; valid ids are 1 to 6")));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.grids.validate()?;
        self.delta.validate()?;
        if self.chi2.is_empty() || self.chi2.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Invalid("chi2 values must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tolerance must be positive, got {}", self.tol)));
        }
        self.selected_cases().map(|_| ())
    }
}

/// Memo of nonlocal source values keyed by case, δ and node coordinates.
#[derive(Debug, Default)]
pub struct RhsCache {
    map: Mutex<HashMap<(String, [u64; 4]), f64>>,
}

impl RhsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(&self, case: &ManufacturedCase, x: &[f64], params: &KernelParams) -> Result<f64> {
        let mut key = [params.delta.to_bits(), 0, 0, 0];
        for (k, v) in x.iter().enumerate() {
            key[k + 1] = v.to_bits();
        }
        let key = (case.name.clone(), key);
        if let Some(v) = self.map.lock().ok().and_then(|m| m.get(&key).copied()) {
            return Ok(v);
        }
        let v = case.source_value(x, params)?;
        if let Ok(mut m) = self.map.lock() {
            m.insert(key, v);
        }
        Ok(v)
    }
}

/// Everything produced by one solve.
#[derive(Debug)]
pub struct Solved {
    pub params: KernelParams,
    pub system: CollocationSystem,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub u: Vec<f64>,
    /// Exact solution at interior nodes when the case has one.
    pub exact: Option<Vec<f64>>,
    pub report: SolveReport,
}

impl Solved {
    pub fn grid(&self) -> &TensorGrid {
        self.system.grid()
    }

    pub fn error_linf(&self) -> Option<f64> {
        self.exact.as_ref().map(|e| linf_error(&self.u, e).expect("lengths agree"))
    }
}

/// Builds the grid, evaluates the data, assembles and solves one configuration.
pub fn solve_case(
    case: &ManufacturedCase,
    scheme: Scheme,
    partitions: &[Vec<f64>],
    params: KernelParams,
    opts: &SolveOptions,
    cache: Option<&RhsCache>,
) -> Result<Solved> {
    let dim = case.dim;
    let grid = build_grid(&case.domain, partitions, &params, &case.field)?;
    let f: Vec<f64> = grid
        .interior_nodes()
        .par_iter()
        .map(|&n| {
            let x = grid.coord(n);
            match (cache, case.source) {
                (Some(c), SourceMode::NonlocalQuadrature) => c.get_or_compute(case, &x[..dim], &params),
                _ => case.source_value(&x[..dim], &params),
            }
            .map_err(|e| e.context(format!("source at node {n}")))
        })
        .collect::<Result<_>>()?;
    let g: Vec<f64> = grid
        .collar_nodes()
        .iter()
        .map(|&n| case.boundary_value(&grid.coord(n)[..dim]))
        .collect();
    let exact = case.solution.map(|s| {
        grid.interior_nodes()
            .iter()
            .map(|&n| s.value(&grid.coord(n)[..dim]))
            .collect()
    });
    let system = assemble(scheme, &grid, &case.field, &params, &f, &g)?;
    drop(grid);
    let (u, report) = solve(&system, system.rhs(), opts)?;
    Ok(Solved {
        params,
        system,
        f,
        g,
        u,
        exact,
        report,
    })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub case: String,
    pub chi2: f64,
    pub grid_desc: String,
    /// Level size used in the rate.
    pub n: usize,
    pub h_max: f64,
    pub delta: f64,
    pub error_linf: Option<f64>,
    pub rate: Option<f64>,
    pub solve_iters: usize,
    pub wall_ms: f64,
    pub mmatrix_ok: bool,
    pub maxprin_ok: bool,
    pub converged: bool,
}

pub const CSV_HEADER: [&str; 11] = [
    "case",
    "chi2",
    "grid_desc",
    "h_max",
    "delta",
    "error_linf",
    "rate",
    "solve_iters",
    "wall_ms",
    "mmatrix_ok",
    "maxprin_ok",
];

/// 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

impl ResultRow {
    pub fn csv_fields(&self) -> [String; 11] {
        [
            self.case.clone(),
            num(self.chi2),
            self.grid_desc.clone(),
            num(self.h_max),
            num(self.delta),
            self.error_linf.map(num).unwrap_or_default(),
            self.rate.map(num).unwrap_or_default(),
            self.solve_iters.to_string(),
            num(self.wall_ms),
            self.mmatrix_ok.to_string(),
            self.maxprin_ok.to_string(),
        ]
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv output: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.csv_fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `x y value` (one coordinate per axis) for every node, collar included.
pub fn write_field<W: Write>(solved: &Solved, mut out: W) -> Result<()> {
    let grid = solved.grid();
    let full = solved.system.scatter(&solved.u, Some(&solved.g));
    let mut line = String::new();
    for (n, v) in full.iter().enumerate() {
        line.clear();
        let x = grid.coord(n);
        for c in &x[..grid.dim()] {
            let _ = write!(line, "{} ", num(*c));
        }
        let _ = write!(line, "{}", num(*v));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub all_converged: bool,
}

/// Runs every selected case, χ² value and grid level in order.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_with_progress(config, |_| {})
}

/// As [`run`], calling `progress` after each row.
pub fn run_with_progress(config: &ExperimentConfig, mut progress: impl FnMut(&ResultRow)) -> Result<RunOutcome> {
    config.validate()?;
    let cases = config.selected_cases()?;
    let opts = SolveOptions::with_tol(config.tol);
    let cache = RhsCache::new();
    let mut rows = Vec::new();
    let mut all_converged = true;
    if let Some(dir) = &config.dump {
        std::fs::create_dir_all(dir)?;
    }
    for case in &cases {
        for &chi2 in &config.chi2 {
            let mut series: Vec<(f64, f64)> = Vec::new();
            for level in 0..config.grids.len() {
                let grid_desc = config.grids.label(level, case.dim);
                let where_ = format!("case {} chi2 {} grid {}", case.name, chi2, grid_desc);
                let partitions = config.grids.partitions(level, &case.domain).map_err(|e| e.context(where_.clone()))?;
                let h_max = partitions
                    .iter()
                    .flat_map(|p| p.windows(2).map(|w| w[1] - w[0]))
                    .fold(0.0, f64::max);
                let delta = config.delta.delta(h_max);
                let params = KernelParams::new(delta, chi2, case.dim).map_err(|e| e.context(where_.clone()))?;
                let started = Instant::now();
                let solved = match solve_case(case, config.scheme, &partitions, params, &opts, Some(&cache)) {
                    Ok(s) => Some(s),
                    Err(e) if matches!(e.root(), Error::NotConverged { .. } | Error::Breakdown { .. }) => None,
                    Err(e) => return Err(e.context(where_)),
                };
                let wall_ms = if config.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
                let n = config.grids.level_size(level);
                let row = match solved {
                    Some(s) => {
                        let err = s.error_linf();
                        let mut rate = None;
                        if let Some(e) = err {
                            if let Some(&(pn, pe)) = series.last() {
                                rate = convergence_rate(&[pe, e], &[pn, n as f64]).ok().map(|r| r[0]);
                            }
                            series.push((n as f64, e));
                        }
                        let mm = m_matrix_report(&s.system);
                        let mp = max_principle_report(&s.u, max_principle_bounds(&s.f, &s.g));
                        if let Some(dir) = &config.dump {
                            let path = dump_path(dir, &case.name, chi2, &grid_desc);
                            let file = std::fs::File::create(&path)?;
                            write_field(&s, std::io::BufWriter::new(file))?;
                        }
                        ResultRow {
                            case: case.name.clone(),
                            chi2,
                            grid_desc,
                            n,
                            h_max,
                            delta,
                            error_linf: err,
                            rate,
                            solve_iters: s.report.iterations,
                            wall_ms,
                            mmatrix_ok: mm.ok,
                            maxprin_ok: mp.ok,
                            converged: true,
                        }
                    }
                    None => {
                        all_converged = false;
                        ResultRow {
                            case: case.name.clone(),
                            chi2,
                            grid_desc,
                            n,
                            h_max,
                            delta,
                            error_linf: Some(f64::NAN),
                            rate: None,
                            solve_iters: opts.max_iter,
                            wall_ms,
                            mmatrix_ok: false,
                            maxprin_ok: false,
                            converged: false,
                        }
                    }
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    if let Some(path) = &config.out {
        let file = std::fs::File::create(path)?;
        write_csv(&rows, std::io::BufWriter::new(file))?;
    }
    Ok(RunOutcome { rows, all_converged })
}

pub fn dump_path(dir: &Path, case: &str, chi2: f64, grid_desc: &str) -> PathBuf {
    dir.join(format!("{case}_chi2-{chi2}_{}.txt", grid_desc.replace('+', "p")))
}

/// Human-readable catalog with the preset of every example.
pub fn list_examples() -> String {
    let mut out = String::new();
    for id in 1..=6u32 {
        let cfg = ExperimentConfig::for_example(id).expect("ids 1 to 6 have presets");
        let grids = (0..cfg.grids.len())
            .map(|k| cfg.grids.label(k, if id == 3 { 3 } else { 2 }))
            .collect::<Vec<_>>()
            .join(", ");
        let delta = match cfg.delta {
            DeltaRule::Fixed(d) => format!("delta = {d}"),
            DeltaRule::Ratio(r) => format!("delta = {r} h"),
        };
        let chi2 = cfg.chi2.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "example {id}: grids [{grids}], {delta}, chi2 [{chi2}]");
        for case in cfg.selected_cases().expect("presets select catalog cases") {
            let _ = writeln!(out, "  {:<8} {}", case.name, case.description);
        }
    }
    out
}
