//! Recursive construction of sparse collections, the sparse form, and
//! self-contained certificates that can be re-verified offline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{
    exceptional_field, local_p_average, mask_indices, rle_decode, rle_encode, select_threshold,
    slice_profile, whitney, CubeKey, DyadicCube, WregReport, DEFAULT_SLICE_EXPONENT,
};
use crate::error::{Error, Result};
use crate::lattice::{pairing, CellBox, GridFunction, GridSpec};
use crate::measures::{estimate_decay, DiscreteMeasure, MeasureDocument};
use crate::operators::{EpsilonSigns, ExponentPair, MaximalOperator, RadonOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Singular,
    Maximal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseOptions {
    /// Side of the periodic window used at each node, in multiples of the
    /// node's side. A power of two, at least 8.
    pub window_ratio: i64,
    pub slice_exponent: f64,
}

impl Default for SparseOptions {
    fn default() -> Self {
        Self { window_ratio: 8, slice_exponent: DEFAULT_SLICE_EXPONENT }
    }
}

/// Everything the construction and the certificate depend on.
#[derive(Clone, Debug)]
pub struct SparseProblem {
    pub f1: GridFunction,
    pub f2: GridFunction,
    pub mu: DiscreteMeasure,
    pub sigma: DiscreteMeasure,
    pub eps: EpsilonSigns,
    pub exps: ExponentPair,
    pub q0: DyadicCube,
    pub kind: OperatorKind,
    pub options: SparseOptions,
}

/// The cube of side `2^level` units whose corner sits at `N/2 - side`, so
/// that its sixfold dilate stays well inside the torus.
pub fn root_cube(spec: &GridSpec, level: i32) -> Result<DyadicCube> {
    let side = 1i64 << (level + spec.log_unit() as i32).max(0);
    let c = spec.cells_per_axis() as i64 / 2 - side;
    let corner = if spec.dim() == 2 { [c, c] } else { [c, 0] };
    DyadicCube::new(*spec, level, corner)
}

impl SparseProblem {
    pub fn validate(&self) -> Result<()> {
        let spec = *self.f1.spec();
        crate::lattice::check_same(&spec, self.f2.spec())?;
        crate::lattice::check_same(&spec, self.q0.spec())?;
        if self.mu.spec().unit_cells() != spec.unit_cells() || self.sigma.spec().unit_cells() != spec.unit_cells() {
            return Err(Error::SpecMismatch("measures must share the grid resolution".into()));
        }
        if !self.f1.is_supported_in(&self.q0.cell_box()) {
            return Err(Error::Support("f1 is not supported in Q0".into()));
        }
        let triple = self.q0.dilated_box(3);
        if !spec.contains_box(&triple) || !spec.contains_box(&self.q0.dilated_box(6)) {
            return Err(Error::Support("6Q0 does not fit in the domain".into()));
        }
        if !self.f2.is_supported_in(&triple) {
            return Err(Error::Support("f2 is not supported in 3Q0".into()));
        }
        if self.eps.n2() != self.q0.level() {
            return Err(Error::Support(format!(
                "top scale N2 = {} differs from the level {} of Q0",
                self.eps.n2(),
                self.q0.level()
            )));
        }
        if self.kind == OperatorKind::Maximal && self.f2.samples().iter().any(|&v| v < 0.0) {
            return Err(Error::Support("the maximal pairing needs f2 >= 0".into()));
        }
        if self.kind == OperatorKind::Singular && !self.mu.is_mean_zero() {
            return Err(Error::NotMeanZero);
        }
        if !self.sigma.is_positive() {
            return Err(Error::NotPositive);
        }
        let r = self.options.window_ratio;
        if r < 8 || r & (r - 1) != 0 {
            return Err(Error::InvalidArgument(format!("window ratio {r} must be a power of two >= 8")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseEntry {
    pub cube: DyadicCube,
    /// Row-major indices of the witness cells on the full grid, ascending.
    pub witness: Vec<usize>,
    pub depth: usize,
    pub parent: Option<DyadicCube>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseCollection {
    pub entries: Vec<SparseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    #[serde(flatten)]
    pub cube: CubeKey,
    pub depth: usize,
    #[serde(rename = "D")]
    pub d: f64,
    pub families: usize,
    pub exceptional_cells: usize,
    pub cube_cells: usize,
    pub witness_cells: usize,
    pub whitney_cubes: usize,
    pub boundary_cubes: usize,
    /// Whitney cubes outside the node's cube, which take no part.
    pub dropped_cubes: usize,
    pub children: usize,
    pub null_children: usize,
    pub union_ok: bool,
    pub wreg: WregReport,
    /// Counts of `|level difference|` over pairs of touching Whitney cubes.
    pub adjacency: BTreeMap<u32, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseTrace {
    pub nodes: Vec<NodeTrace>,
    pub max_depth: usize,
}

impl SparseTrace {
    pub fn unions_ok(&self) -> bool {
        self.nodes.iter().all(|n| n.union_ok)
    }

    pub fn adjacency(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            for (k, v) in &n.adjacency {
                *out.entry(*k).or_insert(0) += v;
            }
        }
        out
    }
}

/// A periodic window around one cube: window cell `c` is main cell
/// `c + offset`.
struct Window {
    spec: GridSpec,
    offset: [i64; 2],
    cube: DyadicCube,
}

impl Window {
    fn around(main: &GridSpec, cube: &DyadicCube, ratio: i64) -> Result<Self> {
        let side = cube.side_cells();
        let nw = ratio * side;
        if nw >= main.cells_per_axis() as i64 {
            return Ok(Self { spec: *main, offset: [0, 0], cube: *cube });
        }
        let spec = GridSpec::relaxed(main.dim(), nw.trailing_zeros(), main.log_unit())?;
        let c = nw / 2 - side;
        let corner = if main.dim() == 2 { [c, c] } else { [c, 0] };
        let local = DyadicCube::new(spec, cube.level(), corner)?;
        let offset = [cube.corner()[0] - corner[0], cube.corner()[1] - corner[1]];
        Ok(Self { spec, offset, cube: local })
    }

    fn main_index(&self, main: &GridSpec, window_index: usize) -> usize {
        let c = self.spec.cell(window_index);
        main.index([c[0] + self.offset[0], c[1] + self.offset[1]])
    }

    /// Copies `f` on the main-grid `region` into the window.
    fn pull(&self, f: &GridFunction, region: &CellBox) -> Result<GridFunction> {
        let main = f.spec();
        let mut out = GridFunction::zeros(self.spec);
        for i in main.box_indices(region)? {
            let c = main.cell(i);
            let w = [c[0] - self.offset[0], c[1] - self.offset[1]];
            let n = self.spec.cells_per_axis() as i64;
            if (0..self.spec.dim()).any(|a| w[a] < 0 || w[a] >= n) {
                return Err(Error::OutOfDomain("window too small for the data".into()));
            }
            out.samples_mut()[self.spec.index(w)] = f.samples()[i];
        }
        Ok(out)
    }

    fn to_main_cube(&self, main: &GridSpec, cube: &DyadicCube) -> Result<DyadicCube> {
        let c = cube.corner();
        let mut corner = [c[0] + self.offset[0], c[1] + self.offset[1]];
        if main.dim() == 1 {
            corner[1] = 0;
        }
        DyadicCube::new(*main, cube.level(), corner)
    }
}

fn adjacency_histogram(spec: &GridSpec, cubes: &[DyadicCube]) -> BTreeMap<u32, usize> {
    let mut owner = vec![usize::MAX; spec.len()];
    for (k, c) in cubes.iter().enumerate() {
        for i in spec.box_indices(&c.cell_box()).unwrap_or_default() {
            owner[i] = k;
        }
    }
    let n = spec.cells_per_axis() as i64;
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..spec.len() {
        let a = owner[i];
        if a == usize::MAX {
            continue;
        }
        let c = spec.cell(i);
        let steps: &[[i64; 2]] = if spec.dim() == 2 { &[[1, 0], [0, 1], [1, 1], [1, -1]] } else { &[[1, 0]] };
        for s in steps {
            let d = [c[0] + s[0], c[1] + s[1]];
            if (0..spec.dim()).any(|k| d[k] < 0 || d[k] >= n) {
                continue;
            }
            let b = owner[spec.index(d)];
            if b != usize::MAX && b != a {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    }
    let mut hist = BTreeMap::new();
    for (a, b) in pairs {
        *hist.entry(cubes[a].level().abs_diff(cubes[b].level())).or_insert(0) += 1;
    }
    hist
}

struct NodeOutput {
    entries: Vec<SparseEntry>,
    traces: Vec<NodeTrace>,
}

fn process_node(
    problem: &SparseProblem,
    f1: &GridFunction,
    f2: &GridFunction,
    cube: DyadicCube,
    depth: usize,
    parent: Option<DyadicCube>,
) -> Result<NodeOutput> {
    let main = *f1.spec();
    let window = Window::around(&main, &cube, problem.options.window_ratio)?;
    let w1 = window.pull(f1, &cube.cell_box())?;
    let w2 = window.pull(f2, &cube.dilated_box(3))?;
    let n1 = problem.eps.n1();
    let field = exceptional_field(&w1, &w2, &problem.sigma, &problem.exps, &window.cube, n1..=cube.level())?;
    let (choice, mask) = select_threshold(&field, &window.cube)?;

    let wbox = window.cube.cell_box();
    let mut witness: Vec<usize> = window
        .spec
        .box_indices(&wbox)?
        .into_iter()
        .filter(|&i| !mask[i])
        .map(|i| window.main_index(&main, i))
        .collect();
    witness.sort_unstable();

    let cover = whitney(&window.spec, &mask)?;
    let union_ok = cover.union_matches();
    let mut dropped = 0;
    let mut children = Vec::new();
    let mut null_children = 0;
    for wc in &cover.cubes {
        if !window.cube.contains(&wc.cube) {
            dropped += 1;
            continue;
        }
        let child = window.to_main_cube(&main, &wc.cube)?;
        let has_data = |f: &GridFunction, b: &CellBox| -> Result<bool> {
            Ok(main.box_indices(b)?.into_iter().any(|i| f.samples()[i] != 0.0))
        };
        if child.level() < n1
            || !has_data(f1, &child.cell_box())?
            || !has_data(f2, &child.dilated_box(3))?
        {
            null_children += 1;
            continue;
        }
        children.push(child);
    }
    children.sort_by_key(|c| c.corner());
    let covered: Vec<DyadicCube> = cover.cubes.iter().map(|c| c.cube).collect();

    let trace = NodeTrace {
        cube: cube.key(),
        depth,
        d: choice.d,
        families: field.families,
        exceptional_cells: choice.exceptional_cells,
        cube_cells: choice.cube_cells,
        witness_cells: witness.len(),
        whitney_cubes: cover.cubes.len(),
        boundary_cubes: cover.report.boundary_cubes,
        dropped_cubes: dropped,
        children: children.len(),
        null_children,
        union_ok,
        wreg: cover.report.clone(),
        adjacency: adjacency_histogram(&window.spec, &covered),
    };
    let mut out = NodeOutput {
        entries: vec![SparseEntry { cube, witness, depth, parent }],
        traces: vec![trace],
    };
    let results: Vec<Result<NodeOutput>> = children
        .par_iter()
        .map(|&child| process_node(problem, f1, f2, child, depth + 1, Some(cube)))
        .collect();
    for r in results {
        let r = r?;
        out.entries.extend(r.entries);
        out.traces.extend(r.traces);
    }
    Ok(out)
}

/// Runs the stopping-time recursion from `Q0` and returns the emitted cubes
/// with their witness sets, in depth-first, corner-lexicographic order.
pub fn build_sparse(problem: &SparseProblem) -> Result<(SparseCollection, SparseTrace)> {
    problem.validate()?;
    let out = process_node(problem, &problem.f1, &problem.f2, problem.q0, 0, None)?;
    let max_depth = out.entries.iter().map(|e| e.depth).max().unwrap_or(0);
    Ok((SparseCollection { entries: out.entries }, SparseTrace { nodes: out.traces, max_depth }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub passed: bool,
    pub entries: usize,
    pub first_violation: Option<String>,
}

/// Checks `F_Q` inside `Q`, pairwise disjointness and `|F_Q| >= |Q|/2`.
pub fn verify_sparsity(c: &SparseCollection) -> SparsityReport {
    let fail = |msg: String| SparsityReport { passed: false, entries: c.entries.len(), first_violation: Some(msg) };
    let Some(first) = c.entries.first() else {
        return SparsityReport { passed: true, entries: 0, first_violation: None };
    };
    let spec = *first.cube.spec();
    let mut taken = vec![false; spec.len()];
    for (k, e) in c.entries.iter().enumerate() {
        if *e.cube.spec() != spec {
            return fail(format!("entry {k}: grid differs"));
        }
        let b = e.cube.cell_box();
        for &i in &e.witness {
            if i >= spec.len() || !b.contains_cell(spec.cell(i), spec.dim()) {
                return fail(format!("entry {k}: witness cell {i} lies outside its cube"));
            }
            if taken[i] {
                return fail(format!("entry {k}: witness cell {i} is already used"));
            }
            taken[i] = true;
        }
        let mut sorted = e.witness.clone();
        sorted.dedup();
        if sorted.len() != e.witness.len() {
            return fail(format!("entry {k}: repeated witness cell"));
        }
        if 2 * e.witness.len() < e.cube.cell_count() {
            return fail(format!(
                "entry {k}: |F_Q| = {} cells is below half of |Q| = {}",
                e.witness.len(),
                e.cube.cell_count()
            ));
        }
    }
    SparsityReport { passed: true, entries: c.entries.len(), first_violation: None }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeAverages {
    pub avg1: f64,
    pub avg2: f64,
}

/// `|Q| <f1>_{Q,p+} <f2>_{3Q,q'+}` for each cube.
pub fn form_terms(
    c: &SparseCollection,
    f1: &GridFunction,
    f2: &GridFunction,
    exps: &ExponentPair,
    slice_exponent: f64,
) -> Result<Vec<CubeAverages>> {
    c.entries
        .par_iter()
        .map(|e| {
            let avg1 = slice_profile(f1, &e.cube.cell_box(), exps.p)?.plus_average(slice_exponent);
            let avg2 = slice_profile(f2, &e.cube.dilated_box(3), exps.q_prime())?.plus_average(slice_exponent);
            Ok(CubeAverages { avg1, avg2 })
        })
        .collect()
}

fn sum_terms(c: &SparseCollection, terms: &[CubeAverages]) -> f64 {
    c.entries.iter().zip(terms).map(|(e, t)| e.cube.volume() * t.avg1 * t.avg2).sum()
}

/// `sum_Q |Q| <f1>_{Q,p+} <f2>_{3Q,q'+}`.
pub fn evaluate_form(c: &SparseCollection, f1: &GridFunction, f2: &GridFunction, exps: &ExponentPair) -> Result<f64> {
    evaluate_form_weighted(c, f1, f2, exps, DEFAULT_SLICE_EXPONENT)
}

pub fn evaluate_form_weighted(
    c: &SparseCollection,
    f1: &GridFunction,
    f2: &GridFunction,
    exps: &ExponentPair,
    slice_exponent: f64,
) -> Result<f64> {
    Ok(sum_terms(c, &form_terms(c, f1, f2, exps, slice_exponent)?))
}

/// The same sum with plain p and q' averages.
pub fn evaluate_plain_form(c: &SparseCollection, f1: &GridFunction, f2: &GridFunction, exps: &ExponentPair) -> Result<f64> {
    let mut total = 0.0;
    for e in &c.entries {
        total += e.cube.volume()
            * local_p_average(f1, &e.cube.cell_box(), exps.p)?
            * local_p_average(f2, &e.cube.dilated_box(3), exps.q_prime())?;
    }
    Ok(total)
}

/// `|<T f1, f2>|` or `<T* f1, f2>` on the full grid.
pub fn problem_pairing(problem: &SparseProblem) -> Result<f64> {
    let spec = *problem.f1.spec();
    match problem.kind {
        OperatorKind::Singular => {
            let t = RadonOperator::new(spec, &problem.mu, &problem.eps)?;
            Ok(pairing(&t.apply(&problem.f1)?, &problem.f2)?.abs())
        }
        OperatorKind::Maximal => {
            let t = MaximalOperator::new(spec, &problem.sigma, problem.eps.scales())?;
            pairing(&t.apply(&problem.f1)?, &problem.f2)
        }
    }
}

/// Pairings at or below this are treated as zero when the form vanishes.
pub const ZERO_PAIRING: f64 = 1e-10;

fn ratio_of(pairing: f64, form: f64) -> Result<f64> {
    if form > 0.0 {
        Ok(pairing / form)
    } else if pairing <= ZERO_PAIRING {
        Ok(0.0)
    } else {
        Err(Error::CheckFailed(format!("form vanishes but the pairing is {pairing:e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: u32,
    pub s: u32,
}

impl From<&GridSpec> for GridDocument {
    fn from(g: &GridSpec) -> Self {
        Self { n: g.dim(), k: g.log_cells(), s: g.log_unit() }
    }
}

impl GridDocument {
    pub fn to_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.n, self.k, self.s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    #[serde(flatten)]
    pub cube: CubeKey,
    pub depth: usize,
    #[serde(rename = "D")]
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateCube {
    pub level: i32,
    pub corner: Vec<i64>,
    pub depth: usize,
    #[serde(rename = "F_RLE")]
    pub f_rle: Vec<[usize; 2]>,
    pub avg1: f64,
    pub avg2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateChecks {
    pub sparsity: bool,
    pub union: bool,
    pub nested: bool,
    pub depth_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCertificate {
    pub kind: OperatorKind,
    pub p: f64,
    pub q: f64,
    pub grid: GridDocument,
    pub epsilon: EpsilonSigns,
    pub q0: CubeKey,
    pub window_ratio: i64,
    pub slice_exponent: f64,
    #[serde(rename = "D_trace")]
    pub d_trace: Vec<ThresholdRecord>,
    pub cubes: Vec<CertificateCube>,
    pub pairing: f64,
    pub form: f64,
    pub plain_form: f64,
    pub ratio: f64,
    pub max_depth: usize,
    pub checks: CertificateChecks,
    /// Decay exponent of sigma, when the grid resolves the fit.
    pub alpha_hat: Option<f64>,
    /// `(k, -k alpha / 2)` for `k` in `-6..=0`.
    pub slice_sum_thresholds: Vec<(i32, f64)>,
    pub adjacency: BTreeMap<u32, usize>,
}

fn nested_ok(c: &SparseCollection) -> bool {
    c.entries.iter().all(|e| match &e.parent {
        None => e.depth == 0,
        Some(p) => p.contains(&e.cube) && p.level() > e.cube.level(),
    })
}

/// Builds the collection, checks it, and evaluates both sides of the bound.
pub fn certify_bound(problem: &SparseProblem) -> Result<(SparseCertificate, SparseTrace)> {
    let (collection, trace) = build_sparse(problem)?;
    let report = verify_sparsity(&collection);
    if !report.passed {
        return Err(Error::CheckFailed(format!(
            "sparsity: {}",
            report.first_violation.unwrap_or_default()
        )));
    }
    let terms = form_terms(&collection, &problem.f1, &problem.f2, &problem.exps, problem.options.slice_exponent)?;
    let form = sum_terms(&collection, &terms);
    let plain_form = evaluate_plain_form(&collection, &problem.f1, &problem.f2, &problem.exps)?;
    let pairing = problem_pairing(problem)?;
    let ratio = ratio_of(pairing, form)?;
    let alpha_hat = estimate_decay(&problem.sigma).ok().map(|f| f.alpha_hat);
    let spec = *problem.f1.spec();
    let depth_limit = (problem.eps.n2() - problem.eps.n1() + 1) as usize;
    let cert = SparseCertificate {
        kind: problem.kind,
        p: problem.exps.p,
        q: problem.exps.q,
        grid: GridDocument::from(&spec),
        epsilon: problem.eps.clone(),
        q0: problem.q0.key(),
        window_ratio: problem.options.window_ratio,
        slice_exponent: problem.options.slice_exponent,
        d_trace: trace
            .nodes
            .iter()
            .map(|n| ThresholdRecord { cube: n.cube.clone(), depth: n.depth, d: n.d })
            .collect(),
        cubes: collection
            .entries
            .iter()
            .zip(&terms)
            .map(|(e, t)| CertificateCube {
                level: e.cube.level(),
                corner: e.cube.key().corner,
                depth: e.depth,
                f_rle: rle_encode(&e.witness),
                avg1: t.avg1,
                avg2: t.avg2,
            })
            .collect(),
        pairing,
        form,
        plain_form,
        ratio,
        max_depth: trace.max_depth,
        checks: CertificateChecks {
            sparsity: report.passed,
            union: trace.unions_ok(),
            nested: nested_ok(&collection),
            depth_bound: trace.max_depth <= depth_limit,
        },
        alpha_hat,
        slice_sum_thresholds: (-6..=0)
            .map(|k: i32| (k, alpha_hat.map_or(f64::NAN, |a| -(k as f64) * a / 2.0)))
            .collect(),
        adjacency: trace.adjacency(),
    };
    Ok((cert, trace))
}

/// A grid function stored on a cell box (row-major within the box).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSamples {
    pub lo: Vec<i64>,
    pub side: i64,
    pub samples: Vec<f64>,
}

impl BoxSamples {
    pub fn capture(f: &GridFunction, region: &CellBox) -> Result<Self> {
        let idx = f.spec().box_indices(region)?;
        Ok(Self {
            lo: region.lo[..f.spec().dim()].to_vec(),
            side: region.side,
            samples: idx.into_iter().map(|i| f.samples()[i]).collect(),
        })
    }

    pub fn restore(&self, spec: GridSpec) -> Result<GridFunction> {
        if self.lo.len() != spec.dim() {
            return Err(Error::InvalidArgument("box dimension".into()));
        }
        let mut lo = [0i64; 2];
        lo[..self.lo.len()].copy_from_slice(&self.lo);
        let region = CellBox::new(lo, self.side);
        let idx = spec.box_indices(&region)?;
        if idx.len() != self.samples.len() {
            return Err(Error::InvalidArgument("box sample count".into()));
        }
        let mut out = GridFunction::zeros(spec);
        for (i, v) in idx.into_iter().zip(&self.samples) {
            if !v.is_finite() {
                return Err(Error::InvalidArgument("non-finite sample".into()));
            }
            out.samples_mut()[i] = *v;
        }
        Ok(out)
    }
}

/// Serialized inputs of a certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub kind: OperatorKind,
    pub p: f64,
    pub q: f64,
    pub grid: GridDocument,
    pub epsilon: EpsilonSigns,
    pub q0: CubeKey,
    pub window_ratio: i64,
    pub slice_exponent: f64,
    pub mu: MeasureDocument,
    pub sigma: MeasureDocument,
    pub f1: BoxSamples,
    pub f2: BoxSamples,
}

impl SparseProblem {
    pub fn to_document(&self) -> Result<ProblemDocument> {
        Ok(ProblemDocument {
            kind: self.kind,
            p: self.exps.p,
            q: self.exps.q,
            grid: GridDocument::from(self.f1.spec()),
            epsilon: self.eps.clone(),
            q0: self.q0.key(),
            window_ratio: self.options.window_ratio,
            slice_exponent: self.options.slice_exponent,
            mu: MeasureDocument::from(&self.mu),
            sigma: MeasureDocument::from(&self.sigma),
            f1: BoxSamples::capture(&self.f1, &self.q0.cell_box())?,
            f2: BoxSamples::capture(&self.f2, &self.q0.dilated_box(3))?,
        })
    }

    pub fn from_document(doc: &ProblemDocument) -> Result<Self> {
        let spec = doc.grid.to_spec()?;
        let eps = EpsilonSigns::new(doc.epsilon.n1(), doc.epsilon.n2(), doc.epsilon.values().to_vec())?;
        Ok(Self {
            f1: doc.f1.restore(spec)?,
            f2: doc.f2.restore(spec)?,
            mu: doc.mu.clone().try_into()?,
            sigma: doc.sigma.clone().try_into()?,
            eps,
            exps: ExponentPair::new(doc.p, doc.q)?,
            q0: doc.q0.to_cube(spec)?,
            kind: doc.kind,
            options: SparseOptions { window_ratio: doc.window_ratio, slice_exponent: doc.slice_exponent },
        })
    }
}

/// Relative agreement used by the re-verifier.
pub const REVERIFY_TOL: f64 = 1e-8;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REVERIFY_TOL * a.abs().max(b.abs()) || (a - b).abs() <= ZERO_PAIRING * 1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverifyReport {
    pub passed: bool,
    pub sparsity: SparsityReport,
    pub differences: Vec<String>,
}

fn collection_from_certificate(cert: &SparseCertificate, spec: GridSpec) -> Result<SparseCollection> {
    let mut entries = Vec::with_capacity(cert.cubes.len());
    for c in &cert.cubes {
        let cube = CubeKey { level: c.level, corner: c.corner.clone() }.to_cube(spec)?;
        entries.push(SparseEntry { cube, witness: rle_decode(&c.f_rle), depth: c.depth, parent: None });
    }
    Ok(SparseCollection { entries })
}

/// Recomputes everything in `cert` from the serialized inputs.
pub fn reverify(cert: &SparseCertificate, doc: &ProblemDocument) -> Result<ReverifyReport> {
    let problem = SparseProblem::from_document(doc)?;
    let spec = *problem.f1.spec();
    let mut diffs = Vec::new();
    let header = [
        (cert.kind == problem.kind, "kind"),
        (cert.p == problem.exps.p && cert.q == problem.exps.q, "exponents"),
        (cert.grid == doc.grid, "grid"),
        (cert.epsilon == problem.eps, "epsilon"),
        (cert.q0 == doc.q0, "q0"),
        (cert.window_ratio == doc.window_ratio && cert.slice_exponent == doc.slice_exponent, "options"),
    ];
    for (ok, name) in header {
        if !ok {
            diffs.push(format!("{name} differs between certificate and inputs"));
        }
    }
    let claimed = collection_from_certificate(cert, spec)?;
    let sparsity = verify_sparsity(&claimed);
    if !sparsity.passed {
        diffs.push(format!("sparsity: {}", sparsity.first_violation.clone().unwrap_or_default()));
    }
    let (rebuilt, _) = build_sparse(&problem)?;
    if rebuilt.entries.len() != claimed.entries.len() {
        diffs.push(format!(
            "union: rebuilt {} cubes, certificate lists {}",
            rebuilt.entries.len(),
            claimed.entries.len()
        ));
    } else {
        for (k, (a, b)) in rebuilt.entries.iter().zip(&claimed.entries).enumerate() {
            if a.cube != b.cube || a.depth != b.depth {
                diffs.push(format!("union: cube {k} differs"));
            } else if a.witness != b.witness {
                diffs.push(format!("union: witness set of cube {k} differs"));
            }
        }
    }
    let terms = form_terms(&claimed, &problem.f1, &problem.f2, &problem.exps, problem.options.slice_exponent)?;
    for (k, (t, c)) in terms.iter().zip(&cert.cubes).enumerate() {
        if !close(t.avg1, c.avg1) || !close(t.avg2, c.avg2) {
            diffs.push(format!("averages of cube {k}: recomputed ({}, {}), listed ({}, {})", t.avg1, t.avg2, c.avg1, c.avg2));
        }
    }
    let form = sum_terms(&claimed, &terms);
    let pairing = problem_pairing(&problem)?;
    if !close(form, cert.form) {
        diffs.push(format!("form: recomputed {form:e}, listed {:e}", cert.form));
    }
    if !close(pairing, cert.pairing) {
        diffs.push(format!("pairing: recomputed {pairing:e}, listed {:e}", cert.pairing));
    }
    match ratio_of(pairing, form) {
        Ok(r) if close(r, cert.ratio) => {}
        Ok(r) => diffs.push(format!("ratio: recomputed {r:e}, listed {:e}", cert.ratio)),
        Err(e) => diffs.push(e.to_string()),
    }
    Ok(ReverifyReport { passed: diffs.is_empty(), sparsity, differences: diffs })
}

/// Families of test pairs; see [`battery`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatteryFamily {
    PiecewiseConstant,
    Bumps,
    Rectangles,
    HeavyTailed,
}

const FAMILIES: [BatteryFamily; 4] = [
    BatteryFamily::PiecewiseConstant,
    BatteryFamily::Bumps,
    BatteryFamily::Rectangles,
    BatteryFamily::HeavyTailed,
];

fn sample_family(spec: &GridSpec, region: &CellBox, family: BatteryFamily, rng: &mut ChaCha8Rng) -> GridFunction {
    let dim = spec.dim();
    let u = spec.unit_cells();
    let mut out = GridFunction::zeros(*spec);
    let idx = spec.box_indices(region).expect("battery region lies in the domain");
    match family {
        BatteryFamily::PiecewiseConstant => {
            // constant on blocks of 1/8 unit
            let block = (u / 8).max(1);
            let per_axis = (region.side + block - 1) / block;
            let values: Vec<f64> = (0..per_axis.pow(dim as u32)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in idx {
                let c = spec.cell(i);
                let b0 = (c[0] - region.lo[0]) / block;
                let b1 = if dim == 2 { (c[1] - region.lo[1]) / block } else { 0 };
                out.samples_mut()[i] = values[(b0 * if dim == 2 { per_axis } else { 1 } + b1) as usize];
            }
        }
        BatteryFamily::Bumps => {
            let bumps: Vec<([f64; 2], f64, f64)> = (0..rng.gen_range(1..=5))
                .map(|_| {
                    let c = [
                        rng.gen_range(region.lo[0] as f64..(region.lo[0] + region.side) as f64),
                        rng.gen_range(region.lo[1] as f64..(region.lo[1] + region.side) as f64),
                    ];
                    (c, rng.gen_range(0.05..0.5) * region.side as f64, rng.gen_range(-1.0..1.0))
                })
                .collect();
            for i in idx {
                let c = spec.cell(i);
                out.samples_mut()[i] = bumps
                    .iter()
                    .map(|(x, w, a)| {
                        a * (0..dim)
                            .map(|k| crate::measures::standard_bump((c[k] as f64 - x[k]) / w))
                            .product::<f64>()
                    })
                    .sum();
            }
        }
        BatteryFamily::Rectangles => {
            for _ in 0..rng.gen_range(1..=3) {
                let mut lo = [0i64; 2];
                let mut hi = [1i64; 2];
                for a in 0..dim {
                    let x = rng.gen_range(0..region.side);
                    let y = rng.gen_range(0..region.side);
                    lo[a] = region.lo[a] + x.min(y);
                    hi[a] = region.lo[a] + x.max(y) + 1;
                }
                let a = rng.gen_range(-1.0..1.0);
                for &i in &idx {
                    let c = spec.cell(i);
                    if (0..dim).all(|k| c[k] >= lo[k] && c[k] < hi[k]) {
                        out.samples_mut()[i] += a;
                    }
                }
            }
        }
        BatteryFamily::HeavyTailed => {
            for i in idx {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                out.samples_mut()[i] = sign * 10f64.powf(rng.gen_range(-3.0..3.0));
            }
        }
    }
    out
}

/// One test pair of the standard battery.
#[derive(Clone, Debug)]
pub struct BatteryPair {
    pub family: BatteryFamily,
    pub f1: GridFunction,
    pub f2: GridFunction,
}

/// `count` seeded pairs `(f1 on Q0, f2 on 3Q0)`, cycling through the four
/// families. For the maximal kind `f2` is replaced by `|f2|`.
pub fn battery(spec: &GridSpec, q0: &DyadicCube, count: usize, seed: u64, kind: OperatorKind) -> Vec<BatteryPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let family = FAMILIES[k % FAMILIES.len()];
            let f1 = sample_family(spec, &q0.cell_box(), family, &mut rng);
            let mut f2 = sample_family(spec, &q0.dilated_box(3), family, &mut rng);
            if kind == OperatorKind::Maximal {
                f2 = f2.abs();
            }
            BatteryPair { family, f1, f2 }
        })
        .collect()
}

/// Constant pairs `c1 1_Q0`, `c2 1_3Q0` with seeded positive constants.
pub fn constants_battery(spec: &GridSpec, q0: &DyadicCube, count: usize, seed: u64) -> Result<Vec<BatteryPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c1 = rng.gen_range(0.1..10.0);
            let c2 = rng.gen_range(0.1..10.0);
            Ok(BatteryPair {
                family: BatteryFamily::PiecewiseConstant,
                f1: GridFunction::indicator(*spec, &q0.cell_box())?.scaled(c1),
                f2: GridFunction::indicator(*spec, &q0.dilated_box(3))?.scaled(c2),
            })
        })
        .collect()
}

pub fn witness_mask(spec: &GridSpec, entry: &SparseEntry) -> Vec<bool> {
    let mut m = vec![false; spec.len()];
    for &i in &entry.witness {
        m[i] = true;
    }
    m
}

pub fn witness_indices(mask: &[bool]) -> Vec<usize> {
    mask_indices(mask)
}
