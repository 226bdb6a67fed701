//! Dyadic cubes, p and p+ local averages with their level slices, the
//! exceptional set, Whitney covers and Calderon-Zygmund decompositions.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CellBox, GridFunction, GridSpec};
use crate::measures::DiscreteMeasure;
use crate::operators::{maximal_fn, ExponentPair, MaximalOperator};

/// Largest slice index computed before a function is rejected.
pub const MAX_SLICE: u32 = 64;

/// Default exponent of the `(m+1)` weights in the p+ average.
pub const DEFAULT_SLICE_EXPONENT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DyadicCube {
    spec: GridSpec,
    level: i32,
    corner: [i64; 2],
}

impl DyadicCube {
    /// Cube of side `2^level` units with lower corner `corner` (cells).
    pub fn new(spec: GridSpec, level: i32, corner: [i64; 2]) -> Result<Self> {
        let log_side = level + spec.log_unit() as i32;
        if log_side < 0 || log_side > spec.log_cells() as i32 {
            return Err(Error::InvalidArgument(format!("level {level} has no cells on {spec:?}")));
        }
        let side = 1i64 << log_side;
        let n = spec.cells_per_axis() as i64;
        for a in 0..spec.dim() {
            if corner[a] % side != 0 || corner[a] < 0 || corner[a] + side > n {
                return Err(Error::InvalidArgument(format!(
                    "corner {corner:?} is not a dyadic corner for side {side}"
                )));
            }
        }
        if spec.dim() == 1 && corner[1] != 0 {
            return Err(Error::InvalidArgument("1D cube with a second coordinate".into()));
        }
        Ok(Self { spec, level, corner })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn level(&self) -> i32 {
        self.level
    }

    pub fn corner(&self) -> [i64; 2] {
        self.corner
    }

    pub fn side_cells(&self) -> i64 {
        1i64 << (self.level + self.spec.log_unit() as i32)
    }

    /// Side length in units.
    pub fn side_length(&self) -> f64 {
        (self.level as f64).exp2()
    }

    pub fn volume(&self) -> f64 {
        (self.level as f64 * self.spec.dim() as f64).exp2()
    }

    pub fn cell_count(&self) -> usize {
        (self.side_cells() as usize).pow(self.spec.dim() as u32)
    }

    pub fn cell_box(&self) -> CellBox {
        CellBox::new(self.corner, self.side_cells())
    }

    /// The concentric dilate by `factor`, rounded inwards to whole cells.
    pub fn dilated_box(&self, factor: i64) -> CellBox {
        self.cell_box().scaled(factor, self.spec.dim())
    }

    pub fn contains(&self, other: &DyadicCube) -> bool {
        self.cell_box().contains_box(&other.cell_box(), self.spec.dim())
    }

    pub fn children(&self) -> Vec<DyadicCube> {
        let half = self.side_cells() / 2;
        if half == 0 {
            return Vec::new();
        }
        let offsets: &[[i64; 2]] = if self.spec.dim() == 1 {
            &[[0, 0], [1, 0]]
        } else {
            &[[0, 0], [0, 1], [1, 0], [1, 1]]
        };
        offsets
            .iter()
            .map(|o| DyadicCube {
                spec: self.spec,
                level: self.level - 1,
                corner: [self.corner[0] + o[0] * half, self.corner[1] + o[1] * half],
            })
            .collect()
    }

    pub fn key(&self) -> CubeKey {
        CubeKey { level: self.level, corner: self.corner[..self.spec.dim()].to_vec() }
    }
}

/// Serialised identity of a cube.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeKey {
    pub level: i32,
    pub corner: Vec<i64>,
}

impl CubeKey {
    pub fn to_cube(&self, spec: GridSpec) -> Result<DyadicCube> {
        if self.corner.len() != spec.dim() {
            return Err(Error::InvalidArgument("cube corner has the wrong dimension".into()));
        }
        let mut corner = [0i64; 2];
        corner[..self.corner.len()].copy_from_slice(&self.corner);
        DyadicCube::new(spec, self.level, corner)
    }
}

/// Run-length encoding of a sorted index list as `[start, length]` runs.
pub fn rle_encode(indices: &[usize]) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for &i in indices {
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == i => r[1] += 1,
            _ => runs.push([i, 1]),
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]]) -> Vec<usize> {
    runs.iter().flat_map(|r| r[0]..r[0] + r[1]).collect()
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// `(|R|^-1 sum_R |f|^p)^(1/p)` over the cells of `region`.
pub fn local_p_average(f: &GridFunction, region: &CellBox, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p}")));
    }
    let idx = f.spec().box_indices(region)?;
    let s: f64 = idx.iter().map(|&i| f.samples()[i].abs().powf(p)).sum();
    Ok((s / idx.len() as f64).powf(1.0 / p))
}

/// Slice index of a magnitude `v` against the average `a > 0`: zero when
/// `v <= a`, otherwise the `m` with `2^(m-1) a < v <= 2^m a`.
fn slice_index(v: f64, a: f64) -> Result<u32> {
    if v <= a {
        return Ok(0);
    }
    let mut m = ((v / a).log2().ceil() as i64).max(1);
    while m > 1 && v <= a * ((m - 1) as f64).exp2() {
        m -= 1;
    }
    while v > a * (m as f64).exp2() {
        m += 1;
    }
    if m > MAX_SLICE as i64 {
        return Err(Error::DynamicRange);
    }
    Ok(m as u32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSlice {
    pub region: CellBox,
    pub p: f64,
    pub m: u32,
    pub slice: GridFunction,
}

/// The slice `f^m` of `f` on `region` relative to its p-average.
pub fn level_slice(f: &GridFunction, region: &CellBox, p: f64, m: u32) -> Result<LevelSlice> {
    let a = local_p_average(f, region, p)?;
    let spec = *f.spec();
    let mut out = GridFunction::zeros(spec);
    if a > 0.0 {
        for i in spec.box_indices(region)? {
            let v = f.samples()[i];
            if slice_index(v.abs(), a)? == m {
                out.samples_mut()[i] = v;
            }
        }
    }
    Ok(LevelSlice { region: *region, p, m, slice: out.with_support(*region) })
}

/// The p-average of `f` on a region together with the p-averages of its
/// nonempty level slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceProfile {
    pub average: f64,
    /// `(m, <|f^m|>_{R,p})` for each nonempty slice, ascending in `m`.
    pub slices: Vec<(u32, f64)>,
}

impl SliceProfile {
    pub fn plus_average(&self, weight_exponent: f64) -> f64 {
        self.slices
            .iter()
            .map(|&(m, avg)| (m as f64 + 1.0).powf(weight_exponent) * avg)
            .sum()
    }
}

pub fn slice_profile(f: &GridFunction, region: &CellBox, p: f64) -> Result<SliceProfile> {
    let a = local_p_average(f, region, p)?;
    let idx = f.spec().box_indices(region)?;
    let mut sums = vec![0.0f64; MAX_SLICE as usize + 1];
    let mut seen = vec![false; MAX_SLICE as usize + 1];
    if a > 0.0 {
        for &i in &idx {
            let v = f.samples()[i].abs();
            if v == 0.0 {
                continue;
            }
            let m = slice_index(v, a)? as usize;
            sums[m] += v.powf(p);
            seen[m] = true;
        }
    }
    let cells = idx.len() as f64;
    let slices = (0..sums.len())
        .filter(|&m| seen[m])
        .map(|m| (m as u32, (sums[m] / cells).powf(1.0 / p)))
        .collect();
    Ok(SliceProfile { average: a, slices })
}

/// `sum_m (m+1)^4 <|f^m|>_{R,p}`.
pub fn plus_average(f: &GridFunction, region: &CellBox, p: f64) -> Result<f64> {
    plus_average_weighted(f, region, p, DEFAULT_SLICE_EXPONENT)
}

pub fn plus_average_weighted(f: &GridFunction, region: &CellBox, p: f64, weight_exponent: f64) -> Result<f64> {
    Ok(slice_profile(f, region, p)?.plus_average(weight_exponent))
}

/// Pointwise ratio of each maximal quantity defining the exceptional set to
/// its threshold base, maximised over the families; `E(D) = {field > D}`.
#[derive(Clone, Debug)]
pub struct ExceptionalField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub families: usize,
}

fn raise(values: &mut [f64], m: &GridFunction, base: f64) {
    for (v, x) in values.iter_mut().zip(m.samples()) {
        *v = v.max(x / base);
    }
}

fn add_families(
    values: &mut [f64],
    f: &GridFunction,
    region: &CellBox,
    p: f64,
    star: &MaximalOperator,
) -> Result<usize> {
    let profile = slice_profile(f, region, p)?;
    if profile.average == 0.0 {
        return Ok(0);
    }
    let base = profile.average;
    raise(values, &maximal_fn(f, p)?, base);
    raise(values, &maximal_fn(&star.apply(f)?, 1.0)?, base);
    let mut families = 2;
    for (m, avg) in profile.slices {
        let slice = level_slice(f, region, p, m)?;
        raise(values, &maximal_fn(&slice.slice, p)?, (m as f64 + 1.0) * avg);
        families += 1;
    }
    Ok(families)
}

/// The exceptional field for `f1` on `Q0` (exponent `p`) and `f2` on `3Q0`
/// (exponent `q'`), with the maximal transform over `scales` capped at
/// `l(Q0)`.
pub fn exceptional_field(
    f1: &GridFunction,
    f2: &GridFunction,
    sigma: &DiscreteMeasure,
    exps: &ExponentPair,
    q0: &DyadicCube,
    scales: RangeInclusive<i32>,
) -> Result<ExceptionalField> {
    let spec = *f1.spec();
    crate::lattice::check_same(&spec, f2.spec())?;
    crate::lattice::check_same(&spec, q0.spec())?;
    let q_box = q0.cell_box();
    let triple = q0.dilated_box(3);
    if !f1.is_supported_in(&q_box) {
        return Err(Error::Support("f1 is not supported in Q0".into()));
    }
    if !f2.is_supported_in(&triple) {
        return Err(Error::Support("f2 is not supported in 3Q0".into()));
    }
    let top = (*scales.end()).min(q0.level());
    let star = MaximalOperator::new(spec, sigma, *scales.start()..=top)?;
    let mut values = vec![0.0f64; spec.len()];
    let mut families = add_families(&mut values, f1, &q_box, exps.p, &star)?;
    families += add_families(&mut values, f2, &triple, exps.q_prime(), &star)?;
    Ok(ExceptionalField { spec, values, families })
}

impl ExceptionalField {
    pub fn set(&self, d: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v > d).collect()
    }
}

pub fn exceptional_set(
    f1: &GridFunction,
    f2: &GridFunction,
    sigma: &DiscreteMeasure,
    exps: &ExponentPair,
    d: f64,
    q0: &DyadicCube,
    scales: RangeInclusive<i32>,
) -> Result<Vec<bool>> {
    Ok(exceptional_field(f1, f2, sigma, exps, q0, scales)?.set(d))
}

/// Largest `D` the threshold search will try.
pub const MAX_THRESHOLD: f64 = 1.152921504606847e18; // 2^60

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub d: f64,
    pub exceptional_cells: usize,
    pub cube_cells: usize,
}

/// Smallest power of two `D >= 2` with `|E| <= |Q0|/2` and `E` inside `6Q0`.
pub fn select_threshold(field: &ExceptionalField, q0: &DyadicCube) -> Result<(ThresholdChoice, Vec<bool>)> {
    let spec = field.spec;
    let six = q0.dilated_box(6);
    let limit = q0.cell_count();
    let mut d = 2.0;
    while d <= MAX_THRESHOLD {
        let mut count = 0usize;
        let mut inside = true;
        for (i, &v) in field.values.iter().enumerate() {
            if v > d {
                count += 1;
                if !six.contains_cell(spec.cell(i), spec.dim()) {
                    inside = false;
                    break;
                }
            }
        }
        if inside && 2 * count <= limit {
            return Ok((
                ThresholdChoice { d, exceptional_cells: count, cube_cells: limit },
                field.set(d),
            ));
        }
        d *= 2.0;
    }
    Err(Error::CheckFailed("no threshold up to 2^60 confines the exceptional set".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhitneyCube {
    pub cube: DyadicCube,
    pub boundary_layer: bool,
}

/// Outcome of checking the Whitney distance window on the interior cubes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WregReport {
    pub interior_cubes: usize,
    pub boundary_cubes: usize,
    pub violations: usize,
    /// Extremes of `dist(Q, E^c) / (sqrt(n) l(Q))` over interior cubes.
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub max_triple_overlap: usize,
}

#[derive(Clone, Debug)]
pub struct WhitneyCover {
    pub spec: GridSpec,
    pub cubes: Vec<WhitneyCube>,
    pub mask: Vec<bool>,
    pub report: WregReport,
}

/// Squared Euclidean distance transform along one line (Felzenszwalb and
/// Huttenlocher), with `INF` marking cells outside the target set.
fn edt_line(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|&x| x < INF) {
        Some(i) => i,
        None => {
            out.fill(INF);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *o = d * d + f[p];
    }
}

const INF: i64 = 1 << 50;

/// Per cell, the squared gap between the cell square and the union of the
/// cells not in `mask` (cells beyond the domain edge count as outside).
pub fn gap_field(spec: &GridSpec, mask: &[bool]) -> Vec<i64> {
    let n = spec.cells_per_axis();
    let dim = spec.dim();
    let outside = |c: [i64; 2]| -> bool {
        (0..dim).any(|a| c[a] < 0 || c[a] >= n as i64) || !mask[spec.index(c)]
    };
    // the gap to a cell set equals the centre distance to its 3^n dilate
    let near: Vec<i64> = (0..spec.len())
        .map(|i| {
            let c = spec.cell(i);
            let span = if dim == 2 { 1 } else { 0 };
            for d0 in -1..=1 {
                for d1 in -span..=span {
                    if outside([c[0] + d0, c[1] + d1]) {
                        return 0;
                    }
                }
            }
            INF
        })
        .collect();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    if dim == 1 {
        let mut out = vec![0i64; n];
        edt_line(&near, &mut out, &mut v, &mut z);
        return out;
    }
    let mut rows = vec![0i64; spec.len()];
    let mut col = vec![0i64; n];
    let mut col_out = vec![0i64; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = near[i * n + j];
        }
        edt_line(&col, &mut col_out, &mut v, &mut z);
        for i in 0..n {
            rows[i * n + j] = col_out[i];
        }
    }
    let mut out = vec![0i64; spec.len()];
    for i in 0..n {
        let line = &rows[i * n..(i + 1) * n];
        let capped: Vec<i64> = line.iter().map(|&x| x.min(INF)).collect();
        edt_line(&capped, &mut out[i * n..(i + 1) * n], &mut v, &mut z);
    }
    out
}

struct Pyramid {
    /// Per level (side `2^l` cells): minimum gap, all-in-mask, any-in-mask.
    levels: Vec<(Vec<i64>, Vec<bool>, Vec<bool>)>,
    dim: usize,
    n: usize,
}

impl Pyramid {
    fn build(spec: &GridSpec, mask: &[bool], gap: &[i64]) -> Self {
        let n = spec.cells_per_axis();
        let dim = spec.dim();
        let mut levels = vec![(gap.to_vec(), mask.to_vec(), mask.to_vec())];
        let mut width = n;
        while width > 1 {
            let (g, all, any) = levels.last().unwrap();
            let w2 = width / 2;
            let len = w2.pow(dim as u32);
            let (mut ng, mut nall, mut nany) = (vec![INF; len], vec![true; len], vec![false; len]);
            for i in 0..width.pow(dim as u32) {
                let (a, b) = if dim == 2 { (i / width, i % width) } else { (i, 0) };
                let j = if dim == 2 { (a / 2) * w2 + b / 2 } else { a / 2 };
                ng[j] = ng[j].min(g[i]);
                nall[j] &= all[i];
                nany[j] |= any[i];
            }
            levels.push((ng, nall, nany));
            width = w2;
        }
        Self { levels, dim, n }
    }

    fn entry(&self, log_side: usize, corner: [i64; 2]) -> (i64, bool, bool) {
        let side = 1usize << log_side;
        let width = self.n / side;
        let a = corner[0] as usize / side;
        let j = if self.dim == 2 { a * width + corner[1] as usize / side } else { a };
        let (g, all, any) = &self.levels[log_side];
        (g[j], all[j], any[j])
    }
}

/// Greedy top-down Whitney decomposition of the cell set `mask`.
pub fn whitney(spec: &GridSpec, mask: &[bool]) -> Result<WhitneyCover> {
    if mask.len() != spec.len() {
        return Err(Error::InvalidArgument("mask length".into()));
    }
    let dim = spec.dim() as i64;
    let gap = gap_field(spec, mask);
    let pyramid = Pyramid::build(spec, mask, &gap);
    let s = spec.log_unit() as i32;
    let mut cubes = Vec::new();
    let mut report = WregReport::default();
    let mut stack = vec![(spec.log_cells() as usize, [0i64, 0i64])];
    while let Some((log_side, corner)) = stack.pop() {
        let (g, all, any) = pyramid.entry(log_side, corner);
        if !any {
            continue;
        }
        let side = 1i64 << log_side;
        let cube = DyadicCube::new(*spec, log_side as i32 - s, corner)?;
        if all && 25 * dim * side * side <= g {
            let ratio = (g as f64).sqrt() / ((dim as f64).sqrt() * side as f64);
            report.interior_cubes += 1;
            if g >= 121 * dim * side * side {
                report.violations += 1;
            }
            report.min_ratio = Some(report.min_ratio.map_or(ratio, |r: f64| r.min(ratio)));
            report.max_ratio = Some(report.max_ratio.map_or(ratio, |r: f64| r.max(ratio)));
            cubes.push(WhitneyCube { cube, boundary_layer: false });
        } else if log_side == 0 {
            report.boundary_cubes += 1;
            cubes.push(WhitneyCube { cube, boundary_layer: true });
        } else {
            // push in reverse so children pop in row-major order
            let mut kids = cube.children();
            kids.reverse();
            for k in kids {
                stack.push((log_side - 1, k.corner()));
            }
        }
    }
    cubes.sort_by_key(|c| (c.cube.corner(), c.cube.level()));
    report.max_triple_overlap = triple_overlap(spec, &cubes);
    Ok(WhitneyCover { spec: *spec, cubes, mask: mask.to_vec(), report })
}

fn triple_overlap(spec: &GridSpec, cubes: &[WhitneyCube]) -> usize {
    let n = spec.cells_per_axis() as i64;
    let dim = spec.dim();
    let mut counts = vec![0u32; spec.len()];
    for c in cubes {
        let b = c.cube.dilated_box(3);
        let lo0 = b.lo[0].max(0);
        let hi0 = (b.lo[0] + b.side).min(n);
        let (lo1, hi1) = if dim == 2 { (b.lo[1].max(0), (b.lo[1] + b.side).min(n)) } else { (0, 1) };
        for i in lo0..hi0 {
            for j in lo1..hi1 {
                counts[spec.index([i, j])] += 1;
            }
        }
    }
    counts.into_iter().max().unwrap_or(0) as usize
}

impl WhitneyCover {
    /// Whether the cubes are disjoint and their union is exactly the mask.
    pub fn union_matches(&self) -> bool {
        let mut covered = vec![false; self.spec.len()];
        for c in &self.cubes {
            for i in self.spec.box_indices(&c.cube.cell_box()).unwrap_or_default() {
                if covered[i] {
                    return false;
                }
                covered[i] = true;
            }
        }
        covered == self.mask
    }

    pub fn to_document(&self) -> WhitneyDocument {
        WhitneyDocument {
            cubes: self
                .cubes
                .iter()
                .map(|c| WhitneyCubeDocument { cube: c.cube.key(), boundary_layer: c.boundary_layer })
                .collect(),
            mask: rle_encode(&mask_indices(&self.mask)),
            report: self.report.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyCubeDocument {
    #[serde(flatten)]
    pub cube: CubeKey,
    pub boundary_layer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyDocument {
    pub cubes: Vec<WhitneyCubeDocument>,
    pub mask: Vec<[usize; 2]>,
    pub report: WregReport,
}

#[derive(Clone, Debug)]
pub struct CZDecomposition {
    pub good: GridFunction,
    /// `b_Q = 1_Q (f - <f>_Q)` stored on the cells of `Q` in row-major order.
    pub bad: Vec<(DyadicCube, Vec<f64>)>,
}

impl CZDecomposition {
    pub fn reconstruct(&self) -> GridFunction {
        let mut out = self.good.clone();
        let spec = *out.spec();
        for (q, b) in &self.bad {
            let idx = spec.box_indices(&q.cell_box()).expect("cube lies in the domain");
            for (i, v) in idx.into_iter().zip(b) {
                out.samples_mut()[i] += v;
            }
        }
        out
    }
}

/// Good part equal to the signed mean on each cube, bad parts the remainders.
pub fn cz_decompose(f: &GridFunction, cover: &WhitneyCover) -> Result<CZDecomposition> {
    crate::lattice::check_same(f.spec(), &cover.spec)?;
    let spec = *f.spec();
    let mut good = f.clone();
    let mut bad = Vec::with_capacity(cover.cubes.len());
    for c in &cover.cubes {
        let idx = spec.box_indices(&c.cube.cell_box())?;
        let mean = idx.iter().map(|&i| f.samples()[i]).sum::<f64>() / idx.len() as f64;
        let mut b = Vec::with_capacity(idx.len());
        for &i in &idx {
            b.push(f.samples()[i] - mean);
            good.samples_mut()[i] = mean;
        }
        bad.push((c.cube, b));
    }
    Ok(CZDecomposition { good, bad })
}
