//! Periodic dyadic grids, sampled functions, the discrete Fourier pair and
//! spectral convolution with atomic measures.
//!
//! A grid has `N = 2^K` cells per axis and `u = 2^s` cells per unit length,
//! so the torus has physical side `N / u`. Cell `i` sits at physical
//! coordinate `i / u`. Integrals are cell-volume weighted sums.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::measures::DiscreteMeasure;

/// Largest `K` accepted for two-dimensional grids.
pub const MAX_LOG_CELLS_2D: u32 = 14;
/// Largest `K` accepted for one-dimensional grids.
pub const MAX_LOG_CELLS_1D: u32 = 24;

/// Shape of a periodic dyadic grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    #[serde(rename = "K")]
    log_cells: u32,
    s: u32,
}

impl GridSpec {
    /// Validated constructor: `n` in {1, 2} and `3 <= s <= K - 4`.
    pub fn new(n: usize, log_cells: u32, s: u32) -> Result<Self> {
        if n != 1 && n != 2 {
            return Err(Error::GridGuard(format!("dimension {n} is not 1 or 2")));
        }
        if n == 2 && log_cells > MAX_LOG_CELLS_2D {
            return Err(Error::GridGuard(format!(
                "K = {log_cells} exceeds the 2D memory guard {MAX_LOG_CELLS_2D}"
            )));
        }
        if n == 1 && log_cells > MAX_LOG_CELLS_1D {
            return Err(Error::GridGuard(format!("K = {log_cells} exceeds {MAX_LOG_CELLS_1D}")));
        }
        if s < 3 {
            return Err(Error::GridGuard(format!("s = {s} is below 3")));
        }
        if s + 4 > log_cells {
            return Err(Error::GridGuard(format!(
                "padding guard needs s <= K - 4, got s = {s}, K = {log_cells}"
            )));
        }
        Ok(Self { n, log_cells, s })
    }

    /// Grid without the padding guard, for small oracle grids and the local
    /// windows of the sparse recursion. Only the dimension and size caps are
    /// enforced; convolutions still refuse atoms that would wrap.
    pub fn relaxed(n: usize, log_cells: u32, s: u32) -> Result<Self> {
        let cap = if n == 2 { MAX_LOG_CELLS_2D } else { MAX_LOG_CELLS_1D };
        if (n != 1 && n != 2) || log_cells > cap || log_cells == 0 {
            return Err(Error::GridGuard(format!(
                "window grid n = {n}, K = {log_cells} out of range"
            )));
        }
        Ok(Self { n, log_cells, s })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_cells(&self) -> u32 {
        self.log_cells
    }

    pub fn log_unit(&self) -> u32 {
        self.s
    }

    /// `N`, the number of cells along each axis.
    pub fn cells_per_axis(&self) -> usize {
        1usize << self.log_cells
    }

    /// `u`, the number of cells per unit length.
    pub fn unit_cells(&self) -> i64 {
        1i64 << self.s
    }

    /// Physical side length `N / u`.
    pub fn side_length(&self) -> f64 {
        (self.log_cells as f64 - self.s as f64).exp2()
    }

    pub fn cell_volume(&self) -> f64 {
        (-(self.s as f64) * self.n as f64).exp2()
    }

    /// Total number of cells, `N^n`.
    pub fn len(&self) -> usize {
        self.cells_per_axis().pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major index of a cell, wrapping periodically.
    pub fn index(&self, cell: [i64; 2]) -> usize {
        let side = self.cells_per_axis() as i64;
        let i0 = cell[0].rem_euclid(side) as usize;
        if self.n == 1 {
            i0
        } else {
            i0 * side as usize + cell[1].rem_euclid(side) as usize
        }
    }

    /// Cell coordinates of a row-major index.
    pub fn cell(&self, index: usize) -> [i64; 2] {
        let side = self.cells_per_axis();
        if self.n == 1 {
            [index as i64, 0]
        } else {
            [(index / side) as i64, (index % side) as i64]
        }
    }

    /// Signed frequency index in `(-N/2, N/2]` of a transform slot.
    pub fn signed_frequency(&self, slot: usize) -> i64 {
        let side = self.cells_per_axis();
        if slot > side / 2 {
            slot as i64 - side as i64
        } else {
            slot as i64
        }
    }

    /// Physical frequency (cycles per unit length) of the transform slot at
    /// `index`.
    pub fn frequency(&self, index: usize) -> [f64; 2] {
        let side = self.side_length();
        let c = self.cell(index);
        let f0 = self.signed_frequency(c[0] as usize) as f64 / side;
        if self.n == 1 {
            [f0, 0.0]
        } else {
            [f0, self.signed_frequency(c[1] as usize) as f64 / side]
        }
    }

    /// Euclidean norm of the physical frequency at every transform slot.
    pub fn frequency_norms(&self) -> Vec<f64> {
        let side = self.side_length();
        let n_axis = self.cells_per_axis();
        let axis: Vec<f64> = (0..n_axis)
            .map(|k| self.signed_frequency(k) as f64 / side)
            .collect();
        if self.n == 1 {
            axis.iter().map(|x| x.abs()).collect()
        } else {
            let mut out = Vec::with_capacity(self.len());
            for &a in &axis {
                for &b in &axis {
                    out.push(a.hypot(b));
                }
            }
            out
        }
    }

    /// Whether every cell of `cells` lies inside the (unwrapped) domain.
    pub fn contains_box(&self, region: &CellBox) -> bool {
        let side = self.cells_per_axis() as i64;
        (0..self.n).all(|a| region.lo[a] >= 0 && region.lo[a] + region.side <= side)
            && region.side > 0
    }

    /// Row-major indices of the cells in `region`, which must lie inside the
    /// domain.
    pub fn box_indices(&self, region: &CellBox) -> Result<Vec<usize>> {
        if !self.contains_box(region) {
            return Err(Error::OutOfDomain(format!("{region:?}")));
        }
        let mut out = Vec::with_capacity(region.cell_count(self.n));
        if self.n == 1 {
            out.extend((region.lo[0]..region.lo[0] + region.side).map(|i| i as usize));
        } else {
            let side = self.cells_per_axis();
            for i in region.lo[0]..region.lo[0] + region.side {
                let row = i as usize * side;
                out.extend((region.lo[1]..region.lo[1] + region.side).map(|j| row + j as usize));
            }
        }
        Ok(out)
    }
}

/// Axis-aligned cube of cells with integer corner `lo` and side `side`
/// (cells). In one dimension only the first coordinate is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellBox {
    pub lo: [i64; 2],
    pub side: i64,
}

impl CellBox {
    pub fn new(lo: [i64; 2], side: i64) -> Self {
        Self { lo, side }
    }

    pub fn cell_count(&self, dim: usize) -> usize {
        (self.side.max(0) as usize).pow(dim as u32)
    }

    pub fn contains_cell(&self, cell: [i64; 2], dim: usize) -> bool {
        (0..dim).all(|a| cell[a] >= self.lo[a] && cell[a] < self.lo[a] + self.side)
    }

    pub fn contains_box(&self, other: &CellBox, dim: usize) -> bool {
        (0..dim).all(|a| other.lo[a] >= self.lo[a] && other.lo[a] + other.side <= self.lo[a] + self.side)
    }

    /// Largest cell box inside the concentric cube scaled by `factor`.
    pub fn scaled(&self, factor: i64, dim: usize) -> CellBox {
        // work in half cells so odd sides stay exact
        let grow2 = (factor - 1) * self.side;
        let mut lo = [0i64; 2];
        for a in 0..dim {
            lo[a] = (2 * self.lo[a] - grow2).div_euclid(2) + (2 * self.lo[a] - grow2).rem_euclid(2);
        }
        let hi0 = (2 * (self.lo[0] + self.side) + grow2).div_euclid(2);
        CellBox { lo, side: hi0 - lo[0] }
    }
}

/// Real samples on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    spec: GridSpec,
    samples: Vec<f64>,
    support: Option<CellBox>,
}

impl GridFunction {
    pub fn new(spec: GridSpec, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != spec.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples, got {}",
                spec.len(),
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self { spec, samples, support: None })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, samples: vec![0.0; spec.len()], support: None }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self { spec, samples: vec![value; spec.len()], support: None }
    }

    /// Evaluates `f` at the physical coordinates of every cell.
    pub fn from_fn(spec: GridSpec, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let u = spec.unit_cells() as f64;
        let samples = (0..spec.len())
            .map(|i| {
                let c = spec.cell(i);
                f([c[0] as f64 / u, c[1] as f64 / u])
            })
            .collect();
        Self::new(spec, samples)
    }

    /// Indicator of a cell box.
    pub fn indicator(spec: GridSpec, region: &CellBox) -> Result<Self> {
        let mut g = Self::zeros(spec);
        for i in spec.box_indices(region)? {
            g.samples[i] = 1.0;
        }
        g.support = Some(*region);
        Ok(g)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn support(&self) -> Option<&CellBox> {
        self.support.as_ref()
    }

    pub fn with_support(mut self, region: CellBox) -> Self {
        self.support = Some(region);
        self
    }

    /// `f * 1_region`, recording `region` as the support box.
    pub fn restricted_to(&self, region: &CellBox) -> Result<Self> {
        let mut out = Self::zeros(self.spec);
        for i in self.spec.box_indices(region)? {
            out.samples[i] = self.samples[i];
        }
        out.support = Some(*region);
        Ok(out)
    }

    /// Whether every nonzero sample lies in `region`.
    pub fn is_supported_in(&self, region: &CellBox) -> bool {
        let n = self.spec.dim();
        self.samples
            .iter()
            .enumerate()
            .all(|(i, &v)| v == 0.0 || region.contains_cell(self.spec.cell(i), n))
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            spec: self.spec,
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            support: self.support,
        }
    }

    pub fn scaled(&self, t: f64) -> Self {
        self.map(|v| t * v)
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self> {
        check_same(&self.spec, &other.spec)?;
        Ok(Self {
            spec: self.spec,
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            support: None,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(integral |f|^p)^(1/p)`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let v = self.spec.cell_volume();
        if p.is_infinite() {
            return self.max_abs();
        }
        (v * self.samples.iter().map(|x| x.abs().powf(p)).sum::<f64>()).powf(1.0 / p)
    }

    pub fn integral(&self) -> f64 {
        self.spec.cell_volume() * self.samples.iter().sum::<f64>()
    }
}

pub(crate) fn check_same(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a != b {
        return Err(Error::SpecMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Discrete Fourier coefficients scaled by the cell volume, so that
/// `c(xi) ~ integral f(x) e^{-2 pi i xi.x} dx` at physical frequency `xi`.
/// Slots are stored in transform order; see [`GridSpec::frequency`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFunction {
    spec: GridSpec,
    coefficients: Vec<Complex64>,
}

impl SpectralFunction {
    pub fn new(spec: GridSpec, coefficients: Vec<Complex64>) -> Result<Self> {
        if coefficients.len() != spec.len() {
            return Err(Error::InvalidArgument("coefficient count mismatch".into()));
        }
        Ok(Self { spec, coefficients })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    /// Coefficient at signed integer frequency `k` in `(-N/2, N/2]^n`.
    pub fn at(&self, k: [i64; 2]) -> Complex64 {
        self.coefficients[self.spec.index(k)]
    }
}

pub fn spectrum(f: &GridFunction) -> SpectralFunction {
    let spec = f.spec;
    let mut coefficients = fft::forward_real(&f.samples, spec.dim(), spec.cells_per_axis());
    let v = spec.cell_volume();
    for c in coefficients.iter_mut() {
        *c *= v;
    }
    SpectralFunction { spec, coefficients }
}

/// Inverse of [`spectrum`]; the imaginary residue is discarded.
pub fn inverse_spectrum(s: &SpectralFunction) -> GridFunction {
    let spec = s.spec;
    let mut data = s.coefficients.clone();
    fft::inverse_in_place(&mut data, spec.dim(), spec.cells_per_axis());
    let inv_v = 1.0 / spec.cell_volume();
    GridFunction {
        spec,
        samples: data.iter().map(|z| z.re * inv_v).collect(),
        support: None,
    }
}

/// The bilinear form `<f, g> = integral f g`.
pub fn pairing(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_same(&f.spec, &g.spec)?;
    let dot: f64 = f.samples.iter().zip(&g.samples).map(|(a, b)| a * b).sum();
    Ok(dot * f.spec.cell_volume())
}

/// Places the atoms of `m` on the cells of `spec` (periodically), after
/// rescaling positions if the grids have different resolutions.
pub(crate) fn atom_grid(spec: &GridSpec, m: &DiscreteMeasure) -> Result<Vec<f64>> {
    if m.spec().dim() != spec.dim() {
        return Err(Error::SpecMismatch(format!(
            "measure dimension {} vs grid dimension {}",
            m.spec().dim(),
            spec.dim()
        )));
    }
    let (num, den) = {
        let a = spec.unit_cells();
        let b = m.spec().unit_cells();
        if a >= b {
            (a / b, 1)
        } else {
            (1, b / a)
        }
    };
    let half = spec.cells_per_axis() as i64 / 2;
    let mut grid = vec![0.0; spec.len()];
    for atom in m.atoms() {
        let mut cell = [0i64; 2];
        for a in 0..spec.dim() {
            let scaled = atom.position[a] * num;
            if scaled % den != 0 {
                return Err(Error::AtomOffLattice(format!("{:?}", atom.position)));
            }
            cell[a] = scaled / den;
            if cell[a].abs() >= half {
                return Err(Error::ScaleGuard(format!(
                    "atom {:?} does not fit on a torus of {} cells",
                    atom.position,
                    spec.cells_per_axis()
                )));
            }
        }
        grid[spec.index(cell)] += atom.weight;
    }
    Ok(grid)
}

/// Exact discrete transform of a measure's atoms on `spec`:
/// `sum_i w_i e^{-2 pi i k.a_i / N}` in transform order.
pub(crate) fn measure_multiplier(spec: &GridSpec, m: &DiscreteMeasure) -> Result<Vec<Complex64>> {
    let grid = atom_grid(spec, m)?;
    Ok(fft::forward_real(&grid, spec.dim(), spec.cells_per_axis()))
}

/// Applies a transform-order multiplier to real samples.
pub(crate) fn apply_multiplier(spec: &GridSpec, samples: &[f64], multiplier: &[Complex64]) -> Vec<f64> {
    let mut data = fft::forward_real(samples, spec.dim(), spec.cells_per_axis());
    for (z, m) in data.iter_mut().zip(multiplier) {
        *z *= m;
    }
    fft::inverse_in_place(&mut data, spec.dim(), spec.cells_per_axis());
    data.iter().map(|z| z.re).collect()
}

/// Circular convolution `(f * m)(x) = sum_i w_i f(x - a_i)`, evaluated
/// spectrally.
pub fn convolve(f: &GridFunction, m: &DiscreteMeasure) -> Result<GridFunction> {
    let multiplier = measure_multiplier(&f.spec, m)?;
    Ok(GridFunction {
        spec: f.spec,
        samples: apply_multiplier(&f.spec, &f.samples, &multiplier),
        support: None,
    })
}
