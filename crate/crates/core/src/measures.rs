//! Atomic measures on the lattice: the circle and bump models, mean-zero
//! modulation, dyadic dilation and the Fourier decay fit.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{measure_multiplier, GridSpec};

/// Tolerance on the total mass of a measure flagged mean-zero.
pub const MEAN_ZERO_TOL: f64 = 1e-12;

/// Smallest number of cells a dilated support radius may span.
pub const RESOLUTION_FLOOR_CELLS: f64 = 8.0;

/// Distance (cells) an atom may sit outside the declared support radius,
/// allowing for snapping to the nearest lattice point.
pub const ATOM_SLACK_CELLS: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Lattice coordinates in cells of the owning spec.
    pub position: [i64; 2],
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    spec: GridSpec,
    atoms: Vec<Atom>,
    support_radius: f64,
    mean_zero: bool,
}

impl DiscreteMeasure {
    pub fn from_atoms(spec: GridSpec, atoms: Vec<Atom>, support_radius: f64) -> Result<Self> {
        if !(support_radius > 0.0 && support_radius.is_finite()) {
            return Err(Error::InvalidMeasure(format!("support radius {support_radius}")));
        }
        let u = spec.unit_cells() as f64;
        for a in &atoms {
            if !a.weight.is_finite() {
                return Err(Error::InvalidMeasure("non-finite weight".into()));
            }
            if spec.dim() == 1 && a.position[1] != 0 {
                return Err(Error::InvalidMeasure("1D atom with a second coordinate".into()));
            }
            let r = norm(a.position) / u;
            if r > support_radius * (1.0 + 1e-12) + ATOM_SLACK_CELLS / u {
                return Err(Error::InvalidMeasure(format!(
                    "atom {:?} at distance {r} outside radius {support_radius}",
                    a.position
                )));
            }
        }
        Ok(Self { spec, atoms, support_radius, mean_zero: false })
    }

    /// The Dirac mass at the origin.
    pub fn unit_atom(spec: GridSpec) -> Self {
        Self {
            spec,
            atoms: vec![Atom { position: [0, 0], weight: 1.0 }],
            support_radius: 1.0,
            mean_zero: false,
        }
    }

    /// The zero measure (flagged mean-zero).
    pub fn zero(spec: GridSpec) -> Self {
        Self { spec, atoms: Vec::new(), support_radius: 1.0, mean_zero: true }
    }

    /// Flags the measure mean-zero after checking its total mass.
    pub fn into_mean_zero(mut self) -> Result<Self> {
        let mass = self.mass();
        if mass.abs() > MEAN_ZERO_TOL {
            return Err(Error::InvalidMeasure(format!("total mass {mass:e} is not zero")));
        }
        self.mean_zero = true;
        Ok(self)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// Declared support radius in physical units.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn is_mean_zero(&self) -> bool {
        self.mean_zero
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight.abs()).sum()
    }

    /// All weights nonnegative and at least one positive.
    pub fn is_positive(&self) -> bool {
        self.atoms.iter().all(|a| a.weight >= 0.0) && self.atoms.iter().any(|a| a.weight > 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.weight == 0.0)
    }

    /// Atom positions in physical units.
    pub fn physical_positions(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        let u = self.spec.unit_cells() as f64;
        self.atoms
            .iter()
            .map(move |a| ([a.position[0] as f64 / u, a.position[1] as f64 / u], a.weight))
    }

    /// The reflected measure `x -> -x`.
    pub fn reflect(&self) -> Self {
        let mut out = self.clone();
        for a in &mut out.atoms {
            a.position = [-a.position[0], -a.position[1]];
        }
        out
    }

    pub fn scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        for a in &mut out.atoms {
            a.weight *= t;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MeasureDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<MeasureDocument>(text)?.try_into()
    }
}

fn norm(p: [i64; 2]) -> f64 {
    ((p[0] * p[0] + p[1] * p[1]) as f64).sqrt()
}

/// Serialized form of a [`DiscreteMeasure`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureDocument {
    pub dimension: usize,
    pub unit_cells: i64,
    pub grid: GridSpec,
    pub support_radius: f64,
    pub mean_zero: bool,
    pub atoms: Vec<(Vec<i64>, f64)>,
}

impl From<&DiscreteMeasure> for MeasureDocument {
    fn from(m: &DiscreteMeasure) -> Self {
        let n = m.spec.dim();
        Self {
            dimension: n,
            unit_cells: m.spec.unit_cells(),
            grid: m.spec,
            support_radius: m.support_radius,
            mean_zero: m.mean_zero,
            atoms: m.atoms.iter().map(|a| (a.position[..n].to_vec(), a.weight)).collect(),
        }
    }
}

impl TryFrom<MeasureDocument> for DiscreteMeasure {
    type Error = Error;

    fn try_from(doc: MeasureDocument) -> Result<Self> {
        let spec = GridSpec::new(doc.grid.dim(), doc.grid.log_cells(), doc.grid.log_unit())?;
        if doc.dimension != spec.dim() || doc.unit_cells != spec.unit_cells() {
            return Err(Error::InvalidMeasure("header disagrees with grid".into()));
        }
        let mut atoms = Vec::with_capacity(doc.atoms.len());
        for (coords, weight) in doc.atoms {
            if coords.len() != spec.dim() {
                return Err(Error::InvalidMeasure("atom coordinate count".into()));
            }
            let mut position = [0i64; 2];
            position[..coords.len()].copy_from_slice(&coords);
            atoms.push(Atom { position, weight });
        }
        let m = Self::from_atoms(spec, atoms, doc.support_radius)?;
        if doc.mean_zero {
            m.into_mean_zero()
        } else {
            Ok(m)
        }
    }
}

fn merge_atoms(atoms: impl IntoIterator<Item = Atom>) -> Vec<Atom> {
    let mut merged: BTreeMap<[i64; 2], f64> = BTreeMap::new();
    for a in atoms {
        *merged.entry(a.position).or_insert(0.0) += a.weight;
    }
    merged
        .into_iter()
        .map(|(position, weight)| Atom { position, weight })
        .collect()
}

/// Nearest lattice point to `target` (cells).
fn snap_nearest(target: [f64; 2]) -> [i64; 2] {
    let base = [target[0].floor() as i64, target[1].floor() as i64];
        let mut best: Option<([i64; 2], f64)> = None;
    for dx in -1..=2 {
        for dy in -1..=2 {
            let p = [base[0] + dx, base[1] + dy];
            let n2 = (p[0] * p[0] + p[1] * p[1]) as f64;
            let d2 = (p[0] as f64 - target[0]).powi(2) + (p[1] as f64 - target[1]).powi(2);
            let better = match best {
                None => true,
                Some((q, bd)) => {
                    if (d2 - bd).abs() > 1e-12 {
                        d2 < bd
                    } else {
                        let cp = p[0] as f64 * target[1] - p[1] as f64 * target[0];
                        let cq = q[0] as f64 * target[1] - q[1] as f64 * target[0];
                        if cp != cq {
                            cp > cq
                        } else {
                            n2 < (q[0] * q[0] + q[1] * q[1]) as f64
                        }
                    }
                }
            };
            if better {
                best = Some((p, d2));
            }
        }
    }
    best.map(|b| b.0).unwrap_or([0, 0])
}

/// Arc-length measure on the circle of the given radius, sampled at `points`
/// equispaced angles snapped to the lattice. Positive with mass one.
pub fn circle_measure(spec: GridSpec, radius: f64, points: usize) -> Result<DiscreteMeasure> {
    if spec.dim() != 2 {
        return Err(Error::InvalidArgument("circle measure needs n = 2".into()));
    }
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} outside (0, 1]")));
    }
    let u = spec.unit_cells();
    if (points as i64) < 16 * u || points % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{points} points; need a multiple of 4 that is at least 16u = {}",
            16 * u
        )));
    }
    let r_cells = radius * u as f64;
    let w = 1.0 / points as f64;
    let quadrant: Vec<[i64; 2]> = (0..points / 4)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / points as f64;
            snap_nearest([r_cells * theta.cos(), r_cells * theta.sin()])
        })
        .collect();
    let mut atoms = Vec::with_capacity(points);
    for turn in 0..4 {
        for &p in &quadrant {
            let mut q = p;
            for _ in 0..turn {
                q = [-q[1], q[0]];
            }
            atoms.push(Atom { position: q, weight: w });
        }
    }
    DiscreteMeasure::from_atoms(spec, merge_atoms(atoms), radius)
}

/// The standard bump `exp(-1/(1-x^2))` on `(-1, 1)`.
pub fn standard_bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// One-dimensional measure with density `profile` on `[-1, 1]`, normalised
/// to mass one.
pub fn interval_bump_measure(spec: GridSpec, profile: impl Fn(f64) -> f64) -> Result<DiscreteMeasure> {
    if spec.dim() != 1 {
        return Err(Error::InvalidArgument("interval bump needs n = 1".into()));
    }
    let u = spec.unit_cells();
    let mut atoms = Vec::new();
    for i in -u..=u {
        let w = profile(i as f64 / u as f64);
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidMeasure(format!("profile value {w} at {i}")));
        }
        if w > 0.0 {
            atoms.push(Atom { position: [i, 0], weight: w });
        }
    }
    let mass: f64 = atoms.iter().map(|a| a.weight).sum();
    if mass <= 0.0 {
        return Err(Error::InvalidMeasure("profile has zero mass".into()));
    }
    for a in &mut atoms {
        a.weight /= mass;
    }
    DiscreteMeasure::from_atoms(spec, atoms, 1.0)
}

/// `d mu = (rho - c) d sigma` with `c` chosen so that `mu` has mass zero.
pub fn modulate_mean_zero(sigma: &DiscreteMeasure, rho: impl Fn([f64; 2]) -> f64) -> Result<DiscreteMeasure> {
    let mass = sigma.mass();
    if mass == 0.0 {
        return Err(Error::InvalidMeasure("sigma has zero mass".into()));
    }
    let values: Vec<f64> = sigma.physical_positions().map(|(x, _)| rho(x)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("density is not finite on the atoms".into()));
    }
    let moment: f64 = values.iter().zip(&sigma.atoms).map(|(r, a)| r * a.weight).sum();
    let c = moment / mass;
    let mut out = sigma.clone();
    for (a, r) in out.atoms.iter_mut().zip(&values) {
        a.weight *= r - c;
    }
    out.into_mean_zero()
}

/// Densities selectable by name from configuration files.
pub fn named_density(name: &str) -> Result<fn([f64; 2]) -> f64> {
    match name {
        "x1" => Ok(|x| x[0]),
        "x1sq" => Ok(|x| x[0] * x[0]),
        "cos2theta" => Ok(|x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 == 0.0 {
                0.0
            } else {
                (x[0] * x[0] - x[1] * x[1]) / r2
            }
        }),
        other => Err(Error::Config(format!("unknown density '{other}'"))),
    }
}

/// The dilate `mu_j` defined by `integral f d mu_j = integral f(2^j x) d mu`.
pub fn dilate(m: &DiscreteMeasure, j: i32) -> Result<DiscreteMeasure> {
    let spec = m.spec;
    let factor = (j as f64).exp2();
    let radius = factor * m.support_radius;
    if radius * spec.unit_cells() as f64 + 1e-9 < RESOLUTION_FLOOR_CELLS {
        return Err(Error::ScaleGuard(format!(
            "scale 2^{j} leaves {:.3} cells of support (< {RESOLUTION_FLOOR_CELLS})",
            radius * spec.unit_cells() as f64
        )));
    }
    if radius > spec.side_length() / 8.0 {
        return Err(Error::ScaleGuard(format!(
            "scale 2^{j} support {radius} exceeds padding limit {}",
            spec.side_length() / 8.0
        )));
    }
    let atoms = if j >= 0 {
        let k = 1i64 << j;
        m.atoms
            .iter()
            .map(|a| Atom { position: [a.position[0] * k, a.position[1] * k], weight: a.weight })
            .collect()
    } else {
        merge_atoms(m.atoms.iter().map(|a| Atom {
            position: [
                (a.position[0] as f64 * factor).round() as i64,
                (a.position[1] as f64 * factor).round() as i64,
            ],
            weight: a.weight,
        }))
    };
    Ok(DiscreteMeasure { spec, atoms, support_radius: radius, mean_zero: m.mean_zero })
}

/// Exact `sum_i w_i e^{-2 pi i xi . x_i}` at physical frequencies.
pub fn measure_spectrum(m: &DiscreteMeasure, frequencies: &[[f64; 2]]) -> Vec<Complex64> {
    let positions: Vec<([f64; 2], f64)> = m.physical_positions().collect();
    frequencies
        .iter()
        .map(|xi| {
            positions
                .iter()
                .map(|(x, w)| Complex64::from_polar(*w, -2.0 * PI * (xi[0] * x[0] + xi[1] * x[1])))
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub alpha_hat: f64,
    /// Least-squares slope of log2(max modulus) against log2|xi|.
    pub raw_slope: f64,
    pub intercept: f64,
    pub xi_min: f64,
    pub xi_max: f64,
    /// `(lower edge, max modulus)` per octave annulus.
    pub annuli: Vec<(f64, f64)>,
    /// Root mean square of the log2 residuals.
    pub residual: f64,
}

/// Lowest frequency entering the decay fit.
pub const DECAY_XI_MIN: f64 = 0.5;

/// Fits `max |m^(xi)| ~ |xi|^{-alpha}` over the octaves `[2^a, 2^{a+1})`
/// covering `[1/2, u/4]`, using the exact spectrum on the measure's grid.
pub fn estimate_decay(m: &DiscreteMeasure) -> Result<DecayFit> {
    let spec = m.spec;
    let xi_max = spec.unit_cells() as f64 / 4.0;
    let count = (xi_max / DECAY_XI_MIN).log2().floor().max(0.0) as usize;
    if count < 4 {
        return Err(Error::TooFewAnnuli(count));
    }
    let multiplier = measure_multiplier(&spec, m)?;
    let mut maxima = vec![0.0f64; count];
    for (z, r) in multiplier.iter().zip(spec.frequency_norms()) {
        if r < DECAY_XI_MIN || r >= xi_max {
            continue;
        }
        let a = (r / DECAY_XI_MIN).log2().floor() as usize;
        if a < count {
            maxima[a] = maxima[a].max(z.norm());
        }
    }
    if let Some(a) = maxima.iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateSpectrum(format!("annulus {a} has zero spectrum")));
    }
    let xs: Vec<f64> = (0..count).map(|a| DECAY_XI_MIN.log2() + a as f64 + 0.5).collect();
    let ys: Vec<f64> = maxima.iter().map(|v| v.log2()).collect();
    let (slope, intercept, residual) = least_squares(&xs, &ys);
    Ok(DecayFit {
        alpha_hat: (-slope).max(0.0),
        raw_slope: slope,
        intercept,
        xi_min: DECAY_XI_MIN,
        xi_max,
        annuli: (0..count)
            .map(|a| (DECAY_XI_MIN * (a as f64).exp2(), maxima[a]))
            .collect(),
        residual,
    })
}

/// Ordinary least squares `y = slope x + intercept`; returns the RMS residual
/// as the third component.
pub(crate) fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    (slope, intercept, (rss / n).sqrt())
}
