//! Frequency partition of a singular Radon transform into pieces `T^k`
//! smoothed at relative scale `2^k`, and empirical measurements of how the
//! pieces behave on L2, weak L1 and weak L log L.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{apply_multiplier, measure_multiplier, GridFunction, GridSpec, SpectralFunction};
use crate::measures::{dilate, least_squares, DiscreteMeasure};
use crate::operators::{EpsilonSigns, RadonOperator};

/// Smooth radial step: 1 on `[0, 1]`, 0 on `[2, inf)`.
pub fn smooth_step(t: f64) -> f64 {
    fn h(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (-1.0 / t).exp()
        }
    }
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        let a = h(2.0 - t);
        a / (a + h(t - 1.0))
    }
}

/// One term of the partition of unity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Piece {
    /// The low-frequency cutoff.
    Smooth,
    /// Band `k`, living at frequencies `2^{-k} <= |xi| <= 2^{2-k}`.
    Band(i32),
    /// Everything above the finest band.
    Remainder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegularizerFamily {
    spec: GridSpec,
    k_min: i32,
}

impl RegularizerFamily {
    pub fn new(spec: GridSpec, k_min: i32) -> Result<Self> {
        if k_min > -1 {
            return Err(Error::InvalidArgument(format!("k_min = {k_min} must be at most -1")));
        }
        if k_min < -62 || (1i64 << -k_min) * 4 > spec.unit_cells() {
            return Err(Error::ScaleGuard(format!(
                "band {k_min} is not resolved with {} cells per unit",
                spec.unit_cells()
            )));
        }
        Ok(Self { spec, k_min })
    }

    /// The finest band the grid resolves.
    pub fn finest(spec: GridSpec) -> Result<Self> {
        let u = spec.unit_cells();
        if u < 8 {
            return Err(Error::ScaleGuard(format!("{u} cells per unit resolve no band")));
        }
        Self::new(spec, -((u / 4).trailing_zeros() as i32))
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn k_min(&self) -> i32 {
        self.k_min
    }

    pub fn bands(&self) -> impl Iterator<Item = i32> {
        self.k_min..=0
    }

    pub fn pieces(&self) -> Vec<Piece> {
        let mut out = vec![Piece::Smooth];
        out.extend(self.bands().map(Piece::Band));
        out.push(Piece::Remainder);
        out
    }

    /// Radial profile of `piece` at physical frequency modulus `r`.
    pub fn profile(&self, piece: Piece, r: f64) -> f64 {
        match piece {
            Piece::Smooth => smooth_step(r),
            Piece::Band(k) => smooth_step(2f64.powi(k - 1) * r) - smooth_step(2f64.powi(k) * r),
            Piece::Remainder => 1.0 - smooth_step(2f64.powi(self.k_min - 1) * r),
        }
    }

    /// The piece as a multiplier on the grid.
    pub fn spectral(&self, piece: Piece) -> SpectralFunction {
        let coefficients = self
            .spec
            .frequency_norms()
            .into_iter()
            .map(|r| Complex64::new(self.profile(piece, r), 0.0))
            .collect();
        SpectralFunction::new(self.spec, coefficients).expect("length matches the grid")
    }
}

/// Per-scale multipliers `eps_j mu_j^` of a singular transform.
pub struct ScaleStack {
    spec: GridSpec,
    norms: Vec<f64>,
    scales: Vec<(i32, f64, Vec<Complex64>)>,
}

impl ScaleStack {
    pub fn new(spec: GridSpec, mu: &DiscreteMeasure, eps: &EpsilonSigns) -> Result<Self> {
        if !mu.is_mean_zero() {
            return Err(Error::NotMeanZero);
        }
        let mut scales = Vec::new();
        for j in eps.scales() {
            let dilated = dilate(mu, j)?;
            let e = eps.get(j);
            if e != 0.0 {
                scales.push((j, e, measure_multiplier(&spec, &dilated)?));
            }
        }
        Ok(Self { spec, norms: spec.frequency_norms(), scales })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// `sum_j eps_j mu_j^(xi) phi(2^j xi)` for the radial profile of `piece`.
    pub fn piece_multiplier(&self, fam: &RegularizerFamily, piece: Piece) -> Result<Vec<Complex64>> {
        crate::lattice::check_same(&self.spec, fam.spec())?;
        let mut out = vec![Complex64::default(); self.spec.len()];
        for (j, e, m) in &self.scales {
            let t = 2f64.powi(*j);
            for ((o, z), r) in out.iter_mut().zip(m).zip(&self.norms) {
                let w = fam.profile(piece, t * r);
                if w != 0.0 {
                    *o += z * (e * w);
                }
            }
        }
        Ok(out)
    }

    pub fn full_multiplier(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.spec.len()];
        for (_, e, m) in &self.scales {
            for (o, z) in out.iter_mut().zip(m) {
                *o += z * e;
            }
        }
        out
    }

    pub fn apply(&self, multiplier: &[Complex64], f: &GridFunction) -> Result<GridFunction> {
        crate::lattice::check_same(&self.spec, f.spec())?;
        GridFunction::new(self.spec, apply_multiplier(&self.spec, f.samples(), multiplier))
    }
}

/// `T^k f` and its companions, one piece at a time.
pub fn piece_operator(
    f: &GridFunction,
    mu: &DiscreteMeasure,
    eps: &EpsilonSigns,
    fam: &RegularizerFamily,
    piece: Piece,
) -> Result<GridFunction> {
    let stack = ScaleStack::new(*f.spec(), mu, eps)?;
    stack.apply(&stack.piece_multiplier(fam, piece)?, f)
}

/// Largest deviation between `T f` and the sum of all pieces applied to `f`.
pub fn telescoping_error(
    f: &GridFunction,
    mu: &DiscreteMeasure,
    eps: &EpsilonSigns,
    fam: &RegularizerFamily,
) -> Result<f64> {
    let stack = ScaleStack::new(*f.spec(), mu, eps)?;
    let whole = RadonOperator::new(*f.spec(), mu, eps)?.apply(f)?;
    let mut sum = GridFunction::zeros(*f.spec());
    for piece in fam.pieces() {
        sum = sum.add(&stack.apply(&stack.piece_multiplier(fam, piece)?, f)?)?;
    }
    Ok(whole.samples().iter().zip(sum.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub const POWER_TOL: f64 = 1e-3;
pub const POWER_STEPS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub norm: f64,
    pub steps: usize,
    /// Largest modulus of the multiplier, the exact L2 operator norm.
    pub exact: f64,
}

/// L2 operator norm of a multiplier by power iteration on `T T*`, started
/// from a unit impulse with its mean removed.
pub fn operator_norm(multiplier: &[Complex64]) -> Result<NormEstimate> {
    let weights: Vec<f64> = multiplier.iter().map(|z| z.norm_sqr()).collect();
    let exact = weights.iter().cloned().fold(0.0, f64::max).sqrt();
    let mut v = vec![1.0; weights.len()];
    if let Some(dc) = v.first_mut() {
        *dc = 0.0;
    }
    let mut last = f64::NAN;
    for step in 1..=POWER_STEPS {
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let w: Vec<f64> = v.iter().zip(&weights).map(|(x, d)| x * d).collect();
        let vw: f64 = v.iter().zip(&w).map(|(x, y)| x * y).sum();
        if vw <= 0.0 {
            return Ok(NormEstimate { norm: 0.0, steps: step, exact });
        }
        let estimate = (vw / vv).sqrt();
        if (estimate - last).abs() <= POWER_TOL * estimate {
            return Ok(NormEstimate { norm: estimate, steps: step, exact });
        }
        last = estimate;
        let scale = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / scale).collect();
    }
    Err(Error::NoConvergence(POWER_STEPS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub k: i32,
    pub value: f64,
    pub fit_residual: f64,
}

/// A measured curve over `k` with a least-squares line through it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub rows: Vec<CurveRow>,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,value,fit_residual\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", r.k, r.value, r.fit_residual));
        }
        out
    }
}

/// L2 norms of `T^k` over `ks`, with the slope of `log2 norm` against `k`.
pub fn l2_decay_curve(
    mu: &DiscreteMeasure,
    eps: &EpsilonSigns,
    fam: &RegularizerFamily,
    ks: &[i32],
) -> Result<(Curve, Vec<NormEstimate>)> {
    let stack = ScaleStack::new(*fam.spec(), mu, eps)?;
    let mut estimates = Vec::with_capacity(ks.len());
    for &k in ks {
        check_band(fam, k)?;
        estimates.push(operator_norm(&stack.piece_multiplier(fam, Piece::Band(k))?)?);
    }
    let values: Vec<f64> = estimates.iter().map(|e| e.norm).collect();
    let positive = values.iter().all(|&v| v > 0.0);
    let (slope, intercept, residual, fitted) = if positive && ks.len() >= 2 {
        let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        let ys: Vec<f64> = values.iter().map(|v| v.log2()).collect();
        let (b, a, rms) = least_squares(&xs, &ys);
        let fitted: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (a + b * x)).collect();
        (b, a, rms, fitted)
    } else {
        (0.0, 0.0, 0.0, vec![0.0; ks.len()])
    };
    let rows = ks
        .iter()
        .zip(&values)
        .zip(&fitted)
        .map(|((&k, &value), &fit_residual)| CurveRow { k, value, fit_residual })
        .collect();
    Ok((Curve { rows, slope, intercept, residual }, estimates))
}

fn check_band(fam: &RegularizerFamily, k: i32) -> Result<()> {
    if k < fam.k_min() || k > 0 {
        return Err(Error::InvalidArgument(format!("band {k} outside {}..=0", fam.k_min())));
    }
    Ok(())
}

/// `|{|g| > lambda}|` in physical volume.
pub fn level_set_measure(g: &GridFunction, lambda: f64) -> f64 {
    g.samples().iter().filter(|v| v.abs() > lambda).count() as f64 * g.spec().cell_volume()
}

/// Dyadic levels `top 2^{-i / density}` reaching six decades below `top`.
pub fn lambda_grid(top: f64, density: usize) -> Vec<f64> {
    let octaves = (6.0 * 10f64.log2()).ceil() as usize;
    (0..=octaves * density).map(|i| top * 2f64.powf(-(i as f64) / density as f64)).collect()
}

/// `sup_lambda lambda |{|g| > lambda}|` over [`lambda_grid`].
pub fn weak_quasinorm(g: &GridFunction, density: usize) -> f64 {
    let top = g.max_abs();
    if top == 0.0 {
        return 0.0;
    }
    lambda_grid(top, density)
        .into_iter()
        .map(|l| l * level_set_measure(g, l))
        .fold(0.0, f64::max)
}

/// Normalised L1 test functions: single cells and mean-zero stacks at a
/// few cube sizes, all near the centre of the domain.
pub fn weak_l1_battery(spec: &GridSpec) -> Vec<GridFunction> {
    let dim = spec.dim();
    let c = spec.cells_per_axis() as i64 / 2;
    let centre = if dim == 2 { [c, c] } else { [c, 0] };
    let mut out = Vec::new();
    let mut cell = GridFunction::zeros(*spec);
    cell.samples_mut()[spec.index(centre)] = 1.0;
    out.push(cell);
    let mut side = 2i64;
    while side <= spec.unit_cells() {
        // halves of opposite sign on a cube of the given side
        let mut f = GridFunction::zeros(*spec);
        for i in 0..spec.len() {
            let x = spec.cell(i);
            let rel: Vec<i64> = (0..dim).map(|a| x[a] - centre[a]).collect();
            if rel.iter().all(|&r| (0..side).contains(&r)) {
                f.samples_mut()[i] = if rel[0] < side / 2 { 1.0 } else { -1.0 };
            }
        }
        out.push(f);
        // a stack of such cubes at every size up to `side`
        let mut stack = GridFunction::zeros(*spec);
        let mut s = 2;
        while s <= side {
            for i in 0..spec.len() {
                let x = spec.cell(i);
                let rel: Vec<i64> = (0..dim).map(|a| x[a] - centre[a] + s).collect();
                if rel.iter().all(|&r| (0..s).contains(&r)) {
                    stack.samples_mut()[i] += if rel[0] < s / 2 { 1.0 } else { -1.0 } / s as f64;
                }
            }
            s *= 2;
        }
        out.push(stack);
        side *= 4;
    }
    out.into_iter()
        .map(|f| {
            let n = f.lp_norm(1.0);
            f.scaled(1.0 / n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakCurve {
    pub curve: Curve,
    /// `a + b (1 - k)` fitted to the values.
    pub envelope: (f64, f64),
    pub slack: f64,
    pub within_envelope: bool,
}

pub const ENVELOPE_SLACK: f64 = 0.2;

/// Levels per octave of the default lambda grid.
pub const LAMBDA_DENSITY: usize = 8;

/// Per band, the largest `lambda |{|T^k f| > lambda}| / ||f||_1` over the
/// battery and the lambda grid, with an affine envelope in `1 - k`.
pub fn weak_l1_growth_curve(
    mu: &DiscreteMeasure,
    eps: &EpsilonSigns,
    fam: &RegularizerFamily,
    ks: &[i32],
    battery: &[GridFunction],
    density: usize,
) -> Result<WeakCurve> {
    let stack = ScaleStack::new(*fam.spec(), mu, eps)?;
    let mut values = Vec::with_capacity(ks.len());
    for &k in ks {
        check_band(fam, k)?;
        let m = stack.piece_multiplier(fam, Piece::Band(k))?;
        let per_f: Result<Vec<f64>> = battery
            .par_iter()
            .map(|f| {
                let mass = f.lp_norm(1.0);
                if mass == 0.0 {
                    return Ok(0.0);
                }
                Ok(weak_quasinorm(&stack.apply(&m, f)?, density) / mass)
            })
            .collect();
        values.push(per_f?.into_iter().fold(0.0, f64::max));
    }
    let xs: Vec<f64> = ks.iter().map(|&k| (1 - k) as f64).collect();
    let (b, a, rms) = if ks.len() >= 2 { least_squares(&xs, &values) } else { (0.0, values.first().copied().unwrap_or(0.0), 0.0) };
    let fit = |x: f64| a + b * x;
    let within = xs.iter().zip(&values).all(|(&x, &v)| {
        let e = fit(x);
        (e > 0.0 && v <= (1.0 + ENVELOPE_SLACK) * e) || v == 0.0
    });
    let rows = ks
        .iter()
        .zip(&xs)
        .zip(&values)
        .map(|((&k, &x), &value)| CurveRow { k, value, fit_residual: value - fit(x) })
        .collect();
    Ok(WeakCurve {
        curve: Curve { rows, slope: b, intercept: a, residual: rms },
        envelope: (a, b),
        slack: ENVELOPE_SLACK,
        within_envelope: within,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlogLRow {
    pub lambda: f64,
    pub level_set: f64,
    pub orlicz: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlogLTable {
    pub r: f64,
    pub rows: Vec<LlogLRow>,
    pub max_ratio: f64,
}

impl LlogLTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,level_set,orlicz,ratio\n");
        for r in &self.rows {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", r.lambda, r.level_set, r.orlicz, r.ratio));
        }
        out
    }
}

/// `|{|T f| > lambda}|` against `int (|f|/lambda) log(e + |f|/lambda)^r`.
pub fn weak_llogl_check(t: &RadonOperator, f: &GridFunction, lambdas: &[f64], r: f64) -> Result<LlogLTable> {
    if r.is_nan() || r <= 4.0 {
        return Err(Error::InvalidArgument(format!("the log power {r} must exceed 4")));
    }
    let g = t.apply(f)?;
    let vol = f.spec().cell_volume();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::InvalidArgument(format!("level {lambda} must be positive")));
        }
        let level_set = level_set_measure(&g, lambda);
        let orlicz: f64 = f
            .samples()
            .iter()
            .map(|v| {
                let x = v.abs() / lambda;
                x * (std::f64::consts::E + x).ln().powf(r)
            })
            .sum::<f64>()
            * vol;
        let ratio = if level_set == 0.0 {
            0.0
        } else if orlicz == 0.0 {
            f64::INFINITY
        } else {
            level_set / orlicz
        };
        rows.push(LlogLRow { lambda, level_set, orlicz, ratio });
    }
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(LlogLTable { r, rows, max_ratio })
}

/// Dyadic levels `2^i` covering `[lo, hi]`.
pub fn dyadic_levels(lo: f64, hi: f64) -> Vec<f64> {
    let a = lo.log2().floor() as i32;
    let b = hi.log2().ceil() as i32;
    (a..=b).map(|i| 2f64.powi(i)).collect()
}
