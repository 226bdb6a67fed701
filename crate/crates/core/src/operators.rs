//! Singular and maximal Radon transforms built from dyadic dilates of a
//! measure, ball averages, the Hardy-Littlewood type maximal function, and a
//! lower-bound probe for L^p improving norms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decomp::DyadicCube;
use crate::error::{Error, Result};
use crate::fft;
use crate::lattice::{apply_multiplier, atom_grid, GridFunction, GridSpec};
use crate::measures::{dilate, DiscreteMeasure};

/// Coefficients `eps_j` for `j` in `[n1, n2]`, zero elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSigns {
    #[serde(rename = "N1")]
    n1: i32,
    #[serde(rename = "N2")]
    n2: i32,
    values: Vec<f64>,
}

impl EpsilonSigns {
    pub fn new(n1: i32, n2: i32, values: Vec<f64>) -> Result<Self> {
        if n1 > n2 {
            return Err(Error::InvalidArgument(format!("N1 = {n1} exceeds N2 = {n2}")));
        }
        if values.len() != (n2 - n1 + 1) as usize {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for scales {n1}..={n2}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::InvalidArgument(format!("coefficient {v} exceeds 1 in modulus")));
        }
        Ok(Self { n1, n2, values })
    }

    pub fn constant(n1: i32, n2: i32, value: f64) -> Result<Self> {
        Self::new(n1, n2, vec![value; (n2 - n1 + 1).max(0) as usize])
    }

    /// `+1, -1, +1, ...` starting at `n1`.
    pub fn alternating(n1: i32, n2: i32) -> Result<Self> {
        let len = (n2 - n1 + 1).max(0) as usize;
        Self::new(n1, n2, (0..len).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect())
    }

    /// Uniform on `[-1, 1]` from a ChaCha8 stream.
    pub fn random(n1: i32, n2: i32, seed: u64) -> Result<Self> {
        let len = (n2 - n1 + 1).max(0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(n1, n2, (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect())
    }

    pub fn n1(&self) -> i32 {
        self.n1
    }

    pub fn n2(&self) -> i32 {
        self.n2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, j: i32) -> f64 {
        if j < self.n1 || j > self.n2 {
            0.0
        } else {
            self.values[(j - self.n1) as usize]
        }
    }

    pub fn scales(&self) -> RangeInclusive<i32> {
        self.n1..=self.n2
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn negated(&self) -> Self {
        Self { n1: self.n1, n2: self.n2, values: self.values.iter().map(|v| -v).collect() }
    }

    /// The coefficients with scales above `top` removed, or `None` if nothing
    /// is left.
    pub fn truncated_above(&self, top: i32) -> Option<Self> {
        if top < self.n1 {
            return None;
        }
        let n2 = top.min(self.n2);
        Some(Self { n1: self.n1, n2, values: self.values[..(n2 - self.n1 + 1) as usize].to_vec() })
    }
}

/// Exponents `1 < p < q < infinity` with their conjugates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentPair {
    pub p: f64,
    pub q: f64,
}

impl ExponentPair {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(p > 1.0 && p < q && q.is_finite()) {
            return Err(Error::InvalidArgument(format!("need 1 < p < q < inf, got p = {p}, q = {q}")));
        }
        Ok(Self { p, q })
    }

    pub fn p_prime(&self) -> f64 {
        conjugate(self.p)
    }

    pub fn q_prime(&self) -> f64 {
        conjugate(self.q)
    }
}

pub fn conjugate(p: f64) -> f64 {
    p / (p - 1.0)
}

/// Interpolated exponents: `1/p_t = (1-t)/p + t/2` and likewise for `q`.
/// Returns `(p_t, q_t, q_t')`.
pub fn theta_exponents(p: f64, q: f64, theta: f64) -> Result<(f64, f64, f64)> {
    if !(0.0..=1.0).contains(&theta) || !(p > 1.0 && p < q) {
        return Err(Error::InvalidArgument(format!("theta = {theta}, p = {p}, q = {q}")));
    }
    let pt = 1.0 / ((1.0 - theta) / p + theta / 2.0);
    let qt = 1.0 / ((1.0 - theta) / q + theta / 2.0);
    Ok((pt, qt, conjugate(qt)))
}

/// Ball p-average `(|B|^-1 sum_{|y| <= r} |f(x+y)|^p)^(1/p)` around the cell
/// `center`, with `r` in physical units.
pub fn local_average(f: &GridFunction, center: [i64; 2], r: f64, p: f64) -> Result<f64> {
    if !(r > 0.0) || !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("r = {r}, p = {p}")));
    }
    let spec = f.spec();
    let rc = r * spec.unit_cells() as f64;
    let reach = rc.floor() as i64;
    let other = if spec.dim() == 2 { reach } else { 0 };
    let (mut sum, mut count) = (0.0, 0usize);
    for dy0 in -reach..=reach {
        for dy1 in -other..=other {
            if ((dy0 * dy0 + dy1 * dy1) as f64) <= rc * rc {
                let v = f.samples()[spec.index([center[0] + dy0, center[1] + dy1])];
                sum += v.abs().powf(p);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("ball contains no lattice point".into()));
    }
    Ok((sum / count as f64).powf(1.0 / p))
}

thread_local! {
    static BALLS: RefCell<HashMap<(GridSpec, i32), Arc<Vec<f64>>>> = RefCell::new(HashMap::new());
}

/// Radii of the maximal function, as `log2` of the radius in cells: the ball
/// of radius `2^i / u` for `i >= -1` while `2^i / u <= L / 4`.
pub fn maximal_radii(spec: &GridSpec) -> RangeInclusive<i32> {
    -1..=(spec.log_cells() as i32 - 2)
}

/// Real spectrum of the normalised ball of radius `2^log_radius` cells.
fn ball_spectrum(spec: &GridSpec, log_radius: i32) -> Arc<Vec<f64>> {
    if let Some(hit) = BALLS.with(|b| b.borrow().get(&(*spec, log_radius)).cloned()) {
        return hit;
    }
    let rc = (log_radius as f64).exp2();
    let reach = rc.floor() as i64;
    let other = if spec.dim() == 2 { reach } else { 0 };
    let mut grid = vec![0.0; spec.len()];
    let mut cells = Vec::new();
    for y0 in -reach..=reach {
        for y1 in -other..=other {
            if ((y0 * y0 + y1 * y1) as f64) <= rc * rc {
                cells.push(spec.index([y0, y1]));
            }
        }
    }
    let w = 1.0 / cells.len() as f64;
    for i in cells {
        grid[i] += w;
    }
    let spectrum = Arc::new(
        fft::forward_real(&grid, spec.dim(), spec.cells_per_axis())
            .into_iter()
            .map(|z| z.re)
            .collect::<Vec<f64>>(),
    );
    BALLS.with(|b| b.borrow_mut().insert((*spec, log_radius), spectrum.clone()));
    spectrum
}

/// `M_p f(x) = sup_r A_p^r f(x)` over the dyadic radii of [`maximal_radii`].
pub fn maximal_fn(f: &GridFunction, p: f64) -> Result<GridFunction> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p}")));
    }
    let spec = *f.spec();
    let powered: Vec<f64> = f.samples().iter().map(|v| v.abs().powf(p)).collect();
    let side = spec.cells_per_axis();
    let base = fft::forward_real(&powered, spec.dim(), side);
    let mut best = powered.clone();
    // radius 2^-1 cells is the centre cell alone, which `powered` already holds
    for i in maximal_radii(&spec).skip(1) {
        let kernel = ball_spectrum(&spec, i);
        let mut data: Vec<Complex64> = base.iter().zip(kernel.iter()).map(|(z, k)| z * k).collect();
        fft::inverse_in_place(&mut data, spec.dim(), side);
        for (b, z) in best.iter_mut().zip(&data) {
            *b = b.max(z.re);
        }
    }
    let samples = best.into_iter().map(|v| v.max(0.0).powf(1.0 / p)).collect();
    GridFunction::new(spec, samples)
}

/// Precomputed Fourier multiplier of `sum_j eps_j mu_j *` on one grid.
#[derive(Clone, Debug)]
pub struct RadonOperator {
    spec: GridSpec,
    multiplier: Vec<Complex64>,
}

impl RadonOperator {
    pub fn new(spec: GridSpec, mu: &DiscreteMeasure, eps: &EpsilonSigns) -> Result<Self> {
        if !mu.is_mean_zero() {
            return Err(Error::NotMeanZero);
        }
        let mut grid = vec![0.0; spec.len()];
        for j in eps.scales() {
            let dilated = dilate(mu, j)?;
            let e = eps.get(j);
            if e == 0.0 {
                continue;
            }
            for (g, a) in grid.iter_mut().zip(atom_grid(&spec, &dilated)?) {
                *g += e * a;
            }
        }
        Ok(Self { spec, multiplier: fft::forward_real(&grid, spec.dim(), spec.cells_per_axis()) })
    }

    pub fn zero(spec: GridSpec) -> Self {
        Self { spec, multiplier: vec![Complex64::default(); spec.len()] }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn multiplier(&self) -> &[Complex64] {
        &self.multiplier
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        crate::lattice::check_same(&self.spec, f.spec())?;
        GridFunction::new(self.spec, apply_multiplier(&self.spec, f.samples(), &self.multiplier))
    }

    /// The adjoint, i.e. the same sum built from the reflected measure.
    pub fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction> {
        crate::lattice::check_same(&self.spec, f.spec())?;
        let conj: Vec<Complex64> = self.multiplier.iter().map(|z| z.conj()).collect();
        GridFunction::new(self.spec, apply_multiplier(&self.spec, f.samples(), &conj))
    }
}

/// `T f = sum_j eps_j mu_j * f`.
pub fn radon_t(f: &GridFunction, mu: &DiscreteMeasure, eps: &EpsilonSigns) -> Result<GridFunction> {
    RadonOperator::new(*f.spec(), mu, eps)?.apply(f)
}

/// Per-scale multipliers of `sigma_j *` for the maximal transform.
#[derive(Clone, Debug)]
pub struct MaximalOperator {
    spec: GridSpec,
    kernels: Vec<Vec<Complex64>>,
}

impl MaximalOperator {
    pub fn new(spec: GridSpec, sigma: &DiscreteMeasure, scales: RangeInclusive<i32>) -> Result<Self> {
        if !sigma.is_positive() {
            return Err(Error::NotPositive);
        }
        let scales: Vec<i32> = scales.collect();
        let kernels = scales
            .par_iter()
            .map(|&j| {
                let d = dilate(sigma, j)?;
                Ok(fft::forward_real(&atom_grid(&spec, &d)?, spec.dim(), spec.cells_per_axis()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, kernels })
    }

    pub fn scale_count(&self) -> usize {
        self.kernels.len()
    }

    /// `sup_j sigma_j * |f|`; zero when there are no scales.
    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        crate::lattice::check_same(&self.spec, f.spec())?;
        let spec = self.spec;
        let side = spec.cells_per_axis();
        let abs: Vec<f64> = f.samples().iter().map(|v| v.abs()).collect();
        let base = fft::forward_real(&abs, spec.dim(), side);
        let per_scale: Vec<Vec<f64>> = self
            .kernels
            .par_iter()
            .map(|k| {
                let mut data: Vec<Complex64> = base.iter().zip(k).map(|(a, b)| a * b).collect();
                fft::inverse_in_place(&mut data, spec.dim(), side);
                data.into_iter().map(|z| z.re.max(0.0)).collect()
            })
            .collect();
        let mut out = vec![0.0f64; spec.len()];
        for s in &per_scale {
            for (o, v) in out.iter_mut().zip(s) {
                *o = o.max(*v);
            }
        }
        GridFunction::new(spec, out)
    }
}

/// `T* f = sup_j sigma_j * |f|` over `scales`.
pub fn maximal_t_star(f: &GridFunction, sigma: &DiscreteMeasure, scales: RangeInclusive<i32>) -> Result<GridFunction> {
    MaximalOperator::new(*f.spec(), sigma, scales)?.apply(f)
}

/// `T_Q f = sum_{2^j <= l(Q)} eps_j mu_j * (1_Q f)`.
pub fn truncated_t_q(f: &GridFunction, q: &DyadicCube, mu: &DiscreteMeasure, eps: &EpsilonSigns) -> Result<GridFunction> {
    crate::lattice::check_same(f.spec(), q.spec())?;
    let local = f.restricted_to(&q.cell_box())?;
    match eps.truncated_above(q.level()) {
        Some(e) => radon_t(&local, mu, &e),
        None => {
            if !mu.is_mean_zero() {
                return Err(Error::NotMeanZero);
            }
            Ok(GridFunction::zeros(*f.spec()))
        }
    }
}

/// The maximal transform restricted to scales `2^j <= l(Q0)`.
pub fn high_t_star(f: &GridFunction, sigma: &DiscreteMeasure, q0: &DyadicCube, scales: RangeInclusive<i32>) -> Result<GridFunction> {
    let top = (*scales.end()).min(q0.level());
    maximal_t_star(f, sigma, *scales.start()..=top)
}

/// How norms are normalised when probing improving estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormConvention {
    /// `(integral |f|^p)^(1/p)` with the cell volume.
    #[default]
    Lebesgue,
    /// `(sum |f|^p)^(1/p)` over cells.
    Counting,
}

fn norm_with(samples: &[f64], p: f64, volume: f64, convention: NormConvention) -> f64 {
    let s: f64 = samples.iter().map(|v| v.abs().powf(p)).sum();
    match convention {
        NormConvention::Lebesgue => (s * volume).powf(1.0 / p),
        NormConvention::Counting => s.powf(1.0 / p),
    }
}

/// The fixed part of the trial family: a single cell, tensor bumps of three
/// widths and axis rectangles with aspect ratios `1`, `sqrt(u)` and `u`.
pub fn improving_trial_family(spec: &GridSpec) -> Vec<GridFunction> {
    let u = spec.unit_cells() as f64;
    let centre = spec.side_length() / 2.0;
    let mut out = Vec::new();
    let mut cell = GridFunction::zeros(*spec);
    let mid = spec.cells_per_axis() as i64 / 2;
    cell.samples_mut()[spec.index([mid, mid])] = 1.0;
    out.push(cell);
    let dim = spec.dim();
    for width in [0.125, 0.5, 1.0] {
        out.push(
            GridFunction::from_fn(*spec, |x| {
                (0..dim)
                    .map(|a| crate::measures::standard_bump((x[a] - centre) / width))
                    .product()
            })
            .expect("bump samples are finite"),
        );
    }
    for aspect in [1.0, u.sqrt(), u] {
        let short = 1.0 / aspect;
        let orientations = if dim == 2 { 2 } else { 1 };
        for o in 0..orientations {
            out.push(
                GridFunction::from_fn(*spec, |x| {
                    let d0 = (x[0] - centre).abs();
                    let d1 = (x[1] - centre).abs();
                    let inside = match (dim, o) {
                        (1, _) => d0 < 0.5 * short,
                        (_, 0) => d0 < 0.5 && d1 < 0.5 * short,
                        _ => d1 < 0.5 && d0 < 0.5 * short,
                    };
                    if inside || (d0 == 0.0 && d1 == 0.0) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .expect("indicator samples are finite"),
            );
        }
    }
    out
}

fn random_trial(spec: &GridSpec, rng: &mut ChaCha8Rng) -> GridFunction {
    let centre = spec.side_length() / 2.0;
    let bumps: Vec<([f64; 2], f64, f64)> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let c = [centre + rng.gen_range(-1.0..1.0), centre + rng.gen_range(-1.0..1.0)];
            (c, rng.gen_range(0.05..1.0), rng.gen_range(-1.0..1.0))
        })
        .collect();
    let dim = spec.dim();
    GridFunction::from_fn(*spec, |x| {
        bumps
            .iter()
            .map(|(c, w, a)| a * (0..dim).map(|k| crate::measures::standard_bump((x[k] - c[k]) / w)).product::<f64>())
            .sum()
    })
    .expect("bump samples are finite")
}

/// Lower bound for the `L^p -> L^q` norm of `f -> m * f`: the largest ratio
/// `|m * f|_q / |f|_p` over the fixed trial family plus seeded random bump
/// mixtures, `trials` functions in total (at least the fixed family).
pub fn improving_norm_estimate(m: &DiscreteMeasure, p: f64, q: f64, trials: usize, seed: u64) -> Result<f64> {
    improving_norm_estimate_with(m, p, q, trials, seed, NormConvention::Lebesgue)
}

pub fn improving_norm_estimate_with(
    m: &DiscreteMeasure,
    p: f64,
    q: f64,
    trials: usize,
    seed: u64,
    convention: NormConvention,
) -> Result<f64> {
    if trials < 10 {
        return Err(Error::InvalidArgument(format!("{trials} trials; need at least 10")));
    }
    if !(p >= 1.0 && q >= 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p}, q = {q}")));
    }
    let spec = *m.spec();
    let mut family = improving_trial_family(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while family.len() < trials {
        family.push(random_trial(&spec, &mut rng));
    }
    let multiplier = crate::lattice::measure_multiplier(&spec, m)?;
    let volume = spec.cell_volume();
    let ratios: Vec<f64> = family
        .par_iter()
        .map(|f| {
            let denom = norm_with(f.samples(), p, volume, convention);
            if denom == 0.0 {
                return 0.0;
            }
            let g = apply_multiplier(&spec, f.samples(), &multiplier);
            norm_with(&g, q, volume, convention) / denom
        })
        .collect();
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{pairing, CellBox};
    use rand::Rng;
    use crate::measures::{circle_measure, modulate_mean_zero, Atom};
    use proptest::prelude::*;

    fn rand_fn(spec: GridSpec, rng: &mut ChaCha8Rng) -> GridFunction {
        GridFunction::new(spec, (0..spec.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Measures live on a guarded grid with u = 16; functions on a small
    /// relaxed grid with the same u.
    fn small_setup() -> (GridSpec, DiscreteMeasure, DiscreteMeasure) {
        let mspec = GridSpec::new(2, 8, 4).unwrap();
        let sigma = circle_measure(mspec, 1.0, 256).unwrap();
        let mu = modulate_mean_zero(&sigma, |x| x[0] + 0.5 * x[1] * x[1]).unwrap();
        (GridSpec::relaxed(2, 6, 4).unwrap(), sigma, mu)
    }

    fn direct_convolve(f: &GridFunction, m: &DiscreteMeasure) -> Vec<f64> {
        let spec = f.spec();
        (0..spec.len())
            .map(|i| {
                let x = spec.cell(i);
                m.atoms()
                    .iter()
                    .map(|a| a.weight * f.samples()[spec.index([x[0] - a.position[0], x[1] - a.position[1]])])
                    .sum()
            })
            .collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta_exponents(1.5, 3.0, 0.0).unwrap().0, 1.5);
        let (p, q, _) = theta_exponents(1.5, 3.0, 1.0).unwrap();
        assert!((p - 2.0).abs() < 1e-15 && (q - 2.0).abs() < 1e-15);
        let (p, q, qp) = theta_exponents(1.5, 3.0, 0.5).unwrap();
        assert!((p - 12.0 / 7.0).abs() < 1e-14);
        assert!((q - 12.0 / 5.0).abs() < 1e-14);
        assert!((1.0 / q + 1.0 / qp - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exponent_pair_conjugates() {
        let e = ExponentPair::new(1.5, 3.0).unwrap();
        assert!((1.0 / e.p + 1.0 / e.p_prime() - 1.0).abs() < 1e-14);
        assert!((1.0 / e.q + 1.0 / e.q_prime() - 1.0).abs() < 1e-14);
        assert!(e.q_prime() < e.p_prime());
        assert!(ExponentPair::new(3.0, 1.5).is_err());
        assert!(ExponentPair::new(1.0, 2.0).is_err());
    }

    #[test]
    fn epsilon_guards() {
        assert!(EpsilonSigns::new(0, -1, vec![]).is_err());
        assert!(EpsilonSigns::new(0, 1, vec![1.0, 1.5]).is_err());
        let e = EpsilonSigns::alternating(-2, 1).unwrap();
        assert_eq!(e.values(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(e.get(5), 0.0);
        assert_eq!(e.truncated_above(-1).unwrap().values(), &[1.0, -1.0]);
        assert!(e.truncated_above(-3).is_none());
    }

    #[test]
    fn local_average_examples() {
        let spec = GridSpec::relaxed(2, 5, 3).unwrap();
        let c = GridFunction::constant(spec, 2.5);
        for (r, p) in [(0.1, 1.0), (0.5, 2.0), (1.3, 3.0)] {
            assert!((local_average(&c, [4, 7], r, p).unwrap() - 2.5).abs() < 1e-14);
        }
        let r = 0.5;
        let ball = GridFunction::from_fn(spec, |x| {
            let d = ((x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2)).sqrt();
            if d <= r + 1e-12 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        assert!((local_average(&ball, [16, 16], r, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!(local_average(&c, [0, 0], 0.0, 1.0).is_err());
    }

    #[test]
    fn local_average_matches_direct_sum() {
        let spec = GridSpec::relaxed(2, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_fn(spec, &mut rng);
        let (x, r, p) = ([3i64, 30i64], 0.4, 1.7);
        let rc: f64 = 0.4 * 8.0;
        let mut vals = Vec::new();
        for a in 0..32i64 {
            for b in 0..32i64 {
                let d0 = (a - x[0]).rem_euclid(32).min((x[0] - a).rem_euclid(32));
                let d1 = (b - x[1]).rem_euclid(32).min((x[1] - b).rem_euclid(32));
                if ((d0 * d0 + d1 * d1) as f64) <= rc * rc {
                    vals.push(f.samples()[(a * 32 + b) as usize].abs().powf(p));
                }
            }
        }
        let direct = (vals.iter().sum::<f64>() / vals.len() as f64).powf(1.0 / p);
        assert!((local_average(&f, x, r, p).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn maximal_fn_matches_sup_of_local_averages() {
        let spec = GridSpec::relaxed(2, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = rand_fn(spec, &mut rng);
        for p in [1.0, 2.0] {
            let m = maximal_fn(&f, p).unwrap();
            for i in [0usize, 77, 500, 1023] {
                let x = spec.cell(i);
                let direct = maximal_radii(&spec)
                    .map(|k| local_average(&f, x, (k as f64).exp2() / 8.0, p).unwrap())
                    .fold(0.0, f64::max);
                assert!((m.samples()[i] - direct).abs() < 1e-10);
                assert!(m.samples()[i] >= f.samples()[i].abs() - 1e-12);
            }
        }
        let c = maximal_fn(&GridFunction::constant(spec, 3.0), 1.5).unwrap();
        assert!(c.samples().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn maximal_fn_of_a_cell() {
        let spec = GridSpec::relaxed(2, 6, 3).unwrap();
        let cell = GridFunction::indicator(spec, &CellBox::new([32, 32], 1)).unwrap();
        let m = maximal_fn(&cell, 1.0).unwrap();
        assert_eq!(m.samples()[spec.index([32, 32])], 1.0);
        let near = m.samples()[spec.index([32, 36])];
        let far = m.samples()[spec.index([32, 48])];
        assert!(near > far && far > 0.0);
        // decay like r^-2: doubling the distance divides by roughly four
        let mid = m.samples()[spec.index([32, 40])];
        assert!(mid / far > 2.0 && mid / far < 8.0);
    }

    #[test]
    fn spectral_convolution_matches_direct_sum() {
        let (spec, _, mu) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = rand_fn(spec, &mut rng);
        let spectral = crate::lattice::convolve(&f, &mu).unwrap();
        assert!(max_diff(spectral.samples(), &direct_convolve(&f, &mu)) < 1e-10);

        // 1D: indicator against three random atoms
        let line = GridSpec::relaxed(1, 5, 3).unwrap();
        let mline = GridSpec::new(1, 7, 3).unwrap();
        let atoms: Vec<Atom> = (0..3)
            .map(|_| Atom { position: [rng.gen_range(-8..=8), 0], weight: rng.gen_range(-1.0..1.0) })
            .collect();
        let m = DiscreteMeasure::from_atoms(mline, atoms, 1.0).unwrap();
        let ind = GridFunction::indicator(line, &CellBox::new([5, 0], 9)).unwrap();
        let spectral = crate::lattice::convolve(&ind, &m).unwrap();
        assert!(max_diff(spectral.samples(), &direct_convolve(&ind, &m)) < 1e-10);
    }

    #[test]
    fn radon_examples_and_oracle() {
        let (spec, _, mu) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = rand_fn(spec, &mut rng);
        let zero = radon_t(&f, &mu, &EpsilonSigns::constant(-1, 0, 0.0).unwrap()).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let eps = EpsilonSigns::new(-1, 0, vec![0.7, -0.4]).unwrap();
        let konst = radon_t(&GridFunction::constant(spec, 2.0), &mu, &eps).unwrap();
        assert!(konst.max_abs() < 1e-10);

        let single = radon_t(&f, &mu, &EpsilonSigns::constant(-1, -1, 1.0).unwrap()).unwrap();
        let conv = crate::lattice::convolve(&f, &dilate(&mu, -1).unwrap()).unwrap();
        assert_eq!(single.samples(), conv.samples());

        let t = radon_t(&f, &mu, &eps).unwrap();
        let mut direct = vec![0.0; spec.len()];
        for j in eps.scales() {
            let d = direct_convolve(&f, &dilate(&mu, j).unwrap());
            for (o, v) in direct.iter_mut().zip(d) {
                *o += eps.get(j) * v;
            }
        }
        assert!(max_diff(t.samples(), &direct) < 1e-10);

        let sigma_only = circle_measure(*mu.spec(), 1.0, 256).unwrap();
        assert!(matches!(radon_t(&f, &sigma_only, &eps), Err(Error::NotMeanZero)));
    }

    #[test]
    fn adjoint_identity() {
        let (spec, _, mu) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eps = EpsilonSigns::new(-1, 0, vec![0.3, -1.0]).unwrap();
        let op = RadonOperator::new(spec, &mu, &eps).unwrap();
        let reflected = RadonOperator::new(spec, &mu.reflect(), &eps).unwrap();
        for _ in 0..5 {
            let f = rand_fn(spec, &mut rng);
            let g = rand_fn(spec, &mut rng);
            let lhs = pairing(&op.apply(&f).unwrap(), &g).unwrap();
            let rhs = pairing(&f, &reflected.apply(&g).unwrap()).unwrap();
            let rhs2 = pairing(&f, &op.apply_adjoint(&g).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 && (lhs - rhs2).abs() < 1e-10);
        }
    }

    #[test]
    fn maximal_examples_and_oracle() {
        let (spec, sigma, _) = small_setup();
        let one = maximal_t_star(&GridFunction::constant(spec, 1.0), &sigma, -1..=0).unwrap();
        assert!(one.samples().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = rand_fn(spec, &mut rng);
        let abs = f.abs();
        let single = maximal_t_star(&f, &sigma, 0..=0).unwrap();
        assert!(max_diff(single.samples(), &direct_convolve(&abs, &dilate(&sigma, 0).unwrap())) < 1e-10);
        let both = maximal_t_star(&f, &sigma, -1..=0).unwrap();
        let a = direct_convolve(&abs, &dilate(&sigma, -1).unwrap());
        let b = direct_convolve(&abs, &dilate(&sigma, 0).unwrap());
        let direct: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
        assert!(max_diff(both.samples(), &direct) < 1e-10);
        let mu = modulate_mean_zero(&sigma, |x| x[0]).unwrap();
        assert!(matches!(maximal_t_star(&f, &mu, 0..=0), Err(Error::NotPositive)));
    }

    #[test]
    fn truncation_examples() {
        let (spec, _, mu) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = rand_fn(spec, &mut rng);
        let eps = EpsilonSigns::new(-1, 0, vec![0.5, 1.0]).unwrap();
        // Q of side 1/4 unit: below every scale
        let tiny = DyadicCube::new(spec, -2, [16, 16]).unwrap();
        assert_eq!(truncated_t_q(&f, &tiny, &mu, &eps).unwrap().max_abs(), 0.0);
        // Q of side 2 units covers the support of f1 and all scales
        let big = DyadicCube::new(spec, 1, [0, 32]).unwrap();
        let local = f.restricted_to(&big.cell_box()).unwrap();
        let full = radon_t(&local, &mu, &eps).unwrap();
        assert_eq!(truncated_t_q(&local, &big, &mu, &eps).unwrap().samples(), full.samples());
        // mid-size Q keeps only the scale 2^-1
        let mid = DyadicCube::new(spec, -1, [8, 24]).unwrap();
        let got = truncated_t_q(&f, &mid, &mu, &eps).unwrap();
        let restricted = f.restricted_to(&mid.cell_box()).unwrap();
        let direct: Vec<f64> = direct_convolve(&restricted, &dilate(&mu, -1).unwrap())
            .into_iter()
            .map(|v| 0.5 * v)
            .collect();
        assert!(max_diff(got.samples(), &direct) < 1e-10);
        // perturbing outside Q changes nothing
        let mut g = f.clone();
        g.samples_mut()[spec.index([0, 0])] += 5.0;
        assert_eq!(truncated_t_q(&g, &mid, &mu, &eps).unwrap().samples(), got.samples());
    }

    #[test]
    fn high_maximal_examples() {
        let (spec, sigma, _) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f = rand_fn(spec, &mut rng);
        let q_big = DyadicCube::new(spec, 1, [0, 0]).unwrap();
        let q_small = DyadicCube::new(spec, -1, [0, 0]).unwrap();
        let all = maximal_t_star(&f, &sigma, -1..=0).unwrap();
        assert_eq!(high_t_star(&f, &sigma, &q_big, -1..=0).unwrap().samples(), all.samples());
        let one = high_t_star(&f, &sigma, &q_small, -1..=0).unwrap();
        let direct = direct_convolve(&f.abs(), &dilate(&sigma, -1).unwrap());
        assert!(max_diff(one.samples(), &direct) < 1e-10);
    }

    #[test]
    fn improving_examples() {
        let spec = GridSpec::new(2, 9, 5).unwrap();
        let delta = DiscreteMeasure::unit_atom(spec);
        let est = improving_norm_estimate(&delta, 2.0, 2.0, 12, 1).unwrap();
        assert!(est >= 0.99 && est <= 1.0 + 1e-12, "{est}");
        assert!(improving_norm_estimate(&delta, 2.0, 2.0, 9, 1).is_err());

        let sigma = circle_measure(spec, 1.0, 16 * 32).unwrap();
        let mut last = f64::INFINITY;
        for q in [1.5, 2.0, 3.0, 6.0] {
            let e = improving_norm_estimate_with(&sigma, 1.5, q, 14, 3, NormConvention::Counting).unwrap();
            assert!(e <= last * (1.0 + 1e-12), "q = {q}: {e} > {last}");
            last = e;
        }
    }

    #[test]
    fn improving_is_stable_under_refinement() {
        let coarse = GridSpec::new(2, 9, 5).unwrap();
        let fine = GridSpec::new(2, 10, 5).unwrap();
        let a = improving_norm_estimate(&circle_measure(coarse, 1.0, 512).unwrap(), 1.5, 3.0, 16, 7).unwrap();
        let b = improving_norm_estimate(&circle_measure(fine, 1.0, 512).unwrap(), 1.5, 3.0, 16, 7).unwrap();
        assert!(a.is_finite() && a > 0.0);
        assert!((a - b).abs() / a <= 0.15, "{a} vs {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn radon_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (spec, _, mu) = small_setup();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_fn(spec, &mut rng);
            let g = rand_fn(spec, &mut rng);
            let eps = EpsilonSigns::random(-1, 0, seed).unwrap();
            let op = RadonOperator::new(spec, &mu, &eps).unwrap();
            let lhs = op.apply(&f.scaled(a).add(&g.scaled(b)).unwrap()).unwrap();
            let rhs = op.apply(&f).unwrap().scaled(a).add(&op.apply(&g).unwrap().scaled(b)).unwrap();
            prop_assert!(max_diff(lhs.samples(), rhs.samples()) < 1e-10);
        }

        #[test]
        fn maximal_is_sublinear_and_monotone(seed in 0u64..1000, a in -3.0f64..3.0) {
            let (spec, sigma, _) = small_setup();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_fn(spec, &mut rng);
            let g = rand_fn(spec, &mut rng);
            let op = MaximalOperator::new(spec, &sigma, -1..=0).unwrap();
            let tf = op.apply(&f).unwrap();
            let tg = op.apply(&g).unwrap();
            let tsum = op.apply(&f.add(&g).unwrap()).unwrap();
            let tscaled = op.apply(&f.scaled(a)).unwrap();
            let bigger = op.apply(&f.map(|v| v.abs() + 0.1)).unwrap();
            for i in 0..spec.len() {
                prop_assert!(tsum.samples()[i] <= tf.samples()[i] + tg.samples()[i] + 1e-12);
                prop_assert!((tscaled.samples()[i] - a.abs() * tf.samples()[i]).abs() < 1e-12);
                prop_assert!(tf.samples()[i] <= bigger.samples()[i] + 1e-12);
            }
        }
    }
}
