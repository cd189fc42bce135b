//! Signal model: constellations, channel generation, the complex-to-real
//! transform and the QR-expanded tree metrics.
//!
//! The real model stacks real and imaginary parts, `y' = H x + w` with
//! `H = [[Re, -Im], [Im, Re]]`. A thin QR decomposition `H = Q R` turns the
//! ML objective into `||y - R x||^2` with `y = Q^T y'`, which expands into
//! one term per row of `R`. Row `k` only involves `x_k, ..., x_m`, so the
//! symbols are recovered from `x_m` backwards and every partial vector
//! `x_k^m` is a node of a `|Q|`-ary tree. The term contributed by row `k` is
//! the branch metric, their running sum the path metric.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal entries of `R` below this are treated as a singular channel.
pub const DEGENERATE_DIAGONAL: f64 = 1e-12;

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Qam16,
}

impl Modulation {
    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "16QAM",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BPSK" => Ok(Modulation::Bpsk),
            "QPSK" | "4QAM" => Ok(Modulation::Qpsk),
            "16QAM" | "QAM16" => Ok(Modulation::Qam16),
            other => Err(Error::Configuration(format!("unknown modulation {other:?}"))),
        }
    }
}

/// A square QAM alphabet described by its PAM levels.
///
/// Levels are the raw odd-integer grid (`{±1}`, `{±1, ±3}`); no power
/// normalization is applied, `symbol_energy` reports the grid's energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pam_levels: Vec<f64>,
    modulation: Modulation,
    symbol_energy: f64,
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let pam_levels = match modulation {
            Modulation::Bpsk | Modulation::Qpsk => vec![-1.0, 1.0],
            Modulation::Qam16 => vec![-3.0, -1.0, 1.0, 3.0],
        };
        let real_energy =
            pam_levels.iter().map(|a| a * a).sum::<f64>() / pam_levels.len() as f64;
        let symbol_energy = match modulation {
            Modulation::Bpsk => real_energy,
            _ => 2.0 * real_energy,
        };
        Self { pam_levels, modulation, symbol_energy }
    }

    pub fn bpsk() -> Self {
        Self::new(Modulation::Bpsk)
    }

    pub fn qpsk() -> Self {
        Self::new(Modulation::Qpsk)
    }

    pub fn qam16() -> Self {
        Self::new(Modulation::Qam16)
    }

    pub fn pam_levels(&self) -> &[f64] {
        &self.pam_levels
    }

    pub fn size(&self) -> usize {
        self.pam_levels.len()
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn modulation_name(&self) -> &'static str {
        self.modulation.name()
    }

    /// Mean complex-symbol energy `σ_x²` of the alphabet.
    pub fn symbol_energy(&self) -> f64 {
        self.symbol_energy
    }

    /// Mean energy per real dimension.
    pub fn real_symbol_energy(&self) -> f64 {
        if self.is_real() {
            self.symbol_energy
        } else {
            self.symbol_energy / 2.0
        }
    }

    /// BPSK runs on a real channel without stacking.
    pub fn is_real(&self) -> bool {
        self.modulation == Modulation::Bpsk
    }

    /// Real dimension `m` for `n_t` transmit antennas.
    pub fn real_dim(&self, n_t: usize) -> usize {
        if self.is_real() {
            n_t
        } else {
            2 * n_t
        }
    }

    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.pam_levels.iter().position(|&a| a == value)
    }

    /// Nearest PAM level; exact midpoints go to the smaller level.
    pub fn slice(&self, value: f64) -> f64 {
        let mut best = self.pam_levels[0];
        let mut best_dist = (value - best).abs();
        for &level in &self.pam_levels[1..] {
            let dist = (value - level).abs();
            if dist < best_dist {
                best = level;
                best_dist = dist;
            }
        }
        best
    }
}

/// Standard complex Gaussian draw; real Gaussian when `real_valued`.
fn gaussian_entry<R: Rng + ?Sized>(rng: &mut R, real_valued: bool) -> Complex64 {
    if real_valued {
        Complex64::new(rng.sample(StandardNormal), 0.0)
    } else {
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(scale * re, scale * im)
    }
}

/// Random `rows × cols` matrix with unit-variance entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    real_valued: bool,
    rng: &mut R,
) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian_entry(rng, real_valued))
}

/// A base channel `H_c` and the mixing constant for its per-vector variations.
#[derive(Debug, Clone)]
pub struct ComplexChannelInstance {
    h_c: DMatrix<Complex64>,
    epsilon: f64,
    rng_seed: u64,
    real_valued: bool,
}

const BASE_CHANNEL_STREAM: u64 = 0;

impl ComplexChannelInstance {
    /// Draws `H_c` from `rng_seed`.
    pub fn random(
        n_r: usize,
        n_t: usize,
        real_valued: bool,
        epsilon: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(rng_seed, BASE_CHANNEL_STREAM);
        let h_c = gaussian_matrix(n_r, n_t, real_valued, &mut rng);
        Self::from_matrix(h_c, real_valued, epsilon, rng_seed)
    }

    pub fn from_matrix(
        h_c: DMatrix<Complex64>,
        real_valued: bool,
        epsilon: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if real_valued && h_c.iter().any(|z| z.im != 0.0) {
            return Err(Error::InvalidParameter(
                "real-valued channel with nonzero imaginary parts".into(),
            ));
        }
        Ok(Self { h_c, epsilon, rng_seed, real_valued })
    }

    pub fn h_c(&self) -> &DMatrix<Complex64> {
        &self.h_c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn is_real_valued(&self) -> bool {
        self.real_valued
    }

    pub fn n_r(&self) -> usize {
        self.h_c.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.h_c.ncols()
    }

    /// `H_c^j = √(1-ε²) H_c + ε W_c^j` with `W_c^j` drawn from `(rng_seed, j)`.
    pub fn generate_varying_channel(&self, j: u64) -> Result<DMatrix<Complex64>> {
        if j == BASE_CHANNEL_STREAM {
            return Err(Error::InvalidParameter("channel index j must be >= 1".into()));
        }
        if self.epsilon == 0.0 {
            return Ok(self.h_c.clone());
        }
        let mut rng = stream_rng(self.rng_seed, j);
        let w = gaussian_matrix(self.n_r(), self.n_t(), self.real_valued, &mut rng);
        let keep = (1.0 - self.epsilon * self.epsilon).sqrt();
        Ok(self.h_c.map(|h| h * keep) + w * Complex64::new(self.epsilon, 0.0))
    }
}

/// `σ_w² = N_T σ_x² / 10^(snr/10)` (complex noise variance per receive antenna).
pub fn snr_to_noise_variance(snr_db: f64, n_t: usize, symbol_energy: f64) -> f64 {
    n_t as f64 * symbol_energy / 10f64.powf(snr_db / 10.0)
}

/// One detection problem in the real-valued, QR-reduced form.
#[derive(Debug, Clone)]
pub struct RealSystem {
    h: DMatrix<f64>,
    y_prime: DVector<f64>,
    q_mat: DMatrix<f64>,
    r: DMatrix<f64>,
    y: DVector<f64>,
    /// `Hᵀ y'`, cached for the agent's state vector.
    ht_y_prime: DVector<f64>,
    r_rows: Vec<f64>,
    sigma_w2: f64,
    constellation: Constellation,
    x_true: Option<Vec<f64>>,
}

impl RealSystem {
    /// Stacks a complex model into the real one (BPSK passes through) and
    /// reduces it. `sigma_w2` is the complex noise variance `σ_w²`.
    pub fn from_complex(
        h_c: &DMatrix<Complex64>,
        y_c: &DVector<Complex64>,
        sigma_w2: f64,
        constellation: Constellation,
    ) -> Result<Self> {
        if h_c.nrows() != y_c.len() {
            return Err(Error::Shape { expected: h_c.nrows(), actual: y_c.len() });
        }
        if constellation.is_real() {
            let h = h_c.map(|z| z.re);
            let y_prime = y_c.map(|z| z.re);
            return Self::from_real(h, y_prime, sigma_w2, constellation);
        }
        let (n_r, n_t) = h_c.shape();
        let mut h = DMatrix::zeros(2 * n_r, 2 * n_t);
        for i in 0..n_r {
            for j in 0..n_t {
                let z = h_c[(i, j)];
                h[(i, j)] = z.re;
                h[(i, j + n_t)] = -z.im;
                h[(i + n_r, j)] = z.im;
                h[(i + n_r, j + n_t)] = z.re;
            }
        }
        let y_prime =
            DVector::from_iterator(2 * n_r, y_c.iter().map(|z| z.re).chain(y_c.iter().map(|z| z.im)));
        Self::from_real(h, y_prime, sigma_w2 / 2.0, constellation)
    }

    /// Builds from an already real model; `sigma_w2_real` is per real dimension.
    pub fn from_real(
        h: DMatrix<f64>,
        y_prime: DVector<f64>,
        sigma_w2_real: f64,
        constellation: Constellation,
    ) -> Result<Self> {
        let (n, m) = h.shape();
        if y_prime.len() != n {
            return Err(Error::Shape { expected: n, actual: y_prime.len() });
        }
        if m == 0 || n < m {
            return Err(Error::InvalidParameter(format!(
                "channel must be tall with at least one column, got {n}x{m}"
            )));
        }
        if !(sigma_w2_real > 0.0) || !sigma_w2_real.is_finite() {
            return Err(Error::InvalidParameter(format!("noise variance {sigma_w2_real}")));
        }
        if h.iter().chain(y_prime.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite channel or received signal".into()));
        }

        let qr = h.clone().qr();
        let mut q_mat = qr.q();
        let mut r = qr.r();
        // Unique decomposition: make diag(R) nonnegative by flipping rows of R
        // together with the matching columns of Q.
        for k in 0..m {
            if r[(k, k)] < 0.0 {
                r.row_mut(k).neg_mut();
                q_mat.column_mut(k).neg_mut();
            }
        }
        for i in 0..m {
            for j in 0..i {
                r[(i, j)] = 0.0;
            }
        }
        for k in 0..m {
            let d = r[(k, k)];
            if !(d >= DEGENERATE_DIAGONAL) {
                return Err(Error::DegenerateChannel { index: k, value: d });
            }
        }

        let y = q_mat.transpose() * &y_prime;
        let ht_y_prime = h.transpose() * &y_prime;
        let mut r_rows = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                r_rows[i * m + j] = r[(i, j)];
            }
        }
        Ok(Self {
            h,
            y_prime,
            q_mat,
            r,
            y,
            ht_y_prime,
            r_rows,
            sigma_w2: sigma_w2_real,
            constellation,
            x_true: None,
        })
    }

    /// Attaches the transmitted vector (test and benchmark bookkeeping only).
    pub fn with_truth(mut self, x_true: Vec<f64>) -> Result<Self> {
        if x_true.len() != self.m() {
            return Err(Error::Shape { expected: self.m(), actual: x_true.len() });
        }
        self.x_true = Some(x_true);
        Ok(self)
    }

    /// Draws a transmit vector and noise over `h_c` and builds the system.
    pub fn sample<R: Rng + ?Sized>(
        h_c: &DMatrix<Complex64>,
        constellation: &Constellation,
        sigma_w2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n_r, n_t) = h_c.shape();
        let q = constellation.pam_levels();
        let real = constellation.is_real();
        let x_c = DVector::from_fn(n_t, |_, _| {
            let re = q[rng.random_range(0..q.len())];
            let im = if real { 0.0 } else { q[rng.random_range(0..q.len())] };
            Complex64::new(re, im)
        });
        let noise_std = if real { sigma_w2.sqrt() } else { (sigma_w2 / 2.0).sqrt() };
        let w = DVector::from_fn(n_r, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = if real { 0.0 } else { rng.sample(StandardNormal) };
            Complex64::new(noise_std * re, noise_std * im)
        });
        let y_c = h_c * &x_c + w;
        let x_true: Vec<f64> = if real {
            x_c.iter().map(|z| z.re).collect()
        } else {
            x_c.iter().map(|z| z.re).chain(x_c.iter().map(|z| z.im)).collect()
        };
        Self::from_complex(h_c, &y_c, sigma_w2, constellation.clone())?.with_truth(x_true)
    }

    pub fn m(&self) -> usize {
        self.r.ncols()
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn y_prime(&self) -> &DVector<f64> {
        &self.y_prime
    }

    pub fn q_mat(&self) -> &DMatrix<f64> {
        &self.q_mat
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn ht_y_prime(&self) -> &DVector<f64> {
        &self.ht_y_prime
    }

    /// Noise variance per real dimension.
    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn x_true(&self) -> Option<&[f64]> {
        self.x_true.as_deref()
    }

    /// Branch metric of row `k` (0-based) with `x[k+1..]` already fixed and
    /// `candidate` in position `k`. Only `x[k+1..]` is read.
    #[inline]
    pub fn branch_metric_at(&self, x: &[f64], k: usize, candidate: f64) -> f64 {
        let m = self.m();
        let row = &self.r_rows[k * m..(k + 1) * m];
        let mut residual = self.y[k];
        for i in (k + 1..m).rev() {
            residual -= row[i] * x[i];
        }
        residual -= row[k] * candidate;
        residual * residual
    }

    /// `||y - R x||^2` evaluated directly, without the tree expansion.
    pub fn residual_norm_sq(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (&self.y - &self.r * xv).norm_squared()
    }

    /// `||y' - H x||^2` evaluated directly.
    pub fn received_residual_norm_sq(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (&self.y_prime - &self.h * xv).norm_squared()
    }
}

/// A partially recovered vector `x_k^m`.
///
/// Symbols are kept in recovery order: `symbols[0] = x_m`, and the most
/// recently recovered element is last.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialPath {
    symbols: Vec<f64>,
    cum_metric: f64,
    last_branch: f64,
}

impl PartialPath {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a path from a suffix `(x_k, ..., x_m)` in natural order.
    pub fn from_suffix(sys: &RealSystem, suffix: &[f64]) -> Result<Self> {
        let mut path = Self::new();
        for &v in suffix.iter().rev() {
            path.push(sys, v)?;
        }
        Ok(path)
    }

    pub fn step(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[f64] {
        &self.symbols
    }

    /// `d` of the path; zero for the empty path.
    pub fn cum_metric(&self) -> f64 {
        self.cum_metric
    }

    /// Branch metric of the most recent element; zero for the empty path.
    pub fn last_branch(&self) -> f64 {
        self.last_branch
    }

    /// Index into `x` of the next element to recover.
    pub fn next_index(&self, m: usize) -> usize {
        m - 1 - self.symbols.len()
    }

    /// Recovered elements in natural order, i.e. `(x_k, ..., x_m)`.
    pub fn suffix(&self) -> Vec<f64> {
        self.symbols.iter().rev().copied().collect()
    }

    /// Full-length buffer with the recovered positions set and zeros elsewhere.
    pub fn zero_padded(&self, m: usize) -> Vec<f64> {
        let mut x = vec![0.0; m];
        for (i, &v) in self.symbols.iter().enumerate() {
            x[m - 1 - i] = v;
        }
        x
    }

    /// Appends the next element, updating the cumulative metric.
    pub fn push(&mut self, sys: &RealSystem, value: f64) -> Result<()> {
        if sys.constellation().index_of(value).is_none() {
            return Err(Error::InvalidSymbol { value });
        }
        if self.step() >= sys.m() {
            return Err(Error::InvalidParameter("path already complete".into()));
        }
        let b = branch_metric(sys, self, value);
        self.symbols.push(value);
        self.last_branch = b;
        self.cum_metric += b;
        Ok(())
    }
}

/// `b(x_k^m)` for `x_k = candidate` appended to `path`, with `k = m - step`.
pub fn branch_metric(sys: &RealSystem, path: &PartialPath, candidate: f64) -> f64 {
    let m = sys.m();
    assert!(path.step() < m, "branch_metric on a complete path");
    let x = path.zero_padded(m);
    sys.branch_metric_at(&x, path.next_index(m), candidate)
}

/// `d(x_k^m)` for a suffix `(x_k, ..., x_m)` in natural order, accumulated
/// from row `m` downwards.
pub fn path_metric(sys: &RealSystem, suffix: &[f64]) -> Result<f64> {
    let m = sys.m();
    if suffix.len() > m {
        return Err(Error::Shape { expected: m, actual: suffix.len() });
    }
    let q = sys.constellation();
    if let Some(&bad) = suffix.iter().find(|&&v| q.index_of(v).is_none()) {
        return Err(Error::InvalidSymbol { value: bad });
    }
    let mut x = vec![0.0; m];
    x[m - suffix.len()..].copy_from_slice(suffix);
    let mut d = 0.0;
    for k in (m - suffix.len()..m).rev() {
        d += sys.branch_metric_at(&x, k, x[k]);
    }
    Ok(d)
}
