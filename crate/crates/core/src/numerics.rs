//! Dense kernels and seeded randomness shared by the routers, the codebook and
//! the trainer.
//!
//! Everything works on `f64` row-major storage. Vectors are plain slices; a
//! [`Matrix`] is a batch of rows (tokens, codewords, expert centroids).

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by the sphere projection.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major matrix of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A batch of token representations, one token per row.
pub type TokenBatch = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.gaussian()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty column count would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y` for a vector `y` of length `rows`.
    pub fn mul_vec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &coef) in self.iter_rows().zip(y) {
            axpy(coef, r, &mut out);
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::input("non-finite value"))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Canonical unit vector `e₁` of dimension `d`.
pub fn canonical_unit(d: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    if let Some(first) = e.first_mut() {
        *first = 1.0;
    }
    e
}

/// Projects `v` onto the unit sphere. Vectors with norm at most
/// [`NORM_EPS`] map to `e₁`.
pub fn project_to_sphere(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v)?;
    Ok(sphere(v))
}

/// Unchecked projection for callers that already validated their input.
pub(crate) fn sphere(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > NORM_EPS {
        v.iter().map(|x| x / n).collect()
    } else {
        canonical_unit(v.len())
    }
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::input(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    ensure_finite(x)?;
    ensure_finite(y)?;
    Ok(cosine(x, y))
}

pub(crate) fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    let c = match (nx > NORM_EPS, ny > NORM_EPS) {
        (true, true) => dot(x, y) / (nx * ny),
        (true, false) => x.first().copied().unwrap_or(0.0) / nx,
        (false, true) => y.first().copied().unwrap_or(0.0) / ny,
        (false, false) => 1.0,
    };
    c.clamp(-1.0, 1.0)
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    ensure_finite(scores)?;
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Result of a (possibly jittered) top-k selection.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    /// Positions into the scored slice, best first.
    pub indices: Vec<usize>,
    /// The original, noise-free scores at `indices`.
    pub values: Vec<f64>,
}

/// Selects the `k` largest entries of `scores + N(0, sigma²)`.
///
/// Noise only decides the ordering: the returned values are the unperturbed
/// scores. Ties go to the lower index. With `sigma == 0` no randomness is
/// consumed.
pub fn noisy_topk(scores: &[f64], k: usize, sigma: f64, rng: &mut RngStream) -> Result<TopK> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k requires 1 <= k <= n (k={k}, n={n})")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    ensure_finite(scores)?;
    let indices = if sigma > 0.0 {
        let keys: Vec<f64> = scores.iter().map(|s| s + sigma * rng.gaussian()).collect();
        top_indices(&keys, k)
    } else {
        top_indices(scores, k)
    };
    let values = indices.iter().map(|&i| scores[i]).collect();
    Ok(TopK { indices, values })
}

/// Indices of the `k` largest keys, descending, ties to the lower index.
pub(crate) fn top_indices(keys: &[f64], k: usize) -> Vec<usize> {
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        // finite keys, so this is a total order in which -0 equals +0
        keys[b].partial_cmp(&keys[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for the same seed. [`RngStream::fork`] derives a child stream
/// from a sub-identifier (a token or codeword index) without consuming draws,
/// so per-item noise is identical whether items are processed sequentially
/// or in parallel.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for sub-site `sub`, independent of the draw position.
    pub fn fork(&self, sub: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream_id ^ splitmix64(sub.wrapping_add(1))))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`. Draws a `u64` so results do not depend on
    /// the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n as u64) as usize
    }

    /// A random unit vector of dimension `d`.
    pub fn unit_vector(&mut self, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| self.gaussian()).collect();
        sphere(&v)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
