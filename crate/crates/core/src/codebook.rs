//! Gradient-free adaptive spherical k-means codebook.
//!
//! Codewords track the token distribution through exponential moving
//! averages of per-code assignment counts and sums of normalized tokens.
//! Codes whose running count falls below the dead-code threshold are
//! re-seeded from a random token of the current batch.

use crate::error::{Error, Result};
use crate::numerics::{self, cosine, norm, squared_distance, Matrix, RngStream, TokenBatch, NORM_EPS};

/// Hyperparameters of the codebook update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookParams {
    /// EMA decay, in `[0, 1)`.
    pub decay: f64,
    /// Codes with a running count below this are revived.
    pub dead_threshold: f64,
    /// Static-codebook ablation: updates leave the state untouched.
    pub frozen: bool,
    /// Euclidean-assignment ablation: no projection of the running means.
    pub euclidean_mode: bool,
}

impl Default for CodebookParams {
    fn default() -> Self {
        Self { decay: 0.95, dead_threshold: 1.0, frozen: false, euclidean_mode: false }
    }
}

impl CodebookParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config(format!("decay must lie in [0, 1), got {}", self.decay)));
        }
        if !(self.dead_threshold > 0.0 && self.dead_threshold.is_finite()) {
            return Err(Error::config(format!(
                "dead-code threshold must be positive, got {}",
                self.dead_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookState {
    codewords: Matrix,
    ema_counts: Vec<f64>,
    ema_sums: Matrix,
    params: CodebookParams,
}

/// Codeword index per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// What a single [`CodebookState::update`] did.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub assignment: Assignment,
    /// Codes that fell below the threshold and were re-seeded, ascending.
    pub revived: Vec<usize>,
}

impl CodebookState {
    /// Seeds `num_codes` codewords from distinct random tokens of `tokens`
    /// (with replacement when the batch is smaller than the codebook).
    pub fn init(tokens: &TokenBatch, num_codes: usize, params: CodebookParams, rng: &mut RngStream) -> Result<Self> {
        params.validate()?;
        let s = tokens.rows();
        if s == 0 {
            return Err(Error::input("cannot initialize a codebook from an empty batch"));
        }
        if num_codes == 0 {
            return Err(Error::config("codebook size must be at least 1"));
        }
        let picks: Vec<usize> = if s >= num_codes {
            // partial Fisher-Yates
            let mut pool: Vec<usize> = (0..s).collect();
            for i in 0..num_codes {
                let j = i + rng.below(s - i);
                pool.swap(i, j);
            }
            pool.truncate(num_codes);
            pool
        } else {
            (0..num_codes).map(|_| rng.below(s)).collect()
        };
        let d = tokens.cols();
        let mut codewords = Matrix::zeros(num_codes, d);
        for (g, &i) in picks.iter().enumerate() {
            codewords.row_mut(g).copy_from_slice(&numerics::sphere(tokens.row(i)));
        }
        Ok(Self {
            ema_sums: codewords.clone(),
            codewords,
            ema_counts: vec![1.0; num_codes],
            params,
        })
    }

    /// Rebuilds a state from stored parts.
    pub fn from_parts(codewords: Matrix, ema_counts: Vec<f64>, ema_sums: Matrix, params: CodebookParams) -> Result<Self> {
        params.validate()?;
        let g = codewords.rows();
        if g == 0 {
            return Err(Error::config("codebook size must be at least 1"));
        }
        if ema_counts.len() != g || ema_sums.rows() != g || ema_sums.cols() != codewords.cols() {
            return Err(Error::input("codebook parts have inconsistent shapes"));
        }
        if ema_counts.iter().any(|&n| !(n >= 0.0 && n.is_finite())) {
            return Err(Error::input("EMA counts must be finite and non-negative"));
        }
        if !codewords.is_finite() || !ema_sums.is_finite() {
            return Err(Error::input("non-finite codebook state"));
        }
        Ok(Self { codewords, ema_counts, ema_sums, params })
    }

    pub fn num_codes(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codewords(&self) -> &Matrix {
        &self.codewords
    }

    pub fn codeword(&self, g: usize) -> &[f64] {
        self.codewords.row(g)
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Matrix {
        &self.ema_sums
    }

    pub fn params(&self) -> &CodebookParams {
        &self.params
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.frozen = frozen;
    }

    pub fn is_euclidean(&self) -> bool {
        self.params.euclidean_mode
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::input(format!(
                "token dimension {d} does not match codebook dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Nearest codeword for one token, ties to the lower index.
    ///
    /// Cosine mode maximizes cosine similarity. Euclidean mode normalizes
    /// the token and minimizes squared distance to the (unnormalized)
    /// codewords.
    pub fn assign_one(&self, h: &[f64]) -> usize {
        let mut best = 0;
        if self.params.euclidean_mode {
            let hn = numerics::sphere(h);
            let mut best_d = f64::INFINITY;
            for (g, c) in self.codewords.iter_rows().enumerate() {
                let dist = squared_distance(&hn, c);
                if dist < best_d {
                    best_d = dist;
                    best = g;
                }
            }
        } else {
            let mut best_s = f64::NEG_INFINITY;
            for (g, c) in self.codewords.iter_rows().enumerate() {
                let s = cosine(h, c);
                if s > best_s {
                    best_s = s;
                    best = g;
                }
            }
        }
        best
    }

    pub fn assign(&self, tokens: &TokenBatch) -> Result<Assignment> {
        self.check_dim(tokens.cols())?;
        Ok(Assignment(tokens.iter_rows().map(|h| self.assign_one(h)).collect()))
    }

    /// One step of adaptive spherical k-means on `tokens`.
    ///
    /// Frozen codebooks only compute the assignment.
    pub fn update(&mut self, tokens: &TokenBatch, rng: &mut RngStream) -> Result<UpdateOutcome> {
        self.check_dim(tokens.cols())?;
        let s = tokens.rows();
        if s == 0 {
            return Err(Error::input("codebook update on an empty batch"));
        }
        let mut normalized = Matrix::zeros(s, self.dim());
        for (i, h) in tokens.iter_rows().enumerate() {
            normalized.row_mut(i).copy_from_slice(&numerics::sphere(h));
        }
        let assignment = Assignment(normalized.iter_rows().map(|h| self.assign_one(h)).collect());
        if self.params.frozen {
            return Ok(UpdateOutcome { assignment, revived: Vec::new() });
        }

        let (g_count, d) = (self.num_codes(), self.dim());
        let mut batch_counts = vec![0.0; g_count];
        let mut batch_sums = Matrix::zeros(g_count, d);
        for (h, &g) in normalized.iter_rows().zip(assignment.as_slice()) {
            batch_counts[g] += 1.0;
            numerics::axpy(1.0, h, batch_sums.row_mut(g));
        }

        let gamma = self.params.decay;
        let mut revived = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for g in 0..g_count {
            let n = gamma * self.ema_counts[g] + (1.0 - gamma) * batch_counts[g];
            let m = self.ema_sums.row_mut(g);
            for (mi, bi) in m.iter_mut().zip(batch_sums.row(g)) {
                *mi = gamma * *mi + (1.0 - gamma) * bi;
            }
            self.ema_counts[g] = n;
            if n < self.params.dead_threshold {
                let u = rng.below(s);
                m.copy_from_slice(normalized.row(u));
                self.ema_counts[g] = 1.0;
                revived.push(g);
            }
            let m = self.ema_sums.row(g);
            let c = if self.params.euclidean_mode {
                let n = self.ema_counts[g].max(NORM_EPS);
                m.iter().map(|x| x / n).collect()
            } else {
                numerics::sphere(m)
            };
            self.codewords.row_mut(g).copy_from_slice(&c);
        }
        Ok(UpdateOutcome { assignment, revived })
    }

    /// Euclidean distance from `token` to its assigned codeword.
    pub fn quantization_error(&self, token: &[f64]) -> Result<f64> {
        self.check_dim(token.len())?;
        let c = self.codeword(self.assign_one(token));
        Ok(squared_distance(token, c).sqrt())
    }

    /// Mean quantization error over a batch.
    pub fn mean_quantization_error(&self, tokens: &TokenBatch) -> Result<f64> {
        self.check_dim(tokens.cols())?;
        if tokens.rows() == 0 {
            return Err(Error::input("empty batch"));
        }
        let total: f64 = tokens
            .iter_rows()
            .map(|h| squared_distance(h, self.codeword(self.assign_one(h))).sqrt())
            .sum();
        Ok(total / tokens.rows() as f64)
    }

    /// Largest deviation of any codeword norm from one.
    pub fn max_norm_deviation(&self) -> f64 {
        self.codewords.iter_rows().map(|c| (norm(c) - 1.0).abs()).fold(0.0, f64::max)
    }
}
