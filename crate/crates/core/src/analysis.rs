//! Routing-mass guarantees and routing-quality metrics.
//!
//! For a token `h` assigned to codeword `c` with quantization error
//! `ε = ‖h − c‖`, and expert centroids of norm at most one, the softmax mass
//! that the codeword's shortlist captures at `h` is at least
//! `exp(−2ε) · ρ_M(c)`, where `ρ_M(c)` is the mass the same shortlist
//! captures at the codeword itself. [`check_bound`] evaluates both sides.

use crate::codebook::CodebookState;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, Matrix, TokenBatch};
use crate::router::{map_indices, ExpertBank, RoutingResult, ShortlistCache};

/// Absolute slack allowed when comparing against the lower bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Full softmax over all `E` expert logits.
pub fn routing_distribution(h: &[f64], bank: &ExpertBank) -> Result<Vec<f64>> {
    if h.len() != bank.dim() {
        return Err(Error::input(format!("token dimension {} != expert dimension {}", h.len(), bank.dim())));
    }
    Ok(distribution(h, &bank.routing_centroids()))
}

fn distribution(h: &[f64], centroids: &Matrix) -> Vec<f64> {
    let mut p: Vec<f64> = centroids.iter_rows().map(|w| dot(h, w)).collect();
    softmax_in_place(&mut p);
    p
}

fn mass(p: &[f64], shortlist: &[usize]) -> f64 {
    shortlist.iter().map(|&e| p[e]).sum::<f64>().min(1.0)
}

/// Routing mass at `h` captured by `shortlist`.
pub fn mass_recall(h: &[f64], shortlist: &[usize], bank: &ExpertBank) -> Result<f64> {
    let e = bank.num_experts();
    if let Some(&bad) = shortlist.iter().find(|&&i| i >= e) {
        return Err(Error::input(format!("shortlist index {bad} out of range for {e} experts")));
    }
    if shortlist.is_empty() {
        return Ok(0.0);
    }
    Ok(mass(&routing_distribution(h, bank)?, shortlist))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    /// Mass captured at the token.
    pub mass_recall: f64,
    /// `‖h − c(h)‖`.
    pub eps: f64,
    /// Mass captured at the codeword.
    pub rho_m: f64,
    pub lower_bound: f64,
    pub holds: bool,
    pub margin: f64,
}

impl BoundReport {
    fn new(mass_recall: f64, eps: f64, rho_m: f64) -> Self {
        let lower_bound = (-2.0 * eps).exp() * rho_m;
        let margin = mass_recall - lower_bound;
        Self { mass_recall, eps, rho_m, lower_bound, holds: margin >= -BOUND_TOLERANCE, margin }
    }
}

fn bound_preconditions(cb: &CodebookState, cache: &ShortlistCache, bank: &ExpertBank) -> Result<()> {
    if !bank.normalize_centroids {
        return Err(Error::Precondition(
            "expert centroids are not projected to the unit sphere; the bound needs ||w_e|| <= 1".into(),
        ));
    }
    if !cache.is_valid() {
        return Err(Error::Precondition("shortlist cache is stale".into()));
    }
    if cache.noise_sigma() != 0.0 {
        return Err(Error::Precondition(format!(
            "shortlists were selected with jitter sigma {}; the bound concerns the noise-free index",
            cache.noise_sigma()
        )));
    }
    if cache.num_codes() != cb.num_codes() {
        return Err(Error::input("cache and codebook disagree on the number of codewords"));
    }
    if cb.dim() != bank.dim() {
        return Err(Error::input("codebook and expert bank dimensions differ"));
    }
    Ok(())
}

fn bound_for(h: &[f64], cb: &CodebookState, cache: &ShortlistCache, centroids: &Matrix) -> BoundReport {
    let g = cb.assign_one(h);
    let c = cb.codeword(g);
    let list = cache.list(g);
    let eps = h.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let at_token = mass(&distribution(h, centroids), list);
    let at_code = mass(&distribution(c, centroids), list);
    BoundReport::new(at_token, eps, at_code)
}

/// Evaluates both sides of the routing-mass bound for one token.
pub fn check_bound(h: &[f64], cb: &CodebookState, cache: &ShortlistCache, bank: &ExpertBank) -> Result<BoundReport> {
    bound_preconditions(cb, cache, bank)?;
    if h.len() != bank.dim() {
        return Err(Error::input("token dimension does not match the expert bank"));
    }
    Ok(bound_for(h, cb, cache, &bank.routing_centroids()))
}

/// [`check_bound`] over a batch, normalizing the centroids once.
pub fn check_bound_batch(tokens: &TokenBatch, cb: &CodebookState, cache: &ShortlistCache, bank: &ExpertBank) -> Result<Vec<BoundReport>> {
    bound_preconditions(cb, cache, bank)?;
    if tokens.cols() != bank.dim() {
        return Err(Error::input("token dimension does not match the expert bank"));
    }
    let w = bank.routing_centroids();
    map_indices(tokens.rows(), |s| Ok(bound_for(tokens.row(s), cb, cache, &w)))
}

/// Mean `|T_approx ∩ T_exact| / K` over tokens.
pub fn overlap_fraction(approx: &RoutingResult, exact: &RoutingResult) -> Result<f64> {
    if approx.num_tokens() != exact.num_tokens() || approx.k() != exact.k() {
        return Err(Error::input(format!(
            "routing shapes differ: {}x{} vs {}x{}",
            approx.num_tokens(),
            approx.k(),
            exact.num_tokens(),
            exact.k()
        )));
    }
    let s_count = approx.num_tokens();
    if s_count == 0 {
        return Err(Error::input("overlap of empty routing results"));
    }
    let k = approx.k() as f64;
    let total: f64 = (0..s_count)
        .map(|s| {
            let ex = exact.topk_indices(s);
            approx.topk_indices(s).iter().filter(|e| ex.contains(e)).count() as f64 / k
        })
        .sum();
    Ok(total / s_count as f64)
}

/// Per-expert dispatch counts accumulated over an evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UsageStats {
    pub counts: Vec<u64>,
}

impl UsageStats {
    pub fn new(num_experts: usize) -> Self {
        Self { counts: vec![0; num_experts] }
    }

    pub fn from_routing(r: &RoutingResult) -> Self {
        Self { counts: r.usage_counts().to_vec() }
    }

    pub fn add(&mut self, r: &RoutingResult) {
        if self.counts.len() < r.num_experts() {
            self.counts.resize(r.num_experts(), 0);
        }
        for (c, &u) in self.counts.iter_mut().zip(r.usage_counts()) {
            *c += u;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Entropy of the empirical expert-usage distribution, in nats.
pub fn usage_entropy(stats: &UsageStats) -> Result<f64> {
    let total = stats.total();
    if total == 0 {
        return Err(Error::input("usage entropy of all-zero counts"));
    }
    let total = total as f64;
    Ok(-stats
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Fraction of experts that received no token.
pub fn dead_expert_fraction(stats: &UsageStats) -> f64 {
    if stats.counts.is_empty() {
        return 0.0;
    }
    stats.counts.iter().filter(|&&c| c == 0).count() as f64 / stats.counts.len() as f64
}
