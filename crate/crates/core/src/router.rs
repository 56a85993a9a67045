//! Two-stage inverted-index router.
//!
//! A token is first assigned to its nearest codeword (coarse stage) and is
//! then scored exactly against the experts on that codeword's cached
//! shortlist (fine stage). Shortlists hold the `M` experts with the largest
//! inner product against each codeword and are rebuilt lazily after the
//! cache is invalidated, typically once per optimizer step.

use crate::codebook::CodebookState;
use crate::error::{Error, Result};
use crate::numerics::{self, dot, noisy_topk, Matrix, RngStream, TokenBatch};

/// Stream used for shortlist noise; children are indexed by codeword.
pub const SHORTLIST_NOISE_SITE: u64 = 0;
/// Stream used for fine-scoring noise; children are indexed by token.
pub const FINE_NOISE_SITE: u64 = 1;

/// Expert parameters: routing centroids and rank-one expert FFNs
/// `FFN_e(h) = v_e · relu(⟨u_e, h⟩)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    /// Routing centroids `w_e`, one row per expert. Stored raw.
    pub centroids: Matrix,
    /// Expert input projections `u_e`.
    pub ffn_in: Matrix,
    /// Expert output vectors `v_e`.
    pub ffn_out: Matrix,
    /// Project centroids onto the unit sphere before scoring.
    pub normalize_centroids: bool,
}

impl ExpertBank {
    pub fn new(centroids: Matrix, ffn_in: Matrix, ffn_out: Matrix, normalize_centroids: bool) -> Result<Self> {
        let bank = Self { centroids, ffn_in, ffn_out, normalize_centroids };
        bank.validate()?;
        Ok(bank)
    }

    /// Gaussian initialization: centroids `N(0, 1/d)`, FFN weights
    /// `N(0, 1/d)`.
    pub fn random(num_experts: usize, dim: usize, normalize_centroids: bool, rng: &mut RngStream) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            centroids: Matrix::random_normal(num_experts, dim, std, rng),
            ffn_in: Matrix::random_normal(num_experts, dim, std, rng),
            ffn_out: Matrix::random_normal(num_experts, dim, std, rng),
            normalize_centroids,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, d) = (self.centroids.rows(), self.centroids.cols());
        if e == 0 {
            return Err(Error::config("expert bank needs at least one expert"));
        }
        for (name, m) in [("ffn_in", &self.ffn_in), ("ffn_out", &self.ffn_out)] {
            if m.rows() != e || m.cols() != d {
                return Err(Error::input(format!("{name} has shape {}x{}, expected {e}x{d}", m.rows(), m.cols())));
            }
        }
        if !(self.centroids.is_finite() && self.ffn_in.is_finite() && self.ffn_out.is_finite()) {
            return Err(Error::input("expert bank contains non-finite parameters"));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Centroids as used for scoring (`w̃_e`).
    pub fn routing_centroids(&self) -> Matrix {
        if !self.normalize_centroids {
            return self.centroids.clone();
        }
        let mut out = self.centroids.clone();
        for e in 0..out.rows() {
            let p = numerics::sphere(self.centroids.row(e));
            out.row_mut(e).copy_from_slice(&p);
        }
        out
    }

    /// Rank-one FFN output of expert `e` for token `h`.
    pub fn expert_output(&self, e: usize, h: &[f64]) -> Vec<f64> {
        let act = dot(self.ffn_in.row(e), h).max(0.0);
        self.ffn_out.row(e).iter().map(|v| act * v).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterConfig {
    pub num_codes: usize,
    pub num_experts: usize,
    pub shortlist_size: usize,
    pub top_k: usize,
    pub jitter_sigma: f64,
    pub balance_weight: f64,
    pub training_mode: bool,
}

impl RouterConfig {
    pub const DEFAULT_JITTER: f64 = 0.01;
    pub const DEFAULT_BALANCE_WEIGHT: f64 = 5e-5;

    pub fn new(num_codes: usize, num_experts: usize, shortlist_size: usize, top_k: usize) -> Self {
        Self {
            num_codes,
            num_experts,
            shortlist_size,
            top_k,
            jitter_sigma: Self::DEFAULT_JITTER,
            balance_weight: Self::DEFAULT_BALANCE_WEIGHT,
            training_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { num_codes: g, num_experts: e, shortlist_size: m, top_k: k, .. } = *self;
        if g == 0 || e == 0 || k == 0 {
            return Err(Error::config("G, E and K must all be at least 1"));
        }
        if m > e {
            return Err(Error::config(format!("shortlist size M <= E violated (M={m}, E={e})")));
        }
        if k > m {
            return Err(Error::config(format!("candidate pool l*M >= K violated (l=1, M={m}, K={k})")));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config("jitter sigma must be finite and >= 0"));
        }
        if !(self.balance_weight >= 0.0 && self.balance_weight.is_finite()) {
            return Err(Error::config("balance weight must be finite and >= 0"));
        }
        Ok(())
    }

    /// Noise level actually applied: jitter is a training-time device.
    pub fn effective_sigma(&self) -> f64 {
        if self.training_mode {
            self.jitter_sigma
        } else {
            0.0
        }
    }
}

/// Codeword → expert posting lists.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortlistCache {
    lists: Vec<usize>,
    num_codes: usize,
    width: usize,
    valid: bool,
    built_at_step: u64,
    generation: u64,
    noise_sigma: f64,
    rebuilds: u64,
}

impl Default for ShortlistCache {
    fn default() -> Self {
        Self::empty()
    }
}

impl ShortlistCache {
    pub fn empty() -> Self {
        Self {
            lists: Vec::new(),
            num_codes: 0,
            width: 0,
            valid: false,
            built_at_step: 0,
            generation: 0,
            noise_sigma: 0.0,
            rebuilds: 0,
        }
    }

    /// Rebuilds a valid cache from stored lists (each list of width `width`).
    pub fn from_lists(lists: Vec<usize>, num_codes: usize, width: usize, num_experts: usize, noise_sigma: f64) -> Result<Self> {
        if lists.len() != num_codes * width {
            return Err(Error::input("shortlist table has the wrong size"));
        }
        if let Some(&bad) = lists.iter().find(|&&e| e >= num_experts) {
            return Err(Error::input(format!("shortlist entry {bad} out of range for {num_experts} experts")));
        }
        let mut lists = lists;
        for g in 0..num_codes {
            let row = &mut lists[g * width..(g + 1) * width];
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::input(format!("shortlist {g} repeats an expert")));
            }
        }
        Ok(Self { lists, num_codes, width, valid: true, noise_sigma, ..Self::empty() })
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Optimizer-step counter value at the last rebuild.
    pub fn built_at_step(&self) -> u64 {
        self.built_at_step
    }

    /// Number of times a valid cache was invalidated.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Noise level the lists were selected with.
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Total rebuilds performed through [`ShortlistCache::ensure`].
    pub fn rebuild_count(&self) -> u64 {
        self.rebuilds
    }

    /// Expert indices of codeword `g`, ascending.
    pub fn list(&self, g: usize) -> &[usize] {
        &self.lists[g * self.width..(g + 1) * self.width]
    }

    pub fn lists(&self) -> &[usize] {
        &self.lists
    }

    /// Marks the lists stale. Contents stay readable for inspection.
    pub fn invalidate(&mut self) {
        if self.valid {
            self.valid = false;
            self.generation += 1;
        }
    }

    /// Rebuilds the lists if the cache is stale. Returns whether a rebuild
    /// happened.
    pub fn ensure(&mut self, cb: &CodebookState, bank: &ExpertBank, cfg: &RouterConfig, rng: &RngStream) -> Result<bool> {
        if self.valid && self.num_codes == cb.num_codes() && self.width == cfg.shortlist_size {
            return Ok(false);
        }
        let fresh = refresh_shortlists(cb, bank, cfg, rng)?;
        self.lists = fresh.lists;
        self.num_codes = fresh.num_codes;
        self.width = fresh.width;
        self.noise_sigma = fresh.noise_sigma;
        self.valid = true;
        self.built_at_step = self.generation;
        self.rebuilds += 1;
        Ok(true)
    }
}

/// Invalidates a cache, returning it.
pub fn invalidate_cache(mut cache: ShortlistCache) -> ShortlistCache {
    cache.invalidate();
    cache
}

/// Scans all experts for every codeword and keeps the top `M`.
///
/// Noise for codeword `g` comes from `rng.fork(g)`.
pub fn refresh_shortlists(cb: &CodebookState, bank: &ExpertBank, cfg: &RouterConfig, rng: &RngStream) -> Result<ShortlistCache> {
    cfg.validate()?;
    check_shapes(cb, bank, cfg)?;
    let w = bank.routing_centroids();
    let (g_count, m) = (cb.num_codes(), cfg.shortlist_size);
    let sigma = cfg.effective_sigma();
    let lists = map_indices(g_count, |g| {
        let c = cb.codeword(g);
        let scores: Vec<f64> = w.iter_rows().map(|we| dot(c, we)).collect();
        let mut stream = rng.fork(g as u64);
        let mut top = noisy_topk(&scores, m, sigma, &mut stream).map(|t| t.indices)?;
        top.sort_unstable();
        Ok(top)
    })?;
    Ok(ShortlistCache {
        lists: lists.concat(),
        num_codes: g_count,
        width: m,
        valid: true,
        noise_sigma: sigma,
        ..ShortlistCache::empty()
    })
}

fn check_shapes(cb: &CodebookState, bank: &ExpertBank, cfg: &RouterConfig) -> Result<()> {
    bank.validate()?;
    if cb.dim() != bank.dim() {
        return Err(Error::input(format!("codebook dimension {} != expert dimension {}", cb.dim(), bank.dim())));
    }
    if cfg.num_experts != bank.num_experts() {
        return Err(Error::config(format!(
            "config has E={} but the bank holds {} experts",
            cfg.num_experts,
            bank.num_experts()
        )));
    }
    if cfg.num_codes != cb.num_codes() {
        return Err(Error::config(format!(
            "config has G={} but the codebook holds {} codewords",
            cfg.num_codes,
            cb.num_codes()
        )));
    }
    Ok(())
}

/// Per-token routing decisions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    num_tokens: usize,
    k: usize,
    width: usize,
    topk_indices: Vec<usize>,
    topk_scores: Vec<f64>,
    topk_weights: Vec<f64>,
    candidates: Vec<usize>,
    candidate_scores: Vec<f64>,
    groups: Vec<usize>,
    usage_counts: Vec<u64>,
}

/// Routing decision for one token.
#[derive(Clone, Debug)]
pub(crate) struct TokenRoute {
    pub group: usize,
    pub candidates: Vec<usize>,
    pub candidate_scores: Vec<f64>,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Exact scoring of `h` against `candidates`, then (jittered) top-k and
/// softmax over the selected noise-free logits.
pub(crate) fn score_candidates(
    h: &[f64],
    group: usize,
    candidates: Vec<usize>,
    centroids: &Matrix,
    k: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<TokenRoute> {
    let candidate_scores: Vec<f64> = candidates.iter().map(|&e| dot(h, centroids.row(e))).collect();
    let top = noisy_topk(&candidate_scores, k, sigma, rng)?;
    let indices = top.indices.iter().map(|&i| candidates[i]).collect();
    let mut weights = top.values.clone();
    numerics::softmax_in_place(&mut weights);
    Ok(TokenRoute { group, candidates, candidate_scores, indices, scores: top.values, weights })
}

impl RoutingResult {
    pub(crate) fn from_routes(routes: Vec<TokenRoute>, num_experts: usize, k: usize, width: usize) -> Self {
        let s = routes.len();
        let mut out = Self {
            num_tokens: s,
            k,
            width,
            topk_indices: Vec::with_capacity(s * k),
            topk_scores: Vec::with_capacity(s * k),
            topk_weights: Vec::with_capacity(s * k),
            candidates: Vec::with_capacity(s * width),
            candidate_scores: Vec::with_capacity(s * width),
            groups: Vec::with_capacity(s),
            usage_counts: vec![0; num_experts],
        };
        for r in routes {
            for &e in &r.indices {
                out.usage_counts[e] += 1;
            }
            out.groups.push(r.group);
            out.topk_indices.extend(r.indices);
            out.topk_scores.extend(r.scores);
            out.topk_weights.extend(r.weights);
            out.candidates.extend(r.candidates);
            out.candidate_scores.extend(r.candidate_scores);
        }
        out
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.usage_counts.len()
    }

    /// Number of candidates scored exactly per token.
    pub fn candidate_width(&self) -> usize {
        self.width
    }

    pub fn topk_indices(&self, s: usize) -> &[usize] {
        &self.topk_indices[s * self.k..(s + 1) * self.k]
    }

    /// Noise-free logits of the selected experts.
    pub fn topk_scores(&self, s: usize) -> &[f64] {
        &self.topk_scores[s * self.k..(s + 1) * self.k]
    }

    pub fn topk_weights(&self, s: usize) -> &[f64] {
        &self.topk_weights[s * self.k..(s + 1) * self.k]
    }

    /// Experts scored in the fine stage for token `s`.
    pub fn candidates(&self, s: usize) -> &[usize] {
        &self.candidates[s * self.width..(s + 1) * self.width]
    }

    /// Fine-stage logits aligned with [`RoutingResult::candidates`].
    pub fn shortlist_scores(&self, s: usize) -> &[f64] {
        &self.candidate_scores[s * self.width..(s + 1) * self.width]
    }

    /// Coarse group per token: codeword for the inverted-index router,
    /// first selected cluster for the hierarchical router, 0 for exact.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn all_topk_indices(&self) -> &[usize] {
        &self.topk_indices
    }
}

/// Applies `f` to `0..n`, in parallel when the `parallel` feature is on.
/// Output order always follows the index.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Routes a batch through the inverted index.
///
/// Rebuilds the cache first when it is stale. Shortlist noise uses
/// `rng.fork(SHORTLIST_NOISE_SITE)`, fine-stage noise for token `s` uses
/// `rng.fork(FINE_NOISE_SITE).fork(s)`, so results do not depend on how
/// tokens are scheduled across threads.
pub fn air_route(
    tokens: &TokenBatch,
    bank: &ExpertBank,
    cb: &CodebookState,
    cache: &mut ShortlistCache,
    cfg: &RouterConfig,
    rng: &RngStream,
) -> Result<RoutingResult> {
    cfg.validate()?;
    check_shapes(cb, bank, cfg)?;
    if tokens.cols() != bank.dim() {
        return Err(Error::input(format!("token dimension {} != expert dimension {}", tokens.cols(), bank.dim())));
    }
    cache.ensure(cb, bank, cfg, &rng.fork(SHORTLIST_NOISE_SITE))?;
    let cache: &ShortlistCache = cache;
    let w = bank.routing_centroids();
    let sigma = cfg.effective_sigma();
    let fine = rng.fork(FINE_NOISE_SITE);
    let routes = map_indices(tokens.rows(), |s| {
        let h = tokens.row(s);
        let g = cb.assign_one(h);
        score_candidates(h, g, cache.list(g).to_vec(), &w, cfg.top_k, sigma, &mut fine.fork(s as u64))
    })?;
    Ok(RoutingResult::from_routes(routes, bank.num_experts(), cfg.top_k, cfg.shortlist_size))
}

/// Mixture output `Σ_j γ_j · FFN_{e_j}(h)` per token.
pub fn moe_forward(routing: &RoutingResult, bank: &ExpertBank, tokens: &TokenBatch) -> Result<TokenBatch> {
    if routing.num_tokens() != tokens.rows() {
        return Err(Error::input("routing and token batch sizes differ"));
    }
    if tokens.cols() != bank.dim() {
        return Err(Error::input("token dimension does not match the expert bank"));
    }
    let e_count = bank.num_experts();
    let mut out = Matrix::zeros(tokens.rows(), tokens.cols());
    for s in 0..tokens.rows() {
        let h = tokens.row(s);
        for (&e, &w) in routing.topk_indices(s).iter().zip(routing.topk_weights(s)) {
            if e >= e_count {
                return Err(Error::Internal(format!("routed to expert {e} but only {e_count} exist")));
            }
            let act = dot(bank.ffn_in.row(e), h).max(0.0);
            numerics::axpy(w * act, bank.ffn_out.row(e), out.row_mut(s));
        }
    }
    Ok(out)
}

/// Dispatch fractions `f_e = count_e / (S·K)`.
pub fn dispatch_fractions(routing: &RoutingResult) -> Vec<f64> {
    let total = (routing.num_tokens() * routing.k()).max(1) as f64;
    routing.usage_counts().iter().map(|&c| c as f64 / total).collect()
}

/// Mean shortlist-softmax probability `p_e` per expert.
pub fn mean_shortlist_probabilities(routing: &RoutingResult) -> Vec<f64> {
    let mut p = vec![0.0; routing.num_experts()];
    let s_count = routing.num_tokens();
    if s_count == 0 {
        return p;
    }
    for s in 0..s_count {
        let mut probs = routing.shortlist_scores(s).to_vec();
        numerics::softmax_in_place(&mut probs);
        for (&e, &q) in routing.candidates(s).iter().zip(&probs) {
            p[e] += q;
        }
    }
    for v in &mut p {
        *v /= s_count as f64;
    }
    p
}

/// Switch-style balancing loss `λ · E · Σ_e f_e · p_e`.
pub fn load_balance_loss(routing: &RoutingResult, cfg: &RouterConfig) -> f64 {
    if cfg.balance_weight == 0.0 || routing.num_tokens() == 0 {
        return 0.0;
    }
    let f = dispatch_fractions(routing);
    let p = mean_shortlist_probabilities(routing);
    let e = routing.num_experts() as f64;
    cfg.balance_weight * e * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookParams;

    fn setup(e: usize, d: usize, g: usize, seed: u64) -> (ExpertBank, CodebookState, Matrix) {
        let mut rng = RngStream::new(seed, 0);
        let bank = ExpertBank::random(e, d, true, &mut rng);
        let tokens = Matrix::random_normal(32, d, 1.0, &mut rng);
        let cb = CodebookState::init(&tokens, g, CodebookParams::default(), &mut rng).unwrap();
        (bank, cb, tokens)
    }

    #[test]
    fn full_shortlists_are_permutations() {
        let (bank, cb, _) = setup(10, 4, 3, 1);
        let cfg = RouterConfig::new(3, 10, 10, 2);
        let cache = refresh_shortlists(&cb, &bank, &cfg, &RngStream::new(0, 0)).unwrap();
        for g in 0..3 {
            assert_eq!(cache.list(g), (0..10).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn single_codeword_shortlist_matches_scan() {
        let (bank, cb, _) = setup(20, 5, 1, 2);
        let cfg = RouterConfig::new(1, 20, 6, 2);
        let cache = refresh_shortlists(&cb, &bank, &cfg, &RngStream::new(0, 0)).unwrap();
        let w = bank.routing_centroids();
        let mut scored: Vec<(f64, usize)> = (0..20).map(|e| (dot(cb.codeword(0), w.row(e)), e)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected: Vec<usize> = scored[..6].iter().map(|p| p.1).collect();
        expected.sort_unstable();
        assert_eq!(cache.list(0), expected.as_slice());
    }

    #[test]
    fn duplicate_top_experts_both_kept() {
        let (mut bank, cb, _) = setup(8, 3, 1, 3);
        // make experts 2 and 5 identical and aligned with the codeword
        let c = cb.codeword(0).to_vec();
        bank.centroids.row_mut(2).copy_from_slice(&c);
        bank.centroids.row_mut(5).copy_from_slice(&c);
        let cfg = RouterConfig::new(1, 8, 2, 1);
        let cache = refresh_shortlists(&cb, &bank, &cfg, &RngStream::new(0, 0)).unwrap();
        assert_eq!(cache.list(0), &[2, 5]);
    }

    #[test]
    fn shortlist_larger_than_experts_is_rejected() {
        let (bank, cb, _) = setup(4, 3, 2, 4);
        let cfg = RouterConfig::new(2, 4, 5, 1);
        assert!(matches!(
            refresh_shortlists(&cb, &bank, &cfg, &RngStream::new(0, 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn invalidation_is_idempotent_and_triggers_one_rebuild() {
        let (bank, cb, tokens) = setup(16, 4, 2, 5);
        let cfg = RouterConfig::new(2, 16, 8, 2);
        let rng = RngStream::new(1, 1);
        let mut cache = ShortlistCache::empty();
        assert!(!cache.is_valid());
        air_route(&tokens, &bank, &cb, &mut cache, &cfg, &rng).unwrap();
        assert!(cache.is_valid());
        assert_eq!(cache.rebuild_count(), 1);
        let kept = cache.lists().to_vec();

        cache.invalidate();
        cache.invalidate();
        assert!(!cache.is_valid());
        assert_eq!(cache.lists(), kept.as_slice());
        assert!(!invalidate_cache(cache.clone()).is_valid());

        air_route(&tokens, &bank, &cb, &mut cache, &cfg, &rng).unwrap();
        air_route(&tokens, &bank, &cb, &mut cache, &cfg, &rng).unwrap();
        assert_eq!(cache.rebuild_count(), 2);
        assert_eq!(cache.built_at_step(), 1);
    }

    #[test]
    fn single_expert_weight_is_one() {
        let (bank, cb, tokens) = setup(12, 4, 3, 6);
        let cfg = RouterConfig::new(3, 12, 4, 1);
        let r = air_route(&tokens, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(0, 0)).unwrap();
        for s in 0..r.num_tokens() {
            assert_eq!(r.topk_weights(s), &[1.0]);
        }
    }

    #[test]
    fn selection_stays_inside_shortlist_and_weights_normalize() {
        let (bank, cb, tokens) = setup(64, 8, 4, 7);
        let mut cfg = RouterConfig::new(4, 64, 16, 4);
        cfg.training_mode = true;
        cfg.jitter_sigma = 0.3;
        let mut cache = ShortlistCache::empty();
        let r = air_route(&tokens, &bank, &cb, &mut cache, &cfg, &RngStream::new(2, 2)).unwrap();
        let total: u64 = r.usage_counts().iter().sum();
        assert_eq!(total as usize, tokens.rows() * 4);
        for s in 0..r.num_tokens() {
            let list = cache.list(r.groups()[s]);
            assert!(r.topk_indices(s).iter().all(|e| list.contains(e)));
            let sum: f64 = r.topk_weights(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            assert!(r.topk_weights(s).iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn returned_scores_are_noise_free_inner_products() {
        let (bank, cb, tokens) = setup(32, 6, 2, 8);
        let mut cfg = RouterConfig::new(2, 32, 12, 3);
        cfg.training_mode = true;
        cfg.jitter_sigma = 1.0;
        let r = air_route(&tokens, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(3, 3)).unwrap();
        let w = bank.routing_centroids();
        for s in 0..r.num_tokens() {
            for (&e, &z) in r.topk_indices(s).iter().zip(r.topk_scores(s)) {
                assert_eq!(z, dot(tokens.row(s), w.row(e)));
            }
            let mut expected = r.topk_scores(s).to_vec();
            numerics::softmax_in_place(&mut expected);
            assert_eq!(r.topk_weights(s), expected.as_slice());
        }
    }

    #[test]
    fn eval_mode_ignores_jitter() {
        let (bank, cb, tokens) = setup(32, 6, 2, 9);
        let mut cfg = RouterConfig::new(2, 32, 12, 3);
        cfg.jitter_sigma = 5.0;
        let a = air_route(&tokens, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(1, 0)).unwrap();
        cfg.jitter_sigma = 0.0;
        let b = air_route(&tokens, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn routing_rejects_mismatched_shapes() {
        let (bank, cb, _) = setup(8, 4, 2, 10);
        let cfg = RouterConfig::new(2, 8, 4, 2);
        let bad = Matrix::zeros(3, 5);
        assert!(air_route(&bad, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(0, 0)).is_err());
        let wrong_e = RouterConfig::new(2, 9, 4, 2);
        let ok = Matrix::zeros(3, 4);
        assert!(air_route(&ok, &bank, &cb, &mut ShortlistCache::empty(), &wrong_e, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn zero_experts_give_zero_output() {
        let (mut bank, cb, tokens) = setup(8, 4, 2, 11);
        bank.ffn_out = Matrix::zeros(8, 4);
        let cfg = RouterConfig::new(2, 8, 4, 2);
        let r = air_route(&tokens, &bank, &cb, &mut ShortlistCache::empty(), &cfg, &RngStream::new(0, 0)).unwrap();
        let out = moe_forward(&r, &bank, &tokens).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn moe_forward_hand_instance() {
        // E=4, K=2, d=3; token routed to experts 1 and 3
        let tokens = Matrix::from_rows(&[vec![1.0, -1.0, 2.0]]).unwrap();
        let bank = ExpertBank::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.0, 0.8]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.5], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0], vec![-1.0, 0.0, 1.0]]).unwrap(),
            true,
        )
        .unwrap();
        let route = score_candidates(
            tokens.row(0),
            0,
            vec![0, 1, 2, 3],
            &bank.routing_centroids(),
            2,
            0.0,
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        let r = RoutingResult::from_routes(vec![route], 4, 2, 4);
        // logits: e0 = 1, e1 = 2, e2 = -1, e3 = 0.6 + 1.6 = 2.2 -> top-2 = {3, 1}
        assert_eq!(r.topk_indices(0), &[3, 1]);
        let (z3, z1) = (2.2f64, 2.0f64);
        let g1 = z1.exp() / (z3.exp() + z1.exp());
        // relu(<u1,h>) = relu(1) = 1; relu(<u3,h>) = relu(0) = 0
        let expected = [g1 * 1.0, g1 * 2.0, g1 * 3.0];
        let out = moe_forward(&r, &bank, &tokens).unwrap();
        for (a, b) in out.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_loss_closed_forms() {
        let mut cfg = RouterConfig::new(1, 4, 4, 1);
        cfg.balance_weight = 0.0;
        let mk = |scores: Vec<f64>, chosen: usize| TokenRoute {
            group: 0,
            candidates: vec![0, 1, 2, 3],
            candidate_scores: scores,
            indices: vec![chosen],
            scores: vec![0.0],
            weights: vec![1.0],
        };
        let uniform = RoutingResult::from_routes((0..4).map(|e| mk(vec![0.0; 4], e)).collect(), 4, 1, 4);
        assert_eq!(load_balance_loss(&uniform, &cfg), 0.0);

        cfg.balance_weight = 0.1;
        assert!((load_balance_loss(&uniform, &cfg) - 0.1).abs() < 1e-12);

        // everything on expert 2, with the shortlist softmax concentrated on it
        let spike = vec![-1e3, -1e3, 0.0, -1e3];
        let concentrated = RoutingResult::from_routes((0..4).map(|_| mk(spike.clone(), 2)).collect(), 4, 1, 4);
        assert!((load_balance_loss(&concentrated, &cfg) - 0.4).abs() < 1e-12);
    }
}
