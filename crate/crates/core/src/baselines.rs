//! Reference routers and the cross-method comparison rules.
//!
//! [`exact_route`] scores every expert and is the ground truth for overlap
//! and mass-recall measurements. [`HierarchicalRouter`] restricts each token
//! to the experts of a few fixed, contiguous clusters.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{dot, noisy_topk, Matrix, RngStream, TokenBatch};
use crate::router::{map_indices, score_candidates, ExpertBank, RouterConfig, RoutingResult, FINE_NOISE_SITE};

/// Stream used for cluster-selection noise; children are indexed by token.
pub const CLUSTER_NOISE_SITE: u64 = 2;

/// Exact top-`k` over all experts.
pub fn exact_route(tokens: &TokenBatch, bank: &ExpertBank, k: usize) -> Result<RoutingResult> {
    bank.validate()?;
    let e = bank.num_experts();
    if k == 0 || k > e {
        return Err(Error::config(format!("exact routing needs 1 <= K <= E (K={k}, E={e})")));
    }
    if tokens.cols() != bank.dim() {
        return Err(Error::input(format!("token dimension {} != expert dimension {}", tokens.cols(), bank.dim())));
    }
    let w = bank.routing_centroids();
    let unused = RngStream::new(0, 0);
    let routes = map_indices(tokens.rows(), |s| {
        score_candidates(tokens.row(s), 0, (0..e).collect(), &w, k, 0.0, &mut unused.clone())
    })?;
    Ok(RoutingResult::from_routes(routes, e, k, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HierarchicalConfig {
    pub num_clusters: usize,
    pub selected_clusters: usize,
    pub top_k: usize,
}

impl HierarchicalConfig {
    pub fn new(num_clusters: usize, selected_clusters: usize, top_k: usize) -> Self {
        Self { num_clusters, selected_clusters, top_k }
    }

    /// Feasibility diagnostics for a bank of `num_experts` experts.
    pub fn diagnostics(&self, num_experts: usize) -> Vec<String> {
        let Self { num_clusters: g, selected_clusters: l, top_k: k } = *self;
        let e = num_experts;
        let mut out = Vec::new();
        if g == 0 || l == 0 || k == 0 {
            out.push(format!("hierarchical: G, l and K must be >= 1 (G={g}, l={l}, K={k})"));
            return out;
        }
        if !e.is_multiple_of(g) {
            out.push(format!("hierarchical: E mod G = 0 violated ({e} mod {g} = {})", e % g));
        }
        if l > g {
            out.push(format!("hierarchical: l <= G violated (l={l}, G={g})"));
        }
        if l * (e / g) < k {
            out.push(format!("hierarchical: l*(E/G) >= K violated ({l}*{} = {} < {k})", e / g, l * (e / g)));
        }
        out
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        match self.diagnostics(num_experts).into_iter().next() {
            Some(msg) => Err(Error::InvalidConfig(msg)),
            None => Ok(()),
        }
    }

    pub fn block_size(&self, num_experts: usize) -> usize {
        num_experts / self.num_clusters
    }
}

/// Two-level router over contiguous expert blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalRouter {
    pub cfg: HierarchicalConfig,
    /// One scoring vector per cluster.
    pub cluster_centroids: Matrix,
}

impl HierarchicalRouter {
    /// Cluster centroids start as the block means of the routing centroids.
    pub fn from_bank(bank: &ExpertBank, cfg: HierarchicalConfig) -> Result<Self> {
        bank.validate()?;
        cfg.validate(bank.num_experts())?;
        let w = bank.routing_centroids();
        let block = cfg.block_size(bank.num_experts());
        let mut centroids = Matrix::zeros(cfg.num_clusters, bank.dim());
        for c in 0..cfg.num_clusters {
            let row = centroids.row_mut(c);
            for e in c * block..(c + 1) * block {
                crate::numerics::axpy(1.0 / block as f64, w.row(e), row);
            }
        }
        Ok(Self { cfg, cluster_centroids: centroids })
    }

    /// Cluster noise for token `s` comes from
    /// `rng.fork(CLUSTER_NOISE_SITE).fork(s)`, expert noise from
    /// `rng.fork(FINE_NOISE_SITE).fork(s)`.
    pub fn route(&self, tokens: &TokenBatch, bank: &ExpertBank, sigma: f64, rng: &RngStream) -> Result<RoutingResult> {
        bank.validate()?;
        let e = bank.num_experts();
        self.cfg.validate(e)?;
        if self.cluster_centroids.rows() != self.cfg.num_clusters || self.cluster_centroids.cols() != bank.dim() {
            return Err(Error::input("cluster centroids do not match the configuration"));
        }
        if tokens.cols() != bank.dim() {
            return Err(Error::input(format!("token dimension {} != expert dimension {}", tokens.cols(), bank.dim())));
        }
        let block = self.cfg.block_size(e);
        let width = self.cfg.selected_clusters * block;
        let w = bank.routing_centroids();
        let cluster_rng = rng.fork(CLUSTER_NOISE_SITE);
        let fine_rng = rng.fork(FINE_NOISE_SITE);
        let routes = map_indices(tokens.rows(), |s| {
            let h = tokens.row(s);
            let cluster_scores: Vec<f64> = self.cluster_centroids.iter_rows().map(|c| dot(h, c)).collect();
            let chosen = noisy_topk(&cluster_scores, self.cfg.selected_clusters, sigma, &mut cluster_rng.fork(s as u64))?;
            let mut blocks = chosen.indices.clone();
            blocks.sort_unstable();
            let candidates: Vec<usize> = blocks.iter().flat_map(|&c| c * block..(c + 1) * block).collect();
            score_candidates(h, chosen.indices[0], candidates, &w, self.cfg.top_k, sigma, &mut fine_rng.fork(s as u64))
        })?;
        Ok(RoutingResult::from_routes(routes, e, self.cfg.top_k, width))
    }
}

/// Hierarchical routing with block-mean cluster centroids.
pub fn hierarchical_route(
    tokens: &TokenBatch,
    bank: &ExpertBank,
    hcfg: &HierarchicalConfig,
    sigma: f64,
    rng: &RngStream,
) -> Result<RoutingResult> {
    HierarchicalRouter::from_bank(bank, *hcfg)?.route(tokens, bank, sigma, rng)
}

/// Top-1 configuration with the same active parameters as a granular one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoarseConfig {
    pub num_experts: usize,
    pub intermediate_dim: usize,
    pub top_k: usize,
}

pub fn derive_coarse_config(num_experts: usize, top_k: usize, intermediate_dim: usize) -> Result<CoarseConfig> {
    if num_experts == 0 || top_k == 0 || intermediate_dim == 0 {
        return Err(Error::config("E, K and the intermediate size must be >= 1"));
    }
    Ok(CoarseConfig {
        num_experts: num_experts.div_ceil(top_k),
        intermediate_dim: intermediate_dim * top_k,
        top_k: 1,
    })
}

/// Outcome of the cross-method comparison rules.
///
/// Feasibility failures of either router are attributed to the candidate
/// pool check, since an infeasible pool cannot be matched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FairnessReport {
    pub equal_active_k: bool,
    pub equal_coarse_structure: bool,
    pub equal_candidate_pool: bool,
    pub violations: Vec<String>,
}

impl FairnessReport {
    pub fn is_fair(&self) -> bool {
        self.equal_active_k && self.equal_coarse_structure && self.equal_candidate_pool
    }

    /// `key=value` lines for embedding in CSV headers.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("fair".to_string(), self.is_fair().to_string()),
            ("equal_active_k".to_string(), self.equal_active_k.to_string()),
            ("equal_coarse_structure".to_string(), self.equal_coarse_structure.to_string()),
            ("equal_candidate_pool".to_string(), self.equal_candidate_pool.to_string()),
        ];
        for (i, v) in self.violations.iter().enumerate() {
            kv.push((format!("violation_{i}"), v.clone()));
        }
        kv
    }
}

impl fmt::Display for FairnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "ok" } else { "FAIL" };
        writeln!(f, "A equal active-K        {}", mark(self.equal_active_k))?;
        writeln!(f, "B equal coarse structure {}", mark(self.equal_coarse_structure))?;
        writeln!(f, "C equal candidate pool   {}", mark(self.equal_candidate_pool))?;
        for v in &self.violations {
            writeln!(f, "  violation: {v}")?;
        }
        Ok(())
    }
}

/// Checks the inverted-index router against the hierarchical baseline. The
/// hierarchical router is assumed to share the same `E`.
pub fn validate_fairness(air: &RouterConfig, hier: &HierarchicalConfig) -> FairnessReport {
    let e = air.num_experts;
    let mut violations = Vec::new();

    let equal_active_k = air.top_k == hier.top_k;
    if !equal_active_k {
        violations.push(format!("A: equal active-K violated (AIR K={}, hierarchical K={})", air.top_k, hier.top_k));
    }
    let equal_coarse_structure = air.num_codes == hier.num_clusters;
    if !equal_coarse_structure {
        violations.push(format!(
            "B: equal coarse structure violated (AIR G={}, hierarchical G={})",
            air.num_codes, hier.num_clusters
        ));
    }

    let mut pool_ok = true;
    let air_pool = air.shortlist_size;
    if air.shortlist_size > e {
        pool_ok = false;
        violations.push(format!("AIR: M <= E violated (M={}, E={e})", air.shortlist_size));
    }
    if air_pool < air.top_k {
        pool_ok = false;
        violations.push(format!("AIR: l*M >= K violated (1*{} = {air_pool} < {})", air.shortlist_size, air.top_k));
    }
    let hier_diag = hier.diagnostics(e);
    if !hier_diag.is_empty() {
        pool_ok = false;
        violations.extend(hier_diag);
    }
    if hier.num_clusters > 0 && e.is_multiple_of(hier.num_clusters) {
        let hier_pool = hier.selected_clusters * (e / hier.num_clusters);
        if air_pool != hier_pool {
            pool_ok = false;
            violations.push(format!(
                "C: equal candidate pool violated (AIR l*M = {air_pool}, hierarchical l*(E/G) = {hier_pool})"
            ));
        }
    }

    FairnessReport { equal_active_k, equal_coarse_structure, equal_candidate_pool: pool_ok, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{CodebookParams, CodebookState};
    use crate::router::{air_route, ShortlistCache};

    fn bank(e: usize, d: usize, seed: u64) -> ExpertBank {
        ExpertBank::random(e, d, true, &mut RngStream::new(seed, 0))
    }

    #[test]
    fn exact_single_expert() {
        let b = bank(1, 3, 0);
        let tokens = Matrix::random_normal(5, 3, 1.0, &mut RngStream::new(1, 0));
        let r = exact_route(&tokens, &b, 1).unwrap();
        for s in 0..5 {
            assert_eq!(r.topk_indices(s), &[0]);
            assert_eq!(r.topk_weights(s), &[1.0]);
        }
        assert!(matches!(exact_route(&tokens, &b, 2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn exact_duplicate_best_ranks_lower_index_first() {
        let mut b = bank(6, 3, 1);
        let h = vec![0.3, -0.2, 0.9];
        b.centroids.row_mut(1).copy_from_slice(&h);
        b.centroids.row_mut(4).copy_from_slice(&h);
        let tokens = Matrix::new(1, 3, h).unwrap();
        let r = exact_route(&tokens, &b, 2).unwrap();
        assert_eq!(r.topk_indices(0), &[1, 4]);
    }

    #[test]
    fn exact_matches_sort_oracle() {
        let b = bank(64, 8, 2);
        let tokens = Matrix::random_normal(40, 8, 1.0, &mut RngStream::new(3, 0));
        let r = exact_route(&tokens, &b, 4).unwrap();
        for s in 0..40 {
            let h = tokens.row(s);
            let mut all: Vec<(f64, usize)> = (0..64)
                .map(|e| {
                    let w = b.centroids.row(e);
                    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (h.iter().zip(w).map(|(a, c)| a * c / n).sum::<f64>(), e)
                })
                .collect();
            all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let expected: Vec<usize> = all[..4].iter().map(|p| p.1).collect();
            assert_eq!(r.topk_indices(s), expected.as_slice());
        }
    }

    #[test]
    fn single_cluster_hierarchy_is_exact() {
        let b = bank(24, 5, 4);
        let tokens = Matrix::random_normal(30, 5, 1.0, &mut RngStream::new(5, 0));
        let h = hierarchical_route(&tokens, &b, &HierarchicalConfig::new(1, 1, 3), 0.0, &RngStream::new(0, 0)).unwrap();
        let x = exact_route(&tokens, &b, 3).unwrap();
        assert_eq!(h.all_topk_indices(), x.all_topk_indices());
        for s in 0..30 {
            assert_eq!(h.topk_weights(s), x.topk_weights(s));
        }
    }

    #[test]
    fn boundary_pool_selects_every_candidate() {
        // l*(E/G) = 2*3 = 6 = K
        let b = bank(12, 4, 6);
        let tokens = Matrix::random_normal(10, 4, 1.0, &mut RngStream::new(7, 0));
        let cfg = HierarchicalConfig::new(4, 2, 6);
        let r = hierarchical_route(&tokens, &b, &cfg, 0.0, &RngStream::new(0, 0)).unwrap();
        for s in 0..10 {
            let mut chosen = r.topk_indices(s).to_vec();
            chosen.sort_unstable();
            assert_eq!(chosen, r.candidates(s));
        }
    }

    #[test]
    fn hierarchical_matches_two_loop_reference() {
        let (e, g, l, k) = (16, 4, 2, 3);
        let b = bank(e, 6, 8);
        let tokens = Matrix::random_normal(25, 6, 1.0, &mut RngStream::new(9, 0));
        let r = hierarchical_route(&tokens, &b, &HierarchicalConfig::new(g, l, k), 0.0, &RngStream::new(0, 0)).unwrap();

        let w = b.routing_centroids();
        let block = e / g;
        for s in 0..25 {
            let h = tokens.row(s);
            // first loop: clusters
            let mut cs: Vec<(f64, usize)> = (0..g)
                .map(|c| {
                    let mut mean = vec![0.0; 6];
                    for ex in c * block..(c + 1) * block {
                        for (m, x) in mean.iter_mut().zip(w.row(ex)) {
                            *m += x / block as f64;
                        }
                    }
                    (dot(h, &mean), c)
                })
                .collect();
            cs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            // second loop: experts in the chosen clusters
            let mut es: Vec<(f64, usize)> = Vec::new();
            for &(_, c) in &cs[..l] {
                for ex in c * block..(c + 1) * block {
                    es.push((dot(h, w.row(ex)), ex));
                }
            }
            es.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = es[..k].iter().map(|p| p.1).collect();
            assert_eq!(r.topk_indices(s), expected.as_slice());
            let allowed: Vec<usize> = cs[..l].iter().flat_map(|&(_, c)| c * block..(c + 1) * block).collect();
            assert!(r.topk_indices(s).iter().all(|x| allowed.contains(x)));
        }
    }

    #[test]
    fn hierarchical_rejects_uneven_partition() {
        let b = bank(10, 3, 10);
        let tokens = Matrix::zeros(1, 3);
        let err = hierarchical_route(&tokens, &b, &HierarchicalConfig::new(3, 1, 1), 0.0, &RngStream::new(0, 0)).unwrap_err();
        assert!(err.to_string().contains("E mod G = 0"), "{err}");
        let err = hierarchical_route(&tokens, &b, &HierarchicalConfig::new(5, 1, 3), 0.0, &RngStream::new(0, 0)).unwrap_err();
        assert!(err.to_string().contains("l*(E/G) >= K"), "{err}");
    }

    #[test]
    fn jittered_hierarchy_stays_in_blocks() {
        let b = bank(32, 4, 11);
        let tokens = Matrix::random_normal(50, 4, 1.0, &mut RngStream::new(12, 0));
        let cfg = HierarchicalConfig::new(8, 2, 3);
        let r = hierarchical_route(&tokens, &b, &cfg, 0.5, &RngStream::new(13, 0)).unwrap();
        for s in 0..50 {
            assert!(r.topk_indices(s).iter().all(|e| r.candidates(s).contains(e)));
            assert_eq!(r.candidates(s).len(), 8);
        }
    }

    #[test]
    fn air_with_full_shortlist_agrees_with_exact() {
        let b = bank(32, 6, 14);
        let mut rng = RngStream::new(15, 0);
        let tokens = Matrix::random_normal(64, 6, 1.0, &mut rng);
        let cb = CodebookState::init(&tokens, 1, CodebookParams::default(), &mut rng).unwrap();
        let cfg = RouterConfig::new(1, 32, 32, 4);
        let a = air_route(&tokens, &b, &cb, &mut ShortlistCache::empty(), &cfg, &rng).unwrap();
        let x = exact_route(&tokens, &b, 4).unwrap();
        assert_eq!(a.all_topk_indices(), x.all_topk_indices());
    }

    #[test]
    fn coarse_config_examples() {
        let c = derive_coarse_config(65536, 512, 1).unwrap();
        assert_eq!((c.num_experts, c.intermediate_dim, c.top_k), (128, 512, 1));
        let c = derive_coarse_config(77, 1, 9).unwrap();
        assert_eq!((c.num_experts, c.intermediate_dim, c.top_k), (77, 9, 1));
        let c = derive_coarse_config(10, 3, 2).unwrap();
        assert_eq!((c.num_experts, c.intermediate_dim, c.top_k), (4, 6, 1));
    }

    #[test]
    fn coarse_config_preserves_active_parameters() {
        for e in 1..200usize {
            for k in 1..=e.min(16) {
                let c = derive_coarse_config(e, k, 3).unwrap();
                // active: K experts of size d vs one expert of size d*K
                assert_eq!(c.top_k * c.intermediate_dim, k * 3);
                let total_before = e * 3;
                let total_after = c.num_experts * c.intermediate_dim;
                if e % k == 0 {
                    assert_eq!(total_before, total_after);
                } else {
                    assert!(total_after > total_before && total_after - total_before < c.intermediate_dim);
                }
            }
        }
    }

    #[test]
    fn fairness_accepts_matched_configuration() {
        let mut air = RouterConfig::new(16, 256, 16, 8);
        air.jitter_sigma = 0.0;
        let report = validate_fairness(&air, &HierarchicalConfig::new(16, 1, 8));
        assert!(report.is_fair(), "{report}");
        assert!(report.violations.is_empty());
        assert_eq!(report, validate_fairness(&air, &HierarchicalConfig::new(16, 1, 8)));
    }

    #[test]
    fn fairness_rejects_uneven_partition() {
        let air = RouterConfig::new(3, 10, 4, 2);
        let report = validate_fairness(&air, &HierarchicalConfig::new(3, 1, 2));
        assert!(!report.is_fair());
        assert!(report.violations.iter().any(|v| v.contains("E mod G = 0")));
    }

    #[test]
    fn fairness_rejects_oversized_shortlist() {
        let air = RouterConfig::new(2, 8, 9, 2);
        let report = validate_fairness(&air, &HierarchicalConfig::new(2, 1, 2));
        assert!(!report.equal_candidate_pool);
        assert!(report.violations.iter().any(|v| v.contains("M <= E")));
    }

    #[test]
    fn fairness_flags_match_violations() {
        for (g, m, k, hg, hl, hk) in [(4, 8, 2, 4, 1, 2), (4, 8, 2, 2, 1, 2), (4, 8, 2, 4, 2, 2), (4, 8, 3, 4, 1, 2)] {
            let r = validate_fairness(&RouterConfig::new(g, 32, m, k), &HierarchicalConfig::new(hg, hl, hk));
            assert_eq!(r.is_fair(), r.violations.is_empty(), "{r}");
        }
    }
}
