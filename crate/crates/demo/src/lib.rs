//! Browser demo: three small interactive operations over the core crate.
//!
//! Each export has a plain Rust counterpart returning `Result<_, String>`
//! so the logic can be exercised natively.

use airmoe::analysis::{check_bound_batch, mass_recall};
use airmoe::baselines::{exact_route, validate_fairness, HierarchicalConfig};
use airmoe::codebook::{CodebookParams, CodebookState};
use airmoe::flops::{router_flop_ledger, CostCategory, LedgerParams, RouterKind};
use airmoe::io::fmt_sig;
use airmoe::numerics::RngStream;
use airmoe::router::{air_route, refresh_shortlists, ExpertBank, RouterConfig};
use airmoe::trainer::make_synthetic_task;
use airmoe::overlap_fraction;
use wasm_bindgen::prelude::*;

const CODEBOOK_PASSES: usize = 10;
const TOKEN_NOISE: f64 = 0.3;

fn shape(v: u32) -> u64 {
    u64::from(v)
}

/// Ledger as CSV plus a trailing `ratio_vs_standard` row comparing matmul
/// subtotals with a dense router of the same shape.
#[allow(clippy::too_many_arguments)]
pub fn flop_ledger_csv(router: &str, e: u32, g: u32, m: u32, k: u32, s: u32, d: u32, l: u32) -> Result<String, String> {
    let kind: RouterKind = router.parse().map_err(|e: airmoe::Error| e.to_string())?;
    let p = LedgerParams {
        tokens: shape(s),
        experts: shape(e),
        codes: shape(g),
        shortlist: shape(m),
        top_k: shape(k),
        selected_clusters: shape(l),
        dim: shape(d),
        amortization_tokens: shape(s),
    };
    let ledger = router_flop_ledger(kind, &p).map_err(|e| e.to_string())?;
    let dense = router_flop_ledger(RouterKind::Standard, &p).map_err(|e| e.to_string())?;
    let ratio = ledger.subtotal(CostCategory::Matmul) / dense.subtotal(CostCategory::Matmul);
    Ok(format!("{}ratio_vs_standard,{}\n", ledger.to_csv(), fmt_sig(ratio)))
}

/// For each shortlist size `M` in `1..=max_m`, reports the overlap with exact
/// top-K, mean routed mass on the shortlist, and how often the mass bound held.
/// CSV columns: `M,overlap,mass_recall,bound_holds,min_margin`.
pub fn shortlist_sweep(seed: u32, e: u32, g: u32, k: u32, d: u32, s: u32, max_m: u32) -> Result<String, String> {
    let (e, g, k, d, s) = (e as usize, g as usize, k as usize, d as usize, s as usize);
    if max_m == 0 || max_m as usize > e {
        return Err(format!("max M must lie in 1..={e}"));
    }
    let err = |x: airmoe::Error| x.to_string();
    let rng = RngStream::new(u64::from(seed), 0);
    let task = make_synthetic_task(d, 1, g.max(1), TOKEN_NOISE, &mut rng.fork(1)).map_err(err)?;
    let tokens = task.sample(s, &rng.fork(2), 0).inputs;
    let bank = ExpertBank::random(e, d, true, &mut rng.fork(3));
    let mut cb_rng = rng.fork(4);
    let mut cb = CodebookState::init(&tokens, g, CodebookParams::default(), &mut cb_rng).map_err(err)?;
    for _ in 0..CODEBOOK_PASSES {
        cb.update(&tokens, &mut cb_rng).map_err(err)?;
    }
    let exact = exact_route(&tokens, &bank, k).map_err(err)?;

    let mut csv = String::from("M,overlap,mass_recall,bound_holds,min_margin\n");
    for m in 1..=max_m as usize {
        let mut cfg = RouterConfig::new(g, e, m, k.min(m));
        cfg.training_mode = false;
        let mut cache = refresh_shortlists(&cb, &bank, &cfg, &rng).map_err(err)?;
        let routing = air_route(&tokens, &bank, &cb, &mut cache, &cfg, &rng.fork(5)).map_err(err)?;
        let overlap = if m >= k { overlap_fraction(&routing, &exact).map_err(err)? } else { f64::NAN };
        let mut recall = 0.0;
        for t in 0..s {
            recall += mass_recall(tokens.row(t), routing.candidates(t), &bank).map_err(err)?;
        }
        let reports = check_bound_batch(&tokens, &cb, &cache, &bank).map_err(err)?;
        let held = reports.iter().filter(|r| r.holds).count() as f64 / s as f64;
        let min_margin = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
        csv.push_str(&format!(
            "{m},{},{},{},{}\n",
            fmt_sig(overlap),
            fmt_sig(recall / s as f64),
            fmt_sig(held),
            fmt_sig(min_margin)
        ));
    }
    Ok(csv)
}

/// Plain-text fairness verdict for an AIR router against a hierarchical one.
pub fn fairness_text(e: u32, g: u32, m: u32, k: u32, l: u32) -> String {
    let air = RouterConfig::new(g as usize, e as usize, m as usize, k as usize);
    let hier = HierarchicalConfig::new(g as usize, l as usize, k as usize);
    validate_fairness(&air, &hier).to_string()
}

#[wasm_bindgen(js_name = flopLedger)]
#[allow(clippy::too_many_arguments)]
pub fn flop_ledger_js(router: &str, e: u32, g: u32, m: u32, k: u32, s: u32, d: u32, l: u32) -> Result<String, String> {
    flop_ledger_csv(router, e, g, m, k, s, d, l)
}

#[wasm_bindgen(js_name = shortlistSweep)]
pub fn shortlist_sweep_js(seed: u32, e: u32, g: u32, k: u32, d: u32, s: u32, max_m: u32) -> Result<String, String> {
    shortlist_sweep(seed, e, g, k, d, s, max_m)
}

#[wasm_bindgen(js_name = fairness)]
pub fn fairness_js(e: u32, g: u32, m: u32, k: u32, l: u32) -> String {
    fairness_text(e, g, m, k, l)
}
