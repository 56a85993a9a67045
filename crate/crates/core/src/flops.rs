//! Analytical FLOP counts.
//!
//! One addition, subtraction, multiplication, division, exponential,
//! logarithm or square root counts as one FLOP. Inner products of length
//! `d` count `2d` (multiply and add).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sqrt,
    Rsqrt,
    Sigmoid,
    Silu,
    Gelu,
    Mean,
    Sum,
    VarMean,
}

impl FromStr for PointwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "div" => Self::Div,
            "exp" => Self::Exp,
            "log" => Self::Log,
            "sqrt" => Self::Sqrt,
            "rsqrt" => Self::Rsqrt,
            "sigmoid" => Self::Sigmoid,
            "silu" => Self::Silu,
            "gelu" => Self::Gelu,
            "mean" => Self::Mean,
            "sum" => Self::Sum,
            "var_mean" => Self::VarMean,
            other => return Err(Error::config(format!("unknown pointwise operation '{other}'"))),
        })
    }
}

pub fn flops_pointwise(op: PointwiseOp, numel: u64) -> f64 {
    let n = numel as f64;
    use PointwiseOp::*;
    match op {
        Add | Sub | Mul | Div | Exp | Log | Sqrt | Rsqrt => n,
        Sigmoid | Silu => 3.0 * n,
        Gelu => 6.0 * n,
        Mean => n + 1.0,
        Sum | VarMean => 2.0 * n,
    }
}

/// Forward `2N + N/d_sm`, backward `5N`.
pub fn flops_softmax(numel: u64, softmax_dim: u64, backward: bool) -> Result<f64> {
    if softmax_dim == 0 {
        return Err(Error::config("softmax dimension must be >= 1"));
    }
    let n = numel as f64;
    Ok(if backward { 5.0 * n } else { 2.0 * n + n / softmax_dim as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
    BatchNorm,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(Self::LayerNorm),
            "rmsnorm" => Ok(Self::RmsNorm),
            "batchnorm" => Ok(Self::BatchNorm),
            other => Err(Error::config(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Normalization layers. For layer/RMS norm `count` is the number of
/// normalized vectors `V` and `width` their dimension `d`; for batch norm
/// they are `numel(x)` and the channel count `C`.
pub fn flops_norm(kind: NormKind, count: u64, width: u64, has_weight: bool, has_bias: bool, backward: bool) -> Result<f64> {
    let (v, d) = (count as f64, width as f64);
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    match (kind, backward) {
        (NormKind::LayerNorm, false) => Ok(v * (4.0 * d + d + ind(has_weight) * d + ind(has_bias) * d)),
        (NormKind::RmsNorm, false) => Ok(v * (4.0 * d + ind(has_weight) * d)),
        (NormKind::LayerNorm | NormKind::RmsNorm, true) => Ok(8.0 * v * d),
        (NormKind::BatchNorm, false) => {
            // one multiply for the scale and one add for the shift per element
            let affine = (ind(has_weight) + ind(has_bias)) * v;
            Ok((2.0 * v + 2.0 * d) + 2.0 * v + affine)
        }
        (NormKind::BatchNorm, true) => Err(Error::config("no backward cost model for batch norm")),
    }
}

/// Scaled dot-product attention: `4·b·h·s_q·s_k·d + 2·b·h·s_q·s_k`.
pub fn flops_attention(batch: u64, heads: u64, s_q: u64, s_k: u64, d: u64) -> f64 {
    let base = batch as f64 * heads as f64 * s_q as f64 * s_k as f64;
    4.0 * base * d as f64 + 2.0 * base
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexOp {
    TopK,
    Gather,
}

impl FromStr for IndexOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Self::TopK),
            "gather" | "scatter" | "index_add" => Ok(Self::Gather),
            other => Err(Error::config(format!("unknown indexing operation '{other}'"))),
        }
    }
}

/// Top-k: `B · n · log₂(k + 1)`. Gather/scatter: one per affected element.
pub fn flops_index(op: IndexOp, batch: u64, n: u64, k: u64, affected: u64) -> f64 {
    match op {
        IndexOp::TopK => batch as f64 * n as f64 * ((k + 1) as f64).log2(),
        IndexOp::Gather => affected as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostCategory {
    /// Per-token inner products.
    Matmul,
    /// Shortlist rebuild, amortized over the effective batch.
    Refresh,
    Select,
    Normalize,
}

impl fmt::Display for CostCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Matmul => "matmul",
            Self::Refresh => "refresh",
            Self::Select => "select",
            Self::Normalize => "normalize",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub label: String,
    pub category: CostCategory,
    pub flops: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopLedger {
    entries: Vec<LedgerEntry>,
}

impl FlopLedger {
    pub fn push(&mut self, label: impl Into<String>, category: CostCategory, flops: f64) {
        debug_assert!(flops >= 0.0);
        self.entries.push(LedgerEntry { label: label.into(), category, flops });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn subtotal(&self, category: CostCategory) -> f64 {
        self.entries.iter().filter(|e| e.category == category).map(|e| e.flops).sum()
    }

    /// Per-token scoring cost, excluding the amortized shortlist rebuild.
    pub fn matmul_subtotal(&self) -> f64 {
        self.subtotal(CostCategory::Matmul)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,flops\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.label, crate::io::fmt_sig(e.flops)));
        }
        out.push_str(&format!("total,{}\n", crate::io::fmt_sig(self.total())));
        out
    }
}

impl fmt::Display for FlopLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.label.len()).max().unwrap_or(0).max(5);
        for e in &self.entries {
            writeln!(f, "{:<width$}  {:<9}  {:>18.6e}", e.label, e.category.to_string(), e.flops)?;
        }
        writeln!(f, "{:<width$}  {:<9}  {:>18.6e}", "total", "", self.total())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterKind {
    Air,
    Standard,
    Hierarchical,
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "air" => Ok(Self::Air),
            "standard" | "exact" => Ok(Self::Standard),
            "hierarchical" => Ok(Self::Hierarchical),
            other => Err(Error::config(format!("unknown router '{other}'"))),
        }
    }
}

/// Shape of one routed batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerParams {
    pub tokens: u64,
    pub experts: u64,
    pub codes: u64,
    pub shortlist: u64,
    pub top_k: u64,
    pub selected_clusters: u64,
    pub dim: u64,
    /// Tokens sharing one shortlist rebuild (effective batch size).
    pub amortization_tokens: u64,
}

/// Forward routing cost of one batch for the given router.
pub fn router_flop_ledger(router: RouterKind, p: &LedgerParams) -> Result<FlopLedger> {
    let LedgerParams { tokens: s, experts: e, codes: g, shortlist: m, top_k: k, selected_clusters: l, dim: d, amortization_tokens: amort } = *p;
    if s == 0 || e == 0 || k == 0 || d == 0 {
        return Err(Error::config("S, E, K and d must be >= 1"));
    }
    if k > e {
        return Err(Error::config(format!("K <= E violated (K={k}, E={e})")));
    }
    let (sf, ef, gf, mf, kf, lf, df) = (s as f64, e as f64, g as f64, m as f64, k as f64, l as f64, d as f64);
    let mut ledger = FlopLedger::default();
    let softmax = flops_softmax(s * k, k, false)?;
    match router {
        RouterKind::Air => {
            if g == 0 || m == 0 {
                return Err(Error::config("G and M must be >= 1"));
            }
            if m > e {
                return Err(Error::config(format!("M <= E violated (M={m}, E={e})")));
            }
            if amort == 0 {
                return Err(Error::config("amortization tokens must be >= 1"));
            }
            let share = (amort as f64 / sf).max(1.0);
            ledger.push("coarse assignment", CostCategory::Matmul, 2.0 * sf * gf * df);
            ledger.push("shortlist refresh (amortized)", CostCategory::Refresh, 2.0 * ef * gf * df / share);
            ledger.push("fine scoring", CostCategory::Matmul, 2.0 * sf * mf * df);
            ledger.push("top-k over shortlist", CostCategory::Select, flops_index(IndexOp::TopK, s, m, k, 0));
        }
        RouterKind::Standard => {
            ledger.push("expert scoring", CostCategory::Matmul, 2.0 * sf * ef * df);
            ledger.push("top-k over experts", CostCategory::Select, flops_index(IndexOp::TopK, s, e, k, 0));
        }
        RouterKind::Hierarchical => {
            if g == 0 || l == 0 {
                return Err(Error::config("G and l must be >= 1"));
            }
            if e % g != 0 {
                return Err(Error::config(format!("E mod G = 0 violated ({e} mod {g} = {})", e % g)));
            }
            if l > g {
                return Err(Error::config(format!("l <= G violated (l={l}, G={g})")));
            }
            let pool = l * (e / g);
            ledger.push("cluster scoring", CostCategory::Matmul, 2.0 * sf * gf * df);
            ledger.push("candidate scoring", CostCategory::Matmul, 2.0 * sf * lf * (ef / gf) * df);
            ledger.push("top-l over clusters", CostCategory::Select, flops_index(IndexOp::TopK, s, g, l, 0));
            ledger.push("top-k over candidates", CostCategory::Select, flops_index(IndexOp::TopK, s, pool, k, 0));
        }
    }
    let _ = kf;
    ledger.push("router softmax", CostCategory::Normalize, softmax);
    Ok(ledger)
}
