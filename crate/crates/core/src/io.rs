//! Binary index persistence, token batch loading and CSV emission.
//!
//! Index layout, all little-endian:
//!
//! ```text
//! "AIRX" | version u32 | d u32 | G u32 | E u32 | M u32 | flags u8
//! codewords  G·d f32
//! ema_counts G   f32
//! ema_sums   G·d f32
//! centroids  E·d f32
//! shortlists G·M u32
//! crc32 of every preceding byte
//! ```
//!
//! Flags: bit 0 normalize centroids, bit 1 euclidean assignment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analysis::BoundReport;
use crate::codebook::{CodebookParams, CodebookState};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, TokenBatch};
use crate::router::{RoutingResult, ShortlistCache};

pub const INDEX_MAGIC: [u8; 4] = *b"AIRX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 1;
const FLAG_NORMALIZE: u8 = 1;
const FLAG_EUCLIDEAN: u8 = 2;

/// Codebook, routing centroids and shortlists, persisted together.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexFile {
    pub codebook: CodebookState,
    pub centroids: Matrix,
    pub normalize_centroids: bool,
    pub shortlists: ShortlistCache,
}

impl IndexFile {
    pub fn new(codebook: CodebookState, centroids: Matrix, normalize_centroids: bool, shortlists: ShortlistCache) -> Result<Self> {
        let out = Self { codebook, centroids, normalize_centroids, shortlists };
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let d = self.codebook.dim();
        if self.centroids.cols() != d {
            return Err(Error::input("centroid and codeword dimensions differ"));
        }
        if !self.shortlists.is_valid() {
            return Err(Error::Precondition("refusing to store a stale shortlist cache".into()));
        }
        if self.shortlists.num_codes() != self.codebook.num_codes() {
            return Err(Error::input("shortlist table and codebook sizes differ"));
        }
        if self.shortlists.lists().iter().any(|&e| e >= self.centroids.rows()) {
            return Err(Error::input("shortlist entry out of range"));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.centroids.rows()
    }

    pub fn shortlist_size(&self) -> usize {
        self.shortlists.width()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let cb = &self.codebook;
        let (d, g, e, m) = (cb.dim(), cb.num_codes(), self.num_experts(), self.shortlist_size());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (2 * g * d + g + e * d + g * m) + 4);
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        for v in [d, g, e, m] {
            let v = u32::try_from(v).map_err(|_| Error::input(format!("dimension {v} does not fit in 32 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut flags = 0u8;
        if self.normalize_centroids {
            flags |= FLAG_NORMALIZE;
        }
        if cb.is_euclidean() {
            flags |= FLAG_EUCLIDEAN;
        }
        out.push(flags);
        put_f32s(&mut out, cb.codewords().as_slice());
        put_f32s(&mut out, cb.ema_counts());
        put_f32s(&mut out, cb.ema_sums().as_slice());
        put_f32s(&mut out, self.centroids.as_slice());
        for &idx in self.shortlists.lists() {
            out.extend_from_slice(&(idx as u32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!("index truncated: {} bytes", bytes.len())));
        }
        if bytes[..4] != INDEX_MAGIC {
            return Err(Error::Format("bad magic, not an AIRX index".into()));
        }
        let version = read_u32(bytes, 4);
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: INDEX_VERSION });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("index header truncated: {} bytes", bytes.len())));
        }
        let [d, g, e, m] = [8, 12, 16, 20].map(|o| read_u32(bytes, o) as usize);
        let flags = bytes[24];
        let payload = [(g, d), (g, 1), (g, d), (e, d), (g, m)]
            .iter()
            .try_fold(0usize, |acc, &(a, b)| acc.checked_add(a.checked_mul(b)?.checked_mul(4)?))
            .and_then(|p| p.checked_add(HEADER_LEN + 4))
            .ok_or_else(|| Error::Format("index dimensions overflow".into()))?;
        if bytes.len() < payload {
            return Err(Error::Format(format!("index truncated: {} of {payload} bytes", bytes.len())));
        }
        if bytes.len() > payload {
            return Err(Error::Format(format!("{} trailing bytes after index", bytes.len() - payload)));
        }
        let body = &bytes[..payload - 4];
        let stored = read_u32(bytes, payload - 4);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Corruption(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        if flags & !(FLAG_NORMALIZE | FLAG_EUCLIDEAN) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
        }
        if d == 0 || g == 0 || e == 0 || m == 0 || m > e {
            return Err(Error::Format(format!("invalid index dimensions d={d} G={g} E={e} M={m}")));
        }
        let mut pos = HEADER_LEN;
        let mut take = |n: usize| {
            let v = get_f32s(bytes, pos, n);
            pos += 4 * n;
            v
        };
        let codewords = take(g * d);
        let counts = take(g);
        let sums = take(g * d);
        let centroids = take(e * d);
        let lists: Vec<usize> = (0..g * m).map(|i| read_u32(bytes, pos + 4 * i) as usize).collect();
        let data = |r, c, v| Matrix::new(r, c, v).map_err(|err| Error::Corruption(err.to_string()));
        let params = CodebookParams { euclidean_mode: flags & FLAG_EUCLIDEAN != 0, ..CodebookParams::default() };
        let codebook = CodebookState::from_parts(data(g, d, codewords)?, counts, data(g, d, sums)?, params)
            .map_err(|err| Error::Corruption(err.to_string()))?;
        let shortlists = ShortlistCache::from_lists(lists, g, m, e, 0.0).map_err(|err| Error::Corruption(err.to_string()))?;
        Ok(Self { codebook, centroids: data(e, d, centroids)?, normalize_centroids: flags & FLAG_NORMALIZE != 0, shortlists })
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8], at: usize, n: usize) -> Vec<f64> {
    bytes[at..at + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn save_index(path: impl AsRef<Path>, index: &IndexFile) -> Result<()> {
    fs::write(path, index.to_bytes()?)?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<IndexFile> {
    IndexFile::from_bytes(&fs::read(path)?)
}

/// Headerless little-endian f32 matrix of shape `rows × cols`.
pub fn tokens_from_f32_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<TokenBatch> {
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::input("token dimensions overflow"))?;
    if bytes.len() != want {
        return Err(Error::Format(format!("expected {want} bytes for {rows}x{cols} f32 tokens, found {}", bytes.len())));
    }
    Matrix::new(rows, cols, get_f32s(bytes, 0, rows * cols)).map_err(|e| Error::Format(e.to_string()))
}

pub fn tokens_to_f32_bytes(tokens: &TokenBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.as_slice().len() * 4);
    put_f32s(&mut out, tokens.as_slice());
    out
}

/// Comma-separated token rows. A first line that does not parse as numbers
/// is taken as a header and skipped.
pub fn tokens_from_csv(text: &str) -> Result<TokenBatch> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::Format(format!(
                            "line {}: expected {} fields, found {}",
                            lineno + 1,
                            first.len(),
                            row.len()
                        )));
                    }
                }
                rows.push(row);
            }
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(Error::Format(format!("line {}: {e}", lineno + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("no token rows found".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))
}

/// Formats with 9 significant digits, dropping trailing zeros.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, exponent) = s.split_once('e').expect("exponent present");
        let mantissa = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        format!("{mantissa}e{exponent}")
    }
}

pub const ROUTING_CSV_HEADER: &str = "token_id,rank,expert_id,score,weight";

pub fn routing_csv(routing: &RoutingResult) -> String {
    let mut out = String::from(ROUTING_CSV_HEADER);
    out.push('\n');
    for s in 0..routing.num_tokens() {
        let rows = routing.topk_indices(s).iter().zip(routing.topk_scores(s)).zip(routing.topk_weights(s));
        for (rank, ((&e, &score), &w)) in rows.enumerate() {
            let _ = writeln!(out, "{s},{rank},{e},{},{}", fmt_sig(score), fmt_sig(w));
        }
    }
    out
}

pub const BOUND_CSV_HEADER: &str = "token_id,eps,rho_M,lower_bound,mass_recall,margin,holds";

pub fn bound_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from(BOUND_CSV_HEADER);
    out.push('\n');
    for (s, r) in reports.iter().enumerate() {
        let _ = writeln!(
            out,
            "{s},{},{},{},{},{},{}",
            fmt_sig(r.eps),
            fmt_sig(r.rho_m),
            fmt_sig(r.lower_bound),
            fmt_sig(r.mass_recall),
            fmt_sig(r.margin),
            r.holds
        );
    }
    out
}
