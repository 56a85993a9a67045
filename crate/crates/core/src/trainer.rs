//! Desk-scale training loop for a routed toy model.
//!
//! The model encodes an input with a linear map, routes the encoding
//! through the inverted index, mixes rank-one experts and reads out a
//! prediction. Gradients are computed by hand with the routing selection
//! held fixed. The codebook never receives gradients; it is updated by its
//! own EMA rule on every micro-batch.

use crate::analysis::{dead_expert_fraction, overlap_fraction, usage_entropy, UsageStats};
use crate::baselines::exact_route;
use crate::codebook::{CodebookParams, CodebookState};
use crate::error::{Error, Result};
use crate::flops::{router_flop_ledger, LedgerParams, RouterKind};
use crate::numerics::{axpy, dot, Matrix, RngStream, TokenBatch, NORM_EPS};
use crate::router::{air_route, load_balance_loss, moe_forward, ExpertBank, RouterConfig, RoutingResult, ShortlistCache};

const MODEL_SITE: u64 = 10;
const CODEBOOK_INIT_SITE: u64 = 11;
const CODEBOOK_SITE: u64 = 12;
const DATA_SITE: u64 = 13;
const ROUTE_SITE: u64 = 14;

/// Standard deviation of the input noise around a cluster mean.
pub const INPUT_NOISE_STD: f64 = 0.1;

/// Clustered regression task: `x = μ_c + noise`, `y = A_c x + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    cluster_means: Matrix,
    maps: Vec<Matrix>,
    noise_std: f64,
}

/// A sampled batch with the generating cluster of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub clusters: Vec<usize>,
}

pub fn make_synthetic_task(d_in: usize, d_out: usize, clusters: usize, noise_std: f64, rng: &mut RngStream) -> Result<SyntheticTask> {
    if d_in == 0 || d_out == 0 || clusters == 0 {
        return Err(Error::config("task dimensions and cluster count must be >= 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::config("noise std must be finite and >= 0"));
    }
    let mut means = Matrix::zeros(clusters, d_in);
    for c in 0..clusters {
        let u = rng.unit_vector(d_in);
        means.row_mut(c).copy_from_slice(&u);
    }
    let std = 1.0 / (d_in as f64).sqrt();
    let maps = (0..clusters).map(|_| Matrix::random_normal(d_out, d_in, std, rng)).collect();
    Ok(SyntheticTask { cluster_means: means, maps, noise_std })
}

impl SyntheticTask {
    pub fn num_clusters(&self) -> usize {
        self.cluster_means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.cluster_means.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.maps[0].rows()
    }

    pub fn cluster_means(&self) -> &Matrix {
        &self.cluster_means
    }

    /// Target map of cluster `c`, shape `d_out × d_in`.
    pub fn map(&self, c: usize) -> &Matrix {
        &self.maps[c]
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Draws `n` samples. Row `j` uses `rng.fork(offset + j)`, so a batch
    /// split into pieces reproduces the samples of the whole.
    pub fn sample(&self, n: usize, rng: &RngStream, offset: usize) -> Batch {
        let (d_in, d_out) = (self.input_dim(), self.output_dim());
        let mut inputs = Matrix::zeros(n, d_in);
        let mut targets = Matrix::zeros(n, d_out);
        let mut clusters = Vec::with_capacity(n);
        for j in 0..n {
            let mut r = rng.fork((offset + j) as u64);
            let c = r.below(self.num_clusters());
            let x: Vec<f64> = self.cluster_means.row(c).iter().map(|m| m + INPUT_NOISE_STD * r.gaussian()).collect();
            let mut y = self.maps[c].mul_vec(&x);
            if self.noise_std > 0.0 {
                for v in &mut y {
                    *v += self.noise_std * r.gaussian();
                }
            }
            inputs.row_mut(j).copy_from_slice(&x);
            targets.row_mut(j).copy_from_slice(&y);
            clusters.push(c);
        }
        Batch { inputs, targets, clusters }
    }
}

/// Trainable parameters θ. `encoder` is `d × d_in` and `readout` is
/// `d_out × d`, both applied as `M·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub encoder: Matrix,
    pub bank: ExpertBank,
    pub readout: Matrix,
}

impl ToyModel {
    pub fn init(d_in: usize, dim: usize, d_out: usize, num_experts: usize, normalize_centroids: bool, rng: &mut RngStream) -> Self {
        let encoder = Matrix::random_normal(dim, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let bank = ExpertBank::random(num_experts, dim, normalize_centroids, rng);
        let readout = Matrix::random_normal(d_out, dim, 1.0 / (dim as f64).sqrt(), rng);
        Self { encoder, bank, readout }
    }

    pub fn dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        if self.bank.dim() != self.dim() || self.readout.cols() != self.dim() {
            return Err(Error::input("encoder, expert and readout dimensions disagree"));
        }
        if !(self.encoder.is_finite() && self.readout.is_finite()) {
            return Err(Error::input("model contains non-finite parameters"));
        }
        Ok(())
    }

    /// Hidden states `h = encoder · x`, one row per input.
    pub fn encode(&self, inputs: &Matrix) -> Result<TokenBatch> {
        if inputs.cols() != self.encoder.cols() {
            return Err(Error::input(format!("input dimension {} != encoder input {}", inputs.cols(), self.encoder.cols())));
        }
        let mut h = Matrix::zeros(inputs.rows(), self.dim());
        for s in 0..inputs.rows() {
            let v = self.encoder.mul_vec(inputs.row(s));
            h.row_mut(s).copy_from_slice(&v);
        }
        Ok(h)
    }

    /// `θ ← θ − lr · g`.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grads.parts()) {
            axpy(-lr, g.as_slice(), p.as_mut_slice());
        }
    }

    fn params_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.encoder,
            &mut self.bank.centroids,
            &mut self.bank.ffn_in,
            &mut self.bank.ffn_out,
            &mut self.readout,
        ]
    }

    /// Parameter tensors in the same order as [`Gradients::parts`].
    pub fn parts(&self) -> [&Matrix; 5] {
        [&self.encoder, &self.bank.centroids, &self.bank.ffn_in, &self.bank.ffn_out, &self.readout]
    }

    /// Mutable access to parameter tensor `i` (order of [`ToyModel::parts`]).
    pub fn part_mut(&mut self, i: usize) -> &mut Matrix {
        self.params_mut().into_iter().nth(i).expect("parameter index")
    }
}

/// Gradients with the shapes of [`ToyModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Matrix,
    pub centroids: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
    pub readout: Matrix,
}

pub const PARAMETER_NAMES: [&str; 5] = ["encoder", "centroids", "ffn_in", "ffn_out", "readout"];

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            encoder: z(&model.encoder),
            centroids: z(&model.bank.centroids),
            ffn_in: z(&model.bank.ffn_in),
            ffn_out: z(&model.bank.ffn_out),
            readout: z(&model.readout),
        }
    }

    pub fn parts(&self) -> [&Matrix; 5] {
        [&self.encoder, &self.centroids, &self.ffn_in, &self.ffn_out, &self.readout]
    }

    fn parts_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.encoder, &mut self.centroids, &mut self.ffn_in, &mut self.ffn_out, &mut self.readout]
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            axpy(alpha, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|m| m.is_finite())
    }
}

/// Result of [`toy_forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Mean squared error `(1/(S·d_out)) Σ ‖p − y‖²`.
    pub loss: f64,
    pub aux: f64,
    pub routing: RoutingResult,
    pub hidden: TokenBatch,
    pub predictions: Matrix,
}

impl ForwardOutput {
    pub fn total(&self) -> f64 {
        self.loss + self.aux
    }
}

fn check_batch(model: &ToyModel, x: &Matrix, y: &Matrix) -> Result<()> {
    model.validate()?;
    if x.rows() != y.rows() {
        return Err(Error::input(format!("{} inputs but {} targets", x.rows(), y.rows())));
    }
    if y.cols() != model.readout.rows() {
        return Err(Error::input(format!("target dimension {} != readout output {}", y.cols(), model.readout.rows())));
    }
    if x.rows() == 0 {
        return Err(Error::input("empty batch"));
    }
    Ok(())
}

pub fn toy_forward(
    model: &ToyModel,
    cb: &CodebookState,
    cache: &mut ShortlistCache,
    cfg: &RouterConfig,
    x: &Matrix,
    y: &Matrix,
    rng: &RngStream,
) -> Result<ForwardOutput> {
    check_batch(model, x, y)?;
    let hidden = model.encode(x)?;
    let routing = air_route(&hidden, &model.bank, cb, cache, cfg, rng)?;
    let mixed = moe_forward(&routing, &model.bank, &hidden)?;
    let (s, d_out) = (x.rows(), y.cols());
    let mut predictions = Matrix::zeros(s, d_out);
    let mut sq = 0.0;
    for i in 0..s {
        let p = model.readout.mul_vec(mixed.row(i));
        sq += p.iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        predictions.row_mut(i).copy_from_slice(&p);
    }
    let loss = sq / (s * d_out) as f64;
    let aux = load_balance_loss(&routing, cfg);
    Ok(ForwardOutput { loss, aux, routing, hidden, predictions })
}

/// Per-token intermediate values at frozen selections.
struct TokenPass {
    h: Vec<f64>,
    selected: Vec<usize>,
    weights: Vec<f64>,
    pre: Vec<f64>,
    mixed: Vec<f64>,
    residual: Vec<f64>,
    candidates: Vec<usize>,
    shortlist_probs: Vec<f64>,
}

fn softmax_vec(mut v: Vec<f64>) -> Vec<f64> {
    crate::numerics::softmax_in_place(&mut v);
    v
}

fn token_pass(model: &ToyModel, w: &Matrix, routing: &RoutingResult, x: &[f64], y: &[f64], s: usize, with_aux: bool) -> TokenPass {
    let h = model.encoder.mul_vec(x);
    let selected = routing.topk_indices(s).to_vec();
    let logits: Vec<f64> = selected.iter().map(|&e| dot(&h, w.row(e))).collect();
    let weights = softmax_vec(logits);
    let pre: Vec<f64> = selected.iter().map(|&e| dot(model.bank.ffn_in.row(e), &h)).collect();
    let mut mixed = vec![0.0; h.len()];
    for ((&e, &g), &a) in selected.iter().zip(&weights).zip(&pre) {
        axpy(g * a.max(0.0), model.bank.ffn_out.row(e), &mut mixed);
    }
    let p = model.readout.mul_vec(&mixed);
    let residual = p.iter().zip(y).map(|(a, b)| a - b).collect();
    let (candidates, shortlist_probs) = if with_aux {
        let c = routing.candidates(s).to_vec();
        let z = c.iter().map(|&e| dot(&h, w.row(e))).collect();
        (c, softmax_vec(z))
    } else {
        (Vec::new(), Vec::new())
    };
    TokenPass { h, selected, weights, pre, mixed, residual, candidates, shortlist_probs }
}

fn check_routing(routing: &RoutingResult, model: &ToyModel, x: &Matrix) -> Result<()> {
    if routing.num_tokens() != x.rows() {
        return Err(Error::input("routing does not belong to this batch"));
    }
    if routing.num_experts() != model.bank.num_experts() {
        return Err(Error::input("routing and expert bank disagree on E"));
    }
    Ok(())
}

/// Loss and balancing loss with the selections of `routing` held fixed,
/// recomputed from the current parameters.
pub fn selection_loss(model: &ToyModel, routing: &RoutingResult, cfg: &RouterConfig, x: &Matrix, y: &Matrix) -> Result<(f64, f64)> {
    check_batch(model, x, y)?;
    check_routing(routing, model, x)?;
    let w = model.bank.routing_centroids();
    let (s_count, d_out) = (x.rows(), y.cols());
    let with_aux = cfg.balance_weight != 0.0;
    let f = crate::router::dispatch_fractions(routing);
    let (mut sq, mut aux) = (0.0, 0.0);
    for s in 0..s_count {
        let t = token_pass(model, &w, routing, x.row(s), y.row(s), s, with_aux);
        sq += t.residual.iter().map(|r| r * r).sum::<f64>();
        aux += t.candidates.iter().zip(&t.shortlist_probs).map(|(&c, &p)| p * f[c]).sum::<f64>();
    }
    let e = model.bank.num_experts() as f64;
    Ok((sq / (s_count * d_out) as f64, cfg.balance_weight * e * aux / s_count as f64))
}

/// Gradient of `loss + aux` with the selections of `routing` held fixed.
/// The codebook is not an input: it cannot receive or influence gradients.
pub fn backward(model: &ToyModel, routing: &RoutingResult, cfg: &RouterConfig, x: &Matrix, y: &Matrix) -> Result<Gradients> {
    check_batch(model, x, y)?;
    check_routing(routing, model, x)?;
    let w = model.bank.routing_centroids();
    let (s_count, d_out) = (x.rows(), y.cols());
    let with_aux = cfg.balance_weight != 0.0;
    let f = crate::router::dispatch_fractions(routing);
    let aux_scale = cfg.balance_weight * model.bank.num_experts() as f64 / s_count as f64;
    let mse_scale = 2.0 / (s_count * d_out) as f64;
    let mut g = Gradients::zeros_like(model);
    // gradient with respect to the projected centroids
    let mut g_w = Matrix::zeros(w.rows(), w.cols());
    for s in 0..s_count {
        let t = token_pass(model, &w, routing, x.row(s), y.row(s), s, with_aux);
        let gp: Vec<f64> = t.residual.iter().map(|r| mse_scale * r).collect();
        for (o, &gpo) in gp.iter().enumerate() {
            axpy(gpo, &t.mixed, g.readout.row_mut(o));
        }
        let g_mixed = model.readout.mul_vec_transposed(&gp);
        let mut g_h = vec![0.0; t.h.len()];
        let mut g_weights = vec![0.0; t.selected.len()];
        for (j, &e) in t.selected.iter().enumerate() {
            let act = t.pre[j].max(0.0);
            let v_dot = dot(model.bank.ffn_out.row(e), &g_mixed);
            g_weights[j] = act * v_dot;
            axpy(t.weights[j] * act, &g_mixed, g.ffn_out.row_mut(e));
            if t.pre[j] > 0.0 {
                let g_act = t.weights[j] * v_dot;
                axpy(g_act, &t.h, g.ffn_in.row_mut(e));
                axpy(g_act, model.bank.ffn_in.row(e), &mut g_h);
            }
        }
        let mean_g: f64 = t.weights.iter().zip(&g_weights).map(|(a, b)| a * b).sum();
        for (j, &e) in t.selected.iter().enumerate() {
            let g_z = t.weights[j] * (g_weights[j] - mean_g);
            axpy(g_z, w.row(e), &mut g_h);
            axpy(g_z, &t.h, g_w.row_mut(e));
        }
        if with_aux {
            let mean_f: f64 = t.candidates.iter().zip(&t.shortlist_probs).map(|(&c, &p)| p * f[c]).sum();
            for (&c, &p) in t.candidates.iter().zip(&t.shortlist_probs) {
                let g_z = aux_scale * p * (f[c] - mean_f);
                axpy(g_z, w.row(c), &mut g_h);
                axpy(g_z, &t.h, g_w.row_mut(c));
            }
        }
        for (r, &gh) in g_h.iter().enumerate() {
            axpy(gh, x.row(s), g.encoder.row_mut(r));
        }
    }
    if model.bank.normalize_centroids {
        // d(w/‖w‖)/dw = (I − w̃w̃ᵀ)/‖w‖
        for e in 0..w.rows() {
            let raw = model.bank.centroids.row(e);
            let n = crate::numerics::norm(raw);
            let gw = g_w.row(e);
            if n <= NORM_EPS || gw.iter().all(|&v| v == 0.0) {
                continue;
            }
            let wt = w.row(e);
            let proj = dot(wt, gw);
            for ((out, &gv), &wv) in g.centroids.row_mut(e).iter_mut().zip(gw).zip(wt) {
                *out = (gv - proj * wv) / n;
            }
        }
    } else {
        g.centroids = g_w;
    }
    Ok(g)
}

/// Forward pass followed by [`backward`] at the selections just made.
#[allow(clippy::too_many_arguments)]
pub fn toy_gradients(
    model: &ToyModel,
    cb: &CodebookState,
    cache: &mut ShortlistCache,
    cfg: &RouterConfig,
    x: &Matrix,
    y: &Matrix,
    rng: &RngStream,
) -> Result<(Gradients, ForwardOutput)> {
    let out = toy_forward(model, cb, cache, cfg, x, y, rng)?;
    let g = backward(model, &out.routing, cfg, x, y)?;
    Ok((g, out))
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Score against raw centroids instead of their projections.
    pub no_projection: bool,
    /// Keep the initial codebook for the whole run.
    pub static_codebook: bool,
    /// Euclidean codeword assignment and unprojected running means.
    pub euclidean: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub clusters: usize,
    pub noise_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { input_dim: 16, output_dim: 16, clusters: 16, noise_std: 0.05 }
    }
}

impl TaskConfig {
    pub fn build(&self, rng: &mut RngStream) -> Result<SyntheticTask> {
        make_synthetic_task(self.input_dim, self.output_dim, self.clusters, self.noise_std, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub accum: usize,
    pub micro_batch: usize,
    pub lr: f64,
    /// Model width `d`.
    pub dim: usize,
    pub router: RouterConfig,
    pub codebook: CodebookParams,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            accum: 1,
            micro_batch: 256,
            lr: 20.0,
            dim: 16,
            router: RouterConfig::new(16, 256, 32, 8),
            codebook: CodebookParams::default(),
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accum == 0 || self.micro_batch == 0 {
            return Err(Error::config("A >= 1 and S >= 1 required"));
        }
        if self.dim == 0 {
            return Err(Error::config("model width d must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive and finite, got {}", self.lr)));
        }
        self.router.validate()?;
        self.codebook_params().validate()
    }

    /// Codebook parameters with the ablation switches folded in.
    pub fn codebook_params(&self) -> CodebookParams {
        CodebookParams {
            frozen: self.codebook.frozen || self.ablations.static_codebook,
            euclidean_mode: self.codebook.euclidean_mode || self.ablations.euclidean,
            ..self.codebook
        }
    }

    pub fn training_router(&self) -> RouterConfig {
        RouterConfig { training_mode: true, ..self.router }
    }

    /// AIR routing cost of one optimizer step.
    pub fn step_flops(&self) -> Result<f64> {
        let r = &self.router;
        let p = LedgerParams {
            tokens: self.micro_batch as u64,
            experts: r.num_experts as u64,
            codes: r.num_codes as u64,
            shortlist: r.shortlist_size as u64,
            top_k: r.top_k as u64,
            selected_clusters: 1,
            dim: self.dim as u64,
            amortization_tokens: (self.micro_batch * self.accum) as u64,
        };
        Ok(router_flop_ledger(RouterKind::Air, &p)?.total() * self.accum as f64)
    }
}

/// Metrics recorded after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
    /// Mean top-K overlap of noise-free index routing with exact routing.
    pub overlap: f64,
    pub dead_frac: f64,
    /// Expert usage entropy in nats.
    pub entropy: f64,
    pub mean_quant_err: f64,
    pub flops_cumulative: f64,
}

pub const METRICS_CSV_HEADER: &str = "step,loss,aux_loss,overlap,dead_frac,entropy,mean_quant_err,flops_cumulative";

pub fn metrics_csv(history: &[StepMetrics]) -> String {
    use crate::io::fmt_sig;
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.step,
            fmt_sig(m.loss),
            fmt_sig(m.aux_loss),
            fmt_sig(m.overlap),
            fmt_sig(m.dead_frac),
            fmt_sig(m.entropy),
            fmt_sig(m.mean_quant_err),
            fmt_sig(m.flops_cumulative)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<StepMetrics>,
    pub model: ToyModel,
    pub codebook: CodebookState,
    pub cache: ShortlistCache,
}

/// Model and codebook before the first step.
pub fn initial_state(task: &SyntheticTask, tcfg: &TrainConfig, rng: &RngStream) -> Result<(ToyModel, CodebookState)> {
    tcfg.validate()?;
    let r = &tcfg.router;
    let model = ToyModel::init(
        task.input_dim(),
        tcfg.dim,
        task.output_dim(),
        r.num_experts,
        !tcfg.ablations.no_projection,
        &mut rng.fork(MODEL_SITE),
    );
    let seed_batch = task.sample(tcfg.micro_batch * tcfg.accum, &rng.fork(CODEBOOK_INIT_SITE).fork(0), 0);
    let h = model.encode(&seed_batch.inputs)?;
    let cb = CodebookState::init(&h, r.num_codes, tcfg.codebook_params(), &mut rng.fork(CODEBOOK_INIT_SITE).fork(1))?;
    Ok((model, cb))
}

pub fn train_loop(task: &SyntheticTask, tcfg: &TrainConfig, rng: &RngStream) -> Result<TrainOutcome> {
    train_loop_with(task, tcfg, rng, |_, _| {})
}

/// [`train_loop`] calling `on_step(t, model)` after each optimizer step.
pub fn train_loop_with<F>(task: &SyntheticTask, tcfg: &TrainConfig, rng: &RngStream, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ToyModel),
{
    let (mut model, mut cb) = initial_state(task, tcfg, rng)?;
    let train_cfg = tcfg.training_router();
    let eval_cfg = RouterConfig { training_mode: false, ..tcfg.router };
    let step_flops = tcfg.step_flops()?;
    let (a_count, s_count) = (tcfg.accum, tcfg.micro_batch);
    let mut cache = ShortlistCache::empty();
    let mut history = Vec::with_capacity(tcfg.steps);
    for t in 0..tcfg.steps {
        let mut grads = Gradients::zeros_like(&model);
        let mut usage = UsageStats::new(tcfg.router.num_experts);
        let (mut loss, mut aux, mut overlap, mut quant) = (0.0, 0.0, 0.0, 0.0);
        let data = rng.fork(DATA_SITE).fork(t as u64);
        for a in 0..a_count {
            let batch = task.sample(s_count, &data, a * s_count);
            let h = model.encode(&batch.inputs)?;
            cb.update(&h, &mut rng.fork(CODEBOOK_SITE).fork(t as u64).fork(a as u64))?;
            let route_rng = rng.fork(ROUTE_SITE).fork(t as u64).fork(a as u64);
            let (g, out) = toy_gradients(&model, &cb, &mut cache, &train_cfg, &batch.inputs, &batch.targets, &route_rng)?;
            if !out.total().is_finite() || !g.is_finite() {
                return Err(Error::Divergence { step: t });
            }
            grads.add_scaled(&g, 1.0 / a_count as f64);
            loss += out.loss / a_count as f64;
            aux += out.aux / a_count as f64;
            usage.add(&out.routing);
            let eval = air_route(&h, &model.bank, &cb, &mut cache, &eval_cfg, &route_rng)?;
            let exact = exact_route(&h, &model.bank, tcfg.router.top_k)?;
            overlap += overlap_fraction(&eval, &exact)? / a_count as f64;
            quant += cb.mean_quantization_error(&h)? / a_count as f64;
        }
        model.apply(&grads, tcfg.lr);
        if !model.parts().iter().all(|m| m.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        cache.invalidate();
        on_step(t, &model);
        history.push(StepMetrics {
            step: t,
            loss,
            aux_loss: aux,
            overlap,
            dead_frac: dead_expert_fraction(&usage),
            entropy: usage_entropy(&usage)?,
            mean_quant_err: quant,
            flops_cumulative: step_flops * (t + 1) as f64,
        });
    }
    Ok(TrainOutcome { history, model, codebook: cb, cache })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup(seed: u64, lambda: f64, normalize: bool) -> (ToyModel, CodebookState, RouterConfig, Matrix, Matrix) {
        let mut rng = RngStream::new(seed, 0);
        let task = make_synthetic_task(5, 3, 3, 0.1, &mut rng).unwrap();
        let model = ToyModel::init(5, 4, 3, 8, normalize, &mut rng);
        let batch = task.sample(6, &rng.fork(1), 0);
        let h = model.encode(&batch.inputs).unwrap();
        let cb = CodebookState::init(&h, 2, CodebookParams::default(), &mut rng).unwrap();
        let mut cfg = RouterConfig::new(2, 8, 5, 2);
        cfg.balance_weight = lambda;
        (model, cb, cfg, batch.inputs, batch.targets)
    }

    #[test]
    fn task_is_deterministic_and_unit_norm() {
        let a = make_synthetic_task(6, 2, 4, 0.1, &mut RngStream::new(3, 0)).unwrap();
        let b = make_synthetic_task(6, 2, 4, 0.1, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(a, b);
        for r in a.cluster_means().iter_rows() {
            assert!((crate::numerics::norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.sample(9, &RngStream::new(1, 1), 0), b.sample(9, &RngStream::new(1, 1), 0));
    }

    #[test]
    fn single_noiseless_cluster_is_one_linear_map() {
        let task = make_synthetic_task(4, 3, 1, 0.0, &mut RngStream::new(2, 0)).unwrap();
        let batch = task.sample(20, &RngStream::new(5, 0), 0);
        for s in 0..20 {
            let y = task.map(0).mul_vec(batch.inputs.row(s));
            assert_eq!(y, batch.targets.row(s));
        }
    }

    #[test]
    fn split_sampling_matches_whole() {
        let task = make_synthetic_task(4, 2, 3, 0.1, &mut RngStream::new(2, 0)).unwrap();
        let rng = RngStream::new(8, 0);
        let whole = task.sample(10, &rng, 0);
        let tail = task.sample(4, &rng, 6);
        for j in 0..4 {
            assert_eq!(whole.inputs.row(6 + j), tail.inputs.row(j));
            assert_eq!(whole.targets.row(6 + j), tail.targets.row(j));
        }
    }

    #[test]
    fn zero_readout_gives_target_energy() {
        let (mut model, cb, cfg, x, y) = small_setup(1, 0.0, true);
        model.readout = Matrix::zeros(3, 4);
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        let energy: f64 = y.as_slice().iter().map(|v| v * v).sum::<f64>() / (y.rows() * 3) as f64;
        assert!((out.loss - energy).abs() < 1e-15);
        assert_eq!(out.aux, 0.0);
    }

    #[test]
    fn hand_instance_two_experts() {
        // d = 2, E = 2, K = 1, one codeword, identity encoder and readout
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let bank = ExpertBank::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0], vec![0.5, -1.0]]).unwrap(),
            Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap(),
            true,
        )
        .unwrap();
        let model = ToyModel { encoder: id.clone(), bank, readout: id };
        let cb = CodebookState::from_parts(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![1.0],
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            CodebookParams::default(),
        )
        .unwrap();
        let mut cfg = RouterConfig::new(1, 2, 2, 1);
        cfg.balance_weight = 0.0;
        let x = Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        // logits 0.3 and 0.4 → expert 1; relu(0.5·0.3 − 0.4) = 0 → prediction 0
        assert_eq!(out.routing.topk_indices(0), &[1]);
        assert_eq!(out.loss, 1.0);
        let x = Matrix::from_rows(&[vec![0.5, 0.1]]).unwrap();
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        // expert 0, relu(0.6) = 0.6, prediction (1.2, 0)
        assert_eq!(out.routing.topk_indices(0), &[0]);
        let want = ((1.2f64 - 1.0).powi(2) + 1.0) / 2.0;
        assert!((out.loss - want).abs() < 1e-15);
    }

    #[test]
    fn selection_loss_matches_forward() {
        for normalize in [true, false] {
            let (model, cb, cfg, x, y) = small_setup(4, 0.3, normalize);
            let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
            let (l, a) = selection_loss(&model, &out.routing, &cfg, &x, &y).unwrap();
            assert!((l - out.loss).abs() < 1e-14);
            assert!((a - out.aux).abs() < 1e-14);
        }
    }

    fn finite_difference_check(seed: u64, lambda: f64, normalize: bool) {
        let (model, cb, cfg, x, y) = small_setup(seed, lambda, normalize);
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        let g = backward(&model, &out.routing, &cfg, &x, &y).unwrap();
        let step = 1e-4;
        for (i, name) in PARAMETER_NAMES.iter().enumerate() {
            for k in 0..model.parts()[i].as_slice().len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.part_mut(i).as_mut_slice()[k] += delta;
                    let (l, a) = selection_loss(&m, &out.routing, &cfg, &x, &y).unwrap();
                    l + a
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                let analytic = g.parts()[i].as_slice()[k];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
                assert!(err <= 1e-3, "{name}[{k}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(11, 0.0, true);
        finite_difference_check(12, 0.2, true);
        finite_difference_check(13, 0.2, false);
    }

    #[test]
    fn unrouted_experts_get_zero_gradient() {
        let (model, cb, cfg, x, y) = small_setup(5, 0.0, true);
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        let g = backward(&model, &out.routing, &cfg, &x, &y).unwrap();
        for e in 0..8 {
            if out.routing.usage_counts()[e] == 0 {
                for part in [&g.centroids, &g.ffn_in, &g.ffn_out] {
                    assert!(part.row(e).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn single_expert_selection_has_no_centroid_gradient() {
        let (model, cb, mut cfg, x, y) = small_setup(6, 0.0, true);
        cfg.top_k = 1;
        let out = toy_forward(&model, &cb, &mut ShortlistCache::empty(), &cfg, &x, &y, &RngStream::new(0, 0)).unwrap();
        let g = backward(&model, &out.routing, &cfg, &x, &y).unwrap();
        assert!(g.centroids.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_ignore_codebook_perturbation() {
        let (model, cb, cfg, x, y) = small_setup(7, 0.1, true);
        let mut cache = ShortlistCache::empty();
        let rng = RngStream::new(0, 0);
        let (g1, out1) = toy_gradients(&model, &cb, &mut cache, &cfg, &x, &y, &rng).unwrap();
        let mut words = cb.codewords().clone();
        for v in words.as_mut_slice() {
            *v *= 1.0 + 1e-9;
        }
        let perturbed = CodebookState::from_parts(words, cb.ema_counts().to_vec(), cb.ema_sums().clone(), *cb.params()).unwrap();
        let (g2, out2) = toy_gradients(&model, &perturbed, &mut cache, &cfg, &x, &y, &rng).unwrap();
        assert_eq!(out1.routing, out2.routing);
        assert_eq!(g1, g2);
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig { steps: 6, micro_batch: 32, dim: 4, router: RouterConfig::new(3, 12, 6, 2), ..TrainConfig::default() }
    }

    fn tiny_task() -> SyntheticTask {
        make_synthetic_task(5, 3, 4, 0.05, &mut RngStream::new(9, 0)).unwrap()
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let task = tiny_task();
        let cfg = TrainConfig { steps: 0, ..tiny_train_config() };
        let rng = RngStream::new(21, 0);
        let out = train_loop(&task, &cfg, &rng).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, initial_state(&task, &cfg, &rng).unwrap().0);
    }

    #[test]
    fn one_rebuild_per_step() {
        let task = tiny_task();
        let cfg = TrainConfig { accum: 3, ..tiny_train_config() };
        let out = train_loop(&task, &cfg, &RngStream::new(2, 0)).unwrap();
        assert_eq!(out.cache.rebuild_count(), cfg.steps as u64);
        assert_eq!(out.history.len(), cfg.steps);
    }

    #[test]
    fn runs_are_reproducible() {
        let task = tiny_task();
        let cfg = tiny_train_config();
        let a = train_loop(&task, &cfg, &RngStream::new(5, 0)).unwrap();
        let b = train_loop(&task, &cfg, &RngStream::new(5, 0)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let task = tiny_task();
        let cfg = TrainConfig { lr: 1e200, ..tiny_train_config() };
        match train_loop(&task, &cfg, &RngStream::new(5, 0)) {
            Err(Error::Divergence { step }) => assert!(step < cfg.steps),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let task = tiny_task();
        for cfg in [
            TrainConfig { accum: 0, ..tiny_train_config() },
            TrainConfig { micro_batch: 0, ..tiny_train_config() },
            TrainConfig { lr: -1.0, ..tiny_train_config() },
        ] {
            assert!(matches!(train_loop(&task, &cfg, &RngStream::new(0, 0)), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let task = tiny_task();
        let out = train_loop(&task, &TrainConfig { steps: 2, ..tiny_train_config() }, &RngStream::new(1, 0)).unwrap();
        let csv = metrics_csv(&out.history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
        assert_eq!(lines[2].split(',').count(), 8);
    }
}
