//! `airx` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or constraint violation,
//! 3 data or corruption error, 4 numeric divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use airmoe::analysis::{check_bound_batch, mass_recall, usage_entropy, dead_expert_fraction};
use airmoe::baselines::{exact_route, hierarchical_route, validate_fairness, HierarchicalConfig};
use airmoe::codebook::CodebookState;
use airmoe::flops::{router_flop_ledger, CostCategory, LedgerParams, RouterKind};
use airmoe::io::{fmt_sig, load_index, routing_csv, bound_csv, save_index, tokens_from_csv, tokens_from_f32_bytes, IndexFile};
use airmoe::numerics::{Matrix, RngStream};
use airmoe::router::{air_route, refresh_shortlists, ExpertBank, RouterConfig, RoutingResult};
use airmoe::trainer::{metrics_csv, train_loop};
use airmoe::{Error, RunConfig, UsageStats};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

const SYNTHETIC_SITE: u64 = 1;
const BANK_SITE: u64 = 2;
const CODEBOOK_SITE: u64 = 3;
const ROUTE_SITE: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "airx", version, about = "Inverted-index routing for granular mixture-of-experts")]
struct Cli {
    /// Worker threads for batched routing (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index operations.
    Index {
        #[command(subcommand)]
        action: IndexCommand,
    },
    /// Route a token batch and emit per-token selections as CSV.
    Route(RouteArgs),
    /// Check the routing-mass lower bound for every token.
    VerifyBound(DataArgs),
    /// Compare inverted-index, hierarchical and exact routing.
    Bench(BenchArgs),
    /// Train the toy model and emit per-step metrics.
    TrainToy(TrainArgs),
    /// Print the analytical routing-cost ledger.
    Flops(FlopsArgs),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Fit a codebook on tokens and write a binary index.
    Build(BuildArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    rows: usize,
    cols: usize,
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected S,d but got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
        Ok(Dims { rows: parse(a)?, cols: parse(b)? })
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: u64,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write CSV output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Source {
    /// Generate the token batch from the seed.
    #[arg(long, conflicts_with = "tokens")]
    synthetic: bool,
    /// Token file: CSV (`.csv`) or headerless little-endian f32 with --dims.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Batch shape S,d for binary token files and synthetic batches.
    #[arg(long)]
    dims: Option<Dims>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: Source,
    /// Expert centroids (E×d, same formats as tokens); random when omitted.
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// Codebook update passes over the batch.
    #[arg(long, default_value_t = 10)]
    iters: usize,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: Source,
    /// Index file; a synthetic index is built from the config when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Route exactly over all experts instead of through the index.
    #[arg(long)]
    exact: bool,
    /// Experts per token (defaults to the config's top_k).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run even when the routers are not comparable.
    #[arg(long)]
    allow_unfair: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Accepted for uniformity; training always samples its own task.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, default_value = "air")]
    router: String,
    #[arg(long = "E")]
    experts: u64,
    #[arg(long = "G", default_value_t = 1)]
    codes: u64,
    #[arg(long = "M", default_value_t = 1)]
    shortlist: u64,
    #[arg(long = "K")]
    top_k: u64,
    #[arg(long = "S")]
    tokens: u64,
    #[arg(long = "d")]
    dim: u64,
    /// Clusters selected per token by the hierarchical router.
    #[arg(long = "l", default_value_t = 1)]
    selected: u64,
    /// Tokens sharing one shortlist rebuild (defaults to S).
    #[arg(long)]
    amortization: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for uniformity; the ledger is analytical.
    #[arg(long)]
    synthetic: bool,
}

/// Command failure with its exit status.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::Precondition(_) => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::InvalidInput(_)
            | Error::Format(_)
            | Error::Corruption(_)
            | Error::UnsupportedVersion { .. }
            | Error::Internal(_)
            | Error::Io(_) => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_DATA, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Output goes to the given writers.
pub fn run_with_io<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(stderr, "error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Index { action: IndexCommand::Build(a) } => index_build(&a, stdout),
        Command::Route(a) => route(&a, stdout),
        Command::VerifyBound(a) => verify_bound(&a, stdout),
        Command::Bench(a) => bench(&a, stdout),
        Command::TrainToy(a) => train_toy(&a, stdout),
        Command::Flops(a) => flops(&a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        // downstream closed the pipe early, as `| head` does
        Err(f) if f.code == EXIT_DATA && f.message.contains("Broken pipe") => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

/// [`run_with_io`] on the process's standard streams.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with_io(argv, &mut out, &mut err)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", p.display())))?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

fn read_matrix(path: &Path, dims: Option<Dims>) -> Result<Matrix, Failure> {
    let bytes = fs::read(path).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = String::from_utf8(bytes).map_err(|_| fail(EXIT_DATA, format!("{}: not UTF-8", path.display())))?;
        let m = tokens_from_csv(&text)?;
        if let Some(d) = dims {
            if (m.rows(), m.cols()) != (d.rows, d.cols) {
                return Err(fail(EXIT_DATA, format!("--dims {},{} but file holds {}x{}", d.rows, d.cols, m.rows(), m.cols())));
            }
        }
        Ok(m)
    } else {
        let d = dims.ok_or_else(|| fail(EXIT_USAGE, "binary token files need --dims S,d"))?;
        Ok(tokens_from_f32_bytes(&bytes, d.rows, d.cols)?)
    }
}

fn load_tokens(source: &Source, cfg: &RunConfig, rng: &RngStream) -> Result<Matrix, Failure> {
    match (&source.tokens, source.synthetic) {
        (Some(p), _) => read_matrix(p, source.dims),
        (None, true) => {
            let d = source.dims.unwrap_or(Dims { rows: cfg.train.micro_batch, cols: cfg.train.dim });
            if d.rows == 0 || d.cols == 0 {
                return Err(fail(EXIT_CONFIG, "synthetic batch needs S >= 1 and d >= 1"));
            }
            Ok(Matrix::random_normal(d.rows, d.cols, 1.0, &mut rng.fork(SYNTHETIC_SITE)))
        }
        (None, false) => Err(fail(EXIT_USAGE, "one of --tokens or --synthetic is required")),
    }
}

fn write_output(out: Option<&Path>, csv: &str, stdout: &mut dyn Write) -> CmdResult {
    match out {
        Some(p) => fs::write(p, csv).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", p.display()))),
        None => stdout.write_all(csv.as_bytes()).map_err(Failure::from),
    }
}

fn router_config(cfg: &RunConfig) -> RouterConfig {
    RouterConfig { training_mode: false, ..cfg.train.router }
}

/// Fits a codebook on `tokens` and builds a noise-free index over `bank`.
fn fit_index(tokens: &Matrix, bank: &ExpertBank, cfg: &RunConfig, iters: usize, rng: &RngStream) -> Result<IndexFile, Failure> {
    let rcfg = router_config(cfg);
    let params = cfg.train.codebook_params();
    let mut cb_rng = rng.fork(CODEBOOK_SITE);
    let mut cb = CodebookState::init(tokens, rcfg.num_codes, params, &mut cb_rng)?;
    for _ in 0..iters {
        cb.update(tokens, &mut cb_rng)?;
    }
    let cache = refresh_shortlists(&cb, bank, &rcfg, rng)?;
    Ok(IndexFile::new(cb, bank.centroids.clone(), bank.normalize_centroids, cache)?)
}

fn random_bank(cfg: &RunConfig, dim: usize, rng: &RngStream) -> ExpertBank {
    let e = cfg.train.router.num_experts;
    ExpertBank::random(e, dim, !cfg.train.ablations.no_projection, &mut rng.fork(BANK_SITE))
}

fn bank_from_index(index: &IndexFile) -> ExpertBank {
    let (e, d) = (index.centroids.rows(), index.centroids.cols());
    ExpertBank {
        centroids: index.centroids.clone(),
        ffn_in: Matrix::zeros(e, d),
        ffn_out: Matrix::zeros(e, d),
        normalize_centroids: index.normalize_centroids,
    }
}

fn index_build(a: &BuildArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(a.common.config.as_deref())?;
    let rng = RngStream::new(a.common.seed, 0);
    let out = a.common.out.as_deref().ok_or_else(|| fail(EXIT_USAGE, "index build needs --out <path>"))?;
    let tokens = load_tokens(&a.source, &cfg, &rng)?;
    let bank = match &a.centroids {
        Some(p) => {
            let c = read_matrix(p, None).or_else(|_| {
                let rows = cfg.train.router.num_experts;
                read_matrix(p, Some(Dims { rows, cols: tokens.cols() }))
            })?;
            let (e, d) = (c.rows(), c.cols());
            ExpertBank::new(c, Matrix::zeros(e, d), Matrix::zeros(e, d), !cfg.train.ablations.no_projection)?
        }
        None => random_bank(&cfg, tokens.cols(), &rng),
    };
    let mut cfg = cfg;
    cfg.train.router.num_experts = bank.num_experts();
    let index = fit_index(&tokens, &bank, &cfg, a.iters, &rng)?;
    save_index(out, &index)?;
    writeln!(
        stdout,
        "wrote {}: d={} G={} E={} M={} mean_quant_err={}",
        out.display(),
        index.codebook.dim(),
        index.codebook.num_codes(),
        index.num_experts(),
        index.shortlist_size(),
        fmt_sig(index.codebook.mean_quantization_error(&tokens)?)
    )?;
    Ok(())
}

/// Tokens, bank, codebook, cache and router configuration for a command.
struct Context {
    tokens: Matrix,
    bank: ExpertBank,
    index: IndexFile,
    rcfg: RouterConfig,
    rng: RngStream,
}

fn context(a: &DataArgs) -> Result<Context, Failure> {
    let cfg = load_config(a.common.config.as_deref())?;
    let rng = RngStream::new(a.common.seed, 0);
    let tokens = load_tokens(&a.source, &cfg, &rng)?;
    let (index, bank) = match &a.index {
        Some(p) => {
            let index = load_index(p)?;
            let bank = bank_from_index(&index);
            (index, bank)
        }
        None => {
            let bank = random_bank(&cfg, tokens.cols(), &rng);
            (fit_index(&tokens, &bank, &cfg, 10, &rng)?, bank)
        }
    };
    if tokens.cols() != bank.dim() {
        return Err(fail(EXIT_DATA, format!("tokens have d={} but the index has d={}", tokens.cols(), bank.dim())));
    }
    let rcfg = RouterConfig {
        num_codes: index.codebook.num_codes(),
        num_experts: index.num_experts(),
        shortlist_size: index.shortlist_size(),
        ..router_config(&cfg)
    };
    Ok(Context { tokens, bank, index, rcfg, rng })
}

fn route_with_index(ctx: &mut Context) -> Result<RoutingResult, Failure> {
    let route_rng = ctx.rng.fork(ROUTE_SITE);
    Ok(air_route(&ctx.tokens, &ctx.bank, &ctx.index.codebook, &mut ctx.index.shortlists, &ctx.rcfg, &route_rng)?)
}

fn route(a: &RouteArgs, stdout: &mut dyn Write) -> CmdResult {
    let mut ctx = context(&a.data)?;
    if let Some(k) = a.k {
        ctx.rcfg.top_k = k;
    }
    let routing = if a.exact {
        exact_route(&ctx.tokens, &ctx.bank, ctx.rcfg.top_k)?
    } else {
        route_with_index(&mut ctx)?
    };
    write_output(a.data.common.out.as_deref(), &routing_csv(&routing), stdout)
}

fn verify_bound(a: &DataArgs, stdout: &mut dyn Write) -> CmdResult {
    let ctx = context(a)?;
    let reports = check_bound_batch(&ctx.tokens, &ctx.index.codebook, &ctx.index.shortlists, &ctx.bank)?;
    write_output(a.common.out.as_deref(), &bound_csv(&reports), stdout)?;
    let held = reports.iter().filter(|r| r.holds).count();
    if a.common.out.is_some() {
        writeln!(stdout, "bound holds for {held}/{} tokens", reports.len())?;
    }
    if held != reports.len() {
        return Err(fail(EXIT_DATA, format!("bound violated for {} tokens", reports.len() - held)));
    }
    Ok(())
}

pub const BENCH_CSV_HEADER: &str = "router,overlap,mass_recall,entropy,dead_frac,flops_total,flops_matmul";

fn bench(a: &BenchArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(a.data.common.config.as_deref())?;
    let air = router_config(&cfg);
    let hier = HierarchicalConfig::new(air.num_codes, cfg.selected_clusters, air.top_k);
    let report = validate_fairness(&air, &hier);
    if !report.is_fair() && !a.allow_unfair {
        return Err(fail(
            EXIT_CONFIG,
            format!("unfair comparison (pass --allow-unfair to run anyway):\n{report}"),
        ));
    }
    let mut ctx = context(&a.data)?;
    let k = ctx.rcfg.top_k;
    let exact = exact_route(&ctx.tokens, &ctx.bank, k)?;
    let mut rows: Vec<(&str, RoutingResult, RouterKind)> = vec![("air", route_with_index(&mut ctx)?, RouterKind::Air)];
    match hier.validate(ctx.bank.num_experts()) {
        Ok(()) => rows.push((
            "hierarchical",
            hierarchical_route(&ctx.tokens, &ctx.bank, &hier, 0.0, &ctx.rng.fork(ROUTE_SITE))?,
            RouterKind::Hierarchical,
        )),
        Err(e) if a.allow_unfair => writeln!(stdout, "# hierarchical skipped: {e}")?,
        Err(e) => return Err(e.into()),
    }
    rows.push(("exact", exact.clone(), RouterKind::Standard));

    let mut csv = String::new();
    for (key, value) in report.key_values() {
        let _ = writeln!(csv, "# {key}={value}");
    }
    let setting = [
        ("seed", a.data.common.seed.to_string()),
        ("S", ctx.tokens.rows().to_string()),
        ("d", ctx.tokens.cols().to_string()),
        ("E", ctx.rcfg.num_experts.to_string()),
        ("G", ctx.rcfg.num_codes.to_string()),
        ("M", ctx.rcfg.shortlist_size.to_string()),
        ("K", k.to_string()),
        ("l", cfg.selected_clusters.to_string()),
        ("entropy_unit", "nats".to_string()),
    ];
    for (key, value) in setting {
        let _ = writeln!(csv, "# {key}={value}");
    }
    let _ = writeln!(csv, "{BENCH_CSV_HEADER}");
    let s = ctx.tokens.rows() as u64;
    let params = LedgerParams {
        tokens: s,
        experts: ctx.rcfg.num_experts as u64,
        codes: ctx.rcfg.num_codes as u64,
        shortlist: ctx.rcfg.shortlist_size as u64,
        top_k: k as u64,
        selected_clusters: cfg.selected_clusters as u64,
        dim: ctx.tokens.cols() as u64,
        amortization_tokens: s,
    };
    for (name, routing, kind) in &rows {
        let overlap = airmoe::overlap_fraction(routing, &exact)?;
        let mut recall = 0.0;
        for t in 0..routing.num_tokens() {
            recall += mass_recall(ctx.tokens.row(t), routing.candidates(t), &ctx.bank)?;
        }
        recall /= routing.num_tokens().max(1) as f64;
        let usage = UsageStats::from_routing(routing);
        let ledger = router_flop_ledger(*kind, &params)?;
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{}",
            fmt_sig(overlap),
            fmt_sig(recall),
            fmt_sig(usage_entropy(&usage)?),
            fmt_sig(dead_expert_fraction(&usage)),
            fmt_sig(ledger.total()),
            fmt_sig(ledger.subtotal(CostCategory::Matmul))
        );
    }
    write_output(a.data.common.out.as_deref(), &csv, stdout)
}

fn train_toy(a: &TrainArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(a.common.config.as_deref())?;
    let rng = RngStream::new(a.common.seed, 0);
    let task = cfg.task.build(&mut rng.fork(SYNTHETIC_SITE))?;
    let outcome = train_loop(&task, &cfg.train, &rng)?;
    write_output(a.common.out.as_deref(), &metrics_csv(&outcome.history), stdout)
}

fn flops(a: &FlopsArgs, stdout: &mut dyn Write) -> CmdResult {
    let kind: RouterKind = a.router.parse()?;
    let p = LedgerParams {
        tokens: a.tokens,
        experts: a.experts,
        codes: a.codes,
        shortlist: a.shortlist,
        top_k: a.top_k,
        selected_clusters: a.selected,
        dim: a.dim,
        amortization_tokens: a.amortization.unwrap_or(a.tokens),
    };
    let ledger = router_flop_ledger(kind, &p)?;
    write!(stdout, "{ledger}")?;
    match &a.out {
        Some(_) => write_output(a.out.as_deref(), &ledger.to_csv(), stdout),
        None => {
            writeln!(stdout)?;
            write_output(None, &ledger.to_csv(), stdout)
        }
    }
}
