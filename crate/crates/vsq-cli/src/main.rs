//! `vsq` — calibrate, quantize, simulate, sweep, and cost-report for
//! per-vector scaled quantization.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 internal invariant
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use vsq_core::calibration::{self, CalibMethod, Granularity};
use vsq_core::cost;
use vsq_core::datapath::{DatapathConfig, ScaleWidth};
use vsq_core::error::VsqError;
use vsq_core::fixture;
use vsq_core::nn::{self, Network, NetworkSpec, RunMode};
use vsq_core::quant::{self, QuantConfig, Rounding};
use vsq_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "vsq", version, about = "Per-vector scaled quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute clip ranges for a tensor and write them as JSON.
    Calibrate(CalibrateArgs),
    /// Quantize a tensor to a VSQ file and report reconstruction error.
    Quantize(QuantizeArgs),
    /// Run a network through the quantized datapath and report per-layer error.
    Simulate(SimulateArgs),
    /// Sweep bitwidth/vector-size grids over a fixture network.
    Sweep(SweepArgs),
    /// Print the analytical cost report for a configuration.
    Cost(CostArgs),
}

#[derive(Args)]
struct QuantArgs {
    /// Bitwidths in W/A/ws/as notation, e.g. 4/8/6/10; `-` marks a
    /// coarse-scaled operand (no per-vector scale).
    #[arg(long)]
    config: Option<String>,
    /// JSON QuantConfig file; unknown keys are rejected.
    #[arg(long)]
    config_file: Option<PathBuf>,
    /// Vector size V.
    #[arg(long)]
    v: Option<usize>,
    /// Round ties to even instead of away from zero.
    #[arg(long)]
    ties_to_even: bool,
}

impl QuantArgs {
    /// Resolve the layered configuration: defaults <- file <- shorthand <-
    /// flags. Returns the config plus the per-operand scale widths.
    fn resolve(&self) -> Result<(QuantConfig, ScaleWidth, ScaleWidth), VsqError> {
        let mut cfg = match &self.config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| VsqError::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str::<QuantConfig>(&text)
                    .map_err(|e| VsqError::MalformedConfig(e.to_string()))?
            }
            None => QuantConfig::default(),
        };
        let mut widths = (ScaleWidth::Bits(cfg.m_w), ScaleWidth::Bits(cfg.m_a));
        if let Some(shorthand) = &self.config {
            let (n_w, n_a, ws, r#as) = parse_shorthand(shorthand)?;
            cfg.n_w = n_w;
            cfg.n_a = n_a;
            cfg.m_w = ws.bits();
            cfg.m_a = r#as.bits();
            widths = (ws, r#as);
        }
        if let Some(v) = self.v {
            cfg.v = v;
            cfg.granularity_w = Granularity::PerVector { v };
            cfg.granularity_a = Granularity::PerVector { v };
        }
        if self.ties_to_even {
            cfg.rounding = Rounding::HalfToEven;
        }
        Ok((cfg, widths.0, widths.1))
    }
}

/// Parse the W/A/ws/as shorthand from the figure notation.
fn parse_shorthand(s: &str) -> Result<(u8, u8, ScaleWidth, ScaleWidth), VsqError> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 4 {
        return Err(VsqError::InvalidArgument(format!(
            "config shorthand must be W/A/ws/as, got {s:?}"
        )));
    }
    let elem = |p: &str| -> Result<u8, VsqError> {
        p.parse()
            .map_err(|_| VsqError::InvalidArgument(format!("invalid element bitwidth {p:?}")))
    };
    let scale = |p: &str| -> Result<ScaleWidth, VsqError> {
        if p == "-" {
            Ok(ScaleWidth::Coarse)
        } else {
            Ok(ScaleWidth::Bits(p.parse().map_err(|_| {
                VsqError::InvalidArgument(format!("invalid scale bitwidth {p:?}"))
            })?))
        }
    };
    Ok((elem(parts[0])?, elem(parts[1])?, scale(parts[2])?, scale(parts[3])?))
}

#[derive(Args)]
struct CalibrateArgs {
    /// Input tensor (VST file).
    #[arg(long)]
    input: PathBuf,
    /// per-layer, per-channel, or per-vector.
    #[arg(long, default_value = "per-vector")]
    granularity: String,
    /// Vector size for per-vector granularity.
    #[arg(long, default_value_t = 16)]
    v: usize,
    /// max, percentile, entropy, or mse.
    #[arg(long, default_value = "max")]
    method: String,
    /// Percentile rank for method=percentile.
    #[arg(long, default_value_t = 0.999)]
    q: f64,
    /// Target bitwidth for entropy/mse calibration.
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input tensor (VST file).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    /// Use a single floating-point scale per vector instead of the two-level
    /// integer factorization.
    #[arg(long)]
    single_level: bool,
    /// Output VSQ path.
    #[arg(long)]
    output: PathBuf,
    /// Error-report CSV path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Network spec (JSON); omit to use the built-in seeded fixture network.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Input tensor (VST); omit to use a seeded fixture input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fixture seed for generated networks/inputs.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// reference, per-layer, per-channel/poc, pv-single, pv-two-level/pvaw,
    /// pvao, pvwo.
    #[arg(long, default_value = "pvaw")]
    mode: String,
    #[command(flatten)]
    quant: QuantArgs,
    /// Round the per-vector scale product down to B bits.
    #[arg(long)]
    scale_product_bits: Option<u8>,
    /// Write the final output tensor here (VST).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-layer error-report CSV path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Network spec (JSON); omit to use the built-in seeded fixture network.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated vector sizes, subset of {1,2,4,8,16,32,64}.
    #[arg(long, default_value = "16")]
    v_grid: String,
    /// Comma-separated element bitwidths, subset of {3,4,6,8}.
    #[arg(long, default_value = "4")]
    n_grid: String,
    /// Comma-separated scale bitwidths, subset of {3,4,6,8,10}.
    #[arg(long, default_value = "4")]
    m_grid: String,
    /// Modes to sweep (comma-separated).
    #[arg(long, default_value = "pvaw")]
    modes: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    scale_product_bits: Option<u8>,
    /// Emit CSV instead of JSON.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Cost(args) => cmd_cost(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                VsqError::InvalidArgument(_) => 2,
                VsqError::ContractViolation(_) | VsqError::Internal(_) => 4,
                _ => 3,
            })
        }
    }
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<(), VsqError> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|source| VsqError::Io {
            path: p.clone(),
            source,
        }),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn parse_granularity(name: &str, v: usize) -> Result<Granularity, VsqError> {
    Ok(match name {
        "per-layer" => Granularity::PerLayer,
        "per-channel" => Granularity::PerChannel,
        "per-vector" => Granularity::PerVector { v },
        _ => {
            return Err(VsqError::InvalidArgument(format!(
                "unknown granularity {name:?} (expected per-layer, per-channel, per-vector)"
            )))
        }
    })
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), VsqError> {
    let t = Tensor::load(&args.input)?;
    let granularity = parse_granularity(&args.granularity, args.v)?;
    let method = match args.method.as_str() {
        "max" => CalibMethod::Max,
        "percentile" => CalibMethod::Percentile { q: args.q },
        "entropy" => CalibMethod::Entropy { bits: args.bits },
        "mse" => CalibMethod::Mse { bits: args.bits },
        other => {
            return Err(VsqError::InvalidArgument(format!(
                "unknown method {other:?} (expected max, percentile, entropy, mse)"
            )))
        }
    };
    let alphas = calibration::calibrate(&t, granularity, method)?;
    let json = serde_json::to_string_pretty(&alphas)
        .map_err(|e| VsqError::Internal(e.to_string()))?;
    write_or_print(&args.output, &format!("{json}\n"))
}

fn cmd_quantize(args: QuantizeArgs) -> Result<(), VsqError> {
    let t = Tensor::load(&args.input)?;
    let (cfg, _, _) = args.quant.resolve()?;
    let g = Granularity::PerVector { v: cfg.v };
    let alphas = calibration::calibrate(&t, g, CalibMethod::Max)?;
    let qt = if args.single_level {
        quant::quantize_single(
            &t,
            cfg.n_w,
            cfg.signed_w,
            cfg.unsigned_full_range,
            g,
            &alphas,
            cfg.rounding,
        )?
    } else {
        quant::quantize_two_level(
            &t,
            cfg.n_w,
            cfg.signed_w,
            cfg.unsigned_full_range,
            cfg.m_w,
            cfg.v,
            &alphas,
            cfg.rounding,
        )?
    };
    quant::save_vsq(&qt, &args.output)?;

    let back = qt.reconstruct();
    let mse: f64 = t
        .data()
        .iter()
        .zip(back.data())
        .map(|(&a, &b)| {
            let e = a as f64 - b as f64;
            e * e
        })
        .sum::<f64>()
        / t.len() as f64;
    let max_abs = t
        .data()
        .iter()
        .zip(back.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0f64, f64::max);
    let sqnr = nn::sqnr_db(t.data(), back.data());
    let m = if args.single_level { 0 } else { cfg.m_w };
    let report = format!(
        "mode,V,N,M,mse,sqnr_db,max_abs_err,memory_overhead,effective_bitwidth\n\
         {},{},{},{},{},{},{},{},{}\n",
        if args.single_level { "pv-single" } else { "pv-two-level" },
        cfg.v,
        cfg.n_w,
        m,
        mse,
        sqnr,
        max_abs,
        cost::memory_overhead(cfg.n_w, m, cfg.v)?,
        cost::effective_bitwidth(cfg.n_w, m, cfg.v)?,
    );
    write_or_print(&args.report, &report)
}

fn load_network(
    network: &Option<PathBuf>,
    input: &Option<PathBuf>,
    seed: u64,
) -> Result<(Network, Tensor), VsqError> {
    let net = match network {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| VsqError::Io {
                path: path.clone(),
                source,
            })?;
            let spec = NetworkSpec::parse(&text)?;
            spec.resolve(path.parent().unwrap_or_else(|| std::path::Path::new(".")))?
        }
        None => fixture::fixture_network(seed).0,
    };
    let input_t = match input {
        Some(path) => Tensor::load(path)?,
        None => fixture::seeded_tensor(&net.input_shape, seed.wrapping_add(100), 1.0)?,
    };
    Ok((net, input_t))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), VsqError> {
    let (net, input) = load_network(&args.network, &args.input, args.seed)?;
    let mode = RunMode::parse(&args.mode)?;
    let (cfg, _, _) = args.quant.resolve()?;
    let (out, report) = nn::run_network(&net, &input, mode, &cfg, args.scale_product_bits)?;
    if let Some(path) = &args.output {
        out.save(path)?;
    }
    write_or_print(&args.report, &report.to_csv())
}

fn parse_grid<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, VsqError> {
    let items: Result<Vec<T>, _> = s.split(',').filter(|p| !p.is_empty()).map(str::parse).collect();
    let items =
        items.map_err(|_| VsqError::InvalidArgument(format!("invalid {what} grid {s:?}")))?;
    if items.is_empty() {
        return Err(VsqError::InvalidArgument(format!("{what} grid is empty")));
    }
    Ok(items)
}

struct SweepRow {
    mode: &'static str,
    v: usize,
    n: u8,
    m: u8,
    mse: f64,
    sqnr_db: f64,
    max_abs_err: f64,
    weight_error_bound: f64,
    memory_overhead: f64,
    effective_bitwidth: f64,
    dot_width_bits: u8,
    partial_sum_width_bits: u8,
}

fn cmd_sweep(args: SweepArgs) -> Result<(), VsqError> {
    let (net, input) = load_network(&args.network, &args.input, args.seed)?;
    let v_grid: Vec<usize> = parse_grid(&args.v_grid, "V")?;
    let n_grid: Vec<u8> = parse_grid(&args.n_grid, "N")?;
    let m_grid: Vec<u8> = parse_grid(&args.m_grid, "M")?;
    let modes: Vec<RunMode> = args
        .modes
        .split(',')
        .filter(|p| !p.is_empty())
        .map(RunMode::parse)
        .collect::<Result<_, _>>()?;
    if modes.is_empty() {
        return Err(VsqError::InvalidArgument("modes list is empty".to_string()));
    }

    let mut configs = Vec::new();
    for &mode in &modes {
        for &v in &v_grid {
            for &n in &n_grid {
                for &m in &m_grid {
                    let cfg = QuantConfig {
                        n_w: n,
                        n_a: n,
                        m_w: m,
                        m_a: m,
                        v,
                        granularity_w: Granularity::PerVector { v },
                        granularity_a: Granularity::PerVector { v },
                        ..QuantConfig::default()
                    };
                    cfg.validate_grid()?;
                    configs.push((mode, cfg));
                }
            }
        }
    }

    let threads = std::env::var("VSQ_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .min(configs.len().max(1));

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<(usize, SweepRow)>> = Mutex::new(Vec::with_capacity(configs.len()));
    let errors: Mutex<Vec<VsqError>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= configs.len() {
                    break;
                }
                let (mode, cfg) = &configs[idx];
                match sweep_row(&net, &input, *mode, cfg) {
                    Ok(row) => rows.lock().unwrap().push((idx, row)),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by_key(|(idx, _)| *idx); // configs were generated in sorted order

    let mut csv = String::from(
        "mode,V,N_w,N_a,M_w,M_a,mse,sqnr_db,max_abs_err,weight_error_bound,\
         memory_overhead,effective_bitwidth,dot_width_bits,partial_sum_width_bits\n",
    );
    for (_, r) in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.v,
            r.n,
            r.n,
            r.m,
            r.m,
            r.mse,
            r.sqnr_db,
            r.max_abs_err,
            r.weight_error_bound,
            r.memory_overhead,
            r.effective_bitwidth,
            r.dot_width_bits,
            r.partial_sum_width_bits
        ));
    }
    write_or_print(&args.output, &csv)
}

fn sweep_row(
    net: &Network,
    input: &Tensor,
    mode: RunMode,
    cfg: &QuantConfig,
) -> Result<SweepRow, VsqError> {
    let (_, report) = nn::run_network(net, input, mode, cfg, None)?;
    let last = report
        .rows
        .last()
        .ok_or_else(|| VsqError::Internal("empty report".to_string()))?;
    // worst per-element weight error bound s/2 across all layers at this V/N
    let g = Granularity::PerVector { v: cfg.v };
    let mut bound = 0.0f64;
    for layer in &net.layers {
        let alphas = calibration::calibrate(&layer.weights, g, CalibMethod::Max)?;
        for &a in &alphas.alphas {
            bound = bound.max(quant::compute_scale(a, cfg.n_w) / 2.0);
        }
    }
    let dcfg = DatapathConfig {
        n_w: cfg.n_w,
        n_a: cfg.n_a,
        m_w: ScaleWidth::Bits(cfg.m_w),
        m_a: ScaleWidth::Bits(cfg.m_a),
        v: cfg.v,
        scale_product_bits: None,
        accum_guard_bits: 12,
    };
    Ok(SweepRow {
        mode: mode.label(),
        v: cfg.v,
        n: cfg.n_w,
        m: cfg.m_w,
        mse: last.mse,
        sqnr_db: last.sqnr_db,
        max_abs_err: last.max_abs_err,
        weight_error_bound: bound,
        memory_overhead: cost::memory_overhead(cfg.n_w, cfg.m_w, cfg.v)?,
        effective_bitwidth: cost::effective_bitwidth(cfg.n_w, cfg.m_w, cfg.v)?,
        dot_width_bits: dcfg.dot_width(),
        partial_sum_width_bits: dcfg.partial_sum_width(),
    })
}

fn cmd_cost(args: CostArgs) -> Result<(), VsqError> {
    let (cfg, ws, r#as) = args.quant.resolve()?;
    let dcfg = DatapathConfig {
        n_w: cfg.n_w,
        n_a: cfg.n_a,
        m_w: ws,
        m_a: r#as,
        v: cfg.v,
        scale_product_bits: args.scale_product_bits,
        accum_guard_bits: 12,
    };
    let report = cost::datapath_widths(&dcfg)?;
    let out = if args.csv {
        format!(
            "operand,element_bits,scale_bits,vector_size,memory_overhead,effective_bitwidth\n\
             weights,{},{},{},{},{}\nactivations,{},{},{},{},{}\n\
             dot_width_bits,{}\npartial_sum_width_bits,{}\n",
            report.weights.element_bits,
            report.weights.scale_bits,
            report.weights.vector_size,
            report.weights.memory_overhead_fraction,
            report.weights.effective_bitwidth,
            report.activations.element_bits,
            report.activations.scale_bits,
            report.activations.vector_size,
            report.activations.memory_overhead_fraction,
            report.activations.effective_bitwidth,
            report.dot_width_bits,
            report.partial_sum_width_bits,
        )
    } else {
        format!(
            "{}\n",
            serde_json::to_string_pretty(&report).map_err(|e| VsqError::Internal(e.to_string()))?
        )
    };
    write_or_print(&args.output, &out)
}
