//! `mltile`: tile planning, traffic simulation, quantization and pipeline
//! benchmarks from the command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 infeasible tiling,
//! 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mltile::error::{PipelineError, PlanError, QuantError, TensorError};
use mltile::memmodel::{
    apply_mlt_with, build_attention_graph, simulate_calibrated, simulate_with, AttentionGraph, BaselineCostTable,
    CalibratedCosts, SimOptions, TiledCompute, TrafficReport, DEFAULT_TILE_COMPUTE_OVERHEAD, MEASURED_TILED_COMPUTE,
};
use mltile::pipeline::{
    compare_runs, run_pipeline, run_with_fidelity, CostModel, ModelDescriptor, RunConfig, RunOutput,
};
use mltile::quant::{
    calibrate, make_params, quantize, BitWidth, Granularity, Precision, PrecisionPolicy, QuantParams, Scheme,
};
use mltile::{plan_tiles, AttentionDims, ElementType, HardwareProfile, Tensor};

#[derive(Parser)]
#[command(
    name = "mltile",
    version,
    about = "Memory-aware tiled attention planner and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick query tiles for one attention block and print the plan as JSON.
    Plan(PlanArgs),
    /// Simulate DMA and compute time of one attention block.
    Traffic(TrafficArgs),
    /// Run a model descriptor and print its benchmark report.
    Run(RunArgs),
    /// Quantize a tensor file.
    Quantize(QuantizeArgs),
    /// Compare two saved runs block by block.
    Compare(CompareArgs),
    /// Predict the tiled total from an untiled cost breakdown.
    CalibrateTable(CalibrateArgs),
}

#[derive(Args)]
struct HwArgs {
    /// Hardware profile JSON. Defaults to the built-in NPU proxy.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Override the profile's SRAM size.
    #[arg(long)]
    sram_bytes: Option<u64>,
    /// Override the profile's SRAM utilization target.
    #[arg(long)]
    utilization: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    /// Block shape as `n_q,n_k,d`.
    #[arg(long, value_parser = parse_dims)]
    dims: AttentionDims,
    #[arg(long, default_value = "fp16")]
    dtype: ElementType,
    #[command(flatten)]
    hw: HwArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrafficArgs {
    #[arg(long, value_parser = parse_dims)]
    dims: AttentionDims,
    #[arg(long, default_value = "fp16")]
    dtype: ElementType,
    #[command(flatten)]
    hw: HwArgs,
    /// Tile the block; percentages stay relative to the untiled block.
    #[arg(long)]
    mlt: bool,
    #[arg(long, value_enum, default_value_t = CostArg::Profile)]
    cost_model: CostArg,
    /// Calc-row slowdown of tiled graphs.
    #[arg(long, default_value_t = DEFAULT_TILE_COMPUTE_OVERHEAD)]
    overhead: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Model descriptor JSON. Defaults to the built-in sd-proxy.
    #[arg(long)]
    descriptor: Option<PathBuf>,
    #[command(flatten)]
    hw: HwArgs,
    #[arg(long, default_value_t = 1)]
    steps: u32,
    #[arg(long)]
    mlt: bool,
    /// `w8a16` quantizes the UNet and keeps the other stages in FP16.
    #[arg(long, default_value = "w8a16")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CostArg::Profile)]
    cost_model: CostArg,
    #[arg(long, default_value_t = DEFAULT_TILE_COMPUTE_OVERHEAD)]
    overhead: f64,
    /// Also run all-FP32 and attach per-block fidelity.
    #[arg(long)]
    fidelity: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the report and block outputs, readable by `compare`.
    #[arg(long)]
    save_outputs: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input tensor (TNSR1).
    input: PathBuf,
    /// Quantization params JSON. Without it params are calibrated on the
    /// input itself.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Symmetric)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    bits: u8,
    /// Per-channel axis; per-tensor when absent.
    #[arg(long)]
    axis: Option<usize>,
    /// Where to write calibrated params.
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Reference run directory (usually FP32).
    reference: PathBuf,
    /// Run directory to score against the reference.
    test: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Untiled breakdown JSON. Defaults to the built-in measured table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Percentage of the V-only load after tiling.
    #[arg(long)]
    v_load: f64,
    /// Scale the untiled calc rows by `1 + overhead` instead of using the
    /// measured tiled calc rows.
    #[arg(long)]
    overhead: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Profile,
    Calibrated,
}

impl From<CostArg> for CostModel {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Profile => CostModel::Profile,
            CostArg::Calibrated => CostModel::Calibrated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Symmetric,
    Asymmetric,
}

fn parse_dims(s: &str) -> Result<AttentionDims, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [n_q, n_k, d] = parts[..] else {
        return Err(format!("expected n_q,n_k,d, got `{s}`"));
    };
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let dims = AttentionDims::new(num(n_q)?, num(n_k)?, num(d)?);
    dims.validate().map_err(|e| e.to_string())?;
    Ok(dims)
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bit width must be 8 or 16, got `{s}`")),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Failure {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
        Failure {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        let code = if matches!(e, PlanError::Infeasible { .. }) {
            2
        } else {
            1
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    if matches!(e, TensorError::Io(_)) {
        3
    } else {
        1
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Plan {
                source: PlanError::Infeasible { .. },
                ..
            } => 2,
            PipelineError::Io(_) => 3,
            PipelineError::Tensor(t) | PipelineError::Quant(QuantError::Tensor(t)) => tensor_code(t),
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<QuantError> for Failure {
    fn from(e: QuantError) -> Self {
        let code = match &e {
            QuantError::Tensor(t) => tensor_code(t),
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<mltile::GraphError> for Failure {
    fn from(e: mltile::GraphError) -> Self {
        Failure::usage(e)
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn load_profile(args: &HwArgs) -> Result<HardwareProfile, Failure> {
    let mut hw = match &args.profile {
        Some(p) => HardwareProfile::from_json(&read_text(p)?)?,
        None => HardwareProfile::npu_proxy(),
    };
    if let Some(b) = args.sram_bytes {
        hw.sram_bytes = b;
    }
    if let Some(u) = args.utilization {
        hw.utilization_target = u;
    }
    hw.validate()?;
    Ok(hw)
}

fn cmd_plan(a: PlanArgs) -> Result<(), Failure> {
    let hw = load_profile(&a.hw)?;
    let plan = plan_tiles(a.dims, a.dtype, &hw)?;
    emit(&to_json(&plan), a.out.as_deref())
}

fn traffic_report(a: &TrafficArgs) -> Result<TrafficReport, Failure> {
    let hw = load_profile(&a.hw)?;
    let opts = SimOptions {
        tile_compute_overhead: a.overhead,
    };
    if !(a.overhead.is_finite() && a.overhead >= 0.0) {
        return Err(Failure::usage("--overhead must be non-negative"));
    }
    let costs = match a.cost_model {
        CostArg::Profile => None,
        CostArg::Calibrated => Some(CalibratedCosts::measured(&hw, a.dtype)?),
    };
    let sim = |g: &AttentionGraph| -> TrafficReport {
        match &costs {
            None => simulate_with(g, &hw, &opts),
            Some(k) => simulate_calibrated(g, k, &opts),
        }
    };
    let untiled = sim(&build_attention_graph(a.dims, a.dtype, None)?);
    let run = if a.mlt {
        let plan = plan_tiles(a.dims, a.dtype, &hw)?;
        sim(&build_attention_graph(a.dims, a.dtype, Some(&plan))?)
    } else {
        untiled.clone()
    };
    Ok(run.relative_to(&untiled, "untiled"))
}

fn cmd_traffic(a: TrafficArgs) -> Result<(), Failure> {
    let report = traffic_report(&a)?;
    let text = match a.format {
        Format::Json => to_json(&report),
        Format::Csv | Format::Text => report.to_csv(),
    };
    emit(&text, a.out.as_deref())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let descriptor = match &a.descriptor {
        Some(p) => ModelDescriptor::from_json(&read_text(p)?)?,
        None => ModelDescriptor::sd_proxy(),
    };
    let config = RunConfig {
        steps: a.steps,
        mlt: a.mlt,
        precision: PrecisionPolicy::from_flag(a.precision),
        hw: load_profile(&a.hw)?,
        seed: a.seed,
        cost_model: a.cost_model.into(),
        sim: SimOptions {
            tile_compute_overhead: a.overhead,
        },
    };
    let run = if a.fidelity {
        run_with_fidelity(&descriptor, &config)?
    } else {
        run_pipeline(&descriptor, &config)?
    };
    if let Some(dir) = &a.save_outputs {
        run.save(dir)?;
    }
    let text = match a.format {
        Format::Csv => run.report.to_csv(),
        Format::Json | Format::Text => run.report.to_json() + "\n",
    };
    emit(&text, a.out.as_deref())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<(), Failure> {
    let input = Tensor::load(&a.input).map_err(|e| match e {
        TensorError::Io(io) => Failure::io(&a.input, io),
        other => Failure::usage(format!("{}: {other}", a.input.display())),
    })?;
    let params: QuantParams = match &a.params {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => {
            let granularity = match a.axis {
                Some(axis) => Granularity::PerChannel { axis },
                None => Granularity::PerTensor,
            };
            let scheme = match a.scheme {
                SchemeArg::Symmetric => Scheme::Symmetric,
                SchemeArg::Asymmetric => Scheme::Asymmetric,
            };
            let bits = BitWidth::try_from(a.bits).map_err(Failure::usage)?;
            make_params(&calibrate(std::slice::from_ref(&input), granularity)?, scheme, bits)
        }
    };
    let q = quantize(&input, &params)?;
    q.save(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    if let Some(p) = &a.params_out {
        emit(&to_json(&params), Some(p))?;
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let reference = RunOutput::load(&a.reference)?;
    let test = RunOutput::load(&a.test)?;
    let summary = compare_runs(&reference, &test)?;
    emit(&to_json(&summary), a.out.as_deref())
}

#[derive(Serialize)]
struct Prediction {
    predicted_total_pct: f64,
    latency_gain_pct: f64,
    v_load_pct: f64,
    compute: TiledCompute,
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    let table = match &a.table {
        Some(p) => {
            let t: BaselineCostTable =
                serde_json::from_str(&read_text(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            t.validate()?;
            t
        }
        None => BaselineCostTable::measured(),
    };
    let compute = match a.overhead {
        Some(eps) => TiledCompute::Overhead(eps),
        None => TiledCompute::Explicit(MEASURED_TILED_COMPUTE),
    };
    let total = apply_mlt_with(&table, a.v_load, compute)?;
    let p = Prediction {
        predicted_total_pct: total,
        latency_gain_pct: 100.0 - total,
        v_load_pct: a.v_load,
        compute,
    };
    let text = match a.format {
        Format::Json => to_json(&p),
        Format::Csv => format!(
            "predicted_total_pct,latency_gain_pct\n{},{}\n",
            p.predicted_total_pct, p.latency_gain_pct
        ),
        Format::Text => format!(
            "predicted total: {:.1}%\nlatency gain: {:.1}%\n",
            p.predicted_total_pct, p.latency_gain_pct
        ),
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Traffic(a) => cmd_traffic(a),
        Command::Run(a) => cmd_run(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Compare(a) => cmd_compare(a),
        Command::CalibrateTable(a) => cmd_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
