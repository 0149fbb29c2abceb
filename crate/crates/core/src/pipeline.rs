//! Multi-stage benchmark harness: model descriptors, run configuration and
//! the per-stage report.
//!
//! Every attention block executes numerically on seeded random operands at
//! its stage's precision, and its time comes from the serial cost model.
//! Tiling applies to UNet blocks only. The UNet stage runs `steps` times;
//! since the step loop is a plain count, its blocks execute once and the
//! per-step time is multiplied.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attention_reference, attention_tiled};
use crate::dtype::ElementType;
use crate::error::PipelineError;
use crate::memmodel::{
    build_attention_graph, simulate_calibrated, simulate_with, CalibratedCosts, SimOptions, TrafficReport,
};
use crate::planner::{plan_tiles, AttentionDims, HardwareProfile, TilePlan};
use crate::quant::{fidelity_metrics, FidelityMetrics, Precision, PrecisionPolicy, W8A16Attention};
use crate::random::{attention_inputs, rng};
use crate::tensor::Tensor;
use crate::{attention::AttentionInputs, ops};

pub const TOOL_NAME: &str = "mltile";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Encoder,
    Unet,
    Decoder,
}

impl StageName {
    pub fn name(self) -> &'static str {
        match self {
            StageName::Encoder => "encoder",
            StageName::Unet => "unet",
            StageName::Decoder => "decoder",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDescriptor {
    pub name: StageName,
    #[serde(default)]
    pub blocks: Vec<AttentionDims>,
    /// Modeled cost of everything in the stage that is not attention.
    pub fixed_cost_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub stages: Vec<StageDescriptor>,
}

impl ModelDescriptor {
    /// Illustrative stand-in with one cross-attention block per UNet
    /// resolution. Fixed costs are placeholders, not measurements.
    pub fn sd_proxy() -> ModelDescriptor {
        let dims = |n_q, d| AttentionDims::new(n_q, 77, d);
        ModelDescriptor {
            name: "sd-proxy".into(),
            note: Some("illustrative shapes and costs, not measured".into()),
            stages: vec![
                StageDescriptor {
                    name: StageName::Encoder,
                    blocks: vec![],
                    fixed_cost_us: 50_000.0,
                },
                StageDescriptor {
                    name: StageName::Unet,
                    blocks: vec![dims(4096, 40), dims(1024, 80), dims(256, 160), dims(64, 160)],
                    fixed_cost_us: 90_000.0,
                },
                StageDescriptor {
                    name: StageName::Decoder,
                    blocks: vec![],
                    fixed_cost_us: 480_000.0,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Descriptor(m));
        let mut seen = HashSet::new();
        for s in &self.stages {
            if !seen.insert(s.name) {
                return bad(format!("stage `{}` appears twice", s.name));
            }
            if !(s.fixed_cost_us.is_finite() && s.fixed_cost_us >= 0.0) {
                return bad(format!("stage `{}` fixed cost must be finite and non-negative", s.name));
            }
            for (i, b) in s.blocks.iter().enumerate() {
                if b.validate().is_err() {
                    return bad(format!("stage `{}` block {i} has non-positive dims {b:?}", s.name));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ModelDescriptor, PipelineError> {
        let m: ModelDescriptor = serde_json::from_str(text).map_err(|e| PipelineError::Descriptor(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelDescriptor, PipelineError> {
        ModelDescriptor::from_json(&fs::read_to_string(path)?)
    }

    pub fn sha256(&self) -> String {
        sha256_json(self)
    }
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("plain data serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// How block times are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    /// Bandwidth, setup and engine rates straight from the hardware profile.
    #[default]
    Profile,
    /// Per-row rates fitted to the measured untiled breakdown, scaled so the
    /// reference block costs what the profile predicts for it.
    Calibrated,
}

impl FromStr for CostModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "profile" => Ok(CostModel::Profile),
            "calibrated" => Ok(CostModel::Calibrated),
            _ => Err(format!("unknown cost model `{s}` (expected profile or calibrated)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: u32,
    pub mlt: bool,
    pub precision: PrecisionPolicy,
    pub hw: HardwareProfile,
    pub seed: u64,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub sim: SimOptions,
}

impl RunConfig {
    pub fn new(hw: HardwareProfile) -> RunConfig {
        RunConfig {
            steps: 1,
            mlt: false,
            precision: PrecisionPolicy::default(),
            hw,
            seed: 0,
            cost_model: CostModel::Profile,
            sim: SimOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.steps == 0 {
            return Err(PipelineError::Config("steps must be at least 1".into()));
        }
        self.hw
            .validate()
            .map_err(|e| PipelineError::Config(format!("hardware profile: {e}")))?;
        let eps = self.sim.tile_compute_overhead;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(PipelineError::Config(format!(
                "tile compute overhead {eps} must be non-negative"
            )));
        }
        Ok(())
    }

    pub fn precision_for(&self, stage: StageName) -> Precision {
        match stage {
            StageName::Encoder => self.precision.encoder,
            StageName::Unet => self.precision.unet,
            StageName::Decoder => self.precision.decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub descriptor: String,
    pub descriptor_sha256: String,
    pub profile_sha256: String,
    pub seed: u64,
    pub steps: u32,
    pub mlt: bool,
    pub precision: PrecisionPolicy,
    pub cost_model: CostModel,
    pub tile_compute_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub dims: AttentionDims,
    pub precision: Precision,
    pub tile_count: usize,
    /// Time of the same block without tiling.
    pub untiled_time_us: f64,
    /// Traffic as run, with percentages relative to the untiled block.
    pub traffic: TrafficReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: StageName,
    pub precision: Precision,
    pub mlt: bool,
    pub runs: u32,
    pub fixed_cost_us: f64,
    pub attention_time_us: f64,
    pub attention_untiled_time_us: f64,
    pub per_run_time_us: f64,
    pub time_us: f64,
    pub blocks: Vec<BlockReport>,
}

impl StageReport {
    /// Attention time as run relative to the untiled attention time, in
    /// percent. `None` for stages without blocks.
    pub fn attention_ratio_pct(&self) -> Option<f64> {
        (self.attention_untiled_time_us > 0.0).then(|| 100.0 * self.attention_time_us / self.attention_untiled_time_us)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub provenance: Provenance,
    pub stages: Vec<StageReport>,
    pub total_time_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelitySummary>,
}

impl BenchReport {
    pub fn stage(&self, name: StageName) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// One row per stage plus a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,precision,mlt,runs,per_run_time_us,time_us\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.name, s.precision, s.mlt, s.runs, s.per_run_time_us, s.time_us
            ));
        }
        out.push_str(&format!("total,-,-,-,-,{}\n", self.total_time_us));
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub stage: StageName,
    pub block: usize,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: BenchReport,
    pub outputs: Vec<BlockOutput>,
}

const REPORT_FILE: &str = "report.json";

fn output_file(stage: StageName, block: usize) -> String {
    format!("{stage}-{block}.tnsr")
}

impl RunOutput {
    /// Writes `report.json` and one tensor file per block into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), self.report.to_json())?;
        for o in &self.outputs {
            o.tensor.save(dir.join(output_file(o.stage, o.block)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<RunOutput, PipelineError> {
        let dir = dir.as_ref();
        let report: BenchReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
        let mut outputs = Vec::new();
        for s in &report.stages {
            for i in 0..s.blocks.len() {
                outputs.push(BlockOutput {
                    stage: s.name,
                    block: i,
                    tensor: Tensor::load(dir.join(output_file(s.name, i)))?,
                });
            }
        }
        Ok(RunOutput { report, outputs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFidelity {
    pub stage: StageName,
    pub block: usize,
    pub metrics: FidelityMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub blocks: Vec<BlockFidelity>,
    /// Metrics over all block outputs taken together.
    pub aggregate: Option<FidelityMetrics>,
}

impl FidelitySummary {
    pub fn min_cosine(&self) -> Option<f64> {
        self.blocks.iter().map(|b| b.metrics.cosine_similarity).reduce(f64::min)
    }
}

enum Costs {
    Profile,
    Calibrated(CalibratedCosts),
}

impl Costs {
    fn simulate(&self, g: &crate::memmodel::AttentionGraph, c: &RunConfig) -> TrafficReport {
        match self {
            Costs::Profile => simulate_with(g, &c.hw, &c.sim),
            Costs::Calibrated(k) => simulate_calibrated(g, k, &c.sim),
        }
    }
}

struct BlockJob {
    stage: StageName,
    index: usize,
    dims: AttentionDims,
    precision: Precision,
    plan: Option<TilePlan>,
    seed: u64,
}

fn execute_block(job: &BlockJob) -> Result<Tensor, PipelineError> {
    let inputs = attention_inputs(job.dims, job.seed);
    let out = match job.precision {
        Precision::Fp32 => match &job.plan {
            Some(p) => attention_tiled(&inputs, p)?,
            None => attention_reference(&inputs)?,
        },
        Precision::Fp16 => {
            let half = AttentionInputs::with_scale(
                ops::cast(&inputs.q, ElementType::Fp16)?,
                ops::cast(&inputs.k, ElementType::Fp16)?,
                ops::cast(&inputs.v, ElementType::Fp16)?,
                inputs.scale,
            )?;
            let out = match &job.plan {
                Some(p) => attention_tiled(
                    &half,
                    &TilePlan {
                        dtype: ElementType::Fp16,
                        ..p.clone()
                    },
                )?,
                None => attention_reference(&half)?,
            };
            ops::cast(&out, ElementType::Fp32)?
        }
        Precision::W8A16 => {
            let w = W8A16Attention::calibrate(&inputs, std::slice::from_ref(&inputs.q))?;
            match &job.plan {
                Some(p) => w.forward_tiled(&inputs.q, p)?,
                None => w.forward(&inputs.q)?,
            }
        }
    };
    Ok(out)
}

/// Runs every stage of `m` under `c`.
pub fn run_pipeline(m: &ModelDescriptor, c: &RunConfig) -> Result<RunOutput, PipelineError> {
    m.validate()?;
    c.validate()?;
    for s in &m.stages {
        let p = c.precision_for(s.name);
        if p == Precision::W8A16 && s.name != StageName::Unet {
            return Err(PipelineError::InvalidPrecision {
                stage: s.name.to_string(),
                precision: p.to_string(),
            });
        }
    }

    // Block seeds are drawn in descriptor order so they do not depend on
    // scheduling.
    let mut seeds = rng(c.seed);
    let mut jobs = Vec::new();
    for s in &m.stages {
        let precision = c.precision_for(s.name);
        let dtype = precision.activation_dtype();
        for (index, &dims) in s.blocks.iter().enumerate() {
            let plan = if c.mlt && s.name == StageName::Unet {
                Some(plan_tiles(dims, dtype, &c.hw).map_err(|source| PipelineError::Plan {
                    stage: s.name.to_string(),
                    block: index,
                    source,
                })?)
            } else {
                None
            };
            jobs.push(BlockJob {
                stage: s.name,
                index,
                dims,
                precision,
                plan,
                seed: seeds.next_u64(),
            });
        }
    }

    let results: Vec<Result<Tensor, PipelineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|j| scope.spawn(move || execute_block(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("block worker panicked"))
            .collect()
    });

    let mut calibrated: Vec<(ElementType, Costs)> = Vec::new();
    let mut outputs = Vec::with_capacity(jobs.len());
    let mut block_reports = Vec::with_capacity(jobs.len());
    for (job, result) in jobs.iter().zip(results) {
        outputs.push(BlockOutput {
            stage: job.stage,
            block: job.index,
            tensor: result?,
        });
        let dtype = job.precision.activation_dtype();
        let costs = match c.cost_model {
            CostModel::Profile => &Costs::Profile,
            CostModel::Calibrated => {
                if !calibrated.iter().any(|(d, _)| *d == dtype) {
                    let k = CalibratedCosts::measured(&c.hw, dtype)?;
                    calibrated.push((dtype, Costs::Calibrated(k)));
                }
                &calibrated.iter().find(|(d, _)| *d == dtype).expect("inserted above").1
            }
        };
        let untiled = costs.simulate(&build_attention_graph(job.dims, dtype, None)?, c);
        let traffic = match &job.plan {
            Some(p) => costs.simulate(&build_attention_graph(job.dims, dtype, Some(p))?, c),
            None => untiled.clone(),
        }
        .relative_to(&untiled, "untiled");
        block_reports.push(BlockReport {
            dims: job.dims,
            precision: job.precision,
            tile_count: job.plan.as_ref().map_or(1, |p| p.tile_count),
            untiled_time_us: untiled.total_time_us,
            traffic,
            fidelity: None,
        });
    }

    let mut reports = block_reports.into_iter();
    let mut stages = Vec::with_capacity(m.stages.len());
    for s in &m.stages {
        let blocks: Vec<BlockReport> = reports.by_ref().take(s.blocks.len()).collect();
        let attention_time_us = blocks.iter().fold(0.0, |acc, b| acc + b.traffic.total_time_us);
        let attention_untiled_time_us = blocks.iter().fold(0.0, |acc, b| acc + b.untiled_time_us);
        let runs = if s.name == StageName::Unet { c.steps } else { 1 };
        let per_run_time_us = s.fixed_cost_us + attention_time_us;
        stages.push(StageReport {
            name: s.name,
            precision: c.precision_for(s.name),
            mlt: c.mlt && s.name == StageName::Unet,
            runs,
            fixed_cost_us: s.fixed_cost_us,
            attention_time_us,
            attention_untiled_time_us,
            per_run_time_us,
            time_us: per_run_time_us * f64::from(runs),
            blocks,
        });
    }
    let total_time_us = stages.iter().fold(0.0, |acc, s| acc + s.time_us);

    let report = BenchReport {
        provenance: Provenance {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            descriptor: m.name.clone(),
            descriptor_sha256: m.sha256(),
            profile_sha256: sha256_json(&c.hw),
            seed: c.seed,
            steps: c.steps,
            mlt: c.mlt,
            precision: c.precision,
            cost_model: c.cost_model,
            tile_compute_overhead: c.sim.tile_compute_overhead,
        },
        stages,
        total_time_us,
        fidelity: None,
    };
    Ok(RunOutput { report, outputs })
}

/// Block-by-block fidelity of `test` against `reference`.
pub fn compare_runs(reference: &RunOutput, test: &RunOutput) -> Result<FidelitySummary, PipelineError> {
    let (a, b) = (&reference.report.provenance, &test.report.provenance);
    let mismatch = |what: &str| Err(PipelineError::Incomparable(format!("{what} differs")));
    if a.seed != b.seed {
        return mismatch("seed");
    }
    if a.descriptor_sha256 != b.descriptor_sha256 {
        return mismatch("descriptor");
    }
    if a.steps != b.steps {
        return mismatch("step count");
    }
    if reference.outputs.len() != test.outputs.len() {
        return mismatch("block count");
    }
    let mut blocks = Vec::with_capacity(reference.outputs.len());
    let (mut all_ref, mut all_test) = (Vec::new(), Vec::new());
    for (r, t) in reference.outputs.iter().zip(&test.outputs) {
        if (r.stage, r.block) != (t.stage, t.block) {
            return mismatch("block layout");
        }
        blocks.push(BlockFidelity {
            stage: r.stage,
            block: r.block,
            metrics: fidelity_metrics(&r.tensor, &t.tensor)?,
        });
        all_ref.extend(r.tensor.to_f32_vec());
        all_test.extend(t.tensor.to_f32_vec());
    }
    let aggregate = if all_ref.is_empty() {
        None
    } else {
        let n = all_ref.len();
        Some(fidelity_metrics(
            &Tensor::from_f32(vec![n], all_ref)?,
            &Tensor::from_f32(vec![n], all_test)?,
        )?)
    };
    Ok(FidelitySummary { blocks, aggregate })
}

/// Runs `c` and an all-FP32 run of the same descriptor, attaching the
/// comparison to both the report and each block.
pub fn run_with_fidelity(m: &ModelDescriptor, c: &RunConfig) -> Result<RunOutput, PipelineError> {
    let mut run = run_pipeline(m, c)?;
    let reference = run_pipeline(
        m,
        &RunConfig {
            precision: PrecisionPolicy::uniform(Precision::Fp32),
            ..c.clone()
        },
    )?;
    let summary = compare_runs(&reference, &run)?;
    let mut per_block = summary.blocks.iter();
    for s in &mut run.report.stages {
        for b in &mut s.blocks {
            b.fidelity = per_block.next().map(|f| f.metrics);
        }
    }
    run.report.fidelity = Some(summary);
    Ok(run)
}
