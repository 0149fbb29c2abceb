//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use mltile::memmodel::{
    apply_mlt_with, build_attention_graph, execute_graph, fuse_attention, BaselineCostTable, Role, TiledCompute,
};
use mltile::ops;
use mltile::pipeline::{run_pipeline, ModelDescriptor, RunConfig, RunOutput, StageName};
use mltile::planner::{max_tile_rows, working_set};
use mltile::quant::{
    attention_w8a16, calibrate, dequantize, dequantize_exact, fidelity_metrics, make_params, qmatmul, quantize,
    BitWidth, Granularity, Precision, PrecisionPolicy, Scheme,
};
use mltile::random::{attention_inputs, rng, uniform_tensor};
use mltile::{
    attention_reference, attention_tiled, plan_tiles, AttentionDims, ElementType, HardwareProfile, PlanError, Tensor,
    TilePlan,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn max_rel_err(test: &Tensor, reference: &Tensor) -> f64 {
    let (t, r) = (test.to_f64_vec(), reference.to_f64_vec());
    t.iter()
        .zip(&r)
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::from(f32::EPSILON)))
        .fold(0.0, f64::max)
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.as_f32()
            .zip(b.as_f32())
            .is_some_and(|(x, y)| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn tiled_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let cases = 1000;
    let mut worst = 0.0f64;
    let mut not_bitwise = 0;
    for case in 0..cases {
        let dims = AttentionDims::new(r.random_range(1..=256), r.random_range(1..=128), r.random_range(1..=64));
        let tiles = r.random_range(1..=dims.n_q);
        let plan = TilePlan::with_tile_count(dims, ElementType::Fp32, tiles).map_err(|e| e.to_string())?;
        let inputs = attention_inputs(dims, case);
        let reference = attention_reference(&inputs).map_err(|e| e.to_string())?;
        let tiled = attention_tiled(&inputs, &plan).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_err(&tiled, &reference));
        if !bits_equal(&tiled, &reference) {
            not_bitwise += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{cases} cases, max rel err {worst:.3e}, {not_bitwise} not bitwise, {secs:.1}s");
    if worst <= 1e-5 && not_bitwise == 0 && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn structural_reproduction() -> Outcome {
    let mut r = rng(2);
    let mut graphs = 0;
    for _ in 0..200 {
        let dims = AttentionDims::new(
            r.random_range(1..=4096),
            r.random_range(1..=256),
            r.random_range(1..=256),
        );
        let dtype = [ElementType::Fp32, ElementType::Fp16, ElementType::Int16][r.random_range(0..3)];
        let untiled = build_attention_graph(dims, dtype, None).map_err(|e| e.to_string())?;
        let tiles = r.random_range(1..=dims.n_q.min(64));
        let plan = TilePlan::with_tile_count(dims, dtype, tiles).map_err(|e| e.to_string())?;
        let tiled = build_attention_graph(dims, dtype, Some(&plan)).map_err(|e| e.to_string())?;
        for g in [fuse_attention(&untiled), tiled] {
            graphs += 1;
            for role in [Role::SIn, Role::SOut] {
                if g.dma_bytes_with(role) != 0 {
                    return Err(format!(
                        "{dims:?}: {} DMA bytes on {}",
                        g.dma_bytes_with(role),
                        role.name()
                    ));
                }
            }
            for role in [Role::Query, Role::A] {
                if g.dma_bytes_with(role) != untiled.dma_bytes_with(role) {
                    return Err(format!("{dims:?}: {} bytes not conserved", role.name()));
                }
            }
        }
    }
    Ok(format!(
        "{graphs} fused/tiled graphs, S_in/S_out DMA bytes 0, Q and A bytes conserved"
    ))
}

fn quantitative_reproduction() -> Outcome {
    let table = BaselineCostTable::measured();
    let mut points = 0;
    let mut out_of_band = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut gain_misses = 0;
    for vi in 0..=12 {
        let v = 0.2 + 0.05 * f64::from(vi);
        for ei in 0..=10 {
            let eps = 0.005 * f64::from(ei);
            let total = apply_mlt_with(&table, v, TiledCompute::Overhead(eps)).map_err(|e| e.to_string())?;
            points += 1;
            lo = lo.min(total);
            hi = hi.max(total);
            if !(25.0..=28.0).contains(&total) {
                out_of_band.push(format!("v={v:.2} eps={eps:.3} total={total:.2}"));
            }
            if ((100.0 - total) - 73.0).abs() > 3.0 {
                gain_misses += 1;
            }
        }
    }
    let detail = format!(
        "{points} grid points, totals {lo:.2}..{hi:.2}%, gain {:.2}..{:.2}%, {} outside [25, 28], {gain_misses} gain misses",
        100.0 - hi,
        100.0 - lo,
        out_of_band.len()
    );
    if out_of_band.is_empty() && gain_misses == 0 {
        Ok(detail)
    } else {
        let shown: Vec<&str> = out_of_band.iter().take(4).map(String::as_str).collect();
        Err(format!("{detail}; e.g. {}", shown.join(", ")))
    }
}

fn planner_soundness() -> Outcome {
    let mut r = rng(4);
    let (mut feasible, mut infeasible) = (0, 0);
    for _ in 0..1000 {
        let dims = AttentionDims::new(
            r.random_range(1..=8192),
            r.random_range(1..=512),
            r.random_range(1..=256),
        );
        let dtype = [ElementType::Fp32, ElementType::Fp16, ElementType::Int8][r.random_range(0..3)];
        let hw = HardwareProfile {
            sram_bytes: r.random_range(1024..=8 << 20),
            utilization_target: r.random_range(0.5..=1.0),
            ..HardwareProfile::npu_proxy()
        };
        let budget = hw.sram_budget_bytes();
        let larger = HardwareProfile {
            sram_bytes: hw.sram_bytes + r.random_range(1..=1 << 20),
            ..hw.clone()
        };
        match plan_tiles(dims, dtype, &hw) {
            Ok(plan) => {
                feasible += 1;
                let ws = working_set(plan.largest_span(), dims.n_k, dims.d, dtype);
                if ws > budget || plan.working_set_bytes != ws {
                    return Err(format!("{dims:?}: working set {ws} over budget {budget}"));
                }
                plan.check_partition().map_err(|e| e.to_string())?;
                if plan.tile_count > 1 {
                    let fewer = dims.n_q.div_ceil(plan.tile_count - 1);
                    if working_set(fewer, dims.n_k, dims.d, dtype) <= budget {
                        return Err(format!("{dims:?}: {} tiles would also fit", plan.tile_count - 1));
                    }
                }
                let bigger = plan_tiles(dims, dtype, &larger).map_err(|e| e.to_string())?;
                if bigger.tile_count > plan.tile_count {
                    return Err(format!("{dims:?}: more SRAM gave more tiles"));
                }
            }
            Err(PlanError::Infeasible { required, available }) => {
                infeasible += 1;
                if working_set(1, dims.n_k, dims.d, dtype) <= budget || required <= available {
                    return Err(format!("{dims:?}: reported infeasible but one row fits"));
                }
                if let Ok(rows) = max_tile_rows(dims, dtype, budget) {
                    return Err(format!("{dims:?}: infeasible yet {rows} rows fit"));
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(format!(
        "1000 samples ({feasible} feasible, {infeasible} infeasible), all sound and minimal"
    ))
}

fn quantization_fidelity() -> Outcome {
    let (mut min_cos, mut min_snr) = (f64::INFINITY, f64::INFINITY);
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let dims = AttentionDims::new(
            r.random_range(16..=512),
            r.random_range(8..=128),
            r.random_range(8..=64),
        );
        let inputs = attention_inputs(dims, seed);
        let reference = attention_reference(&inputs).map_err(|e| e.to_string())?;
        let quant = attention_w8a16(&inputs).map_err(|e| e.to_string())?;
        let m = fidelity_metrics(&reference, &quant).map_err(|e| e.to_string())?;
        min_cos = min_cos.min(m.cosine_similarity);
        min_snr = min_snr.min(m.snr_db);
        if m.cosine_similarity < 0.999 || m.snr_db < 40.0 {
            return Err(format!(
                "seed {seed} {dims:?}: cosine {:.6}, snr {:.2} dB",
                m.cosine_similarity, m.snr_db
            ));
        }
    }

    let mut checked = 0;
    for seed in 0..100u64 {
        let mut r = rng(2000 + seed);
        let (lo, hi) = (r.random_range(-50.0f32..0.0), r.random_range(0.0f32..50.0));
        let x = uniform_tensor(&mut r, vec![8, 16], lo, hi);
        for scheme in [Scheme::Symmetric, Scheme::Asymmetric] {
            for bits in [BitWidth::Int8, BitWidth::Int16] {
                for granularity in [Granularity::PerTensor, Granularity::PerChannel { axis: 1 }] {
                    let stats = calibrate(std::slice::from_ref(&x), granularity).map_err(|e| e.to_string())?;
                    let p = make_params(&stats, scheme, bits);
                    let q = quantize(&x, &p).map_err(|e| e.to_string())?;
                    let back = dequantize_exact(&q, &p).map_err(|e| e.to_string())?;
                    for (i, (a, b)) in x.to_f64_vec().iter().zip(&back).enumerate() {
                        let s = f64::from(p.scales[if p.scales.len() == 1 { 0 } else { i % 16 }]);
                        if (a - b).abs() > s / 2.0 {
                            return Err(format!(
                                "roundtrip seed {seed} {scheme:?}/{bits:?}: |{a} - {b}| > {}",
                                s / 2.0
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "100 blocks, min cosine {min_cos:.6}, min snr {min_snr:.2} dB; {checked} roundtrip elements within scale/2"
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut worst_q = 0.0f32;
    for seed in 0..100u64 {
        let mut r = rng(3000 + seed);
        let w = uniform_tensor(&mut r, vec![16, 16], -1.0, 1.0);
        let x = uniform_tensor(&mut r, vec![16, 16], -1.0, 1.0);
        let err = |e: mltile::QuantError| e.to_string();
        let wp = make_params(
            &calibrate(std::slice::from_ref(&w), Granularity::PerChannel { axis: 1 }).map_err(err)?,
            Scheme::Symmetric,
            BitWidth::Int8,
        );
        let xp = make_params(
            &calibrate(std::slice::from_ref(&x), Granularity::PerTensor).map_err(err)?,
            Scheme::Asymmetric,
            BitWidth::Int16,
        );
        let (wq, xq) = (quantize(&w, &wp).map_err(err)?, quantize(&x, &xp).map_err(err)?);
        let fast = qmatmul(&wq, &xq, &wp, &xp).map_err(err)?;
        let oracle = ops::matmul(
            &dequantize(&xq, &xp).map_err(err)?,
            &dequantize(&wq, &wp).map_err(err)?,
            ElementType::Fp32,
        )
        .map_err(|e| e.to_string())?;
        for (a, b) in fast.as_f32().unwrap().iter().zip(oracle.as_f32().unwrap()) {
            worst_q = worst_q.max((a - b).abs());
        }
    }

    let mut worst_g = 0.0f32;
    let mut r = rng(6);
    for seed in 0..100u64 {
        let dims = AttentionDims::new(r.random_range(1..=128), r.random_range(1..=64), r.random_range(1..=32));
        let inputs = attention_inputs(dims, seed);
        let g = build_attention_graph(dims, ElementType::Fp32, None).map_err(|e| e.to_string())?;
        let unfused = execute_graph(&g, &inputs).map_err(|e| e.to_string())?;
        let fused = execute_graph(&fuse_attention(&g), &inputs).map_err(|e| e.to_string())?;
        for (a, b) in fused.as_f32().unwrap().iter().zip(unfused.as_f32().unwrap()) {
            worst_g = worst_g.max((a - b).abs());
        }
    }
    let detail = format!("qmatmul max abs err {worst_q:.3e} over 100 cases, fused vs unfused {worst_g:.3e}");
    if worst_q <= 1e-6 && worst_g <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sd_config(steps: u32) -> RunConfig {
    RunConfig {
        steps,
        mlt: true,
        seed: 7,
        ..RunConfig::new(HardwareProfile::npu_proxy())
    }
}

fn step_scaling() -> Outcome {
    let m = ModelDescriptor::sd_proxy();
    let reports = [1u32, 2, 4, 25].map(|s| {
        run_pipeline(&m, &sd_config(s))
            .map(|o| o.report)
            .map_err(|e| e.to_string())
    });
    let mut times = Vec::new();
    for r in &reports {
        let r = r.as_ref().map_err(Clone::clone)?;
        times.push((
            r.stage(StageName::Unet).unwrap().time_us,
            r.stage(StageName::Encoder).unwrap().time_us,
            r.stage(StageName::Decoder).unwrap().time_us,
        ));
    }
    let base = times[0];
    for (steps, t) in [1.0, 2.0, 4.0, 25.0].iter().zip(&times) {
        if t.0 != steps * base.0 || t.0 / base.0 != *steps || t.1 != base.1 || t.2 != base.2 {
            return Err(format!("steps {steps}: unet {} vs {}", t.0, steps * base.0));
        }
    }
    Ok(format!(
        "unet {:.3} / {:.3} / {:.3} / {:.3} us = 1:2:4:25 exactly",
        times[0].0, times[1].0, times[2].0, times[3].0
    ))
}

fn determinism() -> Outcome {
    let m = ModelDescriptor::sd_proxy();
    let c = RunConfig {
        precision: PrecisionPolicy::default(),
        ..sd_config(4)
    };
    let a = run_pipeline(&m, &c).map_err(|e| e.to_string())?;
    let b = run_pipeline(&m, &c).map_err(|e| e.to_string())?;
    let (ja, jb) = (a.report.to_json(), b.report.to_json());
    if ja != jb {
        return Err("reports differ".into());
    }
    let dir = std::env::temp_dir().join(format!("mltile-acceptance-{}", std::process::id()));
    let (da, db) = (dir.join("a"), dir.join("b"));
    a.save(&da).map_err(|e| e.to_string())?;
    b.save(&db).map_err(|e| e.to_string())?;
    let fa = std::fs::read(da.join("report.json")).map_err(|e| e.to_string())?;
    let fb = std::fs::read(db.join("report.json")).map_err(|e| e.to_string())?;
    let reloaded = RunOutput::load(&da).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    if fa != fb || reloaded.report.to_json() != ja {
        return Err("saved reports differ".into());
    }
    let unet = a.report.stage(StageName::Unet).unwrap();
    if unet.precision != Precision::W8A16 {
        return Err("unexpected unet precision".into());
    }
    Ok(format!(
        "{} byte report identical across runs and after save/load",
        ja.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("tiled/untiled equivalence", tiled_equivalence),
        ("structural traffic reproduction", structural_reproduction),
        ("quantitative MLT total", quantitative_reproduction),
        ("planner soundness", planner_soundness),
        ("W8A16 fidelity and roundtrip", quantization_fidelity),
        ("oracle equivalence", oracle_equivalence),
        ("step scaling", step_scaling),
        ("report determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
