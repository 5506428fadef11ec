use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use chunkfft::decoder::{
    concat_chunks, decode_parallel_masked, receptive_field_formula, receptive_field_oracle, split_chunks, Ablation,
};
use chunkfft::eval::{ablation_check, bench, default_tolerance, equivalence_sweep, msd_with, BenchResult, MsdKind};
use chunkfft::format::{load_state, load_tensor, load_weights, save_state, save_tensor, save_weights, DynWeights};
use chunkfft::train::{run_mask_study, MaskRegime, Trainer};
use chunkfft::{
    build_static_mask, DType, DecoderConfig, DecoderWeights, DynTensor, Error, IncrementalDecoder, RunConfig, Scalar,
};

use crate::{
    AblateArgs, AblateMode, BenchArgs, Cli, Command, DTypeArg, EquivArgs, MaskArgs, MaskFormat, MaskKind, MsdArgs,
    MsdKindArg, RfArgs, Status, StudyArgs, SynthArgs, SynthMode, TrainArgs,
};

/// Fraction of ablation seeds that must change the output for `ablate` to pass.
const ABLATION_MIN_CHANGED: f64 = 0.95;

/// A command-line mistake the parser could not catch.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn classify(e: &anyhow::Error) -> Status {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return Status::Usage;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::Json(_) => Status::Usage,
                Error::NonFinite { .. } => Status::CheckFailed,
                _ => Status::Io,
            };
        }
    }
    Status::Io
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.bench.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<Status> {
    let cfg = effective_config(&cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(Status::Ok);
    }
    let Some(command) = cli.command else {
        return Err(usage("no subcommand given (see --help)"));
    };
    match command {
        Command::Equiv(a) => equiv(&cfg, a),
        Command::Rf(a) => rf(a),
        Command::Mask(a) => mask(a),
        Command::Train(a) => train(cfg, a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench_cmd(&cfg, a),
        Command::Msd(a) => msd_cmd(a),
        Command::Study(a) => study(&cfg, a),
        Command::Ablate(a) => ablate(&cfg, a),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serializes");
    s.push(b'\n');
    s
}

fn status(pass: bool) -> Status {
    if pass {
        Status::Ok
    } else {
        Status::CheckFailed
    }
}

fn equiv(cfg: &RunConfig, a: EquivArgs) -> Result<Status> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.tolerance.is_some_and(|t| !(t >= 0.0)) {
        return Err(usage("--tolerance must be non-negative"));
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
    let report = match a.dtype {
        DTypeArg::F64 => equivalence_sweep::<f64>(&cfg.sweep, &seeds, a.tolerance.unwrap_or(default_tolerance(DType::F64)))?,
        DTypeArg::F32 => equivalence_sweep::<f32>(&cfg.sweep, &seeds, a.tolerance.unwrap_or(default_tolerance(DType::F32)))?,
    };
    eprintln!(
        "equiv {}: {} cells, max |diff| {:.3e}, tolerance {:.1e}: {}",
        report.dtype,
        report.grid_results.len(),
        report.max_abs_diff,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    for r in report.failures().take(10) {
        eprintln!("  {r}");
    }
    emit(a.out.as_deref(), &json(&report))?;
    Ok(status(report.passed))
}

fn rf(a: RfArgs) -> Result<Status> {
    let formula = receptive_field_formula(a.layers, a.past, a.chunk)?;
    if !a.oracle {
        println!("{formula}");
        return Ok(Status::Ok);
    }
    let r = receptive_field_oracle(a.layers, a.past, a.chunk)?;
    println!("formula {}", r.formula);
    println!("oracle {}", r.oracle);
    println!("delta {}", r.delta());
    Ok(Status::Ok)
}

fn mask(a: MaskArgs) -> Result<Status> {
    let m = build_static_mask(a.frames, a.chunk, a.past)?;
    let bytes = match a.format {
        MaskFormat::Ascii => m.to_ascii().into_bytes(),
        MaskFormat::Pgm => m.to_pgm(),
    };
    emit(a.out.as_deref(), &bytes)?;
    Ok(Status::Ok)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<Status> {
    match a.mask {
        Some(MaskKind::Static) => {
            cfg.train.regime = MaskRegime::Static {
                chunk: cfg.model.chunk_size,
                past: cfg.model.past_size,
            }
        }
        Some(MaskKind::Dynamic) if !matches!(cfg.train.regime, MaskRegime::Dynamic { .. }) => {
            cfg.train.regime = MaskRegime::Dynamic {
                policy: Default::default(),
            }
        }
        Some(MaskKind::Full) => cfg.train.regime = MaskRegime::Full,
        _ => {}
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let model = cfg.model.clone();
    let (weights, log) = Trainer::new(model.clone(), cfg.train.clone(), cfg.task)?.run()?;
    match model.dtype {
        DType::F64 => save_weights(&a.out, &model, &weights)?,
        DType::F32 => save_weights(&a.out, &model, &weights.cast::<f32>())?,
    }
    if let Some(p) = &a.log {
        fs::write(p, json(&log)).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "train {}: {} steps, eval loss {:.4} -> {:.4} (ratio {:.3})",
        cfg.train.regime,
        log.steps.len(),
        log.initial_eval_loss,
        log.final_eval_loss,
        log.loss_ratio()
    );
    Ok(Status::Ok)
}

fn synth(a: SynthArgs) -> Result<Status> {
    let (mut cfg, weights) = load_weights(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if let Some(c) = a.chunk {
        cfg.chunk_size = c;
    }
    if let Some(p) = a.past {
        cfg.past_size = p;
    }
    cfg.validate()?;
    if a.mode == SynthMode::Parallel && (a.state_in.is_some() || a.state_out.is_some() || a.max_chunks.is_some()) {
        return Err(usage("--state-in, --state-out and --max-chunks need --mode incremental"));
    }
    let features = load_tensor(&a.features).with_context(|| format!("loading {}", a.features.display()))?;
    match weights {
        DynWeights::F64(w) => synth_typed(&cfg, &w, features, &a),
        DynWeights::F32(w) => synth_typed(&cfg, &w, features, &a),
    }
}

fn synth_typed<S: Scalar>(cfg: &DecoderConfig, w: &DecoderWeights<S>, features: DynTensor, a: &SynthArgs) -> Result<Status> {
    let x = features.into_scalar::<S>();
    let mel = match a.mode {
        SynthMode::Parallel => {
            let (t, _) = x.dims2()?;
            let m = build_static_mask(t, cfg.chunk_size, cfg.past_size)?;
            decode_parallel_masked(&x, cfg, w, &m)?
        }
        SynthMode::Incremental => {
            let mut dec = match &a.state_in {
                Some(p) => {
                    let st = load_state::<S>(p, cfg).with_context(|| format!("loading {}", p.display()))?;
                    IncrementalDecoder::with_state(cfg, w, st)?
                }
                None => IncrementalDecoder::new(cfg, w)?,
            };
            let chunks = split_chunks(&x, cfg.chunk_size)?;
            let take = a.max_chunks.unwrap_or(chunks.len()).min(chunks.len());
            if take == 0 {
                return Err(usage("nothing to decode"));
            }
            let out = chunks[..take].iter().map(|c| dec.step(c)).collect::<chunkfft::Result<Vec<_>>>()?;
            if let Some(p) = &a.state_out {
                save_state(p, dec.state()).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!("synth: {take} of {} chunks, resumed at frame {}", chunks.len(), dec.state().frame_offset);
            concat_chunks(&out)?
        }
    };
    save_tensor(&a.out, &mel).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct BenchReport<'a> {
    config: &'a DecoderConfig,
    bench: &'a BenchResult,
}

fn bench_cmd(cfg: &RunConfig, a: BenchArgs) -> Result<Status> {
    let mut bc = cfg.bench;
    if let Some(f) = a.frames {
        bc.frames = f;
    }
    if let Some(r) = a.repeats {
        bc.repeats = r;
    }
    let (model, weights) = match &a.model {
        Some(p) => load_weights(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let w = DecoderWeights::<f64>::init(&cfg.model, cfg.seed)?;
            let w = match cfg.model.dtype {
                DType::F64 => DynWeights::F64(w),
                DType::F32 => DynWeights::F32(w.cast()),
            };
            (cfg.model.clone(), w)
        }
    };
    let r = match &weights {
        DynWeights::F64(w) => bench(&model, w, &bc)?,
        DynWeights::F32(w) => bench(&model, w, &bc)?,
    };
    if a.json {
        emit(None, &json(&BenchReport { config: &model, bench: &r }))?;
    } else {
        println!("frames          {} ({} chunks, {:.2} s audio)", r.total_frames, r.chunks, r.audio_duration_s);
        println!("first chunk     {:.3} ms", r.first_ms);
        println!("last chunk      {:.3} ms", r.last_ms);
        println!("chunk p50/p90   {:.3} / {:.3} ms", r.chunk_percentiles_ms.p50, r.chunk_percentiles_ms.p90);
        println!("parallel        {:.3} ms", r.parallel_ms);
        println!("rtf             {:.6} (parallel {:.6})", r.rtf, r.rtf_parallel);
    }
    Ok(Status::Ok)
}

fn msd_cmd(a: MsdArgs) -> Result<Status> {
    let x = load_tensor(&a.a).with_context(|| format!("loading {}", a.a.display()))?.to_f64();
    let y = load_tensor(&a.b).with_context(|| format!("loading {}", a.b.display()))?.to_f64();
    let kind = match a.kind {
        MsdKindArg::FrameL2 => MsdKind::FrameL2,
        MsdKindArg::MeanSquared => MsdKind::MeanSquared,
    };
    println!("{:?}", msd_with(&x, &y, kind)?);
    Ok(Status::Ok)
}

fn study(cfg: &RunConfig, a: StudyArgs) -> Result<Status> {
    let table = run_mask_study(&cfg.model, &cfg.train, cfg.task, &cfg.study)?;
    emit(a.out.as_deref(), table.to_csv().as_bytes())?;
    for (regime, wins, n) in table.trend_summary() {
        eprintln!("study {regime}: matched config beats the most mismatched one on {wins}/{n} seeds");
    }
    let holds = table.trend_holds();
    eprintln!("study trend {}", if holds { "holds" } else { "does not hold" });
    Ok(if a.strict { status(holds) } else { Status::Ok })
}

fn ablate(cfg: &RunConfig, a: AblateArgs) -> Result<Status> {
    let mode = match a.mode {
        AblateMode::DropKv => Ablation::DropKv,
        AblateMode::DropConv => Ablation::DropConv,
        AblateMode::DropBoth => Ablation::DropBoth,
    };
    let ab = &cfg.ablation;
    if ab.seeds == 0 {
        bail!(Error::Config("ablation needs at least one seed".into()));
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + ab.seeds as u64).collect();
    let r = ablation_check(&cfg.model, &seeds, mode, ab.frames, ab.threshold)?;
    let pass = r.changed_fraction >= ABLATION_MIN_CHANGED && r.boundary_jump_grows();
    eprintln!(
        "ablate {:?}: output changed on {:.0}% of seeds, boundary jump {:.4} vs intact {:.4}: {}",
        mode,
        100.0 * r.changed_fraction,
        r.mean_boundary_ablated,
        r.mean_boundary_intact,
        if pass { "pass" } else { "FAIL" }
    );
    emit(None, &json(&r))?;
    Ok(status(pass))
}
