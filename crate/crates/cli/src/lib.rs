//! Command-line front end for `wam-core`.
//!
//! Every subcommand prints a human table by default and a single JSON
//! document with `--json`. Usage errors exit with 2, runtime failures with 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use wam_core::harness::{
    bench_kv, chunk_displacement, evaluate, load_checkpoint, load_manifest_clips, prepare_clip, save_checkpoint,
    smoothed_ends, stand_still_metrics, train, BenchConfig, BenchReport, EvalOptions, MetricsReport, TrainConfig,
};
use wam_core::mask::{assert_causal, build_guidance_mask, build_teacher_forcing_mask, mask_to_pgm};
use wam_core::model::ModelConfig;
use wam_core::rollout::{rollout_chunk, Observation, RolloutConfig, RolloutState, Strategy};
use wam_core::sim::{generate_set, load_clip, save_clip, write_manifest, Manifest, ManifestEntry, Scenario, SimConfig};
use wam_core::{Result, WamError};

#[derive(Parser, Debug)]
#[command(name = "wam", version, about = "Video-action world model on a synthetic driving world")]
struct Cli {
    /// JSON config file for the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory for gen-data, file otherwise).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Print one JSON document to stdout instead of a table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clip set and its manifest.
    GenData(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Roll out one clip chunk by chunk.
    Rollout(RolloutArgs),
    /// ADE/FDE of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Compare KV-memory strategies on accuracy and analytic cost.
    BenchKv(BenchArgs),
    /// Build the training attention mask, audit it and render it as PGM.
    InspectMask(MaskArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// `all` or a comma-separated list of scenario names.
    #[arg(long)]
    scenarios: Option<String>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    chunks: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// JSON-lines loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StrategyArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    video_budget: Option<usize>,
    #[arg(long)]
    action_budget: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl StrategyArgs {
    fn apply(&self, rc: &mut RolloutConfig) {
        if let Some(s) = self.strategy {
            rc.strategy = s;
        }
        if let Some(b) = self.video_budget {
            rc.video_budget = b;
        }
        if let Some(b) = self.action_budget {
            rc.action_budget = b;
        }
        if let Some(l) = self.lambda {
            rc.lambda = l;
        }
    }
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[command(flatten)]
    memory: StrategyArgs,
    /// Feed generated chunks back instead of real observations.
    #[arg(long)]
    dream: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    memory: StrategyArgs,
    #[arg(long)]
    dream: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Without a checkpoint only the analytic cost columns are filled.
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated subset of full, fifo, selective.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, default_value_t = 2)]
    chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct GenConfig {
    scenarios: Vec<Scenario>,
    clips: usize,
    chunks: usize,
    seed: u64,
    sim: SimConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            clips: 64,
            chunks: 5,
            seed: 0,
            sim: SimConfig::default(),
        }
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            if cli.json {
                eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            } else {
                eprintln!("error[{}]: {e}", e.kind());
            }
            1
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, out),
        Command::Train(a) => train_cmd(cli, a, out),
        Command::Rollout(a) => rollout_cmd(cli, a, out),
        Command::Eval(a) => eval_cmd(cli, a, out),
        Command::BenchKv(a) => bench_cmd(cli, a, out),
        Command::InspectMask(a) => mask_cmd(cli, a, out),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| WamError::io(p, e))?;
            Ok(serde_json::from_str(&s)?)
        }
    }
}

fn emit(out: &mut dyn Write, s: &str) -> Result<()> {
    writeln!(out, "{s}").map_err(|e| WamError::io("<stdout>", e))
}

fn emit_json<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<()> {
    emit(out, &serde_json::to_string_pretty(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| WamError::io(path, e))
}

fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    if s == "all" {
        return Ok(Scenario::ALL.to_vec());
    }
    s.split(',')
        .map(|name| {
            Scenario::ALL.iter().copied().find(|sc| sc.name() == name.trim()).ok_or_else(|| {
                let known: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                WamError::InvalidArgument(format!("unknown scenario `{name}` (expected all or {})", known.join(", ")))
            })
        })
        .collect()
}

fn gen_data(cli: &Cli, a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: GenConfig = load_config(cli.config.as_deref())?;
    if let Some(s) = &a.scenarios {
        cfg.scenarios = parse_scenarios(s)?;
    }
    if let Some(n) = a.clips {
        cfg.clips = n;
    }
    if let Some(c) = a.chunks {
        cfg.chunks = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&dir).map_err(|e| WamError::io(&dir, e))?;
    let clips = generate_set(cfg.seed, &cfg.scenarios, cfg.clips, cfg.chunks, &cfg.sim)?;
    let mut manifest = Manifest::default();
    for (i, clip) in clips.iter().enumerate() {
        let name = PathBuf::from(format!("clip_{i:05}.bin"));
        save_clip(clip, &dir.join(&name))?;
        manifest.clips.push(ManifestEntry {
            path: name,
            scenario: clip.scenario,
            seed: clip.seed,
            chunks: clip.chunks,
        });
    }
    let manifest_path = dir.join("manifest.json");
    write_manifest(&manifest, &manifest_path)?;
    if cli.json {
        emit_json(out, &json!({ "manifest": manifest_path, "clips": clips.len(), "config": cfg }))
    } else {
        emit(out, &format!("wrote {} clips of {} chunks to {}", clips.len(), cfg.chunks, manifest_path.display()))
    }
}

fn train_cmd(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = &a.log {
        cfg.log_path = Some(l.clone());
    }
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("checkpoint.wamk"));
    let outcome = train(&cfg)?;
    save_checkpoint(&path, &outcome.checkpoint)?;
    let window = (cfg.iterations / 10).clamp(1, 100);
    let (first, last) = smoothed_ends(&outcome.log, window);
    let final_record = outcome.log.last();
    if cli.json {
        emit_json(
            out,
            &json!({
                "checkpoint": path,
                "iterations": cfg.iterations,
                "smoothed_loss_start": first,
                "smoothed_loss_end": last,
                "final": final_record,
            }),
        )
    } else {
        emit(
            out,
            &format!(
                "trained {} iterations, loss {first:.4} -> {last:.4} (window {window}); checkpoint {}",
                cfg.iterations,
                path.display()
            ),
        )
    }
}

#[derive(Serialize)]
struct RolloutRow {
    chunk: usize,
    cached_tokens: usize,
    video_evicted: usize,
    action_evicted: usize,
    ade_4s: f64,
    fde_4s: f64,
    predicted_actions: Vec<[f64; 3]>,
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs, out: &mut dyn Write) -> Result<()> {
    let mut rc: RolloutConfig = load_config(cli.config.as_deref())?;
    a.memory.apply(&mut rc);
    let ck = load_checkpoint(&a.checkpoint)?;
    let clip = load_clip(&a.clip)?;
    let cfg = &ck.params.config;
    let p = prepare_clip(&clip, cfg, &ck.pre)?;
    let mut state = RolloutState::new(cfg, rc, cli.seed.unwrap_or(0))?;
    let mut rows = Vec::new();
    for k in 0..p.chunks() - 1 {
        let obs = if a.dream {
            Observation::Dream
        } else {
            Observation::Real {
                latents: &p.latents[k + 1],
                actions_norm: &p.actions_norm[k + 1],
            }
        };
        let (pred, report) = rollout_chunk(&ck.params, &ck.pre.action_stats, &mut state, &p.ego[k], &p.guidance[k], obs)?;
        let m = chunk_displacement(&pred.actions, &p.actions[k + 1])?;
        rows.push(RolloutRow {
            chunk: k + 1,
            cached_tokens: state.cached_tokens(),
            video_evicted: report.video.evicted.len(),
            action_evicted: report.action.evicted.len(),
            ade_4s: m.ade_4s,
            fde_4s: m.fde_4s,
            predicted_actions: pred.actions,
        });
    }
    let doc = json!({ "clip": a.clip, "scenario": clip.scenario, "rollout": rc, "dream": a.dream, "steps": rows });
    if let Some(path) = &cli.out {
        write_json(path, &doc)?;
    }
    if cli.json {
        return emit_json(out, &doc);
    }
    emit(out, &format!("{} ({}), strategy {}", a.clip.display(), clip.scenario.name(), rc.strategy))?;
    emit(out, "chunk  cached  evicted(v/a)  ade@4s  fde@4s")?;
    for r in &rows {
        emit(
            out,
            &format!(
                "{:>5}  {:>6}  {:>5}/{:<6}  {:>6.3}  {:>6.3}",
                r.chunk, r.cached_tokens, r.video_evicted, r.action_evicted, r.ade_4s, r.fde_4s
            ),
        )?;
    }
    Ok(())
}

fn metrics_table(out: &mut dyn Write, label: &str, m: &MetricsReport) -> Result<()> {
    let d = &m.metrics;
    emit(
        out,
        &format!(
            "{label:<18} {:>5}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}",
            m.clips, d.ade_3s, d.fde_3s, d.ade_4s, d.fde_4s
        ),
    )
}

const METRICS_HEADER: &str = "                   clips   ade@3s   fde@3s   ade@4s   fde@4s";

fn eval_cmd(cli: &Cli, a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut opts: EvalOptions = load_config(cli.config.as_deref())?;
    a.memory.apply(&mut opts.rollout);
    opts.dream |= a.dream;
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (_, clips) = load_manifest_clips(&a.manifest)?;
    let model = evaluate(&ck, &clips, &opts)?;
    let baseline = stand_still_metrics(&clips)?;
    let doc = json!({ "options": opts, "model": model, "stand_still": baseline });
    if let Some(path) = &cli.out {
        write_json(path, &doc)?;
    }
    if cli.json {
        return emit_json(out, &doc);
    }
    emit(out, METRICS_HEADER)?;
    metrics_table(out, "model", &model)?;
    metrics_table(out, "stand-still", &baseline)?;
    for (name, s) in &model.per_scenario {
        let d = &s.metrics;
        emit(
            out,
            &format!(
                "  {name:<16} {:>5}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}",
                s.clips, d.ade_3s, d.fde_3s, d.ade_4s, d.fde_4s
            ),
        )?;
    }
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: BenchConfig = load_config(cli.config.as_deref())?;
    if let Some(s) = &a.strategies {
        cfg.strategies = s.clone();
    }
    if let Some(h) = a.horizon {
        cfg.profile_horizon = h;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let clips = match &a.manifest {
        Some(m) if ck.is_some() => load_manifest_clips(m)?.1,
        _ => Vec::new(),
    };
    let model = ck.as_ref().map_or_else(ModelConfig::default, |c| c.params.config);
    let report = bench_kv(ck.as_ref(), &model, &clips, &cfg)?;
    if let Some(path) = &cli.out {
        write_json(path, &report)?;
    }
    if cli.json {
        return emit_json(out, &report);
    }
    bench_table(out, &report)
}

fn bench_table(out: &mut dyn Write, r: &BenchReport) -> Result<()> {
    emit(out, &format!("horizon {} chunks", r.profile_horizon))?;
    emit(out, "strategy    ade@4s  fde@4s  peak MiB  tokens  attn GFLOP  mem x  flop x")?;
    for row in &r.rows {
        let (ade, fde) = row
            .metrics
            .as_ref()
            .map_or(("-".to_string(), "-".to_string()), |m| (format!("{:.3}", m.metrics.ade_4s), format!("{:.3}", m.metrics.fde_4s)));
        emit(
            out,
            &format!(
                "{:<10} {ade:>7} {fde:>7} {:>9.2} {:>7} {:>11.3} {:>6.1} {:>7.1}",
                row.strategy.name(),
                row.peak_cache_bytes as f64 / (1024.0 * 1024.0),
                row.final_cached_tokens,
                row.total_attention_flops as f64 * 1e-9,
                row.memory_reduction,
                row.flop_reduction
            ),
        )?;
    }
    emit(out, "published large-model reference (ADE/FDE):")?;
    for row in &r.reference {
        emit(out, &format!("  {:<10} {:.2}/{:.2}", row.strategy.name(), row.ade, row.fde))?;
    }
    Ok(())
}

fn mask_cmd(cli: &Cli, a: &MaskArgs, out: &mut dyn Write) -> Result<()> {
    let model: ModelConfig = load_config(cli.config.as_deref())?;
    model.validate()?;
    let layout = model.layout(a.chunks)?;
    let mask = build_teacher_forcing_mask(&layout);
    let audit = assert_causal(&mask, &layout)?;
    let guidance = build_guidance_mask(&layout);
    let allowed = mask.allowed.count_allowed();
    if let Some(path) = &cli.out {
        fs::write(path, mask_to_pgm(&mask.allowed)).map_err(|e| WamError::io(path, e))?;
    }
    if cli.json {
        return emit_json(
            out,
            &json!({
                "chunks": a.chunks,
                "tokens": layout.len(),
                "chunk_len": layout.chunk_len(),
                "allowed": allowed,
                "density": allowed as f64 / (mask.rows() * mask.cols()) as f64,
                "guidance_cols": guidance.cols(),
                "passed": audit.passed(),
                "violations": audit.violations.len(),
                "pgm": cli.out,
            }),
        );
    }
    emit(
        out,
        &format!(
            "{} chunks, {} tokens ({} per chunk), {allowed} allowed pairs, causal audit {}",
            a.chunks,
            layout.len(),
            layout.chunk_len(),
            if audit.passed() { "passed" } else { "FAILED" }
        ),
    )?;
    for v in audit.violations.iter().take(10) {
        emit(out, &format!("  violation: {v:?}"))?;
    }
    if let Some(path) = &cli.out {
        emit(out, &format!("mask written to {}", path.display()))?;
    }
    Ok(())
}
