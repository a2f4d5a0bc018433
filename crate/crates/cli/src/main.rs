//! `semmatch` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 bad configuration or
//! input, 3 engine or backend failure.

mod render;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use semmatch::backend::server::{serve, SessionRegistry};
use semmatch::consistency::{
    cycle_confidence, foreground_mask, semantic_consistent_mask, ConsistencyParams,
};
use semmatch::matching::{argmax_flow, assemble_descriptors, cost_volume, dominant_displacement, warp, FlowDirection};
use semmatch::sampler::step::descriptor_resolution;
use semmatch::sampler::{parse_config, run_baseline, run_dual_branch_observed, ConfigFile, StepRecord};
use semmatch::tensors::frame::{read_flow_file, read_grid_file, write_flow_file, write_grid_file, write_mask_file};
use semmatch::tensors::{hadamard_blend, MaskGrid};

#[derive(Debug, Parser)]
#[command(name = "semmatch", version, about = "Semantic appearance matching for dual-branch diffusion sampling")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads for parallel kernels.
    #[arg(long, env = "SEMMATCH_WORKERS", global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a session on the built-in synthetic backend.
    Run(RunArgs),
    /// Match two sets of feature frames.
    Match(MatchArgs),
    /// Backward-warp a frame along a flow.
    Warp(WarpArgs),
    /// Render every frame under a diagnostics directory as PGM/PPM.
    Inspect(InspectArgs),
    /// Serve the step protocol over TCP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Session config of `key = value` lines; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "semmatch-out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Plain CFG sampling of the target, no matching.
    #[arg(long)]
    baseline: bool,
    /// Write per-step flows, masks, descriptors, and renders.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Reference feature frame; repeat once per layer.
    #[arg(long = "reference", required = true)]
    reference: Vec<PathBuf>,
    /// Target feature frame; repeat once per layer, same order.
    #[arg(long = "target", required = true)]
    target: Vec<PathBuf>,
    /// Subject cross-attention map; without one every pixel is foreground.
    #[arg(long = "cross-attn")]
    cross_attn: Vec<PathBuf>,
    /// Session config supplying `lambda_c`, `mask_threshold`, and `pca_dim`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config `lambda_c`.
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Overrides the config `pca_dim`.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "semmatch-match")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WarpArgs {
    /// Frame to warp.
    #[arg(long)]
    input: PathBuf,
    /// Flow frame `(dx, dy)`, resized to the input resolution.
    #[arg(long)]
    flow: PathBuf,
    /// Blend the warped frame into `--base` under this mask.
    #[arg(long, requires = "base")]
    mask: Option<PathBuf>,
    /// Frame kept outside the mask.
    #[arg(long, requires = "mask")]
    base: Option<PathBuf>,
    /// Output frame path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Directory written by `run --diagnostics` or `match`.
    dir: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn engine(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: error.into(),
    }
}

fn io(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return parse_config("").map_err(usage);
    };
    let text = fs::read_to_string(path).map_err(|e| usage(anyhow!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        semmatch::Error::Config { line: 0, message } => usage(anyhow!("{}: {message}", path.display())),
        semmatch::Error::Config { line, message } => usage(anyhow!("{}:{line}: {message}", path.display())),
        other => usage(anyhow!("{}: {other}", path.display())),
    })
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(io)
}

fn write_step_diagnostics(out: &Path, rec: &StepRecord, energy_log: &mut String) -> anyhow::Result<()> {
    for g in &rec.guidance {
        writeln!(
            energy_log,
            "{{\"step\":{},\"t\":{},\"branch\":\"{}\",\"energy\":{},\"grad_norm\":{},\"mask_area\":{}}}",
            rec.step_index,
            rec.t,
            format!("{:?}", g.branch).to_lowercase(),
            g.energy,
            g.grad_norm,
            rec.mask_areas.map_or(0.0, |a| a.m_prime)
        )?;
    }
    let Some(art) = &rec.artifacts else {
        return Ok(());
    };
    let dir = out.join("steps").join(format!("{:03}", rec.t));
    fs::create_dir_all(&dir)?;
    write_flow_file(dir.join("flow.dmt"), &art.flows.ref_to_target)?;
    write_flow_file(dir.join("flow_reverse.dmt"), &art.flows.target_to_ref)?;
    write_mask_file(dir.join("mask_m.dmt"), &art.m_t)?;
    write_mask_file(dir.join("mask_u.dmt"), &art.u_t)?;
    write_mask_file(dir.join("mask_mprime.dmt"), &art.m_prime)?;
    write_grid_file(dir.join("psi_ref.dmt"), &art.psi_ref)?;
    write_grid_file(dir.join("psi_tgt.dmt"), &art.psi_tgt)?;
    render::render_tree(&dir)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.session.seed = seed;
    }
    cfg.session.diagnostics |= args.diagnostics;
    let setup = cfg.scenario.build().map_err(usage)?;
    create_dir(&args.out)?;
    let final_path = args.out.join("final_latent.dmt");

    if args.baseline {
        let z = run_baseline(&setup.backend, &cfg.session, &setup.conds).map_err(engine)?;
        write_grid_file(&final_path, &z).map_err(io)?;
        println!("baseline: {} steps -> {}", cfg.session.total_steps, final_path.display());
        return Ok(());
    }

    let mut energy_log = String::new();
    let mut sink_error = None;
    let diagnostics = cfg.session.diagnostics;
    let out = args.out.clone();
    let result = run_dual_branch_observed(
        &setup.backend,
        &cfg.session,
        &setup.reference_z0,
        &setup.conds,
        &mut |rec| {
            if diagnostics {
                if let Err(e) = write_step_diagnostics(&out, rec, &mut energy_log) {
                    let msg = e.to_string();
                    sink_error = Some(e);
                    return Err(semmatch::Error::Backend(format!("writing diagnostics: {msg}")));
                }
            }
            Ok(())
        },
    );
    if diagnostics {
        fs::write(args.out.join("energy.log"), &energy_log).map_err(io)?;
    }
    if let Some(e) = sink_error {
        return Err(io(e));
    }
    let result = result.map_err(engine)?;
    write_grid_file(&final_path, &result.final_latent).map_err(io)?;
    write_grid_file(args.out.join("reference_latent.dmt"), &result.reference_latent).map_err(io)?;
    let gated = result.steps.iter().filter(|s| s.ama_applied || s.guidance_applied).count();
    let recon = result.reference_latent.max_abs_diff(&setup.reference_z0);
    println!(
        "session: {} steps ({gated} gated), reference reconstruction error {recon:.3e} -> {}",
        result.steps.len(),
        final_path.display()
    );
    Ok(())
}

fn read_frames(paths: &[PathBuf]) -> Result<Vec<semmatch::tensors::TensorGrid>, Failure> {
    paths
        .iter()
        .map(|p| read_grid_file(p).map_err(|e| usage(anyhow!("{}: {e}", p.display()))))
        .collect()
}

fn cmd_match(args: MatchArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    if args.reference.len() != args.target.len() {
        return Err(usage(anyhow!(
            "{} reference frames but {} target frames",
            args.reference.len(),
            args.target.len()
        )));
    }
    let ref_feats = read_frames(&args.reference)?;
    let tgt_feats = read_frames(&args.target)?;
    let maps = read_frames(&args.cross_attn)?;
    let params = ConsistencyParams {
        lambda_c: args.lambda_c.unwrap_or(cfg.session.lambda_c),
        mask_threshold: cfg.session.mask_threshold,
    };
    params.validate().map_err(usage)?;

    let (h, w) = descriptor_resolution(&ref_feats).map_err(usage)?;
    let channels: usize = ref_feats.iter().map(|g| g.channels()).sum();
    let wanted = args.pca_dim.unwrap_or(cfg.session.pca_dim);
    let pca_dim = wanted.min(channels).min(2 * h * w);
    if pca_dim != wanted {
        log::info!("pca_dim {wanted} reduced to {pca_dim} for {channels} channels on {h}x{w}");
    }
    let pair = assemble_descriptors(&ref_feats, &tgt_feats, (h, w), pca_dim).map_err(usage)?;
    let c = cost_volume(&pair).map_err(engine)?;
    let f_xy = argmax_flow(&c, FlowDirection::RefToTarget, h, w).map_err(engine)?;
    let f_yx = argmax_flow(&c, FlowDirection::TargetToRef, h, w).map_err(engine)?;
    let m_t = if maps.is_empty() {
        MaskGrid::ones(h, w).map_err(engine)?
    } else {
        foreground_mask(&maps, &params, (h, w)).map_err(usage)?
    };
    let u_t = cycle_confidence(&f_xy, &f_yx, &m_t, &params).map_err(engine)?;
    let m_prime = semantic_consistent_mask(&m_t, &u_t).map_err(engine)?;

    let n = h * w;
    let mean_cost_max = (0..n)
        .map(|j| c.target_column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64;
    let confident_ratio = u_t.area() / n as f64;
    let mode = dominant_displacement(&f_xy, Some(&m_t));

    create_dir(&args.out)?;
    let write = || -> semmatch::Result<()> {
        write_flow_file(args.out.join("flow.dmt"), &f_xy)?;
        write_flow_file(args.out.join("flow_reverse.dmt"), &f_yx)?;
        write_mask_file(args.out.join("confidence.dmt"), &u_t)?;
        write_mask_file(args.out.join("mask_mprime.dmt"), &m_prime)?;
        Ok(())
    };
    write().map_err(io)?;
    let mut summary = format!(
        "resolution {h}x{w}\npca_dim {pca_dim}\nlambda_c {}\nmean_cost_max {mean_cost_max:.6}\nconfident_ratio {confident_ratio:.6}\n",
        params.lambda_c
    );
    match mode {
        Some(((dx, dy), share)) => summary.push_str(&format!("flow_mode {dx} {dy} {share:.6}\n")),
        None => summary.push_str("flow_mode none\n"),
    }
    fs::write(args.out.join("summary.txt"), &summary).map_err(io)?;
    print!("{summary}");
    Ok(())
}

fn cmd_warp(args: WarpArgs) -> CmdResult {
    let input = read_grid_file(&args.input).map_err(|e| usage(anyhow!("{}: {e}", args.input.display())))?;
    let flow = read_flow_file(&args.flow).map_err(|e| usage(anyhow!("{}: {e}", args.flow.display())))?;
    let flow = flow.resize(input.height(), input.width()).map_err(usage)?;
    let mut out = warp(&input, &flow).map_err(engine)?;
    if let (Some(mask), Some(base)) = (&args.mask, &args.base) {
        let mask = read_grid_file(mask)
            .and_then(|g| MaskGrid::from_grid(&g))
            .map_err(|e| usage(anyhow!("{}: {e}", mask.display())))?;
        let base = read_grid_file(base).map_err(|e| usage(anyhow!("{}: {e}", base.display())))?;
        let mask = mask.resize_binary(input.height(), input.width()).map_err(usage)?;
        out = hadamard_blend(&out, &base, &mask).map_err(usage)?;
    }
    write_grid_file(&args.out, &out).map_err(io)?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    if !args.dir.is_dir() {
        return Err(usage(anyhow!("{} is not a directory", args.dir.display())));
    }
    let written = render::render_tree(&args.dir).map_err(usage)?;
    if written.is_empty() {
        return Err(usage(anyhow!("no frames found under {}", args.dir.display())));
    }
    for path in &written {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> CmdResult {
    serve(args.listen.as_str(), Arc::new(SessionRegistry::new())).map_err(engine)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Match(a) => cmd_match(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
