//! Command-line front end for the densjac toolkit.
//!
//! Every command resolves its configuration from flags, then an optional JSON
//! `--config` file, then defaults, and embeds the result in its output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use densjac::certify::{bk_refine, verify_lemma2, RefinementState};
use densjac::density::{embedded_checkerboard, make_checkerboard};
use densjac::experiment::{glue_checkerboard, linf_checkerboard, sweep, SweepConfig};
use densjac::solver::realize_jacobian;
use densjac::{CheckerboardSpec, DensityField, PiecewiseAffineMap, Point, RasterMask, Rect, Segment, SegmentSet, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "densjac", version, about = "Prescribed-Jacobian experiments on checkerboard densities")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct Common {
    /// JSON file with default values for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Grid resolution as WxH
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short = 'o', long = "out", global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long = "L", global = true)]
    lipschitz: Option<f64>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a density file
    GenDensity {
        /// Checkerboard as N=4,c=1
        #[arg(long, value_parser = parse_checkerboard)]
        checkerboard: Option<CheckerboardSpec>,
        /// Constant density
        #[arg(long, conflicts_with = "checkerboard")]
        constant: Option<f64>,
        /// Place the checkerboard strip at the bottom of the unit square
        #[arg(long)]
        embed: bool,
    },
    /// Fit a piecewise-affine map to a density
    Solve {
        #[arg(long)]
        rho: PathBuf,
        /// Initial map (identity by default)
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Stretch ratios of a map on a segment set
    Stretch {
        #[arg(long)]
        map: PathBuf,
        /// JSON list of [[x,y],[x,y]] segments (horizontal rows by default)
        #[arg(long)]
        segments: Option<PathBuf>,
        #[arg(long)]
        rows: Option<usize>,
        /// Report pairs stretched by at least this factor
        #[arg(long = "A")]
        stretch: Option<f64>,
    },
    /// Glue a checkerboard into the low band of a density
    Perturb {
        #[arg(long)]
        rho: PathBuf,
        /// Side of the glued square in pixels
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
    },
    /// Floor a density at eps and patch a checkerboard near a band density point
    PatchLinf {
        #[arg(long)]
        rho: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        cells: Option<usize>,
    },
    /// Iterated checkerboard refinement; writes one density per level
    Refine {
        #[arg(long, value_parser = parse_checkerboard)]
        checkerboard: Option<CheckerboardSpec>,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Image inclusion and area checks for a map sequence
    VerifyLemma2 {
        /// JSON list of maps
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        limit: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Solve embedded checkerboards for several N
    Sweep {
        /// Comma-separated list of N
        #[arg(long = "N", value_delimiter = ',', num_args = 1..)]
        ns: Option<Vec<usize>>,
        #[arg(long)]
        c: Option<f64>,
    },
}

/// Values read from `--config`; flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    grid: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    tau: Option<f64>,
    eps: Option<f64>,
    #[serde(rename = "L")]
    lipschitz: Option<f64>,
    restarts: Option<usize>,
    workers: Option<usize>,
    checkerboard: Option<String>,
    constant: Option<f64>,
    max_iterations: Option<usize>,
    rows: Option<usize>,
    #[serde(rename = "A")]
    stretch: Option<f64>,
    side: Option<usize>,
    cells: Option<usize>,
    theta: Option<f64>,
    levels: Option<usize>,
    #[serde(rename = "N")]
    ns: Option<Vec<usize>>,
    c: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Input { .. } => "input",
            CliError::Config(_) => "config",
            CliError::Domain(_) => "domain",
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("grid sizes must be positive".into());
    }
    Ok((w, h))
}

fn parse_checkerboard(s: &str) -> Result<CheckerboardSpec, String> {
    let (mut n, mut c) = (None, None);
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
        match k.trim() {
            "N" | "n" => n = Some(v.trim().parse::<usize>().map_err(|e| format!("N: {e}"))?),
            "c" => c = Some(v.trim().parse::<f64>().map_err(|e| format!("c: {e}"))?),
            other => return Err(format!("unknown checkerboard key {other:?}")),
        }
    }
    let n = n.ok_or("missing N")?;
    CheckerboardSpec::new(n, c.unwrap_or(1.0)).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input { path: path.to_path_buf(), message: e.to_string() })
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn metadata(clock: Instant) -> Value {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({ "timestamp": ts, "wall_time_s": clock.elapsed().as_secs_f64() })
}

/// Serializes `body`, adding `config` and replacing `metadata`.
fn document(body: &impl Serialize, config: &impl Serialize, clock: Instant) -> Result<Value, CliError> {
    let mut v = serde_json::to_value(body).map_err(domain)?;
    let obj = match v.as_object_mut() {
        Some(o) => o,
        None => return Ok(json!({ "result": v, "config": config, "metadata": metadata(clock) })),
    };
    obj.insert("config".into(), serde_json::to_value(config).map_err(domain)?);
    obj.insert("metadata".into(), metadata(clock));
    Ok(v)
}

fn emit(out: Option<&Path>, doc: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(doc).map_err(domain)?;
    text.push('\n');
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct Resolved {
    file: FileConfig,
    common: Common,
}

impl Resolved {
    fn grid(&self, default: (usize, usize)) -> Result<(usize, usize), CliError> {
        match (self.common.grid, &self.file.grid) {
            (Some(g), _) => Ok(g),
            (None, Some(s)) => parse_grid(s).map_err(|e| CliError::Config(format!("grid: {e}"))),
            _ => Ok(default),
        }
    }
    fn seed(&self) -> u64 {
        self.common.seed.or(self.file.seed).unwrap_or(0)
    }
    fn out(&self) -> Option<PathBuf> {
        self.common.out.clone().or_else(|| self.file.out.clone())
    }
    fn solver(&self, default_l: f64) -> SolverConfig {
        let d = SolverConfig::default();
        SolverConfig {
            lipschitz_bound: self.common.lipschitz.or(self.file.lipschitz).unwrap_or(default_l),
            mismatch_tolerance: self.common.tau.or(self.file.tau).unwrap_or(d.mismatch_tolerance),
            restarts: self.common.restarts.or(self.file.restarts).unwrap_or(d.restarts),
            seed: self.seed(),
            ..d
        }
    }
    fn eps(&self, default: f64) -> f64 {
        self.common.eps.or(self.file.eps).unwrap_or(default)
    }
    fn checkerboard(&self, flag: Option<CheckerboardSpec>) -> Result<Option<CheckerboardSpec>, CliError> {
        match (flag, &self.file.checkerboard) {
            (Some(s), _) => Ok(Some(s)),
            (None, Some(s)) => parse_checkerboard(s).map(Some).map_err(|e| CliError::Config(format!("checkerboard: {e}"))),
            _ => Ok(None),
        }
    }
}

fn horizontal_rows(rect: Rect, rows: usize) -> Result<SegmentSet, CliError> {
    let segs = (0..rows)
        .map(|k| {
            let y = rect.y0() + (k as f64 + 0.5) * rect.height() / rows as f64;
            Segment::new(Point::new(rect.x0(), y), Point::new(rect.x1(), y))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(domain)?;
    SegmentSet::new(segs).map_err(domain)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let clock = Instant::now();
    let file = match &cli.common.config {
        Some(p) => read_json::<FileConfig>(p)?,
        None => FileConfig::default(),
    };
    let cfg = Resolved { file, common: cli.common.clone() };
    let workers = cfg.common.workers.or(cfg.file.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(domain)?;
    pool.install(|| dispatch(cli.command, &cfg, clock))
}

fn dispatch(command: Command, cfg: &Resolved, clock: Instant) -> Result<(), CliError> {
    let out = cfg.out();
    match command {
        Command::GenDensity { checkerboard, constant, embed } => {
            let (nx, ny) = cfg.grid((64, 64))?;
            let spec = cfg.checkerboard(checkerboard)?;
            let constant = constant.or(cfg.file.constant);
            let rho = match (spec, constant) {
                (Some(s), _) if embed => embedded_checkerboard(s, nx, ny),
                (Some(s), _) => make_checkerboard(s, nx, ny),
                (None, Some(v)) => DensityField::constant(Rect::unit(), nx, ny, v),
                (None, None) => return Err(CliError::Config("give --checkerboard or --constant".into())),
            }
            .map_err(domain)?;
            let config = json!({ "checkerboard": spec, "constant": constant, "embed": embed, "grid": [nx, ny] });
            emit(out.as_deref(), &document(&rho, &config, clock)?)
        }
        Command::Solve { rho, init, max_iterations } => {
            let field: DensityField = read_json(&rho)?;
            let mut solver = cfg.solver(2.0);
            if let Some(m) = max_iterations.or(cfg.file.max_iterations) {
                solver.max_iterations = m;
            }
            let initial = match &init {
                Some(p) => read_json::<PiecewiseAffineMap>(p)?,
                None => PiecewiseAffineMap::identity_on(field.rect(), field.nx(), field.ny()).map_err(domain)?,
            };
            let report = realize_jacobian(&field, &solver, &initial).map_err(domain)?;
            if let Some(p) = &out {
                write_atomic(&p.with_extension("trace.csv"), report.trace_csv().as_bytes())?;
            }
            let config = json!({ "rho": rho, "init": init, "solver": solver });
            emit(out.as_deref(), &document(&report, &config, clock)?)
        }
        Command::Stretch { map, segments, rows, stretch } => {
            let f: PiecewiseAffineMap = read_json(&map)?;
            let rows = rows.or(cfg.file.rows).unwrap_or(8);
            let set = match &segments {
                Some(p) => read_json::<SegmentSet>(p)?,
                None => horizontal_rows(f.domain(), rows)?,
            };
            let report = f.stretch_pairs(&set).map_err(domain)?;
            let a = stretch.or(cfg.file.stretch);
            let body = json!({
                "pairs": report.pairs,
                "min_ratio": report.min_ratio,
                "max_ratio": report.max_ratio,
                "stretched": a.map(|a| report.stretched(a)),
            });
            let config = json!({ "map": map, "segments": segments, "rows": rows, "A": a });
            emit(out.as_deref(), &document(&body, &config, clock)?)
        }
        Command::Perturb { rho, side, cells } => {
            let phi: DensityField = read_json(&rho)?;
            let eps = cfg.eps(0.05);
            let side = side.or(cfg.file.side).unwrap_or((phi.nx().min(phi.ny()) / 8).max(1));
            let cells = cells.or(cfg.file.cells).unwrap_or(2);
            let g = glue_checkerboard(&phi, eps, side, cells).map_err(domain)?;
            let body = json!({
                "nx": g.rho.nx(), "ny": g.rho.ny(), "rect": g.rho.rect(), "range": g.rho.range(),
                "values": g.rho.values(), "square": g.square,
            });
            let config = json!({ "rho": rho, "eps": eps, "side": side, "cells": cells });
            emit(out.as_deref(), &document(&body, &config, clock)?)
        }
        Command::PatchLinf { rho, theta, cells } => {
            let phi: DensityField = read_json(&rho)?;
            let eps = cfg.eps(0.05);
            let theta = theta.or(cfg.file.theta).unwrap_or(0.95);
            let cells = cells.or(cfg.file.cells).unwrap_or(2);
            let p = linf_checkerboard(&phi, eps, theta, cells).map_err(domain)?;
            let body = json!({
                "nx": p.rho.nx(), "ny": p.rho.ny(), "rect": p.rho.rect(), "range": p.rho.range(),
                "values": p.rho.values(), "band": p.band, "square": p.square,
            });
            let config = json!({ "rho": rho, "eps": eps, "theta": theta, "cells": cells });
            emit(out.as_deref(), &document(&body, &config, clock)?)
        }
        Command::Refine { checkerboard, levels } => {
            let (nx, ny) = cfg.grid((128, 128))?;
            let spec = match cfg.checkerboard(checkerboard)? {
                Some(s) => s,
                None => CheckerboardSpec::new(4, 1.0).map_err(domain)?,
            };
            let levels = levels.or(cfg.file.levels).unwrap_or(2);
            let solver = cfg.solver(1.05);
            let dir = out.ok_or_else(|| CliError::Config("refine needs --out DIR".into()))?;
            let config = json!({ "checkerboard": spec, "levels": levels, "grid": [nx, ny], "solver": solver });
            let mut state = RefinementState::new(spec, nx, ny).map_err(domain)?;
            emit(Some(&dir.join("level_0.json")), &document(&state.density, &config, clock)?)?;
            for level in 1..=levels {
                state = bk_refine(state, &solver, spec).map_err(domain)?;
                emit(Some(&dir.join(format!("level_{level}.json"))), &document(&state.density, &config, clock)?)?;
            }
            let body = json!({ "level": state.level, "region": state.region, "history": state.history });
            emit(Some(&dir.join("history.json")), &document(&body, &config, clock)?)
        }
        Command::VerifyLemma2 { sequence, limit, mask } => {
            let seq: Vec<PiecewiseAffineMap> = read_json(&sequence)?;
            let lim: PiecewiseAffineMap = read_json(&limit)?;
            let u: RasterMask = read_json(&mask)?;
            let eps = cfg.eps(0.1);
            let report = verify_lemma2(&seq, &lim, &u, eps).map_err(domain)?;
            let config = json!({ "sequence": sequence, "limit": limit, "mask": mask, "eps": eps });
            emit(out.as_deref(), &document(&report, &config, clock)?)
        }
        Command::Sweep { ns, c } => {
            let (nx, ny) = cfg.grid((64, 64))?;
            let ns = ns.or_else(|| cfg.file.ns.clone()).unwrap_or_else(|| vec![2, 4, 8]);
            if ns.is_empty() {
                return Err(CliError::Config("N list is empty".into()));
            }
            let mut solver = cfg.solver(1.05);
            if cfg.common.tau.or(cfg.file.tau).is_none() {
                solver.mismatch_tolerance = 0.5;
            }
            let config = SweepConfig { ns, c: c.or(cfg.file.c).unwrap_or(1.0), nx, ny, solver };
            let report = sweep(&config).map_err(domain)?;
            match &out {
                Some(p) => {
                    write_atomic(p, report.to_csv().as_bytes())?;
                    emit(Some(&p.with_extension("json")), &document(&report, &config, clock)?)
                }
                None => {
                    print!("{}", report.to_csv());
                    Ok(())
                }
            }
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 1 on domain errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("JF_LOG")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::debug!("command failed: {e}");
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            1
        }
    }
}
