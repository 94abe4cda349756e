//! The `sdm` command line: each subcommand reads and writes the plain-text
//! formats of the library modules, stamped with the run provenance.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use crate::analysis::{compare, ComparisonReport};
use crate::artifact::{annotate_text, annotated_json, read_json, Provenance, RunConfig};
use crate::design::{compensated_edge_length, resonance_roots};
use crate::lattice::{self, build_patch, validate, PatchKind, PortConfig};
use crate::plot::{emit_plot_data, PlotKind, PlotSource};
use crate::probe::{fit_gamma, lateral_profile, synthetic_table, CalibrationKey, ProbeCalibration, ProbeGeometry};
use crate::scanner::{
    extract_weights, highest_gap_modes, load_dataset, load_plan, mode_windows, plan_scan, run_virtual_scan, save_dataset,
    track_mode_shifts, PlanOptions, ShiftCurve,
};
use crate::spectral::{build_mode_matrix, mode_weights, solve_modes, DefectSet, ModeSet, DEFAULT_CLUSTER_TOL_GHZ};
use crate::transmission::{sweep_modes, uniform_grid, TransmissionSpectrum};
use crate::weights::WeightMap;

#[derive(Debug, Parser)]
#[command(name = "sdm", version, about = "Virtual scanning-defect-microscopy lab for coupled resonator lattices")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Run configuration (JSON); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write or inspect run configurations.
    #[command(subcommand)]
    Config(ConfigCmd),
    /// Build and validate lattice files.
    #[command(subcommand)]
    Lattice(LatticeCmd),
    /// Normal modes of a lattice.
    #[command(subcommand)]
    Modes(ModesCmd),
    /// Driven transmission spectra.
    #[command(subcommand)]
    Spectrum(SpectrumCmd),
    /// Probe calibration and lateral response.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Virtual scans: plan, measure, track, extract.
    #[command(subcommand)]
    Scan(ScanCmd),
    /// Score measured weight maps against theory.
    Compare(CompareArgs),
    /// Resonator design helpers.
    #[command(subcommand)]
    Design(DesignCmd),
    /// Plot-ready tables from artifacts.
    Plot(PlotArgs),
}

#[derive(Debug, Subcommand)]
enum ConfigCmd {
    /// Write a configuration: the preset, or the effective one with `--config`.
    Init {
        /// ideal or degraded
        #[arg(long)]
        preset: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print the effective configuration hash and seeds.
    Show,
}

#[derive(Debug, Subcommand)]
enum LatticeCmd {
    Build {
        /// single, dimer, triangle, kagome-star, kagome49 or from-file:PATH
        #[arg(long)]
        kind: String,
        /// Port sites as `input,output`.
        #[arg(long)]
        ports: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    Validate {
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ModesCmd {
    Solve {
        /// Overrides the configured lattice file.
        #[arg(long)]
        lattice: Option<PathBuf>,
        /// Include the device disorder instead of the clean model.
        #[arg(long)]
        with_disorder: bool,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the theory weight maps.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum SpectrumCmd {
    Sweep {
        #[arg(long)]
        lattice: Option<PathBuf>,
        /// Lower sweep bound [GHz]; defaults to the lowest mode minus 10 linewidths.
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        /// Grid step [GHz]; defaults to a tenth of the linewidth.
        #[arg(long)]
        step: Option<f64>,
        /// Static defect `site:shift_mhz`, repeatable.
        #[arg(long = "defect")]
        defects: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ProbeCmd {
    /// Fit the height law to synthetic tables generated from the true law.
    Calibrate {
        /// Comma-separated table heights [um].
        #[arg(long, default_value = "40,50,60,70,80,90,100")]
        heights: String,
        #[arg(short, long)]
        out: PathBuf,
        /// Directory for per-class calibration tables.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Shift along a single resonator.
    Profile {
        #[arg(long, default_value_t = 6.0)]
        length_mm: f64,
        #[arg(long, default_value_t = 2.2)]
        footprint_mm: f64,
        #[arg(long, default_value_t = 663.0)]
        peak_mhz: f64,
        #[arg(long, default_value_t = 121)]
        points: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ScanCmd {
    Plan {
        #[arg(short, long)]
        out: PathBuf,
    },
    Run {
        /// Scan plan.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    Track {
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    Extract {
        /// Shift curves.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    measured: PathBuf,
    /// Theory modes.
    #[arg(long)]
    modes: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum DesignCmd {
    /// Edge length that keeps an end-loaded resonator at the bulk frequency.
    EdgeLength {
        /// Bulk resonator length [mm].
        #[arg(long)]
        lb: f64,
        /// Edge left / right end capacitance [fF].
        #[arg(long)]
        cle: f64,
        #[arg(long)]
        cre: f64,
        /// Capacitance per length [fF/mm].
        #[arg(long)]
        c_per_len: f64,
        #[arg(long, default_value_t = 1)]
        mode_index: u32,
        /// Bulk left / right end capacitance [fF].
        #[arg(long, default_value_t = 0.0)]
        clb: f64,
        #[arg(long, default_value_t = 0.0)]
        crb: f64,
    },
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// spectrum, profile, calibration, shifts, map or stems
    kind: String,
    /// Source artifact.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Lattice for map plots (defaults to the configured one).
    #[arg(long)]
    lattice: Option<PathBuf>,
    /// 1-based mode label for shifts, map and stems.
    #[arg(long)]
    mode: Option<usize>,
    /// Site index for shifts.
    #[arg(long)]
    site: Option<usize>,
}

struct Ctx {
    workdir: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn prov(&self, command: &str) -> Provenance {
        self.config.provenance(command)
    }

    fn write(&self, p: &Path, text: &str) -> Result<()> {
        let path = self.path(p);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json<T: serde::Serialize>(&self, p: &Path, value: &T, command: &str) -> Result<()> {
        self.write(p, &annotated_json(value, &self.prov(command))?)
    }

    fn lattice(&self, over: Option<&Path>) -> Result<lattice::LatticeSpec> {
        let p = self.path(over.unwrap_or(&self.config.lattice));
        lattice::load(&p).with_context(|| format!("loading lattice {}", p.display()))
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for everything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(&cli.workdir.join(p)).context("invalid config")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = crate::artifact::Seeds::all(seed);
    }
    config.check().context("invalid config")?;
    let ctx = Ctx { workdir: cli.workdir, config };
    match cli.command {
        Command::Config(c) => config_cmd(&ctx, c),
        Command::Lattice(c) => lattice_cmd(&ctx, c),
        Command::Modes(c) => modes_cmd(&ctx, c),
        Command::Spectrum(c) => spectrum_cmd(&ctx, c),
        Command::Probe(c) => probe_cmd(&ctx, c),
        Command::Scan(c) => scan_cmd(&ctx, c),
        Command::Compare(a) => compare_cmd(&ctx, a),
        Command::Design(c) => design_cmd(c),
        Command::Plot(a) => plot_cmd(&ctx, a),
    }
}

fn config_cmd(ctx: &Ctx, cmd: ConfigCmd) -> Result<()> {
    match cmd {
        ConfigCmd::Init { preset, out } => {
            let mut config = match preset {
                Some(p) => RunConfig::preset(&p)?,
                None => ctx.config.clone(),
            };
            config.seeds = ctx.config.seeds;
            ctx.write(&out, &config.to_json())
        }
        ConfigCmd::Show => {
            let s = ctx.config.seeds;
            println!("config_sha256 {}", ctx.config.hash());
            println!("seeds disorder={} device={} noise={}", s.disorder, s.device, s.noise);
            Ok(())
        }
    }
}

fn lattice_cmd(ctx: &Ctx, cmd: LatticeCmd) -> Result<()> {
    match cmd {
        LatticeCmd::Build { kind, ports, out } => {
            let kind = match kind.parse::<PatchKind>()? {
                PatchKind::FromFile(p) => PatchKind::FromFile(ctx.path(&p)),
                k => k,
            };
            let mut l = build_patch(&kind)?;
            if let Some(p) = ports {
                let (a, b) = p.split_once(',').ok_or_else(|| anyhow!("ports must be `input,output`"))?;
                l.set_ports(a.trim().parse()?, b.trim().parse()?)?;
            }
            let report = validate(&l);
            if !report.is_valid() {
                bail!("built lattice is invalid: {report:?}");
            }
            ctx.write(&out, &annotate_text(&lattice::to_json(&l), &ctx.prov("lattice build"))?)
        }
        LatticeCmd::Validate { file } => {
            let l = lattice::load(&ctx.path(&file))?;
            let report = validate(&l);
            if !report.is_valid() {
                bail!("{}: {report:?}", file.display());
            }
            println!("{}: {} sites, {} edges, valid", l.name, l.len(), l.edges.len());
            Ok(())
        }
    }
}

fn modes_cmd(ctx: &Ctx, cmd: ModesCmd) -> Result<()> {
    let ModesCmd::Solve { lattice, with_disorder, out, weights } = cmd;
    let l = ctx.lattice(lattice.as_deref())?;
    let params = if with_disorder { ctx.config.device_params() } else { ctx.config.theory_params() };
    let modes = solve_modes(&build_mode_matrix(&l, &params, &DefectSet::new())?, DEFAULT_CLUSTER_TOL_GHZ)?;
    ctx.write_json(&out, &modes, "modes solve")?;
    if let Some(w) = weights {
        ctx.write_json(&w, &mode_weights(&modes), "modes solve")?;
    }
    println!("{} modes, {:.6}..{:.6} GHz", modes.len(), modes.frequencies[0], modes.frequencies[modes.len() - 1]);
    Ok(())
}

fn parse_defect(s: &str) -> Result<(usize, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| anyhow!("defect must be `site:shift_mhz`, got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse::<f64>()? * 1e-3))
}

fn spectrum_cmd(ctx: &Ctx, cmd: SpectrumCmd) -> Result<()> {
    let SpectrumCmd::Sweep { lattice, lo, hi, step, defects, out } = cmd;
    let l = ctx.lattice(lattice.as_deref())?;
    let ports = l.ports.ok_or_else(|| anyhow!("lattice {} has no ports", l.name))?;
    let params = ctx.config.device_params();
    let mut d = DefectSet::new();
    for s in &defects {
        let (site, shift) = parse_defect(s)?;
        if site >= l.len() {
            bail!("defect site {site} outside lattice of {} sites", l.len());
        }
        d.0.insert(site, shift);
    }
    let modes = solve_modes(&build_mode_matrix(&l, &params, &d)?, DEFAULT_CLUSTER_TOL_GHZ)?;
    let kappa = params.loss_ghz;
    let lo = lo.unwrap_or(modes.frequencies[0] - 10.0 * kappa);
    let hi = hi.unwrap_or(modes.frequencies[modes.len() - 1] + 10.0 * kappa);
    let grid = uniform_grid(lo, hi, step.unwrap_or(kappa / 10.0));
    let spec = sweep_modes(&modes, kappa, ports, &grid, Complex64::new(1.0, 0.0));
    save_csv(ctx, &out, |path, c| spec.save_with_comment(path, c).map_err(Into::into), "spectrum sweep")?;
    println!("{} points", spec.len());
    Ok(())
}

fn save_csv(ctx: &Ctx, out: &Path, save: impl FnOnce(&Path, Option<&str>) -> Result<()>, command: &str) -> Result<()> {
    let path = ctx.path(out);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save(&path, Some(&ctx.prov(command).comment())).with_context(|| format!("writing {}", path.display()))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("{v:?}: {e}"))).collect()
}

fn probe_cmd(ctx: &Ctx, cmd: ProbeCmd) -> Result<()> {
    match cmd {
        ProbeCmd::Calibrate { heights, out, tables } => {
            let heights = parse_list(&heights)?;
            let truth = &ctx.config.true_calibration;
            let geom = ProbeGeometry::default();
            let mut fitted = ProbeCalibration { exponent: 2.0, ..ProbeCalibration::default() };
            fitted.omega_r_ghz = truth.omega_r_ghz;
            let mut offsets = Vec::new();
            for (i, key) in CalibrationKey::all().into_iter().enumerate() {
                let seed = ctx.config.seeds.noise.wrapping_add(i as u64);
                let samples = synthetic_table(truth, key, &heights, &geom, ctx.config.world.table_noise, seed)?;
                let fit = fit_gamma(&samples, truth.omega_r_ghz)?;
                println!(
                    "{key}: gamma {:.4} z0 {:.2} um relative residual {:.2e}",
                    fit.gamma,
                    fit.z_offset_um,
                    fit.relative_residual(&samples)
                );
                fitted.gamma.insert(key, fit.gamma);
                offsets.push(fit.z_offset_um);
                if let Some(dir) = &tables {
                    let source = PlotSource::Calibration { samples: &samples, fit: &fit, omega_r_ghz: truth.omega_r_ghz };
                    let table = emit_plot_data(&source, PlotKind::Calibration)?;
                    let name = dir.join(format!("{}.csv", key.to_string().replace(':', "-")));
                    save_csv(ctx, &name, |p, c| table.save(p, c).map_err(Into::into), "probe calibrate")?;
                }
            }
            fitted.z_offset_um = offsets.iter().sum::<f64>() / offsets.len() as f64;
            fitted.check()?;
            ctx.write(&out, &annotate_text(&fitted.to_json(), &ctx.prov("probe calibrate"))?)
        }
        ProbeCmd::Profile { length_mm, footprint_mm, peak_mhz, points, out } => {
            if points < 2 {
                bail!("need at least two profile points");
            }
            let geom = ProbeGeometry { footprint_side_mm: footprint_mm, ..ProbeGeometry::default() };
            let samples = (0..points)
                .map(|k| {
                    let x = length_mm * k as f64 / (points - 1) as f64;
                    Ok((x, lateral_profile(x, length_mm, &geom, peak_mhz)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = emit_plot_data(&PlotSource::Profile(&samples), PlotKind::Profile)?;
            save_csv(ctx, &out, |p, c| table.save(p, c).map_err(Into::into), "probe profile")
        }
    }
}

fn scan_cmd(ctx: &Ctx, cmd: ScanCmd) -> Result<()> {
    let cfg = &ctx.config;
    match cmd {
        ScanCmd::Plan { out } => {
            let l = ctx.lattice(None)?;
            let modes = solve_modes(&build_mode_matrix(&l, &cfg.theory_params(), &DefectSet::new())?, DEFAULT_CLUSTER_TOL_GHZ)?;
            let labels =
                if cfg.scan.modes.is_empty() { highest_gap_modes(&modes, cfg.scan.top_gap_modes) } else { cfg.scan.modes.clone() };
            let windows = mode_windows(&modes, &labels, cfg.scan.window_fraction)?;
            let sites: Vec<usize> = if cfg.scan.sites.is_empty() { (0..l.len()).collect() } else { cfg.scan.sites.clone() };
            let options = PlanOptions { grid_step_ghz: cfg.scan.grid_step_ghz, kappa_ghz: cfg.params.loss_ghz, ..PlanOptions::default() };
            let plan = plan_scan(&l, &modes, &sites, &cfg.scan.z_grid_um, &windows, &cfg.assumed_calibration, &options)?;
            ctx.write_json(&out, &plan, "scan plan")?;
            println!("modes {labels:?}, {} measurements, {} grid points", plan.measurement_count(), plan.grid_ghz.len());
            Ok(())
        }
        ScanCmd::Run { input, out } => {
            let plan = load_plan(&ctx.path(&input))?;
            let world = cfg.world_model(plan.lattice.clone());
            let data = run_virtual_scan(&plan, &world)?;
            save_dataset(&data, &ctx.path(&out), Some(&ctx.prov("scan run")))?;
            println!("{} spectra written", plan.measurement_count());
            Ok(())
        }
        ScanCmd::Track { input, out } => {
            let (data, _) = load_dataset(&ctx.path(&input))?;
            let curves = track_mode_shifts(&data, &cfg.scan.track)?;
            let lost = curves.iter().filter(|c| !c.complete).count();
            ctx.write_json(&out, &curves, "scan track")?;
            println!("{} curves, {lost} with dropped heights", curves.len());
            Ok(())
        }
        ScanCmd::Extract { input, plan, out } => {
            let curves: Vec<ShiftCurve> = read_json(&ctx.path(&input))?;
            let plan = load_plan(&ctx.path(&plan))?;
            let maps = extract_weights(&curves, &plan, &cfg.scan.extract)?;
            for m in &maps {
                if !m.unmeasured.is_empty() {
                    eprintln!("mode {}: unmeasured sites {:?}", m.mode, m.unmeasured);
                }
            }
            ctx.write_json(&out, &maps, "scan extract")
        }
    }
}

fn compare_cmd(ctx: &Ctx, args: CompareArgs) -> Result<()> {
    let measured: Vec<WeightMap> = read_json(&ctx.path(&args.measured))?;
    let theory: ModeSet = read_json(&ctx.path(&args.modes))?;
    let reports = compare(&measured, &theory, ctx.config.params.loss_ghz)?;
    for r in &reports {
        println!("mode {:>2}  F {:.5}  n-rms {:.2}%", r.mode, r.fidelity, 100.0 * r.n_rms);
    }
    ctx.write_json(&args.out, &reports, "compare")
}

fn design_cmd(cmd: DesignCmd) -> Result<()> {
    let DesignCmd::EdgeLength { lb, cle, cre, c_per_len, mode_index, clb, crb } = cmd;
    let chi = |c: f64, l: f64| c / (c_per_len * l);
    let w_bulk = resonance_roots(chi(clb, lb), chi(crb, lb), mode_index)?;
    let e = compensated_edge_length(lb, w_bulk, cle, cre, c_per_len)?;
    let w_edge = resonance_roots(chi(cle, e.exact_mm), chi(cre, e.exact_mm), mode_index)?;
    // same wave speed on both lines, so frequency goes as root / length
    let mismatch = (w_edge / e.exact_mm) / (w_bulk / lb) - 1.0;
    println!("exact_mm {:.9}", e.exact_mm);
    println!("leading_order_mm {:.9}", e.leading_order_mm);
    println!("relative_frequency_mismatch {mismatch:.3e}");
    Ok(())
}

fn plot_cmd(ctx: &Ctx, args: PlotArgs) -> Result<()> {
    let kind: PlotKind = args.kind.parse()?;
    let input = ctx.path(&args.input);
    let table = match kind {
        PlotKind::Spectrum => {
            let ports = PortConfig { input: 0, output: 0 };
            let spec = TransmissionSpectrum::load(&input, ports, ctx.config.params.loss_ghz, Complex64::new(1.0, 0.0))?;
            emit_plot_data(&PlotSource::Spectrum(&spec), kind)?
        }
        PlotKind::Shifts => {
            let curves: Vec<ShiftCurve> = read_json(&input)?;
            let (mode, site) = args.mode.zip(args.site).ok_or_else(|| anyhow!("shifts plot needs --mode and --site"))?;
            let c = curves
                .iter()
                .find(|c| c.mode == mode && c.site == site)
                .ok_or_else(|| anyhow!("no curve for mode {mode} at site {site}"))?;
            emit_plot_data(&PlotSource::Shifts(c), kind)?
        }
        PlotKind::Map | PlotKind::Stems => {
            let reports: Vec<ComparisonReport> = read_json(&input)?;
            let mode = args.mode.ok_or_else(|| anyhow!("{kind} plot needs --mode"))?;
            let report = reports.iter().find(|r| r.mode == mode).ok_or_else(|| anyhow!("no report for mode {mode}"))?;
            let l = ctx.lattice(args.lattice.as_deref())?;
            emit_plot_data(&PlotSource::Comparison { report, lattice: &l }, kind)?
        }
        PlotKind::Profile | PlotKind::Calibration => {
            bail!("{kind} tables are written directly by `probe {}`", if kind == PlotKind::Profile { "profile" } else { "calibrate --tables" })
        }
    };
    save_csv(ctx, &args.out, |p, c| table.save(p, c).map_err(Into::into), "plot")
}
