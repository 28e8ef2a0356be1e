use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vertisim_core::cellsim::{run_sweep, MacConfig, SweepDataset, SweepGrid};
use vertisim_core::channel::{ChannelConfig, RadioConfig};
use vertisim_core::distfit::{fit_dataset, DistributionTable, FitPlan};
use vertisim_core::orchestrator::{
    packet_log_from_csv, packet_log_to_csv, run_city, whatif, CityRun, KpiThresholds, Scenario,
};
use vertisim_core::surrogate::{RegressorKind, SurrogateSet};
use vertisim_core::urban::{
    intervals_from_csv, intervals_to_csv, simulate_activity, validate_activity, ActivityReport, ActivityStats,
    ActivityTolerances,
};
use vertisim_core::validate::{cross_validate, Tolerances, ValidationCase};

use crate::args::{Cli, Command, GlobalArgs, RegressorArg};
use crate::config::{self, OverlayConfig, SweepConfig, TrainConfig, ValidateConfig, DEFAULT_N_SAMPLES};
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_hex, OutputFile, RunManifest, MANIFEST_FILE};

/// Book-keeping of one command: consumed inputs and produced outputs.
struct Ctx {
    out: PathBuf,
    outputs: Vec<String>,
    inputs: BTreeMap<String, String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl Ctx {
    fn input_text(&mut self, path: &Path) -> CliResult<String> {
        let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).map_err(|e| data_err(path, e))
    }

    fn config<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let loaded = config::load::<T>(path)?;
        self.config_sha256 = Some(sha256_hex(&loaded.bytes));
        Ok(loaded.value)
    }

    /// Secondary configuration files are recorded as inputs.
    fn extra_config<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let loaded = config::load::<T>(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&loaded.bytes));
        Ok(loaded.value)
    }

    fn write(&mut self, rel: &str, contents: &str) -> CliResult<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| data_err(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| data_err(&path, e))?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        self.write(rel, &(text + "\n"))
    }
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    opt.as_ref().ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn absolute(p: &mut PathBuf) {
    if let Ok(abs) = std::path::absolute(&*p) {
        *p = abs;
    }
}

/// Makes every path of the invocation absolute so the manifest can be replayed from anywhere.
pub fn resolve_paths(cli: &mut Cli) {
    for p in [&mut cli.global.config, &mut cli.global.out].into_iter().flatten() {
        absolute(p);
    }
    match &mut cli.command {
        Command::Fit { input } | Command::Train { input, .. } => absolute(input),
        Command::Urban { reference } => {
            if let Some(r) = reference {
                absolute(r);
            }
        }
        Command::Run { model, intervals } => {
            absolute(model);
            absolute(intervals);
        }
        Command::Whatif { overlay, model, intervals } => {
            absolute(overlay);
            absolute(model);
            absolute(intervals);
        }
        Command::Validate { model } => absolute(model),
        Command::Rerun { manifest } => absolute(manifest),
        Command::Sweep | Command::Defaults => {}
    }
}

fn pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match workers {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f)),
        None => Ok(f()),
    }
}

/// Runs one command and writes its manifest. A failed validation still
/// leaves complete outputs and a manifest behind before reporting the failure.
pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let started = Instant::now();
    let g = &cli.global;
    let out = match (&cli.command, &g.out) {
        (Command::Defaults, None) => {
            print!("{}", defaults_page());
            return Ok(empty_manifest(cli));
        }
        _ => require(&g.out, "out")?.clone(),
    };
    fs::create_dir_all(&out).map_err(|e| data_err(&out, e))?;
    let mut ctx = Ctx {
        out,
        outputs: Vec::new(),
        inputs: BTreeMap::new(),
        config_sha256: None,
        seed: None,
    };
    let failure = match &cli.command {
        Command::Sweep => sweep(g, &mut ctx)?,
        Command::Fit { input } => fit(g, input, &mut ctx)?,
        Command::Train { input, regressor, degree, ridge } => train(g, input, *regressor, *degree, *ridge, &mut ctx)?,
        Command::Urban { reference } => urban(g, reference.as_deref(), &mut ctx)?,
        Command::Run { model, intervals } => run(g, model, intervals, &mut ctx)?,
        Command::Whatif { overlay, model, intervals } => what_if(g, overlay, model, intervals, &mut ctx)?,
        Command::Validate { model } => validate(g, model, &mut ctx)?,
        Command::Defaults => {
            ctx.write("defaults.md", &defaults_page())?;
            None
        }
        Command::Rerun { .. } => return Err(CliError::Config("rerun cannot be nested".into())),
    };
    let mut outputs = Vec::new();
    for rel in &ctx.outputs {
        let path = ctx.out.join(rel);
        let bytes = fs::read(&path).map_err(|e| data_err(&path, e))?;
        outputs.push(OutputFile { path: rel.clone(), sha256: sha256_hex(&bytes) });
    }
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        invocation: cli.clone(),
        config_sha256: ctx.config_sha256,
        inputs: ctx.inputs,
        seed: ctx.seed,
        outputs,
        duration_s: started.elapsed().as_secs_f64(),
    };
    manifest.write_atomic(&ctx.out)?;
    match failure {
        Some(msg) => Err(CliError::Validation(msg)),
        None => Ok(manifest),
    }
}

fn empty_manifest(cli: &Cli) -> RunManifest {
    RunManifest {
        command: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        invocation: cli.clone(),
        config_sha256: None,
        inputs: BTreeMap::new(),
        seed: None,
        outputs: Vec::new(),
        duration_s: 0.0,
    }
}

type Outcome = CliResult<Option<String>>;

fn sweep(g: &GlobalArgs, ctx: &mut Ctx) -> Outcome {
    let cfg: SweepConfig = ctx.config(require(&g.config, "config")?)?;
    let seed = g.seed.unwrap_or(cfg.seed);
    ctx.seed = Some(seed);
    let grid = SweepGrid {
        base: cfg.base,
        axes: cfg.axes,
        replications: cfg.replications,
        seed_base: seed,
    };
    let ds = run_sweep(&grid, cfg.duration_s, g.workers)?;
    let files = ds.write_dir(&ctx.out)?;
    ctx.outputs.extend(files);
    let failed: Vec<_> = ds.points.iter().filter(|p| p.error.is_some()).collect();
    for p in &failed {
        eprintln!("warning: point {} failed: {}", p.index, p.error.as_deref().unwrap_or(""));
    }
    println!("sweep: {} points, {} failed", ds.points.len(), failed.len());
    Ok(None)
}

fn fit(g: &GlobalArgs, input: &Path, ctx: &mut Ctx) -> Outcome {
    let plan: FitPlan = match &g.config {
        Some(p) => ctx.config(p)?,
        None => FitPlan::default(),
    };
    let mut names: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| data_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    names.sort();
    for p in &names {
        ctx.input_text(p)?;
    }
    let ds = SweepDataset::read_dir(input)?;
    let (table, skipped) = fit_dataset(&ds, &plan)?;
    ctx.write("table.csv", &table.to_csv())?;
    let mut s = String::from("point,kpi,reason\n");
    for k in &skipped {
        let _ = writeln!(s, "{},{},{}", k.point, k.kpi, k.reason.replace([',', '\n'], ";"));
    }
    ctx.write("skipped.csv", &s)?;
    println!("fit: {} rows, {} skipped", table.rows.len(), skipped.len());
    Ok(None)
}

fn train(g: &GlobalArgs, input: &Path, regressor: RegressorArg, degree: u32, ridge: f64, ctx: &mut Ctx) -> Outcome {
    let kind = match &g.config {
        Some(p) => ctx.config::<TrainConfig>(p)?.regressor,
        None => match regressor {
            RegressorArg::Multilinear => RegressorKind::MultilinearInterp,
            RegressorArg::Polynomial => RegressorKind::PolynomialRidge { degree, ridge },
        },
    };
    let text = ctx.input_text(input)?;
    let table = DistributionTable::from_csv(&text, &input.display().to_string())?;
    let set = SurrogateSet::train_all(&table, kind)?;
    ctx.write("model.json", &(set.to_json()? + "\n"))?;
    println!("train: {} models", set.models.len());
    Ok(None)
}

fn scenario(g: &GlobalArgs, ctx: &mut Ctx) -> CliResult<Scenario> {
    let mut sc: Scenario = ctx.config(require(&g.config, "config")?)?;
    if let Some(s) = g.seed {
        sc.seed = s;
    }
    ctx.seed = Some(sc.seed);
    sc.validate()?;
    Ok(sc)
}

#[derive(Serialize)]
struct ActivitySummary {
    intervals: usize,
    handovers: u64,
    coverage_gap_s: f64,
    report: Option<ActivityReport>,
}

fn urban(g: &GlobalArgs, reference: Option<&Path>, ctx: &mut Ctx) -> Outcome {
    let sc = scenario(g, ctx)?;
    let act = simulate_activity(&sc.sites, &sc.entities, sc.horizon_s, sc.hysteresis)?;
    ctx.write("intervals.csv", &intervals_to_csv(&act.intervals))?;
    let reference: Option<ActivityStats> = match reference {
        Some(p) => {
            let text = ctx.input_text(p)?;
            Some(serde_json::from_str(&text).map_err(|e| data_err(p, e))?)
        }
        None => None,
    };
    let d = ActivityTolerances::default();
    let tol = ActivityTolerances { ks: g.tolerance_ks.unwrap_or(d.ks), mean: g.tolerance_mean.unwrap_or(d.mean) };
    let report = if act.intervals.is_empty() {
        None
    } else {
        Some(validate_activity(&act.intervals, reference.as_ref(), tol)?)
    };
    let failure = report.as_ref().filter(|r| !r.pass()).map(|r| {
        let bad: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.metric.as_str()).collect();
        format!("activity statistics differ from the reference: {}", bad.join(", "))
    });
    ctx.write_json(
        "activity.json",
        &ActivitySummary {
            intervals: act.intervals.len(),
            handovers: act.handovers,
            coverage_gap_s: act.coverage_gap_s,
            report,
        },
    )?;
    println!("urban: {} intervals, {} handovers", act.intervals.len(), act.handovers);
    Ok(failure)
}

fn load_model(path: &Path, ctx: &mut Ctx) -> CliResult<SurrogateSet> {
    let text = ctx.input_text(path)?;
    SurrogateSet::from_json(&text).map_err(|e| data_err(path, e))
}

fn load_intervals(path: &Path, ctx: &mut Ctx) -> CliResult<Vec<vertisim_core::urban::ConditionInterval>> {
    let text = ctx.input_text(path)?;
    Ok(intervals_from_csv(&text, &path.display().to_string())?)
}

fn write_city(ctx: &mut Ctx, prefix: &str, run: &CityRun) -> CliResult<()> {
    ctx.write(&format!("{prefix}packet_log.csv"), &packet_log_to_csv(&run.log))?;
    ctx.write(&format!("{prefix}report.json"), &(run.report.to_json()? + "\n"))?;
    ctx.write(&format!("{prefix}cells.csv"), &run.report.cells_csv())?;
    let mut w = run.warnings.join("\n");
    if !w.is_empty() {
        w.push('\n');
    }
    ctx.write(&format!("{prefix}warnings.txt"), &w)
}

fn run(g: &GlobalArgs, model: &Path, intervals: &Path, ctx: &mut Ctx) -> Outcome {
    let sc = scenario(g, ctx)?;
    let models = load_model(model, ctx)?;
    models.require_all()?;
    let ivs = load_intervals(intervals, ctx)?;
    let city = run_city(&sc, &models, &ivs, g.workers)?;
    write_city(ctx, "", &city)?;
    println!(
        "run: {} packets, drop rate {:.4}, bad experience {:.4}",
        city.report.stream.packets, city.report.stream.drop_rate, city.report.vertical.bad_fraction
    );
    Ok(None)
}

fn what_if(g: &GlobalArgs, overlay: &Path, model: &Path, intervals: &Path, ctx: &mut Ctx) -> Outcome {
    let sc = scenario(g, ctx)?;
    let ov: OverlayConfig = ctx.extra_config(overlay)?;
    let models = load_model(model, ctx)?;
    models.require_all()?;
    let ivs = load_intervals(intervals, ctx)?;
    let w = whatif(&sc, &ov.injections, &models, &ivs, g.workers)?;
    write_city(ctx, "baseline/", &w.baseline)?;
    write_city(ctx, "injected/", &w.injected)?;
    ctx.write_json("delta.json", &w.delta)?;
    println!(
        "whatif: drop rate delta {:+.4}, bad experience delta {:+.4}",
        w.delta.drop_rate, w.delta.bad_fraction
    );
    Ok(None)
}

fn validate(g: &GlobalArgs, model: &Path, ctx: &mut Ctx) -> Outcome {
    let cfg_path = require(&g.config, "config")?;
    let mut cfg: ValidateConfig = ctx.config(cfg_path)?;
    if let Some(s) = g.seed {
        cfg.reference.seed = s;
    }
    ctx.seed = Some(cfg.reference.seed);
    if let Some(k) = g.tolerance_ks {
        cfg.tolerances.ks = k;
    }
    if let Some(m) = g.tolerance_mean {
        cfg.tolerances.mean = m;
    }
    let models = load_model(model, ctx)?;
    let base = cfg_path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for c in cfg.cases {
        let external = match &c.external_log {
            Some(p) => {
                let p = base.join(p);
                let text = ctx.input_text(&p)?;
                Some(packet_log_from_csv(&text, &p.display().to_string())?)
            }
            None => None,
        };
        cases.push(ValidationCase { name: c.name, conditions: c.conditions, external });
    }
    let report = pool(g.workers, || cross_validate(&cases, &models, &cfg.reference, cfg.n_samples, cfg.tolerances))?;
    ctx.write("validation.json", &(report.to_json()? + "\n"))?;
    ctx.write("validation.csv", &report.to_csv())?;
    let failed = report.entries.iter().filter(|e| !e.pass).count();
    println!("validate: {} entries, {} failed", report.entries.len(), failed);
    Ok((!report.global_pass).then(|| format!("{failed} of {} entries outside tolerance", report.entries.len())))
}

/// Replays a manifest into `out` and checks every recorded output is byte-identical.
pub fn rerun(manifest_path: &Path, out: &Path) -> CliResult<RunManifest> {
    let old = RunManifest::read(manifest_path)?;
    for (path, digest) in &old.inputs {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("input {path}: {e}")))?;
        if &sha256_hex(&bytes) != digest {
            return Err(CliError::Data(format!("input {path} changed since the recorded run")));
        }
    }
    if let (Some(cfg), Some(digest)) = (&old.invocation.global.config, &old.config_sha256) {
        let bytes = fs::read(cfg).map_err(|e| CliError::Config(format!("{}: {e}", cfg.display())))?;
        if &sha256_hex(&bytes) != digest {
            return Err(CliError::Config(format!("{} changed since the recorded run", cfg.display())));
        }
    }
    let mut cli = old.invocation.clone();
    cli.global.out = Some(out.to_path_buf());
    let new = match execute(&cli) {
        Ok(m) => m,
        // a recorded validation failure is reproduced as such
        Err(CliError::Validation(_)) => RunManifest::read(&out.join(MANIFEST_FILE))?,
        Err(e) => return Err(e),
    };
    let differing: Vec<&str> = old
        .outputs
        .iter()
        .filter(|o| !new.outputs.contains(o))
        .map(|o| o.path.as_str())
        .collect();
    if !differing.is_empty() || new.outputs.len() != old.outputs.len() {
        return Err(CliError::Validation(format!("outputs differ from the recorded run: {}", differing.join(", "))));
    }
    println!("rerun: {} outputs identical", new.outputs.len());
    Ok(new)
}

fn section<T: Serialize>(page: &mut String, title: &str, value: &T) {
    let body = toml::to_string_pretty(value).unwrap_or_else(|e| format!("# unavailable: {e}\n"));
    let _ = write!(page, "## {title}\n\n```toml\n{body}```\n\n");
}

/// Reference page listing every configurable default.
pub fn defaults_page() -> String {
    #[derive(Serialize)]
    struct Misc {
        replications: u32,
        hysteresis: u32,
        validate_n_samples: usize,
    }
    let mut page = String::from("# vertisim configuration defaults\n\n");
    section(&mut page, "radio", &RadioConfig::default());
    section(&mut page, "channel", &ChannelConfig::default());
    section(&mut page, "mac", &MacConfig::default());
    section(&mut page, "fit plan", &FitPlan::default());
    section(&mut page, "regressor", &TrainConfig { regressor: RegressorKind::default() });
    section(&mut page, "thresholds", &KpiThresholds::default());
    section(&mut page, "validation tolerances", &Tolerances::default());
    section(&mut page, "activity tolerances", &ActivityTolerances::default());
    section(
        &mut page,
        "other",
        &Misc { replications: 1, hysteresis: 1, validate_n_samples: DEFAULT_N_SAMPLES },
    );
    page
}
