//! `tdcqkd` command-line front end.
//!
//! Every command reads an optional TOML run configuration (`--config`) whose
//! fields are overridden by flags, writes its outputs into `--out` and prints a
//! short summary. Exit codes: 0 success, 1 model-domain error, 2 usage or IO
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characterize::{
    characterize_exact, compute_nonlinearity, estimate_bin_widths,
    run_code_density_with, CodeHistogram, NonlinearityReport, PhaseLockedModel, PhaseMode,
};
use crate::montecarlo::{
    params_from_mc, validate_against_model, MCConfig, ValidationReport,
    WindowConvention,
};
use crate::presets::{self, PresetFamily, PresetName, DEFAULT_PRESET_SEED};
use crate::qkd::{GridSpec, LinkConfig, Variant};
use crate::tdc_model::{apply_mitigation, DelayLine, MitigationPlan};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "tdcqkd", version, about = "TDC nonlinearity and QKD timing workbench")]
pub struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for stochastic steps (sampling, Monte Carlo).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Format of per-bin and sweep data files.
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Characterize a delay line or an imported code-density histogram.
    Characterize(CharacterizeArgs),
    /// Compare a line before and after mitigation.
    Mitigate(MitigateArgs),
    /// Sweep the singles rate and compute incremental QBER curves.
    QkdCurve(QkdCurveArgs),
    /// Check the analytical model against the Monte Carlo simulator.
    McValidate(McValidateArgs),
    /// Collate previous outputs into report.md.
    Report,
}

#[derive(Debug, Args, Default)]
pub struct CharacterizeArgs {
    /// Built-in preset (TDC1_RAW, TDC1_OPT, TDC2_RAW, TDC2_OPT).
    #[arg(long, group = "source")]
    pub preset: Option<String>,
    /// Delay line JSON file.
    #[arg(long, group = "source")]
    pub line: Option<PathBuf>,
    /// Code-density histogram CSV.
    #[arg(long = "import", group = "source")]
    pub histogram: Option<PathBuf>,
    /// Sampled code-density hits (e.g. 1e8); exact widths when omitted.
    #[arg(long)]
    pub hits: Option<f64>,
    #[arg(long)]
    pub phase_mode: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct MitigateArgs {
    /// Compare the raw and optimized presets of a family (tdc1, tdc2).
    #[arg(long, group = "source")]
    pub family: Option<String>,
    #[arg(long, group = "source")]
    pub preset: Option<String>,
    #[arg(long, group = "source")]
    pub line: Option<PathBuf>,
    /// Mitigation plan TOML file.
    #[arg(long, group = "plan_source")]
    pub plan: Option<PathBuf>,
    /// Use the shipped plan of a family (tdc1, tdc2).
    #[arg(long, group = "plan_source")]
    pub plan_for: Option<String>,
    /// Use the identity plan.
    #[arg(long, group = "plan_source")]
    pub identity: bool,
}

#[derive(Debug, Args, Default)]
pub struct QkdCurveArgs {
    /// Link configuration TOML; the shipped default when omitted.
    #[arg(long)]
    pub link: Option<PathBuf>,
    /// Scenario name, or "all".
    #[arg(long)]
    pub scenario: Option<String>,
    /// Extra variant "label:sigma_tdc_ps:w_inl_pp_ps"; may repeat. Replaces the
    /// scenario's variants.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct McValidateArgs {
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub pair_rate: Option<f64>,
    #[arg(long)]
    pub window: Option<f64>,
    /// Preset name or delay line JSON for arm A.
    #[arg(long)]
    pub tdc_a: Option<String>,
    #[arg(long)]
    pub tdc_b: Option<String>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    pub replicas: Option<u64>,
}

/// Structured run configuration. See `README.md` for the schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    /// Seed of the synthetic preset generator.
    pub preset_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub characterize: CharacterizeSection,
    pub mitigate: MitigateSection,
    pub qkd: QkdSection,
    pub mc: McSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharacterizeSection {
    pub preset: Option<String>,
    pub line: Option<PathBuf>,
    pub histogram: Option<PathBuf>,
    pub hits: Option<f64>,
    pub phase_mode: Option<PhaseMode>,
    pub locked_mean_ps: Option<f64>,
    pub locked_std_ps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigateSection {
    pub family: Option<String>,
    pub preset: Option<String>,
    pub line: Option<PathBuf>,
    pub plan: Option<MitigationPlan>,
    pub plan_file: Option<PathBuf>,
    pub plan_for: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QkdSection {
    pub link: Option<PathBuf>,
    pub scenario: Option<String>,
    pub grid: Option<GridSpec>,
    pub e_base: Option<f64>,
    pub sigma_other_ps: Option<f64>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub duration_s: f64,
    pub pair_rate: f64,
    pub transmission_a: f64,
    pub transmission_b: f64,
    pub sigma_spd_a: f64,
    pub sigma_spd_b: f64,
    pub dark_a: f64,
    pub dark_b: f64,
    pub bit_error_prob: f64,
    /// Preset name or delay line JSON path.
    pub tdc_a: Option<String>,
    pub tdc_b: Option<String>,
    pub phase_mode: PhaseMode,
    pub phase_offset_ps: f64,
    pub window_ps: f64,
    pub replicas: u64,
    /// Largest |z| accepted for efficiency and the matcher accidental rate.
    pub z_max: f64,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            duration_s: 1.0,
            pair_rate: 1e5,
            transmission_a: 1.0,
            transmission_b: 1.0,
            sigma_spd_a: 100.0,
            sigma_spd_b: 100.0,
            dark_a: 1e4,
            dark_b: 1e4,
            bit_error_prob: 0.02,
            tdc_a: None,
            tdc_b: None,
            phase_mode: PhaseMode::Uniform,
            phase_offset_ps: 0.0,
            window_ps: 300.0,
            replicas: 1,
            z_max: 3.0,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_domain_error() {
            CliError::Domain(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                print!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns the printed summary.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig {
            schema_version: SCHEMA_VERSION,
            ..RunConfig::default()
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(f) = cli.format {
        cfg.format = Some(f);
    }
    let ctx = Context::new(cfg, &format!("{:?}", cli.command));
    match &cli.command {
        Command::Characterize(a) => ctx.characterize(a),
        Command::Mitigate(a) => ctx.mitigate(a),
        Command::QkdCurve(a) => ctx.qkd_curve(a),
        Command::McValidate(a) => ctx.mc_validate(a),
        Command::Report => ctx.report(),
    }
}

pub fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| usage(format!("{}: {}", path.display(), e.message())))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(usage(format!(
            "{}: schema_version must be {SCHEMA_VERSION}, got {}",
            path.display(),
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: file not found", path.display())))
    }
}

fn parse_count(x: f64, what: &str) -> CliResult<u64> {
    if x >= 1.0 && x.is_finite() && x.fract() == 0.0 && x <= 9.0e18 {
        Ok(x as u64)
    } else {
        Err(usage(format!("{what} must be a positive integer, got {x}")))
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub preset_seed: u64,
    pub config_sha256: String,
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    format: OutputFormat,
    preset_seed: u64,
    config_hash: String,
}

impl Context {
    /// `command` is the subcommand with its arguments; together with the
    /// merged configuration (minus the output directory) it identifies a run.
    fn new(cfg: RunConfig, command: &str) -> Self {
        let hashed = RunConfig {
            out: None,
            ..cfg.clone()
        };
        let mut canonical = serde_json::to_string(&hashed).expect("config serializes");
        canonical.push('\n');
        canonical.push_str(command);
        let config_hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
        Context {
            out: cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            format: cfg.format.unwrap_or(OutputFormat::Csv),
            preset_seed: cfg.preset_seed.unwrap_or(DEFAULT_PRESET_SEED),
            config_hash,
            cfg,
        }
    }

    fn provenance(&self, command: &str, seed: Option<u64>) -> Provenance {
        Provenance {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            seed,
            preset_seed: self.preset_seed,
            config_sha256: self.config_hash.clone(),
        }
    }

    fn seed(&self, what: &str) -> CliResult<u64> {
        self.cfg
            .seed
            .ok_or_else(|| usage(format!("{what} is stochastic: pass --seed or set seed in the config")))
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(name, &text)
    }

    fn load_line(&self, spec: &str) -> CliResult<DelayLine> {
        match spec.parse::<PresetName>() {
            Ok(name) => Ok(presets::build_preset(name, self.preset_seed)?),
            Err(_) => {
                let path = Path::new(spec);
                if path.extension().is_some() || path.exists() {
                    require_file(path)?;
                    Ok(DelayLine::read_json(path)?)
                } else {
                    Err(Error::UnknownPreset(spec.to_string()).into())
                }
            }
        }
    }

    fn write_bins(&self, tag: &str, report: &NonlinearityReport, _line: Option<&DelayLine>) -> CliResult<Vec<PathBuf>> {
        let mut written = Vec::new();
        let lsb = report.lsb_ideal;
        #[derive(Serialize)]
        struct Bin {
            code: usize,
            width_ps: f64,
            dnl_ps: f64,
            inl_ps: f64,
        }
        #[derive(Serialize)]
        struct Transfer {
            code: usize,
            start_ps: f64,
            end_ps: f64,
            center_ps: f64,
            ideal_center_ps: f64,
            deviation_ps: f64,
        }
        let bins: Vec<Bin> = (0..report.bin_widths.len())
            .map(|c| Bin {
                code: c,
                width_ps: report.bin_widths[c],
                dnl_ps: report.dnl[c],
                inl_ps: report.inl[c],
            })
            .collect();
        // Transfer function from the (effective) widths: bins start where the
        // previous one ends, readout at the bin centre.
        let mut start = 0.0;
        let transfer: Vec<Transfer> = report
            .bin_widths
            .iter()
            .enumerate()
            .map(|(c, &w)| {
                let center = start + w / 2.0;
                let ideal = (c as f64 + 0.5) * lsb;
                let row = Transfer {
                    code: c,
                    start_ps: start,
                    end_ps: start + w,
                    center_ps: center,
                    ideal_center_ps: ideal,
                    deviation_ps: center - ideal,
                };
                start += w;
                row
            })
            .collect();
        match self.format {
            OutputFormat::Csv => {
                written.push(self.write(&format!("bins-{tag}.csv"), &to_csv(&bins)?)?);
                written.push(self.write(&format!("transfer-{tag}.csv"), &to_csv(&transfer)?)?);
            }
            OutputFormat::Json => {
                written.push(self.write_json(&format!("bins-{tag}.json"), &bins)?);
                written.push(self.write_json(&format!("transfer-{tag}.json"), &transfer)?);
            }
        }
        Ok(written)
    }

    fn characterize(&self, args: &CharacterizeArgs) -> CliResult<String> {
        let sec = &self.cfg.characterize;
        let flag_source = args.preset.is_some() || args.line.is_some() || args.histogram.is_some();
        let (preset, line_path, hist_path) = if flag_source {
            (args.preset.clone(), args.line.clone(), args.histogram.clone())
        } else {
            (sec.preset.clone(), sec.line.clone(), sec.histogram.clone())
        };
        let sources = [preset.is_some(), line_path.is_some(), hist_path.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if sources != 1 {
            return Err(usage(
                "characterize needs exactly one of --preset, --line or --import",
            ));
        }
        let phase_mode = match &args.phase_mode {
            Some(s) => s.parse()?,
            None => sec.phase_mode.unwrap_or(PhaseMode::Uniform),
        };
        let hits = args.hits.or(sec.hits);

        #[derive(Serialize)]
        struct Output<'a> {
            provenance: Provenance,
            source: String,
            label: String,
            mode: String,
            hits: Option<u64>,
            phase_mode: PhaseMode,
            occupied_bins: Option<usize>,
            report: &'a NonlinearityReport,
        }

        let mut seed = None;
        let mut occupied = None;
        let mut written = Vec::new();
        let (label, source, mode, report, line) = if let Some(path) = &hist_path {
            require_file(path)?;
            let hist = CodeHistogram::import(path)?;
            let widths = estimate_bin_widths(&hist)?;
            occupied = Some(hist.occupied_bins());
            let label = path
                .file_stem()
                .map_or("histogram".into(), |s| s.to_string_lossy().into_owned());
            let report = compute_nonlinearity(&widths, hist.clock_period)?;
            (label, path.display().to_string(), "histogram".to_string(), report, None)
        } else {
            let (line, source) = match (&preset, &line_path) {
                (Some(p), _) => {
                    let name: PresetName = p.parse()?;
                    (presets::build_preset(name, self.preset_seed)?, format!("preset {name}"))
                }
                (_, Some(path)) => {
                    require_file(path)?;
                    (DelayLine::read_json(path)?, path.display().to_string())
                }
                _ => unreachable!("source checked above"),
            };
            match hits {
                None => {
                    let report = characterize_exact(&line)?;
                    (line.label().to_string(), source, "exact".to_string(), report, Some(line))
                }
                Some(h) => {
                    let n = parse_count(h, "--hits")?;
                    let s = self.seed("sampled characterization")?;
                    seed = Some(s);
                    let model = PhaseLockedModel {
                        mean_ps: sec.locked_mean_ps,
                        std_ps: sec.locked_std_ps,
                    };
                    let hist = run_code_density_with(&line, n, phase_mode, model, s)?;
                    occupied = Some(hist.occupied_bins());
                    let tag = slug(line.label());
                    let hist_file = self.out.join(format!("histogram-{tag}.csv"));
                    std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
                    hist.export(&hist_file)?;
                    written.push(hist_file);
                    let widths = estimate_bin_widths(&hist)?;
                    let report = compute_nonlinearity(&widths, hist.clock_period)?;
                    (line.label().to_string(), source, "sampled".to_string(), report, Some(line))
                }
            }
        };
        let tag = slug(&label);
        let out = Output {
            provenance: self.provenance("characterize", seed),
            source,
            label: label.clone(),
            mode,
            hits: hits.map(|h| h as u64),
            phase_mode,
            occupied_bins: occupied,
            report: &report,
        };
        written.push(self.write_json(&format!("characterize-{tag}.json"), &out)?);
        written.extend(self.write_bins(&tag, &report, line.as_ref())?);

        let mut s = String::new();
        let _ = writeln!(s, "{label}: {} bins, LSB {:.3} ps", report.bin_widths.len(), report.lsb_ideal);
        let _ = writeln!(s, "  DNL [{:.2}, {:.2}] ps", report.dnl_range.0, report.dnl_range.1);
        let _ = writeln!(
            s,
            "  INL [{:.2}, {:.2}] ps (pp {:.2})",
            report.inl_range.0, report.inl_range.1, report.w_inl_pp
        );
        let _ = writeln!(s, "  sigma_TDC {:.3} ps", report.sigma_tdc);
        for w in written {
            let _ = writeln!(s, "  wrote {}", w.display());
        }
        Ok(s)
    }

    fn mitigate(&self, args: &MitigateArgs) -> CliResult<String> {
        let sec = &self.cfg.mitigate;
        let flag_source = args.family.is_some() || args.preset.is_some() || args.line.is_some();
        let (family, preset, line_path) = if flag_source {
            (args.family.clone(), args.preset.clone(), args.line.clone())
        } else {
            (sec.family.clone(), sec.preset.clone(), sec.line.clone())
        };
        let sources = [family.is_some(), preset.is_some(), line_path.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if sources != 1 {
            return Err(usage("mitigate needs exactly one of --family, --preset or --line"));
        }

        let plan_flag = args.plan.is_some() || args.plan_for.is_some() || args.identity;
        let plan = if plan_flag {
            if let Some(p) = &args.plan {
                Some(read_plan(p)?)
            } else if let Some(f) = &args.plan_for {
                Some(presets::calibrated_plan(f.parse()?))
            } else {
                Some(MitigationPlan::identity())
            }
        } else if let Some(p) = &sec.plan {
            Some(p.clone())
        } else if let Some(p) = &sec.plan_file {
            Some(read_plan(p)?)
        } else {
            sec.plan_for
                .as_ref()
                .map(|f| f.parse().map(presets::calibrated_plan))
                .transpose()?
        };

        let (before, after, how) = if let Some(f) = &family {
            let fam: PresetFamily = f.parse()?;
            if plan.is_some() {
                return Err(usage("--family compares the raw and optimized presets; it takes no plan"));
            }
            (
                presets::build_preset(fam.raw(), self.preset_seed)?,
                presets::build_preset(fam.optimized(), self.preset_seed)?,
                format!("preset pair {} vs {}", fam.raw(), fam.optimized()),
            )
        } else {
            let line = match (&preset, &line_path) {
                (Some(p), _) => presets::build_preset(p.parse()?, self.preset_seed)?,
                (_, Some(path)) => {
                    require_file(path)?;
                    DelayLine::read_json(path)?
                }
                _ => unreachable!("source checked above"),
            };
            let plan = plan.clone().ok_or_else(|| {
                usage("mitigate needs a plan: --plan FILE, --plan-for FAMILY or --identity")
            })?;
            let label = format!("{}-mitigated", line.label());
            let after = apply_mitigation(&line, &plan)?.with_label(label);
            (line, after, "mitigation plan".to_string())
        };

        let rb = characterize_exact(&before)?;
        let ra = characterize_exact(&after)?;
        let summary = ReductionSummary::new(&rb, &ra);

        #[derive(Serialize)]
        struct Output<'a> {
            provenance: Provenance,
            comparison: String,
            before_label: String,
            after_label: String,
            plan: Option<MitigationPlan>,
            reductions: &'a ReductionSummary,
            before: &'a NonlinearityReport,
            after: &'a NonlinearityReport,
        }
        let tag = match &family {
            Some(f) => slug(f),
            None => slug(after.label()),
        };
        let mut written = vec![self.write_json(
            &format!("mitigation-{tag}.json"),
            &Output {
                provenance: self.provenance("mitigate", None),
                comparison: how.clone(),
                before_label: before.label().into(),
                after_label: after.label().into(),
                plan: if family.is_some() { None } else { plan.clone() },
                reductions: &summary,
                before: &rb,
                after: &ra,
            },
        )?];
        written.extend(self.write_bins(&format!("{tag}-before"), &rb, Some(&before))?);
        written.extend(self.write_bins(&format!("{tag}-after"), &ra, Some(&after))?);

        let mut s = String::new();
        let _ = writeln!(s, "{} -> {} ({how})", before.label(), after.label());
        let _ = writeln!(
            s,
            "  DNL pp {:.2} -> {:.2} ps ({:.1}% reduction)",
            summary.dnl_pp_before, summary.dnl_pp_after, summary.dnl_pp_reduction_pct
        );
        let _ = writeln!(
            s,
            "  INL pp {:.2} -> {:.2} ps ({:.1}% reduction)",
            summary.inl_pp_before, summary.inl_pp_after, summary.inl_pp_reduction_pct
        );
        let _ = writeln!(
            s,
            "  sigma  {:.3} -> {:.3} ps ({:.1}% reduction)",
            summary.sigma_before, summary.sigma_after, summary.sigma_reduction_pct
        );
        for w in written {
            let _ = writeln!(s, "  wrote {}", w.display());
        }
        Ok(s)
    }

    fn link_config(&self, args: &QkdCurveArgs) -> CliResult<LinkConfig> {
        let sec = &self.cfg.qkd;
        let mut link = match args.link.as_ref().or(sec.link.as_ref()) {
            Some(path) => {
                require_file(path)?;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                LinkConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => LinkConfig::shipped_default(),
        };
        if let Some(g) = &sec.grid {
            link.grid = g.clone();
        }
        if let Some(e) = sec.e_base {
            link.e_base = e;
        }
        if let Some(s) = sec.sigma_other_ps {
            link.sigma_other_ps = s;
        }
        Ok(link)
    }

    fn qkd_curve(&self, args: &QkdCurveArgs) -> CliResult<String> {
        let link = self.link_config(args)?;
        let choice = args
            .scenario
            .clone()
            .or_else(|| self.cfg.qkd.scenario.clone())
            .unwrap_or_else(|| "all".into());
        let scenarios: Vec<_> = if choice.eq_ignore_ascii_case("all") {
            link.scenarios.clone()
        } else {
            vec![link.scenario(&choice)?.clone()]
        };
        let mut variants: Vec<Variant> = args
            .variants
            .iter()
            .map(|v| parse_variant(v))
            .collect::<CliResult<_>>()?;
        if variants.is_empty() {
            variants = self.cfg.qkd.variants.clone();
        }
        let baseline = link.shared_baseline().ok();

        let mut s = String::new();
        let mut any_usable = false;
        for mut sc in scenarios {
            if !variants.is_empty() {
                sc.variants = variants.clone();
            }
            let result = link.run(&sc)?;
            any_usable |= !result.all_unusable();
            let tag = slug(&sc.name);
            let data = match self.format {
                OutputFormat::Csv => self.write(&format!("sweep-{tag}.csv"), &result.to_csv())?,
                OutputFormat::Json => {
                    let mut v = result.json_value();
                    v["link"] = serde_json::to_value(&link).expect("link serializes");
                    v["scenario"] = serde_json::to_value(&sc).expect("scenario serializes");
                    self.write_json(&format!("sweep-{tag}.json"), &v)?
                }
            };
            let comparison = match (baseline, sc.variants.len() >= 2) {
                (Some(_), true) => link.secret_fraction_comparison(&sc).ok(),
                _ => None,
            };
            #[derive(Serialize)]
            struct Peaks<'a> {
                provenance: Provenance,
                scenario: &'a crate::qkd::Scenario,
                link_e_base: f64,
                link_sigma_other_ps: f64,
                true_rate_model: crate::qkd::TrueRateModel,
                grid_points: usize,
                unusable_points: usize,
                peaks: &'a [crate::qkd::VariantPeak],
                comparisons: &'a [crate::qkd::PairComparison],
                shared_baseline_qber: Option<f64>,
                reference_scenario: &'a str,
                reference_total_qber: f64,
                secret_fraction: Option<crate::qkd::SecretFractionComparison>,
            }
            let peaks_path = self.write_json(
                &format!("peaks-{tag}.json"),
                &Peaks {
                    provenance: self.provenance("qkd-curve", None),
                    scenario: &sc,
                    link_e_base: link.e_base,
                    link_sigma_other_ps: link.sigma_other_ps,
                    true_rate_model: result.true_rate_model,
                    grid_points: result.grid.points.len(),
                    unusable_points: result.errors().count(),
                    peaks: &result.peaks,
                    comparisons: &result.comparisons,
                    shared_baseline_qber: baseline,
                    reference_scenario: &link.reference_scenario,
                    reference_total_qber: link.reference_total_qber,
                    secret_fraction: comparison,
                },
            )?;
            let _ = writeln!(s, "{}:", sc.name);
            for p in &result.peaks {
                let _ = writeln!(
                    s,
                    "  {:<12} peak dQBER {:.4}% at {:.2} Mcps",
                    p.label,
                    100.0 * p.max_delta_qber,
                    p.singles_sig_cps / 1e6
                );
            }
            for c in &result.comparisons {
                let _ = writeln!(
                    s,
                    "  {} -> {}: peak reduction {:.1}%",
                    c.first,
                    c.second,
                    100.0 * c.peak_relative_reduction
                );
            }
            if let Some(c) = comparison {
                let _ = writeln!(
                    s,
                    "  secret fraction {:.3} -> {:.3} ({:+.1}%)",
                    c.r_before,
                    c.r_after,
                    100.0 * c.relative_gain
                );
            }
            let errors = result.errors().count();
            if errors > 0 {
                let _ = writeln!(s, "  {errors} unusable grid points (NaN rows)");
            }
            let _ = writeln!(s, "  wrote {}", data.display());
            let _ = writeln!(s, "  wrote {}", peaks_path.display());
        }
        if !any_usable {
            return Err(CliError::Domain(format!(
                "no usable operating point in any sweep\n{s}"
            )));
        }
        Ok(s)
    }

    fn mc_config(&self, args: &McValidateArgs, seed: u64) -> CliResult<(MCConfig, u64, f64)> {
        let m = &self.cfg.mc;
        let tdc_a = args.tdc_a.as_ref().or(m.tdc_a.as_ref());
        let tdc_b = args.tdc_b.as_ref().or(m.tdc_b.as_ref());
        let cfg = MCConfig {
            duration_s: args.duration.unwrap_or(m.duration_s),
            pair_rate: args.pair_rate.unwrap_or(m.pair_rate),
            transmission_a: m.transmission_a,
            transmission_b: m.transmission_b,
            sigma_spd_a: m.sigma_spd_a,
            sigma_spd_b: m.sigma_spd_b,
            dark_a: m.dark_a,
            dark_b: m.dark_b,
            bit_error_prob: m.bit_error_prob,
            tdc_a: tdc_a.map(|s| self.load_line(s)).transpose()?,
            tdc_b: tdc_b.map(|s| self.load_line(s)).transpose()?,
            phase_mode: m.phase_mode,
            phase_offset_ps: m.phase_offset_ps,
            window_ps: args.window.unwrap_or(m.window_ps),
            seed,
        };
        cfg.validate()?;
        let replicas = args.replicas.unwrap_or(m.replicas).max(1);
        Ok((cfg, replicas, m.z_max))
    }

    fn mc_validate(&self, args: &McValidateArgs) -> CliResult<String> {
        let seed = self.seed("mc-validate")?;
        let (cfg, replicas, z_max) = self.mc_config(args, seed)?;
        let params = params_from_mc(&cfg, WindowConvention::FullWidth)?;
        let seeds: Vec<u64> = (0..replicas).map(|k| seed + k).collect();
        // Replicas run one after another; each simulation is already bounded
        // by memory rather than CPU.
        let reports: Vec<ValidationReport> = seeds
            .iter()
            .map(|&s| validate_against_model(&MCConfig { seed: s, ..cfg.clone() }, &params))
            .collect::<crate::Result<_>>()?;

        let within = |z: f64| z.is_nan() || z.abs() <= z_max;
        // With W > 0 the model's capture fraction is an upper bound.
        let eta_within = |z: f64| if params.w_inl_pp > 0.0 { z.is_nan() || z <= z_max } else { within(z) };
        let eta_ok = reports.iter().filter(|r| eta_within(r.full_width.eta.z)).count();
        let acc_ok = reports
            .iter()
            .filter(|r| within(r.matcher_closed_form_c_acc.z))
            .count();
        let conservative = reports.iter().filter(|r| r.full_width.conservative).count();
        let n = reports.len();
        #[derive(Serialize)]
        struct Summary {
            replicas: usize,
            z_max: f64,
            eta_within_z_max: usize,
            matcher_c_acc_within_z_max: usize,
            model_qber_conservative: usize,
            conservative_fraction: f64,
            pass: bool,
        }
        let summary = Summary {
            replicas: n,
            z_max,
            eta_within_z_max: eta_ok,
            matcher_c_acc_within_z_max: acc_ok,
            model_qber_conservative: conservative,
            conservative_fraction: conservative as f64 / n as f64,
            pass: eta_ok == n && acc_ok == n && conservative as f64 >= 0.95 * n as f64,
        };
        let echo = MCConfig {
            tdc_a: None,
            tdc_b: None,
            ..cfg.clone()
        };
        let path = self.write_json(
            "mc-validation.json",
            &serde_json::json!({
                "provenance": self.provenance("mc-validate", Some(seed)),
                "config": echo,
                "tdc_a": cfg.tdc_a.as_ref().map(|l| l.label().to_string()),
                "tdc_b": cfg.tdc_b.as_ref().map(|l| l.label().to_string()),
                "model_params_full_width": params,
                "summary": summary,
                "replicas": reports,
            }),
        )?;

        let mut s = String::new();
        let first = &reports[0];
        let _ = writeln!(
            s,
            "{n} replica(s), {} true / {} accidental coincidences in the first",
            first.metrics.true_coincidences_captured, first.metrics.accidental_coincidences
        );
        let _ = writeln!(
            s,
            "  eta: model {:.5}, measured {:.5} (z = {:.2})",
            first.full_width.eta.model, first.full_width.eta.empirical, first.full_width.eta.z
        );
        let _ = writeln!(
            s,
            "  C_acc: matcher closed form {:.2} cps, measured {:.2} cps (z = {:.2}); full-width model {:.2}, one-sided model {:.2}",
            first.matcher_closed_form_c_acc.model,
            first.metrics.c_acc_hat_cps,
            first.matcher_closed_form_c_acc.z,
            first.full_width.c_acc.model,
            first.one_sided.c_acc.model
        );
        let _ = writeln!(
            s,
            "  QBER: model {:.5}, measured {:.5} +- {:.5}; conservative in {conservative}/{n}",
            first.full_width.qber.model, first.metrics.qber_hat, first.metrics.qber_se
        );
        let _ = writeln!(s, "  {}", if summary.pass { "PASS" } else { "FAIL" });
        let _ = writeln!(s, "  wrote {}", path.display());
        Ok(s)
    }

    fn report(&self) -> CliResult<String> {
        let body = build_report(&self.out)?;
        let path = self.write("report.md", &body.text)?;
        let mut s = String::new();
        for w in &body.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(s, "wrote {}", path.display());
        Ok(s)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

fn read_plan(path: &Path) -> CliResult<MitigationPlan> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let plan: MitigationPlan =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {}", path.display(), e.message())))?;
    plan.validate()?;
    Ok(plan)
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("variant '{s}' must look like label:sigma_tdc_ps:w_inl_pp_ps"));
    match parts.as_slice() {
        [label, sigma, w] => Ok(Variant::new(
            *label,
            sigma.parse().map_err(|_| bad())?,
            w.parse().map_err(|_| bad())?,
        )),
        _ => Err(bad()),
    }
}

/// Peak-to-peak based reductions, in percent of the "before" value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub dnl_pp_before: f64,
    pub dnl_pp_after: f64,
    pub dnl_pp_reduction_pct: f64,
    pub inl_pp_before: f64,
    pub inl_pp_after: f64,
    pub inl_pp_reduction_pct: f64,
    pub sigma_before: f64,
    pub sigma_after: f64,
    pub sigma_reduction_pct: f64,
}

impl ReductionSummary {
    pub fn new(before: &NonlinearityReport, after: &NonlinearityReport) -> Self {
        let pct = |b: f64, a: f64| if b > 0.0 { 100.0 * (1.0 - a / b) } else { 0.0 };
        let dnl_pp = |r: &NonlinearityReport| r.dnl_range.1 - r.dnl_range.0;
        let (db, da) = (dnl_pp(before), dnl_pp(after));
        ReductionSummary {
            dnl_pp_before: db,
            dnl_pp_after: da,
            dnl_pp_reduction_pct: pct(db, da),
            inl_pp_before: before.w_inl_pp,
            inl_pp_after: after.w_inl_pp,
            inl_pp_reduction_pct: pct(before.w_inl_pp, after.w_inl_pp),
            sigma_before: before.sigma_tdc,
            sigma_after: after.sigma_tdc,
            sigma_reduction_pct: pct(before.sigma_tdc, after.sigma_tdc),
        }
    }
}

pub struct ReportBody {
    pub text: String,
    pub warnings: Vec<String>,
}

fn read_json_files(dir: &Path, prefix: &str) -> (BTreeMap<String, serde_json::Value>, Vec<String>) {
    let mut found = BTreeMap::new();
    let mut warnings = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return (found, warnings);
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if !(name.starts_with(prefix) && name.ends_with(".json")) {
            continue;
        }
        match std::fs::read_to_string(entry.path())
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(v) => {
                found.insert(name, v);
            }
            Err(e) => warnings.push(format!("{name}: unreadable ({e})")),
        }
    }
    (found, warnings)
}

fn num(v: &serde_json::Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for p in path {
        cur = match p.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[*p],
        };
    }
    cur.as_f64().unwrap_or(f64::NAN)
}

fn text<'a>(v: &'a serde_json::Value, key: &str) -> &'a str {
    v[key].as_str().unwrap_or("?")
}

/// Builds the collated report from the JSON outputs in `dir`. The body only
/// depends on those files, so identical inputs give identical reports.
pub fn build_report(dir: &Path) -> CliResult<ReportBody> {
    let mut warnings = Vec::new();
    let mut provenance: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut s = String::new();
    let _ = writeln!(s, "# TDC / QKD report\n");

    let (chars, w) = read_json_files(dir, "characterize-");
    warnings.extend(w);
    let (mits, w) = read_json_files(dir, "mitigation-");
    warnings.extend(w);
    let (peaks, w) = read_json_files(dir, "peaks-");
    warnings.extend(w);
    let (mc, w) = read_json_files(dir, "mc-validation");
    warnings.extend(w);

    let _ = writeln!(s, "## Characterization\n");
    if chars.is_empty() {
        warnings.push("no characterization outputs (run `tdcqkd characterize`)".into());
        let _ = writeln!(s, "_no characterization outputs_\n");
    } else {
        let _ = writeln!(s, "| line | mode | DNL range (ps) | INL range (ps) | INL pp (ps) | sigma_TDC (ps) |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for (name, v) in &chars {
            let r = &v["report"];
            let _ = writeln!(
                s,
                "| {} | {} | [{:.2}, {:.2}] | [{:.2}, {:.2}] | {:.2} | {:.3} |",
                text(v, "label"),
                text(v, "mode"),
                num(r, &["dnl_range", "0"]),
                num(r, &["dnl_range", "1"]),
                num(r, &["inl_range", "0"]),
                num(r, &["inl_range", "1"]),
                num(r, &["w_inl_pp"]),
                num(r, &["sigma_tdc"]),
            );
            provenance.insert(name.clone(), v["provenance"].clone());
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Mitigation\n");
    if mits.is_empty() {
        warnings.push("no mitigation outputs (run `tdcqkd mitigate`)".into());
        let _ = writeln!(s, "_no mitigation outputs_\n");
    } else {
        let _ = writeln!(s, "| before | after | DNL pp reduction | INL pp reduction | sigma reduction |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for (name, v) in &mits {
            let r = &v["reductions"];
            let _ = writeln!(
                s,
                "| {} | {} | {:.1}% | {:.1}% | {:.1}% |",
                text(v, "before_label"),
                text(v, "after_label"),
                num(r, &["dnl_pp_reduction_pct"]),
                num(r, &["inl_pp_reduction_pct"]),
                num(r, &["sigma_reduction_pct"]),
            );
            provenance.insert(name.clone(), v["provenance"].clone());
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Incremental QBER sweeps\n");
    if peaks.is_empty() {
        warnings.push("no sweep outputs (run `tdcqkd qkd-curve`)".into());
        let _ = writeln!(s, "_no sweep outputs_\n");
    } else {
        for (name, v) in &peaks {
            let _ = writeln!(s, "### {}\n", v["scenario"]["name"].as_str().unwrap_or("?"));
            if let Some(list) = v["peaks"].as_array() {
                for p in list {
                    let _ = writeln!(
                        s,
                        "- {}: peak incremental QBER {:.3}% at {:.2} Mcps",
                        text(p, "label"),
                        100.0 * num(p, &["max_delta_qber"]),
                        num(p, &["singles_sig_cps"]) / 1e6
                    );
                }
            }
            if let Some(list) = v["comparisons"].as_array() {
                for c in list {
                    let _ = writeln!(
                        s,
                        "- {} -> {}: relative peak reduction {:.1}%",
                        text(c, "first"),
                        text(c, "second"),
                        100.0 * num(c, &["peak_relative_reduction"])
                    );
                }
            }
            let sf = &v["secret_fraction"];
            if sf.is_object() {
                let _ = writeln!(
                    s,
                    "- total QBER {:.2}% -> {:.2}% (shared baseline {:.2}%)",
                    100.0 * num(sf, &["qber_before"]),
                    100.0 * num(sf, &["qber_after"]),
                    100.0 * num(sf, &["baseline_qber"])
                );
                let _ = writeln!(
                    s,
                    "- secret fraction {:.3} → {:.3} ({:.1}% relative gain)",
                    num(sf, &["r_before"]),
                    num(sf, &["r_after"]),
                    100.0 * num(sf, &["relative_gain"])
                );
            }
            let _ = writeln!(s);
            provenance.insert(name.clone(), v["provenance"].clone());
        }
    }

    let _ = writeln!(s, "## Monte Carlo validation\n");
    if mc.is_empty() {
        warnings.push("no Monte Carlo outputs (run `tdcqkd mc-validate`)".into());
        let _ = writeln!(s, "_no Monte Carlo outputs_\n");
    } else {
        for (name, v) in &mc {
            let sm = &v["summary"];
            let _ = writeln!(
                s,
                "- {} replica(s): efficiency within |z| <= {} in {}, matcher accidentals in {}, model QBER conservative in {}; {}",
                sm["replicas"],
                sm["z_max"],
                sm["eta_within_z_max"],
                sm["matcher_c_acc_within_z_max"],
                sm["model_qber_conservative"],
                if sm["pass"].as_bool() == Some(true) { "PASS" } else { "FAIL" }
            );
            provenance.insert(name.clone(), v["provenance"].clone());
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Provenance\n");
    let _ = writeln!(s, "tool version {TOOL_VERSION}\n");
    if provenance.is_empty() {
        let _ = writeln!(s, "_no inputs_");
    }
    for (name, p) in &provenance {
        let seed = p["seed"].as_u64().map_or("-".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "- {name}: command `{}`, seed {seed}, preset seed {}, config sha256 {}",
            text(p, "command"),
            p["preset_seed"],
            text(p, "config_sha256")
        );
    }
    if !warnings.is_empty() {
        let _ = writeln!(s, "\n## Warnings\n");
        for w in &warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    Ok(ReportBody { text: s, warnings })
}
