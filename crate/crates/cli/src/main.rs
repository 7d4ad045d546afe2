use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use twogear::bench::calibrate::{self, CalibrationTargets};
use twogear::bench::jitter::{run_sweep, JitterReport};
use twogear::bench::report::{self, Cell, Format, Report, ReportError};
use twogear::bench::templates::{self, TEMPLATE_NAMES};
use twogear::bench::{measure_gear2_overhead, micro};
use twogear::guests::ProfileKind;
use twogear::{trace_hash, CostModel, RtProfile, ScenarioConfig, ScenarioError, System};

#[derive(Parser)]
#[command(name = "twogear", version, about = "Two-gear hypervisor simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run or check scenarios.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Micro-benchmarks, overhead and jitter experiments.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Convert saved reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Canonical trace output.
    #[command(subcommand)]
    Trace(TraceCmd),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario and print its summary.
    Run {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        out: Output,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a built-in scenario as JSON.
    Template {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(TEMPLATE_NAMES))]
        name: String,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Hypercall, trap, world switch, IPI and I/O-out costs from the trace.
    Micro {
        #[arg(long, default_value_t = 200)]
        rounds: u32,
        /// Refit the composite costs from the primitives before running.
        #[arg(long)]
        calibrate: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Estimated and measured Gear2 overhead.
    Overhead {
        /// Scenario files; the IoBound and CpuBound templates when absent.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to 10 virtual seconds for the templates.
        #[arg(long)]
        duration: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// cyclictest across the five configurations over a seed range.
    Jitter {
        /// First seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = Profile::Xenomai)]
        profile: Profile,
        /// Wake-ups per run.
        #[arg(long)]
        samples: Option<u32>,
        /// Worker threads; each owns its simulations.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Re-render a JSON report in another format.
    Emit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Fmt::Csv)]
        format: Fmt,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Run a scenario and write its trace as tab-separated text.
    Dump {
        #[command(flatten)]
        src: Source,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with = "template")]
    config: Option<PathBuf>,
    /// Built-in scenario; `micro` when neither this nor --config is given.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(TEMPLATE_NAMES))]
    template: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<u64>,
}

#[derive(Args)]
struct Output {
    /// Directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Fmt::Csv)]
    format: Fmt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fmt {
    Csv,
    Json,
}

impl From<Fmt> for Format {
    fn from(f: Fmt) -> Self {
        match f {
            Fmt::Csv => Format::Csv,
            Fmt::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Xenomai,
    PreemptRt,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Calibration(#[from] calibrate::CalibrationError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

impl Source {
    fn load(&self) -> Result<ScenarioConfig, CliError> {
        let mut c = match (&self.config, &self.template) {
            (Some(p), _) => ScenarioConfig::load(p)?,
            (None, t) => templates::by_name(t.as_deref().unwrap_or("micro")).expect("names are checked by clap"),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = self.duration {
            c.duration_ns = d;
        }
        c.validate()?;
        Ok(c)
    }
}

impl Output {
    fn emit(&self, reports: &[Report]) -> Result<(), CliError> {
        let f = Format::from(self.format);
        for r in reports {
            print!("{}", r.render(f));
            if let Some(dir) = &self.out {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let p = dir.join(format!("{}.{}", r.kind, f.extension()));
                fs::write(&p, r.render(f)).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }
}

fn run_scenario(c: &ScenarioConfig) -> Result<System, CliError> {
    let mut sys = System::new(c)?;
    sys.run();
    Ok(sys)
}

fn sim_run(src: &Source, out: &Output) -> Result<(), CliError> {
    let c = src.load()?;
    let sys = run_scenario(&c)?;
    let mut r =
        Report::new("run", vec!["scenario", "seed", "duration_ns", "records", "trace_hash", "supervision_events"]);
    r.push(vec![
        c.name.clone().into(),
        c.seed.into(),
        c.duration_ns.into(),
        Cell::from(sys.trace().len() as u64),
        trace_hash(sys.trace()).into(),
        Cell::from(sys.supervision_events().len() as u64),
    ]);
    if let Some(dir) = &out.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("trace.tsv");
        let file = fs::File::create(&p).map_err(io_err(&p))?;
        sys.trace().write_canonical(std::io::BufWriter::new(file)).map_err(io_err(&p))?;
    }
    out.emit(&[r])
}

fn bench_micro(rounds: u32, recalibrate: bool, seed: u64, out: &Output) -> Result<(), CliError> {
    let mut cost = CostModel::default();
    let mut reports = Vec::new();
    if recalibrate {
        let fit = calibrate::fit_composites(&cost, &CalibrationTargets::default())?;
        cost = fit.apply(&cost);
        let mut r = Report::new("calibration", vec!["virq_inject_ns", "gicd_emul_ns", "gdm_user_hop_ns"]);
        r.push(vec![fit.virq_inject_ns.into(), fit.gicd_emul_ns.into(), fit.gdm_user_hop_ns.into()]);
        reports.push(r);
    }
    reports.push(report::micro_report(&micro::run_all(&cost, rounds, seed)?));
    out.emit(&reports)
}

const DEFAULT_OVERHEAD_NS: u64 = 10_000_000_000;

fn bench_overhead(configs: &[PathBuf], seed: Option<u64>, duration: Option<u64>, out: &Output) -> Result<(), CliError> {
    let mut scenarios = Vec::new();
    if configs.is_empty() {
        for k in [ProfileKind::IoBound, ProfileKind::CpuBound] {
            scenarios.push(templates::overhead(k, duration.unwrap_or(DEFAULT_OVERHEAD_NS)));
        }
    } else {
        for p in configs {
            let mut c = ScenarioConfig::load(p)?;
            if let Some(d) = duration {
                c.duration_ns = d;
            }
            scenarios.push(c);
        }
    }
    let mut results = Vec::new();
    for mut c in scenarios {
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        results.push(measure_gear2_overhead(&c)?);
    }
    out.emit(&[report::overhead_report(&results)])
}

fn bench_jitter(
    first: u64,
    count: u64,
    profile: Profile,
    samples: Option<u32>,
    jobs: Option<usize>,
    out: &Output,
) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let mut rt = templates::default_rt(match profile {
        Profile::Xenomai => RtProfile::Xenomai,
        Profile::PreemptRt => RtProfile::PreemptRt,
    });
    if let Some(n) = samples {
        rt.samples = n;
    }
    let seeds: Vec<u64> = (first..first + count).collect();
    let jobs =
        jobs.or_else(|| std::thread::available_parallelism().ok().map(|n| n.get())).unwrap_or(1).clamp(1, seeds.len());
    let chunk = seeds.len().div_ceil(jobs);
    let parts: Vec<Result<JitterReport, ScenarioError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds.chunks(chunk).map(|c| s.spawn(move || run_sweep(rt, c))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut all = JitterReport { rt, entries: Vec::new(), orderings: Vec::new() };
    for p in parts {
        let p = p?;
        all.entries.extend(p.entries);
        all.orderings.extend(p.orderings);
    }
    // Stable sort keeps the per-seed configuration order.
    all.entries.sort_by_key(|e| e.seed);
    all.orderings.sort_by_key(|o| o.seed);
    out.emit(&[report::jitter_report(&all), report::ordering_report(&all)])?;
    eprintln!("orderings hold for all seeds: {}", all.holds());
    Ok(())
}

fn report_emit(input: &Path, format: Fmt, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let r = Report::from_json(&text)?;
    let rendered = r.render(format.into());
    match out {
        Some(p) => fs::write(p, rendered).map_err(io_err(p)),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn trace_dump(src: &Source, out: Option<&Path>) -> Result<(), CliError> {
    let sys = run_scenario(&src.load()?)?;
    match out {
        Some(p) => {
            let file = fs::File::create(p).map_err(io_err(p))?;
            sys.trace().write_canonical(std::io::BufWriter::new(file)).map_err(io_err(p))
        }
        None => sys
            .trace()
            .write_canonical(std::io::BufWriter::new(std::io::stdout().lock()))
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Sim(SimCmd::Run { src, out }) => sim_run(&src, &out),
        Cmd::Sim(SimCmd::Validate { config }) => {
            let c = ScenarioConfig::load(&config)?;
            println!("ok: {} ({} vms, {} workloads)", config.display(), c.vms.len(), c.workloads.len());
            Ok(())
        }
        Cmd::Sim(SimCmd::Template { name }) => {
            println!("{}", templates::by_name(&name).expect("names are checked by clap").to_json());
            Ok(())
        }
        Cmd::Bench(BenchCmd::Micro { rounds, calibrate, seed, out }) => bench_micro(rounds, calibrate, seed, &out),
        Cmd::Bench(BenchCmd::Overhead { config, seed, duration, out }) => bench_overhead(&config, seed, duration, &out),
        Cmd::Bench(BenchCmd::Jitter { seed, seeds, profile, samples, jobs, out }) => {
            bench_jitter(seed, seeds, profile, samples, jobs, &out)
        }
        Cmd::Report(ReportCmd::Emit { input, format, out }) => report_emit(&input, format, out.as_deref()),
        Cmd::Trace(TraceCmd::Dump { src, out }) => trace_dump(&src, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
