//! Subcommands of `tmu-sim`. Each returns its process exit code and writes
//! human output to the given writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tmu_core::affine::MapMode;
use tmu_core::cases::{check_case_with, random_case, seeded, table3_cases, Case, Limits};
use tmu_core::engine::{Engine, EngineConfig};
use tmu_core::isa::{assemble_with, disassemble, AsmOptions, Program, MAGIC};
use tmu_core::system::{
    builtin_trace, schedule, schedule_segments, stage_costs, Strategy, SystemConfig, SystemReport, TraceSpec,
};
use tmu_core::tensor::{output_region, OpKind, SimMemory};
use tmu_core::TmuError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tmu-sim", version, about = "Tensor manipulation unit simulator")]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    #[arg(long, global = true, env = "TMU_SIM_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Divisor applied to table and model spatial sizes.
    #[arg(long, global = true, default_value_t = 7)]
    pub scale: u32,
    #[arg(long, global = true, value_enum, default_value_t = StrategyArg::Serial)]
    pub strategy: StrategyArg,
    #[arg(long, global = true, default_value_t = 16)]
    pub dram_bpc: u32,
    #[arg(long, global = true, default_value_t = tmu_core::engine::DEFAULT_BUFFER_BYTES)]
    pub buffer_bytes: u64,
    /// Write `cycle,stage,op,addr,len` records here.
    #[arg(long, global = true)]
    pub trace_events: Option<PathBuf>,
    /// Use the address matrices exactly as published.
    #[arg(long, global = true)]
    pub paper_literal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Serial,
    Prefetch,
    Forwarding,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Serial => Strategy::Serial,
            StrategyArg::Prefetch => Strategy::Prefetch,
            StrategyArg::Forwarding => Strategy::Forwarding,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble text to a binary program, or disassemble with `-d`.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short, long)]
        disassemble: bool,
    },
    /// Execute a program on one TMU over seeded memory.
    Run {
        program: PathBuf,
        /// JSON cycle report destination.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Raw image of the final memory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compare randomized operator instances against the golden operators.
    Check {
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 100)]
        count: u64,
    },
    /// Run the operator table and report cycles and bandwidth.
    Bench {
        /// Optional JSON bench configuration.
        config: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a model trace, built in or from a JSON file.
    Trace {
        model: String,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Sim(TmuError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl From<TmuError> for CliError {
    fn from(e: TmuError) -> Self {
        CliError::Sim(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Sim(TmuError::Io(e.to_string()))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl GlobalOpts {
    pub fn engine(&self) -> EngineConfig {
        let mut e = EngineConfig { buffer_bytes: self.buffer_bytes, ..EngineConfig::default() };
        e.dram.bytes_per_cycle = self.dram_bpc;
        e
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig::for_strategy(self.strategy.into()).with_engine(self.engine())
    }

    pub fn mode(&self) -> MapMode {
        if self.paper_literal {
            MapMode::PaperLiteral
        } else {
            MapMode::OracleConsistent
        }
    }
}

/// Hex digest identifying a configuration in reports.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub fn parse_ops(list: &str) -> CliResult<Vec<OpKind>> {
    if list.eq_ignore_ascii_case("all") {
        return Ok(OpKind::ALL.to_vec());
    }
    list.split(',')
        .map(|s| OpKind::from_mnemonic(s.trim()).ok_or_else(|| CliError::Usage(format!("unknown operator `{s}`"))))
        .collect()
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<i32> {
    let o = &cli.opts;
    o.engine().dram.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.cmd {
        Command::Asm { input, output, disassemble } => cmd_asm(o, input, output.as_deref(), *disassemble, out),
        Command::Run { program, report, dump } => cmd_run(o, program, report.as_deref(), dump.as_deref(), out),
        Command::Check { ops, count } => cmd_check(o, &parse_ops(ops)?, *count, out),
        Command::Bench { config, csv, json } => cmd_bench(o, config.as_deref(), csv.as_deref(), json.as_deref(), out),
        Command::Trace { model, json } => cmd_trace(o, model, json.as_deref(), out),
    }
}

fn load_program(o: &GlobalOpts, path: &Path) -> CliResult<Program> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return Ok(Program::from_bytes(&bytes)?);
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is neither text nor a program", path.display())))?;
    assemble_with(&text, AsmOptions { mode: o.mode() }).map_err(|e| CliError::Usage(format!("{}:{e}", path.display())))
}

fn cmd_asm(o: &GlobalOpts, input: &Path, output: Option<&Path>, dis: bool, out: &mut dyn Write) -> CliResult<i32> {
    let p = load_program(o, input)?;
    match (dis, output) {
        (true, Some(path)) => fs::write(path, disassemble(&p))?,
        (true, None) => write!(out, "{}", disassemble(&p))?,
        (false, Some(path)) => fs::write(path, p.to_bytes()?)?,
        (false, None) => writeln!(out, "{}", hex::encode(p.to_bytes()?))?,
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    config_hash: String,
    seed: u64,
    version: &'static str,
    engine: EngineConfig,
    instructions: &'a [tmu_core::engine::CycleReport],
    total_cycles: u64,
}

fn cmd_run(o: &GlobalOpts, path: &Path, report: Option<&Path>, dump: Option<&Path>, out: &mut dyn Write) -> CliResult<i32> {
    let p = load_program(o, path)?;
    let mut end = 64;
    let mut sources = Vec::new();
    for i in p.body() {
        end = end.max(i.src0.region().end).max(output_region(&i.outputs()?).end);
        sources.push(i.src0);
        if let Some(b) = i.src1 {
            end = end.max(b.region().end);
            sources.push(b);
        }
    }
    let mut mem = SimMemory::new(end as usize);
    let mut rng = seeded(o.seed);
    for t in &sources {
        rng.fill_bytes(mem.tensor_mut(t)?);
    }
    let cfg = o.engine();
    let mut engine = Engine::new(&p, cfg);
    let mut events = String::new();
    engine.run(&mut mem, |e| {
        if o.trace_events.is_some() {
            events.push_str(&format!("{e}\n"));
        }
    })?;
    if let Some(path) = &o.trace_events {
        fs::write(path, format!("cycle,stage,op,addr,len\n{events}"))?;
    }
    let reports = engine.reports();
    writeln!(out, "{:<16}{:>10}{:>12}{:>12}{:>12}{:>12}", "op", "segments", "load", "process", "store", "total")?;
    for r in reports {
        let name = r.op.map_or("halt", |k| k.mnemonic());
        writeln!(
            out,
            "{name:<16}{:>10}{:>12}{:>12}{:>12}{:>12}",
            r.segments, r.load_cycles, r.process_cycles, r.store_cycles, r.total_cycles
        )?;
    }
    let total: u64 = reports.iter().map(|r| r.total_cycles).sum();
    writeln!(out, "total cycles {total}")?;
    if let Some(path) = report {
        let r = RunReport {
            config_hash: config_hash(&cfg),
            seed: o.seed,
            version: env!("CARGO_PKG_VERSION"),
            engine: cfg,
            instructions: reports,
            total_cycles: total,
        };
        fs::write(path, serde_json::to_string_pretty(&r).unwrap())?;
    }
    if let Some(path) = dump {
        fs::write(path, mem.as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// Outcome of one randomized check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: OpKind,
    pub seed: u64,
    pub error: Option<String>,
}

/// Case `i` of a run seeded with `seed` is reproducible alone as
/// `check --ops <op> --count 1 --seed <seed + i>`.
pub fn check_results(o: &GlobalOpts, ops: &[OpKind], count: u64) -> Vec<CheckResult> {
    let jobs: Vec<(OpKind, u64)> = ops.iter().flat_map(|&op| (0..count).map(move |i| (op, i))).collect();
    let cfg = o.engine();
    let mode = o.mode();
    jobs.into_par_iter()
        .map(|(op, i)| {
            let seed = o.seed.wrapping_add(i);
            let mut rng = seeded(seed);
            let case = random_case(op, &mut rng, Limits::default());
            let error = match check_case_with(&case, &mut rng, cfg, mode) {
                Ok(r) if r.matched => None,
                Ok(r) => Some(r.detail),
                Err(e) => Some(e.to_string()),
            };
            CheckResult { op, seed, error }
        })
        .collect()
}

fn cmd_check(o: &GlobalOpts, ops: &[OpKind], count: u64, out: &mut dyn Write) -> CliResult<i32> {
    let results = check_results(o, ops, count);
    for &op in ops {
        let mine: Vec<_> = results.iter().filter(|r| r.op == op).collect();
        let pass = mine.iter().filter(|r| r.error.is_none()).count();
        writeln!(out, "{:<16}{pass}/{} pass", op.mnemonic(), mine.len())?;
    }
    let total = results.len();
    let failed: Vec<_> = results.iter().filter(|r| r.error.is_some()).collect();
    writeln!(out, "{}/{total} pass", total - failed.len())?;
    let Some(first) = failed.first() else { return Ok(EXIT_OK) };
    let literal = if o.paper_literal { " --paper-literal" } else { "" };
    writeln!(out, "first failure: {}: {}", first.op, first.error.as_deref().unwrap_or(""))?;
    writeln!(
        out,
        "reproduce: tmu-sim check --ops {} --count 1 --seed {} --buffer-bytes {} --dram-bpc {}{literal}",
        first.op.mnemonic(),
        first.seed,
        o.buffer_bytes,
        o.dram_bpc
    )?;
    Ok(EXIT_FAIL)
}

/// Optional overrides read from a bench configuration file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub scale: Option<u32>,
    #[serde(default)]
    pub ops: Option<Vec<String>>,
    #[serde(default)]
    pub buffer_bytes: Option<u64>,
    #[serde(default)]
    pub dram_bpc: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub id: usize,
    pub op: &'static str,
    pub shape: String,
    pub bytes_moved: u64,
    pub cycles: u64,
    pub bytes_per_cycle: f64,
    pub oracle_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
    pub scale: u32,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub records: Vec<BenchRecord>,
}

pub const CSV_HEADER: &str = "id,op,shape,bytes_moved,cycles,bytes_per_cycle,oracle_match,config_hash";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{},{}\n",
                r.id, r.op, r.shape, r.bytes_moved, r.cycles, r.bytes_per_cycle, r.oracle_match, self.meta.config_hash
            ));
        }
        s
    }
}

fn shape_of(c: &Case) -> String {
    let t = c.src;
    format!("{}x{}x{}", t.height, t.width, t.channels)
}

pub fn bench(o: &GlobalOpts, bc: &BenchConfig) -> CliResult<BenchReport> {
    let mut o = o.clone();
    if let Some(s) = bc.scale {
        o.scale = s;
    }
    if let Some(b) = bc.buffer_bytes {
        o.buffer_bytes = b;
    }
    if let Some(b) = bc.dram_bpc {
        o.dram_bpc = b;
    }
    if o.scale == 0 {
        return Err(CliError::Usage("scale must be at least 1".into()));
    }
    let ops = match &bc.ops {
        Some(v) => parse_ops(&v.join(","))?,
        None => OpKind::ALL.to_vec(),
    };
    let sys = o.system();
    let mode = o.mode();
    let cases: Vec<(usize, Case)> = table3_cases(o.scale).into_iter().enumerate().filter(|(_, c)| ops.contains(&c.op)).collect();
    let records = cases
        .into_par_iter()
        .map(|(id, case)| -> CliResult<BenchRecord> {
            let mut rng = seeded(o.seed.wrapping_add(id as u64));
            let r = check_case_with(&case, &mut rng, sys.engine, mode)?;
            let report = r.report.expect("engine ran");
            let cycles = schedule_segments(&stage_costs(&report, &sys.engine), &sys)?.makespan;
            let moved = report.bytes_moved();
            Ok(BenchRecord {
                id,
                op: case.op.mnemonic(),
                shape: shape_of(&case),
                bytes_moved: moved,
                cycles,
                bytes_per_cycle: if cycles == 0 { 0.0 } else { moved as f64 / cycles as f64 },
                oracle_match: r.matched,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut records = records;
    records.sort_by_key(|r| r.id);
    let hash = config_hash(&(&sys, o.scale, &ops, o.paper_literal));
    let meta = BenchMeta { config_hash: hash, seed: o.seed, version: env!("CARGO_PKG_VERSION"), scale: o.scale, strategy: o.strategy.into() };
    Ok(BenchReport { meta, records })
}

fn cmd_bench(o: &GlobalOpts, cfg: Option<&Path>, csv: Option<&Path>, json: Option<&Path>, out: &mut dyn Write) -> CliResult<i32> {
    let bc = match cfg {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| CliError::Usage(format!("{}: malformed bench config: {e}", p.display())))?,
        None => BenchConfig::default(),
    };
    let report = bench(o, &bc)?;
    let text = report.to_csv();
    match csv {
        Some(p) => fs::write(p, &text)?,
        None => write!(out, "{text}")?,
    }
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(if report.records.iter().all(|r| r.oracle_match) { EXIT_OK } else { EXIT_FAIL })
}

pub fn resolve_trace(model: &str, scale: u32) -> CliResult<TraceSpec> {
    let path = Path::new(model);
    if model.ends_with(".json") || path.is_file() {
        return Ok(TraceSpec::from_json(&fs::read_to_string(path)?)?);
    }
    builtin_trace(model, scale).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Serialize)]
struct TraceOutput<'a> {
    config_hash: String,
    seed: u64,
    version: &'static str,
    report: &'a SystemReport,
}

fn cmd_trace(o: &GlobalOpts, model: &str, json: Option<&Path>, out: &mut dyn Write) -> CliResult<i32> {
    let spec = resolve_trace(model, o.scale)?;
    let sys = o.system();
    let (r, _) = schedule(&sys, &spec, o.seed)?;
    writeln!(out, "{} ({})", r.name, r.strategy.name())?;
    writeln!(out, "{:<6}{:<6}{:>12}{:>12}{:>10}{:>12}{:>8}", "stage", "kind", "start", "end", "segments", "bytes", "oracle")?;
    for s in &r.stages {
        let bytes = s.engine.as_ref().map_or(0, |e| e.bytes_moved());
        let ok = match s.oracle_match {
            Some(true) => "ok",
            Some(false) => "FAIL",
            None => "-",
        };
        writeln!(out, "{:<6}{:<6}{:>12}{:>12}{:>10}{:>12}{:>8}", s.index, s.label, s.start, s.end, s.segments, bytes, ok)?;
    }
    writeln!(out, "total cycles {} (tpu {})", r.total_cycles, r.tpu_cycles)?;
    if let Some(p) = json {
        let doc = TraceOutput { config_hash: config_hash(&(&sys, &spec)), seed: o.seed, version: env!("CARGO_PKG_VERSION"), report: &r };
        fs::write(p, serde_json::to_string_pretty(&doc).unwrap())?;
    }
    Ok(if r.all_match() { EXIT_OK } else { EXIT_FAIL })
}
