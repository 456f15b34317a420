//! `twl`: batch driver for the twl-core pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twl_core::analysis::{self, InstanceReport, RunConfig};
use twl_core::checks::{self, Check};
use twl_core::gen::{self, Kind};
use twl_core::io::{to_stable_json, versioned_json, PairFile};
use twl_core::measure::hilbert_field;
use twl_core::sizelemma::{Decomposition, DecompositionNode};
use twl_core::{caps, constants, corpus, DyadicInterval, GridConfig, MeasurePair, TruncationWindow};

#[derive(Parser)]
#[command(name = "twl", version, about = "Two-weight Hilbert transform numerics on atomic measure pairs")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "TWL_SEED", default_value_t = 0)]
    seed: u64,
    /// Energy stopping constant.
    #[arg(long, global = true, env = "TWL_C0", default_value_t = caps::C0)]
    c0: f64,
    /// Recursion threshold relative to the initial size.
    #[arg(long, global = true, env = "TWL_THRESHOLD", default_value_t = 1e-6)]
    threshold: f64,
    /// Random (f, g) draws per instance.
    #[arg(long, global = true, env = "TWL_SAMPLES", default_value_t = 8)]
    samples: usize,
    /// Lower truncation radius (default: half the smallest cross distance).
    #[arg(long, global = true, env = "TWL_WINDOW_EPS")]
    window_eps: Option<f64>,
    /// Upper truncation radius (default: 2).
    #[arg(long, global = true, env = "TWL_WINDOW_DELTA")]
    window_delta: Option<f64>,
    /// Output file (default: stdout), written atomically.
    #[arg(short, long, global = true, env = "TWL_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, global = true, env = "TWL_FORMAT", value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long = "grid-k", env = "TWL_GRID_K", default_value_t = GridConfig::default().k)]
    k: u32,
    #[arg(long = "grid-r", env = "TWL_GRID_R", default_value_t = GridConfig::default().r)]
    r: u32,
    #[arg(long = "grid-eps", env = "TWL_GRID_EPS", default_value_t = GridConfig::default().eps)]
    eps: f64,
}

#[derive(Args)]
struct GenArgs {
    /// uniform-random, cantor, lattice or adversarial-spike.
    #[arg(required_unless_present = "corpus")]
    kind: Option<Kind>,
    /// Atoms per measure, lattice size or Cantor depth.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// w-atoms for uniform-random (default: --size).
    #[arg(long)]
    size_w: Option<usize>,
    #[arg(long, default_value_t = 0)]
    spikes: usize,
    /// Exchange σ and w.
    #[arg(long)]
    swapped: bool,
    #[arg(long)]
    name: Option<String>,
    /// Write all standard corpus instances into this directory.
    #[arg(long, conflicts_with = "kind")]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a measure pair file, or the standard corpus into a directory.
    Gen(GenArgs),
    /// A₂, testing constants, norm and the comparability ratio.
    Constants { inputs: Vec<PathBuf> },
    /// The recursive size decomposition of 𝒬₀.
    Decompose {
        input: PathBuf,
        /// Also write the tree in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// 𝒬₀, its size and norm and the form identities; CSV emits H(1_{I₀}σ) at the w-atoms.
    Forms { input: PathBuf },
    /// Run the invariant suite (default: the standard corpus).
    Verify { inputs: Vec<PathBuf> },
    /// One CSV row per instance.
    Report {
        inputs: Vec<PathBuf>,
        /// Also write each instance's full JSON report here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Invariant(String),
}

impl From<twl_core::Error> for Failure {
    fn from(e: twl_core::Error) -> Self {
        if e.is_input() {
            Failure::Input(e.to_string())
        } else {
            Failure::Invariant(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

type Outcome<T> = Result<T, Failure>;

struct Instance {
    name: String,
    pair: MeasurePair,
}

fn load(path: &Path) -> Outcome<Instance> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let file = PairFile::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let pair = file.to_pair().map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(Instance { name: file.name, pair })
}

/// Files as given; directories contribute their `*.json` entries in name order.
fn expand(inputs: &[PathBuf]) -> Outcome<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_failure(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_all(inputs: &[PathBuf]) -> Outcome<Vec<Instance>> {
    if inputs.is_empty() {
        return Err(Failure::Input("no input files".into()));
    }
    expand(inputs)?.iter().map(|p| load(p)).collect()
}

fn write_atomic(path: &Path, text: &str) -> Outcome<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, text).map_err(|e| io_failure(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_failure(path, e))
}

impl RunArgs {
    fn config(&self, pair: &MeasurePair) -> Outcome<RunConfig> {
        let window = if self.window_eps.is_some() || self.window_delta.is_some() {
            let d = pair.default_window();
            Some(TruncationWindow::new(self.window_eps.unwrap_or(d.eps), self.window_delta.unwrap_or(d.delta))?)
        } else {
            None
        };
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Failure::Input(format!("threshold must be positive, got {}", self.threshold)));
        }
        Ok(RunConfig { seed: self.seed, c0: self.c0, threshold_rel: self.threshold, samples: self.samples, window })
    }

    fn emit(&self, text: &str) -> Outcome<()> {
        match &self.output {
            Some(p) => write_atomic(p, text),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes()).map_err(|e| io_failure(Path::new("<stdout>"), e))
            }
        }
    }
}

/// Runs `f` over `items` on all cores, keeping input order.
fn parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn f17(x: f64) -> String {
    format!("{:.16e}", x + 0.0)
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Outcome<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let bad = |e: csv::Error| Failure::Invariant(format!("csv: {e}"));
    w.write_record(header).map_err(bad)?;
    for r in rows {
        w.write_record(r).map_err(bad)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Invariant(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
}

fn cmd_gen(run: &RunArgs, g: GenArgs) -> Outcome<()> {
    let GenArgs { kind, size, size_w, spikes, swapped, name, corpus: corpus_dir, grid } = g;
    let cfg = GridConfig::new(grid.k, grid.r, grid.eps)?;
    if let Some(dir) = corpus_dir {
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for s in corpus::standard() {
            let pair = s.build(cfg)?;
            write_atomic(&dir.join(format!("{}.json", s.name)), &to_stable_json(&PairFile::new(&s.name, &pair)))?;
        }
        return Ok(());
    }
    let kind = kind.expect("clap requires kind without --corpus");
    let pair = match kind {
        Kind::UniformRandom => gen::uniform_random(cfg, size, size_w.unwrap_or(size), run.seed)?,
        Kind::Lattice => gen::lattice(cfg, size)?,
        Kind::Cantor => gen::cantor(cfg, size as u32)?,
        Kind::AdversarialSpike => gen::adversarial_spike(cfg, size, spikes, run.seed)?,
    };
    let pair = if swapped { pair.swapped() } else { pair };
    let name = name.unwrap_or_else(|| format!("{kind}-{size}-s{}", run.seed));
    run.emit(&to_stable_json(&PairFile::new(name, &pair)))
}

fn cmd_constants(run: &RunArgs, inputs: &[PathBuf]) -> Outcome<()> {
    let instances = load_all(inputs)?;
    let reports: Vec<Outcome<(String, constants::ConstantsReport)>> = parallel(&instances, |i| {
        let win = run.config(&i.pair)?.window.unwrap_or_else(|| i.pair.default_window());
        Ok((i.name.clone(), constants::constants(&i.pair, &win)))
    });
    let reports = reports.into_iter().collect::<Outcome<Vec<_>>>()?;
    match run.format {
        Format::Json => {
            let body: BTreeMap<&str, &constants::ConstantsReport> =
                reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
            run.emit(&versioned_json("constants", &body))
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|(n, r)| {
                    vec![
                        n.clone(),
                        f17(r.a2.value),
                        f17(r.testing_sw.value),
                        f17(r.testing_ws.value),
                        f17(r.norm.norm),
                        f17(r.h_const),
                        r.ratio.map(f17).unwrap_or_default(),
                    ]
                })
                .collect();
            run.emit(&csv_text(&["name", "a2", "testing_sw", "testing_ws", "norm", "h", "ratio"], &rows)?)
        }
    }
}

fn dot(d: &Decomposition) -> String {
    fn walk(n: &DecompositionNode, id: &mut usize, out: &mut String) -> usize {
        let me = *id;
        *id += 1;
        let _ = writeln!(
            out,
            "  n{me} [label=\"{}\\n{} pairs\\ntau {:.3e}\\nB {:.3e}\"{}];",
            n.class,
            n.pairs,
            n.tau,
            n.norm,
            if n.leaf { ", shape=box" } else { "" }
        );
        for c in &n.children {
            let child = walk(c, id, out);
            let _ = writeln!(out, "  n{me} -> n{child};");
        }
        me
    }
    let mut out = String::from("digraph decomposition {\n");
    walk(&d.root, &mut 0, &mut out);
    out.push_str("}\n");
    out
}

fn cmd_decompose(run: &RunArgs, input: &Path, dot_path: Option<&Path>) -> Outcome<()> {
    let inst = load(input)?;
    let rc = run.config(&inst.pair)?;
    let p = analysis::prepare(inst.pair, &rc)?;
    let tau0 = p.ctx.size(&p.q0).value;
    let threshold = if tau0 > 0.0 { rc.threshold_rel * tau0 } else { 1.0 };
    let d = twl_core::sizelemma::decompose_until(&p.ctx, &p.q0, p.family(), threshold)?;
    if let Some(path) = dot_path {
        write_atomic(path, &dot(&d))?;
    }
    run.emit(&versioned_json("decomposition", &d))
}

#[derive(serde::Serialize)]
struct FormsReport<'a> {
    name: &'a str,
    pairs: Vec<(DyadicInterval, DyadicInterval)>,
    size: twl_core::forms::SizeReport,
    norm: twl_core::linalg::NormPair,
    energy_family: &'a [DyadicInterval],
    identities: analysis::IdentityReport,
    monotonicity: analysis::MonotonicityScan,
}

fn cmd_forms(run: &RunArgs, input: &Path) -> Outcome<()> {
    let inst = load(input)?;
    let rc = run.config(&inst.pair)?;
    let p = analysis::prepare(inst.pair, &rc)?;
    match run.format {
        Format::Csv => {
            let ones = vec![1.0; p.ctx.pair.sigma.len()];
            let field = hilbert_field(&ones, &p.ctx.pair, &DyadicInterval::unit(), &p.ctx.win)?;
            let rows: Vec<Vec<String>> =
                p.ctx.pair.w.positions().iter().zip(&field).map(|(x, v)| vec![f17(*x), f17(*v)]).collect();
            run.emit(&csv_text(&["atom_position", "value"], &rows)?)
        }
        Format::Json => {
            let mut rng = gen::rng(rc.seed);
            let identities = analysis::identity_check(&p.ctx, &p.q0, p.family(), rc.samples, &mut rng);
            let report = FormsReport {
                name: &inst.name,
                pairs: p.q0.iter().map(|q| (q.q1, q.q2)).collect(),
                size: p.ctx.size(&p.q0),
                norm: p.ctx.norm(&p.q0),
                energy_family: p.family(),
                identities,
                monotonicity: analysis::monotonicity_scan(&p.ctx),
            };
            run.emit(&versioned_json("forms", &report))
        }
    }
}

#[derive(serde::Serialize)]
struct VerifyReport<'a> {
    instances: Vec<&'a str>,
    checks: BTreeMap<&'a str, Vec<&'a Check>>,
    failures: usize,
}

fn cmd_verify(run: &RunArgs, inputs: &[PathBuf]) -> Outcome<()> {
    let instances = if inputs.is_empty() {
        let cfg = GridConfig::default();
        corpus::standard()
            .into_iter()
            .map(|s| Ok(Instance { pair: s.build(cfg)?, name: s.name }))
            .collect::<Outcome<Vec<_>>>()?
    } else {
        load_all(inputs)?
    };
    let results: Vec<Outcome<Vec<Check>>> = parallel(&instances, |i| {
        let rc = run.config(&i.pair)?;
        Ok(checks::verify_instance(&i.name, &i.pair, &rc)?.1)
    });
    let results = results.into_iter().collect::<Outcome<Vec<_>>>()?;
    let failures: usize = results.iter().flatten().filter(|c| !c.passed).count();
    match run.format {
        Format::Json => {
            let mut by_id: BTreeMap<&str, Vec<&Check>> = BTreeMap::new();
            for c in results.iter().flatten() {
                by_id.entry(c.id).or_default().push(c);
            }
            let body = VerifyReport { instances: instances.iter().map(|i| i.name.as_str()).collect(), checks: by_id, failures };
            run.emit(&versioned_json("verify", &body))?;
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = instances
                .iter()
                .zip(&results)
                .flat_map(|(i, cs)| {
                    cs.iter().map(|c| {
                        vec![i.name.clone(), c.id.into(), c.passed.to_string(), f17(c.value), f17(c.limit), c.detail.clone()]
                    })
                })
                .collect();
            run.emit(&csv_text(&["instance", "check", "passed", "value", "limit", "detail"], &rows)?)?;
        }
    }
    let mut summary = String::new();
    for id in checks::IDS {
        let of_id: Vec<(&str, &Check)> = instances
            .iter()
            .zip(&results)
            .flat_map(|(i, cs)| cs.iter().filter(|c| c.id == *id).map(|c| (i.name.as_str(), c)))
            .collect();
        let bad: Vec<&(&str, &Check)> = of_id.iter().filter(|(_, c)| !c.passed).collect();
        let worst = of_id.iter().map(|(_, c)| c.value).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            summary,
            "{} {id}: worst {worst:.3e}, limit {:.3e}",
            if bad.is_empty() { "PASS" } else { "FAIL" },
            of_id.first().map_or(0.0, |(_, c)| c.limit)
        );
        for (name, c) in bad {
            let _ = writeln!(summary, "    {name}: {:.3e} {}", c.value, c.detail);
        }
    }
    eprint!("{summary}");
    if failures > 0 {
        return Err(Failure::Invariant(format!("{failures} checks failed over {} instances", instances.len())));
    }
    Ok(())
}

fn report_row(r: &InstanceReport) -> Vec<String> {
    let c = &r.constants;
    vec![
        r.name.clone(),
        r.sigma_atoms.to_string(),
        r.w_atoms.to_string(),
        f17(c.a2.value),
        f17(c.testing_sw.value.max(c.testing_ws.value)),
        f17(c.norm.norm),
        c.ratio.map(f17).unwrap_or_default(),
        r.q0_pairs.to_string(),
        f17(r.decomposition.tau0),
        r.decomposition.depth.to_string(),
        f17(r.decomposition.c_max),
        f17(r.energy.fraction),
    ]
}

fn cmd_report(run: &RunArgs, inputs: &[PathBuf], out_dir: Option<&Path>) -> Outcome<()> {
    let instances = load_all(inputs)?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
    }
    let reports: Vec<Outcome<InstanceReport>> = parallel(&instances, |i| {
        let r = analysis::analyze(&i.name, i.pair.clone(), &run.config(&i.pair)?)?;
        if let Some(d) = out_dir {
            write_atomic(&d.join(format!("{}.json", i.name)), &versioned_json("instance", &r))?;
        }
        Ok(r)
    });
    let reports = reports.into_iter().collect::<Outcome<Vec<_>>>()?;
    let header = [
        "name", "sigma_atoms", "w_atoms", "a2", "testing", "norm", "ratio", "q0_pairs", "tau0", "depth", "c_max",
        "energy_fraction",
    ];
    match run.format {
        Format::Csv => run.emit(&csv_text(&header, &reports.iter().map(report_row).collect::<Vec<_>>())?),
        Format::Json => run.emit(&versioned_json("report", &reports)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let run = &cli.run;
    let outcome = match cli.cmd {
        Cmd::Gen(g) => cmd_gen(run, g),
        Cmd::Constants { inputs } => cmd_constants(run, &inputs),
        Cmd::Decompose { input, dot } => cmd_decompose(run, &input, dot.as_deref()),
        Cmd::Forms { input } => cmd_forms(run, &input),
        Cmd::Verify { inputs } => cmd_verify(run, &inputs),
        Cmd::Report { inputs, out_dir } => cmd_report(run, &inputs, out_dir.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        assert_eq!(parallel(&xs, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel(&Vec::<usize>::new(), |x| *x).is_empty());
    }

    #[test]
    fn f17_has_no_negative_zero() {
        assert_eq!(f17(-0.0), f17(0.0));
    }
}
