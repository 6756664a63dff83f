use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gossip_overlay::engine::Mode;
use gossip_overlay::expander::Iterations;
use gossip_overlay::graph::write_edge_list;
use gossip_overlay::harness::{self, ExperimentSpec, GraphSource, HarnessError};
use gossip_overlay::OverlayGraph;

#[derive(Parser)]
#[command(name = "overlay-sim", version, about = "Simulate expander overlay construction on gossip networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated graph as an edge list.
    Generate {
        #[command(flatten)]
        graph: GraphArgs,
        /// Output file; stdout if absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Build the overlay for one or more seeds and report the results.
    Run(RunArgs),
    /// Measure a graph's pseudo-diameter and conductance estimate.
    Metrics {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        roots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quick end-to-end checks on small generated graphs.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    FatCycle,
    Grid,
    Ba,
    Regular,
}

#[derive(Args)]
struct GraphArgs {
    /// Generator to use when no input file is given.
    #[arg(long, value_enum)]
    graph: Option<Kind>,
    /// Edge-list file to read instead of generating.
    #[arg(long, conflicts_with = "graph")]
    input: Option<PathBuf>,
    /// Keep only the largest connected component of the input file.
    #[arg(long)]
    largest_component: bool,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    cols: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Seed for randomized generators.
    #[arg(long, default_value_t = 0)]
    graph_seed: u64,
}

impl GraphArgs {
    fn source(&self) -> Result<GraphSource, HarnessError> {
        if let Some(path) = &self.input {
            return Ok(GraphSource::EdgeList {
                path: path.to_string_lossy().into_owned(),
                largest_component: self.largest_component,
            });
        }
        let Some(kind) = self.graph else {
            return Err(HarnessError::Spec("give --graph or --input".into()));
        };
        Ok(match kind {
            Kind::FatCycle => GraphSource::FatCycle { n: self.n, width: self.width },
            Kind::Grid => GraphSource::Grid { rows: self.rows, cols: self.cols },
            Kind::Ba => GraphSource::BarabasiAlbert { n: self.n, m: self.m, seed: self.graph_seed },
            Kind::Regular => GraphSource::RandomRegular { n: self.n, d: self.d, seed: self.graph_seed },
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Read the whole experiment from a JSON spec; graph and protocol flags are ignored.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seeds to run; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 0.1)]
    phi: f64,
    #[arg(long, default_value = "fast")]
    mode: Mode,
    /// Expansion iterations: a number or `auto`.
    #[arg(long, default_value = "5")]
    iterations: String,
    /// Degree-reduction tokens per node.
    #[arg(long, default_value_t = 10)]
    tokens: u32,
    /// Degree-reduction acceptance cap.
    #[arg(long, default_value_t = 40)]
    cap: u32,
    /// Expansion walk length.
    #[arg(long, default_value_t = 13)]
    walk_length: u32,
    #[arg(long, value_enum, default_value = "json")]
    out: Format,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Include the per-round trace in the JSON report.
    #[arg(long)]
    trace: bool,
    /// Record wall-clock time per seed.
    #[arg(long)]
    wall_time: bool,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec, HarnessError> {
        if let Some(path) = &self.spec {
            let text = read(path)?;
            return serde_json::from_str(&text).map_err(|e| HarnessError::Spec(format!("{}: {e}", path.display())));
        }
        let mut spec = ExperimentSpec::new(self.graph.source()?, self.mode, self.seed.clone());
        spec.params.phi = self.phi;
        spec.params.expansion.iterations = match self.iterations.as_str() {
            "auto" => Iterations::Auto,
            k => Iterations::Fixed(
                k.parse().map_err(|_| HarnessError::Spec(format!("--iterations takes a number or auto, got {k:?}")))?,
            ),
        };
        spec.params.expansion.walk_length = self.walk_length;
        spec.params.reduction.tokens = self.tokens;
        spec.params.reduction.cap = self.cap;
        spec.trace = self.trace;
        spec.wall_time = self.wall_time;
        Ok(spec)
    }
}

fn read(path: &PathBuf) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn emit(text: &str, output: Option<&PathBuf>) -> Result<(), HarnessError> {
    match output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(graph: &GraphArgs) -> Result<OverlayGraph, HarnessError> {
    let (g, notices) = graph.source()?.load()?;
    for note in notices {
        eprintln!("note: {note}");
    }
    Ok(g)
}

/// `Ok(false)` means a check failed without an error to report.
fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Generate { graph, output } => emit(&write_edge_list(&load(&graph)?), output.as_ref()).map(|_| true),
        Command::Run(args) => {
            let spec = args.spec()?;
            let report = harness::run_experiment(&spec)?;
            for note in &report.notices {
                eprintln!("note: {note}");
            }
            let text = match args.out {
                Format::Json => report.to_json() + "\n",
                Format::Csv => report.to_csv(),
            };
            emit(&text, args.output.as_ref()).map(|_| true)
        }
        Command::Metrics { graph, samples, roots, seed } => {
            let g = load(&graph)?;
            let connected = g.is_connected();
            let mut value = serde_json::json!({
                "n": g.node_count(),
                "edges": g.edge_count(),
                "max_degree": g.max_degree(),
                "connected": connected,
            });
            if connected {
                let m = harness::measure(&g, samples, roots, seed)?;
                value["pseudo_diameter"] = m.diameter.into();
                value["conductance_estimate"] = m.conductance.into();
            }
            emit(&(serde_json::to_string_pretty(&value).expect("json") + "\n"), None).map(|_| true)
        }
        Command::Selftest => selftest(),
    }
}

fn selftest() -> Result<bool, HarnessError> {
    let cases = [
        ("fat_cycle-64-3 fast", GraphSource::FatCycle { n: 64, width: 3 }, Mode::Fast),
        ("grid-6-6 fast", GraphSource::Grid { rows: 6, cols: 6 }, Mode::Fast),
        ("ba-64-2 fast", GraphSource::BarabasiAlbert { n: 64, m: 2, seed: 1 }, Mode::Fast),
        ("fat_cycle-16-2 faithful", GraphSource::FatCycle { n: 16, width: 2 }, Mode::Faithful),
    ];
    let mut failed = 0;
    for (name, source, mode) in cases {
        let spec = ExperimentSpec::new(source, mode, vec![1]);
        let first = harness::run_experiment(&spec)?;
        let again = harness::run_experiment(&spec)?;
        let run = &first.runs[0];
        let ok = run.metrics.max_degree <= spec.params.reduction.degree_bound()
            && first.to_json() == again.to_json()
            && first.headline.phi_ge > 0.0;
        println!(
            "{} {name}: phases={} D_GE={} Phi_GE={:.3} max_degree={}",
            if ok { "PASS" } else { "FAIL" },
            first.headline.phases,
            first.headline.d_ge,
            first.headline.phi_ge,
            first.headline.max_degree
        );
        failed += (!ok) as u32;
    }
    if failed > 0 {
        eprintln!("{failed} selftest cases failed");
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
