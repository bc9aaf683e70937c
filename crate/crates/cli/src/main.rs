//! `spdkit` command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

mod viz;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spdkit::ingest::{load_instance_map, load_label_map};
use spdkit::selftest::{self, mutants};
use spdkit::spd::{bin_index, BinFn};
use spdkit::spdmap::{compute_map_with, deserialize, pool_map, serialize, MapOptions, PoolMode};
use spdkit::{synth, BinSpec, InstanceMap, MapFormat, RadialScale};

use crate::viz::VizMode;

const MAX_BINS: usize = 4096;

#[derive(Parser)]
#[command(name = "spdkit", version, about = "Shape-aware position descriptor maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the SPD map of an instance map and write it as SPD1.
    Compute(ComputeArgs),
    /// Render an SPD1 file as a PPM heatmap.
    Viz(VizArgs),
    /// Time serial against parallel map computation.
    Bench(BenchArgs),
    /// Run the embedded property suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct BinArgs {
    /// Radius bins.
    #[arg(long, default_value_t = 12)]
    rbins: usize,
    /// Angle bins.
    #[arg(long, default_value_t = 6)]
    tbins: usize,
    /// Distance normalization: `instance` (one max per instance) or `point`.
    #[arg(long, default_value = "instance")]
    radial_scale: RadialScale,
    /// Worker threads; defaults to the available parallelism, 1 is the serial path.
    #[arg(long)]
    threads: Option<usize>,
}

impl BinArgs {
    fn spec(&self) -> Result<BinSpec, Failure> {
        if self.rbins.saturating_mul(self.tbins) > MAX_BINS {
            return Err(Failure::Input(anyhow!(
                "--rbins {} x --tbins {} exceeds {MAX_BINS} bins",
                self.rbins,
                self.tbins
            )));
        }
        BinSpec::new(self.rbins, self.tbins)
            .map(|s| s.with_scale(self.radial_scale))
            .map_err(|e| Failure::Input(e.into()))
    }

    fn threads(&self) -> usize {
        self.threads.unwrap_or_else(available_threads)
    }
}

#[derive(Args)]
struct ComputeArgs {
    /// Instance map (ID 0 is background).
    #[arg(long)]
    instances: PathBuf,
    /// Semantic label map; only checked against the instance map's size.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Input encoding (`pgm`, `png-indexed`, `raw-csv`); guessed from the extension if absent.
    #[arg(long)]
    format: Option<MapFormat>,
    /// Average-pool the map by this power-of-two factor before writing.
    #[arg(long, default_value_t = 1, value_parser = parse_pool)]
    pool: usize,
    #[command(flatten)]
    bins: BinArgs,
}

#[derive(Args)]
struct VizArgs {
    /// SPD1 file.
    map: PathBuf,
    /// `norm` or `bin:I,J`.
    #[arg(long, default_value = "norm")]
    mode: VizMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark on this instance map instead of a synthetic scene.
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    format: Option<MapFormat>,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Objects in the synthetic scene.
    #[arg(long, default_value_t = 24)]
    objects: u32,
    #[command(flatten)]
    bins: BinArgs,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Fault {
    BinOffByOne,
}

#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
    /// Already reported; only the exit code remains.
    Silent(u8),
}

fn parse_pool(s: &str) -> Result<usize, String> {
    let f: usize = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if f == 0 || !f.is_power_of_two() {
        return Err(format!("pool factor {f} is not a power of two"));
    }
    Ok(f)
}

fn available_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn seed() -> Result<u64, Failure> {
    match std::env::var("SPDKIT_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Input(anyhow!("SPDKIT_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(0),
    }
}

fn format_for(path: &Path, explicit: Option<MapFormat>) -> Result<MapFormat, Failure> {
    explicit
        .or_else(|| MapFormat::from_path(path))
        .ok_or_else(|| Failure::Input(anyhow!("cannot infer the format of {}; pass --format", path.display())))
}

fn load_instances(path: &Path, format: Option<MapFormat>) -> Result<InstanceMap, Failure> {
    let fmt = format_for(path, format)?;
    load_instance_map(path, fmt).map_err(|e| Failure::Input(e.into()))
}

fn compute(args: ComputeArgs) -> Result<(), Failure> {
    let spec = args.bins.spec()?;
    let inst = load_instances(&args.instances, args.format)?;
    if let Some(path) = &args.labels {
        let labels = load_label_map(path, format_for(path, args.format)?).map_err(|e| Failure::Input(e.into()))?;
        labels.check_pairing(&inst).map_err(|e| Failure::Input(e.into()))?;
    }
    let opts = MapOptions {
        threads: args.bins.threads(),
        bin: bin_index,
    };
    let start = Instant::now();
    let (map, stats) = compute_map_with(&inst, &spec, &opts).map_err(|e| Failure::Internal(e.into()))?;
    let elapsed = start.elapsed();
    let map = if args.pool > 1 {
        pool_map(&map, args.pool, PoolMode::Average).map_err(|e| Failure::Input(e.into()))?
    } else {
        map
    };
    serialize(&map, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(Failure::Internal)?;
    println!("instances: {}", stats.instances);
    println!("pixels: {}", stats.instance_pixels);
    if stats.degenerate_pixels > 0 {
        println!("degenerate pixels: {}", stats.degenerate_pixels);
    }
    println!("wall time: {:.3} ms", elapsed.as_secs_f64() * 1e3);
    println!("wrote {} ({}x{}, {}x{} bins)", args.out.display(), map.width(), map.height(), map.m(), map.n());
    Ok(())
}

fn render(args: VizArgs) -> Result<(), Failure> {
    let map = deserialize(&args.map).map_err(|e| Failure::Input(e.into()))?;
    let values = viz::channel(&map, args.mode).map_err(|e| Failure::Input(e.into()))?;
    let gray = viz::scale_to_u8(&values);
    let write = || -> anyhow::Result<()> {
        let f = File::create(&args.out)?;
        viz::write_ppm(BufWriter::new(f), map.width(), map.height(), &gray)?;
        Ok(())
    };
    write()
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(Failure::Internal)?;
    println!("wrote {} ({}x{})", args.out.display(), map.width(), map.height());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let spec = args.bins.spec()?;
    let inst = match &args.instances {
        Some(path) => load_instances(path, args.format)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed()?);
            synth::scene(&mut rng, args.width, args.height, args.objects)
        }
    };
    let threads = args.bins.threads();
    let run = |threads| -> Result<_, Failure> {
        let opts = MapOptions {
            threads,
            bin: bin_index,
        };
        let start = Instant::now();
        let out = compute_map_with(&inst, &spec, &opts).map_err(|e| Failure::Internal(e.into()))?;
        Ok((out, start.elapsed().as_secs_f64()))
    };
    let ((serial, stats), t_serial) = run(1)?;
    let ((parallel, _), t_parallel) = run(threads)?;
    let rate = |t: f64| stats.instance_pixels as f64 / t.max(1e-12);
    println!("scene: {}x{}, {} instances, {} descriptors", inst.width(), inst.height(), stats.instances, stats.instance_pixels);
    println!("serial:   {:>12.0} descriptors/s ({:.3} s)", rate(t_serial), t_serial);
    println!("parallel: {:>12.0} descriptors/s ({:.3} s, {threads} threads)", rate(t_parallel), t_parallel);
    println!("speedup: {:.2}x ({} hardware threads)", t_serial / t_parallel.max(1e-12), available_threads());
    println!("contour sizes:");
    for (id, len) in &stats.contour_sizes {
        println!("  instance {id}: {len}");
    }
    if serial.bit_eq(&parallel) {
        println!("outputs: byte-identical");
        Ok(())
    } else {
        Err(Failure::Internal(anyhow!("parallel output differs from serial output")))
    }
}

fn run_selftest(args: SelftestArgs) -> Result<(), Failure> {
    let bin: BinFn = match args.inject_fault {
        None => bin_index,
        Some(Fault::BinOffByOne) => mutants::bin_index_off_by_one,
    };
    let report = selftest::run(bin, seed()?);
    for r in &report.results {
        match &r.failure {
            None => println!("ok   {} ({} checks)", r.name, r.checks),
            Some(msg) => println!("FAIL {}: {msg}", r.name),
        }
    }
    let failed = report.failed().count();
    println!("{} properties run, {} passed, {failed} failed", report.results.len(), report.results.len() - failed);
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Silent(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compute(a) => compute(a),
        Command::Viz(a) => render(a),
        Command::Bench(a) => bench(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Silent(code)) => ExitCode::from(code),
    }
}
