//! Experiment harness: compiles the two packaged coding functions, runs
//! sweeps in the deterministic simulator, and emits CSV tables plus
//! self-contained SVG plots.
//!
//! Every invocation echoes its effective configuration (all parameters and
//! the seed) as a `#`-prefixed header so any run can be reproduced from its
//! output alone.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use codeplane::control::{
    compile_butterfly, compile_diversity, compile_forwarding_baseline, FunctionKind, StreamSpec,
};
use codeplane::sim::{received_rate, run, Scenario};

use codeplane_cli::output;
use codeplane_cli::scenarios::{
    butterfly_rate, derive_endpoints, diversity_bench, diversity_failure, load_topology,
    ButterflyOpts, DiversityBenchOpts, DiversityFailureOpts, STREAM_ID,
};

#[derive(Parser)]
#[command(
    name = "codeplane",
    about = "Linear network coding on emulated programmable switches",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Butterfly multicast rate sweep: coding vs forwarding baseline.
    ButterflyRate {
        #[arg(long, default_value = "fixtures/butterfly.topo")]
        topology: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        packets: u64,
        #[arg(long = "payload-size", default_value_t = 4096)]
        payload_size: usize,
        /// Run a single ratio instead of the default 0.1..1.0 sweep.
        #[arg(long = "send-rate-ratio")]
        send_rate_ratio: Option<f64>,
        #[arg(long, default_value_t = 5)]
        reps: u32,
        #[arg(long = "out-dir", default_value = "out")]
        out_dir: PathBuf,
    },
    /// Single-path failure sweep over the diversity function.
    DiversityFailure {
        #[arg(long, default_value = "fixtures/diversity.topo")]
        topology: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        packets: u64,
        #[arg(long = "payload-size", default_value_t = 4096)]
        payload_size: usize,
        /// Fail only this path (1..=3); default sweeps all paths.
        #[arg(long = "fail-path")]
        fail_path: Option<u8>,
        /// Fail at this time in seconds; default sweeps ten points.
        #[arg(long = "fail-time")]
        fail_time: Option<f64>,
        #[arg(long = "out-dir", default_value = "out")]
        out_dir: PathBuf,
    },
    /// Per-switch processing-cost microbenchmark over the diversity
    /// function.
    DiversityBench {
        #[arg(long, default_value = "fixtures/diversity.topo")]
        topology: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        packets: u64,
        /// Payload sizes in bytes; repeat the flag to sweep.
        #[arg(long = "payload-size", default_values_t = [1024usize, 2048, 4096])]
        payload_size: Vec<usize>,
        /// Parity-path first-hop delays in ms; repeat the flag to sweep.
        #[arg(long = "parity-delay-ms", default_values_t = [1.0f64, 2.5, 5.0, 7.5, 10.0])]
        parity_delay_ms: Vec<f64>,
        #[arg(long = "out-dir", default_value = "out")]
        out_dir: PathBuf,
    },
    /// Compile a coding function to a config document without running it.
    Compile {
        #[arg(long)]
        topology: PathBuf,
        /// One of: butterfly, diversity, baseline.
        #[arg(long)]
        function: String,
        #[arg(long, default_value_t = STREAM_ID)]
        stream: u16,
        #[arg(long, default_value_t = 2)]
        gen_size: u8,
        /// Requested stream rate in bits/s; defaults to the admissible rate.
        #[arg(long)]
        rate: Option<u64>,
        /// Output path; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run an arbitrary scenario file and dump its traces.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "out-dir", default_value = "out")]
        out_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::ButterflyRate {
            topology,
            seed,
            packets,
            payload_size,
            send_rate_ratio,
            reps,
            out_dir,
        } => {
            let ratios: Vec<f64> = match send_rate_ratio {
                Some(r) => vec![r],
                None => (1..=10).map(|i| i as f64 / 10.0).collect(),
            };
            println!(
                "# codeplane butterfly-rate topology={} seed={seed} packets={packets} \
payload={payload_size} ratios={ratios:?} reps={reps} out={}",
                topology.display(),
                out_dir.display()
            );
            let opts = ButterflyOpts {
                topology: load_topology(&topology)?,
                seed,
                packets,
                payload: payload_size,
                ratios,
                reps,
            };
            let result = butterfly_rate(&opts)?;
            for f in output::emit_butterfly(&out_dir, &result)? {
                println!("wrote {}", f.display());
            }
            for k in &result.knees {
                println!(
                    "rep {}: coding sustains >=0.95 up to ratio {:.2}, forwarding up to {:.2}",
                    k.rep, k.coding_knee, k.forwarding_knee
                );
            }
        }
        Command::DiversityFailure {
            topology,
            seed,
            packets,
            payload_size,
            fail_path,
            fail_time,
            out_dir,
        } => {
            println!(
                "# codeplane diversity-failure topology={} seed={seed} packets={packets} \
payload={payload_size} fail_path={fail_path:?} fail_time={fail_time:?} out={}",
                topology.display(),
                out_dir.display()
            );
            let opts = DiversityFailureOpts {
                topology: load_topology(&topology)?,
                seed,
                packets,
                payload: payload_size,
                fail_paths: fail_path.map(|p| vec![p]).unwrap_or_default(),
                fail_times_s: fail_time.map(|t| vec![t]).unwrap_or_default(),
            };
            let rows = diversity_failure(&opts)?;
            for f in output::emit_diversity_failure(&out_dir, &rows)? {
                println!("wrote {}", f.display());
            }
            let lossless = rows.iter().filter(|r| r.lost == 0).count();
            println!("{lossless}/{} runs delivered with zero loss", rows.len());
        }
        Command::DiversityBench {
            topology,
            seed,
            packets,
            payload_size,
            parity_delay_ms,
            out_dir,
        } => {
            println!(
                "# codeplane diversity-bench topology={} seed={seed} packets={packets} \
payloads={payload_size:?} parity_delays_ms={parity_delay_ms:?} out={}",
                topology.display(),
                out_dir.display()
            );
            let opts = DiversityBenchOpts {
                topology: load_topology(&topology)?,
                seed,
                packets,
                payloads: payload_size,
                parity_delays_ms: parity_delay_ms,
            };
            let rows = diversity_bench(&opts)?;
            for f in output::emit_diversity_bench(&out_dir, &rows)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Compile {
            topology,
            function,
            stream,
            gen_size,
            rate,
            output,
        } => {
            let topo = load_topology(&topology)?;
            let (source, receivers) = derive_endpoints(&topo)?;
            let admissible =
                codeplane::control::min_multicast_rate(&topo, source, &receivers)?;
            let spec = StreamSpec {
                stream_id: stream,
                source,
                receivers: receivers.clone(),
                rate_bps: rate.unwrap_or(admissible),
                gen_size,
                kind: match function.as_str() {
                    "butterfly" => FunctionKind::ButterflyMulticast,
                    "diversity" => FunctionKind::Diversity {
                        paths: gen_size + 1,
                    },
                    "baseline" => FunctionKind::ButterflyMulticast, // unused
                    other => bail!("unknown function `{other}`"),
                },
            };
            let doc = match function.as_str() {
                "butterfly" => compile_butterfly(&topo, &spec)?,
                "diversity" => compile_diversity(&topo, &spec)?,
                "baseline" => compile_forwarding_baseline(&topo, &spec)?,
                _ => unreachable!(),
            };
            let text = doc.to_text();
            match output {
                Some(path) => {
                    std::fs::write(&path, &text)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Simulate { scenario, out_dir } => {
            println!(
                "# codeplane simulate scenario={} out={}",
                scenario.display(),
                out_dir.display()
            );
            let scenario = Scenario::from_file(&scenario)?;
            println!("# seed={}", scenario.seed);
            let trace = run(&scenario)?;
            std::fs::create_dir_all(&out_dir)?;
            for &(host, stream) in trace.deliveries.keys() {
                let path = out_dir.join(format!("receiver_{host}_{stream}.csv"));
                std::fs::write(&path, trace.delivery_csv(host, stream))?;
                println!("wrote {}", path.display());
                let n = trace.deliveries[&(host, stream)].len();
                match received_rate(&trace, host, stream) {
                    Ok(rate) => {
                        println!("receiver {host} stream {stream}: {n} deliveries, {rate:.1} b/s")
                    }
                    Err(_) => println!("receiver {host} stream {stream}: {n} deliveries"),
                }
            }
            let counters = out_dir.join("counters.csv");
            std::fs::write(&counters, trace.counters_csv())?;
            println!("wrote {}", counters.display());
        }
    }
    Ok(())
}
