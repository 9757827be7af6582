//! The three experiment scenarios: butterfly rate sweep, diversity failure
//! sweep, and the diversity cost microbenchmark.
//!
//! Sweep points are independent simulations; they run on a small thread pool
//! and results are merged in job order, so tables are deterministic for a
//! given seed.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

use codeplane::control::{
    compile_butterfly, compile_diversity, compile_forwarding_baseline, min_multicast_rate,
    ConfigDocument, FunctionKind, NodeKind, StreamSpec, Topology,
};
use codeplane::primitives::{Action, NodeId, PortId};
use codeplane::sim::{
    received_rate, run, sent_rate, FailKind, FailureEvent, HostProcess, HostProcessRole,
    InterPacketLaw, Scenario, SplitMix64,
};
use codeplane::switch::DecodeBranch;

/// Stream id used by all compiled experiment configs.
pub const STREAM_ID: u16 = 5;

/// Source and receiver hosts derived from a topology: the unique host with
/// an outgoing access link sends; hosts with incoming links receive.
pub fn derive_endpoints(topo: &Topology) -> Result<(NodeId, Vec<NodeId>)> {
    let hosts: Vec<NodeId> = topo
        .nodes()
        .filter(|(_, k)| *k == NodeKind::Host)
        .map(|(id, _)| id)
        .collect();
    let senders: Vec<NodeId> = hosts
        .iter()
        .copied()
        .filter(|&h| !topo.outgoing(h).is_empty())
        .collect();
    let receivers: Vec<NodeId> = hosts
        .iter()
        .copied()
        .filter(|&h| !topo.incoming(h).is_empty() && topo.outgoing(h).is_empty())
        .collect();
    if senders.len() != 1 || receivers.is_empty() {
        bail!(
            "topology must have one sending host and at least one receiving host \
             (found {} senders, {} receivers)",
            senders.len(),
            receivers.len()
        );
    }
    Ok((senders[0], receivers))
}

pub fn load_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading topology {}", path.display()))?;
    Ok(Topology::parse(&text)?)
}

fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut rng = SplitMix64::new(base ^ a.wrapping_mul(0x517C_C1B7_2722_0A95) ^ (b << 17));
    rng.next_u64()
}

/// Runs jobs across a few threads, preserving job order in the output.
fn par_map<J, R, F>(jobs: Vec<J>, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let mut results: Vec<Option<R>> = Vec::new();
    results.resize_with(jobs.len(), || None);
    let mut slots: Vec<(usize, &J, &mut Option<R>)> = Vec::new();
    for (i, (job, slot)) in jobs.iter().zip(results.iter_mut()).enumerate() {
        slots.push((i, job, slot));
    }
    std::thread::scope(|scope| {
        let mut chunks: Vec<Vec<(usize, &J, &mut Option<R>)>> =
            (0..threads).map(|_| Vec::new()).collect();
        for (i, job, slot) in slots {
            chunks[i % threads].push((i, job, slot));
        }
        for chunk in chunks {
            scope.spawn(|| {
                for (_, job, slot) in chunk {
                    *slot = Some(f(job));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("job ran")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Coding,
    Forwarding,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Coding => "coding",
            Scheme::Forwarding => "forwarding",
        }
    }
}

pub struct ButterflyOpts {
    pub topology: Topology,
    pub seed: u64,
    pub packets: u64,
    pub payload: usize,
    pub ratios: Vec<f64>,
    pub reps: u32,
}

/// One aggregated sweep point of the butterfly rate experiment.
#[derive(Debug, Clone)]
pub struct RateRow {
    pub scheme: &'static str,
    pub ratio: f64,
    pub receiver: NodeId,
    pub mean: f64,
    pub stddev: f64,
    pub reps: u32,
}

/// Per-seed knee positions backing the ordering claim: the largest swept
/// ratio at which received/send stayed at or above 0.95.
#[derive(Debug, Clone)]
pub struct KneeRow {
    pub rep: u32,
    pub coding_knee: f64,
    pub forwarding_knee: f64,
}

pub struct ButterflyResult {
    pub rows: Vec<RateRow>,
    pub knees: Vec<KneeRow>,
}

/// Received-rate over send-rate sweep on the butterfly topology, coding
/// versus the forwarding-tree baseline.
pub fn butterfly_rate(opts: &ButterflyOpts) -> Result<ButterflyResult> {
    let (source, receivers) = derive_endpoints(&opts.topology)?;
    if receivers.len() != 2 {
        bail!("butterfly needs exactly two receiving hosts");
    }
    let maxflow = min_multicast_rate(&opts.topology, source, &receivers)?;

    struct Job {
        ratio: f64,
        config: ConfigDocument,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (ratio_idx, &ratio) in opts.ratios.iter().enumerate() {
        if !(ratio > 0.0 && ratio <= 1.0) {
            bail!("send-rate ratios must lie in (0, 1], got {ratio}");
        }
        let rate = (ratio * maxflow as f64).round() as u64;
        let spec = StreamSpec {
            stream_id: STREAM_ID,
            source,
            receivers: receivers.clone(),
            rate_bps: rate,
            gen_size: 2,
            kind: FunctionKind::ButterflyMulticast,
        };
        let coding = compile_butterfly(&opts.topology, &spec)?;
        let forwarding = compile_forwarding_baseline(&opts.topology, &spec)?;
        for rep in 0..opts.reps {
            // both schemes replay the same arrival process per (ratio, rep)
            let seed = mix_seed(opts.seed, ratio_idx as u64, rep as u64);
            for config in [coding.clone(), forwarding.clone()] {
                jobs.push(Job {
                    ratio,
                    config,
                    seed,
                });
            }
        }
    }

    let topo = &opts.topology;
    let outcomes = par_map(jobs, |job| -> Result<Vec<(NodeId, f64)>> {
        let rate = (job.ratio * maxflow as f64).round() as u64;
        let mut scenario = Scenario::new(topo.clone(), job.config.clone());
        scenario.seed = job.seed;
        scenario.hosts.push(HostProcess {
            host: source,
            role: HostProcessRole::Sender {
                stream_id: STREAM_ID,
                packets: opts.packets,
                payload_len: opts.payload,
                law: InterPacketLaw::Exponential { rate_bps: rate },
            },
        });
        for &r in &receivers {
            scenario.hosts.push(HostProcess {
                host: r,
                role: HostProcessRole::Receiver { stream_id: STREAM_ID },
            });
        }
        let trace = run(&scenario)?;
        let send = sent_rate(&trace, source, STREAM_ID)?;
        let mut per_receiver = Vec::new();
        for &r in &receivers {
            let recv = received_rate(&trace, r, STREAM_ID)?;
            per_receiver.push((r, recv / send));
        }
        Ok(per_receiver)
    });

    // regroup: (scheme, ratio_idx, receiver) -> per-rep ratios, and
    // (scheme, rep, ratio_idx) -> worst receiver ratio for the knee table
    let mut grouped: BTreeMap<(usize, usize, NodeId), Vec<f64>> = BTreeMap::new();
    let mut per_rep: BTreeMap<(usize, u32, usize), f64> = BTreeMap::new();
    let mut job_meta = Vec::new();
    for (ratio_idx, _) in opts.ratios.iter().enumerate() {
        for rep in 0..opts.reps {
            for scheme in [Scheme::Coding, Scheme::Forwarding] {
                job_meta.push((scheme, ratio_idx, rep));
            }
        }
    }
    for ((scheme, ratio_idx, rep), outcome) in job_meta.into_iter().zip(outcomes) {
        let outcome = outcome?;
        let scheme_idx = match scheme {
            Scheme::Coding => 0,
            Scheme::Forwarding => 1,
        };
        let mut worst = f64::INFINITY;
        for (receiver, value) in outcome {
            grouped
                .entry((scheme_idx, ratio_idx, receiver))
                .or_default()
                .push(value);
            worst = worst.min(value);
        }
        per_rep.insert((scheme_idx, rep, ratio_idx), worst);
    }

    let mut rows = Vec::new();
    for ((scheme_idx, ratio_idx, receiver), values) in grouped {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(RateRow {
            scheme: [Scheme::Coding, Scheme::Forwarding][scheme_idx].name(),
            ratio: opts.ratios[ratio_idx],
            receiver,
            mean,
            stddev: var.sqrt(),
            reps: values.len() as u32,
        });
    }

    let knee = |scheme_idx: usize, rep: u32| -> f64 {
        let mut best = 0.0f64;
        for (ratio_idx, &ratio) in opts.ratios.iter().enumerate() {
            if per_rep[&(scheme_idx, rep, ratio_idx)] >= 0.95 {
                best = best.max(ratio);
            }
        }
        best
    };
    let knees = (0..opts.reps)
        .map(|rep| KneeRow {
            rep,
            coding_knee: knee(0, rep),
            forwarding_knee: knee(1, rep),
        })
        .collect();

    Ok(ButterflyResult { rows, knees })
}

pub struct DiversityFailureOpts {
    pub topology: Topology,
    pub seed: u64,
    pub packets: u64,
    pub payload: usize,
    /// 1-based indices into (data paths..., parity path); empty = all.
    pub fail_paths: Vec<u8>,
    /// Failure times in seconds; empty = ten points across the stream.
    pub fail_times_s: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FailureRow {
    pub path: u8,
    pub fail_time_s: f64,
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub byte_exact: bool,
    pub in_order: bool,
    pub max_gap_ns: u64,
}

/// The diversity function's per-path egress ports at the ingress switch, in
/// path order (data paths then parity).
fn diversity_path_ports(config: &ConfigDocument) -> Result<(NodeId, Vec<PortId>)> {
    for (&sw, doc) in &config.switches {
        let split = doc.entries.iter().find_map(|e| match &e.action {
            Action::Split(s) => Some(s),
            _ => None,
        });
        let Some(split) = split else { continue };
        let mut ports: Vec<PortId> = split.outputs.iter().map(|o| o.port).collect();
        let code = doc
            .code
            .first()
            .and_then(|c| c.rows.first())
            .map(|r| r.port)
            .context("diversity ingress must carry a code row")?;
        ports.push(code);
        return Ok((sw, ports));
    }
    bail!("config has no split switch");
}

/// Sweeps single-path failures across the stream and reports losses, order
/// and inter-delivery gaps.
pub fn diversity_failure(opts: &DiversityFailureOpts) -> Result<Vec<FailureRow>> {
    let (source, receivers) = derive_endpoints(&opts.topology)?;
    if receivers.len() != 1 {
        bail!("diversity protects exactly one receiver");
    }
    let receiver = receivers[0];
    let spec = StreamSpec {
        stream_id: STREAM_ID,
        source,
        receivers: vec![receiver],
        rate_bps: min_multicast_rate(&opts.topology, source, &receivers)?,
        gen_size: 2,
        kind: FunctionKind::Diversity { paths: 3 },
    };
    let config = compile_diversity(&opts.topology, &spec)?;
    let (ingress_sw, path_ports) = diversity_path_ports(&config)?;

    let paths: Vec<u8> = if opts.fail_paths.is_empty() {
        (1..=path_ports.len() as u8).collect()
    } else {
        opts.fail_paths.clone()
    };
    for &p in &paths {
        if p == 0 || p as usize > path_ports.len() {
            bail!("fail-path must be 1..={}", path_ports.len());
        }
    }

    let times: Vec<f64> = if opts.fail_times_s.is_empty() {
        // spread across the back-to-back stream duration, past the access hop
        let access = opts.topology.link(opts.topology.access_link_from(source)?);
        let wire = opts.payload as u64 + 16;
        let duration_ns =
            opts.packets as u128 * wire as u128 * 8 * 1_000_000_000 / access.bandwidth_bps as u128;
        let base = access.delay_ns as f64 / 1e9;
        (0..10)
            .map(|i| base + (0.05 + 0.1 * i as f64) * duration_ns as f64 / 1e9)
            .collect()
    } else {
        opts.fail_times_s.clone()
    };

    let mut jobs = Vec::new();
    for &path in &paths {
        for &t in &times {
            jobs.push((path, t));
        }
    }
    let topo = &opts.topology;
    let config_ref = &config;
    let results = par_map(jobs, |&(path, t)| -> Result<FailureRow> {
        let mut scenario = Scenario::new(topo.clone(), config_ref.clone());
        scenario.seed = mix_seed(opts.seed, path as u64, (t * 1e9) as u64);
        scenario.hosts = vec![
            HostProcess {
                host: source,
                role: HostProcessRole::Sender {
                    stream_id: STREAM_ID,
                    packets: opts.packets,
                    payload_len: opts.payload,
                    law: InterPacketLaw::BackToBack,
                },
            },
            HostProcess {
                host: receiver,
                role: HostProcessRole::Receiver { stream_id: STREAM_ID },
            },
        ];
        scenario.failures = vec![FailureEvent {
            time_ns: (t * 1e9).round() as u64,
            node: ingress_sw,
            port: path_ports[path as usize - 1],
            kind: FailKind::Fail,
        }];
        let trace = run(&scenario)?;
        let got = trace
            .deliveries
            .get(&(receiver, STREAM_ID))
            .cloned()
            .unwrap_or_default();
        let sent = trace
            .sent
            .get(&(source, STREAM_ID))
            .cloned()
            .unwrap_or_default();
        let byte_exact = got.len() == sent.len()
            && got.iter().zip(&sent).all(|(d, s)| d.payload == s.payload);
        let in_order = got
            .windows(2)
            .all(|w| (w[0].batch, w[0].index) < (w[1].batch, w[1].index));
        let max_gap_ns = got
            .windows(2)
            .map(|w| w[1].timestamp_ns - w[0].timestamp_ns)
            .max()
            .unwrap_or(0);
        Ok(FailureRow {
            path,
            fail_time_s: t,
            sent: sent.len() as u64,
            delivered: got.len() as u64,
            lost: sent.len() as u64 - got.len() as u64,
            byte_exact,
            in_order,
            max_gap_ns,
        })
    });
    results.into_iter().collect()
}

pub struct DiversityBenchOpts {
    pub topology: Topology,
    pub seed: u64,
    pub packets: u64,
    pub payloads: Vec<usize>,
    /// Parity-path first-hop delays in milliseconds (sweep for the decode
    /// branch differential); the data-path hops keep the fixture delay.
    pub parity_delays_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub payload: usize,
    pub parity_delay_ms: f64,
    pub delay_diff_ms: f64,
    pub switch: NodeId,
    pub role: &'static str,
    pub branch: &'static str,
    pub traversals: u64,
    pub mean_lookups: f64,
    pub mean_bytes: f64,
    pub mean_clones: f64,
    pub mean_recircs: f64,
    pub mean_latency_ns: f64,
}

/// Per-switch processing-cost microbenchmark over the diversity function,
/// swept by payload size and parity-path delay differential.
pub fn diversity_bench(opts: &DiversityBenchOpts) -> Result<Vec<BenchRow>> {
    let (source, receivers) = derive_endpoints(&opts.topology)?;
    if receivers.len() != 1 {
        bail!("diversity protects exactly one receiver");
    }
    let receiver = receivers[0];
    let spec = StreamSpec {
        stream_id: STREAM_ID,
        source,
        receivers: vec![receiver],
        rate_bps: min_multicast_rate(&opts.topology, source, &receivers)?,
        gen_size: 2,
        kind: FunctionKind::Diversity { paths: 3 },
    };
    let config = compile_diversity(&opts.topology, &spec)?;
    let (ingress_sw, path_ports) = diversity_path_ports(&config)?;
    let parity_port = *path_ports.last().unwrap();
    // delay differential is measured against the fixture's data-path delay
    let base_delay_ms = {
        let idx = opts
            .topology
            .link_from(ingress_sw, path_ports[0])
            .context("data path port")?;
        opts.topology.link(idx).delay_ns as f64 / 1e6
    };

    // role per switch from the compiled config
    let mut roles: BTreeMap<NodeId, &'static str> = BTreeMap::new();
    for (&sw, doc) in &config.switches {
        let role = if doc.entries.iter().any(|e| matches!(e.action, Action::Split(_))) {
            "coding"
        } else if !doc.decode.is_empty() {
            "decoding"
        } else {
            "forwarding"
        };
        roles.insert(sw, role);
    }

    let mut jobs = Vec::new();
    for &payload in &opts.payloads {
        for &d in &opts.parity_delays_ms {
            jobs.push((payload, d));
        }
    }
    let topo = &opts.topology;
    let config_ref = &config;
    let roles_ref = &roles;
    let results = par_map(jobs, |&(payload, d)| -> Result<Vec<BenchRow>> {
        let mut topo = topo.clone();
        topo.set_link_delay(ingress_sw, parity_port, (d * 1e6).round() as u64)?;
        let mut scenario = Scenario::new(topo, config_ref.clone());
        scenario.seed = mix_seed(opts.seed, payload as u64, (d * 1e6) as u64);
        scenario.hosts = vec![
            HostProcess {
                host: source,
                role: HostProcessRole::Sender {
                    stream_id: STREAM_ID,
                    packets: opts.packets,
                    payload_len: payload,
                    law: InterPacketLaw::BackToBack,
                },
            },
            HostProcess {
                host: receiver,
                role: HostProcessRole::Receiver { stream_id: STREAM_ID },
            },
        ];
        let trace = run(&scenario)?;
        let mut rows = Vec::new();
        for (&sw, report) in &trace.switches {
            // (lookups, bytes, clones, recirculations, latency) per traversal
            type Sample = (u64, u64, u64, u64, u64);
            let mut groups: BTreeMap<&'static str, Vec<Sample>> = BTreeMap::new();
            for t in &report.traversals {
                let latency = t.cost.latency_ns(&report.cost_model);
                let sample = (
                    t.cost.table_lookups,
                    t.cost.bytes_touched,
                    t.cost.clones,
                    t.cost.recirculations,
                    latency,
                );
                groups.entry("all").or_default().push(sample);
                match t.decode_branch {
                    Some(DecodeBranch::Arithmetic) => {
                        groups.entry("arithmetic").or_default().push(sample)
                    }
                    Some(DecodeBranch::PassThrough) => {
                        groups.entry("passthrough").or_default().push(sample)
                    }
                    None => {}
                }
            }
            for (branch, samples) in groups {
                let n = samples.len() as f64;
                let mean = |f: fn(&Sample) -> u64| {
                    samples.iter().map(|s| f(s) as f64).sum::<f64>() / n
                };
                rows.push(BenchRow {
                    payload,
                    parity_delay_ms: d,
                    delay_diff_ms: d - base_delay_ms,
                    switch: sw,
                    role: roles_ref.get(&sw).copied().unwrap_or("forwarding"),
                    branch,
                    traversals: samples.len() as u64,
                    mean_lookups: mean(|s| s.0),
                    mean_bytes: mean(|s| s.1),
                    mean_clones: mean(|s| s.2),
                    mean_recircs: mean(|s| s.3),
                    mean_latency_ns: mean(|s| s.4),
                });
            }
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
