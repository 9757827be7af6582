//! End-to-end runs of both compiled coding functions over the repo's fixture
//! topologies.

use std::path::PathBuf;

use codeplane::control::{
    compile_butterfly, compile_diversity, min_multicast_rate, FunctionKind, StreamSpec, Topology,
};
use codeplane::sim::{
    run, FailKind, FailureEvent, HostProcess, HostProcessRole, InterPacketLaw, Scenario,
};

fn fixture_topology(name: &str) -> Topology {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    Topology::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn butterfly_multicast_delivers_full_stream_to_both_receivers() {
    let topo = fixture_topology("butterfly.topo");
    let maxflow = min_multicast_rate(&topo, 100, &[101, 102]).unwrap();
    assert_eq!(maxflow, 20_000);
    let spec = StreamSpec {
        stream_id: 5,
        source: 100,
        receivers: vec![101, 102],
        rate_bps: maxflow / 2,
        gen_size: 2,
        kind: FunctionKind::ButterflyMulticast,
    };
    let config = compile_butterfly(&topo, &spec).unwrap();
    let mut scenario = Scenario::new(topo, config);
    scenario.seed = 11;
    scenario.hosts = vec![
        HostProcess {
            host: 100,
            role: HostProcessRole::Sender {
                stream_id: 5,
                packets: 40,
                payload_len: 512,
                law: InterPacketLaw::Exponential {
                    rate_bps: maxflow / 2,
                },
            },
        },
        HostProcess {
            host: 101,
            role: HostProcessRole::Receiver { stream_id: 5 },
        },
        HostProcess {
            host: 102,
            role: HostProcessRole::Receiver { stream_id: 5 },
        },
    ];
    let trace = run(&scenario).unwrap();
    let sent = &trace.sent[&(100, 5)];
    for receiver in [101u16, 102] {
        let got = &trace.deliveries[&(receiver, 5)];
        assert_eq!(got.len(), 40, "receiver {receiver}");
        for (d, s) in got.iter().zip(sent) {
            assert_eq!(d.payload, s.payload, "receiver {receiver}");
        }
    }
    // compiled config is closed over the topology
    assert_eq!(trace.total_counter("dropped_unmatched"), 0);
    assert_eq!(trace.total_counter("loop_guarded"), 0);
    // the relay coded every batch
    assert_eq!(trace.counter(4, "coded_batches"), 20);
}

#[test]
fn diversity_under_each_single_failure_is_seamless() {
    let topo = fixture_topology("diversity.topo");
    let spec = StreamSpec {
        stream_id: 7,
        source: 100,
        receivers: vec![101],
        rate_bps: 1_000_000,
        gen_size: 2,
        kind: FunctionKind::Diversity { paths: 3 },
    };
    let config = compile_diversity(&topo, &spec).unwrap();
    for port in [2u16, 3, 4] {
        let mut scenario = Scenario::new(topo.clone(), config.clone());
        scenario.seed = 21;
        scenario.hosts = vec![
            HostProcess {
                host: 100,
                role: HostProcessRole::Sender {
                    stream_id: 7,
                    packets: 60,
                    payload_len: 1024,
                    law: InterPacketLaw::BackToBack,
                },
            },
            HostProcess {
                host: 101,
                role: HostProcessRole::Receiver { stream_id: 7 },
            },
        ];
        scenario.failures = vec![FailureEvent {
            time_ns: 6_000_000,
            node: 1,
            port,
            kind: FailKind::Fail,
        }];
        let trace = run(&scenario).unwrap();
        let got = &trace.deliveries[&(101, 7)];
        let sent = &trace.sent[&(100, 7)];
        assert_eq!(got.len(), 60, "failed port {port}");
        for (d, s) in got.iter().zip(sent) {
            assert_eq!(d.payload, s.payload);
        }
        assert_eq!(trace.total_counter("dropped_unmatched"), 0);
        assert_eq!(trace.total_counter("loop_guarded"), 0);
    }
}
