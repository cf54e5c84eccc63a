//! Acceptance suite. One test per criterion; each prints a pass line with
//! the measured numbers (run with `--nocapture` to see them).

mod common;

use std::collections::HashSet;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::{log_pair, six_node_graph};
use iscflat::cfg::{extract_cfg, CfgEdge, CfgNode, ControlFlowGraph, EdgeKind, TerminatorKind};
use iscflat::harness::{self, corpus, ActualKind};
use iscflat::instrument::{instrument, InstrumentConfig};
use iscflat::overhead;
use iscflat::protocol::wire::{
    decode_report, encode_report, encode_request, read_frame, write_frame, AttestationRequest,
    Frame,
};
use iscflat::protocol::{self, ProverConfig, SessionOutcome};
use iscflat::runtime::crypto::{hash, KeyMaterial, CHL_LEN};
use iscflat::runtime::device::{Device, DeviceConfig, SessionEnd};
use iscflat::runtime::{AttestMode, OutSource};
use iscflat::synth::{isr_base, random_app, random_isr, random_schedule, AppShape};
use iscflat::verifier::{
    shadow_stack_check, verify_report, walk_cflog, Outcome, VerificationPolicy,
};
use iscflat::vm::Word;

fn keys(seed: u64) -> KeyMaterial {
    KeyMaterial::generate(&mut ChaCha20Rng::seed_from_u64(seed))
}

/// Criterion 1: on the six-node topology the valid walk is accepted and
/// the illegal transition is rejected at the first bad entry record.
#[test]
fn criterion_1_six_node_topology() {
    let g = six_node_graph();
    let mut valid = Vec::new();
    for id in [0usize, 2, 5, 3] {
        valid.extend_from_slice(&log_pair(&g, id));
    }
    // final return leaves the program
    let n = valid.len();
    valid[n - 1] = 0xffff_0000;
    let mut invalid = Vec::new();
    for id in [0usize, 2, 5, 1, 4, 3] {
        invalid.extend_from_slice(&log_pair(&g, id));
    }
    let n = invalid.len();
    invalid[n - 1] = 0xffff_0000;

    assert_eq!(walk_cflog(&valid, &g), Ok(()));
    assert_eq!(shadow_stack_check(&valid, &g), Ok(()));
    let violation = walk_cflog(&invalid, &g).unwrap_err();
    assert_eq!(violation.index, 6, "first bad record is the node-1 entry");

    // the same verdicts through full report verification
    let keys = keys(1);
    let h_app = hash(b"six-node demo");
    let make_report = |log: &[Word], chl: [u8; CHL_LEN]| iscflat::runtime::Report {
        sigma: keys.sign(&iscflat::runtime::crypto::signed_message(log, &h_app, &chl, None)),
        cflog: log.to_vec(),
        h_app,
        chl,
        out: None,
    };
    let mut policy = VerificationPolicy::new(h_app, g.clone(), keys.public_key());
    policy.issue_challenge([1; CHL_LEN]);
    policy.issue_challenge([2; CHL_LEN]);
    let ok = verify_report(&make_report(&valid, [1; CHL_LEN]), &mut policy);
    assert!(ok.accepted(), "{ok}");
    let bad = verify_report(&make_report(&invalid, [2; CHL_LEN]), &mut policy);
    assert_eq!(bad.outcome, Outcome::RejectControlFlow);
    assert_eq!(bad.violation_index, Some(6));
    println!(
        "criterion 1 PASS: valid path accepted; illegal transition rejected at record {}",
        violation.index
    );
}

/// Criterion 2: the hijack scenarios in baseline mode produce logs
/// byte-identical to the benign run while the executed paths differ.
#[test]
fn criterion_2_baseline_unreliability() {
    let built = corpus::build(2).unwrap();
    let by_name = |name: &str| {
        built
            .scenarios
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("scenario {name}"))
    };
    let benign = harness::run_scenario(by_name("benign-interrupt-baseline"), &built.keys).unwrap();
    let benign_log = benign.actual.cflog.clone().expect("benign log");
    for name in ["retaddr-hijack-baseline", "gadget-chain-baseline"] {
        let r = harness::run_scenario(by_name(name), &built.keys).unwrap();
        assert!(r.passed, "{name}: {}", r.actual.detail);
        let log = r.actual.cflog.clone().expect("attack log");
        assert_eq!(
            iscflat::runtime::crypto::cflog_bytes(&log),
            iscflat::runtime::crypto::cflog_bytes(&benign_log),
            "{name}: log must be byte-identical to the benign run"
        );
        assert_ne!(r.actual.app_path, benign.actual.app_path, "{name}: executed paths must differ");
        assert_eq!(r.actual.kind, ActualKind::AcceptedUnreliable);
    }
    println!(
        "criterion 2 PASS: both baseline hijacks logged {} identical bytes with diverging traces",
        benign_log.len() * 4
    );
}

/// Criterion 3: with the interrupt-safety module on, no attack scenario is
/// ever accepted; the benign scenario is.
#[test]
fn criterion_3_interrupt_safe_soundness() {
    let built = corpus::build(3).unwrap();
    let results = harness::run_corpus(&built.scenarios, &built.keys).unwrap();
    let mut attacks = 0;
    for r in &results {
        assert!(r.passed, "{}: expected {:?}, got {} ({})",
            r.name, r.expected, r.actual.kind.label(), r.actual.detail);
        if r.mode == AttestMode::IscFlat && !r.name.starts_with("benign") {
            attacks += 1;
            assert!(!r.actual.kind.is_accept(), "{} was accepted", r.name);
        }
        if r.name == "benign-interrupt" {
            assert_eq!(r.actual.kind, ActualKind::Accepted);
        }
    }
    assert!(attacks >= 9, "only {attacks} attack scenarios");
    println!("criterion 3 PASS: {attacks} attack scenarios, zero accepted; benign accepted");
}

/// Criterion 4: for seeded random (program, well-behaved handler,
/// schedule) triples, the log with interrupts equals the log without.
#[test]
fn criterion_4_benign_interrupt_equivalence() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let trials = 100;
    let mut interrupted_runs = 0;
    for trial in 0..trials {
        let app = random_app(&mut rng, AppShape::default());
        let cfg = extract_cfg(&app).expect("generated apps extract");
        let ins = instrument(&app, &cfg, InstrumentConfig::default()).expect("instruments");
        let keys = keys(1000 + trial);

        // interrupt-free reference
        let mut device =
            Device::new(DeviceConfig::new(ins.to_image(), keys.clone(), AttestMode::IscFlat))
                .unwrap();
        let base = device.attest([trial as u8; CHL_LEN]).unwrap();
        let SessionEnd::Report(base_report) = base.end else {
            panic!("trial {trial}: reference run produced no report");
        };

        let horizon = device.machine.retired.saturating_sub(2).max(2);
        let (schedule, priorities) = random_schedule(&mut rng, horizon, 4);
        let mut config = DeviceConfig::new(ins.to_image(), keys, AttestMode::IscFlat);
        for (i, _) in schedule.iter().enumerate() {
            let max_len = 16;
            config.isrs.push((
                schedule[i].1,
                random_isr(&mut rng, isr_base(i), max_len),
            ));
        }
        interrupted_runs += schedule.len();
        config.schedule = schedule;
        config.priorities = priorities;
        let mut device = Device::new(config).unwrap();
        let run = device.attest([trial as u8; CHL_LEN]).unwrap();
        let SessionEnd::Report(report) = run.end else {
            panic!("trial {trial}: interrupted run produced no report: {:?}", run.end);
        };
        assert_eq!(report.cflog, base_report.cflog, "trial {trial}: logs differ");
    }
    println!(
        "criterion 4 PASS: {trials}/{trials} random triples log-equivalent \
         ({interrupted_runs} interrupts total)"
    );
}

/// Criterion 5: every single-bit flip of a serialized benign report is
/// rejected.
#[test]
fn criterion_5_report_tamper_rejection() {
    let (_, cfg, ins) = common::demo_instrumented();
    let keys = keys(5);
    let mut config = DeviceConfig::new(ins.to_image(), keys.clone(), AttestMode::IscFlat);
    config.out = OutSource::R0;
    let mut device = Device::new(config).unwrap();
    let chl = [5u8; CHL_LEN];
    let result = device.attest(chl).unwrap();
    let SessionEnd::Report(report) = result.end else { panic!("no report") };
    let frame = encode_report(&report);
    let expected_h_app = hash(&ins.to_image().code);

    // sanity: the unmodified frame verifies
    {
        let mut policy = VerificationPolicy::new(expected_h_app, cfg.clone(), keys.public_key());
        policy.issue_challenge(chl);
        let decoded = decode_report(&frame).unwrap();
        assert!(verify_report(&decoded, &mut policy).accepted());
    }

    let mut rng = ChaCha20Rng::seed_from_u64(55);
    let flips = 1000;
    let mut rejected = 0;
    for _ in 0..flips {
        let bit = rng.gen_range(0..frame.len() * 8);
        let mut tampered = frame.clone();
        tampered[bit / 8] ^= 1 << (bit % 8);
        let ok = match decode_report(&tampered) {
            Err(_) => false,
            Ok(report) => {
                let mut policy =
                    VerificationPolicy::new(expected_h_app, cfg.clone(), keys.public_key());
                policy.issue_challenge(chl);
                verify_report(&report, &mut policy).accepted()
            }
        };
        assert!(!ok, "bit {bit} accepted after flip");
        rejected += 1;
    }
    assert_eq!(rejected, flips);
    println!("criterion 5 PASS: {rejected}/{flips} single-bit flips rejected");
}

// ---- criterion 6: brute-force oracle ----

/// Every log accepted by a valid execution of the graph, enumerated
/// exhaustively with a replayed call stack. Logs may end at any pair
/// boundary; a final top-level return has an unconstrained destination
/// (stored as a prefix in `wildcard_prefix`).
struct LogUniverse {
    complete: HashSet<Vec<Word>>,
    wildcard_prefix: HashSet<Vec<Word>>,
}

impl LogUniverse {
    fn accepts(&self, log: &[Word]) -> bool {
        if self.complete.contains(log) {
            return true;
        }
        !log.is_empty() && self.wildcard_prefix.contains(&log[..log.len() - 1])
    }
}

fn enumerate_logs(cfg: &ControlFlowGraph, max_pairs: usize) -> LogUniverse {
    let mut u = LogUniverse { complete: HashSet::new(), wildcard_prefix: HashSet::new() };
    let mut log = Vec::new();
    let mut stack = Vec::new();
    enumerate_from(cfg, cfg.entry, &mut log, &mut stack, max_pairs, &mut u);
    u
}

fn enumerate_from(
    cfg: &ControlFlowGraph,
    node_id: usize,
    log: &mut Vec<Word>,
    stack: &mut Vec<Word>,
    pairs_left: usize,
    u: &mut LogUniverse,
) {
    if pairs_left == 0 || u.complete.len() > 400_000 {
        return;
    }
    let n = *cfg.node(node_id);
    log.push(n.start);
    match n.terminator {
        TerminatorKind::FallthroughToHalt => {
            u.complete.insert(log.clone());
        }
        TerminatorKind::Direct | TerminatorKind::Conditional => {
            log.push(n.end);
            u.complete.insert(log.clone());
            for e in cfg.successors(node_id) {
                enumerate_from(cfg, e.to, log, stack, pairs_left - 1, u);
            }
            log.pop();
        }
        TerminatorKind::DirectCall => {
            log.push(n.end);
            u.complete.insert(log.clone());
            for e in cfg.successors(node_id) {
                stack.push(n.follow());
                enumerate_from(cfg, e.to, log, stack, pairs_left - 1, u);
                stack.pop();
            }
            log.pop();
        }
        TerminatorKind::Indirect | TerminatorKind::IndirectCall => {
            let is_call = n.terminator == TerminatorKind::IndirectCall;
            let succ: Vec<usize> = cfg.successors(node_id).map(|e| e.to).collect();
            for to in succ {
                let dest = cfg.node(to).start;
                log.push(dest);
                u.complete.insert(log.clone());
                if is_call {
                    stack.push(n.follow());
                }
                enumerate_from(cfg, to, log, stack, pairs_left - 1, u);
                if is_call {
                    stack.pop();
                }
                log.pop();
            }
        }
        TerminatorKind::Return => match stack.last().copied() {
            None => {
                // top-level return: any destination ends the log
                u.wildcard_prefix.insert(log.clone());
            }
            Some(site) => {
                // ending here is legal with exactly the pending site
                log.push(site);
                u.complete.insert(log.clone());
                // continuing requires the site to be a legal successor
                if let Some(next) = cfg.node_at_start(site) {
                    if cfg.has_edge(node_id, next.id) {
                        let next_id = next.id;
                        stack.pop();
                        enumerate_from(cfg, next_id, log, stack, pairs_left - 1, u);
                        stack.push(site);
                    }
                }
                log.pop();
            }
        },
    }
    log.pop();
}

/// Random small graph with a contiguous layout so every call's return
/// site is the next node's start.
fn random_cfg(rng: &mut ChaCha20Rng) -> ControlFlowGraph {
    let n = rng.gen_range(3..=6);
    let mut nodes: Vec<CfgNode> = Vec::new();
    let mut start = 0x4000u32;
    for id in 0..n {
        let end = start + rng.gen_range(0..4) * 4;
        nodes.push(CfgNode { id, start, end, terminator: TerminatorKind::FallthroughToHalt });
        start = end + 4;
    }
    for id in 0..n {
        let terminator = if id + 1 == n {
            [TerminatorKind::Return, TerminatorKind::FallthroughToHalt][rng.gen_range(0..2)]
        } else {
            [
                TerminatorKind::Direct,
                TerminatorKind::Conditional,
                TerminatorKind::DirectCall,
                TerminatorKind::Indirect,
                TerminatorKind::IndirectCall,
                TerminatorKind::Return,
            ][rng.gen_range(0..6)]
        };
        nodes[id].terminator = terminator;
    }
    let call_follows: Vec<usize> = (0..n)
        .filter(|&i| nodes[i].terminator.is_call() && i + 1 < n)
        .map(|i| i + 1)
        .collect();
    let mut edges = Vec::new();
    for id in 0..n {
        let mut any = |rng: &mut ChaCha20Rng| rng.gen_range(0..n);
        match nodes[id].terminator {
            TerminatorKind::Direct => {
                edges.push(CfgEdge { from: id, to: any(rng), kind: EdgeKind::Taken });
            }
            TerminatorKind::Conditional => {
                edges.push(CfgEdge { from: id, to: any(rng), kind: EdgeKind::Taken });
                edges.push(CfgEdge { from: id, to: id + 1, kind: EdgeKind::Fallthrough });
            }
            TerminatorKind::DirectCall => {
                edges.push(CfgEdge { from: id, to: any(rng), kind: EdgeKind::Call });
            }
            TerminatorKind::Indirect => {
                for _ in 0..rng.gen_range(1..=2) {
                    edges.push(CfgEdge { from: id, to: any(rng), kind: EdgeKind::Taken });
                }
            }
            TerminatorKind::IndirectCall => {
                for _ in 0..rng.gen_range(1..=2) {
                    edges.push(CfgEdge { from: id, to: any(rng), kind: EdgeKind::Call });
                }
            }
            TerminatorKind::Return => {
                for &to in &call_follows {
                    edges.push(CfgEdge { from: id, to, kind: EdgeKind::Return });
                }
            }
            TerminatorKind::FallthroughToHalt => {}
        }
    }
    edges.sort_by_key(|e| (e.from, e.to, e.kind as usize));
    edges.dedup();
    ControlFlowGraph { nodes, edges, entry: 0 }
}

/// Criterion 6: walk plus shadow-stack verdicts match the brute-force
/// enumeration oracle on synthetic logs.
#[test]
fn criterion_6_oracle_equivalence() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut checked = 0usize;
    let mut valid_seen = 0usize;
    let max_pairs = 12;
    while checked < 500 {
        let cfg = random_cfg(&mut rng);
        let universe = enumerate_logs(&cfg, max_pairs);
        if universe.complete.is_empty() && universe.wildcard_prefix.is_empty() {
            continue;
        }
        let valid_pool: Vec<Vec<Word>> = universe.complete.iter().take(200).cloned().collect();
        let addr_pool: Vec<Word> = cfg
            .nodes
            .iter()
            .flat_map(|n| [n.start, n.end])
            .chain([0x9999, 0x4002])
            .collect();

        for _ in 0..25 {
            let log: Vec<Word> = match rng.gen_range(0..4) {
                // untouched valid log
                0 if !valid_pool.is_empty() => {
                    valid_seen += 1;
                    valid_pool[rng.gen_range(0..valid_pool.len())].clone()
                }
                // single-record mutation of a valid log
                1 if !valid_pool.is_empty() => {
                    let mut l = valid_pool[rng.gen_range(0..valid_pool.len())].clone();
                    let i = rng.gen_range(0..l.len());
                    l[i] = addr_pool[rng.gen_range(0..addr_pool.len())];
                    l
                }
                // truncation
                2 if !valid_pool.is_empty() => {
                    let l = valid_pool[rng.gen_range(0..valid_pool.len())].clone();
                    let cut = rng.gen_range(0..=l.len());
                    l[..cut].to_vec()
                }
                // fully random record sequence
                _ => {
                    let len = rng.gen_range(0..=2 * max_pairs);
                    (0..len).map(|_| addr_pool[rng.gen_range(0..addr_pool.len())]).collect()
                }
            };
            if log.len() > 2 * max_pairs {
                continue;
            }
            let impl_accepts =
                walk_cflog(&log, &cfg).is_ok() && shadow_stack_check(&log, &cfg).is_ok();
            let oracle_accepts = universe.accepts(&log);
            assert_eq!(
                impl_accepts, oracle_accepts,
                "divergence on {log:x?}\ncfg:\n{}",
                cfg.to_text()
            );
            checked += 1;
        }
    }
    println!(
        "criterion 6 PASS: {checked} synthetic logs matched the enumeration oracle \
         ({valid_seen} known-valid)"
    );
}

/// Criterion 7: per-gate cost is an exact constant and the dispatcher's
/// interrupt cost does not depend on handler length.
#[test]
fn criterion_7_overhead_structure() {
    let samples = 100;
    let gates = overhead::gate_cost_suite(7, samples).unwrap();
    assert_eq!(gates.len(), samples);
    for g in &gates {
        assert_eq!(g.residual, 0, "{g:?}");
    }
    let summary = overhead::measure(7, samples).unwrap();
    assert!(summary.dispatch_variance_zero, "{summary:?}");
    assert!(summary.dispatcher_latency > summary.baseline_latency);
    println!(
        "criterion 7 PASS: gate cost k=({} entry, {} dest) instructions over {} samples, \
         zero residual; interrupt latency {} -> {} and backtrip {} -> {} events, zero variance",
        summary.entry_gate_cost,
        summary.dest_gate_cost,
        samples,
        summary.baseline_latency,
        summary.dispatcher_latency,
        summary.baseline_backtrip,
        summary.dispatcher_backtrip,
    );
}

/// Criterion 8: live protocol round trip with replay and concurrency.
#[test]
fn criterion_8_protocol_round_trip() {
    let app = common::long_running_app(1200, 2500);
    let cfg = extract_cfg(&app).unwrap();
    let ins = instrument(&app, &cfg, InstrumentConfig::default()).unwrap();
    let image = ins.to_image();
    let keys = keys(8);
    let app_id = [8u8; 16];

    let mut device = DeviceConfig::new(image.clone(), keys.clone(), AttestMode::IscFlat);
    device.cflog_capacity = 64 * 1024;
    device.max_steps = 50_000_000;
    device.trace = false;
    let prover = protocol::spawn_prover("127.0.0.1:0", ProverConfig::single(app_id, device))
        .expect("bind prover");
    let addr = prover.addr;

    let expected_h_app = hash(&image.code);
    let pk = keys.public_key();
    let policy = || VerificationPolicy::new(expected_h_app, cfg.clone(), pk);

    // Session 1 over raw frames so the report bytes are available for the
    // replay check.
    let report_frame = {
        use std::net::TcpStream;
        let mut stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        let chl = [21u8; CHL_LEN];
        write_frame(&mut stream, &encode_request(&AttestationRequest { chl, app_id })).unwrap();
        let frame = read_frame(&mut stream).unwrap();
        let Frame::Report(report) = iscflat::protocol::wire::decode_frame(&frame).unwrap() else {
            panic!("expected a report frame");
        };
        let mut p = policy();
        p.issue_challenge(chl);
        assert!(verify_report(&report, &mut p).accepted(), "benign session accepted");
        // replaying the same report is stale
        let second = verify_report(&report, &mut p);
        assert_eq!(second.outcome, Outcome::RejectStale);
        frame
    };
    assert!(decode_report(&report_frame).is_ok());

    // Session 2: a long session runs while a second client knocks.
    let addr2 = addr;
    let cfg2 = cfg.clone();
    let worker = std::thread::spawn(move || {
        let mut p = VerificationPolicy::new(expected_h_app, cfg2, pk);
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        protocol::verifier_request(addr2, app_id, &mut p, &mut rng, Duration::from_secs(30))
            .expect("session completes")
    });
    let mut saw_busy = false;
    let mut rng = ChaCha20Rng::seed_from_u64(89);
    for _ in 0..200 {
        if worker.is_finished() {
            break;
        }
        let mut p = policy();
        match protocol::verifier_request(addr, app_id, &mut p, &mut rng, Duration::from_secs(30)) {
            Ok(SessionOutcome::Busy) => {
                saw_busy = true;
                break;
            }
            Ok(_) => std::thread::sleep(Duration::from_millis(1)),
            Err(e) => panic!("probe failed: {e}"),
        }
    }
    let first = worker.join().unwrap();
    assert!(first.accepted(), "long session accepted: {first:?}");
    assert!(saw_busy, "no concurrent request observed a busy prover");

    prover.shutdown();
    println!("criterion 8 PASS: accept, replay->stale, concurrent session->busy");
}
