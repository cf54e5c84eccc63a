//! Remote verification engine.
//!
//! A report is checked in a fixed order: signature, binary digest,
//! challenge freshness, control-flow walk, then return-edge replay with a
//! shadow stack. The first failing check decides the verdict and, for the
//! log checks, the index of the first inconsistent record.
//!
//! The log is interpreted as alternating node-entry and node-exit records
//! in original (pre-instrumentation) addresses. Entries must name node
//! starts reachable over graph edges; exits carry either the terminator's
//! own address (direct, conditional, direct call) or the runtime branch
//! destination (indirect, indirect call, return). A log may end at any
//! pair boundary; a final return record is allowed to leave the program
//! (the top-level return), which is the only point where the shadow stack
//! may be empty on a pop.

use std::collections::HashMap;

use serde::Serialize;

use crate::cfg::{CfgNode, ControlFlowGraph, TerminatorKind};
use crate::runtime::crypto::{signed_message, Digest, PublicKey, CHL_LEN};
use crate::runtime::Report;
use crate::vm::Word;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Accept,
    RejectSignature,
    RejectBinary,
    RejectStale,
    RejectControlFlow,
    RejectReturn,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Accept => "accept",
            Outcome::RejectSignature => "reject_signature",
            Outcome::RejectBinary => "reject_binary",
            Outcome::RejectStale => "reject_stale",
            Outcome::RejectControlFlow => "reject_control_flow",
            Outcome::RejectReturn => "reject_return",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub violation_index: Option<usize>,
    pub detail: String,
}

impl Verdict {
    fn accept() -> Verdict {
        Verdict { outcome: Outcome::Accept, violation_index: None, detail: "all checks passed".into() }
    }

    pub fn accepted(&self) -> bool {
        self.outcome == Outcome::Accept
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.outcome.name())?;
        if let Some(i) = self.violation_index {
            write!(f, " at log index {i}")?;
        }
        write!(f, " ({})", self.detail)
    }
}

/// A control-flow or return violation: index of the first inconsistent
/// log record plus the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub reason: String,
}

impl Violation {
    fn new(index: usize, reason: impl Into<String>) -> Violation {
        Violation { index, reason: reason.into() }
    }
}

/// Single-use challenge ledger. A challenge is accepted at most once.
#[derive(Debug, Clone, Default)]
pub struct NonceLedger {
    issued: HashMap<[u8; CHL_LEN], bool>,
}

impl NonceLedger {
    pub fn issue(&mut self, chl: [u8; CHL_LEN]) {
        self.issued.insert(chl, false);
    }

    fn fresh(&self, chl: &[u8; CHL_LEN]) -> bool {
        matches!(self.issued.get(chl), Some(false))
    }

    fn consume(&mut self, chl: &[u8; CHL_LEN]) {
        if let Some(used) = self.issued.get_mut(chl) {
            *used = true;
        }
    }
}

/// Everything the verifier knows about the expected device state.
#[derive(Debug, Clone)]
pub struct VerificationPolicy {
    pub expected_h_app: Digest,
    pub cfg: ControlFlowGraph,
    pub pk: PublicKey,
    pub nonces: NonceLedger,
}

impl VerificationPolicy {
    pub fn new(expected_h_app: Digest, cfg: ControlFlowGraph, pk: PublicKey) -> VerificationPolicy {
        VerificationPolicy { expected_h_app, cfg, pk, nonces: NonceLedger::default() }
    }

    pub fn issue_challenge(&mut self, chl: [u8; CHL_LEN]) {
        self.nonces.issue(chl);
    }
}

/// Runs every check in order and returns the first failure, or `Accept`.
/// Accepting consumes the challenge.
pub fn verify_report(report: &Report, policy: &mut VerificationPolicy) -> Verdict {
    let msg = signed_message(&report.cflog, &report.h_app, &report.chl, report.out.as_deref());
    if !policy.pk.verify(&msg, &report.sigma) {
        return Verdict {
            outcome: Outcome::RejectSignature,
            violation_index: None,
            detail: "signature does not verify under the device key".into(),
        };
    }
    if report.h_app != policy.expected_h_app {
        return Verdict {
            outcome: Outcome::RejectBinary,
            violation_index: None,
            detail: "application digest differs from the expected binary".into(),
        };
    }
    if !policy.nonces.fresh(&report.chl) {
        return Verdict {
            outcome: Outcome::RejectStale,
            violation_index: None,
            detail: "challenge was not issued or was already used".into(),
        };
    }
    if let Err(v) = walk_cflog(&report.cflog, &policy.cfg) {
        return Verdict {
            outcome: Outcome::RejectControlFlow,
            violation_index: Some(v.index),
            detail: v.reason,
        };
    }
    if let Err(v) = shadow_stack_check(&report.cflog, &policy.cfg) {
        return Verdict {
            outcome: Outcome::RejectReturn,
            violation_index: Some(v.index),
            detail: v.reason,
        };
    }
    policy.nonces.consume(&report.chl);
    Verdict::accept()
}

fn node_at<'c>(cfg: &'c ControlFlowGraph, addr: Word) -> Option<&'c CfgNode> {
    cfg.node_at_start(addr)
}

/// Validates the log against the graph: entry/exit pairing, exit values
/// and edge-respecting transitions.
pub fn walk_cflog(log: &[Word], cfg: &ControlFlowGraph) -> Result<(), Violation> {
    if log.is_empty() {
        return Err(Violation::new(0, "empty log: entry node never entered"));
    }
    let entry_start = cfg.node(cfg.entry).start;
    if log[0] != entry_start {
        return Err(Violation::new(
            0,
            format!("log starts at 0x{:x}, expected entry node 0x{entry_start:x}", log[0]),
        ));
    }
    let mut cur = node_at(cfg, log[0]).expect("entry node exists");
    let mut i = 0usize;
    loop {
        // Nodes without a branching terminator log no exit record; the
        // program stops there.
        if cur.terminator == TerminatorKind::FallthroughToHalt {
            return if i + 1 == log.len() {
                Ok(())
            } else {
                Err(Violation::new(i + 1, "records after a halt node"))
            };
        }
        let Some(&exit) = log.get(i + 1) else {
            return Err(Violation::new(i + 1, "node entered but never exited"));
        };
        if cur.terminator.is_static_exit() && exit != cur.end {
            return Err(Violation::new(
                i + 1,
                format!("exit 0x{exit:x} does not match terminator at 0x{:x}", cur.end),
            ));
        }
        // Log may end at any pair boundary; a final return may leave the
        // program entirely.
        let Some(&next_entry) = log.get(i + 2) else {
            if matches!(cur.terminator, TerminatorKind::Indirect | TerminatorKind::IndirectCall) {
                let ok = node_at(cfg, exit).is_some_and(|m| cfg.has_edge(cur.id, m.id));
                if !ok {
                    return Err(Violation::new(
                        i + 1,
                        format!("indirect destination 0x{exit:x} is not a legal successor"),
                    ));
                }
            }
            return Ok(());
        };
        let Some(next) = node_at(cfg, next_entry) else {
            return Err(Violation::new(
                i + 2,
                format!("entry 0x{next_entry:x} is not a node start"),
            ));
        };
        if cur.terminator.is_dynamic_exit() && exit != next_entry {
            return Err(Violation::new(
                i + 2,
                format!("entry 0x{next_entry:x} differs from logged destination 0x{exit:x}"),
            ));
        }
        if !cfg.has_edge(cur.id, next.id) {
            return Err(Violation::new(
                i + 2,
                format!("no edge from node {} to node {}", cur.id, next.id),
            ));
        }
        cur = next;
        i += 2;
    }
}

/// Replays call and return records against a shadow stack. Call exits push
/// the statically known return site; each return's logged destination must
/// match the most recent unmatched call. The one legal empty-stack pop is
/// a final record: the application's top-level return.
pub fn shadow_stack_check(log: &[Word], cfg: &ControlFlowGraph) -> Result<(), Violation> {
    let mut stack: Vec<Word> = Vec::new();
    let mut i = 0usize;
    while i < log.len() {
        let Some(cur) = node_at(cfg, log[i]) else {
            return Err(Violation::new(i, format!("entry 0x{:x} is not a node start", log[i])));
        };
        let Some(&exit) = log.get(i + 1) else { break };
        match cur.terminator {
            TerminatorKind::DirectCall | TerminatorKind::IndirectCall => {
                stack.push(cur.follow());
            }
            TerminatorKind::Return => {
                match stack.pop() {
                    Some(expected) => {
                        if exit != expected {
                            return Err(Violation::new(
                                i + 1,
                                format!(
                                    "return to 0x{exit:x} but the matching call site expects 0x{expected:x}"
                                ),
                            ));
                        }
                    }
                    None => {
                        let is_final = i + 2 == log.len();
                        if !is_final {
                            return Err(Violation::new(
                                i + 1,
                                "return with an empty shadow stack",
                            ));
                        }
                        // top-level return: destination leaves the program
                    }
                }
            }
            _ => {}
        }
        i += 2;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::{CfgEdge, CfgNode, EdgeKind};

    /// Six-node graph with a conditional split, two straight chains and a
    /// join before the final return. There is deliberately no edge from
    /// node 5 back to node 1.
    pub fn six_node_graph() -> ControlFlowGraph {
        let starts = [0x4000u32, 0x4100, 0x4200, 0x4300, 0x4400, 0x4500];
        let nodes = vec![
            CfgNode { id: 0, start: starts[0], end: starts[0] + 0x20, terminator: TerminatorKind::Conditional },
            CfgNode { id: 1, start: starts[1], end: starts[1] + 0x20, terminator: TerminatorKind::Direct },
            CfgNode { id: 2, start: starts[2], end: starts[2] + 0x20, terminator: TerminatorKind::Direct },
            CfgNode { id: 3, start: starts[3], end: starts[3] + 0x20, terminator: TerminatorKind::Return },
            CfgNode { id: 4, start: starts[4], end: starts[4] + 0x20, terminator: TerminatorKind::Direct },
            CfgNode { id: 5, start: starts[5], end: starts[5] + 0x20, terminator: TerminatorKind::Direct },
        ];
        let edges = vec![
            CfgEdge { from: 0, to: 1, kind: EdgeKind::Fallthrough },
            CfgEdge { from: 0, to: 2, kind: EdgeKind::Taken },
            CfgEdge { from: 1, to: 4, kind: EdgeKind::Taken },
            CfgEdge { from: 2, to: 5, kind: EdgeKind::Taken },
            CfgEdge { from: 4, to: 3, kind: EdgeKind::Taken },
            CfgEdge { from: 5, to: 3, kind: EdgeKind::Taken },
        ];
        ControlFlowGraph { nodes, edges, entry: 0 }
    }

    fn pair(n: &CfgNode) -> [Word; 2] {
        [n.start, n.end]
    }

    #[test]
    fn valid_walk_accepted() {
        let g = six_node_graph();
        let mut log = Vec::new();
        for id in [0usize, 2, 5, 3] {
            log.extend_from_slice(&pair(g.node(id)));
        }
        // final return leaves the program: destination arbitrary
        let n = log.len();
        log[n - 1] = 0xdead_0000;
        assert_eq!(walk_cflog(&log, &g), Ok(()));
        assert_eq!(shadow_stack_check(&log, &g), Ok(()));
    }

    #[test]
    fn illegal_transition_localized_at_entry_record() {
        let g = six_node_graph();
        let mut log = Vec::new();
        // 0 -> 2 -> 5 -> 1 (no edge 5 -> 1) -> 4 -> 3
        for id in [0usize, 2, 5, 1, 4, 3] {
            log.extend_from_slice(&pair(g.node(id)));
        }
        let v = walk_cflog(&log, &g).unwrap_err();
        assert_eq!(v.index, 6);
    }

    #[test]
    fn structural_violations() {
        let g = six_node_graph();
        assert_eq!(walk_cflog(&[], &g).unwrap_err().index, 0);
        // wrong first entry
        assert_eq!(walk_cflog(&[g.node(1).start], &g).unwrap_err().index, 0);
        // entered but never exited
        assert_eq!(walk_cflog(&[g.node(0).start], &g).unwrap_err().index, 1);
        // wrong static exit value
        let log = [g.node(0).start, g.node(0).start];
        assert_eq!(walk_cflog(&log, &g).unwrap_err().index, 1);
        // entry that is no node
        let log = [g.node(0).start, g.node(0).end, 0x9999, 0x9999];
        assert_eq!(walk_cflog(&log, &g).unwrap_err().index, 2);
    }

    fn call_graph() -> ControlFlowGraph {
        // 0: calls fn(3); 1: return site, calls fn again; 2: halt
        // 3: fn body, returns
        let nodes = vec![
            CfgNode { id: 0, start: 0x4000, end: 0x4010, terminator: TerminatorKind::DirectCall },
            CfgNode { id: 1, start: 0x4014, end: 0x4020, terminator: TerminatorKind::DirectCall },
            CfgNode { id: 2, start: 0x4024, end: 0x4030, terminator: TerminatorKind::FallthroughToHalt },
            CfgNode { id: 3, start: 0x4100, end: 0x4110, terminator: TerminatorKind::Return },
        ];
        let edges = vec![
            CfgEdge { from: 0, to: 3, kind: EdgeKind::Call },
            CfgEdge { from: 1, to: 3, kind: EdgeKind::Call },
            CfgEdge { from: 3, to: 1, kind: EdgeKind::Return },
            CfgEdge { from: 3, to: 2, kind: EdgeKind::Return },
        ];
        ControlFlowGraph { nodes, edges, entry: 0 }
    }

    #[test]
    fn matching_returns_accepted() {
        let g = call_graph();
        let log = [
            0x4000, 0x4010, // call
            0x4100, 0x4014, // fn returns to follow of first call
            0x4014, 0x4020, // call again
            0x4100, 0x4024, // returns to follow of second call
            0x4024, // halt node entry, no exit record
        ];
        assert_eq!(walk_cflog(&log, &g), Ok(()));
        assert_eq!(shadow_stack_check(&log, &g), Ok(()));
    }

    #[test]
    fn cross_matched_return_rejected_by_shadow_only() {
        let g = call_graph();
        // fn returns to the follow of the *second* call site, a valid node
        // start with a legal return edge, but not the pending one.
        let log = [0x4000, 0x4010, 0x4100, 0x4024, 0x4024];
        assert_eq!(walk_cflog(&log, &g), Ok(()));
        let v = shadow_stack_check(&log, &g).unwrap_err();
        assert_eq!(v.index, 3);
    }

    #[test]
    fn empty_stack_pop_only_legal_as_final_record() {
        let g = call_graph();
        // a return pair appearing first: empty-stack pop mid-log
        let log = [0x4000, 0x4010, 0x4100, 0x4014, 0x4014, 0x4020, 0x4100, 0x9999, 0x4024];
        // index 7: return while one call is pending, wrong destination
        let v = shadow_stack_check(&log, &g).unwrap_err();
        assert_eq!(v.index, 7);
    }

    #[test]
    fn nested_calls_unwind_lifo() {
        // Three calls deep, then three returns popping in reverse order.
        let nodes = vec![
            CfgNode { id: 0, start: 0x4000, end: 0x4004, terminator: TerminatorKind::DirectCall },
            CfgNode { id: 1, start: 0x4100, end: 0x4104, terminator: TerminatorKind::DirectCall },
            CfgNode { id: 2, start: 0x4200, end: 0x4204, terminator: TerminatorKind::DirectCall },
            CfgNode { id: 3, start: 0x4300, end: 0x4304, terminator: TerminatorKind::Return },
            CfgNode { id: 4, start: 0x4208, end: 0x420c, terminator: TerminatorKind::Return },
            CfgNode { id: 5, start: 0x4108, end: 0x410c, terminator: TerminatorKind::Return },
            CfgNode { id: 6, start: 0x4008, end: 0x400c, terminator: TerminatorKind::Return },
        ];
        let mut edges = vec![
            CfgEdge { from: 0, to: 1, kind: EdgeKind::Call },
            CfgEdge { from: 1, to: 2, kind: EdgeKind::Call },
            CfgEdge { from: 2, to: 3, kind: EdgeKind::Call },
        ];
        // return edges over-approximate to every call-follow site
        for from in [3usize, 4, 5, 6] {
            for to in [4usize, 5, 6] {
                edges.push(CfgEdge { from, to, kind: EdgeKind::Return });
            }
        }
        let g = ControlFlowGraph { nodes, edges, entry: 0 };
        let log = [
            0x4000, 0x4004, // call, pushes 0x4008
            0x4100, 0x4104, // call, pushes 0x4108
            0x4200, 0x4204, // call, pushes 0x4208
            0x4300, 0x4208, // depth-3 return
            0x4208, 0x4108, // depth-2 return
            0x4108, 0x4008, // depth-1 return
            0x4008, 0xffff_0000, // top-level return leaves the program
        ];
        assert_eq!(walk_cflog(&log, &g), Ok(()));
        assert_eq!(shadow_stack_check(&log, &g), Ok(()));
        // unwinding through the return sites in the wrong order follows
        // legal edges, so only the replay catches it
        let bad = [
            0x4000, 0x4004, 0x4100, 0x4104, 0x4200, 0x4204, //
            0x4300, 0x4108, // should have returned to 0x4208
            0x4108, 0x4208, //
            0x4208, 0x4008, //
            0x4008, 0xffff_0000,
        ];
        assert!(walk_cflog(&bad, &g).is_ok());
        assert_eq!(shadow_stack_check(&bad, &g).unwrap_err().index, 7);
    }
}
