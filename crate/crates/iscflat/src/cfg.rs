//! Control-flow graph extraction.
//!
//! Nodes are maximal runs of non-branching instructions terminated by a
//! control transfer (or by `halt`). Leaders are the program entry, the
//! targets of direct branches, and the addresses following branching
//! instructions. A direct branch into the middle of a block is rejected;
//! well-formed programs place branch targets at leader positions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use crate::vm::inst::{Instruction, Operand, Program, INSTR_SIZE};
use crate::vm::Word;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum CfgError {
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("cannot relocate target 0x{0:x}")]
    RelocationError(Word),
    #[error("unknown address 0x{0:x}")]
    UnknownAddress(Word),
    #[error("malformed cfg text: line {0}: {1}")]
    Format(usize, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminatorKind {
    Direct,
    Conditional,
    DirectCall,
    Indirect,
    IndirectCall,
    Return,
    FallthroughToHalt,
}

impl TerminatorKind {
    pub fn name(self) -> &'static str {
        match self {
            TerminatorKind::Direct => "direct",
            TerminatorKind::Conditional => "conditional",
            TerminatorKind::DirectCall => "direct_call",
            TerminatorKind::Indirect => "indirect",
            TerminatorKind::IndirectCall => "indirect_call",
            TerminatorKind::Return => "return",
            TerminatorKind::FallthroughToHalt => "halt",
        }
    }

    fn from_name(s: &str) -> Option<TerminatorKind> {
        Some(match s {
            "direct" => TerminatorKind::Direct,
            "conditional" => TerminatorKind::Conditional,
            "direct_call" => TerminatorKind::DirectCall,
            "indirect" => TerminatorKind::Indirect,
            "indirect_call" => TerminatorKind::IndirectCall,
            "return" => TerminatorKind::Return,
            "halt" => TerminatorKind::FallthroughToHalt,
            _ => return None,
        })
    }

    /// Exit gates for these kinds log the terminator's own address.
    pub fn is_static_exit(self) -> bool {
        matches!(
            self,
            TerminatorKind::Direct | TerminatorKind::Conditional | TerminatorKind::DirectCall
        )
    }

    /// Exit gates for these kinds log the runtime destination.
    pub fn is_dynamic_exit(self) -> bool {
        matches!(
            self,
            TerminatorKind::Indirect | TerminatorKind::IndirectCall | TerminatorKind::Return
        )
    }

    pub fn is_call(self) -> bool {
        matches!(self, TerminatorKind::DirectCall | TerminatorKind::IndirectCall)
    }
}

pub type NodeId = usize;

/// A basic block. Instructions in `[start, end)` are non-branching; `end`
/// holds the terminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CfgNode {
    pub id: NodeId,
    pub start: Word,
    pub end: Word,
    pub terminator: TerminatorKind,
}

impl CfgNode {
    /// Address following the terminator.
    pub fn follow(&self) -> Word {
        self.end + INSTR_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Taken,
    Fallthrough,
    Call,
    Return,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Taken => "taken",
            EdgeKind::Fallthrough => "fallthrough",
            EdgeKind::Call => "call",
            EdgeKind::Return => "return",
        }
    }

    fn from_name(s: &str) -> Option<EdgeKind> {
        Some(match s {
            "taken" => EdgeKind::Taken,
            "fallthrough" => EdgeKind::Fallthrough,
            "call" => EdgeKind::Call,
            "return" => EdgeKind::Return,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CfgEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlFlowGraph {
    pub nodes: Vec<CfgNode>,
    pub edges: Vec<CfgEdge>,
    pub entry: NodeId,
}

impl ControlFlowGraph {
    pub fn node_at_start(&self, addr: Word) -> Option<&CfgNode> {
        self.nodes.iter().find(|n| n.start == addr)
    }

    pub fn node(&self, id: NodeId) -> &CfgNode {
        &self.nodes[id]
    }

    pub fn edge_set(&self) -> HashSet<(NodeId, NodeId)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    pub fn successors(&self, from: NodeId) -> impl Iterator<Item = &CfgEdge> {
        self.edges.iter().filter(move |e| e.from == from)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("cfg v1\n");
        out.push_str(&format!("entry {}\n", self.entry));
        for n in &self.nodes {
            out.push_str(&format!(
                "node {} 0x{:x} 0x{:x} {}\n",
                n.id,
                n.start,
                n.end,
                n.terminator.name()
            ));
        }
        for e in &self.edges {
            out.push_str(&format!("edge {} {} {}\n", e.from, e.to, e.kind.name()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ControlFlowGraph, CfgError> {
        let mut entry = None;
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut seen_header = false;
        let parse_word = |tok: &str, ln: usize| -> Result<Word, CfgError> {
            let t = tok.trim();
            let r = if let Some(h) = t.strip_prefix("0x") {
                Word::from_str_radix(h, 16)
            } else {
                t.parse::<Word>()
            };
            r.map_err(|e| CfgError::Format(ln, e.to_string()))
        };
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "cfg" => {
                    if toks.get(1) != Some(&"v1") {
                        return Err(CfgError::Format(ln, "unsupported version".into()));
                    }
                    seen_header = true;
                }
                "entry" => {
                    let id = toks
                        .get(1)
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| CfgError::Format(ln, "bad entry id".into()))?;
                    entry = Some(id);
                }
                "node" => {
                    if toks.len() != 5 {
                        return Err(CfgError::Format(ln, "node needs id start end kind".into()));
                    }
                    let id = toks[1]
                        .parse::<usize>()
                        .map_err(|e| CfgError::Format(ln, e.to_string()))?;
                    let start = parse_word(toks[2], ln)?;
                    let end = parse_word(toks[3], ln)?;
                    let terminator = TerminatorKind::from_name(toks[4])
                        .ok_or_else(|| CfgError::Format(ln, format!("bad kind {}", toks[4])))?;
                    nodes.push(CfgNode { id, start, end, terminator });
                }
                "edge" => {
                    if toks.len() != 4 {
                        return Err(CfgError::Format(ln, "edge needs from to kind".into()));
                    }
                    let from = toks[1]
                        .parse::<usize>()
                        .map_err(|e| CfgError::Format(ln, e.to_string()))?;
                    let to = toks[2]
                        .parse::<usize>()
                        .map_err(|e| CfgError::Format(ln, e.to_string()))?;
                    let kind = EdgeKind::from_name(toks[3])
                        .ok_or_else(|| CfgError::Format(ln, format!("bad kind {}", toks[3])))?;
                    edges.push(CfgEdge { from, to, kind });
                }
                other => return Err(CfgError::Format(ln, format!("unknown key {other}"))),
            }
        }
        if !seen_header {
            return Err(CfgError::Format(0, "missing cfg header".into()));
        }
        let entry = entry.ok_or_else(|| CfgError::Format(0, "missing entry".into()))?;
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(CfgError::Format(0, "node ids must be dense and ordered".into()));
            }
        }
        let g = ControlFlowGraph { nodes, edges, entry };
        if g.entry >= g.nodes.len() {
            return Err(CfgError::Format(0, "entry id out of range".into()));
        }
        if g.edges.iter().any(|e| e.from >= g.nodes.len() || e.to >= g.nodes.len()) {
            return Err(CfgError::Format(0, "edge id out of range".into()));
        }
        Ok(g)
    }
}

impl fmt::Display for ControlFlowGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn terminator_kind(ins: &Instruction) -> Option<TerminatorKind> {
    match ins {
        Instruction::B { .. } => Some(TerminatorKind::Direct),
        Instruction::Bcc { .. } => Some(TerminatorKind::Conditional),
        Instruction::Bl { .. } => Some(TerminatorKind::DirectCall),
        Instruction::Bx { .. } => Some(TerminatorKind::Indirect),
        Instruction::Blx { .. } => Some(TerminatorKind::IndirectCall),
        Instruction::Ret => Some(TerminatorKind::Return),
        Instruction::Halt => Some(TerminatorKind::FallthroughToHalt),
        _ => None,
    }
}

/// Extracts the control-flow graph of a program.
pub fn extract_cfg(program: &Program) -> Result<ControlFlowGraph, CfgError> {
    if program.instrs.is_empty() {
        return Err(CfgError::MalformedProgram("empty program".into()));
    }

    let end = program.end();
    let check_target = |t: Word| -> Result<(), CfgError> {
        if program.index_of(t).is_none() {
            return Err(CfgError::MalformedProgram(format!(
                "branch target 0x{t:x} outside program [0x{:x}, 0x{end:x})",
                program.base
            )));
        }
        Ok(())
    };

    // Leader collection.
    let mut leaders: BTreeSet<Word> = BTreeSet::new();
    leaders.insert(program.base);
    for (i, ins) in program.instrs.iter().enumerate() {
        if matches!(ins, Instruction::NscCall { .. }) {
            return Err(CfgError::MalformedProgram(format!(
                "gateway call at 0x{:x} in source program",
                program.addr_of(i)
            )));
        }
        if let Some(t) = ins.static_target() {
            check_target(t)?;
            leaders.insert(t);
        }
        if ins.is_branch() {
            let follow = program.addr_of(i) + INSTR_SIZE;
            if follow < end {
                leaders.insert(follow);
            }
        }
    }

    // Node construction: leader to next terminator.
    let leader_list: Vec<Word> = leaders.iter().copied().collect();
    let mut nodes = Vec::new();
    for (i, &start) in leader_list.iter().enumerate() {
        let next_leader = leader_list.get(i + 1).copied().unwrap_or(end);
        let mut addr = start;
        let node = loop {
            if addr >= end {
                return Err(CfgError::MalformedProgram(format!(
                    "block at 0x{start:x} runs off the end of the program; \
                     end it with a branch or halt"
                )));
            }
            let ins = program.at(addr).expect("aligned in-range address");
            if let Some(kind) = terminator_kind(ins) {
                if addr >= next_leader {
                    return Err(CfgError::MalformedProgram(format!(
                        "branch target 0x{next_leader:x} splits the block starting at 0x{start:x}"
                    )));
                }
                break CfgNode { id: nodes.len(), start, end: addr, terminator: kind };
            }
            addr += INSTR_SIZE;
        };
        nodes.push(node);
    }

    // Candidate targets for indirect transfers: immediates that name a node
    // start. Other immediates are treated as data.
    let starts: BTreeMap<Word, NodeId> = nodes.iter().map(|n| (n.start, n.id)).collect();
    let mut candidates: BTreeSet<NodeId> = BTreeSet::new();
    for ins in &program.instrs {
        if let Instruction::Mov { src: Operand::Imm(v), .. } = ins {
            if let Some(&id) = starts.get(&Word::from(*v)) {
                candidates.insert(id);
            }
        }
    }

    // Return sites: nodes that start immediately after a call terminator.
    let mut return_sites: BTreeSet<NodeId> = BTreeSet::new();
    for n in &nodes {
        if n.terminator.is_call() {
            if let Some(&id) = starts.get(&n.follow()) {
                return_sites.insert(id);
            }
        }
    }

    let node_for = |addr: Word| -> Result<NodeId, CfgError> {
        starts.get(&addr).copied().ok_or_else(|| {
            CfgError::MalformedProgram(format!("no block starts at 0x{addr:x}"))
        })
    };

    let mut edges = Vec::new();
    for n in &nodes {
        let term = program.at(n.end).expect("terminator in range");
        match n.terminator {
            TerminatorKind::Direct => {
                let t = term.static_target().expect("direct branch target");
                edges.push(CfgEdge { from: n.id, to: node_for(t)?, kind: EdgeKind::Taken });
            }
            TerminatorKind::Conditional => {
                let t = term.static_target().expect("conditional branch target");
                edges.push(CfgEdge { from: n.id, to: node_for(t)?, kind: EdgeKind::Taken });
                if n.follow() < end {
                    edges.push(CfgEdge {
                        from: n.id,
                        to: node_for(n.follow())?,
                        kind: EdgeKind::Fallthrough,
                    });
                }
            }
            TerminatorKind::DirectCall => {
                let t = term.static_target().expect("call target");
                edges.push(CfgEdge { from: n.id, to: node_for(t)?, kind: EdgeKind::Call });
            }
            TerminatorKind::Indirect => {
                for &id in &candidates {
                    edges.push(CfgEdge { from: n.id, to: id, kind: EdgeKind::Taken });
                }
            }
            TerminatorKind::IndirectCall => {
                for &id in &candidates {
                    edges.push(CfgEdge { from: n.id, to: id, kind: EdgeKind::Call });
                }
            }
            TerminatorKind::Return => {
                for &id in &return_sites {
                    edges.push(CfgEdge { from: n.id, to: id, kind: EdgeKind::Return });
                }
            }
            TerminatorKind::FallthroughToHalt => {}
        }
    }

    Ok(ControlFlowGraph { nodes, edges, entry: 0 })
}
