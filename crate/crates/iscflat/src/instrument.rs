//! Binary rewriting: inserts the measurement gates into a program.
//!
//! Each node receives a `bl` to the entry veneer before its first
//! instruction. Nodes ending in a direct branch, conditional branch or
//! direct call receive a second `bl` immediately before the terminator;
//! nodes ending in an indirect branch, indirect call or return receive a
//! `push` of the destination register followed by a `bl` to the
//! pop-and-log veneer. Direct targets and materialized code addresses are
//! relocated so the rewritten program branches onto entry gates.

use std::collections::BTreeMap;

use crate::cfg::{CfgError, ControlFlowGraph, TerminatorKind};
use crate::vm::image::Image;
use crate::vm::inst::{Instruction, Operand, Program, INSTR_SIZE, LR};
use crate::vm::mem::{GATE_DEST, GATE_ENTRY};
use crate::vm::{FirmwareHandler, Fault, FwAction, Machine, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrumentConfig {
    pub gate_entry: Word,
    pub gate_dest: Word,
}

impl Default for InstrumentConfig {
    fn default() -> InstrumentConfig {
        InstrumentConfig { gate_entry: GATE_ENTRY, gate_dest: GATE_DEST }
    }
}

/// A rewritten program plus the address bookkeeping the measurement
/// runtime and the tooling need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentedProgram {
    pub program: Program,
    /// Original instruction address -> rewritten address.
    pub addr_map: BTreeMap<Word, Word>,
    /// Gate return site -> original address the gate logs.
    pub gate_log_map: BTreeMap<Word, Word>,
    /// Initial pc (the entry node's gate).
    pub entry_pc: Word,
    pub gate_entry: Word,
    pub gate_dest: Word,
}

impl InstrumentedProgram {
    /// Rewritten address of an original instruction.
    pub fn map_address(&self, original: Word) -> Result<Word, CfgError> {
        self.addr_map.get(&original).copied().ok_or(CfgError::UnknownAddress(original))
    }

    pub fn inserted_count(&self, original: &Program) -> usize {
        self.program.instrs.len() - original.instrs.len()
    }

    pub fn to_image(&self) -> Image {
        Image {
            base: self.program.base,
            entry: self.entry_pc,
            code: self.program.encode().expect("instrumented program encodes"),
            addr_map: self.addr_map.clone(),
            gate_log_map: self.gate_log_map.clone(),
        }
    }
}

fn dest_register(ins: &Instruction) -> Option<crate::vm::inst::Reg> {
    match ins {
        Instruction::Bx { rs } | Instruction::Blx { rs } => Some(*rs),
        Instruction::Ret => Some(LR),
        _ => None,
    }
}

/// Rewrites `program` according to `cfg`.
pub fn instrument(
    program: &Program,
    cfg: &ControlFlowGraph,
    config: InstrumentConfig,
) -> Result<InstrumentedProgram, CfgError> {
    // Sanity check that the graph describes this program.
    for node in &cfg.nodes {
        let term = program
            .at(node.end)
            .ok_or_else(|| CfgError::MalformedProgram("cfg does not match program".into()))?;
        let matches = match node.terminator {
            TerminatorKind::Direct => matches!(term, Instruction::B { .. }),
            TerminatorKind::Conditional => matches!(term, Instruction::Bcc { .. }),
            TerminatorKind::DirectCall => matches!(term, Instruction::Bl { .. }),
            TerminatorKind::Indirect => matches!(term, Instruction::Bx { .. }),
            TerminatorKind::IndirectCall => matches!(term, Instruction::Blx { .. }),
            TerminatorKind::Return => matches!(term, Instruction::Ret),
            TerminatorKind::FallthroughToHalt => matches!(term, Instruction::Halt),
        };
        if !matches {
            return Err(CfgError::MalformedProgram(format!(
                "cfg node {} terminator does not match instruction at 0x{:x}",
                node.id, node.end
            )));
        }
    }

    let base = program.base;

    // First pass: layout. Walk nodes in address order and compute the new
    // position of every original instruction and every entry gate.
    let mut nodes: Vec<&crate::cfg::CfgNode> = cfg.nodes.iter().collect();
    nodes.sort_by_key(|n| n.start);

    let mut addr_map: BTreeMap<Word, Word> = BTreeMap::new();
    let mut entry_gate_at: BTreeMap<Word, Word> = BTreeMap::new(); // node start -> gate addr
    let mut cursor = base;
    for node in &nodes {
        entry_gate_at.insert(node.start, cursor);
        cursor += INSTR_SIZE; // entry gate
        let mut addr = node.start;
        while addr < node.end {
            addr_map.insert(addr, cursor);
            cursor += INSTR_SIZE;
            addr += INSTR_SIZE;
        }
        match node.terminator {
            k if k.is_static_exit() => cursor += INSTR_SIZE, // exit gate
            k if k.is_dynamic_exit() => cursor += 2 * INSTR_SIZE, // push + gate
            _ => {}
        }
        addr_map.insert(node.end, cursor);
        cursor += INSTR_SIZE; // terminator
    }

    // Control-transfer targets land on entry gates.
    let reloc_target = |t: Word| -> Result<Word, CfgError> {
        entry_gate_at.get(&t).copied().ok_or(CfgError::RelocationError(t))
    };
    // Materialized immediates: node starts go to gates, other instruction
    // addresses follow the plain map, anything else is data.
    let reloc_imm = |v: u16| -> Result<u16, CfgError> {
        let w = Word::from(v);
        let new = if let Some(&g) = entry_gate_at.get(&w) {
            g
        } else if program.index_of(w).is_some() {
            addr_map[&w]
        } else {
            return Ok(v);
        };
        u16::try_from(new).map_err(|_| CfgError::RelocationError(w))
    };
    let reloc_ins = |ins: &Instruction| -> Result<Instruction, CfgError> {
        Ok(match *ins {
            Instruction::B { target } => Instruction::B { target: reloc_target(target)? },
            Instruction::Bcc { cond, target } => {
                Instruction::Bcc { cond, target: reloc_target(target)? }
            }
            Instruction::Bl { target } => Instruction::Bl { target: reloc_target(target)? },
            Instruction::Mov { rd, src: Operand::Imm(v) } => {
                Instruction::Mov { rd, src: Operand::Imm(reloc_imm(v)?) }
            }
            other => other,
        })
    };

    // Second pass: emission.
    let mut out: Vec<Instruction> = Vec::new();
    let mut gate_log_map: BTreeMap<Word, Word> = BTreeMap::new();
    let here = |out: &Vec<Instruction>| base + out.len() as Word * INSTR_SIZE;
    for node in &nodes {
        debug_assert_eq!(here(&out), entry_gate_at[&node.start]);
        gate_log_map.insert(here(&out) + INSTR_SIZE, node.start);
        out.push(Instruction::Bl { target: config.gate_entry });
        let mut addr = node.start;
        while addr < node.end {
            let ins = program.at(addr).expect("body instruction");
            out.push(reloc_ins(ins)?);
            addr += INSTR_SIZE;
        }
        let term = program.at(node.end).expect("terminator");
        if node.terminator.is_static_exit() {
            gate_log_map.insert(here(&out) + INSTR_SIZE, node.end);
            out.push(Instruction::Bl { target: config.gate_entry });
        } else if node.terminator.is_dynamic_exit() {
            let rs = dest_register(term).expect("dynamic terminator has a register");
            out.push(Instruction::Push { rs });
            out.push(Instruction::Bl { target: config.gate_dest });
        }
        debug_assert_eq!(here(&out), addr_map[&node.end]);
        out.push(reloc_ins(term)?);
    }

    let program_out = Program::new(base, out);
    // Encoding must stay within the 16-bit address space.
    program_out.encode().map_err(|e| match e {
        crate::vm::inst::EncodeError::ImmOutOfRange(w) => CfgError::RelocationError(w),
        other => CfgError::MalformedProgram(other.to_string()),
    })?;

    let entry_pc = entry_gate_at.get(&cfg.node(cfg.entry).start).copied().unwrap_or(base);
    Ok(InstrumentedProgram {
        program: program_out,
        addr_map,
        gate_log_map,
        entry_pc,
        gate_entry: config.gate_entry,
        gate_dest: config.gate_dest,
    })
}

/// Gate stub for running instrumented programs outside an attestation
/// session: entry gates return immediately, destination gates discard the
/// pushed word. Keeps the rewritten program semantically transparent.
pub struct StubGates {
    pub gate_dest: Word,
}

impl Default for StubGates {
    fn default() -> StubGates {
        StubGates { gate_dest: GATE_DEST }
    }
}

impl FirmwareHandler for StubGates {
    fn handle(&mut self, machine: &mut Machine, addr: Word) -> Result<FwAction, Fault> {
        let resume = machine.take_gate_resume().unwrap_or(machine.lr);
        if addr == self.gate_dest {
            let sp = machine.sp_ns;
            machine.read_word(sp, crate::vm::World::Secure)?;
            machine.sp_ns = sp + 4;
        }
        machine.pc = resume;
        Ok(FwAction::Continue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::extract_cfg;
    use crate::vm::asm::Asm;
    use crate::vm::inst::{Cond, R0, R1, R5};
    use crate::vm::mem::{standard_regions, APP_BASE};
    use crate::vm::{Machine, RunConfig, RunEnd};

    fn instrumented(p: &Program) -> InstrumentedProgram {
        let cfg = extract_cfg(p).unwrap();
        instrument(p, &cfg, InstrumentConfig::default()).unwrap()
    }

    #[test]
    fn direct_node_gains_two_instructions() {
        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 1).b("end");
        a.label("end").halt();
        let p = a.assemble();
        let ins = instrumented(&p);
        // node 0: entry gate + exit gate; node 1 (halt): entry gate only
        assert_eq!(ins.inserted_count(&p), 3);
    }

    #[test]
    fn return_node_gains_three_instructions() {
        let mut a = Asm::new(APP_BASE);
        a.bl("fn");
        a.label("after").halt();
        a.label("fn").ret();
        let p = a.assemble();
        let ins = instrumented(&p);
        // call node: 2, halt node: 1, return node: entry + push + gate = 3
        assert_eq!(ins.inserted_count(&p), 6);
    }

    #[test]
    fn single_node_entry_gate_only() {
        let p = Asm::new(APP_BASE).mov_imm(R0, 1).halt().assemble();
        let ins = instrumented(&p);
        assert_eq!(ins.inserted_count(&p), 1);
        assert_eq!(ins.entry_pc, APP_BASE);
        // first instruction shifted by one gate
        assert_eq!(ins.map_address(APP_BASE).unwrap(), APP_BASE + 4);
    }

    #[test]
    fn map_address_roundtrips_exhaustively() {
        let mut a = Asm::new(APP_BASE);
        a.cmp_imm(R0, 3).bcc(Cond::Lt, "low").mov_imm(R1, 1).halt();
        a.label("low").mov_imm(R1, 2).halt();
        let p = a.assemble();
        let ins = instrumented(&p);
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..p.instrs.len() {
            let orig = p.addr_of(i);
            let new = ins.map_address(orig).unwrap();
            assert!(seen.insert(new), "addr_map must be injective");
            // inverse lookup recovers the original
            let back = ins
                .addr_map
                .iter()
                .find(|(_, &v)| v == new)
                .map(|(&k, _)| k)
                .unwrap();
            assert_eq!(back, orig);
        }
        assert!(ins.map_address(APP_BASE + 2).is_err());
        assert!(ins.map_address(0x100).is_err());
    }

    #[test]
    fn gates_pair_with_nodes() {
        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 1).b("x");
        a.label("x").mov_imm(R1, 2).halt();
        let p = a.assemble();
        let cfg = extract_cfg(&p).unwrap();
        let ins = instrumented(&p);
        // every node start and every static terminator is logged
        let logged: Vec<Word> = ins.gate_log_map.values().copied().collect();
        for node in &cfg.nodes {
            assert!(logged.contains(&node.start));
        }
        assert!(logged.contains(&cfg.nodes[0].end));
    }

    /// Executing the instrumented program with stub gates must leave the
    /// architectural state identical to the original run.
    fn assert_semantics_preserved(p: &Program) {
        let ins = instrumented(p);
        let mut m0 = Machine::new(standard_regions());
        m0.load_program(p);
        m0.pc = p.base;
        let out0 = m0.run(&mut crate::vm::NoFirmware, RunConfig { max_steps: 100_000, trace: false });

        let mut m1 = Machine::new(standard_regions());
        m1.load_program(&ins.program);
        m1.pc = ins.entry_pc;
        m1.register_firmware(ins.gate_entry);
        m1.register_firmware(ins.gate_dest);
        let mut stub = StubGates { gate_dest: ins.gate_dest };
        let out1 = m1.run(&mut stub, RunConfig { max_steps: 100_000, trace: false });

        assert_eq!(out0.end, RunEnd::Halted);
        assert_eq!(out1.end, RunEnd::Halted);
        assert_eq!(m0.regs, m1.regs);
        assert_eq!(m0.sp_ns, m1.sp_ns);
        assert_eq!(m0.flags, m1.flags);
    }

    #[test]
    fn semantics_preserved_with_calls_and_indirects() {
        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 10).bl("double").mov_label(R5, "double").blx(R5);
        // code pointers are relocated, so drop them before comparing state
        a.mov_imm(R5, 0).halt();
        a.label("double").add_reg(R0, R0).ret();
        assert_semantics_preserved(&a.assemble());

        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 3);
        a.label("loop").sub_imm(R0, 1).cmp_imm(R0, 0).bcc(Cond::Ne, "loop").halt();
        // loop head follows a branch? it does not; place it after one.
        let p = a.assemble();
        // this one has a mid-block target and must be rejected instead
        assert!(extract_cfg(&p).is_err());

        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 3).b("loop");
        a.label("loop").sub_imm(R0, 1).cmp_imm(R0, 0).bcc(Cond::Ne, "loop").halt();
        assert_semantics_preserved(&a.assemble());
    }

    #[test]
    fn relocation_failure_reported() {
        // a program that would not fit the 16-bit space after rewriting
        let mut a = Asm::new(0xfff0);
        a.mov_imm(R0, 1).b("end");
        a.label("end").halt();
        let p = a.assemble();
        let cfg = extract_cfg(&p).unwrap();
        let err = instrument(&p, &cfg, InstrumentConfig::default()).unwrap_err();
        assert!(matches!(err, CfgError::RelocationError(_)));
    }

    #[test]
    fn custom_gate_addresses() {
        let p = Asm::new(APP_BASE).mov_imm(R0, 1).halt().assemble();
        let cfg = extract_cfg(&p).unwrap();
        let cfg_a = instrument(&p, &cfg, InstrumentConfig::default()).unwrap();
        let cfg_b = instrument(
            &p,
            &cfg,
            InstrumentConfig { gate_entry: 0x2040, gate_dest: 0x2050 },
        )
        .unwrap();
        assert_ne!(cfg_a.program, cfg_b.program);
        assert_eq!(cfg_a.addr_map, cfg_b.addr_map);
    }
}
