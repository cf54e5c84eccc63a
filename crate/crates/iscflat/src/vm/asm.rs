//! Two-pass label assembler for building test and scenario programs.

use std::collections::HashMap;

use crate::vm::inst::{Cond, Instruction, Operand, Program, Reg, INSTR_SIZE};
use crate::vm::Word;

enum Slot {
    Done(Instruction),
    B(String),
    Bcc(Cond, String),
    Bl(String),
    /// `mov rd, #label`
    MovLabel(Reg, String),
}

/// Assembles instructions with symbolic branch targets.
pub struct Asm {
    base: Word,
    slots: Vec<Slot>,
    labels: HashMap<String, Word>,
}

impl Asm {
    pub fn new(base: Word) -> Asm {
        Asm { base, slots: Vec::new(), labels: HashMap::new() }
    }

    pub fn here(&self) -> Word {
        self.base + self.slots.len() as Word * INSTR_SIZE
    }

    pub fn label(&mut self, name: &str) -> &mut Self {
        let addr = self.here();
        if self.labels.insert(name.to_string(), addr).is_some() {
            panic!("duplicate label {name}");
        }
        self
    }

    pub fn raw(&mut self, ins: Instruction) -> &mut Self {
        self.slots.push(Slot::Done(ins));
        self
    }

    pub fn mov_imm(&mut self, rd: Reg, v: u16) -> &mut Self {
        self.raw(Instruction::Mov { rd, src: Operand::Imm(v) })
    }

    pub fn mov_reg(&mut self, rd: Reg, rn: Reg) -> &mut Self {
        self.raw(Instruction::Mov { rd, src: Operand::Reg(rn) })
    }

    /// Materialize a code label into a register.
    pub fn mov_label(&mut self, rd: Reg, label: &str) -> &mut Self {
        self.slots.push(Slot::MovLabel(rd, label.to_string()));
        self
    }

    pub fn add_imm(&mut self, rd: Reg, v: u16) -> &mut Self {
        self.raw(Instruction::Add { rd, src: Operand::Imm(v) })
    }

    pub fn add_reg(&mut self, rd: Reg, rn: Reg) -> &mut Self {
        self.raw(Instruction::Add { rd, src: Operand::Reg(rn) })
    }

    pub fn sub_imm(&mut self, rd: Reg, v: u16) -> &mut Self {
        self.raw(Instruction::Sub { rd, src: Operand::Imm(v) })
    }

    pub fn cmp_imm(&mut self, rd: Reg, v: u16) -> &mut Self {
        self.raw(Instruction::Cmp { rd, src: Operand::Imm(v) })
    }

    pub fn cmp_reg(&mut self, rd: Reg, rn: Reg) -> &mut Self {
        self.raw(Instruction::Cmp { rd, src: Operand::Reg(rn) })
    }

    pub fn load(&mut self, rd: Reg, base: Reg, offset: u16) -> &mut Self {
        self.raw(Instruction::Load { rd, base, offset })
    }

    pub fn store(&mut self, rd: Reg, base: Reg, offset: u16) -> &mut Self {
        self.raw(Instruction::Store { rd, base, offset })
    }

    pub fn push(&mut self, rs: Reg) -> &mut Self {
        self.raw(Instruction::Push { rs })
    }

    pub fn pop(&mut self, rd: Reg) -> &mut Self {
        self.raw(Instruction::Pop { rd })
    }

    pub fn b(&mut self, label: &str) -> &mut Self {
        self.slots.push(Slot::B(label.to_string()));
        self
    }

    pub fn bcc(&mut self, cond: Cond, label: &str) -> &mut Self {
        self.slots.push(Slot::Bcc(cond, label.to_string()));
        self
    }

    pub fn bl(&mut self, label: &str) -> &mut Self {
        self.slots.push(Slot::Bl(label.to_string()));
        self
    }

    pub fn bl_abs(&mut self, target: Word) -> &mut Self {
        self.raw(Instruction::Bl { target })
    }

    pub fn bx(&mut self, rs: Reg) -> &mut Self {
        self.raw(Instruction::Bx { rs })
    }

    pub fn blx(&mut self, rs: Reg) -> &mut Self {
        self.raw(Instruction::Blx { rs })
    }

    pub fn ret(&mut self) -> &mut Self {
        self.raw(Instruction::Ret)
    }

    pub fn nsc_call(&mut self, target: Word) -> &mut Self {
        self.raw(Instruction::NscCall { target })
    }

    pub fn wfi(&mut self) -> &mut Self {
        self.raw(Instruction::Wfi)
    }

    pub fn halt(&mut self) -> &mut Self {
        self.raw(Instruction::Halt)
    }

    /// Fills the body with `count` arithmetic filler instructions.
    pub fn filler(&mut self, count: usize) -> &mut Self {
        for i in 0..count {
            let rd = Reg(4 + (i % 4) as u8);
            self.add_imm(rd, 1);
        }
        self
    }

    pub fn assemble(&self) -> Program {
        let resolve = |name: &str| -> Word {
            *self.labels.get(name).unwrap_or_else(|| panic!("undefined label {name}"))
        };
        let instrs = self
            .slots
            .iter()
            .map(|slot| match slot {
                Slot::Done(ins) => *ins,
                Slot::B(l) => Instruction::B { target: resolve(l) },
                Slot::Bcc(c, l) => Instruction::Bcc { cond: *c, target: resolve(l) },
                Slot::Bl(l) => Instruction::Bl { target: resolve(l) },
                Slot::MovLabel(rd, l) => Instruction::Mov {
                    rd: *rd,
                    src: Operand::Imm(resolve(l) as u16),
                },
            })
            .collect();
        Program::new(self.base, instrs)
    }

    pub fn resolve_label(&self, name: &str) -> Word {
        *self.labels.get(name).unwrap_or_else(|| panic!("undefined label {name}"))
    }
}
