//! Instruction set of the simulated MCU.
//!
//! Every instruction encodes to exactly 4 bytes (little-endian):
//!
//! ```text
//! byte 0: opcode, with bit 7 set when the operand is an immediate
//! byte 1: high nibble = rd, low nibble = rn (or condition code)
//! bytes 2..4: 16-bit immediate
//! ```
//!
//! Registers `r0..r12` are general purpose; index 13 is the active stack
//! pointer and index 14 the link register. Index 15 is reserved and does
//! not decode.

use std::fmt;

use crate::vm::Word;

/// Size in bytes of one encoded instruction.
pub const INSTR_SIZE: Word = 4;

const IMM_BIT: u8 = 0x80;

/// Register name. 0..=12 map to r0..r12, 13 is SP, 14 is LR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Reg(pub u8);

pub const R0: Reg = Reg(0);
pub const R1: Reg = Reg(1);
pub const R2: Reg = Reg(2);
pub const R3: Reg = Reg(3);
pub const R4: Reg = Reg(4);
pub const R5: Reg = Reg(5);
pub const R6: Reg = Reg(6);
pub const R7: Reg = Reg(7);
pub const R8: Reg = Reg(8);
pub const R9: Reg = Reg(9);
pub const R10: Reg = Reg(10);
pub const R11: Reg = Reg(11);
pub const R12: Reg = Reg(12);
pub const SP: Reg = Reg(13);
pub const LR: Reg = Reg(14);

impl Reg {
    pub fn valid(self) -> bool {
        self.0 <= 14
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => write!(f, "sp"),
            14 => write!(f, "lr"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Condition code for `Bcc`, evaluated against the flags set by `CMP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Eq = 0,
    Ne = 1,
    Lt = 2,
    Ge = 3,
    Gt = 4,
    Le = 5,
}

impl Cond {
    pub fn from_bits(bits: u8) -> Option<Cond> {
        match bits {
            0 => Some(Cond::Eq),
            1 => Some(Cond::Ne),
            2 => Some(Cond::Lt),
            3 => Some(Cond::Ge),
            4 => Some(Cond::Gt),
            5 => Some(Cond::Le),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
            Cond::Gt => "gt",
            Cond::Le => "le",
        }
    }
}

/// Second operand of the ALU instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Imm(u16),
    Reg(Reg),
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    /// rd = src
    Mov { rd: Reg, src: Operand },
    /// rd = rd + src (wrapping)
    Add { rd: Reg, src: Operand },
    /// rd = rd - src (wrapping)
    Sub { rd: Reg, src: Operand },
    /// set flags from rd - src
    Cmp { rd: Reg, src: Operand },
    /// rd = mem[rn + offset]
    Load { rd: Reg, base: Reg, offset: u16 },
    /// mem[rn + offset] = rd
    Store { rd: Reg, base: Reg, offset: u16 },
    /// sp -= 4; mem[sp] = rs
    Push { rs: Reg },
    /// rd = mem[sp]; sp += 4
    Pop { rd: Reg },
    /// pc = target
    B { target: Word },
    /// pc = target when cond holds, else fall through
    Bcc { cond: Cond, target: Word },
    /// lr = pc + 4; pc = target
    Bl { target: Word },
    /// pc = rs
    Bx { rs: Reg },
    /// lr = pc + 4; pc = rs
    Blx { rs: Reg },
    /// pc = lr
    Ret,
    /// gateway call into a Non-Secure Callable veneer
    NscCall { target: Word },
    /// idle hint, executes as a no-op
    Wfi,
    /// stop the machine
    Halt,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("immediate 0x{0:x} does not fit in 16 bits")]
    ImmOutOfRange(Word),
    #[error("invalid register index {0}")]
    BadRegister(u8),
}

fn imm16(value: Word) -> Result<u16, EncodeError> {
    u16::try_from(value).map_err(|_| EncodeError::ImmOutOfRange(value))
}

fn check_reg(r: Reg) -> Result<u8, EncodeError> {
    if r.valid() {
        Ok(r.0)
    } else {
        Err(EncodeError::BadRegister(r.0))
    }
}

impl Instruction {
    /// True for the control-transfer instructions that terminate a basic
    /// block.
    pub fn is_branch(&self) -> bool {
        matches!(
            self,
            Instruction::B { .. }
                | Instruction::Bcc { .. }
                | Instruction::Bl { .. }
                | Instruction::Bx { .. }
                | Instruction::Blx { .. }
                | Instruction::Ret
                | Instruction::NscCall { .. }
        )
    }

    pub fn encode(&self) -> Result<[u8; 4], EncodeError> {
        let (op, imm_form, rd, rn, imm): (u8, bool, u8, u8, u16) = match *self {
            Instruction::Mov { rd, src } => alu(0x01, rd, src)?,
            Instruction::Add { rd, src } => alu(0x02, rd, src)?,
            Instruction::Sub { rd, src } => alu(0x03, rd, src)?,
            Instruction::Cmp { rd, src } => alu(0x04, rd, src)?,
            Instruction::Load { rd, base, offset } => {
                (0x05, false, check_reg(rd)?, check_reg(base)?, offset)
            }
            Instruction::Store { rd, base, offset } => {
                (0x06, false, check_reg(rd)?, check_reg(base)?, offset)
            }
            Instruction::Push { rs } => (0x07, false, check_reg(rs)?, 0, 0),
            Instruction::Pop { rd } => (0x08, false, check_reg(rd)?, 0, 0),
            Instruction::B { target } => (0x09, true, 0, 0, imm16(target)?),
            Instruction::Bcc { cond, target } => (0x0a, true, 0, cond as u8, imm16(target)?),
            Instruction::Bl { target } => (0x0b, true, 0, 0, imm16(target)?),
            Instruction::Bx { rs } => (0x0c, false, check_reg(rs)?, 0, 0),
            Instruction::Blx { rs } => (0x0d, false, check_reg(rs)?, 0, 0),
            Instruction::Ret => (0x0e, false, 0, 0, 0),
            Instruction::NscCall { target } => (0x0f, true, 0, 0, imm16(target)?),
            Instruction::Wfi => (0x10, false, 0, 0, 0),
            Instruction::Halt => (0x11, false, 0, 0, 0),
        };
        let b0 = if imm_form { op | IMM_BIT } else { op };
        let b1 = (rd << 4) | (rn & 0x0f);
        let [i0, i1] = imm.to_le_bytes();
        Ok([b0, b1, i0, i1])
    }

    /// Decode 4 raw bytes. Returns a description of the problem for
    /// undecodable encodings.
    pub fn decode(raw: [u8; 4]) -> Result<Instruction, String> {
        let imm_form = raw[0] & IMM_BIT != 0;
        let op = raw[0] & !IMM_BIT;
        let rd = Reg(raw[1] >> 4);
        let rn_bits = raw[1] & 0x0f;
        let rn = Reg(rn_bits);
        let imm = u16::from_le_bytes([raw[2], raw[3]]);

        let reg_ok = |r: Reg| -> Result<Reg, String> {
            if r.valid() {
                Ok(r)
            } else {
                Err(format!("register index {} out of range", r.0))
            }
        };
        let src = |imm_form: bool| -> Result<Operand, String> {
            if imm_form {
                if rn_bits != 0 {
                    return Err("immediate form with nonzero rn field".into());
                }
                Ok(Operand::Imm(imm))
            } else {
                if imm != 0 {
                    return Err("register form with nonzero immediate".into());
                }
                Ok(Operand::Reg(reg_ok(rn)?))
            }
        };
        let bare = |name: &str| -> Result<(), String> {
            if imm_form || raw[1] != 0 || imm != 0 {
                Err(format!("{name} takes no operands"))
            } else {
                Ok(())
            }
        };
        let imm_target = |name: &str| -> Result<Word, String> {
            if !imm_form {
                return Err(format!("{name} requires an immediate target"));
            }
            if raw[1] != 0 {
                return Err(format!("{name} with nonzero register fields"));
            }
            Ok(Word::from(imm))
        };
        let unary_reg = |name: &str| -> Result<Reg, String> {
            if imm_form || rn_bits != 0 || imm != 0 {
                return Err(format!("{name} takes a single register"));
            }
            reg_ok(rd)
        };

        match op {
            0x01 => Ok(Instruction::Mov { rd: reg_ok(rd)?, src: src(imm_form)? }),
            0x02 => Ok(Instruction::Add { rd: reg_ok(rd)?, src: src(imm_form)? }),
            0x03 => Ok(Instruction::Sub { rd: reg_ok(rd)?, src: src(imm_form)? }),
            0x04 => Ok(Instruction::Cmp { rd: reg_ok(rd)?, src: src(imm_form)? }),
            0x05 | 0x06 => {
                if imm_form {
                    return Err("memory access with immediate form bit".into());
                }
                let rd = reg_ok(rd)?;
                let base = reg_ok(rn)?;
                if op == 0x05 {
                    Ok(Instruction::Load { rd, base, offset: imm })
                } else {
                    Ok(Instruction::Store { rd, base, offset: imm })
                }
            }
            0x07 => Ok(Instruction::Push { rs: unary_reg("push")? }),
            0x08 => Ok(Instruction::Pop { rd: unary_reg("pop")? }),
            0x09 => Ok(Instruction::B { target: imm_target("b")? }),
            0x0a => {
                if !imm_form {
                    return Err("bcc requires an immediate target".into());
                }
                if raw[1] >> 4 != 0 {
                    return Err("bcc with nonzero rd field".into());
                }
                let cond = Cond::from_bits(rn_bits)
                    .ok_or_else(|| format!("bad condition code {rn_bits}"))?;
                Ok(Instruction::Bcc { cond, target: Word::from(imm) })
            }
            0x0b => Ok(Instruction::Bl { target: imm_target("bl")? }),
            0x0c => Ok(Instruction::Bx { rs: unary_reg("bx")? }),
            0x0d => Ok(Instruction::Blx { rs: unary_reg("blx")? }),
            0x0e => {
                bare("ret")?;
                Ok(Instruction::Ret)
            }
            0x0f => Ok(Instruction::NscCall { target: imm_target("nsc_call")? }),
            0x10 => {
                bare("wfi")?;
                Ok(Instruction::Wfi)
            }
            0x11 => {
                bare("halt")?;
                Ok(Instruction::Halt)
            }
            other => Err(format!("unknown opcode 0x{other:02x}")),
        }
    }

    /// Static branch target, for the instructions whose destination is an
    /// immediate.
    pub fn static_target(&self) -> Option<Word> {
        match *self {
            Instruction::B { target }
            | Instruction::Bcc { target, .. }
            | Instruction::Bl { target }
            | Instruction::NscCall { target } => Some(target),
            _ => None,
        }
    }
}

fn alu(op: u8, rd: Reg, src: Operand) -> Result<(u8, bool, u8, u8, u16), EncodeError> {
    let rd = check_reg(rd)?;
    match src {
        Operand::Imm(v) => Ok((op, true, rd, 0, v)),
        Operand::Reg(r) => Ok((op, false, rd, check_reg(r)?, 0)),
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = |f: &mut fmt::Formatter<'_>, name: &str, rd: &Reg, src: &Operand| match src {
            Operand::Imm(v) => write!(f, "{name} {rd}, #{v}"),
            Operand::Reg(r) => write!(f, "{name} {rd}, {r}"),
        };
        match self {
            Instruction::Mov { rd, src } => op(f, "mov", rd, src),
            Instruction::Add { rd, src } => op(f, "add", rd, src),
            Instruction::Sub { rd, src } => op(f, "sub", rd, src),
            Instruction::Cmp { rd, src } => op(f, "cmp", rd, src),
            Instruction::Load { rd, base, offset } => write!(f, "load {rd}, [{base}, #{offset}]"),
            Instruction::Store { rd, base, offset } => {
                write!(f, "store {rd}, [{base}, #{offset}]")
            }
            Instruction::Push { rs } => write!(f, "push {rs}"),
            Instruction::Pop { rd } => write!(f, "pop {rd}"),
            Instruction::B { target } => write!(f, "b 0x{target:x}"),
            Instruction::Bcc { cond, target } => write!(f, "b{} 0x{target:x}", cond.name()),
            Instruction::Bl { target } => write!(f, "bl 0x{target:x}"),
            Instruction::Bx { rs } => write!(f, "bx {rs}"),
            Instruction::Blx { rs } => write!(f, "blx {rs}"),
            Instruction::Ret => write!(f, "ret"),
            Instruction::NscCall { target } => write!(f, "nsc_call 0x{target:x}"),
            Instruction::Wfi => write!(f, "wfi"),
            Instruction::Halt => write!(f, "halt"),
        }
    }
}

/// A decoded program at a fixed load address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub base: Word,
    pub instrs: Vec<Instruction>,
}

impl Program {
    pub fn new(base: Word, instrs: Vec<Instruction>) -> Program {
        Program { base, instrs }
    }

    pub fn len_bytes(&self) -> Word {
        self.instrs.len() as Word * INSTR_SIZE
    }

    pub fn end(&self) -> Word {
        self.base + self.len_bytes()
    }

    pub fn addr_of(&self, index: usize) -> Word {
        self.base + index as Word * INSTR_SIZE
    }

    pub fn index_of(&self, addr: Word) -> Option<usize> {
        if addr < self.base || addr >= self.end() || (addr - self.base) % INSTR_SIZE != 0 {
            return None;
        }
        Some(((addr - self.base) / INSTR_SIZE) as usize)
    }

    pub fn at(&self, addr: Word) -> Option<&Instruction> {
        self.index_of(addr).map(|i| &self.instrs[i])
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let mut out = Vec::with_capacity(self.instrs.len() * 4);
        for ins in &self.instrs {
            out.extend_from_slice(&ins.encode()?);
        }
        Ok(out)
    }

    pub fn decode(base: Word, bytes: &[u8]) -> Result<Program, String> {
        if bytes.len() % 4 != 0 {
            return Err(format!("image length {} is not a multiple of 4", bytes.len()));
        }
        let mut instrs = Vec::with_capacity(bytes.len() / 4);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let ins = Instruction::decode(raw)
                .map_err(|e| format!("at 0x{:x}: {e}", base + i as Word * 4))?;
            instrs.push(ins);
        }
        Ok(Program { base, instrs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_every_shape() {
        let cases = vec![
            Instruction::Mov { rd: R0, src: Operand::Imm(5) },
            Instruction::Mov { rd: R4, src: Operand::Reg(SP) },
            Instruction::Add { rd: R2, src: Operand::Imm(0xffff) },
            Instruction::Sub { rd: R3, src: Operand::Reg(R1) },
            Instruction::Cmp { rd: R4, src: Operand::Imm(0) },
            Instruction::Load { rd: R0, base: R1, offset: 24 },
            Instruction::Store { rd: R2, base: SP, offset: 0 },
            Instruction::Push { rs: LR },
            Instruction::Pop { rd: R7 },
            Instruction::B { target: 0x4000 },
            Instruction::Bcc { cond: Cond::Ne, target: 0x4010 },
            Instruction::Bl { target: 0x2000 },
            Instruction::Bx { rs: R5 },
            Instruction::Blx { rs: R6 },
            Instruction::Ret,
            Instruction::NscCall { target: 0x2000 },
            Instruction::Wfi,
            Instruction::Halt,
        ];
        for ins in cases {
            let raw = ins.encode().unwrap();
            assert_eq!(Instruction::decode(raw).unwrap(), ins, "{ins}");
        }
    }

    #[test]
    fn rejects_bad_encodings() {
        assert!(Instruction::decode([0x00, 0, 0, 0]).is_err());
        assert!(Instruction::decode([0x7f, 0, 0, 0]).is_err());
        // ret with stray operand bits
        assert!(Instruction::decode([0x0e, 0x10, 0, 0]).is_err());
        // register index 15
        assert!(Instruction::decode([0x01, 0xf0, 1, 0]).is_err());
        // bcc with bad condition
        assert!(Instruction::decode([0x8a, 0x07, 0, 0]).is_err());
    }

    #[test]
    fn immediate_range_checked() {
        let ins = Instruction::B { target: 0x1_0000 };
        assert_eq!(ins.encode(), Err(EncodeError::ImmOutOfRange(0x1_0000)));
    }

    #[test]
    fn program_addressing() {
        let p = Program::new(
            0x4000,
            vec![Instruction::Wfi, Instruction::Halt],
        );
        assert_eq!(p.addr_of(1), 0x4004);
        assert_eq!(p.index_of(0x4004), Some(1));
        assert_eq!(p.index_of(0x4002), None);
        assert_eq!(p.index_of(0x4008), None);
        let bytes = p.encode().unwrap();
        assert_eq!(Program::decode(0x4000, &bytes).unwrap(), p);
    }
}
