//! The deterministic machine: register file, byte store, interrupt
//! controller, timer and the step/run loop.
//!
//! Faults are outcomes, not panics. A run ends at `halt`, at the first
//! fault, when the step budget is spent, or when a firmware handler asks
//! for a stop.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::vm::inst::{Instruction, Operand, Program, Reg, INSTR_SIZE};
use crate::vm::mem::{
    Access, MemoryRegion, Mpu, MpuRule, Perms, RegionKind, RegionWorld, World, EXEC_RETURN,
    MEM_SIZE, MPU_PAGE_BASE, MPU_SLOTS, NS_IVT_BASE, NS_STACK_TOP, NUM_IRQS, SECURE_IVT_BASE,
    SECURE_STACK_TOP,
};
use crate::vm::Word;

pub type IrqId = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    SecureAccessFault,
    MpuWriteFault,
    MpuExecFault,
    AlignmentFault,
    IllegalInstruction,
    StackOverflow,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultKind::SecureAccessFault => "secure_access",
            FaultKind::MpuWriteFault => "mpu_write",
            FaultKind::MpuExecFault => "mpu_exec",
            FaultKind::AlignmentFault => "alignment",
            FaultKind::IllegalInstruction => "illegal_instruction",
            FaultKind::StackOverflow => "stack_overflow",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} fault at pc=0x{at_pc:x}: {detail}")]
pub struct Fault {
    pub kind: FaultKind,
    pub at_pc: Word,
    pub detail: String,
}

impl Fault {
    fn new(kind: FaultKind, at_pc: Word, detail: impl Into<String>) -> Fault {
        Fault { kind, at_pc, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub z: bool,
    pub n: bool,
    pub c: bool,
    pub v: bool,
}

impl Flags {
    pub fn to_word(self) -> Word {
        (self.z as Word) | (self.n as Word) << 1 | (self.c as Word) << 2 | (self.v as Word) << 3
    }

    pub fn from_word(w: Word) -> Flags {
        Flags { z: w & 1 != 0, n: w & 2 != 0, c: w & 4 != 0, v: w & 8 != 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Thread,
    Handler,
}

/// Interrupt controller with one vector table per world.
#[derive(Debug, Clone)]
pub struct Nvic {
    /// Target world per IRQ. `Secure` routes through the secure table.
    pub itns: [World; NUM_IRQS],
    pub secure_ivt: [Word; NUM_IRQS],
    pub nonsecure_ivt: [Word; NUM_IRQS],
    pub pending: BTreeSet<IrqId>,
    /// Lower value preempts higher.
    pub priorities: [u8; NUM_IRQS],
    pub preemption_enabled: bool,
    /// Currently active (nested) handlers, innermost last.
    pub active: Vec<IrqId>,
}

impl Default for Nvic {
    fn default() -> Nvic {
        Nvic {
            itns: [World::NonSecure; NUM_IRQS],
            secure_ivt: [0; NUM_IRQS],
            nonsecure_ivt: [0; NUM_IRQS],
            pending: BTreeSet::new(),
            priorities: [0x80; NUM_IRQS],
            preemption_enabled: true,
            active: Vec::new(),
        }
    }
}

/// Countdown timer that pends an IRQ after a number of retired
/// instructions. With `reload` set it re-arms itself.
#[derive(Debug, Clone, Copy)]
pub struct Timer {
    pub remaining: u64,
    pub irq: IrqId,
    pub reload: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Retire,
    IrqEntry(IrqId),
    ExecReturn,
    Firmware(Word),
    Fault(FaultKind),
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub retired: u64,
    pub pc: Word,
    pub world: World,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let world = match self.world {
            World::Secure => "s",
            World::NonSecure => "ns",
        };
        write!(f, "{} 0x{:04x} {} ", self.retired, self.pc, world)?;
        match self.event {
            TraceEvent::Retire => write!(f, "retire"),
            TraceEvent::IrqEntry(irq) => write!(f, "irq_entry:{irq}"),
            TraceEvent::ExecReturn => write!(f, "exec_return"),
            TraceEvent::Firmware(addr) => write!(f, "fw:0x{addr:04x}"),
            TraceEvent::Fault(kind) => write!(f, "fault:{kind}"),
            TraceEvent::Halt => write!(f, "halt"),
        }
    }
}

/// Execution trace, one record per retired instruction or machine event.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace(pub Vec<TraceRecord>);

impl Trace {
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.0 {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    /// Program-counter sequence of retired instructions within [base, end).
    pub fn retired_pcs_in(&self, base: Word, end: Word) -> Vec<Word> {
        self.0
            .iter()
            .filter(|r| r.event == TraceEvent::Retire && r.pc >= base && r.pc < end)
            .map(|r| r.pc)
            .collect()
    }
}

/// What one call to [`Machine::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    /// An instruction retired at `pc`; an interrupt may have entered after.
    Executed { pc: Word, irq: Option<IrqId>, halted: bool },
    /// The interrupt-return sequence ran (no instruction retired).
    ExecReturn { irq: Option<IrqId> },
    /// Fetch landed on a registered firmware address. The caller decides
    /// what the firmware does; no instruction retired.
    FirmwareCall(Word),
}

/// Hook invoked by [`Machine::run`] when fetch reaches a firmware address.
pub trait FirmwareHandler {
    fn handle(&mut self, machine: &mut Machine, addr: Word) -> Result<FwAction, Fault>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwAction {
    Continue,
    Stop,
}

/// Firmware stub that returns straight to the caller without side effects.
/// Used to execute instrumented programs outside an attestation session.
pub struct NopGates;

impl FirmwareHandler for NopGates {
    fn handle(&mut self, machine: &mut Machine, _addr: Word) -> Result<FwAction, Fault> {
        let resume = machine.take_gate_resume().unwrap_or(machine.lr);
        machine.pc = resume;
        Ok(FwAction::Continue)
    }
}

/// Firmware handler for machines with no registered firmware addresses.
pub struct NoFirmware;

impl FirmwareHandler for NoFirmware {
    fn handle(&mut self, machine: &mut Machine, addr: Word) -> Result<FwAction, Fault> {
        Err(Fault::new(
            FaultKind::IllegalInstruction,
            machine.pc,
            format!("unhandled firmware address 0x{addr:x}"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub max_steps: u64,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig { max_steps: 1_000_000, trace: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunEnd {
    Halted,
    Fault(Fault),
    OutOfBudget,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub end: RunEnd,
    pub trace: Trace,
    pub steps: u64,
}

/// Full machine state. Cloning yields an independent snapshot; identical
/// snapshots step identically.
#[derive(Debug, Clone)]
pub struct Machine {
    pub regs: [Word; 13],
    pub sp_ns: Word,
    pub sp_s: Word,
    pub lr: Word,
    pub pc: Word,
    pub flags: Flags,
    pub world: World,
    pub mode: Mode,
    pub nvic: Nvic,
    pub timer: Option<Timer>,
    /// One-shot interrupt schedule: (retired count, irq), fired when the
    /// retired counter reaches the given value.
    pub schedule: Vec<(u64, IrqId)>,
    pub retired: u64,
    pub mpu: Mpu,
    mpu_staged: [MpuRule; MPU_SLOTS],
    regions: Vec<MemoryRegion>,
    bytes: Vec<u8>,
    firmware: BTreeSet<Word>,
    /// Return addresses latched by link-transparent calls into firmware
    /// veneers. Gate calls do not clobber `lr`; nesting (an interrupt between
    /// the call and its dispatch) stacks latches LIFO.
    gate_resume: Vec<Word>,
}

impl Machine {
    pub fn new(regions: Vec<MemoryRegion>) -> Machine {
        Machine {
            regs: [0; 13],
            sp_ns: NS_STACK_TOP,
            sp_s: SECURE_STACK_TOP,
            lr: 0,
            pc: 0,
            flags: Flags::default(),
            world: World::NonSecure,
            mode: Mode::Thread,
            nvic: Nvic::default(),
            timer: None,
            schedule: Vec::new(),
            retired: 0,
            mpu: Mpu::default(),
            mpu_staged: [MpuRule { base: 0, size: 0, perms: Perms::rwx() }; MPU_SLOTS],
            regions,
            bytes: vec![0; MEM_SIZE],
            firmware: BTreeSet::new(),
            gate_resume: Vec::new(),
        }
    }

    pub fn with_standard_map() -> Machine {
        Machine::new(crate::vm::mem::standard_regions())
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    /// Registers an address whose fetch traps to firmware.
    pub fn register_firmware(&mut self, addr: Word) {
        self.firmware.insert(addr);
    }

    /// Pops the innermost latched gate return address.
    pub fn take_gate_resume(&mut self) -> Option<Word> {
        self.gate_resume.pop()
    }

    /// Active stack pointer for the current world.
    pub fn sp(&self) -> Word {
        match self.world {
            World::Secure => self.sp_s,
            World::NonSecure => self.sp_ns,
        }
    }

    fn sp_mut(&mut self) -> &mut Word {
        match self.world {
            World::Secure => &mut self.sp_s,
            World::NonSecure => &mut self.sp_ns,
        }
    }

    fn read_reg(&self, r: Reg) -> Word {
        match r.0 {
            13 => self.sp(),
            14 => self.lr,
            n => self.regs[n as usize],
        }
    }

    fn write_reg(&mut self, r: Reg, v: Word) {
        match r.0 {
            13 => *self.sp_mut() = v,
            14 => self.lr = v,
            n => self.regs[n as usize] = v,
        }
    }

    fn region_at(&self, addr: Word) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(addr))
    }

    fn check_access(&self, addr: Word, access: Access, world: World) -> Result<usize, Fault> {
        let Some(idx) = self.region_at(addr) else {
            // Unattributed addresses default to Secure.
            return Err(Fault::new(
                FaultKind::SecureAccessFault,
                self.pc,
                format!("access to unmapped address 0x{addr:x}"),
            ));
        };
        let region = &self.regions[idx];
        if world == World::Secure {
            return Ok(idx);
        }
        match region.world {
            RegionWorld::Secure => {
                return Err(Fault::new(
                    FaultKind::SecureAccessFault,
                    self.pc,
                    format!("non-secure {access:?} of secure region {} at 0x{addr:x}", region.name),
                ));
            }
            RegionWorld::NonSecureCallable => {
                if access != Access::Exec {
                    return Err(Fault::new(
                        FaultKind::SecureAccessFault,
                        self.pc,
                        format!("non-secure {access:?} of NSC region at 0x{addr:x}"),
                    ));
                }
                return Ok(idx);
            }
            RegionWorld::NonSecure => {}
        }
        let static_ok = match access {
            Access::Read => region.perms.read,
            Access::Write => region.perms.write,
            Access::Exec => region.perms.exec,
        };
        if !static_ok || !self.mpu.allows(addr, access) {
            let kind = match access {
                Access::Write => FaultKind::MpuWriteFault,
                Access::Exec => FaultKind::MpuExecFault,
                Access::Read => FaultKind::MpuWriteFault,
            };
            return Err(Fault::new(
                kind,
                self.pc,
                format!("{access:?} denied at 0x{addr:x} in {}", region.name),
            ));
        }
        Ok(idx)
    }

    fn check_aligned(&self, addr: Word) -> Result<(), Fault> {
        if addr % 4 != 0 {
            return Err(Fault::new(
                FaultKind::AlignmentFault,
                self.pc,
                format!("unaligned word access at 0x{addr:x}"),
            ));
        }
        Ok(())
    }

    /// Word read with the given world's access rights.
    pub fn read_word(&self, addr: Word, world: World) -> Result<Word, Fault> {
        self.check_aligned(addr)?;
        let idx = self.check_access(addr, Access::Read, world)?;
        Ok(self.mmio_read(idx, addr))
    }

    /// Word write with the given world's access rights. Register pages
    /// apply their side effects.
    pub fn write_word(&mut self, addr: Word, value: Word, world: World) -> Result<(), Fault> {
        self.check_aligned(addr)?;
        let idx = self.check_access(addr, Access::Write, world)?;
        self.mmio_write(idx, addr, value);
        Ok(())
    }

    fn mmio_read(&self, region_idx: usize, addr: Word) -> Word {
        let region = &self.regions[region_idx];
        let off = addr - region.base;
        match region.kind {
            RegionKind::Ram => self.raw_read(addr),
            RegionKind::ItnsPage => {
                if off == 0 {
                    let mut bits = 0;
                    for (i, w) in self.nvic.itns.iter().enumerate() {
                        if *w == World::NonSecure {
                            bits |= 1 << i;
                        }
                    }
                    bits
                } else {
                    0
                }
            }
            RegionKind::SecureIvtPage => {
                let irq = (off / 4) as usize;
                if irq < NUM_IRQS {
                    self.nvic.secure_ivt[irq]
                } else {
                    0
                }
            }
            RegionKind::NsIvtPage => {
                let irq = (off / 4) as usize;
                if irq < NUM_IRQS {
                    self.nvic.nonsecure_ivt[irq]
                } else {
                    0
                }
            }
            RegionKind::MpuPage => {
                let slot = (off / 16) as usize;
                if slot >= MPU_SLOTS {
                    return 0;
                }
                match (self.mpu.slots[slot], off % 16) {
                    (Some(rule), 0) => rule.base,
                    (Some(rule), 4) => rule.size,
                    (Some(rule), 8) => {
                        (rule.perms.read as Word)
                            | (rule.perms.write as Word) << 1
                            | (rule.perms.exec as Word) << 2
                    }
                    (Some(_), 12) => 1,
                    _ => 0,
                }
            }
        }
    }

    fn mmio_write(&mut self, region_idx: usize, addr: Word, value: Word) {
        let region = &self.regions[region_idx];
        let base = region.base;
        let kind = region.kind;
        let off = addr - base;
        match kind {
            RegionKind::Ram => self.raw_write(addr, value),
            RegionKind::ItnsPage => {
                if off == 0 {
                    for (i, w) in self.nvic.itns.iter_mut().enumerate() {
                        *w = if value & (1 << i) != 0 { World::NonSecure } else { World::Secure };
                    }
                }
            }
            RegionKind::SecureIvtPage => {
                let irq = (off / 4) as usize;
                if irq < NUM_IRQS {
                    self.nvic.secure_ivt[irq] = value;
                }
            }
            RegionKind::NsIvtPage => {
                let irq = (off / 4) as usize;
                if irq < NUM_IRQS {
                    self.nvic.nonsecure_ivt[irq] = value;
                }
            }
            RegionKind::MpuPage => {
                let slot = (off / 16) as usize;
                if slot >= MPU_SLOTS {
                    return;
                }
                let rule = &mut self.mpu_staged[slot];
                match off % 16 {
                    0 => rule.base = value,
                    4 => rule.size = value,
                    8 => {
                        rule.perms = Perms {
                            read: value & 1 != 0,
                            write: value & 2 != 0,
                            exec: value & 4 != 0,
                        }
                    }
                    12 => {
                        self.mpu.slots[slot] =
                            if value != 0 { Some(self.mpu_staged[slot]) } else { None };
                    }
                    _ => {}
                }
            }
        }
    }

    /// Raw byte-store read, no permission checks. Install-time helper.
    pub fn raw_read(&self, addr: Word) -> Word {
        let i = addr as usize;
        if i + 4 > self.bytes.len() {
            return 0;
        }
        u32::from_le_bytes([self.bytes[i], self.bytes[i + 1], self.bytes[i + 2], self.bytes[i + 3]])
    }

    fn raw_write(&mut self, addr: Word, value: Word) {
        let i = addr as usize;
        if i + 4 > self.bytes.len() {
            return;
        }
        self.bytes[i..i + 4].copy_from_slice(&value.to_le_bytes());
    }

    /// Copies bytes into the store without permission checks (installer).
    pub fn load_bytes(&mut self, base: Word, bytes: &[u8]) {
        let i = base as usize;
        self.bytes[i..i + bytes.len()].copy_from_slice(bytes);
    }

    pub fn load_program(&mut self, program: &Program) {
        let bytes = program.encode().expect("program encodes");
        self.load_bytes(program.base, &bytes);
    }

    pub fn read_bytes(&self, base: Word, len: usize) -> &[u8] {
        &self.bytes[base as usize..base as usize + len]
    }

    /// SAU reattribution of a region. Secure callers only.
    pub fn set_region_world(
        &mut self,
        region_idx: usize,
        world: RegionWorld,
        caller: World,
    ) -> Result<(), Fault> {
        if caller != World::Secure {
            return Err(Fault::new(
                FaultKind::SecureAccessFault,
                self.pc,
                "SAU configuration from non-secure world",
            ));
        }
        self.regions[region_idx].world = world;
        Ok(())
    }

    pub fn region_world(&self, region_idx: usize) -> RegionWorld {
        self.regions[region_idx].world
    }

    /// Writes an NS-MPU rule slot. Succeeds only when `caller` may write
    /// the MPU configuration page.
    pub fn configure_mpu(
        &mut self,
        slot: usize,
        rule: Option<MpuRule>,
        caller: World,
    ) -> Result<(), Fault> {
        self.check_access(MPU_PAGE_BASE, Access::Write, caller)?;
        self.mpu.slots[slot] = rule;
        Ok(())
    }

    /// Routes an IRQ to a world. Only programmable from the Secure world.
    pub fn set_itns(&mut self, irq: IrqId, target: World, caller: World) -> Result<(), Fault> {
        if caller != World::Secure {
            return Err(Fault::new(
                FaultKind::SecureAccessFault,
                self.pc,
                "ITNS write from non-secure world",
            ));
        }
        self.nvic.itns[irq as usize] = target;
        Ok(())
    }

    pub fn set_secure_ivt(&mut self, irq: IrqId, handler: Word, caller: World) -> Result<(), Fault> {
        self.check_access(SECURE_IVT_BASE, Access::Write, caller)?;
        self.nvic.secure_ivt[irq as usize] = handler;
        Ok(())
    }

    pub fn set_ns_ivt(&mut self, irq: IrqId, handler: Word, caller: World) -> Result<(), Fault> {
        self.check_access(NS_IVT_BASE, Access::Write, caller)?;
        self.nvic.nonsecure_ivt[irq as usize] = handler;
        Ok(())
    }

    pub fn pend_irq(&mut self, irq: IrqId) {
        self.nvic.pending.insert(irq);
    }

    pub fn arm_timer(&mut self, fire_after: u64, irq: IrqId, reload: Option<u64>) {
        self.timer = Some(Timer { remaining: fire_after, irq, reload });
    }

    fn fetch(&self, addr: Word) -> Result<Instruction, Fault> {
        if addr % 4 != 0 {
            return Err(Fault::new(
                FaultKind::AlignmentFault,
                addr,
                format!("instruction fetch at unaligned 0x{addr:x}"),
            ));
        }
        self.check_access(addr, Access::Exec, self.world)?;
        let raw = self.raw_read(addr).to_le_bytes();
        Instruction::decode(raw)
            .map_err(|e| Fault::new(FaultKind::IllegalInstruction, addr, e))
    }

    fn alu_src(&self, src: Operand) -> Word {
        match src {
            Operand::Imm(v) => Word::from(v),
            Operand::Reg(r) => self.read_reg(r),
        }
    }

    fn set_cmp_flags(&mut self, a: Word, b: Word) {
        let (res, borrow) = a.overflowing_sub(b);
        self.flags.z = res == 0;
        self.flags.n = (res as i32) < 0;
        self.flags.c = !borrow;
        self.flags.v = (((a ^ b) & (a ^ res)) as i32) < 0;
    }

    fn cond_holds(&self, cond: crate::vm::inst::Cond) -> bool {
        use crate::vm::inst::Cond;
        let f = self.flags;
        match cond {
            Cond::Eq => f.z,
            Cond::Ne => !f.z,
            Cond::Lt => f.n != f.v,
            Cond::Ge => f.n == f.v,
            Cond::Gt => !f.z && f.n == f.v,
            Cond::Le => f.z || f.n != f.v,
        }
    }

    fn push_word(&mut self, value: Word) -> Result<(), Fault> {
        let sp = self.sp().wrapping_sub(4);
        self.write_word(sp, value, self.world)?;
        *self.sp_mut() = sp;
        Ok(())
    }

    fn pop_word(&mut self) -> Result<Word, Fault> {
        let sp = self.sp();
        let v = self.read_word(sp, self.world)?;
        *self.sp_mut() = sp + 4;
        Ok(v)
    }

    /// Executes exactly one instruction (or one machine event) and then
    /// runs the pending-interrupt check. Deterministic.
    pub fn step(&mut self) -> Result<StepEvent, Fault> {
        if self.pc == EXEC_RETURN {
            self.exec_return()?;
            let irq = self.check_interrupts()?;
            return Ok(StepEvent::ExecReturn { irq });
        }
        if self.firmware.contains(&self.pc) {
            // Reachability is still subject to fetch permissions.
            self.check_access(self.pc, Access::Exec, self.world)?;
            return Ok(StepEvent::FirmwareCall(self.pc));
        }

        let pc = self.pc;
        let ins = self.fetch(pc)?;
        let mut next = pc + INSTR_SIZE;
        let mut halted = false;

        match ins {
            Instruction::Mov { rd, src } => {
                let v = self.alu_src(src);
                self.write_reg(rd, v);
            }
            Instruction::Add { rd, src } => {
                let v = self.read_reg(rd).wrapping_add(self.alu_src(src));
                self.write_reg(rd, v);
            }
            Instruction::Sub { rd, src } => {
                let v = self.read_reg(rd).wrapping_sub(self.alu_src(src));
                self.write_reg(rd, v);
            }
            Instruction::Cmp { rd, src } => {
                let a = self.read_reg(rd);
                let b = self.alu_src(src);
                self.set_cmp_flags(a, b);
            }
            Instruction::Load { rd, base, offset } => {
                let addr = self.read_reg(base).wrapping_add(Word::from(offset));
                let v = self.read_word(addr, self.world)?;
                self.write_reg(rd, v);
            }
            Instruction::Store { rd, base, offset } => {
                let addr = self.read_reg(base).wrapping_add(Word::from(offset));
                let v = self.read_reg(rd);
                self.write_word(addr, v, self.world)?;
            }
            Instruction::Push { rs } => {
                let v = self.read_reg(rs);
                self.push_word(v)?;
            }
            Instruction::Pop { rd } => {
                let v = self.pop_word()?;
                self.write_reg(rd, v);
            }
            Instruction::B { target } => next = target,
            Instruction::Bcc { cond, target } => {
                if self.cond_holds(cond) {
                    next = target;
                }
            }
            Instruction::Bl { target } => {
                if self.firmware.contains(&target) {
                    self.gate_resume.push(pc + INSTR_SIZE);
                } else {
                    self.lr = pc + INSTR_SIZE;
                }
                next = target;
            }
            Instruction::Bx { rs } => next = self.read_reg(rs),
            Instruction::Blx { rs } => {
                let target = self.read_reg(rs);
                if self.firmware.contains(&target) {
                    self.gate_resume.push(pc + INSTR_SIZE);
                } else {
                    self.lr = pc + INSTR_SIZE;
                }
                next = target;
            }
            Instruction::Ret => next = self.lr,
            Instruction::NscCall { target } => {
                let idx = self.region_at(target);
                let in_nsc = idx
                    .map(|i| self.regions[i].world == RegionWorld::NonSecureCallable)
                    .unwrap_or(false);
                if !in_nsc {
                    return Err(Fault::new(
                        FaultKind::SecureAccessFault,
                        pc,
                        format!("nsc_call target 0x{target:x} is not a gateway"),
                    ));
                }
                if self.firmware.contains(&target) {
                    self.gate_resume.push(pc + INSTR_SIZE);
                } else {
                    self.lr = pc + INSTR_SIZE;
                }
                next = target;
            }
            Instruction::Wfi => {}
            Instruction::Halt => halted = true,
        }

        self.pc = next;
        self.retired += 1;

        // Timer and schedule tick on retired instructions.
        if let Some(t) = &mut self.timer {
            if t.remaining > 0 {
                t.remaining -= 1;
            }
            if t.remaining == 0 {
                let irq = t.irq;
                let reload = t.reload;
                match reload {
                    Some(n) => t.remaining = n,
                    None => self.timer = None,
                }
                self.nvic.pending.insert(irq);
            }
        }
        let retired = self.retired;
        let mut i = 0;
        while i < self.schedule.len() {
            if self.schedule[i].0 <= retired {
                let (_, irq) = self.schedule.remove(i);
                self.nvic.pending.insert(irq);
            } else {
                i += 1;
            }
        }

        let irq = if halted { None } else { self.check_interrupts()? };
        Ok(StepEvent::Executed { pc, irq, halted })
    }

    /// Takes the highest-priority pending interrupt if it may run now.
    /// Returns the IRQ that entered, if any.
    pub fn check_interrupts(&mut self) -> Result<Option<IrqId>, Fault> {
        if self.world != World::NonSecure {
            return Ok(None);
        }
        let best = self
            .nvic
            .pending
            .iter()
            .copied()
            .min_by_key(|&irq| (self.nvic.priorities[irq as usize], irq));
        let Some(irq) = best else { return Ok(None) };
        if self.mode == Mode::Handler {
            if !self.nvic.preemption_enabled {
                return Ok(None);
            }
            let current = *self.nvic.active.last().expect("handler mode with no active irq");
            if self.nvic.priorities[irq as usize] >= self.nvic.priorities[current as usize] {
                return Ok(None);
            }
        }
        self.exception_entry(irq)?;
        Ok(Some(irq))
    }

    /// Hardware exception entry: stack the 8-word frame and vector through
    /// the IVT selected by ITNS.
    fn exception_entry(&mut self, irq: IrqId) -> Result<(), Fault> {
        let frame = [
            self.regs[0],
            self.regs[1],
            self.regs[2],
            self.regs[3],
            self.regs[12],
            self.lr,
            self.pc,
            self.flags.to_word(),
        ];
        let new_sp = self.sp_ns.wrapping_sub(32);
        let stack_region = self.region_at(self.sp_ns.wrapping_sub(4));
        if stack_region.is_none() || self.region_at(new_sp) != stack_region {
            return Err(Fault::new(
                FaultKind::StackOverflow,
                self.pc,
                format!("exception frame does not fit below sp=0x{:x}", self.sp_ns),
            ));
        }
        for (i, word) in frame.iter().enumerate() {
            self.write_word(new_sp + 4 * i as Word, *word, World::NonSecure).map_err(|e| {
                Fault::new(
                    FaultKind::StackOverflow,
                    self.pc,
                    format!("exception frame push failed: {e}"),
                )
            })?;
        }
        self.sp_ns = new_sp;
        self.nvic.pending.remove(&irq);
        self.nvic.active.push(irq);
        self.mode = Mode::Handler;
        self.lr = EXEC_RETURN;
        match self.nvic.itns[irq as usize] {
            World::Secure => {
                self.pc = self.nvic.secure_ivt[irq as usize];
                self.world = World::Secure;
            }
            World::NonSecure => {
                self.pc = self.nvic.nonsecure_ivt[irq as usize];
                self.world = World::NonSecure;
            }
        }
        Ok(())
    }

    /// Pops the exception frame and resumes the preempted context.
    pub fn exec_return(&mut self) -> Result<(), Fault> {
        if self.mode != Mode::Handler {
            return Err(Fault::new(
                FaultKind::IllegalInstruction,
                self.pc,
                "interrupt return outside handler mode",
            ));
        }
        let sp = self.sp_ns;
        let mut frame = [0 as Word; 8];
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = self.read_word(sp + 4 * i as Word, World::NonSecure)?;
        }
        self.regs[0] = frame[0];
        self.regs[1] = frame[1];
        self.regs[2] = frame[2];
        self.regs[3] = frame[3];
        self.regs[12] = frame[4];
        self.lr = frame[5];
        self.pc = frame[6];
        self.flags = Flags::from_word(frame[7]);
        self.sp_ns = sp + 32;
        self.nvic.active.pop();
        self.mode = if self.nvic.active.is_empty() { Mode::Thread } else { Mode::Handler };
        self.world = World::NonSecure;
        Ok(())
    }

    /// Runs until halt, fault, stop, or budget exhaustion.
    pub fn run(&mut self, fw: &mut dyn FirmwareHandler, cfg: RunConfig) -> RunOutcome {
        let mut trace = Trace::default();
        let mut steps = 0u64;
        let record = |m: &Machine, trace: &mut Trace, pc: Word, event: TraceEvent| {
            if cfg.trace {
                trace.0.push(TraceRecord { retired: m.retired, pc, world: m.world, event });
            }
        };
        loop {
            if steps >= cfg.max_steps {
                return RunOutcome { end: RunEnd::OutOfBudget, trace, steps };
            }
            steps += 1;
            match self.step() {
                Ok(StepEvent::Executed { pc, irq, halted }) => {
                    record(self, &mut trace, pc, TraceEvent::Retire);
                    if let Some(irq) = irq {
                        record(self, &mut trace, self.pc, TraceEvent::IrqEntry(irq));
                    }
                    if halted {
                        record(self, &mut trace, pc, TraceEvent::Halt);
                        return RunOutcome { end: RunEnd::Halted, trace, steps };
                    }
                }
                Ok(StepEvent::ExecReturn { irq }) => {
                    record(self, &mut trace, self.pc, TraceEvent::ExecReturn);
                    if let Some(irq) = irq {
                        record(self, &mut trace, self.pc, TraceEvent::IrqEntry(irq));
                    }
                }
                Ok(StepEvent::FirmwareCall(addr)) => {
                    record(self, &mut trace, addr, TraceEvent::Firmware(addr));
                    match fw.handle(self, addr) {
                        Ok(FwAction::Continue) => {
                            // Interrupts deferred during firmware run here.
                            match self.check_interrupts() {
                                Ok(Some(irq)) => {
                                    record(self, &mut trace, self.pc, TraceEvent::IrqEntry(irq));
                                }
                                Ok(None) => {}
                                Err(fault) => {
                                    record(self, &mut trace, fault.at_pc, TraceEvent::Fault(fault.kind));
                                    return RunOutcome { end: RunEnd::Fault(fault), trace, steps };
                                }
                            }
                        }
                        Ok(FwAction::Stop) => {
                            return RunOutcome { end: RunEnd::Stopped, trace, steps };
                        }
                        Err(fault) => {
                            record(self, &mut trace, fault.at_pc, TraceEvent::Fault(fault.kind));
                            return RunOutcome { end: RunEnd::Fault(fault), trace, steps };
                        }
                    }
                }
                Err(fault) => {
                    record(self, &mut trace, fault.at_pc, TraceEvent::Fault(fault.kind));
                    return RunOutcome { end: RunEnd::Fault(fault), trace, steps };
                }
            }
        }
    }
}
