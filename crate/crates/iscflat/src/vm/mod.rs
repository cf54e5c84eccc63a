//! Deterministic interpreter for a small 32-bit MCU with TrustZone-style
//! world isolation, a dual-IVT interrupt controller and an instruction-count
//! timer.

pub mod asm;
pub mod image;
pub mod inst;
pub mod machine;
pub mod mem;

/// Machine word. Addresses and data share this width.
pub type Word = u32;

pub use inst::{Cond, Instruction, Operand, Program, Reg, INSTR_SIZE};
pub use machine::{
    Fault, FaultKind, FirmwareHandler, Flags, FwAction, IrqId, Machine, Mode, NoFirmware,
    NopGates, Nvic, RunConfig, RunEnd, RunOutcome, StepEvent, Timer, Trace, TraceEvent,
    TraceRecord,
};
pub use mem::{
    Access, MemoryRegion, Mpu, MpuRule, Perms, RegionKind, RegionWorld, World, EXEC_RETURN,
};
