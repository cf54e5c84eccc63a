//! Memory map, world attribution and the Non-Secure MPU.
//!
//! The address space is 64 KiB of byte-addressable RAM plus a handful of
//! register pages that are backed by controller state rather than plain
//! bytes. Each region carries a world attribution (the SAU view) and static
//! permissions. For Non-Secure accesses the effective permissions are the
//! conjunction of the static permissions and every enabled NS-MPU rule that
//! covers the address.

use serde::{Deserialize, Serialize};

use crate::vm::Word;

/// Total size of the simulated address space.
pub const MEM_SIZE: usize = 0x1_0000;

/// Reserved program-counter value that triggers the interrupt-return
/// sequence when fetched.
pub const EXEC_RETURN: Word = 0xffff_ffff;

/// Number of interrupt lines.
pub const NUM_IRQS: usize = 16;

/// Number of NS-MPU rule slots.
pub const MPU_SLOTS: usize = 8;

// Fixed memory map. The layout is documented in the README; all tooling
// (instrumenter defaults, device builder, scenario files) uses these
// constants.
pub const SECURE_CODE_BASE: Word = 0x0000;
pub const SECURE_CODE_SIZE: Word = 0x1000;
pub const SECURE_RAM_BASE: Word = 0x1000;
pub const SECURE_RAM_SIZE: Word = 0x1000;
pub const NSC_BASE: Word = 0x2000;
pub const NSC_SIZE: Word = 0x0100;
pub const MPU_PAGE_BASE: Word = 0x3000;
pub const MPU_PAGE_SIZE: Word = 0x0100;
pub const ITNS_PAGE_BASE: Word = 0x3100;
pub const ITNS_PAGE_SIZE: Word = 0x0100;
pub const SECURE_IVT_BASE: Word = 0x3200;
pub const SECURE_IVT_SIZE: Word = 0x0100;
pub const NS_IVT_BASE: Word = 0x3300;
pub const NS_IVT_SIZE: Word = 0x0100;
pub const APP_BASE: Word = 0x4000;
pub const APP_SIZE: Word = 0x4000;
pub const ISR_BASE: Word = 0x8000;
pub const ISR_SIZE: Word = 0x2000;
pub const NS_DATA_BASE: Word = 0xa000;
pub const NS_DATA_SIZE: Word = 0x2000;
pub const NS_STACK_BASE: Word = 0xc000;
pub const NS_STACK_SIZE: Word = 0x4000;
/// Initial Non-Secure stack pointer (stack grows down).
pub const NS_STACK_TOP: Word = NS_STACK_BASE + NS_STACK_SIZE;
/// Initial Secure stack pointer.
pub const SECURE_STACK_TOP: Word = SECURE_RAM_BASE + SECURE_RAM_SIZE;

// Fixed firmware entry points. The gate veneers live in the NSC region so
// Normal World code can call them; the dispatcher vector lives in Secure
// code and is only reachable through exception entry.
pub const GATE_ENTRY: Word = NSC_BASE;
pub const GATE_DEST: Word = NSC_BASE + 0x10;
pub const FINALIZE_GATE: Word = NSC_BASE + 0x20;
pub const DISPATCH_RETURN: Word = NSC_BASE + 0x30;
pub const DISPATCH_ENTRY: Word = SECURE_CODE_BASE + 0x100;

/// CPU security state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum World {
    Secure,
    NonSecure,
}

/// World attribution of a memory region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionWorld {
    Secure,
    NonSecure,
    NonSecureCallable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub const fn rwx() -> Perms {
        Perms { read: true, write: true, exec: true }
    }
    pub const fn rw() -> Perms {
        Perms { read: true, write: true, exec: false }
    }
    pub const fn rx() -> Perms {
        Perms { read: true, write: false, exec: true }
    }
    pub const fn ro() -> Perms {
        Perms { read: true, write: false, exec: false }
    }
}

/// What a region's bytes are backed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Ram,
    MpuPage,
    ItnsPage,
    SecureIvtPage,
    NsIvtPage,
}

#[derive(Debug, Clone)]
pub struct MemoryRegion {
    pub name: &'static str,
    pub base: Word,
    pub size: Word,
    pub world: RegionWorld,
    pub perms: Perms,
    pub kind: RegionKind,
}

impl MemoryRegion {
    pub fn contains(&self, addr: Word) -> bool {
        addr >= self.base && addr - self.base < self.size
    }
}

/// One NS-MPU rule. Applies to Non-Secure accesses within [base, base+size).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpuRule {
    pub base: Word,
    pub size: Word,
    pub perms: Perms,
}

impl MpuRule {
    pub fn covers(&self, addr: Word) -> bool {
        addr >= self.base && addr.wrapping_sub(self.base) < self.size
    }
}

/// The NS-MPU: a fixed array of optional rule slots. Rules restrict write
/// and execute; reads are governed by the static region permissions alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mpu {
    pub slots: [Option<MpuRule>; MPU_SLOTS],
}

impl Mpu {
    pub fn allows(&self, addr: Word, access: Access) -> bool {
        self.slots.iter().flatten().filter(|r| r.covers(addr)).all(|r| match access {
            Access::Read => true,
            Access::Write => r.perms.write,
            Access::Exec => r.perms.exec,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Exec,
}

/// Builds the standard region table.
pub fn standard_regions() -> Vec<MemoryRegion> {
    vec![
        MemoryRegion {
            name: "secure_code",
            base: SECURE_CODE_BASE,
            size: SECURE_CODE_SIZE,
            world: RegionWorld::Secure,
            perms: Perms::rx(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "secure_ram",
            base: SECURE_RAM_BASE,
            size: SECURE_RAM_SIZE,
            world: RegionWorld::Secure,
            perms: Perms::rw(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "nsc_veneers",
            base: NSC_BASE,
            size: NSC_SIZE,
            world: RegionWorld::NonSecureCallable,
            perms: Perms::rx(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "mpu_config",
            base: MPU_PAGE_BASE,
            size: MPU_PAGE_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rw(),
            kind: RegionKind::MpuPage,
        },
        MemoryRegion {
            name: "itns",
            base: ITNS_PAGE_BASE,
            size: ITNS_PAGE_SIZE,
            world: RegionWorld::Secure,
            perms: Perms::rw(),
            kind: RegionKind::ItnsPage,
        },
        MemoryRegion {
            name: "secure_ivt",
            base: SECURE_IVT_BASE,
            size: SECURE_IVT_SIZE,
            world: RegionWorld::Secure,
            perms: Perms::rw(),
            kind: RegionKind::SecureIvtPage,
        },
        MemoryRegion {
            name: "ns_ivt",
            base: NS_IVT_BASE,
            size: NS_IVT_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rw(),
            kind: RegionKind::NsIvtPage,
        },
        MemoryRegion {
            name: "app_code",
            base: APP_BASE,
            size: APP_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rwx(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "isr_code",
            base: ISR_BASE,
            size: ISR_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rwx(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "ns_data",
            base: NS_DATA_BASE,
            size: NS_DATA_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rw(),
            kind: RegionKind::Ram,
        },
        MemoryRegion {
            name: "ns_stack",
            base: NS_STACK_BASE,
            size: NS_STACK_SIZE,
            world: RegionWorld::NonSecure,
            perms: Perms::rw(),
            kind: RegionKind::Ram,
        },
    ]
}

/// Index of a named region in the standard table.
pub fn region_index(name: &str) -> Option<usize> {
    standard_regions().iter().position(|r| r.name == name)
}
