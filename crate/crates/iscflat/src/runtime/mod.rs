//! Secure-World runtime: the measurement engine, the interrupt dispatcher
//! and the attestation lifecycle.
//!
//! The runtime is native code driven by machine callbacks: fetches that
//! land on the gate veneers, the dispatcher vector or the finalization
//! gateway trap here instead of decoding guest bytes. One attestation
//! instance exists at a time. Initialization locks down the device,
//! hashes the application, routes every interrupt through the dispatcher
//! and starts the application; the dispatcher saves and locks the
//! interrupted context around every untrusted handler; finalization signs
//! the log and restores the pre-attestation configuration.

pub mod crypto;
pub mod device;

use std::collections::BTreeMap;

use crate::vm::mem::{
    region_index, DISPATCH_ENTRY, DISPATCH_RETURN, FINALIZE_GATE, GATE_DEST, GATE_ENTRY,
    MPU_SLOTS, NUM_IRQS,
};
use crate::vm::{
    Fault, FirmwareHandler, FwAction, IrqId, Machine, MpuRule, Perms, RegionWorld, Word, World,
};
use crypto::{signed_message, Digest, KeyMaterial, CHL_LEN};

/// Default log capacity in bytes.
pub const DEFAULT_CFLOG_CAPACITY: usize = 4096;

/// Maximum dispatcher nesting depth.
pub const MAX_DISPATCH_DEPTH: usize = 8;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("an attestation instance is already active")]
    Busy,
    #[error("refused: {0}")]
    Refused(String),
    #[error("dispatcher stack overflow")]
    DispatcherStackOverflow,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

/// Append-only control-flow log with a fixed byte capacity. Appending past
/// capacity poisons the log; a poisoned log is never signed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfLog {
    pub entries: Vec<Word>,
    pub capacity_bytes: usize,
    pub overflowed: bool,
}

impl CfLog {
    pub fn new(capacity_bytes: usize) -> CfLog {
        CfLog { entries: Vec::new(), capacity_bytes, overflowed: false }
    }

    pub fn append(&mut self, entry: Word) {
        if self.overflowed {
            return;
        }
        if (self.entries.len() + 1) * 4 > self.capacity_bytes {
            self.overflowed = true;
            return;
        }
        self.entries.push(entry);
    }

    pub fn len_bytes(&self) -> usize {
        self.entries.len() * 4
    }
}

/// Attestation mode. `Baseline` runs the measurement engine without the
/// interrupt-safety module: interrupts go straight to their Normal-World
/// handlers and the log stays writable throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttestMode {
    Baseline,
    IscFlat,
}

impl AttestMode {
    pub fn name(self) -> &'static str {
        match self {
            AttestMode::Baseline => "baseline",
            AttestMode::IscFlat => "iscflat",
        }
    }

    pub fn from_name(s: &str) -> Option<AttestMode> {
        match s {
            "baseline" => Some(AttestMode::Baseline),
            "iscflat" => Some(AttestMode::IscFlat),
            _ => None,
        }
    }
}

/// Pre-attestation configuration snapshot, restored by finalization.
#[derive(Debug, Clone)]
struct SavedConfig {
    itns: [World; NUM_IRQS],
    ns_ivt: [Word; NUM_IRQS],
    secure_ivt: [Word; NUM_IRQS],
    mpu: [Option<MpuRule>; MPU_SLOTS],
    mpu_page_world: RegionWorld,
}

/// Per-session state.
#[derive(Debug, Clone)]
pub struct AttestationInstance {
    pub chl: [u8; CHL_LEN],
    pub h_app: Digest,
    pub cflog: CfLog,
    pub lac: bool,
    pub sp0: Word,
    pub active: bool,
    saved: SavedConfig,
}

/// Context saved by the dispatcher around one interrupt.
#[derive(Debug, Clone)]
pub struct DispatcherFrame {
    pub saved_lac: bool,
    pub saved_sp_c: Word,
    pub saved_regs: [Word; 13],
    pub saved_lr: Word,
    pub saved_mpu: [Option<MpuRule>; MPU_SLOTS],
    pub irq: IrqId,
}

/// Signed attestation report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub sigma: Vec<u8>,
    pub cflog: Vec<Word>,
    pub h_app: Digest,
    pub chl: [u8; CHL_LEN],
    pub out: Option<Vec<u8>>,
}

/// Where the optional report output comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutSource {
    #[default]
    None,
    /// The application's r0 at finalization, little endian.
    R0,
}

/// Description of the installed application the runtime measures.
#[derive(Debug, Clone, Default)]
pub struct AppInfo {
    pub base: Word,
    pub code_len: usize,
    pub entry_pc: Word,
    /// Gate return site -> original address to log.
    pub gate_log_map: BTreeMap<Word, Word>,
    /// Rewritten instruction address -> original address.
    pub inverse_map: BTreeMap<Word, Word>,
}

impl AppInfo {
    /// Translates a runtime branch destination back into the original
    /// address space. Destinations normally land on entry gates, whose
    /// return site carries the original node address; unmappable values
    /// are logged raw and left for the verifier to reject.
    pub fn dest_to_original(&self, dest: Word) -> Word {
        if let Some(&orig) = self.inverse_map.get(&dest) {
            return orig;
        }
        if let Some(&orig) = self.gate_log_map.get(&(dest + 4)) {
            return orig;
        }
        dest
    }
}

/// How the session ended, recorded by the firmware handlers.
#[derive(Debug, Clone)]
pub enum SessionClose {
    Finalized(Report),
    Refused(String),
    RuntimeError(RuntimeError),
}

/// The Secure-World runtime state.
pub struct SecureRuntime {
    keys: KeyMaterial,
    pub app: AppInfo,
    pub mode: AttestMode,
    pub cflog_capacity: usize,
    pub out_source: OutSource,
    instance: Option<AttestationInstance>,
    dispatcher: Vec<DispatcherFrame>,
    close: Option<SessionClose>,
}

/// MPU slot used to make application code immutable.
const SLOT_APP_LOCK: usize = 0;
/// MPU slot used to lock the interrupted application's stack.
const SLOT_STACK_LOCK: usize = 1;

impl SecureRuntime {
    pub fn new(keys: KeyMaterial, app: AppInfo, mode: AttestMode) -> SecureRuntime {
        SecureRuntime {
            keys,
            app,
            mode,
            cflog_capacity: DEFAULT_CFLOG_CAPACITY,
            out_source: OutSource::None,
            instance: None,
            dispatcher: Vec::new(),
            close: None,
        }
    }

    /// Registers the firmware trap addresses with a machine.
    pub fn register(machine: &mut Machine) {
        for addr in [GATE_ENTRY, GATE_DEST, FINALIZE_GATE, DISPATCH_RETURN, DISPATCH_ENTRY] {
            machine.register_firmware(addr);
        }
    }

    pub fn public_key(&self) -> crypto::PublicKey {
        self.keys.public_key()
    }

    pub fn instance(&self) -> Option<&AttestationInstance> {
        self.instance.as_ref()
    }

    pub fn dispatcher_depth(&self) -> usize {
        self.dispatcher.len()
    }

    pub fn lac(&self) -> Option<bool> {
        self.instance.as_ref().map(|i| i.lac)
    }

    pub fn cflog(&self) -> Option<&CfLog> {
        self.instance.as_ref().map(|i| &i.cflog)
    }

    pub fn take_close(&mut self) -> Option<SessionClose> {
        self.close.take()
    }

    /// Initialization routine. Rejects overlapping sessions, locks the
    /// device configuration down, measures the application and transfers
    /// control to its entry point.
    pub fn ism_initialize(
        &mut self,
        m: &mut Machine,
        chl: [u8; CHL_LEN],
    ) -> Result<(), RuntimeError> {
        // step 1: one instance at a time
        if self.instance.as_ref().is_some_and(|i| i.active) {
            return Err(RuntimeError::Busy);
        }
        self.close = None;
        self.dispatcher.clear();

        let saved = SavedConfig {
            itns: m.nvic.itns,
            ns_ivt: m.nvic.nonsecure_ivt,
            secure_ivt: m.nvic.secure_ivt,
            mpu: m.mpu.slots,
            mpu_page_world: m.region_world(region_index("mpu_config").expect("standard map")),
        };

        if self.mode == AttestMode::IscFlat {
            // step 2: revoke Normal-World access to the MPU configuration
            let mpu_page = region_index("mpu_config").expect("standard map");
            m.set_region_world(mpu_page, RegionWorld::Secure, World::Secure)
                .expect("secure caller");
            // step 3: application code becomes read-only but executable
            m.configure_mpu(
                SLOT_APP_LOCK,
                Some(MpuRule {
                    base: self.app.base,
                    size: crate::vm::mem::APP_SIZE,
                    perms: Perms::rx(),
                }),
                World::Secure,
            )
            .expect("secure caller");
        }

        // step 4: measure the installed application
        let h_app = crypto::hash(m.read_bytes(self.app.base, self.app.code_len));

        // step 5: interrupt routing
        for irq in 0..NUM_IRQS as IrqId {
            match self.mode {
                AttestMode::IscFlat => {
                    m.set_itns(irq, World::Secure, World::Secure).expect("secure caller");
                    m.set_secure_ivt(irq, DISPATCH_ENTRY, World::Secure).expect("secure caller");
                }
                AttestMode::Baseline => {
                    m.set_itns(irq, World::NonSecure, World::Secure).expect("secure caller");
                }
            }
        }

        // step 6: remember the Normal-World stack pointer
        let sp0 = m.sp_ns;

        // step 7: open the log
        let instance = AttestationInstance {
            chl,
            h_app,
            cflog: CfLog::new(self.cflog_capacity),
            lac: true,
            sp0,
            active: true,
            saved,
        };
        self.instance = Some(instance);

        // step 8: start the application; its top-level return lands on the
        // finalization gateway
        m.pc = self.app.entry_pc;
        m.lr = FINALIZE_GATE;
        m.world = World::NonSecure;
        m.mode = crate::vm::Mode::Thread;
        Ok(())
    }

    /// Entry-gate veneer: logs the caller's original address when the log
    /// is open. Silent towards the Normal World.
    fn gate_entry(&mut self, m: &mut Machine) {
        let resume = m.take_gate_resume().unwrap_or(m.lr);
        if let Some(inst) = self.instance.as_mut().filter(|i| i.active) {
            if inst.lac {
                let logged =
                    self.app.gate_log_map.get(&resume).copied().unwrap_or(resume);
                inst.cflog.append(logged);
            }
        }
        m.pc = resume;
    }

    /// Destination-gate veneer: pops the runtime branch destination, logs
    /// it in original address space and resumes.
    fn gate_dest(&mut self, m: &mut Machine) -> Result<(), Fault> {
        let resume = m.take_gate_resume().unwrap_or(m.lr);
        let sp = m.sp_ns;
        let dest = m.read_word(sp, World::Secure)?;
        m.sp_ns = sp + 4;
        if let Some(inst) = self.instance.as_mut().filter(|i| i.active) {
            if inst.lac {
                let logged = self.app.dest_to_original(dest);
                inst.cflog.append(logged);
            }
        }
        m.pc = resume;
        Ok(())
    }

    /// Dispatcher entry: runs on every interrupt while a session is
    /// active. Saves the application context, locks its stack, closes the
    /// log and forwards to the untrusted handler.
    fn dispatcher_entry(&mut self, m: &mut Machine) -> Result<FwAction, Fault> {
        let irq = *m.nvic.active.last().expect("dispatcher entered outside an exception");
        let handler = m.nvic.nonsecure_ivt[irq as usize];

        let Some(inst) = self.instance.as_mut().filter(|i| i.active) else {
            // No session: pass straight through to the Normal-World handler.
            m.pc = handler;
            m.world = World::NonSecure;
            return Ok(FwAction::Continue);
        };

        if self.dispatcher.len() >= MAX_DISPATCH_DEPTH {
            self.close = Some(SessionClose::RuntimeError(RuntimeError::DispatcherStackOverflow));
            return Ok(FwAction::Stop);
        }

        let sp_c = m.sp_ns;
        self.dispatcher.push(DispatcherFrame {
            saved_lac: inst.lac,
            saved_sp_c: sp_c,
            saved_regs: m.regs,
            saved_lr: m.lr,
            saved_mpu: m.mpu.slots,
            irq,
        });

        // Lock the application's stack span. Bounds ordered to be robust
        // to growth direction.
        let lo = sp_c.min(inst.sp0);
        let hi = sp_c.max(inst.sp0);
        m.configure_mpu(
            SLOT_STACK_LOCK,
            Some(MpuRule { base: lo, size: hi - lo, perms: Perms::ro() }),
            World::Secure,
        )
        .expect("secure caller");

        inst.lac = false;

        m.pc = handler;
        m.lr = DISPATCH_RETURN;
        m.world = World::NonSecure;
        Ok(FwAction::Continue)
    }

    /// Dispatcher exit: the handler returned. Restores the saved context
    /// and performs the hardware interrupt return.
    fn dispatcher_exit(&mut self, m: &mut Machine) -> Result<FwAction, Fault> {
        let Some(frame) = self.dispatcher.pop() else {
            self.close = Some(SessionClose::RuntimeError(RuntimeError::ProtocolViolation(
                "dispatcher return with no outstanding frame".into(),
            )));
            return Ok(FwAction::Stop);
        };
        m.regs = frame.saved_regs;
        m.lr = frame.saved_lr;
        m.sp_ns = frame.saved_sp_c;
        m.mpu.slots = frame.saved_mpu;
        if let Some(inst) = self.instance.as_mut() {
            inst.lac = frame.saved_lac;
        }
        m.exec_return()?;
        Ok(FwAction::Continue)
    }

    /// Finalization routine: signs the log, restores the pre-attestation
    /// configuration and closes the instance.
    fn ism_finalize(&mut self, m: &mut Machine) -> FwAction {
        let refuse = |this: &mut Self, why: &str| {
            this.close = Some(SessionClose::Refused(why.to_string()));
            FwAction::Stop
        };
        let Some(inst) = self.instance.as_ref().filter(|i| i.active) else {
            return refuse(self, "finalization without an active instance");
        };
        if inst.cflog.overflowed {
            return refuse(self, "control-flow log overflowed");
        }
        if !self.dispatcher.is_empty() {
            return refuse(self, "outstanding dispatcher frames");
        }

        let mut inst = self.instance.take().expect("checked above");
        inst.active = false;
        inst.lac = false;

        let out = match self.out_source {
            OutSource::None => None,
            OutSource::R0 => Some(m.regs[0].to_le_bytes().to_vec()),
        };
        let msg = signed_message(&inst.cflog.entries, &inst.h_app, &inst.chl, out.as_deref());
        let sigma = self.keys.sign(&msg);

        // Restore pre-attestation configuration.
        let saved = &inst.saved;
        for irq in 0..NUM_IRQS {
            m.set_itns(irq as IrqId, saved.itns[irq], World::Secure).expect("secure caller");
            m.set_ns_ivt(irq as IrqId, saved.ns_ivt[irq], World::Secure).expect("secure caller");
            m.set_secure_ivt(irq as IrqId, saved.secure_ivt[irq], World::Secure)
                .expect("secure caller");
        }
        m.mpu.slots = saved.mpu;
        let mpu_page = region_index("mpu_config").expect("standard map");
        m.set_region_world(mpu_page, saved.mpu_page_world, World::Secure).expect("secure caller");

        self.close = Some(SessionClose::Finalized(Report {
            sigma,
            cflog: inst.cflog.entries,
            h_app: inst.h_app,
            chl: inst.chl,
            out,
        }));
        FwAction::Stop
    }
}

impl FirmwareHandler for SecureRuntime {
    fn handle(&mut self, m: &mut Machine, addr: Word) -> Result<FwAction, Fault> {
        match addr {
            GATE_ENTRY => {
                self.gate_entry(m);
                Ok(FwAction::Continue)
            }
            GATE_DEST => {
                self.gate_dest(m)?;
                Ok(FwAction::Continue)
            }
            DISPATCH_ENTRY => self.dispatcher_entry(m),
            DISPATCH_RETURN => self.dispatcher_exit(m),
            FINALIZE_GATE => Ok(self.ism_finalize(m)),
            other => Err(Fault {
                kind: crate::vm::FaultKind::IllegalInstruction,
                at_pc: m.pc,
                detail: format!("no firmware at 0x{other:x}"),
            }),
        }
    }
}
