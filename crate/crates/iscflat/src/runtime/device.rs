//! A simulated device: one machine plus its Secure-World runtime.

use std::collections::BTreeMap;

use crate::runtime::crypto::{KeyMaterial, CHL_LEN};
use crate::runtime::{
    AppInfo, AttestMode, OutSource, Report, RuntimeError, SecureRuntime, SessionClose,
    DEFAULT_CFLOG_CAPACITY,
};
use crate::vm::image::Image;
use crate::vm::inst::Program;
use crate::vm::mem::{APP_BASE, APP_SIZE, ISR_BASE, ISR_SIZE, NS_DATA_BASE, NS_DATA_SIZE};
use crate::vm::{Fault, IrqId, Machine, RunConfig, RunEnd, Trace, Word};

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("image does not fit its region: {0}")]
    ImageTooLarge(String),
    #[error("bad image: {0}")]
    BadImage(String),
}

/// Everything needed to build a fresh device.
#[derive(Clone)]
pub struct DeviceConfig {
    pub app: Image,
    pub isrs: Vec<(IrqId, Program)>,
    /// One-shot interrupt schedule: (retired count, irq).
    pub schedule: Vec<(u64, IrqId)>,
    pub priorities: Vec<(IrqId, u8)>,
    pub preemption: bool,
    pub mode: AttestMode,
    pub keys: KeyMaterial,
    pub cflog_capacity: usize,
    pub max_steps: u64,
    /// Words seeded into Normal-World data memory before the run.
    pub data_pokes: Vec<(Word, Word)>,
    pub out: OutSource,
    pub trace: bool,
}

impl DeviceConfig {
    pub fn new(app: Image, keys: KeyMaterial, mode: AttestMode) -> DeviceConfig {
        DeviceConfig {
            app,
            isrs: Vec::new(),
            schedule: Vec::new(),
            priorities: Vec::new(),
            preemption: true,
            mode,
            keys,
            cflog_capacity: DEFAULT_CFLOG_CAPACITY,
            max_steps: 1_000_000,
            data_pokes: Vec::new(),
            out: OutSource::None,
            trace: true,
        }
    }
}

/// How a driven session ended.
#[derive(Debug, Clone)]
pub enum SessionEnd {
    Report(Report),
    Fault(Fault),
    NoReport(String),
}

impl SessionEnd {
    pub fn report(&self) -> Option<&Report> {
        match self {
            SessionEnd::Report(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub end: SessionEnd,
    pub trace: Trace,
    pub steps: u64,
    pub retired: u64,
}

pub struct Device {
    pub machine: Machine,
    pub runtime: SecureRuntime,
    max_steps: u64,
    trace: bool,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Device, DeviceError> {
        let app = &config.app;
        if app.base < APP_BASE || app.base + app.code.len() as Word > APP_BASE + APP_SIZE {
            return Err(DeviceError::ImageTooLarge(format!(
                "app [0x{:x}, 0x{:x})",
                app.base,
                app.base + app.code.len() as Word
            )));
        }
        if app.code.len() % 4 != 0 {
            return Err(DeviceError::BadImage("code length not word aligned".into()));
        }

        let mut machine = Machine::with_standard_map();
        machine.load_bytes(app.base, &app.code);
        for (irq, isr) in &config.isrs {
            let end = isr.base + isr.len_bytes();
            if isr.base < ISR_BASE || end > ISR_BASE + ISR_SIZE {
                return Err(DeviceError::ImageTooLarge(format!(
                    "isr {irq} [0x{:x}, 0x{end:x})",
                    isr.base
                )));
            }
            machine.load_program(isr);
            machine.nvic.nonsecure_ivt[*irq as usize] = isr.base;
        }
        for (irq, prio) in &config.priorities {
            machine.nvic.priorities[*irq as usize] = *prio;
        }
        machine.nvic.preemption_enabled = config.preemption;
        machine.schedule = config.schedule.clone();
        for (addr, value) in &config.data_pokes {
            if *addr < NS_DATA_BASE || *addr >= NS_DATA_BASE + NS_DATA_SIZE {
                return Err(DeviceError::BadImage(format!("data poke outside data region: 0x{addr:x}")));
            }
            machine.load_bytes(*addr, &value.to_le_bytes());
        }

        let inverse_map: BTreeMap<Word, Word> =
            app.addr_map.iter().map(|(&orig, &new)| (new, orig)).collect();
        let info = AppInfo {
            base: app.base,
            code_len: app.code.len(),
            entry_pc: app.entry,
            gate_log_map: app.gate_log_map.clone(),
            inverse_map,
        };
        let mut runtime = SecureRuntime::new(config.keys, info, config.mode);
        runtime.cflog_capacity = config.cflog_capacity;
        runtime.out_source = config.out;
        SecureRuntime::register(&mut machine);

        Ok(Device { machine, runtime, max_steps: config.max_steps, trace: config.trace })
    }

    /// Starts an attestation session for the given challenge.
    pub fn start_attestation(&mut self, chl: [u8; CHL_LEN]) -> Result<(), RuntimeError> {
        self.runtime.ism_initialize(&mut self.machine, chl)
    }

    /// Runs the started session to its end.
    pub fn run_session(&mut self) -> SessionResult {
        let cfg = RunConfig { max_steps: self.max_steps, trace: self.trace };
        let out = self.machine.run(&mut self.runtime, cfg);
        let end = match out.end {
            RunEnd::Halted => SessionEnd::NoReport("halted without finalization".into()),
            RunEnd::OutOfBudget => SessionEnd::NoReport("step budget exhausted".into()),
            RunEnd::Fault(f) => SessionEnd::Fault(f),
            RunEnd::Stopped => match self.runtime.take_close() {
                Some(SessionClose::Finalized(report)) => SessionEnd::Report(report),
                Some(SessionClose::Refused(why)) => SessionEnd::NoReport(format!("refused: {why}")),
                Some(SessionClose::RuntimeError(e)) => SessionEnd::NoReport(e.to_string()),
                None => SessionEnd::NoReport("stopped".into()),
            },
        };
        SessionResult { end, trace: out.trace, steps: out.steps, retired: self.machine.retired }
    }

    /// Convenience: attest and run in one call.
    pub fn attest(&mut self, chl: [u8; CHL_LEN]) -> Result<SessionResult, RuntimeError> {
        self.start_attestation(chl)?;
        Ok(self.run_session())
    }
}
