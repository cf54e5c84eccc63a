//! Instruction-count overhead measurement.
//!
//! Wall-clock numbers are meaningless in a simulator, so costs are
//! reported in retired instructions and machine events. Gate cost is
//! measured by differencing an instrumented run against the original
//! program; dispatcher cost as the event distance around each interrupt.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::cfg::extract_cfg;
use crate::instrument::{instrument, InstrumentConfig, StubGates};
use crate::runtime::crypto::KeyMaterial;
use crate::runtime::device::{Device, DeviceConfig, SessionEnd};
use crate::runtime::AttestMode;
use crate::synth::{random_app, random_isr, AppShape};
use crate::vm::asm::Asm;
use crate::vm::inst::Program;
use crate::vm::mem::{GATE_DEST, GATE_ENTRY, ISR_BASE, ISR_SIZE};
use crate::vm::{Machine, NoFirmware, RunConfig, RunEnd, TraceEvent};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("sample program failed: {0}")]
    Sample(String),
}

/// One gate-cost sample: a program run with and without instrumentation.
#[derive(Debug, Clone, Serialize)]
pub struct GateCostSample {
    pub original_retired: u64,
    pub instrumented_retired: u64,
    pub entry_gate_events: u64,
    pub dest_gate_events: u64,
    /// retired-instruction surplus not explained by
    /// `entry_gates * entry_cost + dest_gates * dest_cost`
    pub residual: i64,
}

/// Per-gate instruction costs: one inserted branch per entry or static
/// exit gate, a push plus a branch per destination gate.
pub const ENTRY_GATE_COST: u64 = 1;
pub const DEST_GATE_COST: u64 = 2;

/// Runs one program twice and accounts for every extra retired
/// instruction.
pub fn gate_cost_sample(program: &Program) -> Result<GateCostSample, BenchError> {
    let cfg = extract_cfg(program).map_err(|e| BenchError::Sample(e.to_string()))?;
    let ins = instrument(program, &cfg, InstrumentConfig::default())
        .map_err(|e| BenchError::Sample(e.to_string()))?;

    // both runs return into a halt stub
    let halt_stub = ISR_BASE + ISR_SIZE - 4;
    let run_cfg = RunConfig { max_steps: 200_000, trace: true };

    let mut m0 = Machine::with_standard_map();
    m0.load_program(program);
    m0.load_program(&Program::new(halt_stub, vec![crate::vm::Instruction::Halt]));
    m0.pc = program.base;
    m0.lr = halt_stub;
    let out0 = m0.run(&mut NoFirmware, run_cfg);
    if out0.end != RunEnd::Halted {
        return Err(BenchError::Sample(format!("original run: {:?}", out0.end)));
    }

    let mut m1 = Machine::with_standard_map();
    m1.load_program(&ins.program);
    m1.load_program(&Program::new(halt_stub, vec![crate::vm::Instruction::Halt]));
    m1.pc = ins.entry_pc;
    m1.lr = halt_stub;
    m1.register_firmware(ins.gate_entry);
    m1.register_firmware(ins.gate_dest);
    let mut stub = StubGates { gate_dest: ins.gate_dest };
    let out1 = m1.run(&mut stub, run_cfg);
    if out1.end != RunEnd::Halted {
        return Err(BenchError::Sample(format!("instrumented run: {:?}", out1.end)));
    }

    let entry_gate_events = out1
        .trace
        .0
        .iter()
        .filter(|r| r.event == TraceEvent::Firmware(GATE_ENTRY))
        .count() as u64;
    let dest_gate_events = out1
        .trace
        .0
        .iter()
        .filter(|r| r.event == TraceEvent::Firmware(GATE_DEST))
        .count() as u64;
    let extra = m1.retired as i64 - m0.retired as i64;
    let residual =
        extra - (entry_gate_events * ENTRY_GATE_COST + dest_gate_events * DEST_GATE_COST) as i64;
    Ok(GateCostSample {
        original_retired: m0.retired,
        instrumented_retired: m1.retired,
        entry_gate_events,
        dest_gate_events,
        residual,
    })
}

/// Gate costs over seeded random programs.
pub fn gate_cost_suite(seed: u64, samples: usize) -> Result<Vec<GateCostSample>, BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let app = random_app(&mut rng, AppShape::default());
            gate_cost_sample(&app)
        })
        .collect()
}

/// One dispatcher sample: event distances around a single interrupt.
#[derive(Debug, Clone, Serialize)]
pub struct DispatchSample {
    pub isr_len: usize,
    /// records from exception entry to the first handler instruction
    pub latency: u64,
    /// records from the handler's return to the resumed instruction
    pub backtrip: u64,
}

/// Measures interrupt latency and backtrip for a given handler length.
pub fn dispatch_sample(
    mode: AttestMode,
    isr_len: usize,
    seed: u64,
) -> Result<DispatchSample, BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut a = Asm::new(crate::vm::mem::APP_BASE);
    a.filler(40).ret();
    let app = a.assemble();
    let cfg = extract_cfg(&app).map_err(|e| BenchError::Sample(e.to_string()))?;
    let ins = instrument(&app, &cfg, InstrumentConfig::default())
        .map_err(|e| BenchError::Sample(e.to_string()))?;
    let isr = random_isr(&mut rng, ISR_BASE, isr_len.max(1));
    let keys = KeyMaterial::generate(&mut rng);

    let mut config = DeviceConfig::new(ins.to_image(), keys, mode);
    config.isrs = vec![(3, isr.clone())];
    config.schedule = vec![(10, 3)];
    let mut device = Device::new(config).map_err(|e| BenchError::Sample(e.to_string()))?;
    device.start_attestation([0u8; 32]).map_err(|e| BenchError::Sample(e.to_string()))?;
    let result = device.run_session();
    if !matches!(result.end, SessionEnd::Report(_)) {
        return Err(BenchError::Sample(format!("session: {:?}", result.end)));
    }

    let recs = &result.trace.0;
    let in_isr = |pc: crate::vm::Word| (ISR_BASE..ISR_BASE + ISR_SIZE).contains(&pc);

    let entry_idx = recs
        .iter()
        .position(|r| matches!(r.event, TraceEvent::IrqEntry(_)))
        .ok_or_else(|| BenchError::Sample("interrupt never fired".into()))?;
    let first_isr = recs[entry_idx..]
        .iter()
        .position(|r| r.event == TraceEvent::Retire && in_isr(r.pc))
        .ok_or_else(|| BenchError::Sample("handler never ran".into()))?;
    let last_isr_rel = recs[entry_idx..]
        .iter()
        .rposition(|r| r.event == TraceEvent::Retire && in_isr(r.pc))
        .expect("handler retired at least once");
    let last_isr = entry_idx + last_isr_rel;
    let resumed = recs[last_isr..]
        .iter()
        .position(|r| r.event == TraceEvent::Retire && !in_isr(r.pc))
        .ok_or_else(|| BenchError::Sample("application never resumed".into()))?;

    Ok(DispatchSample {
        isr_len: isr.instrs.len(),
        latency: first_isr as u64,
        backtrip: resumed as u64,
    })
}

/// Dispatcher costs across handlers of varying length.
pub fn dispatch_suite(
    mode: AttestMode,
    seed: u64,
    samples: usize,
) -> Result<Vec<DispatchSample>, BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..samples)
        .map(|i| {
            let len = 1 + (rand::Rng::gen_range(&mut rng, 0..50) as usize);
            dispatch_sample(mode, len, seed ^ (i as u64) << 16)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadSummary {
    pub gate_samples: usize,
    pub entry_gate_cost: u64,
    pub dest_gate_cost: u64,
    pub gate_residual_max: i64,
    pub baseline_latency: u64,
    pub baseline_backtrip: u64,
    pub dispatcher_latency: u64,
    pub dispatcher_backtrip: u64,
    pub dispatch_samples: usize,
    pub dispatch_variance_zero: bool,
}

/// Runs both suites and condenses the result.
pub fn measure(seed: u64, samples: usize) -> Result<OverheadSummary, BenchError> {
    let gates = gate_cost_suite(seed, samples)?;
    let residual_max = gates.iter().map(|g| g.residual.abs()).max().unwrap_or(0);

    let base = dispatch_suite(AttestMode::Baseline, seed.wrapping_add(1), samples.min(32))?;
    let disp = dispatch_suite(AttestMode::IscFlat, seed.wrapping_add(2), samples.min(32))?;
    let constant = |xs: &[u64]| xs.windows(2).all(|w| w[0] == w[1]);
    let lat_b: Vec<u64> = base.iter().map(|s| s.latency).collect();
    let back_b: Vec<u64> = base.iter().map(|s| s.backtrip).collect();
    let lat_d: Vec<u64> = disp.iter().map(|s| s.latency).collect();
    let back_d: Vec<u64> = disp.iter().map(|s| s.backtrip).collect();

    Ok(OverheadSummary {
        gate_samples: gates.len(),
        entry_gate_cost: ENTRY_GATE_COST,
        dest_gate_cost: DEST_GATE_COST,
        gate_residual_max: residual_max,
        baseline_latency: lat_b[0],
        baseline_backtrip: back_b[0],
        dispatcher_latency: lat_d[0],
        dispatcher_backtrip: back_d[0],
        dispatch_samples: base.len() + disp.len(),
        dispatch_variance_zero: constant(&lat_b)
            && constant(&back_b)
            && constant(&lat_d)
            && constant(&back_d),
    })
}

impl OverheadSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "gate cost ({} samples, max residual {}):\n",
            self.gate_samples, self.gate_residual_max
        ));
        s.push_str(&format!(
            "  entry/static-exit gate: {} instruction(s) per event\n",
            self.entry_gate_cost
        ));
        s.push_str(&format!(
            "  destination gate:       {} instruction(s) per event\n",
            self.dest_gate_cost
        ));
        s.push_str(&format!(
            "interrupt path ({} samples, variance zero: {}):\n",
            self.dispatch_samples, self.dispatch_variance_zero
        ));
        s.push_str(&format!(
            "  latency  (events to handler): baseline {}  dispatcher {}  (+{})\n",
            self.baseline_latency,
            self.dispatcher_latency,
            self.dispatcher_latency - self.baseline_latency
        ));
        s.push_str(&format!(
            "  backtrip (events to resume):  baseline {}  dispatcher {}  (+{})\n",
            self.baseline_backtrip,
            self.dispatcher_backtrip,
            self.dispatcher_backtrip as i64 - self.baseline_backtrip as i64
        ));
        s
    }
}
