//! Built-in scenario corpus: one benign interrupt scenario plus the
//! interrupt-based and engine-level attacks, each with its expected
//! outcome per mode.
//!
//! Interrupt fire points are calibrated against a dry run of the benign
//! instrumented application, so the attacks land at the intended spots
//! regardless of instrumentation layout.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cfg::{extract_cfg, ControlFlowGraph};
use crate::harness::{Expectation, HarnessError, RejectReason, Scenario, Tamper};
use crate::instrument::{instrument, InstrumentConfig, InstrumentedProgram};
use crate::runtime::crypto::{cflog_bytes, hash, Digest, KeyMaterial};
use crate::runtime::device::{Device, DeviceConfig, SessionEnd};
use crate::runtime::AttestMode;
use crate::vm::asm::Asm;
use crate::vm::image::Image;
use crate::vm::inst::{Cond, Program, R0, R1, R10, R11, R2, R4, R5, R8, SP};
use crate::vm::mem::{
    APP_BASE, ISR_BASE, ITNS_PAGE_BASE, MPU_PAGE_BASE, NS_DATA_BASE, SECURE_IVT_BASE,
};
use crate::vm::{FaultKind, IrqId, TraceEvent, Word};

pub struct BuiltCorpus {
    pub scenarios: Vec<Scenario>,
    pub keys: KeyMaterial,
}

/// Addresses of interest inside the interrupt-target application, in
/// original address space.
struct TargetApp {
    program: Program,
    resume: Word,
    skip: Word,
    gadget_lo: Word,
    gadget_hi: Word,
}

/// Two-armed application: a long hot node, a cold node that never runs on
/// the benign path, and a final return. The named offsets sit inside the
/// node bodies, away from any gate.
fn target_app() -> TargetApp {
    let mut a = Asm::new(APP_BASE);
    a.mov_imm(R4, 1).mov_imm(R5, 0).cmp_imm(R4, 0).bcc(Cond::Eq, "cold");
    a.label("hot");
    a.filler(64);
    a.b("end");
    a.label("cold");
    a.filler(88);
    a.b("end");
    a.label("end").mov_reg(R0, R5).ret();
    let hot = a.resolve_label("hot");
    let cold = a.resolve_label("cold");
    TargetApp {
        program: a.assemble(),
        resume: hot + 8 * 4,
        skip: hot + 40 * 4,
        gadget_lo: cold + 8 * 4,
        gadget_hi: cold + 40 * 4,
    }
}

fn instrument_app(program: &Program) -> Result<(Image, ControlFlowGraph, InstrumentedProgram), HarnessError> {
    let cfg = extract_cfg(program)
        .map_err(|e| HarnessError::Malformed("corpus".into(), e.to_string()))?;
    let ins = instrument(program, &cfg, InstrumentConfig::default())
        .map_err(|e| HarnessError::Malformed("corpus".into(), e.to_string()))?;
    Ok((ins.to_image(), cfg, ins))
}

/// Handler that rewrites the stacked return pc to `target`.
fn retaddr_isr(base: Word, target: Word) -> Program {
    let mut i = Asm::new(base);
    i.mov_reg(R1, SP).mov_imm(R2, target as u16).store(R2, R1, 24).ret();
    i.assemble()
}

/// Handler that stores `value` to an absolute address and returns.
fn poke_isr(base: Word, addr: Word, value: u16) -> Program {
    let mut i = Asm::new(base);
    i.mov_imm(R1, addr as u16).mov_imm(R2, value).store(R2, R1, 0).ret();
    i.assemble()
}

fn benign_isr(base: Word) -> Program {
    let mut i = Asm::new(base);
    i.mov_imm(R8, 7).add_imm(R8, 1).push(R8).pop(R8).ret();
    i.assemble()
}

/// Dry-runs the instrumented image without interrupts; returns the trace
/// and the produced log.
fn dry_run(image: &Image, keys: &KeyMaterial) -> Result<(crate::vm::Trace, Vec<Word>), HarnessError> {
    let config = DeviceConfig::new(image.clone(), keys.clone(), AttestMode::IscFlat);
    let mut device =
        Device::new(config).map_err(|e| HarnessError::Malformed("corpus".into(), e.to_string()))?;
    let result = device
        .attest([0u8; 32])
        .map_err(|e| HarnessError::Malformed("corpus".into(), e.to_string()))?;
    match result.end {
        SessionEnd::Report(r) => Ok((result.trace, r.cflog)),
        other => Err(HarnessError::Malformed(
            "corpus".into(),
            format!("dry run did not produce a report: {other:?}"),
        )),
    }
}

/// Retired count at which to pend an interrupt so the exception frame
/// saves `pc` as the resume point.
fn fire_before(trace: &crate::vm::Trace, pc: Word) -> Result<u64, HarnessError> {
    trace
        .0
        .iter()
        .find(|r| r.event == TraceEvent::Retire && r.pc == pc)
        .map(|r| r.retired - 1)
        .ok_or_else(|| {
            HarnessError::Malformed("corpus".into(), format!("0x{pc:x} never executed in dry run"))
        })
}

/// Builds the full scenario corpus.
pub fn build(seed: u64) -> Result<BuiltCorpus, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let keys = KeyMaterial::generate(&mut rng);

    let target = target_app();
    let (image, cfg, ins) = instrument_app(&target.program)?;
    let (trace, benign_log) = dry_run(&image, &keys)?;
    let benign_digest: Digest = hash(&cflog_bytes(&benign_log));

    let map = |orig: Word| ins.map_address(orig).expect("target offsets are instructions");
    let fire = fire_before(&trace, map(target.resume))?;
    let irq: IrqId = 3;

    let mut scenarios = Vec::new();
    let mut push = |s: Scenario| scenarios.push(s);

    // Benign interrupt: handler runs mid-node and resumes correctly; the
    // log matches the interrupt-free run in both modes.
    for mode in [AttestMode::IscFlat, AttestMode::Baseline] {
        let name = match mode {
            AttestMode::IscFlat => "benign-interrupt",
            AttestMode::Baseline => "benign-interrupt-baseline",
        };
        let mut s = Scenario::new(
            name,
            mode,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::ReportAccepted,
        );
        s.isrs = vec![(irq, benign_isr(ISR_BASE))];
        s.schedule = vec![(fire, irq)];
        s.expected_log_digest = Some(benign_digest);
        push(s);
    }

    // Return-address hijack: the handler rewrites the stacked pc so the
    // resumed execution skips half the node. Baseline accepts a report
    // whose log matches the benign run; the stack lock turns the write
    // into a fault.
    {
        let isr = retaddr_isr(ISR_BASE, map(target.skip));
        let mut s = Scenario::new(
            "retaddr-hijack-baseline",
            AttestMode::Baseline,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::ReportAcceptedButUnreliable,
        );
        s.isrs = vec![(irq, isr.clone())];
        s.schedule = vec![(fire, irq)];
        s.expected_log_digest = Some(benign_digest);
        push(s);

        let mut s = Scenario::new(
            "retaddr-hijack",
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::Fault(FaultKind::MpuWriteFault),
        );
        s.isrs = vec![(irq, isr)];
        s.schedule = vec![(fire, irq)];
        push(s);
    }

    // Gadget chain: a first handler redirects into the cold node, a timed
    // second one returns to the original spot before any gate runs. The
    // log is indistinguishable from the benign run.
    {
        let isr_a = retaddr_isr(ISR_BASE, map(target.gadget_lo));
        let isr_b = retaddr_isr(ISR_BASE + 0x200, map(target.resume));
        let gadget_len = ((target.gadget_hi - target.gadget_lo) / 4) as u64;
        let fire2 = fire + isr_a.instrs.len() as u64 + gadget_len;
        let isrs = vec![(3 as IrqId, isr_a), (4 as IrqId, isr_b)];
        let schedule = vec![(fire, 3), (fire2, 4)];

        let mut s = Scenario::new(
            "gadget-chain-baseline",
            AttestMode::Baseline,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::ReportAcceptedButUnreliable,
        );
        s.isrs = isrs.clone();
        s.schedule = schedule.clone();
        s.expected_log_digest = Some(benign_digest);
        push(s);

        let mut s = Scenario::new(
            "gadget-chain",
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::Fault(FaultKind::MpuWriteFault),
        );
        s.isrs = isrs;
        s.schedule = schedule;
        push(s);
    }

    // Configuration attacks: handlers write the protected register pages.
    let config_attacks: [(&str, Word); 3] = [
        ("mpu-misconfig", MPU_PAGE_BASE + 12),
        ("itns-rebind", ITNS_PAGE_BASE),
        ("dispatcher-rebind", SECURE_IVT_BASE),
    ];
    for (name, addr) in config_attacks {
        let mut s = Scenario::new(
            name,
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::Fault(FaultKind::SecureAccessFault),
        );
        s.isrs = vec![(irq, poke_isr(ISR_BASE, addr, 0))];
        s.schedule = vec![(fire, irq)];
        push(s);
    }

    // Handler that never gives control back: the session times out and no
    // report exists.
    {
        let mut i = Asm::new(ISR_BASE);
        i.label("spin").b("spin");
        let mut s = Scenario::new(
            "isr-no-return",
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::NoReport,
        );
        s.isrs = vec![(irq, i.assemble())];
        s.schedule = vec![(fire, irq)];
        s.max_steps = 50_000;
        push(s);
    }

    // Fake trampoline: a handler corrupts a function pointer in data
    // memory so an indirect call lands on injected code that invokes the
    // log veneer directly. The logged destination exposes the hijack.
    {
        let ptr = NS_DATA_BASE + 0x40;
        let stub_base = ISR_BASE + 0x400;
        let mut a = Asm::new(APP_BASE);
        // r10/r11 live across the filler, which cycles over r4..r7; the
        // call clobbers lr, so the top-level return address is stacked
        a.push(crate::vm::inst::LR);
        a.mov_label(R10, "callee").mov_imm(R11, ptr as u16).store(R10, R11, 0);
        a.filler(8);
        a.label("window");
        a.filler(8);
        a.load(R10, R11, 0).blx(R10);
        a.mov_imm(R0, 1).pop(crate::vm::inst::LR).ret();
        a.label("callee").add_imm(R1, 1).ret();
        let window = a.resolve_label("window");
        let program = a.assemble();
        let (ft_image, ft_cfg, ft_ins) = instrument_app(&program)?;
        let (ft_trace, _) = dry_run(&ft_image, &keys)?;
        let ft_map = |orig: Word| ft_ins.map_address(orig).expect("window is an instruction");
        let ft_fire = fire_before(&ft_trace, ft_map(window))?;

        let mut stub = Asm::new(stub_base);
        stub.nsc_call(crate::vm::mem::GATE_ENTRY).ret();

        let mut s = Scenario::new(
            "fake-trampoline",
            AttestMode::IscFlat,
            ft_image.clone(),
            ft_image,
            ft_cfg,
            Expectation::ReportRejected(RejectReason::ControlFlow),
        );
        s.isrs = vec![(irq, poke_isr(ISR_BASE, ptr, stub_base as u16)), (15, stub.assemble())];
        s.schedule = vec![(ft_fire, irq)];
        push(s);
    }

    // Stripped instrumentation: the device runs the plain binary. The
    // report signs a digest the verifier does not expect.
    {
        let mut raw = Image::from_program(&target.program);
        raw.entry = target.program.base;
        let s = Scenario::new(
            "strip-instrumentation",
            AttestMode::IscFlat,
            raw,
            image.clone(),
            cfg.clone(),
            Expectation::ReportRejected(RejectReason::Binary),
        );
        push(s);
    }

    // Forged signature over the desired log.
    {
        let mut s = Scenario::new(
            "forge-signature",
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::ReportRejected(RejectReason::Signature),
        );
        s.tamper = Tamper::ForgeSigma;
        push(s);
    }

    // Replayed report: the challenge is single use.
    {
        let mut s = Scenario::new(
            "report-replay",
            AttestMode::IscFlat,
            image.clone(),
            image.clone(),
            cfg.clone(),
            Expectation::ReportRejected(RejectReason::Stale),
        );
        s.tamper = Tamper::Replay;
        push(s);
    }

    // Log flood: a loop overflows the fixed log buffer; finalization
    // refuses to sign a poisoned log.
    {
        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R4, 600).b("loop");
        a.label("loop").sub_imm(R4, 1).cmp_imm(R4, 0).bcc(Cond::Ne, "loop").ret();
        let (flood_image, flood_cfg, _) = instrument_app(&a.assemble())?;
        let mut s = Scenario::new(
            "log-flood",
            AttestMode::IscFlat,
            flood_image.clone(),
            flood_image,
            flood_cfg,
            Expectation::NoReport,
        );
        s.max_steps = 100_000;
        push(s);
    }

    Ok(BuiltCorpus { scenarios, keys })
}
