//! Attack-scenario harness.
//!
//! A scenario bundles a device image, untrusted handlers, an interrupt
//! schedule and an expected outcome, and runs end to end: build the
//! device, attest, execute, verify the report. Scenarios run in either
//! mode; `baseline` is the measurement engine without the interrupt
//! safety module.

pub mod corpus;
pub mod format;

use crate::cfg::ControlFlowGraph;
use crate::runtime::crypto::{cflog_bytes, hash, Digest, KeyMaterial, CHL_LEN};
use crate::runtime::device::{Device, DeviceConfig, SessionEnd};
use crate::runtime::{AttestMode, Report};
use crate::verifier::{verify_report, Outcome, VerificationPolicy};
use crate::vm::image::Image;
use crate::vm::inst::Program;
use crate::vm::mem::{APP_BASE, APP_SIZE};
use crate::vm::{FaultKind, IrqId, Trace, Word};

/// Which verification check a rejected report fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Signature,
    Binary,
    Stale,
    ControlFlow,
    Return,
}

impl RejectReason {
    pub fn matches(self, outcome: Outcome) -> bool {
        matches!(
            (self, outcome),
            (RejectReason::Signature, Outcome::RejectSignature)
                | (RejectReason::Binary, Outcome::RejectBinary)
                | (RejectReason::Stale, Outcome::RejectStale)
                | (RejectReason::ControlFlow, Outcome::RejectControlFlow)
                | (RejectReason::Return, Outcome::RejectReturn)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            RejectReason::Signature => "signature",
            RejectReason::Binary => "binary",
            RejectReason::Stale => "stale",
            RejectReason::ControlFlow => "control_flow",
            RejectReason::Return => "return",
        }
    }

    pub fn from_name(s: &str) -> Option<RejectReason> {
        Some(match s {
            "signature" => RejectReason::Signature,
            "binary" => RejectReason::Binary,
            "stale" => RejectReason::Stale,
            "control_flow" => RejectReason::ControlFlow,
            "return" => RejectReason::Return,
            _ => return None,
        })
    }
}

/// Expected end state of a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    ReportAccepted,
    /// Accepted by the verifier although the executed path differed.
    /// Only meaningful in baseline mode.
    ReportAcceptedButUnreliable,
    Fault(FaultKind),
    NoReport,
    ReportRejected(RejectReason),
}

impl Expectation {
    pub fn label(&self) -> String {
        match self {
            Expectation::ReportAccepted => "accepted".into(),
            Expectation::ReportAcceptedButUnreliable => "accepted_unreliable".into(),
            Expectation::Fault(k) => format!("fault:{k}"),
            Expectation::NoReport => "no_report".into(),
            Expectation::ReportRejected(r) => format!("rejected:{}", r.name()),
        }
    }
}

/// Post-run tampering applied to the report before verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tamper {
    #[default]
    None,
    /// Replace the signature with garbage.
    ForgeSigma,
    /// Verify the genuine report twice; score the second verdict.
    Replay,
}

impl Tamper {
    pub fn name(self) -> &'static str {
        match self {
            Tamper::None => "none",
            Tamper::ForgeSigma => "forge_sigma",
            Tamper::Replay => "replay",
        }
    }

    pub fn from_name(s: &str) -> Option<Tamper> {
        Some(match s {
            "none" => Tamper::None,
            "forge_sigma" => Tamper::ForgeSigma,
            "replay" => Tamper::Replay,
            _ => return None,
        })
    }
}

/// One executable attack or benign scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub mode: AttestMode,
    /// Image installed on the device.
    pub installed: Image,
    /// Image the verifier expects (digest source).
    pub reference: Image,
    pub cfg: ControlFlowGraph,
    pub isrs: Vec<(IrqId, Program)>,
    pub schedule: Vec<(u64, IrqId)>,
    pub priorities: Vec<(IrqId, u8)>,
    pub data_pokes: Vec<(Word, Word)>,
    pub tamper: Tamper,
    pub expected: Expectation,
    /// When set, the produced log's digest must equal this value.
    pub expected_log_digest: Option<Digest>,
    pub max_steps: u64,
}

impl Scenario {
    pub fn new(
        name: &str,
        mode: AttestMode,
        installed: Image,
        reference: Image,
        cfg: ControlFlowGraph,
        expected: Expectation,
    ) -> Scenario {
        Scenario {
            name: name.to_string(),
            mode,
            installed,
            reference,
            cfg,
            isrs: Vec::new(),
            schedule: Vec::new(),
            priorities: Vec::new(),
            data_pokes: Vec::new(),
            tamper: Tamper::None,
            expected,
            expected_log_digest: None,
            max_steps: 300_000,
        }
    }

    /// Deterministic per-scenario challenge.
    pub fn challenge(&self) -> [u8; CHL_LEN] {
        hash(self.name.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActualKind {
    Accepted,
    AcceptedUnreliable,
    Fault(FaultKind),
    NoReport,
    Rejected(Outcome),
}

impl ActualKind {
    pub fn label(&self) -> String {
        match self {
            ActualKind::Accepted => "accepted".into(),
            ActualKind::AcceptedUnreliable => "accepted_unreliable".into(),
            ActualKind::Fault(k) => format!("fault:{k}"),
            ActualKind::NoReport => "no_report".into(),
            ActualKind::Rejected(o) => format!("rejected ({})", o.name()),
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, ActualKind::Accepted | ActualKind::AcceptedUnreliable)
    }
}

#[derive(Debug, Clone)]
pub struct ActualOutcome {
    pub kind: ActualKind,
    pub detail: String,
    pub cflog: Option<Vec<Word>>,
    /// Retired program counters within the application region, used for
    /// the executed-path comparison.
    pub app_path: Vec<Word>,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub mode: AttestMode,
    pub expected: Expectation,
    pub actual: ActualOutcome,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("scenario {0}: {1}")]
    Malformed(String, String),
}

fn device_config(scenario: &Scenario, keys: &KeyMaterial) -> DeviceConfig {
    let mut config = DeviceConfig::new(scenario.installed.clone(), keys.clone(), scenario.mode);
    config.isrs = scenario.isrs.clone();
    config.schedule = scenario.schedule.clone();
    config.priorities = scenario.priorities.clone();
    config.data_pokes = scenario.data_pokes.clone();
    config.max_steps = scenario.max_steps;
    config
}

fn app_path(trace: &Trace) -> Vec<Word> {
    trace.retired_pcs_in(APP_BASE, APP_BASE + APP_SIZE)
}

/// Runs the scenario's device without interrupts to obtain the reference
/// executed path.
fn reference_path(scenario: &Scenario, keys: &KeyMaterial) -> Result<Vec<Word>, HarnessError> {
    let mut config = device_config(scenario, keys);
    config.schedule.clear();
    let mut device = Device::new(config)
        .map_err(|e| HarnessError::Malformed(scenario.name.clone(), e.to_string()))?;
    let result = device
        .attest(scenario.challenge())
        .map_err(|e| HarnessError::Malformed(scenario.name.clone(), e.to_string()))?;
    Ok(app_path(&result.trace))
}

fn verify(scenario: &Scenario, report: &Report, keys: &KeyMaterial) -> crate::verifier::Verdict {
    let expected_h_app = hash(&scenario.reference.code);
    let mut policy =
        VerificationPolicy::new(expected_h_app, scenario.cfg.clone(), keys.public_key());
    policy.issue_challenge(scenario.challenge());
    match scenario.tamper {
        Tamper::None => verify_report(report, &mut policy),
        Tamper::ForgeSigma => {
            let mut forged = report.clone();
            for b in &mut forged.sigma {
                *b ^= 0x5a;
            }
            verify_report(&forged, &mut policy)
        }
        Tamper::Replay => {
            let first = verify_report(report, &mut policy);
            if !first.accepted() {
                return first;
            }
            verify_report(report, &mut policy)
        }
    }
}

/// Builds the device, executes the scenario end to end and compares the
/// outcome with the expectation.
pub fn run_scenario(scenario: &Scenario, keys: &KeyMaterial) -> Result<ScenarioResult, HarnessError> {
    let mut device = Device::new(device_config(scenario, keys))
        .map_err(|e| HarnessError::Malformed(scenario.name.clone(), e.to_string()))?;
    let session = device
        .attest(scenario.challenge())
        .map_err(|e| HarnessError::Malformed(scenario.name.clone(), e.to_string()))?;

    let actual = match session.end {
        SessionEnd::Fault(f) => ActualOutcome {
            kind: ActualKind::Fault(f.kind),
            detail: f.to_string(),
            cflog: None,
            app_path: app_path(&session.trace),
        },
        SessionEnd::NoReport(reason) => ActualOutcome {
            kind: ActualKind::NoReport,
            detail: reason,
            cflog: None,
            app_path: app_path(&session.trace),
        },
        SessionEnd::Report(report) => {
            let verdict = verify(scenario, &report, keys);
            let path = app_path(&session.trace);
            if verdict.accepted() {
                let reference = reference_path(scenario, keys)?;
                let unreliable = path != reference;
                ActualOutcome {
                    kind: if unreliable {
                        ActualKind::AcceptedUnreliable
                    } else {
                        ActualKind::Accepted
                    },
                    detail: if unreliable {
                        "verifier accepted, executed path differs from the logged one".into()
                    } else {
                        "verifier accepted".into()
                    },
                    cflog: Some(report.cflog.clone()),
                    app_path: path,
                }
            } else {
                ActualOutcome {
                    kind: ActualKind::Rejected(verdict.outcome),
                    detail: verdict.to_string(),
                    cflog: Some(report.cflog.clone()),
                    app_path: path,
                }
            }
        }
    };

    let mut passed = match (&scenario.expected, &actual.kind) {
        (Expectation::ReportAccepted, ActualKind::Accepted) => true,
        (Expectation::ReportAcceptedButUnreliable, ActualKind::AcceptedUnreliable) => true,
        (Expectation::Fault(want), ActualKind::Fault(got)) => want == got,
        (Expectation::NoReport, ActualKind::NoReport) => true,
        (Expectation::ReportRejected(reason), ActualKind::Rejected(outcome)) => {
            reason.matches(*outcome)
        }
        _ => false,
    };
    if let (Some(want), Some(log)) = (&scenario.expected_log_digest, &actual.cflog) {
        passed &= hash(&cflog_bytes(log)) == *want;
    }

    Ok(ScenarioResult {
        name: scenario.name.clone(),
        mode: scenario.mode,
        expected: scenario.expected.clone(),
        actual,
        passed,
    })
}

/// Runs every scenario and returns the results in order.
pub fn run_corpus(
    scenarios: &[Scenario],
    keys: &KeyMaterial,
) -> Result<Vec<ScenarioResult>, HarnessError> {
    scenarios.iter().map(|s| run_scenario(s, keys)).collect()
}

/// Human-readable pass/fail table.
pub fn render_table(results: &[ScenarioResult]) -> String {
    let mut out = String::new();
    let name_w = results.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
    out.push_str(&format!(
        "{:<name_w$}  {:<8}  {:<22}  {:<28}  result\n",
        "scenario", "mode", "expected", "actual"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<name_w$}  {:<8}  {:<22}  {:<28}  {}\n",
            r.name,
            r.mode.name(),
            r.expected.label(),
            r.actual.kind.label(),
            if r.passed { "pass" } else { "FAIL" },
        ));
    }
    out
}
