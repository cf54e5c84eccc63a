//! Scenario files: a structured-text description naming the images,
//! schedule, mode and expected outcome, so new attacks can be added
//! without rebuilding.
//!
//! ```text
//! scenario v1
//! name retaddr-hijack
//! mode iscflat
//! app retaddr-hijack.app.img
//! ref retaddr-hijack.ref.img
//! cfg retaddr-hijack.cfg
//! isr 3 retaddr-hijack.isr3.img
//! schedule 57 3
//! tamper none
//! expect fault:mpu_write
//! max_steps 300000
//! ```
//!
//! Paths are relative to the scenario file.

use std::path::{Path, PathBuf};

use crate::cfg::ControlFlowGraph;
use crate::harness::{Expectation, RejectReason, Scenario, Tamper};
use crate::runtime::AttestMode;
use crate::vm::image::Image;
use crate::vm::{FaultKind, Word};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioFileError {
    #[error("{0}: line {1}: {2}")]
    Parse(PathBuf, usize, String),
    #[error("{0}: missing field {1}")]
    Missing(PathBuf, &'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad image: {0}")]
    Image(String),
}

fn fault_name(kind: FaultKind) -> String {
    kind.to_string()
}

fn fault_from_name(s: &str) -> Option<FaultKind> {
    Some(match s {
        "secure_access" => FaultKind::SecureAccessFault,
        "mpu_write" => FaultKind::MpuWriteFault,
        "mpu_exec" => FaultKind::MpuExecFault,
        "alignment" => FaultKind::AlignmentFault,
        "illegal_instruction" => FaultKind::IllegalInstruction,
        "stack_overflow" => FaultKind::StackOverflow,
        _ => return None,
    })
}

fn expectation_text(e: &Expectation) -> String {
    match e {
        Expectation::ReportAccepted => "accepted".into(),
        Expectation::ReportAcceptedButUnreliable => "accepted_unreliable".into(),
        Expectation::Fault(k) => format!("fault:{}", fault_name(*k)),
        Expectation::NoReport => "no_report".into(),
        Expectation::ReportRejected(r) => format!("rejected:{}", r.name()),
    }
}

fn expectation_from_text(s: &str) -> Option<Expectation> {
    if let Some(kind) = s.strip_prefix("fault:") {
        return Some(Expectation::Fault(fault_from_name(kind)?));
    }
    if let Some(reason) = s.strip_prefix("rejected:") {
        return Some(Expectation::ReportRejected(RejectReason::from_name(reason)?));
    }
    match s {
        "accepted" => Some(Expectation::ReportAccepted),
        "accepted_unreliable" => Some(Expectation::ReportAcceptedButUnreliable),
        "no_report" => Some(Expectation::NoReport),
        _ => None,
    }
}

fn parse_word(tok: &str) -> Result<Word, String> {
    if let Some(h) = tok.strip_prefix("0x") {
        Word::from_str_radix(h, 16).map_err(|e| e.to_string())
    } else {
        tok.parse::<Word>().map_err(|e| e.to_string())
    }
}

/// Writes the scenario and its referenced artifacts into `dir`. Returns
/// the scenario file path.
pub fn save_scenario(dir: &Path, scenario: &Scenario) -> Result<PathBuf, ScenarioFileError> {
    std::fs::create_dir_all(dir)?;
    let stem = &scenario.name;
    let app_file = format!("{stem}.app.img");
    let ref_file = format!("{stem}.ref.img");
    let cfg_file = format!("{stem}.cfg");
    std::fs::write(dir.join(&app_file), scenario.installed.to_text())?;
    std::fs::write(dir.join(&ref_file), scenario.reference.to_text())?;
    std::fs::write(dir.join(&cfg_file), scenario.cfg.to_text())?;

    let mut text = String::new();
    text.push_str("scenario v1\n");
    text.push_str(&format!("name {}\n", scenario.name));
    text.push_str(&format!("mode {}\n", scenario.mode.name()));
    text.push_str(&format!("app {app_file}\n"));
    text.push_str(&format!("ref {ref_file}\n"));
    text.push_str(&format!("cfg {cfg_file}\n"));
    for (irq, isr) in &scenario.isrs {
        let isr_file = format!("{stem}.isr{irq}.img");
        std::fs::write(dir.join(&isr_file), Image::from_program(isr).to_text())?;
        text.push_str(&format!("isr {irq} {isr_file}\n"));
    }
    for (at, irq) in &scenario.schedule {
        text.push_str(&format!("schedule {at} {irq}\n"));
    }
    for (irq, prio) in &scenario.priorities {
        text.push_str(&format!("priority {irq} {prio}\n"));
    }
    for (addr, value) in &scenario.data_pokes {
        text.push_str(&format!("poke 0x{addr:x} 0x{value:x}\n"));
    }
    text.push_str(&format!("tamper {}\n", scenario.tamper.name()));
    text.push_str(&format!("expect {}\n", expectation_text(&scenario.expected)));
    if let Some(d) = &scenario.expected_log_digest {
        text.push_str(&format!("expect_log_digest {}\n", hex::encode(d)));
    }
    text.push_str(&format!("max_steps {}\n", scenario.max_steps));

    let path = dir.join(format!("{stem}.scn"));
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Loads a scenario file and its referenced artifacts.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioFileError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let perr =
        |ln: usize, msg: String| ScenarioFileError::Parse(path.to_path_buf(), ln, msg);

    let mut name = None;
    let mut mode = None;
    let mut installed = None;
    let mut reference = None;
    let mut cfg = None;
    let mut isrs = Vec::new();
    let mut schedule = Vec::new();
    let mut priorities = Vec::new();
    let mut data_pokes = Vec::new();
    let mut tamper = Tamper::None;
    let mut expected = None;
    let mut expected_log_digest = None;
    let mut max_steps = 300_000u64;
    let mut seen_header = false;

    let load_image = |file: &str| -> Result<Image, ScenarioFileError> {
        Image::load(&dir.join(file)).map_err(|e| ScenarioFileError::Image(e.to_string()))
    };

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let arg = |n: usize| -> Result<&str, ScenarioFileError> {
            toks.get(n).copied().ok_or_else(|| perr(ln, "missing argument".into()))
        };
        match toks[0] {
            "scenario" => {
                if arg(1)? != "v1" {
                    return Err(perr(ln, "unsupported version".into()));
                }
                seen_header = true;
            }
            "name" => name = Some(arg(1)?.to_string()),
            "mode" => {
                mode = Some(
                    AttestMode::from_name(arg(1)?)
                        .ok_or_else(|| perr(ln, "mode must be baseline or iscflat".into()))?,
                )
            }
            "app" => installed = Some(load_image(arg(1)?)?),
            "ref" => reference = Some(load_image(arg(1)?)?),
            "cfg" => {
                let t = std::fs::read_to_string(dir.join(arg(1)?))?;
                cfg = Some(
                    ControlFlowGraph::from_text(&t).map_err(|e| perr(ln, e.to_string()))?,
                );
            }
            "isr" => {
                let irq = arg(1)?.parse::<u8>().map_err(|e| perr(ln, e.to_string()))?;
                let img = load_image(arg(2)?)?;
                let prog = img.program().map_err(ScenarioFileError::Image)?;
                isrs.push((irq, prog));
            }
            "schedule" => {
                let at = arg(1)?.parse::<u64>().map_err(|e| perr(ln, e.to_string()))?;
                let irq = arg(2)?.parse::<u8>().map_err(|e| perr(ln, e.to_string()))?;
                schedule.push((at, irq));
            }
            "priority" => {
                let irq = arg(1)?.parse::<u8>().map_err(|e| perr(ln, e.to_string()))?;
                let prio = arg(2)?.parse::<u8>().map_err(|e| perr(ln, e.to_string()))?;
                priorities.push((irq, prio));
            }
            "poke" => {
                let addr = parse_word(arg(1)?).map_err(|e| perr(ln, e))?;
                let value = parse_word(arg(2)?).map_err(|e| perr(ln, e))?;
                data_pokes.push((addr, value));
            }
            "tamper" => {
                tamper = Tamper::from_name(arg(1)?)
                    .ok_or_else(|| perr(ln, "unknown tamper".into()))?
            }
            "expect" => {
                expected = Some(
                    expectation_from_text(arg(1)?)
                        .ok_or_else(|| perr(ln, "unknown expectation".into()))?,
                )
            }
            "expect_log_digest" => {
                let bytes = hex::decode(arg(1)?).map_err(|e| perr(ln, e.to_string()))?;
                let digest: [u8; 32] =
                    bytes.try_into().map_err(|_| perr(ln, "digest must be 32 bytes".into()))?;
                expected_log_digest = Some(digest);
            }
            "max_steps" => {
                max_steps = arg(1)?.parse::<u64>().map_err(|e| perr(ln, e.to_string()))?
            }
            other => return Err(perr(ln, format!("unknown key {other}"))),
        }
    }

    if !seen_header {
        return Err(ScenarioFileError::Missing(path.to_path_buf(), "scenario header"));
    }
    let missing = |f: &'static str| ScenarioFileError::Missing(path.to_path_buf(), f);
    Ok(Scenario {
        name: name.ok_or_else(|| missing("name"))?,
        mode: mode.ok_or_else(|| missing("mode"))?,
        installed: installed.ok_or_else(|| missing("app"))?,
        reference: reference.ok_or_else(|| missing("ref"))?,
        cfg: cfg.ok_or_else(|| missing("cfg"))?,
        isrs,
        schedule,
        priorities,
        data_pokes,
        tamper,
        expected: expected.ok_or_else(|| missing("expect"))?,
        expected_log_digest,
        max_steps,
    })
}

/// Loads every `.scn` file in a directory, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scenario>, ScenarioFileError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scenario(p)).collect()
}
