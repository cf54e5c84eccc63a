//! Command-line front end.
//!
//! Exit codes: 0 on success (or an accepted report / fully passing
//! corpus), 1 when verification rejects, a scenario fails or the run
//! faults, 2 on usage or input errors.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cfg::{extract_cfg, ControlFlowGraph};
use crate::harness::{self, corpus, format as scnfmt};
use crate::instrument::{instrument, InstrumentConfig, StubGates};
use crate::overhead;
use crate::protocol::wire::{decode_report, APP_ID_LEN};
use crate::protocol::{self, ProverConfig};
use crate::runtime::crypto::{hash, KeyMaterial, PublicKey, CHL_LEN};
use crate::runtime::device::DeviceConfig;
use crate::runtime::AttestMode;
use crate::verifier::{verify_report, VerificationPolicy};
use crate::vm::image::Image;
use crate::vm::{IrqId, Machine, RunConfig, RunEnd, Word};

#[derive(Parser)]
#[command(
    name = "iscflat",
    about = "Interrupt-safe control-flow attestation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a control-flow graph and insert measurement gates.
    Instrument(InstrumentArgs),
    /// Execute an image on a bare machine and show the trace.
    Run(RunArgs),
    /// Generate a device key pair.
    Keygen(KeygenArgs),
    /// Serve attestation sessions for an installed image.
    Prove(ProveArgs),
    /// Request and adjudicate an attestation report.
    Verify(VerifyArgs),
    /// Run the attack-scenario corpus.
    Attack(AttackArgs),
    /// Measure instrumentation and dispatcher overhead.
    Bench(BenchArgs),
}

#[derive(Args)]
struct InstrumentArgs {
    /// Input image (plain program).
    #[arg(long, short = 'i')]
    input: PathBuf,
    /// Output instrumented image.
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Output control-flow graph file.
    #[arg(long)]
    cfg_out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Image to execute.
    #[arg(long, short = 'i')]
    image: PathBuf,
    /// Load a handler image and bind it: IRQ:FILE (repeatable).
    #[arg(long)]
    isr: Vec<String>,
    /// Pend an interrupt at a retired count: AT:IRQ (repeatable).
    #[arg(long)]
    schedule: Vec<String>,
    /// Arm the countdown timer: AFTER:IRQ[:RELOAD].
    #[arg(long)]
    timer: Option<String>,
    #[arg(long, default_value_t = 1_000_000)]
    max_steps: u64,
    /// Write the full trace to this file.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct KeygenArgs {
    /// Deterministic seed; omitted means OS entropy.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sk_out: PathBuf,
    #[arg(long)]
    pk_out: PathBuf,
}

#[derive(Args)]
struct ProveArgs {
    #[arg(long, default_value = "127.0.0.1:9350")]
    listen: String,
    /// Installed (instrumented) image.
    #[arg(long, short = 'i')]
    image: PathBuf,
    /// 16-byte application id, hex. Defaults to the image digest prefix.
    #[arg(long)]
    app_id: Option<String>,
    /// Signing key seed file (hex).
    #[arg(long)]
    sk: PathBuf,
    #[arg(long, default_value = "iscflat")]
    mode: String,
    #[arg(long)]
    isr: Vec<String>,
    #[arg(long)]
    schedule: Vec<String>,
    #[arg(long, default_value_t = protocol::DEFAULT_SESSION_STEPS)]
    max_steps: u64,
    #[arg(long, default_value_t = crate::runtime::DEFAULT_CFLOG_CAPACITY)]
    cflog_capacity: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Prover endpoint for a live session.
    #[arg(long, conflicts_with = "report")]
    endpoint: Option<String>,
    /// Offline: verify a stored report frame.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Offline: the challenge that was issued, hex.
    #[arg(long)]
    chl: Option<String>,
    /// Reference (expected) instrumented image.
    #[arg(long, short = 'i')]
    image: PathBuf,
    /// Control-flow graph file.
    #[arg(long)]
    cfg: PathBuf,
    /// Device public key, hex or file.
    #[arg(long)]
    pk: String,
    #[arg(long)]
    app_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    timeout_s: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// Load scenarios from a directory instead of the built-in corpus.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Write the corpus as scenario files before running.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long)]
    json: bool,
}

pub fn run_from_env() -> i32 {
    run(std::env::args())
}

/// Parses and executes a command line. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.command {
        Command::Instrument(a) => cmd_instrument(a),
        Command::Run(a) => cmd_run(a),
        Command::Keygen(a) => cmd_keygen(a),
        Command::Prove(a) => cmd_prove(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn parse_word(tok: &str) -> anyhow::Result<Word> {
    let t = tok.trim();
    Ok(if let Some(h) = t.strip_prefix("0x") {
        Word::from_str_radix(h, 16)?
    } else {
        t.parse::<Word>()?
    })
}

fn parse_isr(spec: &str, base_dir: &Path) -> anyhow::Result<(IrqId, crate::vm::Program)> {
    let (irq, file) = spec
        .split_once(':')
        .ok_or_else(|| anyhow::anyhow!("--isr wants IRQ:FILE, got {spec}"))?;
    let irq: IrqId = irq.parse()?;
    let image = Image::load(&base_dir.join(file))?;
    let program = image.program().map_err(|e| anyhow::anyhow!(e))?;
    Ok((irq, program))
}

fn parse_schedule(spec: &str) -> anyhow::Result<(u64, IrqId)> {
    let (at, irq) = spec
        .split_once(':')
        .ok_or_else(|| anyhow::anyhow!("--schedule wants AT:IRQ, got {spec}"))?;
    Ok((at.parse()?, irq.parse()?))
}

fn parse_app_id(s: &str) -> anyhow::Result<[u8; APP_ID_LEN]> {
    let bytes = hex::decode(s.trim())?;
    bytes
        .try_into()
        .map_err(|_| anyhow::anyhow!("application id must be {APP_ID_LEN} bytes of hex"))
}

fn default_app_id(image: &Image) -> [u8; APP_ID_LEN] {
    let digest = hash(&image.code);
    let mut id = [0u8; APP_ID_LEN];
    id.copy_from_slice(&digest[..APP_ID_LEN]);
    id
}

fn load_pk(spec: &str) -> anyhow::Result<PublicKey> {
    let text = if Path::new(spec).exists() {
        std::fs::read_to_string(spec)?
    } else {
        spec.to_string()
    };
    Ok(PublicKey::from_hex(&text)?)
}

fn rng_from(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_rng(rand::rngs::OsRng).expect("os entropy"),
    }
}

fn cmd_instrument(a: InstrumentArgs) -> anyhow::Result<i32> {
    let image = Image::load(&a.input)?;
    let program = image.program().map_err(|e| anyhow::anyhow!(e))?;
    let cfg = extract_cfg(&program)?;
    let ins = instrument(&program, &cfg, InstrumentConfig::default())?;
    ins.to_image().save(&a.output)?;
    std::fs::write(&a.cfg_out, cfg.to_text())?;
    let inserted = ins.inserted_count(&program);
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "nodes": cfg.nodes.len(),
                "edges": cfg.edges.len(),
                "inserted": inserted,
            })
        );
    } else {
        println!("{} nodes, {} edges, {} inserted", cfg.nodes.len(), cfg.edges.len(), inserted);
    }
    Ok(0)
}

fn cmd_run(a: RunArgs) -> anyhow::Result<i32> {
    let base_dir = a.image.parent().map(Path::to_path_buf).unwrap_or_default();
    let image = Image::load(&a.image)?;
    let mut machine = Machine::with_standard_map();
    machine.load_bytes(image.base, &image.code);
    machine.pc = image.entry;
    for spec in &a.isr {
        let (irq, program) = parse_isr(spec, &base_dir)?;
        machine.load_program(&program);
        machine.nvic.nonsecure_ivt[irq as usize] = program.base;
    }
    for spec in &a.schedule {
        let (at, irq) = parse_schedule(spec)?;
        machine.schedule.push((at, irq));
    }
    if let Some(spec) = &a.timer {
        let parts: Vec<&str> = spec.split(':').collect();
        anyhow::ensure!(parts.len() >= 2, "--timer wants AFTER:IRQ[:RELOAD]");
        let after: u64 = parts[0].parse()?;
        let irq: IrqId = parts[1].parse()?;
        let reload = parts.get(2).map(|r| r.parse::<u64>()).transpose()?;
        machine.arm_timer(after, irq, reload);
    }
    // gates are stubbed outside an attestation session
    machine.register_firmware(crate::vm::mem::GATE_ENTRY);
    machine.register_firmware(crate::vm::mem::GATE_DEST);
    let mut gates = StubGates::default();
    let out = machine.run(&mut gates, RunConfig { max_steps: a.max_steps, trace: true });

    if let Some(path) = &a.trace_out {
        std::fs::write(path, out.trace.export_text())?;
    }
    let (end, code) = match &out.end {
        RunEnd::Halted => ("halted".to_string(), 0),
        RunEnd::Stopped => ("stopped".to_string(), 0),
        RunEnd::OutOfBudget => ("out of budget".to_string(), 1),
        RunEnd::Fault(f) => (f.to_string(), 1),
    };
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "end": end,
                "steps": out.steps,
                "retired": machine.retired,
                "r0": machine.regs[0],
            })
        );
    } else {
        println!("end: {end}");
        println!("steps: {}  retired: {}  r0: {}", out.steps, machine.retired, machine.regs[0]);
    }
    Ok(code)
}

fn cmd_keygen(a: KeygenArgs) -> anyhow::Result<i32> {
    let mut rng = rng_from(a.seed);
    let keys = KeyMaterial::generate(&mut rng);
    std::fs::write(&a.sk_out, keys.secret_hex())?;
    std::fs::write(&a.pk_out, keys.public_key().to_hex())?;
    println!("{}", keys.public_key().to_hex());
    Ok(0)
}

fn device_config_from(a: &ProveArgs) -> anyhow::Result<(DeviceConfig, [u8; APP_ID_LEN])> {
    let base_dir = a.image.parent().map(Path::to_path_buf).unwrap_or_default();
    let image = Image::load(&a.image)?;
    let keys = KeyMaterial::from_hex(&std::fs::read_to_string(&a.sk)?)?;
    let mode = AttestMode::from_name(&a.mode)
        .ok_or_else(|| anyhow::anyhow!("mode must be baseline or iscflat"))?;
    let app_id = match &a.app_id {
        Some(s) => parse_app_id(s)?,
        None => default_app_id(&image),
    };
    let mut config = DeviceConfig::new(image, keys, mode);
    config.max_steps = a.max_steps;
    config.cflog_capacity = a.cflog_capacity;
    config.trace = false;
    for spec in &a.isr {
        config.isrs.push(parse_isr(spec, &base_dir)?);
    }
    for spec in &a.schedule {
        config.schedule.push(parse_schedule(spec)?);
    }
    Ok((config, app_id))
}

fn cmd_prove(a: ProveArgs) -> anyhow::Result<i32> {
    let (config, app_id) = device_config_from(&a)?;
    let listener = std::net::TcpListener::bind(&a.listen)?;
    println!("listening on {} app_id {}", listener.local_addr()?, hex::encode(app_id));
    protocol::serve(
        listener,
        ProverConfig::single(app_id, config),
        Arc::new(AtomicBool::new(true)),
    );
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<i32> {
    let image = Image::load(&a.image)?;
    let cfg_text = std::fs::read_to_string(&a.cfg)?;
    let cfg: ControlFlowGraph = ControlFlowGraph::from_text(&cfg_text)?;
    let pk = load_pk(&a.pk)?;
    let mut policy = VerificationPolicy::new(hash(&image.code), cfg, pk);

    let verdict = if let Some(endpoint) = &a.endpoint {
        let app_id = match &a.app_id {
            Some(s) => parse_app_id(s)?,
            None => default_app_id(&image),
        };
        let mut rng = rng_from(a.seed);
        let outcome = protocol::verifier_request(
            endpoint.as_str(),
            app_id,
            &mut policy,
            &mut rng,
            Duration::from_secs(a.timeout_s),
        )?;
        match outcome {
            protocol::SessionOutcome::Verdict(v) => v,
            protocol::SessionOutcome::Busy => {
                println!("prover busy");
                return Ok(1);
            }
            protocol::SessionOutcome::NoReport(reason) => {
                println!("no report: {reason}");
                return Ok(1);
            }
        }
    } else if let Some(report_path) = &a.report {
        let chl_hex = a
            .chl
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("offline verification needs --chl"))?;
        let chl_bytes = hex::decode(chl_hex.trim())?;
        let chl: [u8; CHL_LEN] = chl_bytes
            .try_into()
            .map_err(|_| anyhow::anyhow!("challenge must be {CHL_LEN} bytes of hex"))?;
        policy.issue_challenge(chl);
        let bytes = std::fs::read(report_path)?;
        let report = decode_report(&bytes)?;
        verify_report(&report, &mut policy)
    } else {
        anyhow::bail!("need --endpoint or --report");
    };

    if a.json {
        println!("{}", serde_json::to_string(&verdict)?);
    } else {
        println!("{verdict}");
    }
    Ok(if verdict.accepted() { 0 } else { 1 })
}

fn cmd_attack(a: AttackArgs) -> anyhow::Result<i32> {
    let (scenarios, keys) = if let Some(dir) = &a.scenarios {
        let scenarios = scnfmt::load_dir(dir)?;
        let keys = KeyMaterial::generate(&mut rng_from(Some(a.seed)));
        (scenarios, keys)
    } else {
        let built = corpus::build(a.seed)?;
        (built.scenarios, built.keys)
    };
    if let Some(dir) = &a.export {
        for s in &scenarios {
            scnfmt::save_scenario(dir, s)?;
        }
        eprintln!("exported {} scenarios to {}", scenarios.len(), dir.display());
    }
    let results = harness::run_corpus(&scenarios, &keys)?;
    let all_pass = results.iter().all(|r| r.passed);
    if a.json {
        let rows: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "name": r.name,
                    "mode": r.mode.name(),
                    "expected": r.expected.label(),
                    "actual": r.actual.kind.label(),
                    "detail": r.actual.detail,
                    "passed": r.passed,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", harness::render_table(&results));
        println!("{}/{} scenarios passed", results.iter().filter(|r| r.passed).count(), results.len());
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<i32> {
    let summary = overhead::measure(a.seed, a.samples)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.render());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::asm::Asm;
    use crate::vm::inst::R0;
    use crate::vm::mem::APP_BASE;

    fn write_demo_image(dir: &Path) -> PathBuf {
        let mut a = Asm::new(APP_BASE);
        a.mov_imm(R0, 1).halt();
        let image = Image::from_program(&a.assemble());
        let path = dir.join("demo.img");
        image.save(&path).unwrap();
        path
    }

    #[test]
    fn instrument_counts_single_node() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_demo_image(dir.path());
        let code = run([
            "iscflat",
            "instrument",
            "-i",
            input.to_str().unwrap(),
            "-o",
            dir.path().join("out.img").to_str().unwrap(),
            "--cfg-out",
            dir.path().join("out.cfg").to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(dir.path().join("out.img").exists());
        assert!(dir.path().join("out.cfg").exists());
    }

    #[test]
    fn missing_file_is_usage_error() {
        let code = run([
            "iscflat",
            "instrument",
            "-i",
            "/nonexistent/x.img",
            "-o",
            "/tmp/y.img",
            "--cfg-out",
            "/tmp/y.cfg",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn run_executes_image() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_demo_image(dir.path());
        let code = run(["iscflat", "run", "-i", input.to_str().unwrap(), "--json"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn keygen_twice_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let sk1 = dir.path().join("sk1");
        let pk1 = dir.path().join("pk1");
        let sk2 = dir.path().join("sk2");
        let pk2 = dir.path().join("pk2");
        assert_eq!(
            run(["iscflat", "keygen", "--sk-out", sk1.to_str().unwrap(), "--pk-out", pk1.to_str().unwrap()]),
            0
        );
        assert_eq!(
            run(["iscflat", "keygen", "--sk-out", sk2.to_str().unwrap(), "--pk-out", pk2.to_str().unwrap()]),
            0
        );
        assert_ne!(std::fs::read(pk1).unwrap(), std::fs::read(pk2).unwrap());
    }

    #[test]
    fn bad_usage_exits_2() {
        assert_eq!(run(["iscflat", "no-such-command"]), 2);
        assert_eq!(run(["iscflat", "verify", "--image", "x", "--cfg", "y", "--pk", "z"]), 2);
    }
}
