//! Challenge-response protocol: prover endpoint and verifier client over a
//! local socket.

pub mod wire;

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::RngCore;

use crate::runtime::device::{Device, DeviceConfig, SessionEnd};
use crate::runtime::crypto::CHL_LEN;
use crate::verifier::{verify_report, VerificationPolicy, Verdict};
use wire::{
    decode_frame, encode_error, encode_report, encode_request, read_frame, write_frame,
    AttestationRequest, ErrorCode, Frame, TransportError, APP_ID_LEN,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Default per-session instruction budget.
pub const DEFAULT_SESSION_STEPS: u64 = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for the prover")]
    Timeout,
    #[error("unexpected frame")]
    UnexpectedFrame,
}

/// What one verification request produced.
#[derive(Debug, Clone)]
pub enum SessionOutcome {
    Verdict(Verdict),
    Busy,
    NoReport(String),
}

impl SessionOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, SessionOutcome::Verdict(v) if v.accepted())
    }
}

/// Prover-side configuration: the installed device images by application
/// id.
#[derive(Clone, Default)]
pub struct ProverConfig {
    pub devices: HashMap<[u8; APP_ID_LEN], DeviceConfig>,
}

impl ProverConfig {
    pub fn single(app_id: [u8; APP_ID_LEN], device: DeviceConfig) -> ProverConfig {
        let mut devices = HashMap::new();
        devices.insert(app_id, device);
        ProverConfig { devices }
    }
}

/// Handle to a running prover endpoint.
pub struct ProverHandle {
    pub addr: SocketAddr,
    running: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ProverHandle {
    pub fn shutdown(mut self) {
        self.running.store(false, Ordering::SeqCst);
        // poke the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ProverHandle {
    fn drop(&mut self) {
        self.running.store(false, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

/// Binds a listener and serves attestation sessions on a background
/// thread. Sessions are strictly serialized: a request arriving while one
/// is in progress is answered with a busy frame.
pub fn spawn_prover(bind: &str, config: ProverConfig) -> io::Result<ProverHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let running = Arc::new(AtomicBool::new(true));
    let flag = running.clone();
    let thread = thread::spawn(move || serve(listener, config, flag));
    Ok(ProverHandle { addr, running, thread: Some(thread) })
}

/// Accept loop. Connections are handled on their own threads; the session
/// mutex enforces one attestation at a time.
pub fn serve(listener: TcpListener, config: ProverConfig, running: Arc<AtomicBool>) {
    let config = Arc::new(config);
    let session = Arc::new(Mutex::new(()));
    for stream in listener.incoming() {
        if !running.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let config = config.clone();
        let session = session.clone();
        thread::spawn(move || {
            let _ = handle_connection(stream, &config, &session);
        });
    }
}

fn handle_connection(
    mut stream: TcpStream,
    config: &ProverConfig,
    session: &Mutex<()>,
) -> Result<(), ProtocolError> {
    stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
    stream.set_write_timeout(Some(DEFAULT_TIMEOUT))?;
    let buf = read_frame(&mut stream)?;
    let request = match decode_frame(&buf) {
        Ok(Frame::Request(r)) => r,
        Ok(_) => {
            write_frame(&mut stream, &encode_error(ErrorCode::Malformed, "expected a request"))?;
            return Ok(());
        }
        Err(e) => {
            write_frame(&mut stream, &encode_error(ErrorCode::Malformed, &e.to_string()))?;
            return Ok(());
        }
    };

    let Some(device_config) = config.devices.get(&request.app_id) else {
        write_frame(&mut stream, &encode_error(ErrorCode::UnknownApp, "unknown application id"))?;
        return Ok(());
    };

    // one attestation instance at a time
    let Ok(_guard) = session.try_lock() else {
        write_frame(
            &mut stream,
            &encode_error(ErrorCode::Busy, "an attestation session is in progress"),
        )?;
        return Ok(());
    };

    let mut device = match Device::new(device_config.clone()) {
        Ok(d) => d,
        Err(e) => {
            write_frame(&mut stream, &encode_error(ErrorCode::NoReport, &e.to_string()))?;
            return Ok(());
        }
    };
    if let Err(e) = device.start_attestation(request.chl) {
        write_frame(&mut stream, &encode_error(ErrorCode::Busy, &e.to_string()))?;
        return Ok(());
    }
    let result = device.run_session();
    match result.end {
        SessionEnd::Report(report) => {
            write_frame(&mut stream, &encode_report(&report))?;
        }
        SessionEnd::Fault(fault) => {
            write_frame(&mut stream, &encode_error(ErrorCode::NoReport, &fault.to_string()))?;
        }
        SessionEnd::NoReport(reason) => {
            write_frame(&mut stream, &encode_error(ErrorCode::NoReport, &reason))?;
        }
    }
    Ok(())
}

/// Issues a fresh challenge, requests an attested execution and
/// adjudicates the returned report.
pub fn verifier_request(
    addr: impl ToSocketAddrs,
    app_id: [u8; APP_ID_LEN],
    policy: &mut VerificationPolicy,
    rng: &mut dyn RngCore,
    timeout: Duration,
) -> Result<SessionOutcome, ProtocolError> {
    let mut chl = [0u8; CHL_LEN];
    rng.fill_bytes(&mut chl);
    policy.issue_challenge(chl);

    let addr = addr.to_socket_addrs()?.next().ok_or(ProtocolError::UnexpectedFrame)?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    write_frame(&mut stream, &encode_request(&AttestationRequest { chl, app_id }))?;

    let buf = match read_frame(&mut stream) {
        Ok(b) => b,
        Err(TransportError::Io(e))
            if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut =>
        {
            return Err(ProtocolError::Timeout);
        }
        Err(e) => return Err(e.into()),
    };
    match decode_frame(&buf).map_err(TransportError::from)? {
        Frame::Report(report) => Ok(SessionOutcome::Verdict(verify_report(&report, policy))),
        Frame::Error(e) if e.code == ErrorCode::Busy as u8 => Ok(SessionOutcome::Busy),
        Frame::Error(e) => Ok(SessionOutcome::NoReport(e.text)),
        Frame::Request(_) => Err(ProtocolError::UnexpectedFrame),
    }
}
