use iscflat::cfg::extract_cfg;
use iscflat::instrument::{instrument, InstrumentConfig};
use iscflat::runtime::crypto::KeyMaterial;
use iscflat::runtime::device::{Device, DeviceConfig};
use iscflat::runtime::AttestMode;
use iscflat::vm::asm::Asm;
use iscflat::vm::inst::{Cond, R8};
use iscflat::vm::mem::APP_BASE;
use rand::SeedableRng;

fn main() {
    let mut a = Asm::new(APP_BASE);
    a.mov_imm(R8, 7500).b("loop");
    a.label("loop");
    a.filler(3800);
    a.sub_imm(R8, 1).cmp_imm(R8, 0).bcc(Cond::Ne, "loop").ret();
    let app = a.assemble();
    let cfg = extract_cfg(&app).unwrap();
    let ins = instrument(&app, &cfg, InstrumentConfig::default()).unwrap();
    let keys = KeyMaterial::generate(&mut rand_chacha::ChaCha20Rng::seed_from_u64(1));
    let mut dc = DeviceConfig::new(ins.to_image(), keys, AttestMode::IscFlat);
    dc.cflog_capacity = 64 * 1024;
    dc.max_steps = 80_000_000;
    dc.trace = false;
    let mut d = Device::new(dc).unwrap();
    let t = std::time::Instant::now();
    let r = d.attest([0u8; 32]).unwrap();
    println!("retired {} steps {} in {:?} -> {:?}", d.machine.retired, r.steps, t.elapsed(),
        matches!(r.end, iscflat::runtime::device::SessionEnd::Report(_)));
}
