//! Seeded generation of structured test programs, handlers and interrupt
//! schedules.
//!
//! Generated applications are block-structured with forward-only branches
//! (plus calls into straight-line leaf functions), so every program
//! terminates with a top-level return. Generated handlers stay within
//! their own stack and return properly.

use rand::Rng;

use crate::vm::asm::Asm;
use crate::vm::inst::{Cond, Program, Reg};
use crate::vm::mem::{APP_BASE, ISR_BASE};
use crate::vm::{IrqId, Word};

#[derive(Debug, Clone, Copy)]
pub struct AppShape {
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub max_body: usize,
    pub max_functions: usize,
}

impl Default for AppShape {
    fn default() -> AppShape {
        AppShape { min_blocks: 3, max_blocks: 8, max_body: 8, max_functions: 2 }
    }
}

fn body_reg(rng: &mut impl Rng) -> Reg {
    Reg(rng.gen_range(4..=9))
}

fn emit_body(a: &mut Asm, rng: &mut impl Rng, len: usize) {
    for _ in 0..len {
        let rd = body_reg(rng);
        match rng.gen_range(0..4) {
            0 => a.mov_imm(rd, rng.gen_range(0..100)),
            1 => a.add_imm(rd, rng.gen_range(1..50)),
            2 => a.sub_imm(rd, rng.gen_range(1..50)),
            _ => a.add_reg(rd, body_reg(rng)),
        };
    }
}

/// Generates a terminating application with conditional branches, direct
/// branches and calls to leaf functions.
pub fn random_app(rng: &mut impl Rng, shape: AppShape) -> Program {
    let blocks = rng.gen_range(shape.min_blocks..=shape.max_blocks);
    let functions = rng.gen_range(0..=shape.max_functions);

    let mut a = Asm::new(APP_BASE);
    for b in 0..blocks {
        a.label(&format!("b{b}"));
        if b == 0 {
            // calls clobber the link register; save the top-level return
            a.push(crate::vm::inst::LR);
        }
        let len = rng.gen_range(1..=shape.max_body);
        emit_body(&mut a, rng, len);
        let last = b + 1 == blocks;
        if last {
            a.mov_reg(crate::vm::inst::R0, body_reg(rng));
            a.pop(crate::vm::inst::LR);
            a.ret();
            break;
        }
        // forward-only control transfer
        let target = rng.gen_range(b + 1..blocks);
        match rng.gen_range(0..4) {
            0 => {
                a.b(&format!("b{target}"));
            }
            1 => {
                a.cmp_imm(body_reg(rng), rng.gen_range(0..100));
                let cond = match rng.gen_range(0..4) {
                    0 => Cond::Eq,
                    1 => Cond::Ne,
                    2 => Cond::Lt,
                    _ => Cond::Ge,
                };
                a.bcc(cond, &format!("b{target}"));
            }
            2 if functions > 0 => {
                a.bl(&format!("f{}", rng.gen_range(0..functions)));
            }
            _ => {
                a.b(&format!("b{}", b + 1));
            }
        }
    }
    for f in 0..functions {
        a.label(&format!("f{f}"));
        let len = rng.gen_range(1..=4);
        emit_body(&mut a, rng, len);
        a.ret();
    }
    a.assemble()
}

/// Generates a well-behaved handler: arbitrary register arithmetic,
/// balanced pushes and pops on its own stack, then a proper return.
pub fn random_isr(rng: &mut impl Rng, base: Word, max_len: usize) -> Program {
    let mut a = Asm::new(base);
    let len = rng.gen_range(1..=max_len.max(1));
    let mut pushed = 0usize;
    for _ in 0..len {
        match rng.gen_range(0..5) {
            0 => {
                let rd = Reg(rng.gen_range(0..=12));
                a.mov_imm(rd, rng.gen_range(0..u16::MAX));
            }
            1 => {
                a.add_imm(Reg(rng.gen_range(0..=12)), rng.gen_range(1..100));
            }
            2 => {
                a.cmp_imm(Reg(rng.gen_range(0..=12)), rng.gen_range(0..100));
            }
            3 => {
                a.push(Reg(rng.gen_range(0..=12)));
                pushed += 1;
            }
            _ => {
                if pushed > 0 {
                    a.pop(Reg(rng.gen_range(0..=12)));
                    pushed -= 1;
                } else {
                    a.sub_imm(Reg(rng.gen_range(0..=12)), 1);
                }
            }
        }
    }
    for _ in 0..pushed {
        a.pop(Reg(rng.gen_range(0..=12)));
    }
    a.ret();
    a.assemble()
}

/// Picks distinct interrupt fire points within the given retired-count
/// horizon, assigning distinct priorities so nesting can occur.
pub fn random_schedule(
    rng: &mut impl Rng,
    horizon: u64,
    max_interrupts: usize,
) -> (Vec<(u64, IrqId)>, Vec<(IrqId, u8)>) {
    let count = rng.gen_range(0..=max_interrupts.min(4));
    let mut points = std::collections::BTreeSet::new();
    while points.len() < count && horizon > 1 {
        points.insert(rng.gen_range(1..horizon));
    }
    let mut schedule = Vec::new();
    let mut priorities = Vec::new();
    for (i, p) in points.into_iter().enumerate() {
        let irq = (3 + i) as IrqId;
        schedule.push((p, irq));
        priorities.push((irq, rng.gen_range(0..8) as u8));
    }
    (schedule, priorities)
}

/// ISR bases spaced through the handler code region.
pub fn isr_base(slot: usize) -> Word {
    ISR_BASE + (slot as Word) * 0x200
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::extract_cfg;
    use crate::vm::{Machine, NoFirmware, RunConfig, RunEnd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn generated_apps_extract_and_terminate() {
        for seed in 0..40 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let app = random_app(&mut rng, AppShape::default());
            extract_cfg(&app).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let mut m = Machine::with_standard_map();
            m.load_program(&app);
            m.pc = app.base;
            m.lr = 0xfff0; // unreachable; programs end by returning here
            let out = m.run(&mut NoFirmware, RunConfig { max_steps: 50_000, trace: false });
            match out.end {
                RunEnd::Fault(f) => {
                    // the top-level return leaves the program
                    assert_eq!(f.at_pc, 0xfff0, "seed {seed}: {f}");
                }
                other => panic!("seed {seed}: {other:?}"),
            }
        }
    }

    #[test]
    fn generated_isrs_are_stack_balanced() {
        for seed in 0..30 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let isr = random_isr(&mut rng, ISR_BASE, 20);
            let pushes = isr
                .instrs
                .iter()
                .filter(|i| matches!(i, crate::vm::Instruction::Push { .. }))
                .count();
            let pops = isr
                .instrs
                .iter()
                .filter(|i| matches!(i, crate::vm::Instruction::Pop { .. }))
                .count();
            assert_eq!(pushes, pops, "seed {seed}");
            assert!(matches!(isr.instrs.last(), Some(crate::vm::Instruction::Ret)));
        }
    }
}
