//! Shared test support: an independent blake2s-256 implementation used as
//! the hashing oracle, plus fixture builders.

#![allow(dead_code)]

use iscflat::cfg::{CfgEdge, CfgNode, ControlFlowGraph, EdgeKind, TerminatorKind};
use iscflat::instrument::{instrument, InstrumentConfig, InstrumentedProgram};
use iscflat::vm::asm::Asm;
use iscflat::vm::inst::{Cond, Program, R0, R4, R8};
use iscflat::vm::mem::APP_BASE;
use iscflat::vm::Word;

/// Standalone blake2s-256, written from the algorithm definition. Kept
/// independent of the implementation path it cross-checks.
pub mod blake2s_ref {
    const IV: [u32; 8] = [
        0x6a09_e667,
        0xbb67_ae85,
        0x3c6e_f372,
        0xa54f_f53a,
        0x510e_527f,
        0x9b05_688c,
        0x1f83_d9ab,
        0x5be0_cd19,
    ];

    const SIGMA: [[usize; 16]; 10] = [
        [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
        [14, 10, 4, 8, 9, 15, 13, 6, 1, 12, 0, 2, 11, 7, 5, 3],
        [11, 8, 12, 0, 5, 2, 15, 13, 10, 14, 3, 6, 7, 1, 9, 4],
        [7, 9, 3, 1, 13, 12, 11, 14, 2, 6, 5, 10, 4, 0, 15, 8],
        [9, 0, 5, 7, 2, 4, 10, 15, 14, 1, 11, 12, 6, 8, 3, 13],
        [2, 12, 6, 10, 0, 11, 8, 3, 4, 13, 7, 5, 15, 14, 1, 9],
        [12, 5, 1, 15, 14, 13, 4, 10, 0, 7, 6, 3, 9, 2, 8, 11],
        [13, 11, 7, 14, 12, 1, 3, 9, 5, 0, 15, 4, 8, 6, 2, 10],
        [6, 15, 14, 9, 11, 3, 0, 8, 12, 2, 13, 7, 1, 4, 10, 5],
        [10, 2, 8, 4, 7, 6, 1, 5, 15, 11, 9, 14, 3, 12, 13, 0],
    ];

    #[allow(clippy::many_single_char_names)]
    fn g(v: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize, x: u32, y: u32) {
        v[a] = v[a].wrapping_add(v[b]).wrapping_add(x);
        v[d] = (v[d] ^ v[a]).rotate_right(16);
        v[c] = v[c].wrapping_add(v[d]);
        v[b] = (v[b] ^ v[c]).rotate_right(12);
        v[a] = v[a].wrapping_add(v[b]).wrapping_add(y);
        v[d] = (v[d] ^ v[a]).rotate_right(8);
        v[c] = v[c].wrapping_add(v[d]);
        v[b] = (v[b] ^ v[c]).rotate_right(7);
    }

    fn compress(h: &mut [u32; 8], block: &[u8; 64], t: u64, last: bool) {
        let mut m = [0u32; 16];
        for (i, chunk) in block.chunks_exact(4).enumerate() {
            m[i] = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        let mut v = [0u32; 16];
        v[..8].copy_from_slice(h);
        v[8..].copy_from_slice(&IV);
        v[12] ^= t as u32;
        v[13] ^= (t >> 32) as u32;
        if last {
            v[14] = !v[14];
        }
        for s in &SIGMA {
            g(&mut v, 0, 4, 8, 12, m[s[0]], m[s[1]]);
            g(&mut v, 1, 5, 9, 13, m[s[2]], m[s[3]]);
            g(&mut v, 2, 6, 10, 14, m[s[4]], m[s[5]]);
            g(&mut v, 3, 7, 11, 15, m[s[6]], m[s[7]]);
            g(&mut v, 0, 5, 10, 15, m[s[8]], m[s[9]]);
            g(&mut v, 1, 6, 11, 12, m[s[10]], m[s[11]]);
            g(&mut v, 2, 7, 8, 13, m[s[12]], m[s[13]]);
            g(&mut v, 3, 4, 9, 14, m[s[14]], m[s[15]]);
        }
        for i in 0..8 {
            h[i] ^= v[i] ^ v[i + 8];
        }
    }

    pub fn digest(data: &[u8]) -> [u8; 32] {
        let mut h = IV;
        h[0] ^= 0x0101_0000 ^ 32; // digest length 32, no key
        let mut t = 0u64;
        if data.is_empty() {
            compress(&mut h, &[0u8; 64], 0, true);
        } else {
            let mut blocks = data.chunks(64).peekable();
            while let Some(block) = blocks.next() {
                t += block.len() as u64;
                let last = blocks.peek().is_none();
                let mut buf = [0u8; 64];
                buf[..block.len()].copy_from_slice(block);
                compress(&mut h, &buf, t, last);
            }
        }
        let mut out = [0u8; 32];
        for (i, word) in h.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&word.to_le_bytes());
        }
        out
    }
}

/// Six-node graph with the conditional split, two chains joining before a
/// final return, and deliberately no edge from node 5 to node 1.
pub fn six_node_graph() -> ControlFlowGraph {
    let starts = [0x4000u32, 0x4100, 0x4200, 0x4300, 0x4400, 0x4500];
    let node = |id: usize, terminator| CfgNode {
        id,
        start: starts[id],
        end: starts[id] + 0x20,
        terminator,
    };
    ControlFlowGraph {
        nodes: vec![
            node(0, TerminatorKind::Conditional),
            node(1, TerminatorKind::Direct),
            node(2, TerminatorKind::Direct),
            node(3, TerminatorKind::Return),
            node(4, TerminatorKind::Direct),
            node(5, TerminatorKind::Direct),
        ],
        edges: vec![
            CfgEdge { from: 0, to: 1, kind: EdgeKind::Fallthrough },
            CfgEdge { from: 0, to: 2, kind: EdgeKind::Taken },
            CfgEdge { from: 1, to: 4, kind: EdgeKind::Taken },
            CfgEdge { from: 2, to: 5, kind: EdgeKind::Taken },
            CfgEdge { from: 4, to: 3, kind: EdgeKind::Taken },
            CfgEdge { from: 5, to: 3, kind: EdgeKind::Taken },
        ],
        entry: 0,
    }
}

/// Entry/exit pair for a node id in a graph.
pub fn log_pair(g: &ControlFlowGraph, id: usize) -> [Word; 2] {
    let n = g.node(id);
    [n.start, n.end]
}

/// Simple attested application plus its instrumentation.
pub fn demo_instrumented() -> (Program, ControlFlowGraph, InstrumentedProgram) {
    let mut a = Asm::new(APP_BASE);
    a.mov_imm(R4, 2).cmp_imm(R4, 1).bcc(Cond::Lt, "alt");
    a.filler(24).b("end");
    a.label("alt").filler(12).b("end");
    a.label("end").mov_reg(R0, R4).ret();
    let program = a.assemble();
    let cfg = iscflat::cfg::extract_cfg(&program).unwrap();
    let ins = instrument(&program, &cfg, InstrumentConfig::default()).unwrap();
    (program, cfg, ins)
}

/// Long-running application for the protocol busy-window test: a loop
/// whose body is large so the log stays small while the run takes many
/// instructions.
pub fn long_running_app(iterations: u16, body: usize) -> Program {
    let mut a = Asm::new(APP_BASE);
    // counter in r8: the filler cycles over r4..r7
    a.mov_imm(R8, iterations).b("loop");
    a.label("loop");
    a.filler(body);
    a.sub_imm(R8, 1).cmp_imm(R8, 0).bcc(Cond::Ne, "loop").ret();
    a.assemble()
}
