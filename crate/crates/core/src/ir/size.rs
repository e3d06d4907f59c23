//! Size model: fixed encoded sizes per instruction variant and operand class.
//!
//! The sizes follow the short `%eax`-class immediate encodings that the
//! caller/callee arithmetic is built on (`mov`/`sub`/`cmp` with imm32 are 5
//! bytes regardless of the register named), so a callsite costs 5 bytes and a
//! checked prologue costs 12 bytes including its `endbr64`.
//!
//! | variant                         | bytes                         |
//! |---------------------------------|-------------------------------|
//! | `endbr64`                       | 4                             |
//! | `mov/sub/cmp/xor $imm32, %r32`  | 5                             |
//! | `mov $imm, %r64`                | 7                             |
//! | `sub/cmp/xor $imm, %r64`        | 4 if imm <= 0x7f, else 6      |
//! | `shl`/`rol $n, %r64`            | 4                             |
//! | `or $imm, %r64`                 | 4 / 6 / 10 (imm8/imm32/imm64) |
//! | `mov`/`sub` reg, reg            | 3 (64-bit), 2 (32-bit)        |
//! | `je`/`jne`/`jae`                | 2                             |
//! | `jmp label`                     | 5                             |
//! | `hlt` / `int3` / `ret`          | 1                             |
//! | `ud2`                           | 2                             |
//! | `nop N`                         | N                             |
//! | `call sym`                      | 5                             |
//! | `call *%r` / `jmp *%r`          | 2, +1 for r10-r12, +1 notrack |
//! | `jmp *sym@GOT`                  | 6, +1 notrack                 |
//! | `lea sym, %r`                   | 5                             |
//! | `load obj` / `load obj[%r]`     | 7 / 8                         |
//! | `store`                         | 7                             |
//! | `push $imm`                     | 2 if imm <= 0x7f, else 5      |
//! | `push GOT[i]`                   | 6                             |
//! | `switch tbl[%r]`                | 7, +1 notrack                 |
//! | `halt N`                        | 5                             |

use super::{Instruction, Width};

pub const ENDBR64_BYTES: [u8; 4] = [0xf3, 0x0f, 0x1e, 0xfa];
pub const ENDBR32_BYTES: [u8; 4] = [0xf3, 0x0f, 0x1e, 0xfb];
pub const NOP4_BYTES: [u8; 4] = [0x0f, 0x1f, 0x40, 0x00];

const NOPS: [&[u8]; 9] = [
    &[0x90],
    &[0x66, 0x90],
    &[0x0f, 0x1f, 0x00],
    &NOP4_BYTES,
    &[0x0f, 0x1f, 0x44, 0x00, 0x00],
    &[0x66, 0x0f, 0x1f, 0x44, 0x00, 0x00],
    &[0x0f, 0x1f, 0x80, 0x00, 0x00, 0x00, 0x00],
    &[0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
    &[0x66, 0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
];

fn imm8_or(imm: u64, small: u32, large: u32) -> u32 {
    if imm <= 0x7f {
        small
    } else {
        large
    }
}

/// Encoded size of `i` in bytes.
pub fn instruction_size(i: &Instruction) -> u32 {
    use Instruction::*;
    let nt = |notrack: bool| u32::from(notrack);
    match i {
        Endbr64 => 4,
        MovImm { dst, .. } => match dst.width {
            Width::W32 => 5,
            Width::W64 => 7,
        },
        SubImm { dst, imm } | CmpImm { dst, imm } | XorImm { dst, imm } => match dst.width {
            Width::W32 => 5,
            Width::W64 => imm8_or(u64::from(*imm), 4, 6),
        },
        Shl { .. } | Rol { .. } => 4,
        Or64Imm { imm, .. } => {
            if *imm <= 0x7f {
                4
            } else if *imm <= 0x7fff_ffff || *imm >= 0xffff_ffff_8000_0000 {
                6
            } else {
                10
            }
        }
        SubReg { dst, .. } | MovReg { dst, .. } => match dst.width {
            Width::W32 => 2,
            Width::W64 => 3,
        },
        CondBranch { .. } => 2,
        Jmp { .. } => 5,
        Hlt | Int3 | Ret => 1,
        Ud2 => 2,
        Nop { width } => u32::from(*width),
        DirectCall { .. } => 5,
        IndirectCall { target, notrack, .. } | IndirectJmpReg { target, notrack, .. } => {
            2 + u32::from(target.id.is_extended()) + nt(*notrack)
        }
        IndirectJmpGot { notrack, .. } => 6 + nt(*notrack),
        LoadFnAddr { .. } => 5,
        LoadData { index, .. } => {
            if index.is_some() {
                8
            } else {
                7
            }
        }
        StoreData { .. } => 7,
        PushImm { imm } => imm8_or(u64::from(*imm), 2, 5),
        PushGotSlot { .. } => 6,
        SwitchJmp { notrack, .. } => 7 + nt(*notrack),
        Halt { .. } => 5,
    }
}

/// Deterministic byte image of `i`, exactly [`instruction_size`] bytes long.
///
/// `endbr64`, `hlt`, `int3`, `ret`, `ud2` and the `nop` family use their real
/// encodings; every other variant gets a stable stand-in (an opcode-like tag
/// byte followed by its immediate) since only landing-pad bytes are ever
/// inspected at byte level.
pub fn encode(i: &Instruction) -> Vec<u8> {
    use Instruction::*;
    let size = instruction_size(i) as usize;
    let mut out: Vec<u8> = match i {
        Endbr64 => ENDBR64_BYTES.to_vec(),
        Hlt => vec![0xf4],
        Int3 => vec![0xcc],
        Ret => vec![0xc3],
        Ud2 => vec![0x0f, 0x0b],
        Nop { width } => NOPS
            .get(usize::from(*width).saturating_sub(1))
            .map_or_else(|| vec![0x90; usize::from(*width)], |n| n.to_vec()),
        _ => {
            let (tag, imm): (u8, u64) = match i {
                MovImm { imm, .. } => (0xb8, u64::from(*imm)),
                SubImm { imm, .. } => (0x2d, u64::from(*imm)),
                CmpImm { imm, .. } => (0x3d, u64::from(*imm)),
                XorImm { imm, .. } => (0x35, u64::from(*imm)),
                Shl { amount, .. } => (0xc1, u64::from(*amount)),
                Rol { amount, .. } => (0xd1, u64::from(*amount)),
                Or64Imm { imm, .. } => (0x0d, *imm),
                SubReg { .. } => (0x29, 0),
                MovReg { .. } => (0x89, 0),
                CondBranch { .. } => (0x74, 0),
                Jmp { .. } => (0xe9, 0),
                DirectCall { .. } => (0xe8, 0),
                IndirectCall { .. } => (0xff, 0xd0),
                IndirectJmpReg { .. } => (0xff, 0xe0),
                IndirectJmpGot { .. } => (0xff, 0x25),
                LoadFnAddr { .. } => (0xb9, 0),
                LoadData { .. } => (0x8b, 0),
                StoreData { .. } => (0x88, 0),
                PushImm { imm } => (0x6a, u64::from(*imm)),
                PushGotSlot { index } => (0xfe, u64::from(*index)),
                SwitchJmp { .. } => (0xfd, 0),
                Halt { code } => (0xf1, u64::from(*code as u32)),
                _ => unreachable!("handled above"),
            };
            let mut v = vec![tag];
            v.extend_from_slice(&imm.to_le_bytes());
            v
        }
    };
    out.resize(size, 0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_instruction, Cond, Reg, RegisterId};

    fn sz(text: &str) -> u32 {
        instruction_size(&parse_instruction(text).unwrap())
    }

    #[test]
    fn prologue_and_callsite_arithmetic() {
        assert_eq!(instruction_size(&Instruction::Endbr64), 4);
        let eax = Reg::r32(RegisterId::Rax);
        assert_eq!(instruction_size(&Instruction::MovImm { dst: eax, imm: 0xc00010ff }), 5);
        let check = instruction_size(&Instruction::SubImm { dst: eax, imm: 0xc00010ff })
            + instruction_size(&Instruction::CondBranch { cond: Cond::Eq, target: "x".into() })
            + instruction_size(&Instruction::Hlt);
        assert_eq!(check, 8);
        // The SID register identity does not change the charged size.
        assert_eq!(sz("sub $0xc00010ff, %r11d"), 5);
    }

    #[test]
    fn range_check_sequence_is_21_bytes() {
        let seq =
            ["lea f0, %ecx", "mov %rax, %rdx", "sub %rcx, %rdx", "rol $0x3d, %rdx", "cmp $0x2, %rdx", "jae cfi.trap"];
        assert_eq!(seq.iter().map(|s| sz(s)).sum::<u32>(), 21);
        assert_eq!(sz("jmp f0.cfi") + 3 * sz("int3"), 8);
    }

    #[test]
    fn encode_matches_size() {
        for text in [
            "endbr64",
            "nop 4",
            "nop",
            "nop 9",
            "hlt",
            "ud2",
            "mov $0x1, %eax",
            "or $0x12345678, %r11",
            "notrack jmp *f@GOT",
            "call *%r12",
            "push $0x300",
            "halt -3",
            "load t[%rax], %rbx",
        ] {
            let i = parse_instruction(text).unwrap();
            assert_eq!(encode(&i).len() as u32, instruction_size(&i), "{text}");
        }
        assert_eq!(encode(&Instruction::Endbr64), ENDBR64_BYTES);
        assert_eq!(encode(&Instruction::Nop { width: 4 }), NOP4_BYTES);
    }
}
