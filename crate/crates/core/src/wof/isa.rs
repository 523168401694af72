//! Instruction set of the stack machine. Opcodes are one byte; operands
//! follow little-endian.

use std::fmt;

pub mod op {
    pub const HALT: u8 = 0x00;
    pub const PUSH: u8 = 0x01;
    pub const DROP: u8 = 0x02;
    pub const DUP: u8 = 0x03;
    pub const LOADG: u8 = 0x10;
    pub const STOREG: u8 = 0x11;
    pub const ADDRG: u8 = 0x12;
    pub const LOADM: u8 = 0x13;
    pub const STOREM: u8 = 0x14;
    pub const LOADL: u8 = 0x20;
    pub const STOREL: u8 = 0x21;
    pub const ADD: u8 = 0x30;
    pub const SUB: u8 = 0x31;
    pub const MUL: u8 = 0x32;
    pub const DIVS: u8 = 0x33;
    pub const MOD: u8 = 0x34;
    pub const EQ: u8 = 0x38;
    pub const LT: u8 = 0x39;
    pub const GT: u8 = 0x3A;
    pub const JMP: u8 = 0x40;
    pub const JZ: u8 = 0x41;
    pub const CALL: u8 = 0x50;
    pub const RET: u8 = 0x51;
    pub const ALLOC: u8 = 0x60;
    pub const FREE: u8 = 0x61;
    pub const REALLOC: u8 = 0x62;
    pub const YIELD: u8 = 0x70;
    pub const HOST: u8 = 0x71;
}

/// Host services reachable through `HOST n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostCall {
    PrintInt,
    StringId,
    ClockTicks,
    PrintChar,
    NodeId,
}

impl HostCall {
    pub const ALL: [HostCall; 5] = [
        HostCall::PrintInt,
        HostCall::StringId,
        HostCall::ClockTicks,
        HostCall::PrintChar,
        HostCall::NodeId,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            HostCall::PrintInt => "print_int",
            HostCall::StringId => "string_id",
            HostCall::ClockTicks => "clock_ticks",
            HostCall::PrintChar => "print_char",
            HostCall::NodeId => "node_id",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|h| h.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instr {
    Halt,
    Push(i64),
    Drop,
    Dup,
    LoadG(u16),
    StoreG(u16),
    AddrG(u16),
    LoadM,
    StoreM,
    LoadL(u16),
    StoreL(u16),
    Add,
    Sub,
    Mul,
    Divs,
    Mod,
    Eq,
    Lt,
    Gt,
    Jmp(u32),
    Jz(u32),
    Call {
        slot: u16,
        argc: u8,
    },
    Ret(u8),
    Alloc,
    Free,
    Realloc,
    Yield,
    /// Raw host code; unknown codes are reported by validation.
    Host(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeError {
    BadOpcode(u8),
    Truncated,
}

/// Encoded length of an instruction given its opcode, or `None` for an
/// unknown opcode.
pub fn encoded_len(opcode: u8) -> Option<usize> {
    Some(match opcode {
        op::HALT | op::DROP | op::DUP | op::LOADM | op::STOREM => 1,
        op::ADD | op::SUB | op::MUL | op::DIVS | op::MOD | op::EQ | op::LT | op::GT => 1,
        op::ALLOC | op::FREE | op::REALLOC | op::YIELD => 1,
        op::PUSH => 9,
        op::LOADG | op::STOREG | op::ADDRG | op::LOADL | op::STOREL => 3,
        op::JMP | op::JZ => 5,
        op::CALL => 4,
        op::RET | op::HOST => 2,
        _ => return None,
    })
}

/// Decodes the instruction at `at`, returning it with its encoded length.
#[inline]
pub fn decode(code: &[u8], at: usize) -> Result<(Instr, usize), DecodeError> {
    let opcode = *code.get(at).ok_or(DecodeError::Truncated)?;
    let len = encoded_len(opcode).ok_or(DecodeError::BadOpcode(opcode))?;
    let operands = code.get(at + 1..at + len).ok_or(DecodeError::Truncated)?;
    let u16_at = |i: usize| u16::from_le_bytes([operands[i], operands[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(operands[i..i + 4].try_into().unwrap());
    let instr = match opcode {
        op::HALT => Instr::Halt,
        op::PUSH => Instr::Push(i64::from_le_bytes(operands[..8].try_into().unwrap())),
        op::DROP => Instr::Drop,
        op::DUP => Instr::Dup,
        op::LOADG => Instr::LoadG(u16_at(0)),
        op::STOREG => Instr::StoreG(u16_at(0)),
        op::ADDRG => Instr::AddrG(u16_at(0)),
        op::LOADM => Instr::LoadM,
        op::STOREM => Instr::StoreM,
        op::LOADL => Instr::LoadL(u16_at(0)),
        op::STOREL => Instr::StoreL(u16_at(0)),
        op::ADD => Instr::Add,
        op::SUB => Instr::Sub,
        op::MUL => Instr::Mul,
        op::DIVS => Instr::Divs,
        op::MOD => Instr::Mod,
        op::EQ => Instr::Eq,
        op::LT => Instr::Lt,
        op::GT => Instr::Gt,
        op::JMP => Instr::Jmp(u32_at(0)),
        op::JZ => Instr::Jz(u32_at(0)),
        op::CALL => Instr::Call {
            slot: u16_at(0),
            argc: operands[2],
        },
        op::RET => Instr::Ret(operands[0]),
        op::ALLOC => Instr::Alloc,
        op::FREE => Instr::Free,
        op::REALLOC => Instr::Realloc,
        op::YIELD => Instr::Yield,
        op::HOST => Instr::Host(operands[0]),
        _ => unreachable!("length table covers every opcode"),
    };
    Ok((instr, len))
}

impl Instr {
    pub fn opcode(&self) -> u8 {
        match self {
            Instr::Halt => op::HALT,
            Instr::Push(_) => op::PUSH,
            Instr::Drop => op::DROP,
            Instr::Dup => op::DUP,
            Instr::LoadG(_) => op::LOADG,
            Instr::StoreG(_) => op::STOREG,
            Instr::AddrG(_) => op::ADDRG,
            Instr::LoadM => op::LOADM,
            Instr::StoreM => op::STOREM,
            Instr::LoadL(_) => op::LOADL,
            Instr::StoreL(_) => op::STOREL,
            Instr::Add => op::ADD,
            Instr::Sub => op::SUB,
            Instr::Mul => op::MUL,
            Instr::Divs => op::DIVS,
            Instr::Mod => op::MOD,
            Instr::Eq => op::EQ,
            Instr::Lt => op::LT,
            Instr::Gt => op::GT,
            Instr::Jmp(_) => op::JMP,
            Instr::Jz(_) => op::JZ,
            Instr::Call { .. } => op::CALL,
            Instr::Ret(_) => op::RET,
            Instr::Alloc => op::ALLOC,
            Instr::Free => op::FREE,
            Instr::Realloc => op::REALLOC,
            Instr::Yield => op::YIELD,
            Instr::Host(_) => op::HOST,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.opcode());
        match *self {
            Instr::Push(v) => out.extend_from_slice(&v.to_le_bytes()),
            Instr::LoadG(s)
            | Instr::StoreG(s)
            | Instr::AddrG(s)
            | Instr::LoadL(s)
            | Instr::StoreL(s) => out.extend_from_slice(&s.to_le_bytes()),
            Instr::Jmp(t) | Instr::Jz(t) => out.extend_from_slice(&t.to_le_bytes()),
            Instr::Call { slot, argc } => {
                out.extend_from_slice(&slot.to_le_bytes());
                out.push(argc);
            }
            Instr::Ret(n) | Instr::Host(n) => out.push(n),
            _ => {}
        }
    }

    pub fn size(&self) -> usize {
        encoded_len(self.opcode()).expect("known opcode")
    }

    /// GOT slot referenced by this instruction, if any.
    pub fn slot(&self) -> Option<u16> {
        match *self {
            Instr::LoadG(s) | Instr::StoreG(s) | Instr::AddrG(s) => Some(s),
            Instr::Call { slot, .. } => Some(slot),
            _ => None,
        }
    }

    pub fn jump_target(&self) -> Option<u32> {
        match *self {
            Instr::Jmp(t) | Instr::Jz(t) => Some(t),
            _ => None,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Halt => "halt",
            Instr::Push(_) => "push",
            Instr::Drop => "drop",
            Instr::Dup => "dup",
            Instr::LoadG(_) => "loadg",
            Instr::StoreG(_) => "storeg",
            Instr::AddrG(_) => "addrg",
            Instr::LoadM => "loadm",
            Instr::StoreM => "storem",
            Instr::LoadL(_) => "loadl",
            Instr::StoreL(_) => "storel",
            Instr::Add => "add",
            Instr::Sub => "sub",
            Instr::Mul => "mul",
            Instr::Divs => "divs",
            Instr::Mod => "mod",
            Instr::Eq => "eq",
            Instr::Lt => "lt",
            Instr::Gt => "gt",
            Instr::Jmp(_) => "jmp",
            Instr::Jz(_) => "jz",
            Instr::Call { .. } => "call",
            Instr::Ret(_) => "ret",
            Instr::Alloc => "alloc",
            Instr::Free => "free",
            Instr::Realloc => "realloc",
            Instr::Yield => "yield",
            Instr::Host(_) => "host",
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())?;
        match *self {
            Instr::Push(v) => write!(f, " {v}"),
            Instr::LoadG(s) | Instr::StoreG(s) | Instr::AddrG(s) => write!(f, " #{s}"),
            Instr::LoadL(i) | Instr::StoreL(i) => write!(f, " {i}"),
            Instr::Jmp(t) | Instr::Jz(t) => write!(f, " @{t}"),
            Instr::Call { slot, argc } => write!(f, " #{slot} {argc}"),
            Instr::Ret(n) => write!(f, " {n}"),
            Instr::Host(n) => match HostCall::from_code(n) {
                Some(h) => write!(f, " {}", h.name()),
                None => write!(f, " {n}"),
            },
            _ => Ok(()),
        }
    }
}

/// Iterates `(offset, decoded)` over a code stream, stopping after the
/// first decode error.
pub fn instructions(code: &[u8]) -> impl Iterator<Item = (usize, Result<Instr, DecodeError>)> + '_ {
    let mut at = 0usize;
    let mut failed = false;
    std::iter::from_fn(move || {
        if failed || at >= code.len() {
            return None;
        }
        let here = at;
        match decode(code, at) {
            Ok((i, len)) => {
                at += len;
                Some((here, Ok(i)))
            }
            Err(e) => {
                failed = true;
                Some((here, Err(e)))
            }
        }
    })
}
