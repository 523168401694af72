//! Data-context analysis of 64-bit relocatable ELF objects.
//!
//! Reports the global data symbols an object contributes to a module's
//! data context and how many of its relocations reach data through a GOT.
//! Nothing is executed or rewritten.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

const ET_REL: u16 = 1;
const EM_X86_64: u16 = 62;
const EM_AARCH64: u16 = 183;

const SHT_SYMTAB: u32 = 2;
const SHT_RELA: u32 = 4;
const SHT_NOBITS: u32 = 8;
const SHT_REL: u32 = 9;
const SHT_SYMTAB_SHNDX: u32 = 18;

const SHF_WRITE: u64 = 1;
const SHF_ALLOC: u64 = 2;

const SHN_UNDEF: u16 = 0;
const SHN_LORESERVE: u16 = 0xff00;
const SHN_COMMON: u16 = 0xfff2;
const SHN_XINDEX: u16 = 0xffff;

const STB_GLOBAL: u8 = 1;
const STB_WEAK: u8 = 2;
const STB_GNU_UNIQUE: u8 = 10;

const STT_OBJECT: u8 = 1;
const STT_COMMON: u8 = 5;
const STT_TLS: u8 = 6;

/// x86-64 relocation kinds that load a data address out of a GOT entry.
pub const X86_64_GOT_LOADS: &[u32] = &[
    3,  // R_X86_64_GOT32
    9,  // R_X86_64_GOTPCREL
    27, // R_X86_64_GOT64
    28, // R_X86_64_GOTPCREL64
    41, // R_X86_64_GOTPCRELX
    42, // R_X86_64_REX_GOTPCRELX
];
/// x86-64 kinds relative to the GOT base that do not read an entry.
pub const X86_64_GOT_RELATIVE: &[u32] = &[
    25, // R_X86_64_GOTOFF64
    26, // R_X86_64_GOTPC32
    29, // R_X86_64_GOTPC64
];
/// AArch64 relocation kinds that load a data address out of a GOT entry.
pub const AARCH64_GOT_LOADS: &[u32] = &[
    300, 301, 302, 303, 304, 305, 306, // R_AARCH64_MOVW_GOTOFF_G*
    309, // R_AARCH64_GOT_LD_PREL19
    310, // R_AARCH64_LD64_GOTOFF_LO15
    311, // R_AARCH64_ADR_GOT_PAGE
    312, // R_AARCH64_LD64_GOT_LO12_NC
    313, // R_AARCH64_LD64_GOTPAGE_LO15
];
pub const AARCH64_GOT_RELATIVE: &[u32] = &[
    307, // R_AARCH64_GOTREL64
    308, // R_AARCH64_GOTREL32
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ElfError {
    #[error("not an ELF file")]
    NotElf,
    #[error("unsupported ELF class: only 64-bit objects are supported")]
    UnsupportedClass,
    #[error("not a relocatable object (e_type {0})")]
    NotRelocatable(u16),
    #[error("malformed section table at byte {offset}: {reason}")]
    MalformedSectionTable { offset: u64, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSection {
    Data,
    Bss,
    Rodata,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ElfGlobal {
    pub name: String,
    pub section: DataSection,
    pub size: u64,
    pub alignment: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ElfDataContextReport {
    pub object_name: String,
    pub globals: Vec<ElfGlobal>,
    pub total_data_context_bytes: u64,
    pub got_relocation_count: u64,
    pub pic: bool,
}

impl ElfDataContextReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn malformed(offset: u64, reason: impl Into<String>) -> ElfError {
    ElfError::MalformedSectionTable {
        offset,
        reason: reason.into(),
    }
}

struct Bytes<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl<'a> Bytes<'a> {
    fn slice(&self, off: u64, len: u64) -> Result<&'a [u8], ElfError> {
        let end = off
            .checked_add(len)
            .filter(|&e| e <= self.buf.len() as u64)
            .ok_or_else(|| malformed(off, format!("range of {len} bytes exceeds file")))?;
        Ok(&self.buf[off as usize..end as usize])
    }

    fn u8(&self, off: u64) -> Result<u8, ElfError> {
        Ok(self.slice(off, 1)?[0])
    }

    fn u16(&self, off: u64) -> Result<u16, ElfError> {
        let b: [u8; 2] = self.slice(off, 2)?.try_into().unwrap();
        Ok(if self.big_endian {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        })
    }

    fn u32(&self, off: u64) -> Result<u32, ElfError> {
        let b: [u8; 4] = self.slice(off, 4)?.try_into().unwrap();
        Ok(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }

    fn u64(&self, off: u64) -> Result<u64, ElfError> {
        let b: [u8; 8] = self.slice(off, 8)?.try_into().unwrap();
        Ok(if self.big_endian {
            u64::from_be_bytes(b)
        } else {
            u64::from_le_bytes(b)
        })
    }
}

#[derive(Clone, Debug)]
struct Section {
    name_off: u32,
    kind: u32,
    flags: u64,
    offset: u64,
    size: u64,
    link: u32,
    align: u64,
    entsize: u64,
}

fn read_sections(b: &Bytes<'_>) -> Result<(Vec<Section>, usize), ElfError> {
    let shoff = b.u64(0x28)?;
    let shentsize = b.u16(0x3a)? as u64;
    let mut shnum = b.u16(0x3c)? as u64;
    let mut shstrndx = b.u16(0x3e)? as u64;
    if shoff == 0 {
        return Err(malformed(0x28, "object has no section table"));
    }
    if shentsize != 64 {
        return Err(malformed(
            0x3a,
            format!("section header size {shentsize}, expected 64"),
        ));
    }
    if shnum == 0 {
        // extended numbering lives in section 0
        shnum = b.u64(shoff + 32)?;
    }
    if shstrndx == SHN_XINDEX as u64 {
        shstrndx = b.u32(shoff + 40)? as u64;
    }
    if shnum > (b.buf.len() as u64) / 64 {
        return Err(malformed(
            0x3c,
            format!("{shnum} sections cannot fit in file"),
        ));
    }
    let mut out = Vec::with_capacity(shnum as usize);
    for i in 0..shnum {
        let h = shoff + i * 64;
        let s = Section {
            name_off: b.u32(h)?,
            kind: b.u32(h + 4)?,
            flags: b.u64(h + 8)?,
            offset: b.u64(h + 24)?,
            size: b.u64(h + 32)?,
            link: b.u32(h + 40)?,
            align: b.u64(h + 48)?,
            entsize: b.u64(h + 56)?,
        };
        if s.kind != SHT_NOBITS && s.kind != 0 {
            b.slice(s.offset, s.size)
                .map_err(|_| malformed(h, format!("section {i} data lies outside the file")))?;
        }
        out.push(s);
    }
    if shstrndx as usize >= out.len() {
        return Err(malformed(0x3e, "section name table index out of range"));
    }
    Ok((out, shstrndx as usize))
}

fn c_str(table: &[u8], off: u32, at: u64) -> Result<String, ElfError> {
    let tail = table
        .get(off as usize..)
        .ok_or_else(|| malformed(at, format!("string offset {off} outside string table")))?;
    let end = tail
        .iter()
        .position(|&c| c == 0)
        .ok_or_else(|| malformed(at, "unterminated string"))?;
    Ok(String::from_utf8_lossy(&tail[..end]).into_owned())
}

/// Scans a 64-bit ET_REL object. Symbols are reported in symbol-table
/// order, compiler-generated globals included verbatim.
pub fn scan_elf(object_name: &str, bytes: &[u8]) -> Result<ElfDataContextReport, ElfError> {
    if bytes.len() < 16 || &bytes[..4] != b"\x7fELF" {
        return Err(ElfError::NotElf);
    }
    match bytes[4] {
        2 => {}
        1 => return Err(ElfError::UnsupportedClass),
        _ => return Err(ElfError::NotElf),
    }
    let big_endian = match bytes[5] {
        1 => false,
        2 => true,
        _ => return Err(ElfError::NotElf),
    };
    if bytes.len() < 64 {
        return Err(malformed(0, "truncated ELF header"));
    }
    let b = Bytes {
        buf: bytes,
        big_endian,
    };
    let e_type = b.u16(16)?;
    if e_type != ET_REL {
        return Err(ElfError::NotRelocatable(e_type));
    }
    let machine = b.u16(18)?;
    let (sections, shstrndx) = read_sections(&b)?;
    let shstr = b.slice(sections[shstrndx].offset, sections[shstrndx].size)?;
    for (i, s) in sections.iter().enumerate() {
        c_str(shstr, s.name_off, 0)
            .map_err(|_| malformed(i as u64, format!("section {i} has an invalid name offset")))?;
    }

    let mut globals = Vec::new();
    if let Some((symtab_idx, symtab)) = sections
        .iter()
        .enumerate()
        .find(|(_, s)| s.kind == SHT_SYMTAB)
    {
        if symtab.entsize != 24 {
            return Err(malformed(
                symtab.offset,
                format!("symbol entry size {}", symtab.entsize),
            ));
        }
        let strtab = sections
            .get(symtab.link as usize)
            .ok_or_else(|| malformed(symtab.offset, "symbol table links a missing string table"))?;
        let strings = b.slice(strtab.offset, strtab.size)?;
        let xindex = sections
            .iter()
            .find(|s| s.kind == SHT_SYMTAB_SHNDX && s.link as usize == symtab_idx)
            .map(|s| s.offset);
        let count = symtab.size / 24;
        for i in 1..count {
            let at = symtab.offset + i * 24;
            let name_off = b.u32(at)?;
            let info = b.u8(at + 4)?;
            let mut shndx = b.u16(at + 6)? as u32;
            let value = b.u64(at + 8)?;
            let size = b.u64(at + 16)?;
            let (bind, kind) = (info >> 4, info & 0xf);
            if !matches!(bind, STB_GLOBAL | STB_WEAK | STB_GNU_UNIQUE) {
                continue;
            }
            if !matches!(kind, STT_OBJECT | STT_TLS | STT_COMMON) {
                continue;
            }
            if shndx == SHN_XINDEX as u32 {
                let table = xindex
                    .ok_or_else(|| malformed(at, "SHN_XINDEX without extended index table"))?;
                shndx = b.u32(table + i * 4)?;
            }
            let name = c_str(strings, name_off, at)?;
            let global = if shndx == SHN_COMMON as u32 {
                ElfGlobal {
                    name,
                    section: DataSection::Bss,
                    size,
                    alignment: value.max(1),
                }
            } else if shndx == SHN_UNDEF as u32
                || (shndx >= SHN_LORESERVE as u32 && shndx <= 0xffff)
            {
                continue;
            } else {
                let sec = sections.get(shndx as usize).ok_or_else(|| {
                    malformed(at, format!("symbol `{name}` names missing section {shndx}"))
                })?;
                let section = if sec.kind == SHT_NOBITS {
                    DataSection::Bss
                } else if sec.flags & SHF_WRITE != 0 {
                    DataSection::Data
                } else if sec.flags & SHF_ALLOC != 0 {
                    DataSection::Rodata
                } else {
                    continue;
                };
                ElfGlobal {
                    name,
                    section,
                    size,
                    alignment: sec.align.max(1),
                }
            };
            globals.push(global);
        }
    }

    let (loads, relative): (&[u32], &[u32]) = match machine {
        EM_X86_64 => (X86_64_GOT_LOADS, X86_64_GOT_RELATIVE),
        EM_AARCH64 => (AARCH64_GOT_LOADS, AARCH64_GOT_RELATIVE),
        _ => (&[], &[]),
    };
    let mut got_relocation_count = 0u64;
    let mut got_relative = 0u64;
    for s in sections
        .iter()
        .filter(|s| s.kind == SHT_RELA || s.kind == SHT_REL)
    {
        let entsize = if s.kind == SHT_RELA { 24 } else { 16 };
        if s.entsize != entsize {
            return Err(malformed(
                s.offset,
                format!("relocation entry size {}", s.entsize),
            ));
        }
        for i in 0..s.size / entsize {
            let r_info = b.u64(s.offset + i * entsize + 8)?;
            let kind = (r_info & 0xffff_ffff) as u32;
            if loads.contains(&kind) {
                got_relocation_count += 1;
            } else if relative.contains(&kind) {
                got_relative += 1;
            }
        }
    }

    let total_data_context_bytes = globals
        .iter()
        .filter(|g| g.section != DataSection::Rodata)
        .map(|g| g.size.div_ceil(g.alignment) * g.alignment)
        .sum();

    Ok(ElfDataContextReport {
        object_name: object_name.to_owned(),
        globals,
        total_data_context_bytes,
        got_relocation_count,
        pic: got_relocation_count + got_relative > 0,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GlobalDelta {
    pub name: String,
    pub old_size: Option<u64>,
    pub new_size: Option<u64>,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct DataContextDiff {
    pub added: Vec<GlobalDelta>,
    pub removed: Vec<GlobalDelta>,
    pub resized: Vec<GlobalDelta>,
}

impl DataContextDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.resized.is_empty()
    }
}

/// Symmetric difference of two reports' globals plus size deltas, by name.
pub fn compare_data_contexts(
    a: &ElfDataContextReport,
    b: &ElfDataContextReport,
) -> DataContextDiff {
    let index = |r: &ElfDataContextReport| -> BTreeMap<String, u64> {
        r.globals.iter().map(|g| (g.name.clone(), g.size)).collect()
    };
    let (old, new) = (index(a), index(b));
    let mut diff = DataContextDiff::default();
    for (name, &size) in &old {
        match new.get(name) {
            None => diff.removed.push(GlobalDelta {
                name: name.clone(),
                old_size: Some(size),
                new_size: None,
                delta: -(size as i64),
            }),
            Some(&n) if n != size => diff.resized.push(GlobalDelta {
                name: name.clone(),
                old_size: Some(size),
                new_size: Some(n),
                delta: n as i64 - size as i64,
            }),
            Some(_) => {}
        }
    }
    for (name, &size) in &new {
        if !old.contains_key(name) {
            diff.added.push(GlobalDelta {
                name: name.clone(),
                old_size: None,
                new_size: Some(size),
                delta: size as i64,
            });
        }
    }
    diff
}
