//! The weave object format (WOF): a position-independent module container
//! modeled on ELF relocatable objects.
//!
//! Layout (little-endian):
//!
//! ```text
//! "WOF1" | u32 version | u32 code_len | u32 data_len | u32 symbol_count
//!        | u32 import_count | u32 name_blob_len          (28 bytes)
//! code bytes | data template bytes
//! symbol records: u32 name_off, u16 name_len, u8 kind, u8 flags, u32 offset, u32 size
//! import records: u32 name_off, u16 name_len, u16 reserved
//! name blob
//! ```
//!
//! Every global access in code names a GOT slot. Slots `0..symbols.len()`
//! are the module's own symbols in table order, followed by imports.

pub mod asm;
pub mod isa;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};
use isa::{DecodeError, HostCall, Instr};

pub const MAGIC: &[u8; 4] = b"WOF1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const SYMBOL_RECORD_LEN: usize = 16;
pub const IMPORT_RECORD_LEN: usize = 8;
/// Bytes per memory cell; data symbols are cell aligned.
pub const CELL: u32 = 8;
pub const MAX_SLOTS: usize = u16::MAX as usize + 1;

const FLAG_EXPORTED: u8 = 1;
const FLAG_TUPLE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    Data,
    Function,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolEntry {
    pub name: String,
    pub kind: SymbolKind,
    /// Byte offset into the data template (data) or code (function).
    pub offset: u32,
    /// Size in bytes; always 0 for functions.
    pub size: u32,
    pub exported: bool,
    pub tuple_member: bool,
}

impl SymbolEntry {
    pub fn data(name: &str, offset: u32, size: u32) -> Self {
        Self {
            name: name.to_owned(),
            kind: SymbolKind::Data,
            offset,
            size,
            exported: true,
            tuple_member: false,
        }
    }

    pub fn function(name: &str, offset: u32) -> Self {
        Self {
            name: name.to_owned(),
            kind: SymbolKind::Function,
            offset,
            size: 0,
            exported: true,
            tuple_member: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ObjectModule {
    /// Not part of the binary format; loaders name objects after their file.
    pub name: String,
    pub code: Vec<u8>,
    pub data_template: Vec<u8>,
    pub symbols: Vec<SymbolEntry>,
    pub imports: Vec<String>,
}

/// Where a GOT slot points before linking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRef<'a> {
    Symbol(&'a SymbolEntry),
    Import(&'a str),
}

impl ObjectModule {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            ..Self::default()
        }
    }

    pub fn slot_count(&self) -> usize {
        self.symbols.len() + self.imports.len()
    }

    pub fn slot(&self, slot: usize) -> Option<SlotRef<'_>> {
        if let Some(s) = self.symbols.get(slot) {
            return Some(SlotRef::Symbol(s));
        }
        self.imports
            .get(slot - self.symbols.len())
            .map(|n| SlotRef::Import(n))
    }

    /// Slot index of a symbol or import by name.
    pub fn slot_of(&self, name: &str) -> Option<u16> {
        self.symbols
            .iter()
            .position(|s| s.name == name)
            .or_else(|| {
                self.imports
                    .iter()
                    .position(|i| i == name)
                    .map(|i| i + self.symbols.len())
            })
            .map(|i| i as u16)
    }

    pub fn symbol(&self, name: &str) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.name == name)
    }

    pub fn functions(&self) -> impl Iterator<Item = &SymbolEntry> {
        self.symbols
            .iter()
            .filter(|s| s.kind == SymbolKind::Function)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, WofError> {
        parse_object(bytes)
    }

    pub fn serialize(&self) -> Result<Vec<u8>, WofError> {
        serialize_object(self)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_object(self)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WofError {
    #[error("bad magic: expected \"WOF1\"")]
    BadMagic,
    #[error("unsupported object version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {section} section at byte {offset}")]
    TruncatedSection {
        section: &'static str,
        offset: usize,
    },
    #[error("malformed object at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("symbol `{name}` overlaps or exceeds its section at offset {offset}")]
    OverlappingSymbol { name: String, offset: u32 },
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("invalid object: {0}")]
    Invalid(Issue),
    #[error("object violates invariants: {}", .0.issues.first().map(|i| i.to_string()).unwrap_or_default())]
    InvariantViolation(ValidationReport),
}

impl From<WireError> for WofError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated { section, offset } => {
                WofError::TruncatedSection { section, offset }
            }
            WireError::Malformed { offset, reason, .. } => WofError::Malformed { offset, reason },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Location {
    Code(u32),
    Symbol(String),
    Import(String),
    Module,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Code(o) => write!(f, "code+{o:#x}"),
            Location::Symbol(s) => write!(f, "symbol `{s}`"),
            Location::Import(s) => write!(f, "import `{s}`"),
            Location::Module => f.write_str("module"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IssueKind {
    BadIdentifier,
    DuplicateName,
    ImportCollision,
    SymbolOutOfBounds,
    SymbolOverlap,
    MisalignedSymbol,
    BadDataSize,
    FunctionSize,
    TupleFunction,
    FunctionOffset,
    TruncatedInstruction,
    BadOpcode,
    DanglingSlot,
    BadJumpTarget,
    UnknownHostCall,
    TooManySlots,
}

impl IssueKind {
    pub fn message(self) -> &'static str {
        match self {
            IssueKind::BadIdentifier => "invalid identifier",
            IssueKind::DuplicateName => "duplicate name",
            IssueKind::ImportCollision => "import collides with exported symbol",
            IssueKind::SymbolOutOfBounds => "symbol exceeds data template",
            IssueKind::SymbolOverlap => "data symbols overlap",
            IssueKind::MisalignedSymbol => "data symbol not cell aligned",
            IssueKind::BadDataSize => "data symbol size must be a nonzero multiple of 8",
            IssueKind::FunctionSize => "function symbol must have size 0",
            IssueKind::TupleFunction => "tuple member must be data",
            IssueKind::FunctionOffset => "function offset is not an instruction boundary",
            IssueKind::TruncatedInstruction => "truncated instruction",
            IssueKind::BadOpcode => "bad opcode",
            IssueKind::DanglingSlot => "dangling GOT slot",
            IssueKind::BadJumpTarget => "jump target is not an instruction boundary",
            IssueKind::UnknownHostCall => "unknown host call",
            IssueKind::TooManySlots => "more than 65536 GOT slots",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub kind: IssueKind,
    pub location: Location,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.kind.message())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    fn push(&mut self, kind: IssueKind, location: Location) {
        self.issues.push(Issue { kind, location });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Lists every invariant violation; an empty report means the module is
/// loadable.
pub fn validate_object(m: &ObjectModule) -> ValidationReport {
    let mut report = ValidationReport::default();
    let data_len = m.data_template.len() as u64;

    let mut seen = HashSet::new();
    for s in &m.symbols {
        let loc = || Location::Symbol(s.name.clone());
        if !is_identifier(&s.name) {
            report.push(IssueKind::BadIdentifier, loc());
        }
        if !seen.insert(s.name.as_str()) {
            report.push(IssueKind::DuplicateName, loc());
        }
        match s.kind {
            SymbolKind::Data => {
                if s.size == 0 || s.size % CELL != 0 {
                    report.push(IssueKind::BadDataSize, loc());
                }
                if s.offset % CELL != 0 {
                    report.push(IssueKind::MisalignedSymbol, loc());
                }
                if s.offset as u64 + s.size as u64 > data_len {
                    report.push(IssueKind::SymbolOutOfBounds, loc());
                }
            }
            SymbolKind::Function => {
                if s.size != 0 {
                    report.push(IssueKind::FunctionSize, loc());
                }
                if s.tuple_member {
                    report.push(IssueKind::TupleFunction, loc());
                }
            }
        }
    }

    let mut data: Vec<&SymbolEntry> = m
        .symbols
        .iter()
        .filter(|s| s.kind == SymbolKind::Data && s.size > 0)
        .collect();
    data.sort_by_key(|s| (s.offset, s.size));
    for pair in data.windows(2) {
        if pair[0].offset as u64 + pair[0].size as u64 > pair[1].offset as u64 {
            report.push(
                IssueKind::SymbolOverlap,
                Location::Symbol(pair[1].name.clone()),
            );
        }
    }

    let mut imports = HashSet::new();
    for i in &m.imports {
        let loc = || Location::Import(i.clone());
        if !is_identifier(i) {
            report.push(IssueKind::BadIdentifier, loc());
        }
        if !imports.insert(i.as_str()) {
            report.push(IssueKind::DuplicateName, loc());
        }
        if seen.contains(i.as_str()) {
            report.push(IssueKind::ImportCollision, loc());
        }
    }

    let slots = m.slot_count();
    if slots > MAX_SLOTS {
        report.push(IssueKind::TooManySlots, Location::Module);
    }

    let mut boundaries = BTreeSet::new();
    let mut targets = Vec::new();
    for (at, ins) in isa::instructions(&m.code) {
        let loc = Location::Code(at as u32);
        match ins {
            Ok(ins) => {
                boundaries.insert(at as u32);
                if let Some(slot) = ins.slot() {
                    if slot as usize >= slots {
                        report.push(IssueKind::DanglingSlot, loc.clone());
                    }
                }
                if let Some(t) = ins.jump_target() {
                    targets.push((at as u32, t));
                }
                if let Instr::Host(h) = ins {
                    if HostCall::from_code(h).is_none() {
                        report.push(IssueKind::UnknownHostCall, loc);
                    }
                }
            }
            Err(DecodeError::Truncated) => report.push(IssueKind::TruncatedInstruction, loc),
            Err(DecodeError::BadOpcode(_)) => report.push(IssueKind::BadOpcode, loc),
        }
    }
    for (at, t) in targets {
        if !boundaries.contains(&t) {
            report.push(IssueKind::BadJumpTarget, Location::Code(at));
        }
    }
    for s in m.functions() {
        if !boundaries.contains(&s.offset) {
            report.push(IssueKind::FunctionOffset, Location::Symbol(s.name.clone()));
        }
    }
    report
}

fn first_error(report: ValidationReport, m: &ObjectModule) -> WofError {
    let issue = report.issues.into_iter().next().expect("non-empty report");
    let name = match &issue.location {
        Location::Symbol(n) | Location::Import(n) => n.clone(),
        _ => String::new(),
    };
    match issue.kind {
        IssueKind::SymbolOutOfBounds | IssueKind::SymbolOverlap => WofError::OverlappingSymbol {
            offset: m.symbol(&name).map(|s| s.offset).unwrap_or(0),
            name,
        },
        IssueKind::DuplicateName | IssueKind::ImportCollision => WofError::DuplicateName(name),
        _ => WofError::Invalid(issue),
    }
}

/// Decodes a WOF file. The result always satisfies every module invariant.
pub fn parse_object(bytes: &[u8]) -> Result<ObjectModule, WofError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WofError::BadMagic);
    }
    let mut r = Reader::new(bytes);
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(WofError::UnsupportedVersion(version));
    }
    let code_len = r.u32()? as usize;
    let data_len = r.u32()? as usize;
    let symbol_count = r.u32()? as usize;
    let import_count = r.u32()? as usize;
    let blob_len = r.u32()? as usize;

    r.section("code");
    let code = r.take(code_len)?.to_vec();
    r.section("data");
    let data_template = r.take(data_len)?.to_vec();

    r.section("symbols");
    let mut raw_symbols = Vec::with_capacity(symbol_count.min(r.remaining() / SYMBOL_RECORD_LEN));
    for _ in 0..symbol_count {
        let at = r.pos();
        let name_off = r.u32()?;
        let name_len = r.u16()?;
        let kind = r.u8()?;
        let flags = r.u8()?;
        let offset = r.u32()?;
        let size = r.u32()?;
        raw_symbols.push((at, name_off, name_len, kind, flags, offset, size));
    }
    r.section("imports");
    let mut raw_imports = Vec::with_capacity(import_count.min(r.remaining() / IMPORT_RECORD_LEN));
    for _ in 0..import_count {
        let at = r.pos();
        let name_off = r.u32()?;
        let name_len = r.u16()?;
        let reserved = r.u16()?;
        if reserved != 0 {
            return Err(WofError::Malformed {
                offset: at + 6,
                reason: "nonzero reserved field in import record".into(),
            });
        }
        raw_imports.push((at, name_off, name_len));
    }
    r.section("name blob");
    let blob_at = r.pos();
    let blob = r.take(blob_len)?;
    if r.remaining() != 0 {
        return Err(WofError::Malformed {
            offset: r.pos(),
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }

    let name_at = |at: usize, off: u32, len: u16| -> Result<String, WofError> {
        let (off, len) = (off as usize, len as usize);
        let s = blob.get(off..off + len).ok_or(WofError::Malformed {
            offset: at,
            reason: format!("name range {off}+{len} outside name blob at {blob_at}"),
        })?;
        std::str::from_utf8(s)
            .map(str::to_owned)
            .map_err(|_| WofError::Malformed {
                offset: at,
                reason: "name is not utf-8".into(),
            })
    };

    let mut symbols = Vec::with_capacity(raw_symbols.len());
    for (at, name_off, name_len, kind, flags, offset, size) in raw_symbols {
        let name = name_at(at, name_off, name_len)?;
        let kind = match kind {
            0 => SymbolKind::Data,
            1 => SymbolKind::Function,
            k => {
                return Err(WofError::Malformed {
                    offset: at + 6,
                    reason: format!("unknown symbol kind {k}"),
                })
            }
        };
        if flags & !(FLAG_EXPORTED | FLAG_TUPLE) != 0 {
            return Err(WofError::Malformed {
                offset: at + 7,
                reason: format!("unknown symbol flags {flags:#x}"),
            });
        }
        symbols.push(SymbolEntry {
            name,
            kind,
            offset,
            size,
            exported: flags & FLAG_EXPORTED != 0,
            tuple_member: flags & FLAG_TUPLE != 0,
        });
    }
    let imports = raw_imports
        .into_iter()
        .map(|(at, off, len)| name_at(at, off, len))
        .collect::<Result<Vec<_>, _>>()?;

    let m = ObjectModule {
        name: String::new(),
        code,
        data_template,
        symbols,
        imports,
    };
    let report = validate_object(&m);
    if !report.is_empty() {
        return Err(first_error(report, &m));
    }
    Ok(m)
}

/// Canonical encoding: names are laid out in the blob in symbol order then
/// import order, without sharing.
pub fn serialize_object(m: &ObjectModule) -> Result<Vec<u8>, WofError> {
    let report = validate_object(m);
    if !report.is_empty() {
        return Err(WofError::InvariantViolation(report));
    }
    let mut blob = Vec::new();
    let mut name_ref = |n: &str| {
        let off = blob.len() as u32;
        blob.extend_from_slice(n.as_bytes());
        (off, n.len() as u16)
    };
    let sym_names: Vec<_> = m.symbols.iter().map(|s| name_ref(&s.name)).collect();
    let imp_names: Vec<_> = m.imports.iter().map(|i| name_ref(i)).collect();

    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(m.code.len() as u32);
    w.u32(m.data_template.len() as u32);
    w.u32(m.symbols.len() as u32);
    w.u32(m.imports.len() as u32);
    w.u32(blob.len() as u32);
    w.bytes(&m.code);
    w.bytes(&m.data_template);
    for (s, (off, len)) in m.symbols.iter().zip(sym_names) {
        w.u32(off);
        w.u16(len);
        w.u8(match s.kind {
            SymbolKind::Data => 0,
            SymbolKind::Function => 1,
        });
        let mut flags = 0;
        if s.exported {
            flags |= FLAG_EXPORTED;
        }
        if s.tuple_member {
            flags |= FLAG_TUPLE;
        }
        w.u8(flags);
        w.u32(s.offset);
        w.u32(s.size);
    }
    for (off, len) in imp_names {
        w.u32(off);
        w.u16(len);
        w.u16(0);
    }
    w.bytes(&blob);
    Ok(w.into_bytes())
}

/// Instruction boundaries of a code stream, in order. Stops at the first
/// undecodable byte.
pub fn instruction_boundaries(code: &[u8]) -> Vec<u32> {
    isa::instructions(code)
        .take_while(|(_, r)| r.is_ok())
        .map(|(at, _)| at as u32)
        .collect()
}

/// Function extents `[start, end)` in code order, keyed by symbol name.
pub fn function_extents(m: &ObjectModule) -> BTreeMap<String, (u32, u32)> {
    let mut starts: Vec<u32> = m.functions().map(|f| f.offset).collect();
    starts.sort_unstable();
    starts.dedup();
    m.functions()
        .map(|f| {
            let end = starts
                .iter()
                .copied()
                .find(|&s| s > f.offset)
                .unwrap_or(m.code.len() as u32);
            (f.name.clone(), (f.offset, end))
        })
        .collect()
}
