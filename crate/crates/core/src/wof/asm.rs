//! Line-oriented assembler and disassembler for WOF modules.
//!
//! ```text
//! ; comment
//! .import NAME
//! .data NAME SIZE [@OFFSET] [= INT...]     exported data symbol
//! .tuple NAME SIZE [@OFFSET] [= INT...]    tuple-space member
//! .func NAME                               declare a function's table position
//! .local NAME                              clear the exported flag
//! .datasize N                              explicit data template length
//! .bytes OFFSET HEX                        raw template bytes
//! func NAME:                               function entry at the current code offset
//! LABEL:
//!     MNEMONIC [OPERANDS]
//! end
//! ```
//!
//! Jump operands are labels or `@OFFSET`; global operands are symbol or
//! import names, or `#SLOT`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use super::isa::{self, HostCall, Instr};
use super::{validate_object, ObjectModule, SymbolEntry, SymbolKind, ValidationReport, CELL};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("line {line}: undefined symbol `{name}`")]
    UndefinedSymbol { line: usize, name: String },
    #[error("symbol `{0}` redefined")]
    RedefinedSymbol(String),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("assembled module is invalid:\n{0}")]
    Invalid(ValidationReport),
}

enum Fixup {
    Label {
        at: usize,
        label: String,
    },
    Slot {
        at: usize,
        name: String,
        line: usize,
    },
}

#[derive(Default)]
struct Assembler {
    symbols: Vec<SymbolEntry>,
    /// Data symbols with their initial cell values, by symbol index.
    values: BTreeMap<usize, Vec<i64>>,
    explicit_offset: HashMap<usize, u32>,
    defined_funcs: BTreeSet<String>,
    imports: Vec<String>,
    labels: HashMap<String, u32>,
    code: Vec<u8>,
    fixups: Vec<Fixup>,
    local: Vec<(usize, String)>,
    datasize: Option<u32>,
    raw: Vec<(u32, Vec<u8>)>,
}

fn syntax(line: usize, message: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_int(tok: &str, line: usize) -> Result<i64, AsmError> {
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).map(|v| v as i64)
    } else {
        body.parse::<u64>().map(|v| v as i64)
    }
    .map_err(|_| syntax(line, format!("bad integer `{tok}`")))?;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_u32(tok: &str, line: usize) -> Result<u32, AsmError> {
    let v = parse_int(tok, line)?;
    u32::try_from(v).map_err(|_| syntax(line, format!("`{tok}` out of range")))
}

fn parse_small<T: TryFrom<i64>>(tok: &str, line: usize) -> Result<T, AsmError> {
    let v = parse_int(tok, line)?;
    T::try_from(v).map_err(|_| syntax(line, format!("`{tok}` out of range")))
}

impl Assembler {
    fn declared(&self, name: &str) -> bool {
        self.symbols.iter().any(|s| s.name == name) || self.imports.iter().any(|i| i == name)
    }

    fn declare_data(&mut self, toks: &[&str], tuple: bool, line: usize) -> Result<(), AsmError> {
        let name = *toks
            .first()
            .ok_or_else(|| syntax(line, "missing data name"))?;
        let size = parse_u32(
            toks.get(1)
                .ok_or_else(|| syntax(line, "missing data size"))?,
            line,
        )?;
        if self.declared(name) {
            return Err(AsmError::RedefinedSymbol(name.into()));
        }
        let mut rest = &toks[2..];
        let mut offset = None;
        if let Some(o) = rest.first().and_then(|t| t.strip_prefix('@')) {
            offset = Some(parse_u32(o, line)?);
            rest = &rest[1..];
        }
        let mut values = Vec::new();
        if let Some((&eq, tail)) = rest.split_first() {
            if eq != "=" {
                return Err(syntax(line, format!("expected `=`, found `{eq}`")));
            }
            for v in tail {
                values.push(parse_int(v, line)?);
            }
            if values.len() as u64 * CELL as u64 > size as u64 {
                return Err(syntax(line, "more initializers than cells"));
            }
        }
        let idx = self.symbols.len();
        let mut sym = SymbolEntry::data(name, 0, size);
        sym.tuple_member = tuple;
        self.symbols.push(sym);
        self.values.insert(idx, values);
        if let Some(o) = offset {
            self.explicit_offset.insert(idx, o);
        }
        Ok(())
    }

    fn declare_func(&mut self, name: &str) -> Result<(), AsmError> {
        if self.declared(name) {
            return Err(AsmError::RedefinedSymbol(name.into()));
        }
        self.symbols.push(SymbolEntry::function(name, 0));
        Ok(())
    }

    fn define_func(&mut self, name: &str, line: usize) -> Result<(), AsmError> {
        if !super::is_identifier(name) {
            return Err(syntax(line, format!("bad function name `{name}`")));
        }
        if !self.defined_funcs.insert(name.to_owned()) {
            return Err(AsmError::RedefinedSymbol(name.into()));
        }
        let here = self.code.len() as u32;
        match self.symbols.iter_mut().find(|s| s.name == name) {
            Some(s) if s.kind == SymbolKind::Function => s.offset = here,
            Some(_) => return Err(AsmError::RedefinedSymbol(name.into())),
            None => {
                if self.imports.iter().any(|i| i == name) {
                    return Err(AsmError::RedefinedSymbol(name.into()));
                }
                self.symbols.push(SymbolEntry::function(name, here));
            }
        }
        Ok(())
    }

    fn slot_operand(&mut self, tok: &str, line: usize) -> Result<u16, AsmError> {
        if let Some(n) = tok.strip_prefix('#') {
            return parse_small(n, line);
        }
        // opcode byte precedes the operand
        self.fixups.push(Fixup::Slot {
            at: self.code.len() + 1,
            name: tok.to_owned(),
            line,
        });
        Ok(0)
    }

    fn jump_operand(&mut self, tok: &str, line: usize) -> Result<u32, AsmError> {
        if let Some(n) = tok.strip_prefix('@') {
            return parse_u32(n, line);
        }
        self.fixups.push(Fixup::Label {
            at: self.code.len() + 1,
            label: tok.to_owned(),
        });
        Ok(0)
    }

    fn instruction(&mut self, toks: &[&str], line: usize) -> Result<(), AsmError> {
        let mnemonic = toks[0].to_ascii_lowercase();
        let args = &toks[1..];
        let arg = |i: usize| -> Result<&str, AsmError> {
            args.get(i)
                .copied()
                .ok_or_else(|| syntax(line, format!("`{mnemonic}` expects an operand")))
        };
        let nullary = |i: Instr| -> Result<Instr, AsmError> {
            if args.is_empty() {
                Ok(i)
            } else {
                Err(syntax(line, format!("`{mnemonic}` takes no operands")))
            }
        };
        let ins = match mnemonic.as_str() {
            "halt" => nullary(Instr::Halt)?,
            "push" => Instr::Push(parse_int(arg(0)?, line)?),
            "drop" => nullary(Instr::Drop)?,
            "dup" => nullary(Instr::Dup)?,
            "loadg" => Instr::LoadG(self.slot_operand(arg(0)?, line)?),
            "storeg" => Instr::StoreG(self.slot_operand(arg(0)?, line)?),
            "addrg" => Instr::AddrG(self.slot_operand(arg(0)?, line)?),
            "loadm" => nullary(Instr::LoadM)?,
            "storem" => nullary(Instr::StoreM)?,
            "loadl" => Instr::LoadL(parse_small(arg(0)?, line)?),
            "storel" => Instr::StoreL(parse_small(arg(0)?, line)?),
            "add" => nullary(Instr::Add)?,
            "sub" => nullary(Instr::Sub)?,
            "mul" => nullary(Instr::Mul)?,
            "divs" => nullary(Instr::Divs)?,
            "mod" => nullary(Instr::Mod)?,
            "eq" => nullary(Instr::Eq)?,
            "lt" => nullary(Instr::Lt)?,
            "gt" => nullary(Instr::Gt)?,
            "jmp" => Instr::Jmp(self.jump_operand(arg(0)?, line)?),
            "jz" => Instr::Jz(self.jump_operand(arg(0)?, line)?),
            "call" => {
                let argc = match args.get(1) {
                    Some(a) => parse_small(a, line)?,
                    None => 0,
                };
                Instr::Call {
                    slot: self.slot_operand(arg(0)?, line)?,
                    argc,
                }
            }
            "ret" => Instr::Ret(match args.first() {
                Some(a) => parse_small(a, line)?,
                None => 0,
            }),
            "alloc" => nullary(Instr::Alloc)?,
            "free" => nullary(Instr::Free)?,
            "realloc" => nullary(Instr::Realloc)?,
            "yield" => nullary(Instr::Yield)?,
            "host" => {
                let a = arg(0)?;
                match HostCall::from_name(a) {
                    Some(h) => Instr::Host(h.code()),
                    None => Instr::Host(parse_small(a, line)?),
                }
            }
            _ => {
                return Err(AsmError::UnknownMnemonic {
                    line,
                    mnemonic: toks[0].to_owned(),
                })
            }
        };
        let max_args = match ins {
            Instr::Call { .. } => 2,
            Instr::Ret(_) | Instr::Host(_) | Instr::Push(_) => 1,
            Instr::Jmp(_) | Instr::Jz(_) => 1,
            Instr::LoadG(_) | Instr::StoreG(_) | Instr::AddrG(_) => 1,
            Instr::LoadL(_) | Instr::StoreL(_) => 1,
            _ => 0,
        };
        if args.len() > max_args {
            return Err(syntax(line, format!("too many operands for `{mnemonic}`")));
        }
        ins.encode(&mut self.code);
        Ok(())
    }

    fn line(&mut self, raw: &str, line: usize) -> Result<(), AsmError> {
        let text = raw.split(';').next().unwrap_or("");
        let toks: Vec<&str> = text.split_whitespace().collect();
        let Some(&head) = toks.first() else {
            return Ok(());
        };
        match head {
            ".data" | ".tuple" => self.declare_data(&toks[1..], head == ".tuple", line),
            ".import" => {
                let [_, name] = toks[..] else {
                    return Err(syntax(line, ".import expects one name"));
                };
                if self.declared(name) {
                    return Err(AsmError::RedefinedSymbol(name.into()));
                }
                self.imports.push(name.to_owned());
                Ok(())
            }
            ".func" => {
                let [_, name] = toks[..] else {
                    return Err(syntax(line, ".func expects one name"));
                };
                self.declare_func(name)
            }
            ".local" => {
                let [_, name] = toks[..] else {
                    return Err(syntax(line, ".local expects one name"));
                };
                self.local.push((line, name.to_owned()));
                Ok(())
            }
            ".datasize" => {
                let [_, n] = toks[..] else {
                    return Err(syntax(line, ".datasize expects one size"));
                };
                self.datasize = Some(parse_u32(n, line)?);
                Ok(())
            }
            ".bytes" => {
                let [_, off, hex] = toks[..] else {
                    return Err(syntax(line, ".bytes expects OFFSET HEX"));
                };
                let off = parse_u32(off, line)?;
                if hex.len() % 2 != 0 {
                    return Err(syntax(line, "odd-length hex string"));
                }
                let bytes = (0..hex.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| syntax(line, "bad hex string"))?;
                self.raw.push((off, bytes));
                Ok(())
            }
            "func" => {
                let [_, name] = toks[..] else {
                    return Err(syntax(line, "expected `func NAME:`"));
                };
                let name = name
                    .strip_suffix(':')
                    .ok_or_else(|| syntax(line, "expected `:` after function name"))?;
                self.define_func(name, line)
            }
            "end" if toks.len() == 1 => Ok(()),
            _ if head.starts_with('.') => Err(syntax(line, format!("unknown directive `{head}`"))),
            _ if toks.len() == 1 && head.ends_with(':') => {
                let label = &head[..head.len() - 1];
                if !super::is_identifier(label) {
                    return Err(syntax(line, format!("bad label `{label}`")));
                }
                if self
                    .labels
                    .insert(label.to_owned(), self.code.len() as u32)
                    .is_some()
                {
                    return Err(AsmError::RedefinedSymbol(label.into()));
                }
                Ok(())
            }
            _ => self.instruction(&toks, line),
        }
    }

    fn finish(mut self) -> Result<ObjectModule, AsmError> {
        for s in self
            .symbols
            .iter()
            .filter(|s| s.kind == SymbolKind::Function)
        {
            if !self.defined_funcs.contains(&s.name) {
                return Err(AsmError::UndefinedSymbol {
                    line: 0,
                    name: s.name.clone(),
                });
            }
        }
        for (line, name) in std::mem::take(&mut self.local) {
            match self.symbols.iter_mut().find(|s| s.name == name) {
                Some(s) => s.exported = false,
                None => return Err(AsmError::UndefinedSymbol { line, name }),
            }
        }

        // data layout: sequential, cell aligned, unless placed explicitly
        let mut cursor = 0u64;
        let mut data_len = 0u64;
        for (idx, s) in self.symbols.iter_mut().enumerate() {
            if s.kind != SymbolKind::Data {
                continue;
            }
            let off = match self.explicit_offset.get(&idx) {
                Some(&o) => o as u64,
                None => cursor.div_ceil(CELL as u64) * CELL as u64,
            };
            s.offset = u32::try_from(off).map_err(|_| syntax(0, "data template exceeds 4 GiB"))?;
            let end = off + s.size as u64;
            cursor = cursor.max(end);
            data_len = data_len.max(end);
        }
        if let Some(n) = self.datasize {
            data_len = data_len.max(n as u64);
        }
        for (off, bytes) in &self.raw {
            data_len = data_len.max(*off as u64 + bytes.len() as u64);
        }
        let mut template = vec![0u8; data_len as usize];
        for (idx, values) in &self.values {
            let base = self.symbols[*idx].offset as usize;
            for (i, v) in values.iter().enumerate() {
                let at = base + i * CELL as usize;
                template[at..at + 8].copy_from_slice(&v.to_le_bytes());
            }
        }
        for (off, bytes) in &self.raw {
            template[*off as usize..*off as usize + bytes.len()].copy_from_slice(bytes);
        }

        let slot_of = |name: &str| -> Option<u16> {
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
        };
        for f in &self.fixups {
            match f {
                Fixup::Label { at, label } => {
                    let t = *self
                        .labels
                        .get(label)
                        .ok_or_else(|| AsmError::UndefinedLabel(label.clone()))?;
                    self.code[*at..*at + 4].copy_from_slice(&t.to_le_bytes());
                }
                Fixup::Slot { at, name, line } => {
                    let s = slot_of(name).ok_or_else(|| AsmError::UndefinedSymbol {
                        line: *line,
                        name: name.clone(),
                    })?;
                    self.code[*at..*at + 2].copy_from_slice(&s.to_le_bytes());
                }
            }
        }

        let m = ObjectModule {
            name: String::new(),
            code: self.code,
            data_template: template,
            symbols: self.symbols,
            imports: self.imports,
        };
        let report = validate_object(&m);
        if !report.is_empty() {
            return Err(AsmError::Invalid(report));
        }
        Ok(m)
    }
}

/// Assembles source text into a validated module.
pub fn assemble(text: &str) -> Result<ObjectModule, AsmError> {
    let mut a = Assembler::default();
    for (i, raw) in text.lines().enumerate() {
        a.line(raw, i + 1)?;
    }
    a.finish()
}

fn cells(bytes: &[u8]) -> Vec<i64> {
    let mut v: Vec<i64> = bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    while v.last() == Some(&0) {
        v.pop();
    }
    v
}

/// Renders a valid module as source that assembles back to an identical
/// module.
pub fn disassemble(m: &ObjectModule) -> String {
    let mut out = String::new();
    let label = if m.name.is_empty() {
        "<unnamed>"
    } else {
        &m.name
    };
    let _ = writeln!(
        out,
        "; module {label}: {} symbols, {} imports, {} code bytes, {} data bytes",
        m.symbols.len(),
        m.imports.len(),
        m.code.len(),
        m.data_template.len()
    );

    for i in &m.imports {
        let _ = writeln!(out, ".import {i}");
    }

    // mirror the assembler's layout so only displaced symbols carry @OFFSET
    let mut cursor = 0u64;
    let mut expected = vec![0u8; 0];
    for s in &m.symbols {
        match s.kind {
            SymbolKind::Function => {
                let _ = writeln!(out, ".func {}", s.name);
            }
            SymbolKind::Data => {
                let directive = if s.tuple_member { ".tuple" } else { ".data" };
                let _ = write!(out, "{directive} {} {}", s.name, s.size);
                let default = cursor.div_ceil(CELL as u64) * CELL as u64;
                if s.offset as u64 != default {
                    let _ = write!(out, " @{}", s.offset);
                }
                cursor = cursor.max(s.offset as u64 + s.size as u64);
                let range = s.offset as usize..(s.offset + s.size) as usize;
                let values = cells(&m.data_template[range.clone()]);
                if !values.is_empty() {
                    out.push_str(" =");
                    for v in &values {
                        let _ = write!(out, " {v}");
                    }
                }
                out.push('\n');
                if expected.len() < range.end {
                    expected.resize(range.end, 0);
                }
                expected[range.clone()].copy_from_slice(&m.data_template[range]);
            }
        }
        if !s.exported {
            let _ = writeln!(out, ".local {}", s.name);
        }
    }
    if (expected.len() as u64) < m.data_template.len() as u64 {
        let _ = writeln!(out, ".datasize {}", m.data_template.len());
        expected.resize(m.data_template.len(), 0);
    }
    // bytes outside every symbol
    let mut i = 0;
    while i < m.data_template.len() {
        if m.data_template[i] == expected[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < m.data_template.len() && m.data_template[i] != expected[i] {
            i += 1;
        }
        let hex: String = m.data_template[start..i]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let _ = writeln!(out, ".bytes {start} {hex}");
    }

    let slot_name = |slot: u16| -> String {
        match m.slot(slot as usize) {
            Some(super::SlotRef::Symbol(s)) => s.name.clone(),
            Some(super::SlotRef::Import(n)) => n.to_owned(),
            None => format!("#{slot}"),
        }
    };
    let targets: BTreeSet<u32> = isa::instructions(&m.code)
        .filter_map(|(_, i)| i.ok().and_then(|i| i.jump_target()))
        .collect();
    let mut entries: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for f in m.functions() {
        entries.entry(f.offset).or_default().push(&f.name);
    }

    let mut in_func = false;
    for (at, ins) in isa::instructions(&m.code) {
        let at32 = at as u32;
        if let Some(names) = entries.get(&at32) {
            if in_func {
                out.push_str("end\n");
            }
            out.push('\n');
            for n in names {
                let _ = writeln!(out, "func {n}:");
            }
            in_func = true;
        }
        if targets.contains(&at32) {
            let _ = writeln!(out, "L{at}:");
        }
        let Ok(ins) = ins else {
            let _ = writeln!(out, "    ; undecodable bytes at {at}");
            break;
        };
        let _ = match ins {
            Instr::LoadG(s) | Instr::StoreG(s) | Instr::AddrG(s) => {
                writeln!(out, "    {} {}", ins.mnemonic(), slot_name(s))
            }
            Instr::Call { slot, argc } => writeln!(out, "    call {} {argc}", slot_name(slot)),
            Instr::Jmp(t) | Instr::Jz(t) => writeln!(out, "    {} L{t}", ins.mnemonic()),
            _ => writeln!(out, "    {ins}"),
        };
    }
    if in_func {
        out.push_str("end\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wof::{parse_object, serialize_object};

    const COUNTER: &str = "\
.data counter 8 = 0
func main:
    loadg counter
    host print_int
    halt
end
";

    #[test]
    fn counter_example() {
        let m = assemble(COUNTER).unwrap();
        assert_eq!(m.symbols.len(), 2);
        assert_eq!(
            m.symbols
                .iter()
                .filter(|s| s.kind == SymbolKind::Data)
                .count(),
            1
        );
        assert_eq!(m.functions().count(), 1);
        assert_eq!(isa::instructions(&m.code).count(), 3);
        let text = disassemble(&m);
        assert!(text.contains("loadg counter"), "{text}");
        assert_eq!(assemble(&text).unwrap(), m);
    }

    #[test]
    fn empty_source_is_empty_module() {
        let m = assemble("").unwrap();
        assert_eq!(m, ObjectModule::default());
        let text = disassemble(&m);
        assert!(text.starts_with("; module"));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(assemble(&text).unwrap(), m);
    }

    #[test]
    fn undefined_label() {
        let err = assemble("func f:\n jmp missing\nend").unwrap_err();
        assert_eq!(err, AsmError::UndefinedLabel("missing".into()));
    }

    #[test]
    fn unknown_mnemonic_has_line() {
        let err = assemble("func f:\n  halt\n  frobnicate\n").unwrap_err();
        assert!(matches!(err, AsmError::UnknownMnemonic { line: 3, .. }));
    }

    #[test]
    fn redefinition() {
        assert_eq!(
            assemble(".data x 8\n.data x 8").unwrap_err(),
            AsmError::RedefinedSymbol("x".into())
        );
        assert_eq!(
            assemble("func f:\nhalt\nfunc f:\nhalt").unwrap_err(),
            AsmError::RedefinedSymbol("f".into())
        );
    }

    #[test]
    fn tuple_import_local_and_layout() {
        let src = "\
.import send
.tuple shared 8 = 7
.data buf 24 = 1 2
.data far 8 @64 = -1
.local buf
.datasize 80
.bytes 72 ff
func main:
top:
    loadg shared
    call send 1
    jz top
    halt
end
";
        let m = assemble(src).unwrap();
        assert!(m.symbol("shared").unwrap().tuple_member);
        assert!(!m.symbol("buf").unwrap().exported);
        assert_eq!(m.symbol("buf").unwrap().offset, 8);
        assert_eq!(m.symbol("far").unwrap().offset, 64);
        assert_eq!(m.data_template.len(), 80);
        assert_eq!(m.data_template[72], 0xff);
        assert_eq!(m.slot_of("send"), Some(4));
        let again = assemble(&disassemble(&m)).unwrap();
        assert_eq!(again, m);
        assert_eq!(
            serialize_object(&again).unwrap(),
            serialize_object(&m).unwrap()
        );
        assert_eq!(parse_object(&serialize_object(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn table_order_independent_of_code_order() {
        let src = ".func b\n.func a\nfunc a:\n halt\nfunc b:\n halt\n";
        let m = assemble(src).unwrap();
        assert_eq!(m.symbols[0].name, "b");
        assert_eq!(m.symbols[0].offset, 1);
        assert_eq!(assemble(&disassemble(&m)).unwrap(), m);
    }
}
