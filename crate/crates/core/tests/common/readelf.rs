//! Reads the data context out of `readelf -sSrW` text.

use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldenGlobal {
    pub name: String,
    pub section: &'static str,
    pub size: u64,
    pub alignment: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Golden {
    pub globals: Vec<GoldenGlobal>,
    pub got_loads: u64,
}

impl Golden {
    pub fn total(&self) -> u64 {
        self.globals
            .iter()
            .filter(|g| g.section != "rodata")
            .map(|g| g.size.div_ceil(g.alignment) * g.alignment)
            .sum()
    }
}

struct Section {
    kind: String,
    flags: String,
    align: u64,
}

const GOT_LOADS: &[&str] = &[
    "R_X86_64_GOT32",
    "R_X86_64_GOTPCREL",
    "R_X86_64_GOT64",
    "R_X86_64_GOTPCREL64",
    "R_X86_64_GOTPCRELX",
    "R_X86_64_REX_GOTPCRELX",
    "R_AARCH64_MOVW_GOTOFF_G0",
    "R_AARCH64_MOVW_GOTOFF_G0_NC",
    "R_AARCH64_MOVW_GOTOFF_G1",
    "R_AARCH64_MOVW_GOTOFF_G1_NC",
    "R_AARCH64_MOVW_GOTOFF_G2",
    "R_AARCH64_MOVW_GOTOFF_G2_NC",
    "R_AARCH64_MOVW_GOTOFF_G3",
    "R_AARCH64_GOT_LD_PREL19",
    "R_AARCH64_LD64_GOTOFF_LO15",
    "R_AARCH64_ADR_GOT_PAGE",
    "R_AARCH64_LD64_GOT_LO12_NC",
    "R_AARCH64_LD64_GOTPAGE_LO15",
];

fn num(s: &str) -> u64 {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).unwrap(),
        None => s.parse().unwrap(),
    }
}

pub fn parse(text: &str) -> Golden {
    let mut sections: BTreeMap<u64, Section> = BTreeMap::new();
    let mut globals = Vec::new();
    let mut got_loads = 0;
    let mut mode = "";
    for line in text.lines() {
        if line.starts_with("Section Headers:") {
            mode = "sections";
            continue;
        }
        if line.starts_with("Symbol table") {
            mode = "symbols";
            continue;
        }
        if line.starts_with("Relocation section") {
            mode = "relocs";
            continue;
        }
        if line.starts_with("Key to Flags") {
            mode = "";
            continue;
        }
        match mode {
            "sections" => {
                let Some((idx, rest)) = line
                    .trim_start()
                    .strip_prefix('[')
                    .and_then(|l| l.split_once(']'))
                else {
                    continue;
                };
                let Ok(idx) = idx.trim().parse::<u64>() else {
                    continue;
                };
                let t: Vec<&str> = rest.split_whitespace().collect();
                // name type addr off size es [flg] lk inf al
                let (kind, flags, align) = match t.len() {
                    10 => (t[1], t[6], t[9]),
                    9 => (t[1], "", t[8]),
                    8 => ("NULL", "", t[7]),
                    _ => continue,
                };
                sections.insert(
                    idx,
                    Section {
                        kind: kind.to_owned(),
                        flags: flags.to_owned(),
                        align: num(align),
                    },
                );
            }
            "symbols" => {
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() < 8 || !t[0].ends_with(':') {
                    continue;
                }
                let (size, kind, bind, ndx, name) = (t[2], t[3], t[4], t[6], t[7]);
                if !matches!(bind, "GLOBAL" | "WEAK" | "UNIQUE")
                    || !matches!(kind, "OBJECT" | "TLS" | "COMMON")
                {
                    continue;
                }
                let size = num(size);
                let g = match ndx {
                    "UND" | "ABS" => continue,
                    "COM" => GoldenGlobal {
                        name: name.to_owned(),
                        section: "bss",
                        size,
                        alignment: u64::from_str_radix(t[1], 16).unwrap().max(1),
                    },
                    n => {
                        let s = &sections[&num(n)];
                        let section = if s.kind == "NOBITS" {
                            "bss"
                        } else if s.flags.contains('W') {
                            "data"
                        } else if s.flags.contains('A') {
                            "rodata"
                        } else {
                            continue;
                        };
                        GoldenGlobal {
                            name: name.to_owned(),
                            section,
                            size,
                            alignment: s.align.max(1),
                        }
                    }
                };
                globals.push(g);
            }
            "relocs" => {
                if let Some(kind) = line.split_whitespace().nth(2) {
                    if GOT_LOADS.contains(&kind) {
                        got_loads += 1;
                    }
                }
            }
            _ => {}
        }
    }
    Golden { globals, got_loads }
}
