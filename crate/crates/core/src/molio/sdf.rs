//! Import of concatenated V2000 molfiles. Only the header, counts line, atom
//! block and bond block are read; property blocks and data items are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use super::{elements, Bond, BondType, Molecule};
use crate::error::{Error, Result};

pub fn parse_sdf_v2000(path: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sdf_v2000_str(&text, path)
}

pub fn parse_sdf_v2000_str(text: &str, origin: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    let origin = origin.as_ref().to_path_buf();
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let end = (start..lines.len())
            .find(|&i| lines[i].trim_end() == "$$$$")
            .unwrap_or(lines.len());
        if lines[start..end].iter().any(|l| !l.trim().is_empty()) {
            let mol = parse_record(&lines[start..end], start, out.len(), &origin)?;
            mol.validate()?;
            out.push(mol);
        }
        start = end + 1;
    }
    Ok(out)
}

/// Fixed-width field `[from, to)` (0-based), trimmed. Short lines yield "".
fn field(line: &str, from: usize, to: usize) -> &str {
    let to = to.min(line.len());
    if from >= to {
        return "";
    }
    line.get(from..to).unwrap_or("").trim()
}

fn parse_record(
    lines: &[&str],
    offset: usize,
    index: usize,
    origin: &Path,
) -> Result<Molecule> {
    let err = |rel: usize, msg: String| Error::Parse {
        path: PathBuf::from(origin),
        line: offset + rel + 1,
        msg,
    };
    if lines.len() < 4 {
        return Err(err(lines.len(), "record is shorter than a molfile header".into()));
    }
    let title = lines[0].trim();
    let id = if title.is_empty() {
        format!("mol{index}")
    } else {
        title.to_string()
    };

    let counts = lines[3];
    if counts.contains("V3000") {
        return Err(err(3, "V3000 molfiles are not supported".into()));
    }
    let n_atoms: usize = field(counts, 0, 3)
        .parse()
        .map_err(|_| err(3, format!("bad atom count in counts line '{counts}'")))?;
    let n_bonds: usize = field(counts, 3, 6)
        .parse()
        .map_err(|_| err(3, format!("bad bond count in counts line '{counts}'")))?;

    let atom_start = 4;
    let bond_start = atom_start + n_atoms;
    let block_end = bond_start + n_bonds;
    if lines.len() < block_end {
        return Err(err(
            lines.len(),
            format!(
                "counts line declares {n_atoms} atoms and {n_bonds} bonds but the record has only {} block lines",
                lines.len().saturating_sub(atom_start)
            ),
        ));
    }

    let mut coords = Vec::with_capacity(n_atoms);
    let mut atomic_numbers = Vec::with_capacity(n_atoms);
    let mut charges = Vec::with_capacity(n_atoms);
    let mut unknown = Vec::new();
    for (k, line) in lines[atom_start..bond_start].iter().enumerate() {
        let rel = atom_start + k;
        let mut xyz = [0.0; 3];
        for (c, slot) in xyz.iter_mut().enumerate() {
            *slot = field(line, 10 * c, 10 * c + 10)
                .parse()
                .map_err(|_| err(rel, format!("atom line '{line}' is not an atom record")))?;
        }
        let sym = field(line, 31, 34);
        if sym.is_empty() {
            return Err(err(rel, format!("atom line '{line}' has no element symbol")));
        }
        match elements::atomic_number(sym) {
            Some(z) => atomic_numbers.push(z),
            None => {
                if !unknown.iter().any(|u| u == sym) {
                    unknown.push(sym.to_string());
                }
                atomic_numbers.push(0);
            }
        }
        let charge_code: u32 = field(line, 36, 39).parse().unwrap_or(0);
        charges.push(match charge_code {
            1 => 3,
            2 => 2,
            3 => 1,
            5 => -1,
            6 => -2,
            7 => -3,
            _ => 0,
        });
        coords.push(xyz);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownElement(unknown));
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    for (k, line) in lines[bond_start..block_end].iter().enumerate() {
        let rel = bond_start + k;
        let (i, j, code) = parse_bond_line(line)
            .ok_or_else(|| err(rel, format!("bond line '{line}' is not a bond record")))?;
        if i == 0 || j == 0 || i > n_atoms || j > n_atoms {
            return Err(err(rel, format!("bond references atom outside 1..={n_atoms}")));
        }
        let kind = BondType::from_v2000(code)
            .ok_or_else(|| err(rel, format!("unsupported bond type code {code}")))?;
        bonds.push(Bond::new(i - 1, j - 1, kind));
    }

    // A further bond-shaped line means the counts line under-declared bonds.
    if let Some(next) = lines.get(block_end) {
        if !next.starts_with("M  ") && parse_bond_line(next).is_some() {
            return Err(err(
                block_end,
                format!("counts line declares {n_bonds} bonds but more bond lines follow"),
            ));
        }
    }

    Ok(Molecule {
        id,
        atomic_numbers,
        formal_charges: charges,
        bonds: Some(bonds),
        conformers: Some(vec![coords]),
        label: None,
    })
}

fn parse_bond_line(line: &str) -> Option<(usize, usize, u32)> {
    if line.len() < 9 {
        return None;
    }
    let i = field(line, 0, 3).parse().ok()?;
    let j = field(line, 3, 6).parse().ok()?;
    let code = field(line, 6, 9).parse().ok()?;
    Some((i, j, code))
}
