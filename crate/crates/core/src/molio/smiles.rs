use std::collections::BTreeMap;
use std::fmt;

use super::elements::atomic_number;
use super::molecule::{AtomFeature, Bond, BondOrder, BondStereo, ChiralTag, Molecule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    UnbalancedBranch,
    UnclosedRing(u32),
    UnknownElement(String),
    Unsupported(&'static str),
    UnexpectedChar(char),
    DanglingBond,
    SelfLoop,
    DuplicateBond,
    ConflictingRingBond,
    UnterminatedBracket,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// Byte offset into the input.
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ParseErrorKind::*;
        let what = match &self.kind {
            Empty => "empty SMILES".to_string(),
            UnbalancedBranch => "unbalanced branch".to_string(),
            UnclosedRing(l) => format!("unclosed ring label {l}"),
            UnknownElement(s) => format!("unknown element symbol '{s}'"),
            Unsupported(s) => format!("unsupported feature: {s}"),
            UnexpectedChar(c) => format!("unexpected character '{c}'"),
            DanglingBond => "bond symbol not followed by an atom".to_string(),
            SelfLoop => "ring closure onto the same atom".to_string(),
            DuplicateBond => "duplicate bond".to_string(),
            ConflictingRingBond => "conflicting ring-closure bond orders".to_string(),
            UnterminatedBracket => "unterminated bracket atom".to_string(),
        };
        write!(f, "{what} at byte {}", self.offset)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BondSpec {
    order: BondOrder,
    stereo: Option<BondStereo>,
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    atoms: Vec<AtomFeature>,
    bonds: Vec<Bond>,
    prev: Option<usize>,
    branches: Vec<(Option<usize>, usize)>,
    rings: BTreeMap<u32, (usize, Option<BondSpec>, usize)>,
    pending: Option<(BondSpec, usize)>,
}

fn err<T>(offset: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
    Err(ParseError { offset, kind })
}

/// Parses the supported SMILES subset into a heavy-atom graph.
pub fn parse_smiles(smiles: &str) -> Result<Molecule, ParseError> {
    parse_smiles_with_id(smiles, "")
}

pub fn parse_smiles_with_id(smiles: &str, id: &str) -> Result<Molecule, ParseError> {
    if smiles.trim().is_empty() {
        return err(0, ParseErrorKind::Empty);
    }
    let mut p = Parser {
        s: smiles.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        prev: None,
        branches: Vec::new(),
        rings: BTreeMap::new(),
        pending: None,
    };
    p.run()?;
    let mut mol = Molecule {
        id: id.to_string(),
        atoms: p.atoms,
        bonds_2d: p.bonds,
        coords: None,
        edges_3d: None,
    };
    mol.refresh_topology();
    Ok(mol)
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return err(at, ParseErrorKind::UnexpectedChar('('));
                    }
                    self.branches.push((self.prev, at));
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return err(at, ParseErrorKind::DanglingBond);
                    }
                    let Some((p, _)) = self.branches.pop() else {
                        return err(at, ParseErrorKind::UnbalancedBranch);
                    };
                    self.prev = p;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return err(at, ParseErrorKind::UnexpectedChar(c as char));
                    }
                    let spec = match c {
                        b'-' => BondSpec {
                            order: BondOrder::Single,
                            stereo: None,
                        },
                        b'=' => BondSpec {
                            order: BondOrder::Double,
                            stereo: None,
                        },
                        b'#' => BondSpec {
                            order: BondOrder::Triple,
                            stereo: None,
                        },
                        b':' => BondSpec {
                            order: BondOrder::Aromatic,
                            stereo: None,
                        },
                        b'/' => BondSpec {
                            order: BondOrder::Single,
                            stereo: Some(BondStereo::Up),
                        },
                        _ => BondSpec {
                            order: BondOrder::Single,
                            stereo: Some(BondStereo::Down),
                        },
                    };
                    self.pending = Some((spec, at));
                    self.pos += 1;
                }
                b'.' => {
                    if self.pending.is_some() {
                        return err(at, ParseErrorKind::DanglingBond);
                    }
                    if self.prev.is_none() {
                        return err(at, ParseErrorKind::UnexpectedChar('.'));
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, at)?;
                }
                b'%' => {
                    let d = &self.s[self.pos + 1..];
                    if d.len() < 2 || !d[0].is_ascii_digit() || !d[1].is_ascii_digit() {
                        return err(at, ParseErrorKind::UnexpectedChar('%'));
                    }
                    let label = ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32;
                    self.pos += 3;
                    self.ring_closure(label, at)?;
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, at)?;
                }
                b'*' => return err(at, ParseErrorKind::Unsupported("wildcard atom")),
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, at)?;
                }
            }
        }
        if let Some((_, off)) = self.pending {
            return err(off, ParseErrorKind::DanglingBond);
        }
        if let Some(&(_, off)) = self.branches.last() {
            return err(off, ParseErrorKind::UnbalancedBranch);
        }
        if let Some((&label, &(_, _, off))) = self.rings.iter().min_by_key(|(_, v)| v.2) {
            return err(off, ParseErrorKind::UnclosedRing(label));
        }
        if self.atoms.is_empty() {
            return err(0, ParseErrorKind::Empty);
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<AtomFeature, ParseError> {
        let at = self.pos;
        let c = self.s[at];
        let next = self.s.get(at + 1).copied();
        let (sym, len, aromatic) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", 2, false),
            (b'B', Some(b'r')) => ("Br", 2, false),
            (b'B', _) => ("B", 1, false),
            (b'C', _) => ("C", 1, false),
            (b'N', _) => ("N", 1, false),
            (b'O', _) => ("O", 1, false),
            (b'P', _) => ("P", 1, false),
            (b'S', _) => ("S", 1, false),
            (b'F', _) => ("F", 1, false),
            (b'I', _) => ("I", 1, false),
            (b'b', _) => ("B", 1, true),
            (b'c', _) => ("C", 1, true),
            (b'n', _) => ("N", 1, true),
            (b'o', _) => ("O", 1, true),
            (b'p', _) => ("P", 1, true),
            (b's', _) => ("S", 1, true),
            _ if c.is_ascii_alphabetic() => {
                let end = if next.is_some_and(|n| n.is_ascii_lowercase()) {
                    2
                } else {
                    1
                };
                let sym = String::from_utf8_lossy(&self.s[at..at + end]).into_owned();
                return err(at, ParseErrorKind::UnknownElement(sym));
            }
            _ => return err(at, ParseErrorKind::UnexpectedChar(self.char_at(at))),
        };
        self.pos += len;
        let mut atom = AtomFeature::new(atomic_number(sym).expect("organic subset symbol"));
        atom.aromatic = aromatic;
        Ok(atom)
    }

    fn char_at(&self, at: usize) -> char {
        std::str::from_utf8(&self.s[at..])
            .ok()
            .and_then(|t| t.chars().next())
            .unwrap_or('\u{fffd}')
    }

    fn bracket_atom(&mut self) -> Result<AtomFeature, ParseError> {
        let open = self.pos;
        let Some(rel) = self.s[open..].iter().position(|&b| b == b']') else {
            return err(open, ParseErrorKind::UnterminatedBracket);
        };
        let close = open + rel;
        let mut i = open + 1;
        let s = self.s;
        if i < close && s[i].is_ascii_digit() {
            return err(i, ParseErrorKind::Unsupported("isotope"));
        }
        if i < close && s[i] == b'*' {
            return err(i, ParseErrorKind::Unsupported("wildcard atom"));
        }
        if i >= close || !s[i].is_ascii_alphabetic() {
            return err(i, ParseErrorKind::UnexpectedChar(self.char_at(i)));
        }
        let sym_start = i;
        let (element, aromatic) = if s[i].is_ascii_lowercase() {
            let two = (i + 1 < close).then(|| &s[i..i + 2]);
            match two {
                Some(b"se") => {
                    i += 2;
                    (34, true)
                }
                Some(b"as") => {
                    i += 2;
                    (33, true)
                }
                _ => {
                    let sym = match s[i] {
                        b'b' => "B",
                        b'c' => "C",
                        b'n' => "N",
                        b'o' => "O",
                        b'p' => "P",
                        b's' => "S",
                        _ => {
                            return err(
                                i,
                                ParseErrorKind::UnknownElement((s[i] as char).to_string()),
                            )
                        }
                    };
                    i += 1;
                    (atomic_number(sym).expect("aromatic symbol"), true)
                }
            }
        } else {
            let two_ok = i + 1 < close && s[i + 1].is_ascii_lowercase();
            let candidates: &[usize] = if two_ok { &[2, 1] } else { &[1] };
            let mut found = None;
            for &len in candidates {
                let sym = std::str::from_utf8(&s[i..i + len]).unwrap_or("");
                if let Some(z) = atomic_number(sym) {
                    found = Some((z, len));
                    break;
                }
            }
            let Some((z, len)) = found else {
                let len = if two_ok { 2 } else { 1 };
                let sym = String::from_utf8_lossy(&s[i..i + len]).into_owned();
                return err(i, ParseErrorKind::UnknownElement(sym));
            };
            i += len;
            (z, false)
        };
        if element == 1 {
            return err(
                sym_start,
                ParseErrorKind::Unsupported("explicit hydrogen atom"),
            );
        }
        let mut atom = AtomFeature::new(element);
        atom.aromatic = aromatic;
        if i < close && s[i] == b'@' {
            if i + 1 < close && s[i + 1] == b'@' {
                atom.chiral_tag = Some(ChiralTag::Clockwise);
                i += 2;
            } else {
                atom.chiral_tag = Some(ChiralTag::CounterClockwise);
                i += 1;
            }
        }
        if i < close && s[i] == b'H' {
            i += 1;
            while i < close && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < close && (s[i] == b'+' || s[i] == b'-') {
            let sign: i32 = if s[i] == b'+' { 1 } else { -1 };
            let sign_char = s[i];
            i += 1;
            let mut mag = 1i32;
            if i < close && s[i].is_ascii_digit() {
                let start = i;
                while i < close && s[i].is_ascii_digit() {
                    i += 1;
                }
                mag = std::str::from_utf8(&s[start..i])
                    .ok()
                    .and_then(|t| t.parse().ok())
                    .filter(|&m: &i32| m <= 15)
                    .ok_or(ParseError {
                        offset: start,
                        kind: ParseErrorKind::Unsupported("charge magnitude"),
                    })?;
            } else {
                while i < close && s[i] == sign_char {
                    mag += 1;
                    i += 1;
                }
            }
            atom.formal_charge = (sign * mag) as i8;
        }
        if i < close && s[i] == b':' {
            return err(i, ParseErrorKind::Unsupported("atom class"));
        }
        if i != close {
            return err(i, ParseErrorKind::UnexpectedChar(self.char_at(i)));
        }
        self.pos = close + 1;
        Ok(atom)
    }

    fn add_atom(&mut self, atom: AtomFeature, at: usize) -> Result<(), ParseError> {
        let idx = self.atoms.len();
        let aromatic = atom.aromatic;
        self.atoms.push(atom);
        if let Some(p) = self.prev {
            let spec = self.pending.take().map(|(s, _)| s);
            let order = spec
                .map(|s| s.order)
                .unwrap_or_else(|| default_order(self.atoms[p].aromatic, aromatic));
            self.push_bond(p, idx, order, spec.and_then(|s| s.stereo), at)?;
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, label: u32, at: usize) -> Result<(), ParseError> {
        let Some(cur) = self.prev else {
            return err(at, ParseErrorKind::UnexpectedChar(self.char_at(at)));
        };
        let here = self.pending.take().map(|(s, _)| s);
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(label, (cur, here, at));
            }
            Some((open, there, _)) => {
                if open == cur {
                    return err(at, ParseErrorKind::SelfLoop);
                }
                let spec = match (here, there) {
                    (Some(a), Some(b)) if a.order != b.order => {
                        return err(at, ParseErrorKind::ConflictingRingBond)
                    }
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                let order = spec.map(|s| s.order).unwrap_or_else(|| {
                    default_order(self.atoms[open].aromatic, self.atoms[cur].aromatic)
                });
                self.push_bond(open, cur, order, spec.and_then(|s| s.stereo), at)?;
            }
        }
        Ok(())
    }

    fn push_bond(
        &mut self,
        a: usize,
        b: usize,
        order: BondOrder,
        stereo: Option<BondStereo>,
        at: usize,
    ) -> Result<(), ParseError> {
        let (a, b) = (a.min(b), a.max(b));
        if self.bonds.iter().any(|bd| bd.a == a && bd.b == b) {
            return err(at, ParseErrorKind::DuplicateBond);
        }
        self.bonds.push(Bond {
            a,
            b,
            order,
            stereo,
        });
        Ok(())
    }
}

fn default_order(a_aromatic: bool, b_aromatic: bool) -> BondOrder {
    if a_aromatic && b_aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}
