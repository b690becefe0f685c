use super::elements::{atomic_number, symbol};
use super::molecule::Molecule;
use super::MolError;

/// Attaches coordinates from a standard XYZ block. Hydrogen lines are skipped
/// because molecules carry heavy atoms only.
pub fn load_xyz(text: &str, mol: Molecule) -> Result<Molecule, MolError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (lineno, header) = lines.next().ok_or(MolError::MalformedLine(1))?;
    let declared: usize = header
        .trim()
        .parse()
        .map_err(|_| MolError::MalformedLine(lineno))?;
    lines.next().ok_or(MolError::MalformedLine(2))?;

    let mut heavy = Vec::new();
    let mut seen = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            if seen == declared {
                continue;
            }
            return Err(MolError::MalformedLine(lineno));
        }
        if seen == declared {
            return Err(MolError::MalformedLine(lineno));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(MolError::MalformedLine(lineno));
        }
        let z = parse_symbol(toks[0]).ok_or(MolError::MalformedLine(lineno))?;
        let mut xyz = [0.0; 3];
        for (k, t) in toks[1..4].iter().enumerate() {
            xyz[k] = t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or(MolError::MalformedLine(lineno))?;
        }
        seen += 1;
        if z != 1 {
            heavy.push((z, xyz));
        }
    }
    if seen != declared {
        return Err(MolError::CountMismatch {
            expected: declared,
            found: seen,
        });
    }
    if heavy.len() != mol.len() {
        return Err(MolError::CountMismatch {
            expected: mol.len(),
            found: heavy.len(),
        });
    }
    for (i, ((z, _), atom)) in heavy.iter().zip(&mol.atoms).enumerate() {
        if *z != atom.element {
            return Err(MolError::ElementMismatch(i));
        }
    }
    mol.with_coords(heavy.into_iter().map(|(_, c)| c).collect())
}

fn parse_symbol(tok: &str) -> Option<u8> {
    if let Ok(z) = tok.parse::<u8>() {
        return (1..=118).contains(&z).then_some(z);
    }
    let mut cs = tok.chars();
    let first = cs.next()?.to_ascii_uppercase();
    let rest: String = cs.map(|c| c.to_ascii_lowercase()).collect();
    atomic_number(&format!("{first}{rest}"))
}

/// Renders heavy-atom coordinates as an XYZ block.
pub fn write_xyz(mol: &Molecule) -> Result<String, MolError> {
    let coords = mol.coords()?;
    let mut out = format!("{}\n{}\n", mol.len(), mol.id);
    for (atom, c) in mol.atoms.iter().zip(coords) {
        let sym = symbol(atom.element).unwrap_or("X");
        out.push_str(&format!("{sym} {:.6} {:.6} {:.6}\n", c[0], c[1], c[2]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::parse_smiles;

    const ETHANOL: &str = "3\nethanol\nC 0.0 0.0 0.0\nC 1.5 0.0 0.0\nO 2.0 1.4 0.0\n";

    #[test]
    fn ethanol_coords() {
        let m = load_xyz(ETHANOL, parse_smiles("CCO").unwrap()).unwrap();
        let c = m.coords().unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2], [2.0, 1.4, 0.0]);
    }

    #[test]
    fn count_mismatch() {
        let two = "2\n\nC 0 0 0\nC 1 0 0\n";
        assert!(matches!(
            load_xyz(two, parse_smiles("CCO").unwrap()),
            Err(MolError::CountMismatch { .. })
        ));
        let short = "3\n\nC 0 0 0\nC 1 0 0\n";
        assert!(matches!(
            load_xyz(short, parse_smiles("CC").unwrap()),
            Err(MolError::CountMismatch { .. })
        ));
    }

    #[test]
    fn element_mismatch() {
        let coc = "3\n\nC 0 0 0\nO 1 0 0\nC 2 0 0\n";
        assert_eq!(
            load_xyz(coc, parse_smiles("CCO").unwrap()),
            Err(MolError::ElementMismatch(1))
        );
    }

    #[test]
    fn malformed_lines() {
        let bad = "3\n\nC 0 0 0\nC 1 zero 0\nO 2 0 0\n";
        assert_eq!(
            load_xyz(bad, parse_smiles("CCO").unwrap()),
            Err(MolError::MalformedLine(4))
        );
        assert_eq!(
            load_xyz("x\n\n", parse_smiles("C").unwrap()),
            Err(MolError::MalformedLine(1))
        );
    }

    #[test]
    fn hydrogens_are_skipped() {
        let water = "3\n\nO 0 0 0\nH 0.96 0 0\nH -0.24 0.93 0\n";
        let m = load_xyz(water, parse_smiles("O").unwrap()).unwrap();
        assert_eq!(m.coords().unwrap(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn round_trip() {
        let m = load_xyz(ETHANOL, parse_smiles("CCO").unwrap()).unwrap();
        let text = write_xyz(&m).unwrap();
        let back = load_xyz(&text, parse_smiles("CCO").unwrap()).unwrap();
        assert_eq!(back.coords, m.coords);
    }
}
