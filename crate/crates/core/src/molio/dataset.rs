use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::molecule::Molecule;
use super::smiles::parse_smiles_with_id;
use super::xyz::{load_xyz, write_xyz};
use super::MolError;

/// One TSV record: `id<TAB>smiles[<TAB>xyz-base64]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub smiles: String,
    pub mol: Molecule,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {source}")]
pub struct DatasetError {
    pub line: usize,
    pub source: MolError,
}

/// Parses a dataset file. Blank lines and `#` comments are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<Record>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let wrap = |source| DatasetError { line, source };
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = l.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(wrap(MolError::MalformedLine(line)));
        }
        let mol =
            parse_smiles_with_id(cols[1].trim(), cols[0]).map_err(|e| wrap(MolError::Parse(e)))?;
        let mol = match cols.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            Some(b64) => {
                let bytes = STANDARD
                    .decode(b64)
                    .map_err(|_| wrap(MolError::MalformedLine(line)))?;
                let text =
                    String::from_utf8(bytes).map_err(|_| wrap(MolError::MalformedLine(line)))?;
                load_xyz(&text, mol).map_err(wrap)?
            }
            None => mol,
        };
        out.push(Record {
            id: cols[0].to_string(),
            smiles: cols[1].trim().to_string(),
            mol,
        });
    }
    Ok(out)
}

pub fn format_record(id: &str, smiles: &str, mol: Option<&Molecule>) -> Result<String, MolError> {
    match mol.filter(|m| m.coords.is_some()) {
        Some(m) => Ok(format!(
            "{id}\t{smiles}\t{}",
            STANDARD.encode(write_xyz(m)?)
        )),
        None => Ok(format!("{id}\t{smiles}")),
    }
}

/// `id<TAB>v1,v2,...` label rows keyed by molecule id.
pub fn parse_labels(text: &str) -> Result<Vec<(String, Vec<f64>)>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let bad = DatasetError {
            line,
            source: MolError::MalformedLine(line),
        };
        let (id, vals) = l.split_once('\t').ok_or(bad.clone())?;
        let vals: Option<Vec<f64>> = vals
            .split(',')
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        out.push((id.to_string(), vals.ok_or(bad)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::parse_smiles;

    #[test]
    fn two_and_three_column_records() {
        let m = parse_smiles("CO")
            .unwrap()
            .with_coords(vec![[0.0, 0.0, 0.0], [1.4, 0.0, 0.0]])
            .unwrap();
        let row = format_record("m2", "CO", Some(&m)).unwrap();
        let text = format!("# header\nm1\tCCO\n\n{row}\n");
        let recs = parse_dataset(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "m1");
        assert!(recs[0].mol.coords.is_none());
        assert_eq!(recs[1].mol.coords, m.coords);
        assert_eq!(recs[1].mol.id, "m2");
    }

    #[test]
    fn errors_report_line() {
        let e = parse_dataset("a\tCC\nb\tC(C\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.source, MolError::Parse(_)));
        let e = parse_dataset("only-one-column\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn labels() {
        let l = parse_labels("a\t1,0\nb\t0.5\n").unwrap();
        assert_eq!(l[0], ("a".into(), vec![1.0, 0.0]));
        assert_eq!(l[1].1, vec![0.5]);
        assert!(parse_labels("a\tx\n").is_err());
    }
}
