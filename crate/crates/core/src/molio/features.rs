use crate::tensor::Matrix;

use super::geometry::signed_volumes;
use super::molecule::Molecule;
use super::MolError;

/// Element classes with a dedicated one-hot slot; everything else maps to the final "other" slot.
pub const ELEMENT_CLASSES: [u8; 15] = [6, 7, 8, 16, 9, 17, 35, 53, 15, 5, 14, 34, 11, 19, 3];
pub const N_ELEMENT_SLOTS: usize = ELEMENT_CLASSES.len() + 1;
pub const FEATURE_DIM: usize = N_ELEMENT_SLOTS + 4;
pub const DEGREE_SLOT: usize = N_ELEMENT_SLOTS;
pub const CHARGE_SLOT: usize = N_ELEMENT_SLOTS + 1;
pub const AROMATIC_SLOT: usize = N_ELEMENT_SLOTS + 2;
pub const RING_SLOT: usize = N_ELEMENT_SLOTS + 3;

pub fn element_slot(z: u8) -> usize {
    ELEMENT_CLASSES
        .iter()
        .position(|&e| e == z)
        .unwrap_or(ELEMENT_CLASSES.len())
}

/// N×20 atom feature matrix: element one-hot, degree/4, formal charge, aromatic flag, ring flag.
pub fn featurize(mol: &Molecule) -> Matrix {
    let mut x = Matrix::zeros(mol.len(), FEATURE_DIM);
    for (i, a) in mol.atoms.iter().enumerate() {
        x.set(i, element_slot(a.element), 1.0);
        x.set(i, DEGREE_SLOT, a.degree as f64 / 4.0);
        x.set(i, CHARGE_SLOT, a.formal_charge as f64);
        x.set(i, AROMATIC_SLOT, a.aromatic as u8 as f64);
        x.set(i, RING_SLOT, a.in_ring as u8 as f64);
    }
    x
}

/// `featurize` with one extra column holding each atom's signed neighbor volume.
pub fn featurize_with_chirality(mol: &Molecule) -> Result<Matrix, MolError> {
    let base = featurize(mol);
    let vol = signed_volumes(mol)?;
    let mut x = Matrix::zeros(mol.len(), FEATURE_DIM + 1);
    for i in 0..mol.len() {
        for j in 0..FEATURE_DIM {
            x.set(i, j, base.get(i, j));
        }
        x.set(i, FEATURE_DIM, vol[i]);
    }
    Ok(x)
}
