//! Molecule ingestion: SMILES, XYZ, radius graphs, atom features and dataset files.

mod dataset;
pub mod elements;
mod features;
mod geometry;
mod molecule;
mod smiles;
mod xyz;

pub use dataset::{format_record, parse_dataset, parse_labels, DatasetError, Record};
pub use features::{
    element_slot, featurize, featurize_with_chirality, AROMATIC_SLOT, CHARGE_SLOT, DEGREE_SLOT,
    ELEMENT_CLASSES, FEATURE_DIM, N_ELEMENT_SLOTS, RING_SLOT,
};
pub use geometry::{
    build_radius_graph, distance, distance_matrix, embed_synthetic, ensure_3d, signed_volumes,
    DEFAULT_CUTOFF,
};
pub use molecule::{AtomFeature, Bond, BondOrder, BondStereo, ChiralTag, Molecule};
pub use smiles::{parse_smiles, parse_smiles_with_id, ParseError, ParseErrorKind};
pub use xyz::{load_xyz, write_xyz};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MolError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("atom count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("element mismatch at atom {0}")]
    ElementMismatch(usize),
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("molecule has no coordinates")]
    MissingCoordinates,
    #[error("cutoff must be positive and finite, got {0}")]
    InvalidCutoff(f64),
    #[error("node index {0} out of range")]
    InvalidNode(usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate bond {0}-{1}")]
    DuplicateBond(usize, usize),
    #[error("atom {index} has invalid atomic number {element}")]
    InvalidElement { index: usize, element: u8 },
}
