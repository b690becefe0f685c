pub mod checks;
pub mod grad;
