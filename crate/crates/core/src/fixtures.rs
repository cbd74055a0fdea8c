//! Bundled NACE Rev. 2 classification (996 codes, English titles).

use crate::taxonomy::{parse_classification, InputFormat, Taxonomy};

pub const NACE_REV2_CSV: &str = include_str!("../data/nace_rev2.csv");

pub fn nace_rev2() -> Taxonomy {
    let mut t = parse_classification(NACE_REV2_CSV.as_bytes(), InputFormat::Csv, None)
        .expect("bundled fixture is valid");
    t.source = "nace_rev2".to_string();
    t
}
