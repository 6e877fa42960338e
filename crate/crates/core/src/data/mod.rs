//! Images, synthetic datasets, token record files and the class probe.

mod image;
mod probe;
mod records;
mod synthetic;

pub use image::{decode_ppm, encode_ppm, read_image, write_image, Image, LabeledImage, CHANNELS};
pub use probe::NearestCentroid;
pub use records::{load_records, save_records, RecordGeometry, RecordSet, StoredRecord};
pub use synthetic::{generate_synthetic, SyntheticSpec};
