//! Image codec, manifests, Market-style scanning and the synthetic generator.

mod manifest;
mod market;
mod ppm;
mod synth;

pub use manifest::{DatasetManifest, LabeledImages, ManifestItem, Split, MANIFEST_FILE, MANIFEST_HEADER};
pub use market::{parse_market_name, scan_market_dir, ScanOutcome};
pub use ppm::{decode_ppm, encode_ppm, header_comments, load_image, save_image};
pub use synth::{generate_synthetic, synth_image, SynthSpec};
