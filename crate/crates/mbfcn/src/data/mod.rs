//! Dataset and file-format handling: PPM/PGM images, annotation files
//! (internal and WIDER-style layouts), detection dumps, binary checkpoints,
//! and the deterministic synthetic face-glyph dataset.

mod annot;
mod checkpoint;
mod detfile;
mod ppm;
mod synth;

use std::path::Path;

pub use annot::{parse_annotations, write_annotations, AnnotationFormat, AnnotationRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use detfile::{read_detections, write_detections};
pub use ppm::{read_image, write_ppm};
pub use synth::{synth_generate, SyntheticSpec};

use crate::error::Result;
use crate::tensor::Tensor;

/// Loads the image behind an annotation record, resolving its path relative
/// to the annotation file's directory.
pub fn load_image_for(root: &Path, image_path: &str) -> Result<Tensor<f32>> {
    read_image(&root.join(image_path))
}

/// Stem of an image path, used as the stable image identifier.
pub fn image_id_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}
