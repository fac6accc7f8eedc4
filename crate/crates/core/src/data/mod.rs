//! Synthetic scenes, dataset files and training-time augmentation.

mod augment;
mod dataset;
mod image;
mod scene;

pub use augment::{apply_crop, flip_and_jitter, flip_annotation, random_crop, sample_crop, AugmentConfig, CropWindow};
pub use dataset::{
    image_name, read_annotations, stats_csv, Dataset, Sample, ANNOTATIONS_FILE, IMAGES_DIR, OCCLUSION_EDGES, SIZE_EDGES,
    STATS_FILE,
};
pub use image::{save_pgm, RgbImage};
pub use scene::{derive_seed, generate_scene, SceneAnnotation, SceneConfig, PLACEMENT_RETRIES};
