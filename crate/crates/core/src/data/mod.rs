//! Image I/O, synthetic motion blur and training-pair assembly.

pub mod image;
pub mod kernel;
pub mod synth;

pub use image::{load_image, save_image, write_atomic, Image};
pub use kernel::{make_motion_kernel, BlurKernel};
pub use synth::{
    corpus_baseline, derive_seed, generate_corpus, pyramid, render_scene, synth_pair, Manifest, ManifestEntry,
    SamplePair, MANIFEST_FILE,
};
