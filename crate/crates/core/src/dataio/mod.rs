//! Image I/O, JPEG distortion, corpus and MOS manifests, training batches.

pub mod corpus;
pub mod imageio;
pub mod jpeg;
pub mod mos;
pub mod sampler;
pub mod synth;

pub use corpus::{build_corpus_manifest, split_sizes, CorpusEntry, CorpusManifest, Split};
pub use imageio::{crop_window, is_image_file, load_image, load_rgb, quantize, rgb_to_tensor, save_png, tensor_to_rgb};
pub use jpeg::{decode_jpeg, distort_jpeg, encode_jpeg, jpeg_round_trip, CODEC_ID};
pub use mos::{load_mos_manifest, DistortionType, MosDatabase, MosRecord};
pub use sampler::{batch_rng, sample_training_batch, BatchStream, DistortionSpec, PatchSpec, TrainingBatch, TrainingSource};
pub use synth::{synthetic_image, write_synthetic_corpus};
