//! Skeleton recordings: parsing, cleaning, synthetic generation, indexing and pairing.

mod corpus;
mod denoise;
mod ntu;
mod pairs;
mod sequence;
mod synthetic;
mod topology;

pub use corpus::{
    batch_of, generate_synthetic, load_raw, preprocess, scan_directory, Corpus, CorpusEntry, CorpusIndex, LabelMap,
    PreprocessConfig, PreprocessSummary, Split,
};
pub use denoise::{denoise, DenoiseConfig};
pub use ntu::{parse_ntu_file, parse_ntu_str, to_ntu_string, write_ntu_file};
pub use pairs::{build_pairs, validate_quadruple, PairedQuadruple, QuadrupleIndex};
pub use sequence::{normalize_length, Anonymization, SequenceMeta, SkeletonSequence, FRAMES, JOINTS};
pub use synthetic::{
    camera_yaw, parse_synthetic_source, synthesize_sequence, synthetic_source, ActorProfile, BASE_ACTIONS,
};
pub(crate) use synthetic::mix as mix_seed;
pub use topology::{SkeletonTopology, KINECT_V2_JOINTS};

