//! Frame-level features without deep backbones: a synthetic geotagged world
//! and the on-disk format for externally computed features.

mod format;
mod synthetic;

pub use format::{
    encode_blob, load_all, load_features, DatasetManifest, DatasetWriter, FeatureBlob,
    FrameRecord, Role, SequenceRecord, Split, FEATURE_HEADER_LEN, FEATURE_MAGIC,
    FEATURE_VERSION, MANIFEST_FILE,
};
pub use synthetic::{
    generate_synthetic_dataset, generate_world, SplitData, SyntheticDataset,
    SyntheticWorldConfig, Traversal,
};
