//! Learned sequential descriptors for visual place recognition.
//!
//! A [`Sequence`] of consecutive geotagged frames, each carrying a grid or
//! token set of local features, is mapped by a [`Head`] to one fixed-size
//! L2-normalized descriptor. Retrieval is exact nearest-neighbour search over
//! a database of such descriptors, and a query counts as localized when a
//! retrieved database sequence lies within 25 m of it.

pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod heads;
pub mod retrieval;
pub mod training;

pub use datamodel::{
    fuse_frames, fuse_to_local_set, geo_distance, FeatureLayout, FeatureTensor, Frame, GeoTag, LocalDescriptorSet,
    Sequence, SequentialDescriptor,
};
pub use error::{Error, ErrorCategory, Result};
pub use heads::{Head, HeadKind};
