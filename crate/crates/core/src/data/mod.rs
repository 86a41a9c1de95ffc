//! Structured triplet input pipeline: datasets, augmentation, epoch
//! partitioning, and batch assembly.

pub mod augment;
pub mod dataset;
pub mod triplet;

pub use augment::{apply_cutout, Augmentor};
pub use dataset::{
    channel_stats, load_dataset, load_index_dir, load_packed, make_synthetic, save_packed,
    ChannelStats, LabeledDataset,
};
pub use triplet::{
    assemble_batches, sample_epoch_triplets, EpochSample, TripletBatch, TripletBatcher,
    TripletIndex,
};
