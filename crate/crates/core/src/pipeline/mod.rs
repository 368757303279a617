//! Kernel design, dataset generation and diversity analysis.

pub mod datagen;
pub mod kernels;
pub mod pca;
pub mod seeds;

pub use datagen::{
    datagen, generate_entry, plan, regenerate, DatagenConfig, DatagenPlan, DatasetManifest, EntryStatus,
    ManifestEntry, NamedDenoiser, NamedKernel, MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use kernels::{
    gen_kernels, read_kernels, write_kernels, AcceptedKernel, BatchRecord, GenKernelsConfig, GenKernelsResult,
    KernelIndex,
};
pub use pca::{pca, PcaResult, StatsSelection, StatsVector};
pub use seeds::{derive_seed, entry_seed, stream_seed};
