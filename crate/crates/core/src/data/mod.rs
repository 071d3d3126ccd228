//! Synthetic multi-domain shape images: seven shape classes rendered in four
//! styles, where the style is the only thing that changes across domains.

mod dataset;
mod io;
mod render;

pub use dataset::{DomainDataset, STD_FLOOR};
pub use io::{
    load, pack_bits, read_manifest, save, unpack_bits, FileEntry, Manifest, DATASET_FORMAT_VERSION,
};
pub use render::{DomainSpec, Style, Texture, CHANNELS, CLASS_NAMES, IMAGE_SIZE, NUM_CLASSES};

/// Seed for one domain derived from a run-level seed, so a single integer
/// fixes all four domains.
pub fn domain_seed(base: u64, style: Style) -> u64 {
    let idx = Style::ALL.iter().position(|&s| s == style).unwrap() as u64;
    base.wrapping_mul(1_000_003).wrapping_add(idx + 1)
}

/// All four standard domains from one seed.
pub fn generate_all(num_per_class: usize, base_seed: u64) -> crate::Result<Vec<DomainDataset>> {
    DomainSpec::all_standard()
        .iter()
        .map(|spec| {
            DomainDataset::generate(spec, num_per_class, domain_seed(base_seed, spec.style))
        })
        .collect()
}
