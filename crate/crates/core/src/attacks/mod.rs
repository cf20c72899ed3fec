//! Adversary toolbox: image post-processing, restoration and attacks on
//! the decoder structure.

mod filters;
mod structural;

pub use filters::{
    apply_attack, bilinear, dct8, default_suite, gaussian_blur, idct8, jpeg_proxy, median_filter, quant_table,
    restoration_attack, AttackKind, AttackSpec, LUMA_QUANT,
};
pub use structural::{
    authorized_report, brute_force_search, partial_removal_attack, reference_images, remove_fuser_attack,
    restoration_report, sample_wrong_keys, wrong_key_attack, SearchOutcome, SearchTrial,
};
