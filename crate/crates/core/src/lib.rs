//! Digital twin of a robotic transcatheter valve-delivery procedure: anatomy, catheter
//! kinematics, reinforcement-learned localization, probabilistic maps, co-piloted control
//! and trajectory metrics.

pub mod anatomy;
pub mod copilot;
pub mod kinematics;
pub mod metrics;
pub mod nn;
pub mod probmap;
pub mod rl;

/// Version stamped into every persisted weight document.
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Derive an independent stream seed for item `index` of a run seeded with `master`
/// (SplitMix64 finalizer applied twice).
pub fn split_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}
