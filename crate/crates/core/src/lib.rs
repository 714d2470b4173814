//! Pick-and-place of unseen objects: superquadric shape recovery from a
//! single-view point cloud, grasp generation and validation, grasp
//! prioritisation by situated manipulability, and joint-space planning.

pub mod bench;
pub mod cloudfit;
pub mod geometry;
pub mod grasping;
pub mod kinematics;
pub mod planner;
pub mod scene;
pub mod superquadric;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic sub-seed for stream `stream` of a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}
