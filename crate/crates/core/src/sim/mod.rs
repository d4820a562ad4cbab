//! Synthetic incremental open-world benchmark: class prototypes, scenes of
//! boxed proposals, the training loop and exemplar replay.

pub mod exemplar;
pub mod train;
pub mod world;

pub use exemplar::{update_exemplars, ExemplarStore};
pub use train::{
    init_head, prepare_batch, sgd_step, train_task, Ablation, LogRow, Phase, TrainConfig,
    TrainSetup,
};
pub use world::{generate_world, Proposal, Scene, SceneObject, TaskSchedule, World, WorldConfig};

/// Mixes a master seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
