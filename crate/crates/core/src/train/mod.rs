//! Reconstruction and triplet losses, triplet sampling and mining, and the
//! staged training schedule.

pub mod loss;
pub mod schedule;
pub mod triplet;

pub use loss::{autoencoder_loss, embedding_distance, mse, triplet_loss};
pub use schedule::{train_schedule, EpochLog, Stage, TrainConfig, TrainReport};
pub use triplet::{
    hard_count, mine_challenging, remix_batches, sample_triplets, triplet_batch_objective, triplet_losses,
    LabeledClips, Source, Triplet,
};
