//! Trainable model, datasets, non-IID partitioning, sharding and the
//! sign-flipping attack.

mod data;
mod model;
mod shard;

pub use data::{dirichlet_partition, load_csv, synthetic_blobs, BlobSpec, Dataset, PartitionSpec};
pub use model::{evaluate, local_train, Dense, ModelParams, TrainConfig};
pub use shard::{flatten_shard, sign_flip_attack, unflatten, ShardedModel};
