//! Road-network partitioning from floating-car speed data.
//!
//! The pipeline runs in three stages: daily speed series are encoded as
//! Gramian Angular Field matrices, a convolutional autoencoder compresses
//! each matrix into a short feature vector, and an adjacency-constrained
//! agglomerative clustering partitions the road graph into internally
//! connected sub-networks. A spectral-clustering baseline and intra/inter
//! homogeneity metrics support quantitative comparison, and a synthetic
//! scenario generator provides planted ground truth for end-to-end tests.

pub mod clustering;
pub mod gaf;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod neuralnet;
pub mod pipeline;
pub mod synth;
