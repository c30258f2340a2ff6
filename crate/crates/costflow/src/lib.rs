//! Optical flow from 4D cost volumes with a transformer encoder/decoder,
//! plus masked cost-volume pretraining, synthetic data generation, tiled
//! high-resolution inference, and training/evaluation drivers.

pub mod checkpoint;
pub mod config;
pub mod costencoder;
pub mod costvolume;
pub mod decoder;
pub mod encoders;
pub mod flo;
pub mod imageio;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod verify;
