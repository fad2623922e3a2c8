//! Missing-modality brain tumor segmentation: masked pretraining of a 3D
//! transformer encoder, then a fused CNN/transformer segmentation network
//! trained under random modality dropout.
//!
//! Everything runs on the CPU through a small reverse-mode autodiff engine
//! ([`autograd`]) over dense tensors ([`tensor`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod finetune;
pub mod masking;
pub mod nn;
pub mod optimization;
pub mod params;
pub mod pretrain;
pub mod seg_network;
pub mod tensor;
pub mod training;
pub mod uni_encoder;

pub use checkpoint::{Checkpoint, Stage};
pub use config::ExperimentConfig;
pub use data_synth::{MultimodalCase, Region, MODALITIES};
pub use error::{Error, Result};
pub use evaluation::{ProtocolReport, Segmenter};
pub use finetune::{FinetuneConfig, FinetuneModel};
pub use masking::{Delta, MaskConfig, MaskSpec};
pub use optimization::{LossConfig, ScheduleConfig};
pub use pretrain::{PretrainConfig, PretrainModel};
pub use seg_network::{Architecture, SegNetwork};
pub use tensor::{Float, Tensor};
pub use training::RunOptions;
pub use uni_encoder::{ScalePreset, UniEncoderConfig};
