//! A masked-graph autoencoder stack for 3D molecules: a relational
//! transformer encoder over scalar and vector feature streams, selective
//! re-mask decoding with a distilled coordinate-free position encoder, a
//! structure-independent decoder, and the training, probing, and
//! persistence machinery around them.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder2d;
pub mod encoder3d;
pub mod featurize;
pub mod model;
pub mod molgraph;
pub mod probes;
pub mod tensor;
pub mod train;
pub mod verify;
