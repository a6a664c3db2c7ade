//! Density generators, the RES density and the constrained parameterization.

mod generator;
mod params;
mod res;

pub use generator::{DensityGenerator, GeneratorKind};
pub use params::{
    pack, pack_params, packed_len, param_labels, shape_entries, shape_len, unpack_params, vech_len,
    Interest, ParamPartition,
};
pub use res::{mahalanobis, res_logpdf, Constraint, ResModel};
