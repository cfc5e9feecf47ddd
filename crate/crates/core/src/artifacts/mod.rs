//! On-disk artifact formats shared across the pipeline.

pub mod tensor_dir;

pub use tensor_dir::{load_all_params, load_config, load_params, save_checkpoint};
