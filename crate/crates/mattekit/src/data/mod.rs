//! Dataset generation, image I/O and checkpoint persistence.

mod checkpoint;
mod pnm;
mod synth;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, load_params, save_params, LoadedCheckpoint, MAGIC, VERSION,
};
pub use pnm::{decode as pnm_decode, encode as pnm_encode, pnm_read, pnm_write};
pub use synth::{
    generate, load_sample, read_manifest, synth_generate, write_dataset, Sample,
};
