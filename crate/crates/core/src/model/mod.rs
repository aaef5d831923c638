//! Network definitions and checkpoints.

mod checkpoint;
pub mod layers;
mod mlp;
mod unet;
mod vae;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ModelCheckpoint, ModelKind, TrainMetadata,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use mlp::{Mlp, MlpConfig};
pub use unet::{UNet, UNetConfig, BUDGET_BAND, DEFAULT_UNET_BUDGET};
pub use vae::{VAEConfig, Vae, DEFAULT_VAE_BUDGET};

use crate::numerics::ParamStore;
use crate::{Error, Result};

/// Exact number of scalar parameters in a store.
pub fn count_params(store: &ParamStore) -> usize {
    store.count()
}

/// Overwrites `dst` with `src`, which must hold the same names and shapes in
/// the same order.
pub(crate) fn replace_params(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for ((_, dn, dt), (_, sn, st)) in dst.iter().zip(src.iter()) {
        if dn != sn || dt.shape() != st.shape() {
            return Err(Error::Incompatible(format!(
                "tensor {sn} {:?} does not match {dn} {:?}",
                st.shape(),
                dt.shape()
            )));
        }
    }
    *dst = src;
    Ok(())
}
