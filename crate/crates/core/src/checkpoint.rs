//! Policy checkpoints: policy config and layout in the header, every
//! parameter block as a named array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_file, write_atomic};
use crate::container::{Container, NamedArray};
use crate::error::{Error, Result};
use crate::policy::{FlowPolicy, PolicyConfig};
use crate::rng::stream;
use crate::spaces::ObsLayout;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLWCKPT\0";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing stage, e.g. `pretrain` or `finetune`.
    pub stage: String,
    /// Optimizer steps or PPO iterations completed.
    pub steps: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    policy: PolicyConfig,
    layout: ObsLayout,
    meta: CheckpointMeta,
}

pub fn encode_checkpoint(policy: &FlowPolicy, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&Header { policy: policy.config.clone(), layout: policy.layout, meta: meta.clone() })?;
    let arrays = policy
        .blocks()
        .map(|b| NamedArray { name: b.name.clone(), rows: b.rows, cols: b.cols, values: b.values.clone() })
        .collect();
    Ok(Container { header, arrays }.encode(CHECKPOINT_MAGIC))
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<(FlowPolicy, CheckpointMeta)> {
    let c = Container::decode(bytes, CHECKPOINT_MAGIC, path)?;
    let header: Header = serde_json::from_str(&c.header)
        .map_err(|e| Error::Format { path: path.into(), message: format!("bad checkpoint header: {e}") })?;
    // Initial values are overwritten below; the stream only has to be valid.
    let mut policy = FlowPolicy::new(header.policy, header.layout, &mut stream(0, "checkpoint", 0))?;
    let mut blocks = policy.blocks_mut();
    if blocks.len() != c.arrays.len() {
        return Err(Error::Format {
            path: path.into(),
            message: format!("{} parameter arrays, policy expects {}", c.arrays.len(), blocks.len()),
        });
    }
    for b in blocks.iter_mut() {
        let a = c
            .get(&b.name)
            .ok_or_else(|| Error::Format { path: path.into(), message: format!("missing array {}", b.name) })?;
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Format {
                path: path.into(),
                message: format!("array {} is {}x{}, expected {}x{}", b.name, a.rows, a.cols, b.rows, b.cols),
            });
        }
        b.values.copy_from_slice(&a.values);
    }
    Ok((policy, header.meta))
}

pub fn save_checkpoint(path: &Path, policy: &FlowPolicy, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(policy, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowPolicy, CheckpointMeta)> {
    decode_checkpoint(&read_file(path)?, &path.display().to_string())
}
