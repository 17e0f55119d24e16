//! Student: three valid-padded convolutions (7×7/6, 5×5/16, 5×5/32), each
//! followed by ReLU, dropout and 2×2 max-pooling; adaptive max-pooling to a
//! fixed grid; dense 128 → 64 → classes.

use edgekd_tensor::{Element, Var};

use super::{conv_specs, dense_specs, Forward, Layers, ModelConfig, Result, TensorSpec};

/// Smallest height/width that survives the conv/pool stack.
pub(super) const MIN_INPUT: usize = 38;

const CONVS: [(&str, usize, usize); 3] = [("conv1", 6, 7), ("conv2", 16, 5), ("conv3", 32, 5)];

pub(super) fn specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let mut c = config.in_channels;
    for (name, f, k) in CONVS {
        conv_specs(&mut out, name, f, c, k, true);
        c = f;
    }
    let (ph, pw) = config.adaptive_pool_hw;
    dense_specs(&mut out, "fc1", c * ph * pw, 128);
    dense_specs(&mut out, "fc2", 128, 64);
    dense_specs(&mut out, "fc3", 64, config.num_classes);
    out
}

pub(super) fn forward<E: Element>(l: &mut Layers<'_, E>, x: Var) -> Result<Forward> {
    let mut h = x;
    for (name, _, _) in CONVS {
        h = l.conv(name, h, 1, 0)?;
        h = l.relu(h)?;
        h = l.dropout(h)?;
        h = l.maxpool(h, 2, 2, 0)?;
    }
    let (ph, pw) = l.model.config.adaptive_pool_hw;
    h = l.g.adaptive_maxpool2d(h, ph, pw)?;
    h = l.g.flatten(h)?;
    h = l.dense("fc1", h)?;
    h = l.relu(h)?;
    h = l.dropout(h)?;
    h = l.dense("fc2", h)?;
    let penultimate = l.relu(h)?;
    h = l.dropout(penultimate)?;
    let logits = l.dense("fc3", h)?;
    Ok(Forward { logits, penultimate })
}
