//! Teacher: ResNet18 with a `num_classes`-way head.

use edgekd_tensor::{Element, Var};

use super::{bn_specs, conv_specs, dense_specs, Forward, Layers, ModelConfig, Result, TensorSpec};

pub(super) const MIN_INPUT: usize = 32;

const STAGES: [usize; 4] = [64, 128, 256, 512];

pub(super) fn specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    conv_specs(&mut out, "conv1", 64, config.in_channels, 7, false);
    bn_specs(&mut out, "bn1", 64);
    let mut c = 64;
    for (s, &f) in STAGES.iter().enumerate() {
        for b in 0..2 {
            let p = format!("layer{}.{b}", s + 1);
            let cin = if b == 0 { c } else { f };
            conv_specs(&mut out, &format!("{p}.conv1"), f, cin, 3, false);
            bn_specs(&mut out, &format!("{p}.bn1"), f);
            conv_specs(&mut out, &format!("{p}.conv2"), f, f, 3, false);
            bn_specs(&mut out, &format!("{p}.bn2"), f);
            if b == 0 && s > 0 {
                conv_specs(&mut out, &format!("{p}.downsample.0"), f, cin, 1, false);
                bn_specs(&mut out, &format!("{p}.downsample.1"), f);
            }
        }
        c = f;
    }
    dense_specs(&mut out, "fc", 512, config.num_classes);
    out
}

fn basic_block<E: Element>(l: &mut Layers<'_, E>, p: &str, x: Var, stride: usize) -> Result<Var> {
    let mut h = l.conv(&format!("{p}.conv1"), x, stride, 1)?;
    h = l.bn(&format!("{p}.bn1"), h)?;
    h = l.relu(h)?;
    h = l.conv(&format!("{p}.conv2"), h, 1, 1)?;
    h = l.bn(&format!("{p}.bn2"), h)?;
    let shortcut = if l.has(&format!("{p}.downsample.0.weight")) {
        let s = l.conv(&format!("{p}.downsample.0"), x, stride, 0)?;
        l.bn(&format!("{p}.downsample.1"), s)?
    } else {
        x
    };
    let sum = l.g.add(h, shortcut)?;
    l.relu(sum)
}

pub(super) fn forward<E: Element>(l: &mut Layers<'_, E>, x: Var) -> Result<Forward> {
    let mut h = l.conv("conv1", x, 2, 3)?;
    h = l.bn("bn1", h)?;
    h = l.relu(h)?;
    h = l.maxpool(h, 3, 2, 1)?;
    for s in 0..STAGES.len() {
        for b in 0..2 {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            h = basic_block(l, &format!("layer{}.{b}", s + 1), h, stride)?;
        }
    }
    let pooled = l.g.global_avg_pool(h)?;
    let penultimate = l.g.flatten(pooled)?;
    let logits = l.dense("fc", penultimate)?;
    Ok(Forward { logits, penultimate })
}
