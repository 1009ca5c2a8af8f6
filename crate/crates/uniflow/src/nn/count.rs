//! Parameter and multiply-accumulate accounting for one restoration pass.
//!
//! MACs count convolution layers (Cout*Cin*kh*kw*H'*W') and linear layers
//! (Cout*Cin) for a single frame: prompt generator, backbone, and the
//! prompt-field linear once per solver step. Elementwise arithmetic,
//! normalizations, and activations are excluded, matching the usual CNN
//! convention. Downsampling convs run stride-1 at full level resolution
//! before decimation, so their MACs use the full resolution.

use super::{ArchConfig, PromptMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

pub fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Task-block convs feed straight into a GroupNorm and carry no bias.
pub fn conv_params_no_bias(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k
}

pub fn conv_macs(cin: usize, cout: usize, k: usize, oh: usize, ow: usize) -> u64 {
    (cout * cin * k * k) as u64 * (oh * ow) as u64
}

pub fn linear_params(cin: usize, cout: usize) -> usize {
    cout * cin + cout
}

pub fn linear_macs(cin: usize, cout: usize) -> u64 {
    (cout * cin) as u64
}

/// Cost of one frame at the given resolution with `steps` solver iterations.
pub fn count_params_macs(
    config: &ArchConfig,
    h: usize,
    w: usize,
    steps: usize,
) -> Result<CostReport> {
    config.validate()?;
    let div = config.required_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "resolution {h}x{w} must be divisible by {div} for {} levels",
            config.levels
        )));
    }
    let d = config.prompt_dim;
    let cin = config.in_channels;
    let mut layers = Vec::new();

    match config.prompt_mode {
        PromptMode::Literal => {
            layers.push(LayerCost {
                name: "prompt.conv1".into(),
                params: conv_params(cin, 2 * d, 1),
                macs: conv_macs(cin, 2 * d, 1, 1, 1),
            });
            layers.push(affine_cost("prompt.gn1", 2 * d));
            layers.push(LayerCost {
                name: "prompt.conv2".into(),
                params: conv_params(2 * d, d, 1),
                macs: conv_macs(2 * d, d, 1, 1, 1),
            });
            layers.push(affine_cost("prompt.gn2", d));
        }
        PromptMode::PoolLate => {
            layers.push(LayerCost {
                name: "prompt.conv1".into(),
                params: conv_params(cin, 2 * d, 3),
                macs: conv_macs(cin, 2 * d, 3, h, w),
            });
            layers.push(affine_cost("prompt.gn1", 2 * d));
            layers.push(LayerCost {
                name: "prompt.conv2".into(),
                params: conv_params(2 * d, d, 3),
                macs: conv_macs(2 * d, d, 3, h.div_ceil(2), w.div_ceil(2)),
            });
            layers.push(affine_cost("prompt.gn2", d));
        }
    }

    for l in 0..config.levels {
        let (hl, wl) = (h >> l, w >> l);
        let block_in = if l == 0 { cin } else { config.channels(l) };
        let cout = config.channels(l);
        push_task_block(&mut layers, &format!("enc{l}"), block_in, cout, d, hl, wl);
        if l + 1 < config.levels {
            layers.push(LayerCost {
                name: format!("down{l}"),
                params: conv_params(cout, config.channels(l + 1), 3),
                macs: conv_macs(cout, config.channels(l + 1), 3, hl, wl),
            });
        }
    }

    for l in (0..config.levels.saturating_sub(1)).rev() {
        let (hl, wl) = (h >> l, w >> l);
        let c_up = config.channels(l + 1);
        let c_skip = config.channels(l);
        layers.push(LayerCost {
            name: format!("dec{l}.fuse"),
            params: conv_params(c_up + c_skip, c_skip, 3),
            macs: conv_macs(c_up + c_skip, c_skip, 3, hl, wl),
        });
        push_task_block(&mut layers, &format!("dec{l}"), c_skip, c_skip, d, hl, wl);
    }

    layers.push(LayerCost {
        name: "out".into(),
        params: conv_params(config.channels(0), cin, 3),
        macs: conv_macs(config.channels(0), cin, 3, h, w),
    });

    layers.push(LayerCost {
        name: "phi".into(),
        params: linear_params(d, cin) + 1,
        macs: steps as u64 * linear_macs(d, cin),
    });

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        layers,
        total_params,
        total_macs,
    })
}

fn affine_cost(name: &str, channels: usize) -> LayerCost {
    LayerCost {
        name: name.into(),
        params: 2 * channels,
        macs: 0,
    }
}

fn push_task_block(
    layers: &mut Vec<LayerCost>,
    name: &str,
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
) {
    layers.push(LayerCost {
        name: format!("{name}.conv1"),
        params: conv_params_no_bias(cin, cout, 3),
        macs: conv_macs(cin, cout, 3, h, w),
    });
    layers.push(affine_cost(&format!("{name}.gn1"), cout));
    layers.push(LayerCost {
        name: format!("{name}.conv2"),
        params: conv_params_no_bias(cout, cout, 3),
        macs: conv_macs(cout, cout, 3, h, w),
    });
    layers.push(affine_cost(&format!("{name}.gn2"), cout));
    layers.push(LayerCost {
        name: format!("{name}.mlp"),
        params: linear_params(d, cout),
        macs: linear_macs(d, cout),
    });
    layers.push(LayerCost {
        name: format!("{name}.alpha"),
        params: 1,
        macs: 0,
    });
}
