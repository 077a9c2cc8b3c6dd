//! Closed-form parameter and operation counts.
//!
//! Operation counts are multiply-accumulates in matrix products,
//! convolutions and branch sums, the same quantity the tape tallies in
//! [`OpStats::macs`](crate::tensor::OpStats). Normalization, softmax,
//! activations and additions are not counted.

use super::config::DRNetConfig;

/// Which form of the network is being measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Multi-branch banks plus the modulator, evaluated per image.
    Train,
    /// Every bank collapsed to a single affine map.
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub macs: u64,
}

impl FlopCount {
    /// Floating-point operations with one MAC counted as two.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

fn conv_params(c_in: usize, c_out: usize, s: usize) -> usize {
    c_out * c_in * s * s + c_out
}

fn block_params(cfg: &DRNetConfig, c: usize, heads: usize, mode: Mode) -> usize {
    let span = 2 * cfg.window - 1;
    let norms = 4 * c;
    let attn = (3 * c * c + 3 * c) + (c * c + c) + heads * span * span;
    let hidden = cfg.expansion * c;
    let fc1 = c * hidden + hidden;
    let fc2 = hidden * c + c;
    let mlp = match mode {
        Mode::Fused => fc1 + fc2,
        Mode::Train => {
            let k = cfg.num_tasks;
            let tsm_head = |n: usize| {
                if n > 1 {
                    (k * 4 * k + 4 * k) + (4 * k * n + n)
                } else {
                    0
                }
            };
            cfg.bank_sizes[0] * fc1
                + cfg.bank_sizes[1] * fc2
                + tsm_head(cfg.bank_sizes[0])
                + tsm_head(cfg.bank_sizes[1])
        }
    };
    norms + attn + mlp
}

/// Scalar parameter count of the network described by `cfg`.
pub fn param_estimate(cfg: &DRNetConfig, mode: Mode) -> usize {
    let (c, d, io) = (cfg.base_channels, cfg.deep_channels, cfg.in_channels);
    let convs = conv_params(io, c, 3)
        + conv_params(c, d, 3)
        + 2 * conv_params(d, d, 3)
        + conv_params(d, c, 1)
        + 2 * conv_params(d, d, 1)
        + conv_params(2 * c, c, 1)
        + conv_params(c, c, 3)
        + conv_params(c, io, 3);
    let blocks = cfg.blocks[0] * block_params(cfg, c, cfg.heads[0], mode)
        + (1..4)
            .map(|l| cfg.blocks[l] * block_params(cfg, d, cfg.heads[l], mode))
            .sum::<usize>()
        + (1 + cfg.refinement_blocks) * block_params(cfg, c, cfg.heads[0], mode);
    convs + blocks
}

fn conv_macs(c_in: usize, c_out: usize, s: usize, hw: usize) -> u64 {
    (c_out * c_in * s * s * hw) as u64
}

fn block_macs(cfg: &DRNetConfig, c: usize, hw: usize, mode: Mode) -> u64 {
    let t = cfg.window * cfg.window;
    let hidden = cfg.expansion * c;
    // qkv, both attention products, output projection
    let attn = hw * c * 3 * c + 2 * hw * t * c + hw * c * c;
    let mlp = match mode {
        Mode::Fused => 2 * hw * c * hidden,
        Mode::Train => {
            let (n1, n2, k) = (cfg.bank_sizes[0], cfg.bank_sizes[1], cfg.num_tasks);
            let tsm_head = |n: usize| if n > 1 { k * 4 * k + 4 * k * n } else { 0 };
            let tsm = tsm_head(n1) + tsm_head(n2);
            // a single branch skips its mixing pass
            let mix = |n: usize, width: usize| if n > 1 { n * hw * width } else { 0 };
            n1 * hw * c * hidden + mix(n1, hidden) + n2 * hw * hidden * c + mix(n2, c) + tsm
        }
    };
    (attn + mlp) as u64
}

/// Per-image operation count for an `h × w` input. Extents are first
/// rounded up to the padded size the network actually runs on.
pub fn estimate_flops(cfg: &DRNetConfig, h: usize, w: usize, mode: Mode) -> FlopCount {
    let unit = cfg.size_multiple();
    let (h, w) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    let (c, d, io) = (cfg.base_channels, cfg.deep_channels, cfg.in_channels);
    let hw = |level: u32| (h >> level) * (w >> level);

    let mut macs = conv_macs(io, c, 3, hw(0));
    macs += cfg.blocks[0] as u64 * block_macs(cfg, c, hw(0), mode);
    macs += conv_macs(c, d, 3, hw(0)) + conv_macs(d, d, 3, hw(1)) + conv_macs(d, d, 3, hw(2));
    for level in 1..4u32 {
        macs += cfg.blocks[level as usize] as u64 * block_macs(cfg, d, hw(level), mode);
    }
    macs += conv_macs(d, d, 1, hw(2)) + conv_macs(d, d, 1, hw(1)) + conv_macs(d, c, 1, hw(0));
    macs += conv_macs(2 * c, c, 1, hw(0));
    macs += (1 + cfg.refinement_blocks) as u64 * block_macs(cfg, c, hw(0), mode);
    macs += conv_macs(c, c, 3, hw(0)) + conv_macs(c, io, 3, hw(0));
    FlopCount { macs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_are_twice_macs() {
        assert_eq!(FlopCount { macs: 7 }.flops(), 14);
        // a 1×1 single-channel conv on h×w costs h·w MACs
        assert_eq!(conv_macs(1, 1, 1, 12 * 5), 60);
    }

    #[test]
    fn fused_count_ignores_task_count() {
        let a = DRNetConfig::default();
        let b = DRNetConfig {
            num_tasks: 11,
            ..a.clone()
        };
        assert_eq!(
            estimate_flops(&a, 128, 128, Mode::Fused),
            estimate_flops(&b, 128, 128, Mode::Fused)
        );
        assert_eq!(param_estimate(&a, Mode::Fused), param_estimate(&b, Mode::Fused));
    }
}
