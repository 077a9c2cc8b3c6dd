use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DRNetConfig {
    pub in_channels: usize,
    /// Width of the shallow, first-stage and refinement features.
    pub base_channels: usize,
    /// Width of every encoder level and decoder stage.
    pub deep_channels: usize,
    /// Blocks in the first stage, then decoder levels 2, 3 and 4.
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub expansion: usize,
    /// Branches in the first and second bank of every MLP.
    pub bank_sizes: [usize; 2],
    /// Blocks after the first post-fusion block.
    pub refinement_blocks: usize,
    pub num_tasks: usize,
    /// Zero-initialize the modulator's logit layers (uniform branch weights).
    pub zero_tsm_logits: bool,
}

impl Default for DRNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 48,
            deep_channels: 192,
            blocks: [4, 6, 6, 8],
            heads: [1, 2, 4, 8],
            window: 8,
            expansion: 2,
            bank_sizes: [4, 4],
            refinement_blocks: 4,
            num_tasks: 6,
            zero_tsm_logits: false,
        }
    }
}

impl DRNetConfig {
    /// Desk-scale network used for training runs and tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            deep_channels: 16,
            blocks: [1, 1, 1, 1],
            window: 4,
            bank_sizes: [2, 2],
            refinement_blocks: 0,
            ..Self::default()
        }
    }

    /// Same network with single-branch banks.
    pub fn without_banks(&self) -> Self {
        Self {
            bank_sizes: [1, 1],
            ..self.clone()
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        8 * self.window
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("deep_channels", self.deep_channels),
            ("window", self.window),
            ("expansion", self.expansion),
            ("num_tasks", self.num_tasks),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        for (i, &n) in self.bank_sizes.iter().enumerate() {
            if n == 0 {
                errs.push(format!("bank_sizes[{i}] must be positive"));
            }
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let width = if i == 0 {
                self.base_channels
            } else {
                self.deep_channels
            };
            if h == 0 || width % h != 0 {
                errs.push(format!("heads[{i}] = {h} does not divide {width} channels"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Canonical text form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        DRNetConfig::default().validate().unwrap();
        DRNetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_enumerated() {
        let cfg = DRNetConfig {
            window: 0,
            heads: [5, 2, 4, 8],
            bank_sizes: [0, 4],
            ..DRNetConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let cfg = DRNetConfig::tiny();
        let back = DRNetConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(cfg.digest(), DRNetConfig::default().digest());
    }
}
