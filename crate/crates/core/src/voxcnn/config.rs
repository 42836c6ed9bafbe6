use std::fmt::Write as _;

use crate::volgrad::{BatchNormState, ConvSpec};
use crate::{Error, Result};

/// How the last block's feature maps reach the fully connected head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInput {
    /// Channel means (extent-agnostic).
    GlobalAvgPool,
    /// Raw flattened maps; ties the model to `input_extent`.
    Flatten,
}

impl HeadInput {
    fn as_str(self) -> &'static str {
        match self {
            HeadInput::GlobalAvgPool => "gap",
            HeadInput::Flatten => "flatten",
        }
    }
}

/// Architecture hyper-parameters of the volumetric regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxCnnConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub n_blocks: usize,
    pub stem_stride: usize,
    pub fc_hidden: usize,
    pub aux_weight: f64,
    pub main_weight: f64,
    /// 1-based index of the block feeding the auxiliary head.
    pub aux_tap_block: usize,
    pub tabular_dim: usize,
    pub dropout_conv: f64,
    pub dropout_fc: f64,
    pub input_extent: [usize; 3],
    pub head_input: HeadInput,
    /// Train on `main_weight·MSE(main) + aux_weight·MSE(aux)` instead of the
    /// MSE of the blended output.
    pub aux_as_separate_loss: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for VoxCnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_filters: 16,
            n_blocks: 4,
            stem_stride: 2,
            fc_hidden: 1024,
            aux_weight: 0.4,
            main_weight: 0.6,
            aux_tap_block: 3,
            tabular_dim: 0,
            dropout_conv: 0.1,
            dropout_fc: 0.5,
            input_extent: [32; 3],
            head_input: HeadInput::GlobalAvgPool,
            aux_as_separate_loss: false,
            bn_momentum: BatchNormState::<f32>::DEFAULT_MOMENTUM,
            bn_epsilon: BatchNormState::<f32>::DEFAULT_EPSILON,
        }
    }
}

/// One row of the shape ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub channels: usize,
    pub extent: [usize; 3],
}

impl VoxCnnConfig {
    /// Filter count of 1-based block `b`: doubles from block to block.
    pub fn filters(&self, block: usize) -> usize {
        self.base_filters << (block - 1)
    }

    pub fn filter_widths(&self) -> Vec<usize> {
        (1..=self.n_blocks).map(|b| self.filters(b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("base_filters", self.base_filters),
            ("n_blocks", self.n_blocks),
            ("stem_stride", self.stem_stride),
            ("fc_hidden", self.fc_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_blocks > 16 {
            return Err(Error::config("n_blocks above 16 is not supported"));
        }
        if self.aux_tap_block < 1 || self.aux_tap_block >= self.n_blocks {
            return Err(Error::config(format!(
                "aux_tap_block must satisfy 1 <= aux_tap_block < n_blocks, got {} with n_blocks = {}",
                self.aux_tap_block, self.n_blocks
            )));
        }
        for (name, w) in [("aux_weight", self.aux_weight), ("main_weight", self.main_weight)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {w}")));
            }
        }
        if (self.aux_weight + self.main_weight - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "aux_weight + main_weight must equal 1, got {} + {}",
                self.aux_weight, self.main_weight
            )));
        }
        for (name, r) in [("dropout_conv", self.dropout_conv), ("dropout_fc", self.dropout_fc)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_epsilon <= 0.0 {
            return Err(Error::config(
                "bn_momentum must lie in (0, 1) and bn_epsilon be positive",
            ));
        }
        self.shape_ledger(self.input_extent)?;
        Ok(())
    }

    pub(crate) fn stem_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.filters(1)).with_stride(self.stem_stride)
    }

    /// Per-stage channel counts and spatial extents for an input of extent
    /// `input`: the stem output, then each block after its pooling layer.
    pub fn shape_ledger(&self, input: [usize; 3]) -> Result<Vec<Stage>> {
        let mut stages = Vec::with_capacity(self.n_blocks);
        let stem = self
            .stem_spec()
            .output_extent(input)
            .map_err(|e| Error::config(format!("stem convolution on input {input:?}: {e}")))?;
        stages.push(Stage {
            name: "block1".into(),
            channels: self.filters(1),
            extent: stem,
        });
        let mut ext = stem;
        for b in 2..=self.n_blocks {
            if ext.iter().any(|&e| e < 2) {
                return Err(Error::config(format!(
                    "spatial extent collapses before the pooling layer ahead of block{b}: {ext:?} on input {input:?}"
                )));
            }
            ext = ext.map(|e| e / 2);
            stages.push(Stage {
                name: format!("block{b}"),
                channels: self.filters(b),
                extent: ext,
            });
        }
        Ok(stages)
    }

    /// Width of the vector entering the hidden FC layer.
    pub fn head_features(&self) -> Result<usize> {
        let last = self.filters(self.n_blocks);
        let base = match self.head_input {
            HeadInput::GlobalAvgPool => last,
            HeadInput::Flatten => {
                let ledger = self.shape_ledger(self.input_extent)?;
                last * ledger.last().unwrap().extent.iter().product::<usize>()
            }
        };
        Ok(base + self.tabular_dim)
    }

    /// Closed-form count of trainable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        let conv = |cin: usize, cout: usize| cin * cout * 27 + cout + 2 * cout;
        let mut total = 0;
        let mut cin = self.in_channels;
        for b in 1..=self.n_blocks {
            let f = self.filters(b);
            total += conv(cin, f) + conv(f, f);
            cin = f;
        }
        let feat = self.head_features()?;
        total += feat * self.fc_hidden + self.fc_hidden + 2 * self.fc_hidden;
        total += self.fc_hidden + 1;
        total += self.filters(self.aux_tap_block) + 1;
        Ok(total)
    }

    /// Canonical `key=value` lines, one per field, in a fixed order.
    pub fn to_kv_text(&self) -> String {
        let [d, h, w] = self.input_extent;
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "base_filters={}", self.base_filters);
        let _ = writeln!(s, "n_blocks={}", self.n_blocks);
        let _ = writeln!(s, "stem_stride={}", self.stem_stride);
        let _ = writeln!(s, "fc_hidden={}", self.fc_hidden);
        let _ = writeln!(s, "aux_weight={:?}", self.aux_weight);
        let _ = writeln!(s, "main_weight={:?}", self.main_weight);
        let _ = writeln!(s, "aux_tap_block={}", self.aux_tap_block);
        let _ = writeln!(s, "tabular_dim={}", self.tabular_dim);
        let _ = writeln!(s, "dropout_conv={:?}", self.dropout_conv);
        let _ = writeln!(s, "dropout_fc={:?}", self.dropout_fc);
        let _ = writeln!(s, "input_extent={d}x{h}x{w}");
        let _ = writeln!(s, "head_input={}", self.head_input.as_str());
        let _ = writeln!(s, "aux_as_separate_loss={}", self.aux_as_separate_loss);
        let _ = writeln!(s, "bn_momentum={:?}", self.bn_momentum);
        let _ = writeln!(s, "bn_epsilon={:?}", self.bn_epsilon);
        s
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value {value:?} for model key {key}")))
        }
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "base_filters" => self.base_filters = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "stem_stride" => self.stem_stride = num(key, value)?,
            "fc_hidden" => self.fc_hidden = num(key, value)?,
            "aux_weight" => self.aux_weight = num(key, value)?,
            "main_weight" => self.main_weight = num(key, value)?,
            "aux_tap_block" => self.aux_tap_block = num(key, value)?,
            "tabular_dim" => self.tabular_dim = num(key, value)?,
            "dropout_conv" => self.dropout_conv = num(key, value)?,
            "dropout_fc" => self.dropout_fc = num(key, value)?,
            "aux_as_separate_loss" => self.aux_as_separate_loss = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_epsilon" => self.bn_epsilon = num(key, value)?,
            "input_extent" => self.input_extent = parse_extent(value)?,
            "head_input" => {
                self.head_input = match value.trim() {
                    "gap" => HeadInput::GlobalAvgPool,
                    "flatten" => HeadInput::Flatten,
                    other => {
                        return Err(Error::config(format!(
                            "head_input must be gap or flatten, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed config line {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

/// Parses `32`, `32x32x32` or `24x28x20`.
pub fn parse_extent(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.trim().split('x').collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::config(format!("invalid extent {value:?}")))
    };
    match parts.as_slice() {
        [one] => {
            let e = parse(one)?;
            Ok([e; 3])
        }
        [d, h, w] => Ok([parse(d)?, parse(h)?, parse(w)?]),
        _ => Err(Error::config(format!("invalid extent {value:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_double() {
        assert_eq!(VoxCnnConfig::default().filter_widths(), [16, 32, 64, 128]);
    }

    #[test]
    fn default_ledger_on_32_cube() {
        let cfg = VoxCnnConfig::default();
        let extents: Vec<[usize; 3]> = cfg
            .shape_ledger([32; 3])
            .unwrap()
            .into_iter()
            .map(|s| s.extent)
            .collect();
        assert_eq!(extents, [[16; 3], [8; 3], [4; 3], [2; 3]]);
    }

    #[test]
    fn single_block_has_no_aux_tap() {
        let cfg = VoxCnnConfig {
            n_blocks: 1,
            aux_tap_block: 1,
            ..VoxCnnConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn collapse_names_stage() {
        let cfg = VoxCnnConfig {
            input_extent: [8; 3],
            ..VoxCnnConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("block4"), "{err}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let cfg = VoxCnnConfig {
            aux_weight: 0.5,
            ..VoxCnnConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = VoxCnnConfig {
            tabular_dim: 3,
            input_extent: [24, 20, 28],
            head_input: HeadInput::Flatten,
            dropout_fc: 0.25,
            ..VoxCnnConfig::default()
        };
        assert_eq!(VoxCnnConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    }
}
