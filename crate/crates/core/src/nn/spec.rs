//! Declarative UNet family.
//!
//! A [`ModelSpec`] is a flat, ordered layer list. Every layer consumes the
//! output of the layer before it; `Concat` additionally pulls in the output
//! of an earlier layer (the skip source) and places it after the current
//! tensor in channel order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Batchnorm,
    Relu,
    Maxpool2,
    Upsample2Bilinear,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Table label for convolutions ("Conv-3", "Deconv-0"); derived labels
    /// ("Conv-3.bn") for the rest.
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Index of the layer whose output is concatenated (Concat only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
}

impl LayerSpec {
    pub fn kernel(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv3x3 => Some(3),
            LayerKind::Conv1x1 => Some(1),
            _ => None,
        }
    }

    /// Trainable scalars owned by this layer.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let k = self.kernel().unwrap();
                self.out_channels * self.in_channels * k * k + self.out_channels
            }
            LayerKind::Batchnorm => 2 * self.out_channels,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Built-in model names and their per-level channel widths.
pub const MODEL_NAMES: [&str; 6] = ["unet", "unet-opt", "unet-c2", "unet-d", "unet-d2", "unet-d3"];

pub fn widths_for(name: &str) -> Option<&'static [usize]> {
    Some(match name {
        "unet" => &[16, 32, 64, 128],
        "unet-opt" => &[8, 16, 32, 64],
        "unet-c2" => &[4, 8, 16, 32],
        "unet-d" => &[8, 16, 32],
        "unet-d2" => &[16, 32, 64],
        "unet-d3" => &[32, 64, 128],
        _ => return None,
    })
}

/// Counts reported for each built-in model.
pub fn reference_total(name: &str) -> Option<usize> {
    Some(match name {
        "unet" => 1_081_745,
        "unet-opt" => 271_305,
        "unet-c2" => 68_261,
        "unet-d" => 67_689,
        "unet-d2" => 269_009,
        "unet-d3" => 1_072_545,
        _ => return None,
    })
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, cin: usize, cout: usize, skip: Option<usize>) -> usize {
        self.layers.push(LayerSpec {
            name,
            kind,
            in_channels: cin,
            out_channels: cout,
            skip,
        });
        self.layers.len() - 1
    }

    /// Conv3x3 + batchnorm + ReLU; returns the ReLU index.
    fn block(&mut self, label: String, cin: usize, cout: usize) -> usize {
        self.push(label.clone(), LayerKind::Conv3x3, cin, cout, None);
        self.push(format!("{label}.bn"), LayerKind::Batchnorm, cout, cout, None);
        self.push(format!("{label}.relu"), LayerKind::Relu, cout, cout, None)
    }
}

impl ModelSpec {
    /// UNet with one encoder level per entry of `widths`. Each level is two
    /// 3x3 blocks followed by a 2x2 pool; the bottleneck is two blocks at the
    /// last width; each decoder level upsamples, concatenates the matching
    /// encoder output and applies two blocks, the second narrowing to the
    /// next level's width. A 1x1 convolution maps to one output channel.
    pub fn unet(name: &str, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!("bad UNet widths {widths:?}")));
        }
        let levels = widths.len();
        let mut b = Builder { layers: Vec::new() };
        let mut conv = 0usize;
        let mut cin = 1;
        let mut skips = Vec::with_capacity(levels);
        for &w in widths {
            b.block(format!("Conv-{conv}"), cin, w);
            let s = b.block(format!("Conv-{}", conv + 1), w, w);
            skips.push(s);
            b.push(format!("Pool-{}", skips.len() - 1), LayerKind::Maxpool2, w, w, None);
            conv += 2;
            cin = w;
        }
        let wl = widths[levels - 1];
        b.block(format!("Conv-{conv}"), wl, wl);
        b.block(format!("Conv-{}", conv + 1), wl, wl);
        conv += 2;
        let mut deconv = 0usize;
        let mut cur = wl;
        for level in (0..levels).rev() {
            let w = widths[level];
            b.push(format!("Up-{level}"), LayerKind::Upsample2Bilinear, cur, cur, None);
            b.push(format!("Cat-{level}"), LayerKind::Concat, cur, cur + w, Some(skips[level]));
            b.block(format!("Deconv-{deconv}"), cur + w, w);
            let next = if level == 0 { widths[0] } else { widths[level - 1] };
            b.block(format!("Deconv-{}", deconv + 1), w, next);
            deconv += 2;
            cur = next;
        }
        b.push(format!("Conv-{conv}"), LayerKind::Conv1x1, cur, 1, None);
        let spec = ModelSpec {
            name: name.to_string(),
            layers: b.layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        let widths = widths_for(name).ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        Self::unet(name, widths)
    }

    /// Checks channel arithmetic and skip ordering along the layer list.
    pub fn validate(&self) -> Result<()> {
        let mut cur = 1usize;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != cur {
                return Err(Error::invalid(format!(
                    "layer {} expects {} channels, receives {cur}",
                    l.name, l.in_channels
                )));
            }
            match l.kind {
                LayerKind::Concat => {
                    let src = l.skip.ok_or_else(|| Error::invalid(format!("{} has no source", l.name)))?;
                    if src >= i {
                        return Err(Error::invalid(format!("{} concatenates a later layer", l.name)));
                    }
                    let extra = self.layers[src].out_channels;
                    if l.out_channels != cur + extra {
                        return Err(Error::invalid(format!("{} channel sum mismatch", l.name)));
                    }
                }
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {}
                _ if l.out_channels != l.in_channels => {
                    return Err(Error::invalid(format!("{} must preserve channels", l.name)));
                }
                _ => {}
            }
            if l.kind != LayerKind::Concat && l.skip.is_some() {
                return Err(Error::invalid(format!("{} has a stray skip source", l.name)));
            }
            cur = l.out_channels;
        }
        if cur != 1 || self.layers.last().and_then(LayerSpec::kernel).is_none() {
            return Err(Error::invalid("model must end with a single-channel convolution"));
        }
        Ok(())
    }

    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Maxpool2).count()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.pool_count()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn conv_params(&self) -> usize {
        self.layers.iter().filter(|l| l.kernel().is_some()).map(LayerSpec::param_count).sum()
    }

    pub fn batchnorm_params(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Batchnorm)
            .map(LayerSpec::param_count)
            .sum()
    }

    /// `(label, weights+biases)` for each convolution, in layer order.
    pub fn conv_table(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter(|l| l.kernel().is_some())
            .map(|l| (l.name.clone(), l.param_count()))
            .collect()
    }

    /// Index of the final 1x1 output convolution.
    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }
}

/// A width assignment found by [`search_widths`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthMatch {
    pub widths: Vec<usize>,
    pub total: usize,
}

/// Searches UNet configurations whose total parameter count equals `target`.
///
/// Candidates are doubling ladders `[w, 2w, 4w, ...]` with `levels` entries
/// for every base width `w` up to `max_base`.
pub fn search_widths(target: usize, levels: std::ops::RangeInclusive<usize>, max_base: usize) -> Vec<WidthMatch> {
    let mut found = Vec::new();
    for l in levels {
        for w in 1..=max_base {
            let widths: Vec<usize> = (0..l).map(|i| w << i).collect();
            let spec = ModelSpec::unet("search", &widths).expect("valid widths");
            let total = spec.total_params();
            if total == target {
                found.push(WidthMatch { widths, total });
            }
            if total > target {
                break;
            }
        }
    }
    found
}
