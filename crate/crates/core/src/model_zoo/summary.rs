use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Base, Block, Model};
use crate::tensor::{ParamKind, ParamStore, Scalar};

/// Learnable parameters of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub kind: String,
    pub params: usize,
    /// Convolution weights.
    pub conv_params: usize,
    /// Batch-norm scales and shifts.
    pub bn_params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    /// Stage number, from 1.
    pub index: usize,
    pub fp: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(C, H, W)` after the stage for the architecture's native input size.
    pub output: [usize; 3],
    /// How the stage reduces resolution, if it does.
    pub downsample: Option<String>,
    pub params: usize,
    pub blocks: Vec<BlockSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub base: Base,
    pub config: String,
    pub q: usize,
    pub ablation: bool,
    pub num_classes: usize,
    pub depth: usize,
    pub stem_params: usize,
    pub head_params: usize,
    pub layers: Vec<LayerSummary>,
    pub total_params: usize,
}

impl ModelSummary {
    pub fn per_layer_params(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.params).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }
}

#[derive(Default)]
struct Tally {
    conv: usize,
    bn: usize,
}

/// Enumerates the learnable parameters of `model` in `store`, grouped by
/// stem, stage, block and head.
pub fn summarize<T: Scalar>(model: &Model, store: &ParamStore<T>) -> ModelSummary {
    let mut groups: BTreeMap<(String, Option<usize>), Tally> = BTreeMap::new();
    for (_, p) in store.iter().filter(|(_, p)| p.learnable()) {
        let mut parts = p.name().split('.');
        let group = parts.next().unwrap_or_default().to_string();
        let block = if group.starts_with("layer") { parts.next().and_then(|s| s.parse().ok()) } else { None };
        let t = groups.entry((group, block)).or_default();
        match p.kind() {
            ParamKind::Weight => t.conv += p.numel(),
            _ => t.bn += p.numel(),
        }
    }
    let total_of = |g: &str| -> usize {
        groups.iter().filter(|((name, _), _)| name == g).map(|(_, t)| t.conv + t.bn).sum()
    };

    let spec = model.spec();
    let mut side = spec.base.input_size();
    if !spec.base.is_cifar() {
        side /= 4;
    }
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let name = format!("layer{}", i + 1);
            side /= layer.stride;
            let blocks = layer
                .blocks
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let t = groups.get(&(name.clone(), Some(j)));
                    let (conv, bn) = t.map_or((0, 0), |t| (t.conv, t.bn));
                    BlockSummary { kind: b.kind().to_string(), params: conv + bn, conv_params: conv, bn_params: bn }
                })
                .collect();
            let downsample = (layer.stride > 1).then(|| {
                if matches!(layer.blocks[0], Block::Fp(_)) { "max-pool" } else { "stride-2 conv" }.to_string()
            });
            LayerSummary {
                index: i + 1,
                fp: layer.is_fp(),
                in_channels: layer.in_channels,
                out_channels: layer.out_channels,
                output: [layer.out_channels, side, side],
                downsample,
                params: total_of(&name),
                blocks,
            }
        })
        .collect();

    let total_params = store.num_learnable();
    ModelSummary {
        name: spec.label(),
        base: spec.base,
        config: spec.config.clone(),
        q: spec.q,
        ablation: spec.ablation,
        num_classes: spec.num_classes,
        depth: model.depth(),
        stem_params: total_of("stem"),
        head_params: total_of("head"),
        layers,
        total_params,
    }
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let variant = if !self.config.contains('1') {
            "base"
        } else if self.ablation {
            "single filter + ReLU"
        } else {
            "filter pairs"
        };
        writeln!(f, "model {}  config {}  q {}  variant {}", self.base, self.config, self.q, variant)?;
        writeln!(f, "{:<7}{:<15}{:>7}  {:<12}{:<14}{:<15}{:>12}", "layer", "kind", "blocks", "channels", "output", "downsample", "params")?;
        writeln!(f, "{:<7}{:<15}{:>7}  {:<12}{:<14}{:<15}{:>12}", "stem", "conv", "", "", "", "", self.stem_params)?;
        for l in &self.layers {
            let kind = if l.fp { format!("FP ({})", l.blocks[0].kind) } else { l.blocks[0].kind.clone() };
            let [c, h, w] = l.output;
            writeln!(
                f,
                "{:<7}{:<15}{:>7}  {:<12}{:<14}{:<15}{:>12}",
                l.index,
                kind,
                l.blocks.len(),
                format!("{}->{}", l.in_channels, l.out_channels),
                format!("{c}x{h}x{w}"),
                l.downsample.as_deref().unwrap_or("-"),
                l.params
            )?;
            if l.fp {
                for (j, b) in l.blocks.iter().enumerate() {
                    writeln!(
                        f,
                        "{:<7}{:<15}{:>7}  {:<41}{:>12}",
                        "",
                        format!("  block {j}"),
                        "",
                        format!("conv {} + bn {}", b.conv_params, b.bn_params),
                        b.params
                    )?;
                }
            }
        }
        writeln!(f, "{:<7}{:<15}{:>7}  {:<12}{:<14}{:<15}{:>12}", "head", "gap+linear", "", "", self.num_classes, "", self.head_params)?;
        writeln!(f, "depth {}  total parameters {}", self.depth, self.total_params)
    }
}
