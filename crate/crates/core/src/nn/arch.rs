//! Layer-by-layer network descriptors, their canonical text form, and the
//! registries of layer kinds and named architecture presets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ops::conv_output_size;
use crate::error::{Error, Result};

/// One layer of an [`ArchDescriptor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2x2,
    Relu,
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    fn args(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => vec![out_channels, kernel, stride, padding],
            LayerSpec::Dense { out_features } => vec![out_features],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, h, w] = *input else {
                    return Err(Error::Arch(format!("conv2d needs a (C, H, W) input, got {input:?}")));
                };
                if out_channels == 0 {
                    return Err(Error::Arch("conv2d with 0 output channels".into()));
                }
                let ho = conv_output_size(h, kernel, stride, padding)
                    .map_err(|e| Error::Arch(format!("conv2d height: {e}")))?;
                let wo = conv_output_size(w, kernel, stride, padding)
                    .map_err(|e| Error::Arch(format!("conv2d width: {e}")))?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = *input else {
                    return Err(Error::Arch(format!("maxpool2x2 needs a (C, H, W) input, got {input:?}")));
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Arch(format!("maxpool2x2 needs even height and width, got {h}×{w}")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { out_features } => {
                if input.len() != 1 {
                    return Err(Error::Arch(format!("dense needs a flat input, got {input:?}")));
                }
                if out_features == 0 {
                    return Err(Error::Arch("dense with 0 outputs".into()));
                }
                Ok(vec![out_features])
            }
        }
    }

    /// Weight and bias shapes, empty for parameter-free layers.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, input[0], kernel, kernel], vec![out_channels]],
            LayerSpec::Dense { out_features } => vec![vec![out_features, input[0]], vec![out_features]],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())?;
        for a in self.args() {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

/// Entry in the layer-kind registry: a name, its argument count, and the
/// constructor from parsed arguments.
pub struct LayerKind {
    pub name: &'static str,
    pub arity: usize,
    build: fn(&[usize]) -> LayerSpec,
}

static LAYER_KINDS: &[LayerKind] = &[
    LayerKind {
        name: "conv2d",
        arity: 4,
        build: |a| LayerSpec::Conv2d {
            out_channels: a[0],
            kernel: a[1],
            stride: a[2],
            padding: a[3],
        },
    },
    LayerKind {
        name: "maxpool2x2",
        arity: 0,
        build: |_| LayerSpec::MaxPool2x2,
    },
    LayerKind {
        name: "relu",
        arity: 0,
        build: |_| LayerSpec::Relu,
    },
    LayerKind {
        name: "flatten",
        arity: 0,
        build: |_| LayerSpec::Flatten,
    },
    LayerKind {
        name: "dense",
        arity: 1,
        build: |a| LayerSpec::Dense { out_features: a[0] },
    },
];

pub fn layer_kinds() -> &'static [LayerKind] {
    LAYER_KINDS
}

pub fn layer_kind(name: &str) -> Option<&'static LayerKind> {
    LAYER_KINDS.iter().find(|k| k.name == name)
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::Arch("empty layer line".into()))?;
        let kind = layer_kind(name).ok_or_else(|| Error::Arch(format!("unknown layer kind {name:?}")))?;
        let args = parts
            .map(|p| p.parse::<usize>().map_err(|_| Error::Arch(format!("bad argument {p:?} for {name}"))))
            .collect::<Result<Vec<_>>>()?;
        if args.len() != kind.arity {
            return Err(Error::Arch(format!(
                "{name} takes {} arguments, got {}",
                kind.arity,
                args.len()
            )));
        }
        Ok((kind.build)(&args))
    }
}

/// Input geometry of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape {
            height,
            width,
            channels,
        }
    }

    /// Channel-major per-sample tensor shape.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated chain of layers. Construction checks that every layer's
/// input shape is consistent with its predecessor's output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    input: InputShape,
    layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Arch(format!("empty input {input:?}")));
        }
        let arch = ArchDescriptor { input, layers };
        arch.layer_shapes()?;
        Ok(arch)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample `(input, output)` shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let mut shape = self.input.chw().to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(&shape)
                .map_err(|e| Error::Arch(format!("layer {i} ({layer}): {e}")))?;
            out.push((shape, next.clone()));
            shape = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .expect("validated at construction")
            .last()
            .map(|(_, o)| o.clone())
            .unwrap_or_else(|| self.input.chw().to_vec())
    }

    /// Parameter tensor shapes in descriptor order (weights then bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_shapes()
            .expect("validated at construction")
            .iter()
            .zip(&self.layers)
            .flat_map(|((i, _), l)| l.param_shapes(i))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Checks the classifier contract: the chain ends in a dense layer
    /// producing two logits (occupied, empty).
    pub fn validate_classifier(&self) -> Result<()> {
        match self.layers.last() {
            Some(LayerSpec::Dense { out_features: 2 }) => Ok(()),
            Some(other) => Err(Error::Arch(format!(
                "classifier must end in dense 2, ends in {other}"
            ))),
            None => Err(Error::Arch("classifier has no layers".into())),
        }
    }

    /// Canonical text: an `input H W C` line, then one line per layer.
    pub fn to_canonical(&self) -> String {
        let mut s = format!(
            "input {} {} {}\n",
            self.input.height, self.input.width, self.input.channels
        );
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let head = lines.next().ok_or_else(|| Error::Arch("empty descriptor".into()))?;
        let dims: Vec<&str> = head.split_whitespace().collect();
        let input = match dims.as_slice() {
            ["input", h, w, c] => {
                let p = |v: &str| v.parse::<usize>().map_err(|_| Error::Arch(format!("bad input dimension {v:?}")));
                InputShape::new(p(h)?, p(w)?, p(c)?)
            }
            _ => return Err(Error::Arch(format!("expected `input H W C`, got {head:?}"))),
        };
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        ArchDescriptor::new(input, layers)
    }

    /// Indices into [`Self::param_shapes`] of the last conv layer and all
    /// dense layers.
    pub fn last_conv_and_dense_params(&self) -> Result<Vec<usize>> {
        let mut slot = 0;
        let mut last_conv = None;
        let mut dense = Vec::new();
        for l in &self.layers {
            match l {
                LayerSpec::Conv2d { .. } => {
                    last_conv = Some(slot);
                    slot += 2;
                }
                LayerSpec::Dense { .. } => {
                    dense.push(slot);
                    slot += 2;
                }
                _ => {}
            }
        }
        let conv = last_conv.ok_or_else(|| Error::Arch("architecture has no conv layer".into()))?;
        let mut out = vec![conv, conv + 1];
        for d in dense {
            out.extend([d, d + 1]);
        }
        Ok(out)
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

impl Serialize for ArchDescriptor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_canonical())
    }
}

impl<'de> Deserialize<'de> for ArchDescriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ArchDescriptor::parse_canonical(&text).map_err(serde::de::Error::custom)
    }
}

/// The five-stage layout shared by every preset:
/// conv k5 → relu → pool → conv k5 → relu → pool → conv k3 → relu → flatten → dense 2.
pub fn three_conv_two_pool(input: InputShape, channels: [usize; 3], first_stride: usize) -> Result<ArchDescriptor> {
    ArchDescriptor::new(
        input,
        vec![
            LayerSpec::Conv2d {
                out_channels: channels[0],
                kernel: 5,
                stride: first_stride,
                padding: 2,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv2d {
                out_channels: channels[1],
                kernel: 5,
                stride: 1,
                padding: 2,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv2d {
                out_channels: channels[2],
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 2 },
        ],
    )
}

/// Named architecture presets, selectable from configuration.
#[derive(Debug, Clone)]
pub struct ArchRegistry {
    presets: BTreeMap<String, ArchDescriptor>,
}

impl ArchRegistry {
    pub fn empty() -> Self {
        ArchRegistry {
            presets: BTreeMap::new(),
        }
    }

    /// Built-in presets:
    /// - `student`: the deployable student, channels (32, 64, 128), 143,938 params.
    /// - `teacher-member`: one ensemble member, channels (48, 96, 192), 309,602 params.
    /// - `compact-student` / `compact-teacher`: same layout with a stride-2
    ///   first conv and narrow channels, for single-core desk-scale runs.
    pub fn builtin() -> Self {
        let input = InputShape::new(32, 32, 3);
        let mut r = Self::empty();
        let presets = [
            ("student", [32, 64, 128], 1),
            ("teacher-member", [48, 96, 192], 1),
            ("compact-student", [8, 16, 16], 2),
            ("compact-teacher", [12, 24, 32], 2),
        ];
        for (name, ch, stride) in presets {
            r.register(name, three_conv_two_pool(input, ch, stride).expect("preset is valid"));
        }
        r
    }

    pub fn register(&mut self, name: &str, arch: ArchDescriptor) {
        self.presets.insert(name.to_string(), arch);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.presets.keys().map(String::as_str)
    }

    /// Looks up a preset by name; a value containing a newline is parsed as
    /// an inline canonical descriptor instead.
    pub fn resolve(&self, name_or_text: &str) -> Result<ArchDescriptor> {
        if name_or_text.contains('\n') {
            return ArchDescriptor::parse_canonical(name_or_text);
        }
        self.presets.get(name_or_text).cloned().ok_or_else(|| {
            Error::Arch(format!(
                "unknown architecture {name_or_text:?}; known: {}",
                self.presets.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

impl Default for ArchRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
