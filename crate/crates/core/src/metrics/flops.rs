//! Static multiply-accumulate counting over a layer list.
//!
//! Architectures are plain text, one layer per line:
//!
//! ```text
//! input channels=3 height=224 width=224
//! conv name=conv1 out=64 kernel=7 stride=2 padding=3 bias=false
//! relu
//! maxpool kernel=3 stride=2 padding=1
//! add with=conv1
//! avgpool global=true
//! linear out=1000
//! ```
//!
//! A layer consumes the previous layer's output unless `from=<name>` names an
//! earlier one, which is how residual branches are written.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::BackboneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        out: usize,
        bias: bool,
    },
    Pool {
        mode: PoolMode,
        kernel: usize,
        stride: usize,
        padding: usize,
        global: bool,
    },
    Relu,
    /// Elementwise sum with the output of layer `with`.
    Add {
        with: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Input layer name; `None` means the preceding layer.
    pub from: Option<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// `[channels, height, width]` of one sample.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub output: Shape3,
    pub macs: u64,
    pub elementwise: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub input: Shape3,
    pub layers: Vec<LayerReport>,
    pub total_macs: u64,
    pub total_elementwise: u64,
    pub total_params: u64,
    pub pass_multiplier: u64,
}

impl FlopsReport {
    /// Headline cost: MACs (1 MAC = 1 FLOP) times the pass multiplier.
    pub fn total_flops(&self) -> u64 {
        self.total_macs * self.pass_multiplier
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }
}

fn out_side(side: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (side + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Counts MACs, elementwise ops and parameters for each layer of `arch`.
pub fn flops_of(arch: &Architecture) -> Result<FlopsReport> {
    if arch.input.contains(&0) {
        return Err(invalid!("input shape {:?} has a zero extent", arch.input));
    }
    let mut shapes: HashMap<&str, Shape3> = HashMap::new();
    let mut prev = arch.input;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (index, layer) in arch.layers.iter().enumerate() {
        let at = |msg: String| invalid!("layer {index} (`{}`): {msg}", layer.name);
        let x = match &layer.from {
            Some(src) => *shapes
                .get(src.as_str())
                .ok_or_else(|| at(format!("unknown input layer `{src}`")))?,
            None => prev,
        };
        let [c, h, w] = x;
        let numel = |s: Shape3| (s[0] * s[1] * s[2]) as u64;
        let (output, macs, elementwise, params, kind) = match &layer.kind {
            LayerKind::Conv {
                out,
                kernel,
                stride,
                padding,
                bias,
            } => {
                if *out == 0 || *kernel == 0 || *stride == 0 {
                    return Err(at("conv needs positive out, kernel and stride".into()));
                }
                let (ho, wo) = match (out_side(h, *kernel, *stride, *padding), out_side(w, *kernel, *stride, *padding)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(at(format!("kernel {kernel} exceeds padded input {h}x{w}"))),
                };
                let y = [*out, ho, wo];
                let macs = (kernel * kernel * c) as u64 * numel(y);
                let params = (kernel * kernel * c * out + if *bias { *out } else { 0 }) as u64;
                (y, macs, if *bias { numel(y) } else { 0 }, params, "conv")
            }
            LayerKind::Linear { out, bias } => {
                if *out == 0 {
                    return Err(at("linear needs positive out".into()));
                }
                let d = numel(x);
                let y = [*out, 1, 1];
                let params = d * *out as u64 + if *bias { *out as u64 } else { 0 };
                (y, d * *out as u64, if *bias { *out as u64 } else { 0 }, params, "linear")
            }
            LayerKind::Pool {
                mode,
                kernel,
                stride,
                padding,
                global,
            } => {
                let name = match mode {
                    PoolMode::Max => "maxpool",
                    PoolMode::Avg => "avgpool",
                };
                if *global {
                    ([c, 1, 1], 0, numel(x), 0, name)
                } else {
                    if *kernel == 0 || *stride == 0 {
                        return Err(at("pool needs positive kernel and stride".into()));
                    }
                    let (ho, wo) = match (out_side(h, *kernel, *stride, *padding), out_side(w, *kernel, *stride, *padding)) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(at(format!("pool window {kernel} exceeds input {h}x{w}"))),
                    };
                    let y = [c, ho, wo];
                    (y, 0, numel(y) * (kernel * kernel) as u64, 0, name)
                }
            }
            LayerKind::Relu => (x, 0, numel(x), 0, "relu"),
            LayerKind::Add { with } => {
                let other = *shapes
                    .get(with.as_str())
                    .ok_or_else(|| at(format!("unknown layer `{with}`")))?;
                if other != x {
                    return Err(at(format!("cannot add {x:?} and {other:?} from `{with}`")));
                }
                (x, 0, numel(x), 0, "add")
            }
        };
        if !layer.name.is_empty() && shapes.insert(&layer.name, output).is_some() {
            return Err(at("duplicate layer name".into()));
        }
        prev = output;
        layers.push(LayerReport {
            index,
            name: layer.name.clone(),
            kind: kind.into(),
            output,
            macs,
            elementwise,
            params,
        });
    }
    Ok(FlopsReport {
        input: arch.input,
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_elementwise: layers.iter().map(|l| l.elementwise).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
        pass_multiplier: 1,
    })
}

/// Inference cost of the single-pass merged model versus a dynamic method
/// that runs one full pass per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceCost {
    pub tasks: u64,
    pub single_pass: u64,
    pub merged: u64,
    pub multi_pass: u64,
}

pub fn dynamic_inference_cost(single_pass: &FlopsReport, tasks: u64) -> Result<InferenceCost> {
    if tasks == 0 {
        return Err(invalid!("task count must be at least 1"));
    }
    let f = single_pass.total_flops();
    let multi_pass = f
        .checked_mul(tasks)
        .ok_or_else(|| invalid!("multi-pass cost overflows for {tasks} tasks"))?;
    Ok(InferenceCost {
        tasks,
        single_pass: f,
        merged: f,
        multi_pass,
    })
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parses the line-oriented architecture format described in the module docs.
pub fn parse_architecture(text: &str, path: &Path) -> Result<Architecture> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut input = None;
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let kind = parts.next().expect("non-empty line");
        let mut kv: HashMap<&str, &str> = HashMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected key=value, got `{p}`")))?;
            if kv.insert(k, v).is_some() {
                return Err(err(lineno, format!("duplicate key `{k}`")));
            }
        }
        let mut num = |k: &str, default: Option<usize>| -> Result<usize> {
            match kv.remove(k) {
                Some(v) => v
                    .parse()
                    .map_err(|_| err(lineno, format!("`{k}` must be a non-negative integer, got `{v}`"))),
                None => default.ok_or_else(|| err(lineno, format!("missing `{k}`"))),
            }
        };
        if kind == "input" {
            if input.is_some() || !layers.is_empty() {
                return Err(err(lineno, "`input` must appear once, before any layer".into()));
            }
            input = Some([num("channels", None)?, num("height", None)?, num("width", None)?]);
        } else {
            let layer_kind = match kind {
                "conv" => {
                    let (out, kernel) = (num("out", None)?, num("kernel", None)?);
                    let (stride, padding) = (num("stride", Some(1))?, num("padding", Some(0))?);
                    LayerKind::Conv {
                        out,
                        kernel,
                        stride,
                        padding,
                        bias: false,
                    }
                }
                "linear" => LayerKind::Linear {
                    out: num("out", None)?,
                    bias: false,
                },
                "maxpool" | "avgpool" => {
                    let global = match kv.remove("global") {
                        Some(v) => parse_bool(v).ok_or_else(|| err(lineno, format!("bad boolean `{v}`")))?,
                        None => false,
                    };
                    let mut num = |k: &str, default: Option<usize>| -> Result<usize> {
                        match kv.remove(k) {
                            Some(v) => v.parse().map_err(|_| err(lineno, format!("`{k}` must be an integer"))),
                            None => default.ok_or_else(|| err(lineno, format!("missing `{k}`"))),
                        }
                    };
                    let kernel = num("kernel", global.then_some(0))?;
                    LayerKind::Pool {
                        mode: if kind == "maxpool" { PoolMode::Max } else { PoolMode::Avg },
                        kernel,
                        stride: num("stride", Some(kernel.max(1)))?,
                        padding: num("padding", Some(0))?,
                        global,
                    }
                }
                "relu" => LayerKind::Relu,
                "add" => LayerKind::Add {
                    with: kv
                        .remove("with")
                        .ok_or_else(|| err(lineno, "`add` needs with=<layer>".into()))?
                        .to_string(),
                },
                other => return Err(err(lineno, format!("unknown layer kind `{other}`"))),
            };
            let layer_kind = match layer_kind {
                LayerKind::Conv { out, kernel, stride, padding, .. } => LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                    bias: take_bias(&mut kv, false).map_err(|m| err(lineno, m))?,
                },
                LayerKind::Linear { out, .. } => LayerKind::Linear {
                    out,
                    bias: take_bias(&mut kv, true).map_err(|m| err(lineno, m))?,
                },
                k => k,
            };
            let name = kv.remove("name").map(str::to_string).unwrap_or_default();
            let from = kv.remove("from").map(str::to_string);
            if let Some(k) = kv.keys().min() {
                return Err(err(lineno, format!("unknown key `{k}` for `{kind}`")));
            }
            layers.push(LayerSpec {
                name,
                from,
                kind: layer_kind,
            });
            continue;
        }
        if let Some(k) = kv.keys().min() {
            return Err(err(lineno, format!("unknown key `{k}` for `input`")));
        }
    }
    let input = input.ok_or_else(|| err(1, "missing `input` line".into()))?;
    Ok(Architecture { input, layers })
}

fn take_bias(kv: &mut HashMap<&str, &str>, default: bool) -> std::result::Result<bool, String> {
    match kv.remove("bias") {
        Some(v) => parse_bool(v).ok_or_else(|| format!("bad boolean `{v}`")),
        None => Ok(default),
    }
}

pub fn read_architecture(path: &Path) -> Result<Architecture> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_architecture(&text, path)
}

pub const RESNET18_ARCH: &str = include_str!("../../arch/resnet18.arch");
pub const RESNET18_ADAPTERS_ARCH: &str = include_str!("../../arch/resnet18_adapters.arch");

/// Built-in architectures addressable by name.
pub fn builtin_architecture(name: &str) -> Option<Architecture> {
    let text = match name {
        "resnet18" => RESNET18_ARCH,
        "resnet18-adapters" => RESNET18_ADAPTERS_ARCH,
        _ => return None,
    };
    Some(parse_architecture(text, Path::new(name)).expect("built-in architecture parses"))
}

/// Layer list of the desk backbone, optionally with one adapter per block and a head.
pub fn backbone_architecture(spec: &BackboneSpec, adapter_ratio: Option<usize>, head_width: Option<usize>) -> Architecture {
    let mut layers = Vec::new();
    let push = |layers: &mut Vec<LayerSpec>, name: String, kind: LayerKind| {
        layers.push(LayerSpec { name, from: None, kind })
    };
    for (j, &c) in spec.channels.iter().enumerate() {
        let b = format!("block{}", j + 1);
        push(
            &mut layers,
            format!("{b}.conv"),
            LayerKind::Conv {
                out: c,
                kernel: spec.kernel,
                stride: 1,
                padding: spec.kernel / 2,
                bias: true,
            },
        );
        push(&mut layers, format!("{b}.relu"), LayerKind::Relu);
        push(
            &mut layers,
            format!("{b}.pool"),
            LayerKind::Pool {
                mode: PoolMode::Max,
                kernel: 2,
                stride: 2,
                padding: 0,
                global: false,
            },
        );
        if let Some(r) = adapter_ratio {
            let conv = |out| LayerKind::Conv {
                out,
                kernel: 1,
                stride: 1,
                padding: 0,
                bias: true,
            };
            push(&mut layers, format!("{b}.adapter.down"), conv(c / r.max(1)));
            push(&mut layers, format!("{b}.adapter.relu"), LayerKind::Relu);
            push(&mut layers, format!("{b}.adapter.up"), conv(c));
            push(
                &mut layers,
                format!("{b}.adapter.add"),
                LayerKind::Add {
                    with: format!("{b}.pool"),
                },
            );
        }
    }
    push(
        &mut layers,
        "gap".into(),
        LayerKind::Pool {
            mode: PoolMode::Avg,
            kernel: 0,
            stride: 1,
            padding: 0,
            global: true,
        },
    );
    if let Some(k) = head_width {
        push(&mut layers, "head".into(), LayerKind::Linear { out: k, bias: true });
    }
    Architecture {
        input: [spec.in_channels, spec.image_size, spec.image_size],
        layers,
    }
}
