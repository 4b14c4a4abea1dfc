//! A small U-Net-style fully convolutional network.
//!
//! Encoder of `depth` levels (two 3x3 conv+relu per level, channels doubling,
//! 2x2 max pooling between levels), a bottleneck, and a mirrored decoder
//! (nearest-neighbor upsample + conv, skip concatenation, two conv+relu).
//! A full-resolution 3x3 conv+relu produces the embedding tap `embed` —
//! the second-last convolutional layer — and a final 1x1 conv maps it to a
//! single logit channel. Output resolution always equals input resolution.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::t4f;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Number of pooling levels; input spatial dims must divide 2^depth.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel width at the embedding tap.
    pub embed_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            depth: 2,
            base_channels: 8,
            embed_channels: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidArgument(format!("depth must be >= 1, got {}", self.depth)));
        }
        if self.base_channels < 1 || self.input_channels < 1 || self.embed_channels < 1 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvSpec {
    name: String,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
}

/// Conv layers in forward order for a config. The decoder mirrors the
/// encoder; the last two entries are the embedding tap and the logit head.
fn layer_plan(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let mut plan = Vec::new();
    let mut conv = |name: String, k: usize, cin: usize, cout: usize| {
        plan.push(ConvSpec { name, kh: k, kw: k, cin, cout });
    };
    let width = |level: usize| cfg.base_channels << level;
    let mut cin = cfg.input_channels;
    for level in 0..cfg.depth {
        conv(format!("enc{level}a"), 3, cin, width(level));
        conv(format!("enc{level}b"), 3, width(level), width(level));
        cin = width(level);
    }
    conv("bot_a".into(), 3, width(cfg.depth - 1), width(cfg.depth));
    conv("bot_b".into(), 3, width(cfg.depth), width(cfg.depth));
    for level in (0..cfg.depth).rev() {
        conv(format!("up{level}"), 3, width(level + 1), width(level));
        conv(format!("dec{level}a"), 3, 2 * width(level), width(level));
        conv(format!("dec{level}b"), 3, width(level), width(level));
    }
    conv("embed".into(), 3, cfg.base_channels, cfg.embed_channels);
    conv("head".into(), 1, cfg.embed_channels, 1);
    plan
}

/// Logit and embedding-tap nodes of a forward pass built on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub embed: NodeId,
}

/// Plain forward outputs: `logits` is `H x W x 1 x N`, `embed` is
/// `H x W x embed_channels x N`, both at input resolution.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Tensor4,
    pub embed: Tensor4,
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    plan: Vec<ConvSpec>,
    /// Weight and bias tensors interleaved: `[w0, b0, w1, b1, ...]`.
    params: Vec<Tensor4>,
}

impl Model {
    /// Builds the network with He-scaled normal weights (sd = sqrt(2/fan_in))
    /// and zero biases, drawn from a generator seeded with `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let plan = layer_plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(plan.len() * 2);
        for spec in &plan {
            let fan_in = (spec.kh * spec.kw * spec.cin) as f32;
            let sd = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0f32, sd).expect("valid sd");
            let mut w = Tensor4::zeros(spec.kh, spec.kw, spec.cin, spec.cout);
            for v in w.data_mut() {
                *v = normal.sample(&mut rng);
            }
            params.push(w);
            params.push(Tensor4::zeros(1, 1, spec.cout, 1));
        }
        Ok(Model { config, plan, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor4] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, batch: &Tensor4) -> Result<()> {
        if batch.c() != self.config.input_channels {
            return Err(Error::shape(
                "model input channels",
                format!("{} channels", self.config.input_channels),
                batch.dims_str(),
            ));
        }
        let d = self.config.divisor();
        if batch.h() % d != 0 || batch.w() % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "input spatial dims {}x{} must be divisible by {} (depth {})",
                batch.h(),
                batch.w(),
                d,
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `graph`, registering every parameter.
    /// Parameter gradients from `Gradients::params` align with `params()`.
    pub fn forward_on(&self, graph: &mut Graph<f32>, batch: Tensor4) -> Result<ForwardNodes> {
        self.check_input(&batch)?;
        let x = graph.leaf(batch);
        let param_nodes: Vec<NodeId> = self.params.iter().map(|p| graph.param(p.clone())).collect();
        let mut layer = 0usize;
        let mut conv_relu = |g: &mut Graph<f32>, input: NodeId, pad: usize, relu: bool| -> Result<NodeId> {
            let w = param_nodes[2 * layer];
            let b = param_nodes[2 * layer + 1];
            layer += 1;
            let c = g.conv2d(input, w, b, pad, 1)?;
            Ok(if relu { g.relu(c) } else { c })
        };

        let mut cur = x;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            cur = conv_relu(graph, cur, 1, true)?;
            cur = conv_relu(graph, cur, 1, true)?;
            skips.push(cur);
            cur = graph.maxpool2(cur)?;
        }
        cur = conv_relu(graph, cur, 1, true)?;
        cur = conv_relu(graph, cur, 1, true)?;
        for level in (0..self.config.depth).rev() {
            cur = graph.upsample2(cur);
            cur = conv_relu(graph, cur, 1, true)?;
            cur = graph.concat_channels(cur, skips[level])?;
            cur = conv_relu(graph, cur, 1, true)?;
            cur = conv_relu(graph, cur, 1, true)?;
        }
        let embed = conv_relu(graph, cur, 1, true)?;
        let logits = conv_relu(graph, embed, 0, false)?;
        Ok(ForwardNodes { logits, embed })
    }

    pub fn forward(&self, batch: &Tensor4) -> Result<ForwardResult> {
        let mut graph = Graph::new();
        let nodes = self.forward_on(&mut graph, batch.clone())?;
        Ok(ForwardResult {
            logits: graph.value(nodes.logits).clone(),
            embed: graph.value(nodes.embed).clone(),
        })
    }

    /// Sigmoid of the logits: a probability map in [0, 1].
    pub fn predict(&self, batch: &Tensor4) -> Result<Tensor4> {
        let mut graph = Graph::new();
        let nodes = self.forward_on(&mut graph, batch.clone())?;
        let probs = graph.sigmoid(nodes.logits);
        Ok(graph.value(probs).clone())
    }

    /// Writes a checkpoint: a line-oriented manifest naming every layer and
    /// shape, followed by one T4F blob per parameter tensor. Round-trips
    /// bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = String::new();
        let _ = writeln!(header, "FCNCKPT v1");
        let _ = writeln!(header, "input_channels = {}", self.config.input_channels);
        let _ = writeln!(header, "depth = {}", self.config.depth);
        let _ = writeln!(header, "base_channels = {}", self.config.base_channels);
        let _ = writeln!(header, "embed_channels = {}", self.config.embed_channels);
        let _ = writeln!(header, "seed = {}", self.config.seed);
        let _ = writeln!(header, "layers = {}", self.plan.len());
        for spec in &self.plan {
            let _ = writeln!(header, "layer = {} {} {} {} {}", spec.name, spec.kh, spec.kw, spec.cin, spec.cout);
        }
        let _ = writeln!(header, "end");
        out.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        for p in &self.params {
            t4f::write_tensor(&mut out, p, path)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut offset = 0u64;
        fn read_line(r: &mut BufReader<File>, line: &mut String, offset: &mut u64, path: &Path) -> Result<()> {
            line.clear();
            let k = r.read_line(line).map_err(|e| Error::io(path, e))?;
            if k == 0 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: *offset,
                    msg: "unexpected end of header".into(),
                });
            }
            *offset += k as u64;
            Ok(())
        }
        read_line(&mut reader, &mut line, &mut offset, path)?;
        if line.trim_end() != "FCNCKPT v1" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("bad checkpoint magic line {:?}", line.trim_end()),
            });
        }
        let mut fields = std::collections::HashMap::new();
        let mut layers: Vec<ConvSpec> = Vec::new();
        loop {
            read_line(&mut reader, &mut line, &mut offset, path)?;
            let t = line.trim_end();
            if t == "end" {
                break;
            }
            let (key, value) = t.split_once(" = ").ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("expected 'key = value', got {t:?}"),
            })?;
            if key == "layer" {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 5 {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        msg: format!("bad layer line {value:?}"),
                    });
                }
                let dim = |s: &str| -> Result<usize> {
                    s.parse().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        msg: format!("bad layer dim {s:?}"),
                    })
                };
                layers.push(ConvSpec {
                    name: parts[0].to_string(),
                    kh: dim(parts[1])?,
                    kw: dim(parts[2])?,
                    cin: dim(parts[3])?,
                    cout: dim(parts[4])?,
                });
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }
        let get = |key: &str| -> Result<u64> {
            fields
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    msg: format!("missing or bad field {key:?}"),
                })
        };
        let config = ModelConfig {
            input_channels: get("input_channels")? as usize,
            depth: get("depth")? as usize,
            base_channels: get("base_channels")? as usize,
            embed_channels: get("embed_channels")? as usize,
            seed: get("seed")?,
        };
        let expected = layer_plan(&config);
        if expected != layers {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: "layer manifest does not match the architecture for this config".into(),
            });
        }
        if layers.len() != get("layers")? as usize {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: "layer count mismatch".into(),
            });
        }
        let mut params = Vec::with_capacity(layers.len() * 2);
        for spec in &layers {
            let w = t4f::read_tensor(&mut reader, path)?;
            if w.dims() != (spec.kh, spec.kw, spec.cin, spec.cout) {
                return Err(Error::shape(
                    format!("checkpoint weights for layer {}", spec.name),
                    format!("{}x{}x{}x{}", spec.kh, spec.kw, spec.cin, spec.cout),
                    w.dims_str(),
                ));
            }
            let b = t4f::read_tensor(&mut reader, path)?;
            if b.dims() != (1, 1, spec.cout, 1) {
                return Err(Error::shape(
                    format!("checkpoint bias for layer {}", spec.name),
                    format!("1x1x{}x1", spec.cout),
                    b.dims_str(),
                ));
            }
            params.push(w);
            params.push(b);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("{} trailing bytes after parameters", rest.len()),
            });
        }
        Ok(Model {
            config,
            plan: layers,
            params,
        })
    }
}
