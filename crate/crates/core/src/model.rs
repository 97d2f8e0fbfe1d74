//! Residual U-Net producing one sigmoid heatmap per landmark at a quarter of
//! the input resolution.
//!
//! Topology for `encoder_channels = [c0, c1, ..]` and input `S`:
//!
//! ```text
//! stem      conv3x3/2 -> norm -> relu                         S/2,  c0
//! stage 0   residual blocks, first one strided                S/4,  c0
//! stage k   residual blocks, first one strided                S/2^(k+2), ck
//! decoder   upsample2x -> concat(stage k-1) -> conv3x3 -> norm -> relu,
//!           repeated back up to stage 0                       S/4,  c0
//! head      conv1x1 -> sigmoid                                S/4,  n
//! ```
//!
//! A residual block is `relu(skip(x) + norm(conv(relu(norm(conv(x))))))`,
//! where `skip` is the identity or a strided 1x1 projection when the shape
//! changes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::{Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"GMRK";
pub const MODEL_VERSION: u8 = 1;

/// Momentum of the running normalization statistics.
const NORM_MOMENTUM: f64 = 0.1;
/// Head weights are drawn smaller than He scaling so that fresh models
/// start with sigmoid outputs close to 0.5.
const HEAD_INIT_GAIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_landmarks: usize,
    pub encoder_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            num_landmarks: 4,
            encoder_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Side of the heatmap grid, `S / 4`.
    pub fn output_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be a non-empty list of positive widths, got {:?}",
                self.encoder_channels
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.num_landmarks == 0 {
            return Err(Error::Config("num_landmarks must be at least 1".into()));
        }
        let factor = 1usize << (self.encoder_channels.len() + 1);
        if self.input_size == 0 || self.input_size % factor != 0 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {factor} for {} stages",
                self.input_size,
                self.encoder_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct Entry<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormRef {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvRef,
    norm1: NormRef,
    conv2: ConvRef,
    norm2: NormRef,
    proj: Option<ConvRef>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: (ConvRef, NormRef),
    stages: Vec<Vec<Block>>,
    decoder: Vec<(ConvRef, NormRef)>,
    head: ConvRef,
}

/// Batch statistics observed by one normalization layer during a training
/// forward pass.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    norm: NormRef,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Graph handles for every model tensor, in entry order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

pub struct ForwardOutput<T> {
    pub heatmaps: Var,
    pub norm_updates: Vec<NormUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct UNetModel<T: Scalar = f32> {
    config: ModelConfig,
    entries: Vec<Entry<T>>,
    layout: Layout,
}

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> usize {
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, gain: f64) -> ConvRef {
        let fan_in = (cin * k * k) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        });
        let weight = self.push(format!("{name}.weight"), w, true);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        ConvRef {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize, gamma: f64) -> NormRef {
        NormRef {
            gamma: self.push(format!("{name}.weight"), Tensor::full(&[c], T::from_f64_lossy(gamma)), true),
            beta: self.push(format!("{name}.bias"), Tensor::zeros(&[c]), true),
            running_mean: self.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            running_var: self.push(format!("{name}.running_var"), Tensor::ones(&[c]), false),
        }
    }
}

impl<T: Scalar> UNetModel<T> {
    /// Deterministic He-initialised model for `config`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            entries: Vec::new(),
        };
        let ch = &config.encoder_channels;
        let stem = (b.conv("stem.conv", 3, ch[0], 3, 2, false, 1.0), b.norm("stem.norm", ch[0], 1.0));

        let mut stages = Vec::with_capacity(ch.len());
        let mut cin = ch[0];
        for (s, &cout) in ch.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for k in 0..config.blocks_per_stage {
                let p = format!("encoder.{s}.{k}");
                let stride = if k == 0 { 2 } else { 1 };
                let conv1 = b.conv(&format!("{p}.conv1"), cin, cout, 3, stride, false, 1.0);
                let norm1 = b.norm(&format!("{p}.norm1"), cout, 1.0);
                let conv2 = b.conv(&format!("{p}.conv2"), cout, cout, 3, 1, false, 1.0);
                // Residual branches start switched off so each block begins as its skip path.
                let norm2 = b.norm(&format!("{p}.norm2"), cout, 0.0);
                let proj = (stride != 1 || cin != cout)
                    .then(|| b.conv(&format!("{p}.proj"), cin, cout, 1, stride, true, 1.0));
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    proj,
                });
                cin = cout;
            }
            stages.push(blocks);
        }

        let mut decoder = Vec::new();
        for (d, s) in (0..ch.len() - 1).rev().enumerate() {
            let p = format!("decoder.{d}");
            let conv = b.conv(&format!("{p}.conv"), cin + ch[s], ch[s], 3, 1, false, 1.0);
            let norm = b.norm(&format!("{p}.norm"), ch[s], 1.0);
            decoder.push((conv, norm));
            cin = ch[s];
        }
        let head = b.conv("head", cin, config.num_landmarks, 1, 1, true, HEAD_INIT_GAIN);

        Ok(Self {
            config,
            entries: b.entries,
            layout: Layout {
                stem,
                stages,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, shape)` of every stored tensor, in file order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    /// Trainable tensors in entry order.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.entries.iter().filter(|e| e.trainable).map(|e| &e.tensor).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.tensor)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Put every tensor on `graph`: trainable ones as parameters, running
    /// statistics as constants.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.tensor.clone(), e.trainable))
                .collect(),
        }
    }

    /// Gradients of the trainable tensors after `graph.backward`, zeros for
    /// any that the loss did not reach.
    pub fn gradients(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .filter(|(e, _)| e.trainable)
            .map(|(e, &v)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(e.tensor.shape())))
            .collect()
    }

    fn expected_input(&self, batch: usize) -> [usize; 4] {
        [batch, 3, self.config.input_size, self.config.input_size]
    }

    pub fn forward(&self, graph: &mut Graph<T>, bound: &Bound, input: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let shape = graph.value(input).shape().to_vec();
        let batch = shape.first().copied().unwrap_or(0);
        if shape.len() != 4 || shape[1..] != self.expected_input(batch)[1..] || batch == 0 {
            return Err(Error::shape("model forward", &self.expected_input(batch.max(1)), &shape));
        }
        let mut fw = Forward {
            model: self,
            graph,
            bound,
            mode,
            updates: Vec::new(),
        };
        let l = &self.layout;
        let mut x = fw.conv_norm(input, l.stem.0, l.stem.1, true)?;
        let mut skips = Vec::with_capacity(l.stages.len());
        for stage in &l.stages {
            for block in stage {
                x = fw.block(x, block)?;
            }
            skips.push(x);
        }
        for (i, &(conv, norm)) in l.decoder.iter().enumerate() {
            let skip = skips[skips.len() - 2 - i];
            let up = fw.graph.upsample2x(x)?;
            let cat = fw.graph.concat_channels(up, skip)?;
            x = fw.conv_norm(cat, conv, norm, true)?;
        }
        let logits = fw.conv(x, l.head)?;
        let heatmaps = fw.graph.sigmoid(logits);
        Ok(ForwardOutput {
            heatmaps,
            norm_updates: fw.updates,
        })
    }

    /// Fold batch statistics from a training forward pass into the running
    /// averages.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>]) {
        let m = T::from_f64_lossy(NORM_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            let rm = self.entries[u.norm.running_mean].tensor.data_mut();
            rm.iter_mut().zip(&u.mean).for_each(|(r, &v)| *r = keep * *r + m * v);
            let rv = self.entries[u.norm.running_var].tensor.data_mut();
            rv.iter_mut().zip(&u.var).for_each(|(r, &v)| *r = keep * *r + m * v);
        }
    }

    /// Inference on a `B x 3 x S x S` batch; returns `B x n x S/4 x S/4`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let bound = Bound {
            vars: self.entries.iter().map(|e| graph.constant(e.tensor.clone())).collect(),
        };
        let input = graph.constant(batch.clone());
        let out = self.forward(&mut graph, &bound, input, Mode::Eval)?;
        Ok(graph.value(out.heatmaps).clone())
    }
}

struct Forward<'a, T: Scalar> {
    model: &'a UNetModel<T>,
    graph: &'a mut Graph<T>,
    bound: &'a Bound,
    mode: Mode,
    updates: Vec<NormUpdate<T>>,
}

impl<T: Scalar> Forward<'_, T> {
    fn conv(&mut self, x: Var, c: ConvRef) -> Result<Var> {
        let w = self.bound.vars[c.weight];
        let b = c.bias.map(|i| self.bound.vars[i]);
        self.graph.conv2d(x, w, b, c.stride, c.padding)
    }

    fn norm(&mut self, x: Var, n: NormRef) -> Result<Var> {
        let (gamma, beta) = (self.bound.vars[n.gamma], self.bound.vars[n.beta]);
        match self.mode {
            Mode::Train => {
                let out = self.graph.batch_norm(x, gamma, beta, NormStats::Batch)?;
                self.updates.push(NormUpdate {
                    norm: n,
                    mean: out.mean,
                    var: out.var,
                });
                Ok(out.output)
            }
            Mode::Eval => {
                let e = &self.model.entries;
                let stats = NormStats::Fixed {
                    mean: e[n.running_mean].tensor.data(),
                    var: e[n.running_var].tensor.data(),
                };
                Ok(self.graph.batch_norm(x, gamma, beta, stats)?.output)
            }
        }
    }

    fn conv_norm(&mut self, x: Var, c: ConvRef, n: NormRef, relu: bool) -> Result<Var> {
        let y = self.conv(x, c)?;
        let y = self.norm(y, n)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var> {
        let h = self.conv_norm(x, b.conv1, b.norm1, true)?;
        let h = self.conv_norm(h, b.conv2, b.norm2, false)?;
        let skip = match b.proj {
            Some(p) => self.conv(x, p)?,
            None => x,
        };
        let sum = self.graph.add(skip, h)?;
        Ok(self.graph.relu(sum))
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl UNetModel<f32> {
    /// `GMRK`, version byte, `u32` LE header length, JSON header, then raw
    /// little-endian `f32` blobs in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            config: self.config.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| TensorEntry {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.entries.iter().map(|e| e.tensor.numel() * 4).sum();
        let mut out = Vec::with_capacity(9 + json.len() + payload);
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = cursor.take(4, "magic")?.try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = cursor.take(1, "version")?[0];
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let len = u32::from_le_bytes(cursor.take(4, "header length")?.try_into().unwrap()) as usize;
        let header: FileHeader = serde_json::from_slice(cursor.take(len, "header")?)
            .map_err(|e| Error::ModelHeader(e.to_string()))?;
        let mut model = UNetModel::<f32>::build(header.config).map_err(|e| Error::ModelHeader(e.to_string()))?;
        if header.tensors.len() != model.entries.len() {
            return Err(Error::ModelHeader(format!(
                "manifest lists {} tensors, configuration defines {}",
                header.tensors.len(),
                model.entries.len()
            )));
        }
        for (entry, spec) in model.entries.iter_mut().zip(&header.tensors) {
            if entry.name != spec.name || entry.tensor.shape() != spec.shape.as_slice() {
                return Err(Error::ModelHeader(format!(
                    "manifest entry {} {:?} does not match expected {} {:?}",
                    spec.name,
                    spec.shape,
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            let raw = cursor.take(entry.tensor.numel() * 4, &format!("tensor {}", spec.name))?;
            for (dst, chunk) in entry.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if cursor.pos != bytes.len() {
            return Err(Error::ModelHeader(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cursor.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            what: what.to_string(),
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}
