//! Shared encoder with a supervised lesion head and a jigsaw head.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, AdaptiveAvgPool, BasicBlock, BlockCache, Conv2d, ConvCache, ConvInit, Gradients, Linear,
    MaxPool2d, ParamId, ParamStore,
};
use crate::permset::PermutationSet;
use crate::tensor::Tensor;

/// Number of lesion classes.
pub const NUM_CLASSES: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"JIGSAWCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Registered encoder architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderDescriptor {
    /// Three strided 3×3 convolutions, a 3×3 adaptive pool aligned with the
    /// tile grid, and a 64-unit fully connected layer.
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
    /// ResNet-18 layout (7×7 stem, four stages of two basic blocks) with
    /// 512 features.
    #[serde(rename = "residual-18")]
    Residual18,
}

impl EncoderDescriptor {
    pub fn name(self) -> &'static str {
        match self {
            Self::TinyCnn => "tiny-cnn",
            Self::Residual18 => "residual-18",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Self::TinyCnn => 64,
            Self::Residual18 => 512,
        }
    }
}

impl FromStr for EncoderDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Self::TinyCnn),
            "residual-18" => Ok(Self::Residual18),
            other => Err(Error::UnknownEncoder(other.to_string())),
        }
    }
}

impl fmt::Display for EncoderDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    #[default]
    Random,
    /// Copy encoder weights from an existing checkpoint file.
    Pretrained(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Supervised,
    Jigsaw,
}

/// Identifies the permutation set a jigsaw head was trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermsetRef {
    pub grid_size: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl From<&PermutationSet> for PermsetRef {
    fn from(set: &PermutationSet) -> Self {
        Self {
            grid_size: set.grid_size(),
            permutations: set.len(),
            seed: set.generation_seed(),
        }
    }
}

enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2d),
    AdaptivePool(AdaptiveAvgPool),
    Linear(Linear),
    Block(BasicBlock),
}

enum LayerCache {
    Conv(ConvCache),
    Relu(Tensor),
    MaxPool((usize, usize, usize), Vec<usize>),
    AdaptivePool((usize, usize, usize)),
    Linear(Vec<f64>),
    Block(BlockCache),
}

/// Activations recorded by a forward pass, consumed by backward.
pub struct Tape {
    caches: Vec<LayerCache>,
    features: Vec<f64>,
}

struct Encoder {
    layers: Vec<Layer>,
}

impl Encoder {
    fn build(descriptor: EncoderDescriptor, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let conv = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i, o, k, s, p| {
            Layer::Conv(Conv2d::new(
                store,
                &format!("encoder.{name}"),
                i,
                o,
                k,
                s,
                p,
                ConvInit::He,
                rng,
            ))
        };
        let mut layers = Vec::new();
        match descriptor {
            EncoderDescriptor::TinyCnn => {
                layers.push(conv(store, rng, "conv1", 3, 16, 3, 2, 1));
                layers.push(Layer::Relu);
                layers.push(conv(store, rng, "conv2", 16, 32, 3, 2, 1));
                layers.push(Layer::Relu);
                layers.push(conv(store, rng, "conv3", 32, 64, 3, 2, 1));
                layers.push(Layer::Relu);
                layers.push(Layer::AdaptivePool(AdaptiveAvgPool { out: 3 }));
                layers.push(Layer::Linear(Linear::new_hidden(
                    store,
                    "encoder.fc",
                    64 * 9,
                    64,
                    rng,
                )));
                layers.push(Layer::Relu);
            }
            EncoderDescriptor::Residual18 => {
                layers.push(conv(store, rng, "stem", 3, 64, 7, 2, 3));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool(MaxPool2d {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }));
                let mut in_ch = 64;
                for (stage, out_ch) in [64, 128, 256, 512].into_iter().enumerate() {
                    for block in 0..2 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        layers.push(Layer::Block(BasicBlock::new(
                            store,
                            &format!("encoder.layer{}.{block}", stage + 1),
                            in_ch,
                            out_ch,
                            stride,
                            rng,
                        )));
                        in_ch = out_ch;
                    }
                }
                layers.push(Layer::AdaptivePool(AdaptiveAvgPool { out: 1 }));
            }
        }
        Self { layers }
    }

    fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(params, &cur)?.0,
                Layer::Relu => nn::relu(&cur),
                Layer::MaxPool(p) => p.forward(&cur).0,
                Layer::AdaptivePool(p) => p.forward(&cur),
                Layer::Linear(l) => Tensor::vector(l.forward(params, &cur.data)?),
                Layer::Block(b) => b.forward(params, &cur)?.0,
            };
        }
        Ok(cur.data)
    }

    fn forward_taped(&self, params: &ParamStore, x: &Tensor) -> Result<Tape> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward(params, &cur)?;
                    (y, LayerCache::Conv(cache))
                }
                Layer::Relu => {
                    let y = nn::relu(&cur);
                    (y.clone(), LayerCache::Relu(y))
                }
                Layer::MaxPool(p) => {
                    let (y, arg) = p.forward(&cur);
                    (y, LayerCache::MaxPool(cur.shape(), arg))
                }
                Layer::AdaptivePool(p) => (p.forward(&cur), LayerCache::AdaptivePool(cur.shape())),
                Layer::Linear(l) => {
                    let y = Tensor::vector(l.forward(params, &cur.data)?);
                    (y, LayerCache::Linear(std::mem::take(&mut cur.data)))
                }
                Layer::Block(b) => {
                    let (y, cache) = b.forward(params, &cur)?;
                    (y, LayerCache::Block(cache))
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok(Tape {
            caches,
            features: cur.data,
        })
    }

    fn backward(&self, params: &ParamStore, tape: &Tape, dfeat: &[f64], grads: &mut Gradients) {
        let mut d = Tensor::vector(dfeat.to_vec());
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let need_input = i > 0;
            d = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cache)) => {
                    match c.backward(params, cache, &d, grads, need_input) {
                        Some(dx) => dx,
                        None => return,
                    }
                }
                (Layer::Relu, LayerCache::Relu(out)) => {
                    let dd = Tensor {
                        channels: out.channels,
                        height: out.height,
                        width: out.width,
                        data: d.data,
                    };
                    nn::relu_backward(out, &dd)
                }
                (Layer::MaxPool(_), LayerCache::MaxPool(shape, arg)) => {
                    MaxPool2d::backward(*shape, arg, &d)
                }
                (Layer::AdaptivePool(p), LayerCache::AdaptivePool(shape)) => {
                    let dd = Tensor::from_vec(shape.0, p.out, p.out, d.data).unwrap();
                    p.backward(*shape, &dd)
                }
                (Layer::Linear(l), LayerCache::Linear(input)) => {
                    match l.backward(params, input, &d.data, grads, need_input) {
                        Some(dx) => Tensor::vector(dx),
                        None => return,
                    }
                }
                (Layer::Block(b), LayerCache::Block(cache)) => b.backward(params, cache, &d, grads),
                _ => unreachable!("tape does not match encoder layout"),
            };
        }
    }
}

/// Encoder plus supervised head `F → 2` and (optionally) jigsaw head
/// `F → P + 1`.
pub struct DualHeadModel {
    descriptor: EncoderDescriptor,
    params: ParamStore,
    encoder: Encoder,
    supervised_head: Linear,
    jigsaw_head: Option<Linear>,
    permset: Option<PermsetRef>,
    encoder_ids: Vec<ParamId>,
}

impl fmt::Debug for DualHeadModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualHeadModel")
            .field("encoder", &self.descriptor)
            .field("jigsaw_classes", &self.jigsaw_classes())
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl Clone for DualHeadModel {
    fn clone(&self) -> Self {
        // Layers hold only ids, so rebuilding the layout and copying the
        // store yields an identical model.
        let mut rebuilt = build_layout(
            self.descriptor,
            self.jigsaw_head.as_ref().map(|h| h.out_features - 1),
            0,
        );
        rebuilt.params = self.params.clone();
        rebuilt.permset = self.permset;
        rebuilt
    }
}

fn build_layout(
    descriptor: EncoderDescriptor,
    jigsaw_permutations: Option<usize>,
    seed: u64,
) -> DualHeadModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::default();
    let encoder = Encoder::build(descriptor, &mut params, &mut rng);
    let encoder_ids = (0..params.len()).map(ParamId).collect();
    let f = descriptor.feature_dim();
    let supervised_head = Linear::new(&mut params, "supervised_head", f, NUM_CLASSES, &mut rng);
    let jigsaw_head = jigsaw_permutations
        .map(|p| Linear::new(&mut params, "jigsaw_head", f, p + 1, &mut rng));
    DualHeadModel {
        descriptor,
        params,
        encoder,
        supervised_head,
        jigsaw_head,
        permset: None,
        encoder_ids,
    }
}

/// Builds a model whose jigsaw head predicts `permutations + 1` classes
/// (label 0 is the unscrambled image).
pub fn build_model(
    descriptor: EncoderDescriptor,
    permutations: usize,
    init: &InitMode,
    seed: u64,
) -> Result<DualHeadModel> {
    if permutations == 0 {
        return Err(Error::InvalidArgument(
            "jigsaw head needs at least one permutation".into(),
        ));
    }
    let mut model = build_layout(descriptor, Some(permutations), seed);
    model.apply_init(init)?;
    Ok(model)
}

/// Same architecture without the jigsaw head. With equal seeds the encoder
/// and supervised head start from the same weights as [`build_model`].
pub fn build_baseline_model(
    descriptor: EncoderDescriptor,
    init: &InitMode,
    seed: u64,
) -> Result<DualHeadModel> {
    let mut model = build_layout(descriptor, None, seed);
    model.apply_init(init)?;
    Ok(model)
}

impl DualHeadModel {
    fn apply_init(&mut self, init: &InitMode) -> Result<()> {
        let InitMode::Pretrained(path) = init else {
            return Ok(());
        };
        let source = load_checkpoint(path)?;
        for &id in &self.encoder_ids {
            let name = self.params.get(id).name.clone();
            let src = source.params.find(&name).ok_or_else(|| {
                Error::Checkpoint(format!("{} lacks encoder parameter {name}", path.display()))
            })?;
            let src = source.params.get(src);
            if src.shape != self.params.get(id).shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} does not match {:?}",
                    src.shape,
                    self.params.get(id).shape
                )));
            }
            self.params.get_mut(id).data = src.data.clone();
        }
        Ok(())
    }

    pub fn descriptor(&self) -> EncoderDescriptor {
        self.descriptor
    }

    pub fn feature_dim(&self) -> usize {
        self.descriptor.feature_dim()
    }

    /// Width of the jigsaw head (`P + 1`), if present.
    pub fn jigsaw_classes(&self) -> Option<usize> {
        self.jigsaw_head.as_ref().map(|h| h.out_features)
    }

    pub fn has_jigsaw_head(&self) -> bool {
        self.jigsaw_head.is_some()
    }

    pub fn permset(&self) -> Option<PermsetRef> {
        self.permset
    }

    pub fn set_permset(&mut self, set: &PermutationSet) -> Result<()> {
        match self.jigsaw_classes() {
            Some(w) if w != set.num_labels() => Err(Error::Shape(format!(
                "jigsaw head has {w} outputs but the permutation set has {} labels",
                set.num_labels()
            ))),
            _ => {
                self.permset = Some(set.into());
                Ok(())
            }
        }
    }

    /// Drops the jigsaw head, leaving the inference graph.
    pub fn discard_jigsaw_head(&mut self) {
        if let Some(head) = self.jigsaw_head.take() {
            let mut kept = ParamStore::default();
            for (i, p) in self.params.iter().enumerate() {
                if i != head.weight.0 && i != head.bias.0 {
                    kept.add(p.name.clone(), p.shape.clone(), p.data.clone());
                }
            }
            self.params = kept;
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_param_ids(&self) -> &[ParamId] {
        &self.encoder_ids
    }

    pub fn head_param_ids(&self, head: Head) -> Result<[ParamId; 2]> {
        let h = self.head(head)?;
        Ok([h.weight, h.bias])
    }

    /// Parameters a phase may update: the encoder plus the given head.
    pub fn trainable_ids(&self, head: Head) -> Result<Vec<ParamId>> {
        let mut ids = self.encoder_ids.clone();
        ids.extend(self.head_param_ids(head)?);
        Ok(ids)
    }

    fn head(&self, head: Head) -> Result<&Linear> {
        match head {
            Head::Supervised => Ok(&self.supervised_head),
            Head::Jigsaw => self
                .jigsaw_head
                .as_ref()
                .ok_or_else(|| Error::Capability("model has no jigsaw head".into())),
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", x.channels)));
        }
        self.encoder.forward(&self.params, x)
    }

    pub fn head_logits(&self, head: Head, features: &[f64]) -> Result<Vec<f64>> {
        self.head(head)?.forward(&self.params, features)
    }

    fn forward_batch(&self, head: Head, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let h = self.head(head)?;
        batch
            .iter()
            .map(|x| h.forward(&self.params, &self.features(x)?))
            .collect()
    }

    /// Lesion logits, one row of width 2 per image.
    pub fn forward_supervised(&self, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.forward_batch(Head::Supervised, batch)
    }

    /// Permutation logits, one row of width `P + 1` per image.
    pub fn forward_jigsaw(&self, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.forward_batch(Head::Jigsaw, batch)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_taped(&self, head: Head, x: &Tensor) -> Result<(Vec<f64>, Tape)> {
        if x.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", x.channels)));
        }
        let tape = self.encoder.forward_taped(&self.params, x)?;
        let logits = self.head(head)?.forward(&self.params, &tape.features)?;
        Ok((logits, tape))
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`; only the
    /// encoder and the chosen head receive contributions.
    pub fn backward(
        &self,
        head: Head,
        tape: &Tape,
        dlogits: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let dfeat = self
            .head(head)?
            .backward(&self.params, &tape.features, dlogits, grads, true)
            .expect("input gradient requested");
        self.encoder.backward(&self.params, tape, &dfeat, grads);
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Serializes every parameter plus the encoder name and permutation-set
    /// reference into a keyed little-endian archive.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        let mut entries: Vec<(String, Entry)> = vec![
            ("meta.encoder".into(), Entry::Text(self.descriptor.name().into())),
            (
                "meta.jigsaw_classes".into(),
                Entry::Int(self.jigsaw_classes().unwrap_or(0) as u64),
            ),
        ];
        if let Some(p) = self.permset {
            entries.push(("meta.permset.grid".into(), Entry::Int(p.grid_size as u64)));
            entries.push(("meta.permset.P".into(), Entry::Int(p.permutations as u64)));
            entries.push(("meta.permset.seed".into(), Entry::Int(p.seed)));
        }
        for p in self.params.iter() {
            entries.push((
                format!("param.{}", p.name),
                Entry::Array(p.shape.clone(), p.data.clone()),
            ));
        }
        out.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
        for (key, entry) in &entries {
            write_str(&mut out, key);
            entry.write(&mut out);
        }
        out
    }
}

enum Entry {
    Text(String),
    Int(u64),
    Array(Vec<usize>, Vec<f64>),
}

impl Entry {
    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Entry::Text(s) => {
                out.push(0);
                write_str(out, s);
            }
            Entry::Int(v) => {
                out.push(1);
                out.write_u64::<LittleEndian>(*v).unwrap();
            }
            Entry::Array(shape, data) => {
                out.push(2);
                out.write_u32::<LittleEndian>(shape.len() as u32).unwrap();
                for &d in shape {
                    out.write_u64::<LittleEndian>(d as u64).unwrap();
                }
                for &v in data {
                    out.write_f64::<LittleEndian>(v).unwrap();
                }
            }
        }
    }

    fn read(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let tag = r.read_u8()?;
        Ok(match tag {
            0 => Entry::Text(read_str(r)?),
            1 => Entry::Int(r.read_u64::<LittleEndian>()?),
            2 => {
                let ndim = r.read_u32::<LittleEndian>()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                    .collect::<std::io::Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let mut data = vec![0.0; n];
                r.read_f64_into::<LittleEndian>(&mut data)?;
                Entry::Array(shape, data)
            }
            t => return Err(Error::Checkpoint(format!("unknown entry tag {t}"))),
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.write_all(s.as_bytes()).unwrap();
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DualHeadModel> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<DualHeadModel> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut encoder = None;
    let mut jigsaw_classes = 0u64;
    let (mut grid, mut perms, mut seed) = (None, None, None);
    let mut arrays = Vec::new();
    for _ in 0..count {
        let key = read_str(&mut r)?;
        match (key.as_str(), Entry::read(&mut r)?) {
            ("meta.encoder", Entry::Text(s)) => encoder = Some(s.parse::<EncoderDescriptor>()?),
            ("meta.jigsaw_classes", Entry::Int(v)) => jigsaw_classes = v,
            ("meta.permset.grid", Entry::Int(v)) => grid = Some(v as usize),
            ("meta.permset.P", Entry::Int(v)) => perms = Some(v as usize),
            ("meta.permset.seed", Entry::Int(v)) => seed = Some(v),
            (k, Entry::Array(shape, data)) if k.starts_with("param.") => {
                arrays.push((k["param.".len()..].to_string(), shape, data))
            }
            (k, _) => return Err(Error::Checkpoint(format!("unexpected entry `{k}`"))),
        }
    }
    let descriptor = encoder.ok_or_else(|| Error::Checkpoint("missing encoder name".into()))?;
    let jig = (jigsaw_classes > 0).then(|| jigsaw_classes as usize - 1);
    let mut model = build_layout(descriptor, jig, 0);
    if arrays.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            model.params.len(),
            arrays.len()
        )));
    }
    for (name, shape, data) in arrays {
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if model.params.get(id).shape != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?} is incompatible")));
        }
        model.params.get_mut(id).data = data;
    }
    if let (Some(grid_size), Some(permutations), Some(seed)) = (grid, perms, seed) {
        model.permset = Some(PermsetRef {
            grid_size,
            permutations,
            seed,
        });
    }
    Ok(model)
}
