//! Backbone plus session-expandable classifier head, and checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"FSCK" | version: u32 | meta_len: u64 | meta: JSON (config + meta)
//! | n_params: u32 | n_buffers: u32 | n_optimizer: u32 | tensors...
//! tensor := name_len: u32 | name | ndim: u32 | dims: u64 * ndim | f32 * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::nn::{gemm, Act, Architecture, Backbone, Grads, NamedTensor, ParamSet, Pass, Tape};
use crate::rng::rng_for;
use crate::util::write_atomic;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const NORM_EPS: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadKind {
    Linear {
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Cosine similarity between L2-normalized features and rows, times a
    /// learnable scale.
    Cosine {
        #[serde(default = "default_scale")]
        init_scale: f32,
    },
}

fn yes() -> bool {
    true
}

fn default_scale() -> f32 {
    16.0
}

impl HeadKind {
    pub const fn linear() -> Self {
        HeadKind::Linear { bias: true }
    }

    pub const fn cosine() -> Self {
        HeadKind::Cosine { init_scale: 16.0 }
    }

    pub fn is_cosine(&self) -> bool {
        matches!(self, HeadKind::Cosine { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub input: ImageShape,
    pub head: HeadKind,
}

/// Training provenance carried into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub protocol_hash: String,
    pub session_index: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Class id of each classifier row.
    pub classes: Vec<usize>,
}

/// Embeddings of a batch (`n x dim`, row-major), with labels when known.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.features.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// How new classifier rows are initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierInit {
    Zeros,
    Gaussian { seed: u64, std: f32 },
    /// One list of embeddings per new class; the row is their mean
    /// (L2-normalized for a cosine head).
    Prototypes(Vec<Vec<Vec<f32>>>),
}

/// Values kept by [`ModelState::forward_with`] for the head backward pass.
#[derive(Debug)]
pub struct HeadCache {
    features: Act,
    /// Cosine head only: feature norms, normalized features and rows.
    cosine: Option<CosineCache>,
}

#[derive(Debug)]
struct CosineCache {
    feat_norm: Vec<f32>,
    feat_hat: Vec<f32>,
    row_norm: Vec<f32>,
    rows_hat: Vec<f32>,
    cos: Vec<f32>,
    scale: f32,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Backbone tensors first, then `head.*`.
    pub params: ParamSet,
    /// Batch-normalization running statistics.
    pub buffers: ParamSet,
    pub meta: ModelMeta,
    backbone: Backbone,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.buffers == other.buffers
            && self.meta == other.meta
    }
}

impl ModelState {
    /// Fresh model with one classifier row per entry of `classes`.
    pub fn new(config: ModelConfig, classes: Vec<usize>, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(config.arch, config.input)?;
        let mut params = backbone.init_params(&mut rng_for(seed, "model/backbone"));
        let d = backbone.embedding_dim();
        let c = classes.len();
        let mut weight = NamedTensor::zeros("head.weight", vec![c, d]);
        let std = (1.0 / d as f32).sqrt();
        let mut rng = rng_for(seed, "model/head");
        for v in &mut weight.data {
            *v = std * rng.sample::<f32, _>(StandardNormal);
        }
        params.push(weight);
        match config.head {
            HeadKind::Linear { bias: true } => {
                params.push(NamedTensor::zeros("head.bias", vec![c]));
            }
            HeadKind::Linear { bias: false } => {}
            HeadKind::Cosine { init_scale } => {
                let mut s = NamedTensor::zeros("head.scale", vec![1]);
                s.data[0] = init_scale;
                params.push(s);
            }
        }
        let buffers = backbone.init_buffers();
        Ok(Self {
            config,
            params,
            buffers,
            meta: ModelMeta {
                seed,
                classes,
                ..ModelMeta::default()
            },
            backbone,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.classes.len()
    }

    fn head_weight_index(&self) -> usize {
        self.backbone.num_param_tensors()
    }

    fn head_extra_index(&self) -> Option<usize> {
        match self.config.head {
            HeadKind::Linear { bias: false } => None,
            _ => Some(self.head_weight_index() + 1),
        }
    }

    pub fn head_weight(&self) -> &[f32] {
        self.params.data(self.head_weight_index())
    }

    /// Index range of backbone tensors within `params`.
    pub fn backbone_param_range(&self) -> std::ops::Range<usize> {
        0..self.head_weight_index()
    }

    fn check_input(&self, images: &Act) -> Result<()> {
        let s = self.config.input;
        if (images.c, images.h, images.w) != (s.channels, s.height, s.width) {
            return Err(Error::Contract(format!(
                "input shape {}x{}x{} does not match model input {}x{}x{}",
                images.c, images.h, images.w, s.channels, s.height, s.width
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass: `(embeddings, logits n x classes)`.
    pub fn forward(&self, images: &Act) -> Result<(EmbeddingBatch, Act)> {
        self.check_input(images)?;
        let mut buffers = self.buffers.clone();
        let (features, logits, _, _) =
            self.forward_with(&self.params, &mut buffers, images.clone(), Pass::EVAL);
        Ok((
            EmbeddingBatch {
                dim: features.c,
                features: features.data,
                labels: Vec::new(),
            },
            logits,
        ))
    }

    /// Evaluation-mode embeddings only.
    pub fn embed(&self, images: &Act) -> Result<EmbeddingBatch> {
        self.check_input(images)?;
        let mut buffers = self.buffers.clone();
        let (features, _) = self
            .backbone
            .forward(&self.params, &mut buffers, images.clone(), Pass::EVAL);
        Ok(EmbeddingBatch {
            dim: features.c,
            features: features.data,
            labels: Vec::new(),
        })
    }

    /// Forward pass with explicit parameters and statistics, returning the
    /// features, logits and what a backward pass needs.
    pub fn forward_with(
        &self,
        params: &ParamSet,
        buffers: &mut ParamSet,
        images: Act,
        pass: Pass,
    ) -> (Act, Act, Option<Tape>, HeadCache) {
        let (features, tape) = self.backbone.forward(params, buffers, images, pass);
        let (logits, cache) = self.head_forward(params, features.clone());
        (features, logits, tape, cache)
    }

    fn head_forward(&self, params: &ParamSet, features: Act) -> (Act, HeadCache) {
        let (n, d) = (features.n, features.c);
        let c = self.num_classes();
        let w = params.data(self.head_weight_index());
        let mut logits = Act::zeros(n, c, 1, 1);
        match self.config.head {
            HeadKind::Linear { bias } => {
                if bias {
                    let b = params.data(self.head_extra_index().expect("bias tensor"));
                    for row in logits.data.chunks_mut(c.max(1)) {
                        row.copy_from_slice(b);
                    }
                }
                gemm(n, d, c, 1.0, &features.data, false, w, true, 1.0, &mut logits.data);
                (
                    logits,
                    HeadCache {
                        features,
                        cosine: None,
                    },
                )
            }
            HeadKind::Cosine { .. } => {
                let scale = params.data(self.head_extra_index().expect("scale tensor"))[0];
                let (feat_norm, feat_hat) = normalize_rows(&features.data, d);
                let (row_norm, rows_hat) = normalize_rows(w, d);
                let mut cos = vec![0.0; n * c];
                gemm(n, d, c, 1.0, &feat_hat, false, &rows_hat, true, 0.0, &mut cos);
                for (l, v) in logits.data.iter_mut().zip(&cos) {
                    *l = scale * v;
                }
                (
                    logits,
                    HeadCache {
                        features,
                        cosine: Some(CosineCache {
                            feat_norm,
                            feat_hat,
                            row_norm,
                            rows_hat,
                            cos,
                            scale,
                        }),
                    },
                )
            }
        }
    }

    /// Gradients of all parameters for the logit gradient `dlogits`.
    /// With `backbone_grads = false` only head gradients are filled.
    pub fn backward_with(
        &self,
        params: &ParamSet,
        tape: Option<&Tape>,
        cache: &HeadCache,
        dlogits: &Act,
        backbone_grads: bool,
    ) -> Grads {
        let mut grads = params.zero_grads();
        let dfeat = self.head_backward(params, cache, dlogits, &mut grads);
        if backbone_grads {
            let tape = tape.expect("backbone gradients need a recorded forward pass");
            self.backbone.backward(params, tape, dfeat, &mut grads);
        }
        grads
    }

    fn head_backward(
        &self,
        params: &ParamSet,
        cache: &HeadCache,
        dlogits: &Act,
        grads: &mut Grads,
    ) -> Act {
        let f = &cache.features;
        let (n, d) = (f.n, f.c);
        let c = self.num_classes();
        let wi = self.head_weight_index();
        let w = params.data(wi);
        let mut dfeat = Act::zeros(n, d, 1, 1);
        match &cache.cosine {
            None => {
                gemm(c, n, d, 1.0, &dlogits.data, true, &f.data, false, 1.0, &mut grads[wi]);
                if let Some(bi) = self.head_extra_index() {
                    for row in dlogits.data.chunks(c.max(1)) {
                        for (g, v) in grads[bi].iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                gemm(n, c, d, 1.0, &dlogits.data, false, w, false, 0.0, &mut dfeat.data);
            }
            Some(cc) => {
                let si = self.head_extra_index().expect("scale tensor");
                grads[si][0] += dlogits
                    .data
                    .iter()
                    .zip(&cc.cos)
                    .map(|(g, v)| g * v)
                    .sum::<f32>();
                let dcos: Vec<f32> = dlogits.data.iter().map(|g| g * cc.scale).collect();
                let mut dfeat_hat = vec![0.0; n * d];
                gemm(n, c, d, 1.0, &dcos, false, &cc.rows_hat, false, 0.0, &mut dfeat_hat);
                let mut drows_hat = vec![0.0; c * d];
                gemm(c, n, d, 1.0, &dcos, true, &cc.feat_hat, false, 0.0, &mut drows_hat);
                unnormalize_grad(&cc.feat_hat, &cc.feat_norm, &dfeat_hat, d, &mut dfeat.data);
                let mut dw = vec![0.0; c * d];
                unnormalize_grad(&cc.rows_hat, &cc.row_norm, &drows_hat, d, &mut dw);
                for (g, v) in grads[wi].iter_mut().zip(&dw) {
                    *g += v;
                }
            }
        }
        dfeat
    }

    /// Appends `new_classes.len()` classifier rows; existing rows are untouched.
    pub fn expand_classifier(&mut self, new_classes: &[usize], init: &ClassifierInit) -> Result<()> {
        let k = new_classes.len();
        if k == 0 {
            return Err(Error::Validation("classifier expansion by 0 classes".into()));
        }
        let d = self.embedding_dim();
        let mut rows = vec![0.0f32; k * d];
        match init {
            ClassifierInit::Zeros => {}
            ClassifierInit::Gaussian { seed, std } => {
                let mut rng = rng_for(*seed, "model/expand");
                for v in &mut rows {
                    *v = std * rng.sample::<f32, _>(StandardNormal);
                }
            }
            ClassifierInit::Prototypes(per_class) => {
                if per_class.len() != k {
                    return Err(Error::Contract(format!(
                        "prototype init needs embeddings for {k} classes, got {}",
                        per_class.len()
                    )));
                }
                for (j, embs) in per_class.iter().enumerate() {
                    if embs.is_empty() || embs.iter().any(|e| e.len() != d) {
                        return Err(Error::Contract(format!(
                            "missing or malformed embeddings for new class {}",
                            new_classes[j]
                        )));
                    }
                    let row = &mut rows[j * d..(j + 1) * d];
                    for e in embs {
                        for (r, v) in row.iter_mut().zip(e) {
                            *r += v;
                        }
                    }
                    for r in row.iter_mut() {
                        *r /= embs.len() as f32;
                    }
                    if self.config.head.is_cosine() {
                        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_EPS);
                        for r in row.iter_mut() {
                            *r /= norm;
                        }
                    }
                }
            }
        }
        let wi = self.head_weight_index();
        let w = &mut self.params.entries[wi];
        w.data.extend_from_slice(&rows);
        w.shape[0] += k;
        if let HeadKind::Linear { bias: true } = self.config.head {
            let b = &mut self.params.entries[wi + 1];
            b.data.extend(std::iter::repeat_n(0.0, k));
            b.shape[0] += k;
        }
        self.meta.classes.extend_from_slice(new_classes);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.all_finite() && self.buffers.all_finite()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save_checkpoint_with(path, None)
    }

    /// Checkpoint that also carries optimizer state (one tensor per parameter).
    pub fn save_checkpoint_with(&self, path: &Path, optimizer: Option<&ParamSet>) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a ModelConfig,
            meta: &'a ModelMeta,
        }
        let meta = serde_json::to_vec(&Header {
            config: &self.config,
            meta: &self.meta,
        })?;
        let mut buf = Vec::with_capacity(self.params.num_scalars() * 4 + meta.len() + 64);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        let extra: &[NamedTensor] = optimizer.map_or(&[], |o| &o.entries);
        buf.extend_from_slice(&(extra.len() as u32).to_le_bytes());
        for t in self.params.entries.iter().chain(&self.buffers.entries).chain(extra) {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(path, &buf)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Ok(Self::load_checkpoint_with(path)?.0)
    }

    /// Model plus the optimizer section (empty when none was saved).
    pub fn load_checkpoint_with(path: &Path) -> Result<(Self, ParamSet)> {
        #[derive(Deserialize)]
        struct Header {
            config: ModelConfig,
            meta: ModelMeta,
        }
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {version}, expected {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let meta_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let (n_params, n_buffers, n_extra) =
            (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut read_set = |count: usize| -> Result<ParamSet> {
            let mut set = ParamSet::default();
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let len: usize = shape.iter().product();
                let raw = r.take(len * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                set.push(NamedTensor { name, shape, data });
            }
            Ok(set)
        };
        let params = read_set(n_params)?;
        let buffers = read_set(n_buffers)?;
        let optimizer = read_set(n_extra)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let backbone = Backbone::new(header.config.arch, header.config.input)?;
        let fresh = backbone.init_buffers();
        if buffers.len() != fresh.len()
            || params.len() < backbone.num_param_tensors() + 1
            || buffers
                .entries
                .iter()
                .zip(&fresh.entries)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Checkpoint(
                "tensor layout does not match the recorded architecture".into(),
            ));
        }
        if !optimizer.is_empty()
            && (optimizer.len() != params.len()
                || optimizer
                    .entries
                    .iter()
                    .zip(&params.entries)
                    .any(|(o, p)| o.data.len() != p.data.len()))
        {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok((
            Self {
                config: header.config,
                params,
                buffers,
                meta: header.meta,
                backbone,
            },
            optimizer,
        ))
    }
}

fn normalize_rows(data: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let mut norms = Vec::with_capacity(data.len() / d.max(1));
    let mut hat = vec![0.0; data.len()];
    for (row, out) in data.chunks(d).zip(hat.chunks_mut(d)) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_EPS);
        for (o, v) in out.iter_mut().zip(row) {
            *o = v / norm;
        }
        norms.push(norm);
    }
    (norms, hat)
}

/// Gradient through `x -> x / |x|`: `(g - xhat (xhat . g)) / |x|`.
fn unnormalize_grad(hat: &[f32], norms: &[f32], g: &[f32], d: usize, out: &mut [f32]) {
    for (((h, gr), o), &norm) in hat
        .chunks(d)
        .zip(g.chunks(d))
        .zip(out.chunks_mut(d))
        .zip(norms)
    {
        let dot: f32 = h.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &hv), &gv) in o.iter_mut().zip(h).zip(gr) {
            *o = (gv - hv * dot) / norm;
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            arch: Architecture::res_mlp(8, 1),
            input: ImageShape::new(1, 2, 2),
            head,
        }
    }

    fn batch(n: usize, seed: u64) -> Act {
        let mut rng = rng_for(seed, "test/batch");
        Act::new(
            n,
            1,
            2,
            2,
            (0..n * 4).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        )
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = ModelState::new(mlp_config(HeadKind::linear()), vec![0, 1, 2], 1).unwrap();
        let wi = m.head_weight_index();
        m.params.entries[wi].data.fill(0.0);
        let (_, logits) = m.forward(&batch(4, 0)).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_linear_head() {
        let m = ModelState::new(
            ModelConfig {
                head: HeadKind::Linear { bias: false },
                ..mlp_config(HeadKind::linear())
            },
            vec![0, 1, 2],
            1,
        )
        .unwrap();
        let feats: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let w: Vec<f32> = (0..24).map(|i| ((i * 7) % 5) as f32 * 0.25 - 0.5).collect();
        let mut params = m.params.clone();
        let wi = m.head_weight_index();
        params.entries[wi].data = w.clone();
        let (logits, _) = m.head_forward(&params, Act::features(1, 8, feats.clone()));
        for c in 0..3 {
            let want: f32 = (0..8).map(|j| w[c * 8 + j] * feats[j]).sum();
            assert!((logits.data[c] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_invariance_in_eval() {
        let m = ModelState::new(mlp_config(HeadKind::linear()), vec![0, 1, 2], 4).unwrap();
        let b8 = batch(8, 2);
        let single = Act::new(1, 1, 2, 2, b8.row(5).to_vec());
        let (_, l8) = m.forward(&b8).unwrap();
        let (_, l1) = m.forward(&single).unwrap();
        for c in 0..3 {
            assert!((l8.data[5 * 3 + c] - l1.data[c]).abs() < 1e-5);
        }
        let (_, again) = m.forward(&b8).unwrap();
        assert_eq!(
            l8.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let m = ModelState::new(mlp_config(HeadKind::linear()), vec![0, 1], 0).unwrap();
        let bad = Act::zeros(1, 1, 3, 3);
        assert!(matches!(m.forward(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn expand_with_zeros_keeps_rows() {
        let mut m = ModelState::new(mlp_config(HeadKind::linear()), (0..6).collect(), 0).unwrap();
        let before = m.head_weight().to_vec();
        m.expand_classifier(&[6, 7], &ClassifierInit::Zeros).unwrap();
        let after = m.head_weight();
        assert_eq!(&after[..before.len()], &before[..]);
        assert!(after[before.len()..].iter().all(|&v| v == 0.0));
        assert_eq!(m.num_classes(), 8);
        assert_eq!(m.meta.classes, (0..8).collect::<Vec<_>>());
        let (_, logits) = m.forward(&batch(2, 1)).unwrap();
        assert_eq!(logits.c, 8);
    }

    #[test]
    fn expand_by_zero_is_rejected() {
        let mut m = ModelState::new(mlp_config(HeadKind::linear()), vec![0], 0).unwrap();
        assert!(matches!(
            m.expand_classifier(&[], &ClassifierInit::Zeros),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn prototype_rows_are_normalized_means() {
        let mut m = ModelState::new(mlp_config(HeadKind::cosine()), vec![0], 0).unwrap();
        let embs: Vec<Vec<f32>> = (0..5)
            .map(|k| (0..8).map(|j| ((k * 8 + j) as f32 * 0.37).cos()).collect())
            .collect();
        m.expand_classifier(&[1], &ClassifierInit::Prototypes(vec![embs.clone()]))
            .unwrap();
        let mean: Vec<f64> = (0..8)
            .map(|j| embs.iter().map(|e| e[j] as f64).sum::<f64>() / 5.0)
            .collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let row = &m.head_weight()[8..16];
        for j in 0..8 {
            assert!((row[j] as f64 - mean[j] / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn prototype_without_embeddings_is_contract_error() {
        let mut m = ModelState::new(mlp_config(HeadKind::cosine()), vec![0], 0).unwrap();
        assert!(matches!(
            m.expand_classifier(&[1], &ClassifierInit::Prototypes(vec![vec![]])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let mut m = ModelState::new(mlp_config(HeadKind::cosine()), vec![0, 1, 2], 3).unwrap();
        m.meta.epoch = 7;
        m.meta.protocol_hash = "abc".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = ModelState::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let x = batch(3, 9);
        assert_eq!(m.forward(&x).unwrap().1, back.forward(&x).unwrap().1);

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelState::load_checkpoint(&path), Err(Error::Checkpoint(_))));

        bytes[0] = b'F';
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelState::load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn optimizer_state_round_trip() {
        let m = ModelState::new(mlp_config(HeadKind::linear()), vec![0, 1], 4).unwrap();
        let mut opt = ParamSet::default();
        for t in &m.params.entries {
            let mut o = NamedTensor::zeros(format!("momentum.{}", t.name), t.shape.clone());
            o.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
            opt.push(o);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint_with(&path, Some(&opt)).unwrap();
        let (back, state) = ModelState::load_checkpoint_with(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(state, opt);
        m.save_checkpoint(&path).unwrap();
        assert!(ModelState::load_checkpoint_with(&path).unwrap().1.is_empty());
    }
}
