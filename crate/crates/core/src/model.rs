//! Transformer encoder producing the token feature map and the
//! cross-attention quality decoder producing a scalar score.
//!
//! The encoder is a pre-norm ViT: image patches are linearly embedded, a
//! learned class token is prepended, learned positional embeddings are
//! added, and each block applies `x + MHSA(LN(x))` then `x + MLP(LN(x))`.
//! A final layer norm yields the `(M+1)×D` feature map.
//!
//! The decoder holds learned queries that attend over all encoder tokens
//! (multi-head cross-attention), refines them with an MLP, averages the
//! queries and maps the result to a score with a linear head.

use std::collections::BTreeMap;

use qfm_tensor::rng::{stream, truncated_normal};
use qfm_tensor::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patch tokens M.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Rows of the feature map, M+1.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn feature_len(&self) -> usize {
        self.num_tokens() * self.embed_dim
    }

    fn hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub num_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 1,
            num_layers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.num_queries == 0 || self.decoder.num_layers == 0 {
            return Err(Error::Config(
                "decoder num_queries and num_layers must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn to_meta(self, meta: &mut BTreeMap<String, String>) {
        let e = self.encoder;
        for (k, v) in [
            ("image_size", e.image_size),
            ("patch_size", e.patch_size),
            ("channels", e.channels),
            ("embed_dim", e.embed_dim),
            ("num_layers", e.num_layers),
            ("num_heads", e.num_heads),
            ("mlp_ratio", e.mlp_ratio),
            ("decoder_queries", self.decoder.num_queries),
            ("decoder_layers", self.decoder.num_layers),
        ] {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad meta value for {k}")))
        };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_size: get("image_size")?,
                patch_size: get("patch_size")?,
                channels: get("channels")?,
                embed_dim: get("embed_dim")?,
                num_layers: get("num_layers")?,
                num_heads: get("num_heads")?,
                mlp_ratio: get("mlp_ratio")?,
            },
            decoder: DecoderConfig {
                num_queries: get("decoder_queries")?,
                num_layers: get("decoder_layers")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps raw decoder outputs to label units: `lo + (hi - lo) * raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub lo: f32,
    pub hi: f32,
}

impl Default for LabelScale {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

impl LabelScale {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("invalid label range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn normalize(&self, y: f32) -> f32 {
        (y - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, raw: f32) -> f32 {
        self.lo + (self.hi - self.lo) * raw
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }
}

/// Encoder output: `(M+1)×D` tokens, row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tokens: Tensor,
}

impl FeatureMap {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::Tensor(TensorError::Rank {
                op: "feature map",
                expected: 2,
                shape: tokens.shape().to_vec(),
            }));
        }
        Ok(Self {
            tokens: tokens.detached(),
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cls(&self) -> &[f32] {
        self.tokens.row(0)
    }

    /// Row-major concatenation, class token first.
    pub fn flatten(&self) -> Vec<f32> {
        self.tokens.data().to_vec()
    }

    pub fn unflatten(flat: &[f32], rows: usize, dim: usize) -> Result<Self> {
        Self::new(Tensor::new(vec![rows, dim], flat.to_vec())?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln_q: Norm,
    ln_kv: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    enc_norm: Norm,
    queries: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_norm: Norm,
    head: Linear,
}

/// Parameter shapes, in registration order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = &cfg.encoder;
    let d = e.embed_dim;
    let h = e.hidden();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| specs.push((name, shape));
    let linear = |add: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
        add(format!("{p}/w"), vec![i, o]);
        add(format!("{p}/b"), vec![o]);
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        add(format!("{p}/g"), vec![d]);
        add(format!("{p}/b"), vec![d]);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        for n in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}/{n}"), vec![d, d]);
            add(format!("{p}/{n}_b"), vec![d]);
        }
    };
    linear(&mut add, "encoder/patch", e.channels * e.patch_size * e.patch_size, d);
    add("encoder/cls".into(), vec![1, d]);
    add("encoder/pos".into(), vec![e.num_tokens(), d]);
    for i in 0..e.num_layers {
        let p = format!("encoder/block{i}");
        norm(&mut add, &format!("{p}/ln1"));
        attn(&mut add, &format!("{p}/attn"));
        norm(&mut add, &format!("{p}/ln2"));
        linear(&mut add, &format!("{p}/mlp/fc1"), d, h);
        linear(&mut add, &format!("{p}/mlp/fc2"), h, d);
    }
    norm(&mut add, "encoder/norm");
    add("decoder/queries".into(), vec![cfg.decoder.num_queries, d]);
    for i in 0..cfg.decoder.num_layers {
        let p = format!("decoder/block{i}");
        norm(&mut add, &format!("{p}/ln_q"));
        norm(&mut add, &format!("{p}/ln_kv"));
        attn(&mut add, &format!("{p}/attn"));
        norm(&mut add, &format!("{p}/ln2"));
        linear(&mut add, &format!("{p}/mlp/fc1"), d, h);
        linear(&mut add, &format!("{p}/mlp/fc2"), h, d);
    }
    norm(&mut add, "decoder/norm");
    linear(&mut add, "decoder/head", d, 1);
    specs
}

fn resolve(params: &ParamSet, cfg: &ModelConfig) -> Result<Layout> {
    for (name, shape) in param_specs(cfg) {
        match params.by_name(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    }
    if params.len() != param_specs(cfg).len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            param_specs(cfg).len()
        )));
    }
    let id = |n: &str| params.id(n).expect("checked above");
    let linear = |p: &str| Linear {
        w: id(&format!("{p}/w")),
        b: id(&format!("{p}/b")),
    };
    let norm = |p: &str| Norm {
        g: id(&format!("{p}/g")),
        b: id(&format!("{p}/b")),
    };
    let attn = |p: &str| {
        let l = |n: &str| Linear {
            w: id(&format!("{p}/{n}")),
            b: id(&format!("{p}/{n}_b")),
        };
        Attention {
            q: l("wq"),
            k: l("wk"),
            v: l("wv"),
            o: l("wo"),
        }
    };
    let blocks = (0..cfg.encoder.num_layers)
        .map(|i| {
            let p = format!("encoder/block{i}");
            EncoderBlock {
                ln1: norm(&format!("{p}/ln1")),
                attn: attn(&format!("{p}/attn")),
                ln2: norm(&format!("{p}/ln2")),
                mlp: Mlp {
                    fc1: linear(&format!("{p}/mlp/fc1")),
                    fc2: linear(&format!("{p}/mlp/fc2")),
                },
            }
        })
        .collect();
    let dec_blocks = (0..cfg.decoder.num_layers)
        .map(|i| {
            let p = format!("decoder/block{i}");
            DecoderBlock {
                ln_q: norm(&format!("{p}/ln_q")),
                ln_kv: norm(&format!("{p}/ln_kv")),
                attn: attn(&format!("{p}/attn")),
                ln2: norm(&format!("{p}/ln2")),
                mlp: Mlp {
                    fc1: linear(&format!("{p}/mlp/fc1")),
                    fc2: linear(&format!("{p}/mlp/fc2")),
                },
            }
        })
        .collect();
    Ok(Layout {
        patch: linear("encoder/patch"),
        cls: id("encoder/cls"),
        pos: id("encoder/pos"),
        blocks,
        enc_norm: norm("encoder/norm"),
        queries: id("decoder/queries"),
        dec_blocks,
        dec_norm: norm("decoder/norm"),
        head: linear("decoder/head"),
    })
}

/// Encoder + decoder parameters with their configuration.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    scale: LabelScale,
    params: ParamSet,
    layout: Layout,
}

/// Tape handles for every parameter of a model, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit norm gains.
    pub fn init(cfg: ModelConfig, scale: LabelScale, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "model-init");
        let mut params = ParamSet::new();
        for (name, shape) in param_specs(&cfg) {
            let leaf = name.rsplit('/').next().unwrap_or("");
            let parent = name.rsplit('/').nth(1).unwrap_or("");
            let is_norm = parent.starts_with("ln") || parent == "norm";
            let t = if is_norm && leaf == "g" {
                Tensor::ones(&shape)
            } else if leaf == "b" || leaf.ends_with("_b") {
                Tensor::zeros(&shape)
            } else {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t)?;
        }
        Self::from_params(cfg, scale, params)
    }

    pub fn from_params(cfg: ModelConfig, scale: LabelScale, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let layout = resolve(&params, &cfg)?;
        Ok(Self {
            cfg,
            scale,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn label_scale(&self) -> LabelScale {
        self.scale
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Closed-form parameter count for a configuration.
    pub fn param_count(cfg: &ModelConfig) -> usize {
        param_specs(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Registers every parameter on the tape.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        let vars = self.params.iter().map(|(_, t)| tape.param(t)).collect();
        Bound { vars }
    }

    fn linear(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, l: Linear) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let y = tape.matmul(x, b.var(l.w))?;
        let bias = tape.repeat_rows(b.var(l.b), rows)?;
        Ok(tape.add(y, bias)?)
    }

    fn norm(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layernorm(x, b.var(n.g), b.var(n.b), LN_EPS)?)
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        q_in: Var,
        kv_in: Var,
        a: Attention,
    ) -> Result<Var> {
        let d = self.cfg.encoder.embed_dim;
        let heads = self.cfg.encoder.num_heads;
        let dh = d / heads;
        let q = self.linear(tape, b, q_in, a.q)?;
        let k = self.linear(tape, b, kv_in, a.k)?;
        let v = self.linear(tape, b, kv_in, a.v)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax(s, 1)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.linear(tape, b, cat, a.o)
    }

    fn mlp(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear(tape, b, x, m.fc1)?;
        let h = tape.gelu(h)?;
        self.linear(tape, b, h, m.fc2)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let e = &self.cfg.encoder;
        let want = [e.channels, e.image_size, e.image_size];
        if shape != want {
            return Err(Error::ImageShape {
                expected: want.to_vec(),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Token embeddings before the first block: class token and patch
    /// projections, plus positional embeddings. Pixels in `[0, 1]` are
    /// mapped to `[-1, 1]` first.
    pub fn embed(&self, tape: &mut Tape<'_>, b: &Bound, image: Var) -> Result<Var> {
        self.check_image(tape.shape(image))?;
        let shift = vec![-1.0; tape.value(image).len()];
        let image = tape.affine(image, 2.0, &shift)?;
        let patches = tape.patchify(image, self.cfg.encoder.patch_size)?;
        let emb = self.linear(tape, b, patches, self.layout.patch)?;
        let tokens = tape.concat_rows(&[b.var(self.layout.cls), emb])?;
        Ok(tape.add(tokens, b.var(self.layout.pos))?)
    }

    /// Image `C×H×W` to the `(M+1)×D` feature map.
    pub fn encode(&self, tape: &mut Tape<'_>, b: &Bound, image: Var) -> Result<Var> {
        let mut x = self.embed(tape, b, image)?;
        for blk in &self.layout.blocks {
            let h = self.norm(tape, b, x, blk.ln1)?;
            let a = self.attention(tape, b, h, h, blk.attn)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, b, x, blk.ln2)?;
            let m = self.mlp(tape, b, h, blk.mlp)?;
            x = tape.add(x, m)?;
        }
        self.norm(tape, b, x, self.layout.enc_norm)
    }

    /// Feature map to a single-element score (raw, normalized label units).
    pub fn decode(&self, tape: &mut Tape<'_>, b: &Bound, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        let d = self.cfg.encoder.embed_dim;
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "decode",
                lhs: shape.to_vec(),
                rhs: vec![0, d],
            }));
        }
        let mut q = b.var(self.layout.queries);
        for blk in &self.layout.dec_blocks {
            let qn = self.norm(tape, b, q, blk.ln_q)?;
            let kv = self.norm(tape, b, features, blk.ln_kv)?;
            let a = self.attention(tape, b, qn, kv, blk.attn)?;
            q = tape.add(q, a)?;
            let h = self.norm(tape, b, q, blk.ln2)?;
            let m = self.mlp(tape, b, h, blk.mlp)?;
            q = tape.add(q, m)?;
        }
        let pooled = if self.cfg.decoder.num_queries > 1 {
            tape.mean_rows(q)?
        } else {
            q
        };
        let pooled = self.norm(tape, b, pooled, self.layout.dec_norm)?;
        let out = self.linear(tape, b, pooled, self.layout.head)?;
        Ok(tape.reshape(out, vec![1])?)
    }

    /// Inference-only encoding.
    pub fn encode_image(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant_ref(image);
        let f = self.encode(&mut tape, &b, x)?;
        FeatureMap::new(tape.to_tensor(f))
    }

    /// Inference-only decoding, raw units.
    pub fn decode_features(&self, f: &FeatureMap) -> Result<f32> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant_ref(f.tokens());
        let y = self.decode(&mut tape, &b, x)?;
        Ok(tape.value(y)[0])
    }

    /// Raw (normalized-unit) prediction: encoder then decoder, nothing else.
    pub fn predict_raw(&self, image: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant_ref(image);
        let f = self.encode(&mut tape, &b, x)?;
        let y = self.decode(&mut tape, &b, f)?;
        Ok(tape.value(y)[0])
    }

    /// Prediction in label units.
    pub fn predict(&self, image: &Tensor) -> Result<f32> {
        Ok(self.scale.denormalize(self.predict_raw(image)?))
    }

    pub fn to_checkpoint_bytes(&self, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let mut meta = extra.clone();
        self.cfg.to_meta(&mut meta);
        meta.insert("label_lo".into(), self.scale.lo.to_string());
        meta.insert("label_hi".into(), self.scale.hi.to_string());
        Ok(qfm_tensor::checkpoint::encode(&self.params, &meta)?)
    }

    /// Decodes a checkpoint, returning the model and its metadata.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = qfm_tensor::checkpoint::decode(bytes)?;
        let cfg = ModelConfig::from_meta(&ck.meta)?;
        let parse = |k: &str| -> Result<f32> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or bad meta key {k}")))
        };
        let scale = LabelScale::new(parse("label_lo")?, parse("label_hi")?)?;
        let model = Self::from_params(cfg, scale, ck.params)?;
        Ok((model, ck.meta))
    }

    pub fn save(&self, path: &std::path::Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(extra)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                patch_size: 4,
                channels: 1,
                embed_dim: 8,
                num_layers: 1,
                num_heads: 2,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig::default(),
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        use rand::Rng;
        let e = cfg.encoder;
        let mut r = stream(seed, "img");
        let n = e.channels * e.image_size * e.image_size;
        Tensor::new(
            vec![e.channels, e.image_size, e.image_size],
            (0..n).map(|_| r.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_shape_is_17_by_64() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg, LabelScale::default(), 0).unwrap();
        let f = m.encode_image(&image(&cfg, 1)).unwrap();
        assert_eq!((f.rows(), f.dim()), (17, 64));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.encoder.patch_size = 3;
        assert!(Model::init(cfg, LabelScale::default(), 0).is_err());
        let mut cfg = tiny();
        cfg.encoder.num_heads = 3;
        assert!(Model::init(cfg, LabelScale::default(), 0).is_err());
        let mut cfg = tiny();
        cfg.decoder.num_queries = 0;
        assert!(Model::init(cfg, LabelScale::default(), 0).is_err());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = Model::init(tiny(), LabelScale::default(), 0).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 16, 16])).unwrap_err();
        assert!(matches!(err, Error::ImageShape { .. }));
    }

    #[test]
    fn zero_image_with_zero_patch_projection_gives_cls_and_pos() {
        let cfg = tiny();
        let mut m = Model::init(cfg, LabelScale::default(), 3).unwrap();
        m.params_mut()
            .by_name_mut("encoder/patch/w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8]));
        let e = m.embed(&mut tape, &b, x).unwrap();
        let got = tape.to_tensor(e);
        let pos = m.params().by_name("encoder/pos").unwrap();
        let cls = m.params().by_name("encoder/cls").unwrap();
        for j in 0..8 {
            assert_eq!(got.row(0)[j], pos.row(0)[j] + cls.data()[j]);
        }
        for r in 1..5 {
            assert_eq!(got.row(r), pos.row(r));
        }
    }

    #[test]
    fn positional_embeddings_break_patch_permutation_symmetry() {
        let cfg = tiny();
        let m = Model::init(cfg, LabelScale::default(), 5).unwrap();
        let img = image(&cfg, 9);
        // swap the top-left and bottom-right 4x4 patches
        let mut swapped = img.clone();
        let d = swapped.data_mut();
        for y in 0..4 {
            for x in 0..4 {
                d.swap(y * 8 + x, (y + 4) * 8 + x + 4);
            }
        }
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&swapped).unwrap();
        assert_ne!(a.cls(), b.cls());
    }

    #[test]
    fn decode_is_deterministic_and_zero_decoder_gives_head_bias() {
        let cfg = tiny();
        let mut m = Model::init(cfg, LabelScale::default(), 2).unwrap();
        let f = m.encode_image(&image(&cfg, 4)).unwrap();
        let s1 = m.decode_features(&f).unwrap();
        let s2 = m.decode_features(&f).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());

        let names: Vec<String> = m
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("decoder/"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            m.params_mut().by_name_mut(&n).unwrap().data_mut().fill(0.0);
        }
        m.params_mut()
            .by_name_mut("decoder/head/b")
            .unwrap()
            .data_mut()[0] = 0.37;
        assert_eq!(m.decode_features(&f).unwrap(), 0.37);
    }

    #[test]
    fn flatten_unflatten() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let f = FeatureMap::new(t).unwrap();
        assert_eq!(f.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(FeatureMap::unflatten(&f.flatten(), 2, 3).unwrap(), f);
    }

    #[test]
    fn param_count_closed_form() {
        for (layers, heads, nq, dl) in [(1, 1, 1, 1), (2, 4, 1, 1), (3, 2, 3, 2)] {
            let mut cfg = ModelConfig::default();
            cfg.encoder.num_layers = layers;
            cfg.encoder.num_heads = heads;
            cfg.decoder.num_queries = nq;
            cfg.decoder.num_layers = dl;
            let e = cfg.encoder;
            let (d, h) = (e.embed_dim, e.embed_dim * e.mlp_ratio);
            let p2c = e.channels * e.patch_size * e.patch_size;
            let attn = 4 * d * d + 4 * d;
            let mlp = d * h + h + h * d + d;
            let enc = p2c * d + d + d + e.num_tokens() * d + layers * (4 * d + attn + mlp) + 2 * d;
            let dec = nq * d + dl * (6 * d + attn + mlp) + 2 * d + d + 1;
            let m = Model::init(cfg, LabelScale::default(), 0).unwrap();
            assert_eq!(Model::param_count(&cfg), enc + dec);
            assert_eq!(m.params().numel(), enc + dec);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let m = Model::init(cfg, LabelScale::new(0.0, 100.0).unwrap(), 8).unwrap();
        let bytes = m.to_checkpoint_bytes(&BTreeMap::new()).unwrap();
        let (back, meta) = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert!(back.params().bit_eq(m.params()));
        assert_eq!(back.config(), m.config());
        assert_eq!(back.label_scale(), m.label_scale());
        assert_eq!(meta["embed_dim"], "8");
        assert_eq!(back.to_checkpoint_bytes(&BTreeMap::new()).unwrap(), bytes);
    }
}
