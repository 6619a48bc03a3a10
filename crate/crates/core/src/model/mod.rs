//! Two-decoder transformer detector.
//!
//! A strided convolutional stem turns the raster into a token grid, a shared
//! encoder mixes the tokens, and two parallel decoders read the encoded
//! features: one with localization queries, one with interaction queries.
//! Localization query `i` and interaction query `i` together form prediction
//! slot `i`.
//!
//! Every forward function takes the tape and the parameter handles produced
//! by [`ParamStore::bind`], so the same code serves training (parameters as
//! leaves) and inference (parameters as constants).

mod checkpoint;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, NamedTensor};
pub use params::{BoundParams, Param, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{offsets_to_box, BBox, BoxOffsets, GaussianBox, Point};
use crate::scenegen::Raster;
use crate::tensor::{ConvGeom, DiffArray, Tape, TensorError, Var};
use params::Init;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of the background entry in the human confidence branch.
pub const HUMAN_BACKGROUND: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected a {expected}x{expected}x3 raster, got size {got}")]
    BadImage { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of every stem convolution except the last, which
    /// emits `d_model`. Each convolution halves the resolution.
    pub stem_channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_object_classes: usize,
    pub num_verbs: usize,
    pub dropout_rate: f64,
    pub ffn_head_depth: usize,
    pub additional_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: vec![16, 32],
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 8,
            num_object_classes: crate::scenegen::NUM_OBJECT_CLASSES,
            num_verbs: crate::scenegen::NUM_VERBS,
            dropout_rate: 0.5,
            ffn_head_depth: 1,
            additional_classifier: false,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for end-to-end gradient checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 8,
            stem_channels: vec![4],
            d_model: 8,
            n_heads: 2,
            ffn_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model % 4 != 0 {
            return bad("d_model must be divisible by 4 for the 2-D positional code");
        }
        let down = 1usize << (self.stem_channels.len() + 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return bad("image_size must be divisible by 2^(number of stem convolutions)");
        }
        if self.stem_channels.contains(&0) || self.ffn_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.num_queries == 0 || self.num_object_classes == 0 || self.num_verbs == 0 {
            return bad("query and class counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(1..=2).contains(&self.ffn_head_depth) {
            return bad("ffn_head_depth must be 1 or 2");
        }
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid_size(&self) -> usize {
        self.image_size >> (self.stem_channels.len() + 1)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }
}

/// One slot's decoded detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiPrediction {
    pub human_box: BBox,
    pub object_box: BBox,
    /// `[human, background]`.
    pub human_probs: Vec<f64>,
    /// Object classes followed by background.
    pub object_probs: Vec<f64>,
    /// Verbs followed by "no interaction".
    pub verb_probs: Vec<f64>,
    pub human_center: Point,
    pub object_center: Point,
    pub box_gauss_h: GaussianBox,
    pub box_gauss_o: GaussianBox,
    pub inter_var: f64,
}

/// Stem output as a `[tokens, d_model]` array (row-major over the grid).
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tokens: Var,
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Var,
    /// Attention probabilities, one `[tokens, tokens]` array per layer and head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[num_queries, d_model]`.
    pub emb: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

/// Tape handles of one box branch.
#[derive(Clone, Copy, Debug)]
pub struct BoxHead {
    /// Reference point `[Q, 2]` in the unit square.
    pub center: Var,
    /// Offset means `[Q, 4]` ordered `l, r, t, b`.
    pub mu: Var,
    /// Offset variances `[Q, 4]`.
    pub var: Var,
    /// Corners `[Q, 4]` decoded from `center` and `mu` (not clamped).
    pub corners: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub human_logits: Var,
    pub object_logits: Var,
    pub verb_logits: Var,
    pub human: BoxHead,
    pub object: BoxHead,
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Debug)]
struct EncLayer {
    attn: Attn,
    ln1: Norm,
    ff1: Lin,
    ff2: Lin,
    ln2: Norm,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: Attn,
    ln1: Norm,
    cross: Attn,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
    ln3: Norm,
}

#[derive(Clone, Debug)]
struct Decoder {
    queries: usize,
    layers: Vec<DecLayer>,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    hidden: Lin,
    out: Lin,
}

#[derive(Clone, Debug)]
struct VerbHead {
    ffn: Vec<Lin>,
    out: Lin,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Vec<Lin>,
    encoder: Vec<EncLayer>,
    loc: Decoder,
    inter: Decoder,
    human_cls: Mlp,
    object_cls: Mlp,
    human_box: Mlp,
    human_var: Mlp,
    object_box: Mlp,
    object_var: Mlp,
    verb: VerbHead,
    aux_verb: Option<VerbHead>,
}

/// Initial raw offset bias: `softplus(-2.5) ≈ 0.079`.
const OFFSET_BIAS: f64 = -2.5;
/// Initial raw variance bias: `softplus(-3) ≈ 0.049`.
const VAR_BIAS: f64 = -3.0;

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        self.lin_with_bias(name, fan_in, fan_out, 0.0)
    }

    fn lin_with_bias(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Lin {
        let w = self.store.add(
            self.rng,
            format!("{name}.w"),
            &[fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        );
        let b = self.store.add(self.rng, format!("{name}.b"), &[fan_out], Init::Const(bias));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.store.add(self.rng, format!("{name}.g"), &[d], Init::Const(1.0));
        let b = self.store.add(self.rng, format!("{name}.b"), &[d], Init::Const(0.0));
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, out: usize, bias: &[f64]) -> Mlp {
        let hidden = self.lin(&format!("{name}.0"), d, d);
        let o = self.lin(&format!("{name}.1"), d, out);
        if !bias.is_empty() {
            self.store.by_index_mut(o.b).data.copy_from_slice(bias);
        }
        Mlp { hidden, out: o }
    }

    fn decoder(&mut self, name: &str, cfg: &ModelConfig) -> Decoder {
        let d = cfg.d_model;
        let queries = self.store.add(
            self.rng,
            format!("{name}.queries"),
            &[cfg.num_queries, d],
            Init::UnitUniform,
        );
        let layers = (0..cfg.decoder_layers)
            .map(|l| DecLayer {
                self_attn: self.attn(&format!("{name}.{l}.self"), d),
                ln1: self.norm(&format!("{name}.{l}.ln1"), d),
                cross: self.attn(&format!("{name}.{l}.cross"), d),
                ln2: self.norm(&format!("{name}.{l}.ln2"), d),
                ff1: self.lin(&format!("{name}.{l}.ff1"), d, cfg.ffn_dim),
                ff2: self.lin(&format!("{name}.{l}.ff2"), cfg.ffn_dim, d),
                ln3: self.norm(&format!("{name}.{l}.ln3"), d),
            })
            .collect();
        Decoder { queries, layers }
    }

    fn verb_head(&mut self, name: &str, cfg: &ModelConfig) -> VerbHead {
        let d = cfg.d_model;
        let ffn = (0..cfg.ffn_head_depth)
            .map(|i| self.lin(&format!("{name}.ffn{i}"), d, d))
            .collect();
        let out = self.lin(&format!("{name}.out"), d, cfg.num_verbs + 1);
        VerbHead { ffn, out }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::default(),
        rng: &mut rng,
    };
    let d = cfg.d_model;

    let mut stem = Vec::new();
    let mut c_in = 3;
    for (i, &c_out) in cfg.stem_channels.iter().chain(std::iter::once(&d)).enumerate() {
        stem.push(b.lin(&format!("stem.conv{i}"), 9 * c_in, c_out));
        c_in = c_out;
    }

    let encoder = (0..cfg.encoder_layers)
        .map(|l| EncLayer {
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            ff1: b.lin(&format!("enc.{l}.ff1"), d, cfg.ffn_dim),
            ff2: b.lin(&format!("enc.{l}.ff2"), cfg.ffn_dim, d),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
        })
        .collect();

    let loc = b.decoder("loc", cfg);
    let inter = b.decoder("inter", cfg);

    let box_bias = [0.0, 0.0, OFFSET_BIAS, OFFSET_BIAS, OFFSET_BIAS, OFFSET_BIAS];
    let layout = Layout {
        stem,
        encoder,
        loc,
        inter,
        human_cls: b.mlp("head.human_cls", d, 2, &[]),
        object_cls: b.mlp("head.object_cls", d, cfg.num_object_classes + 1, &[]),
        human_box: b.mlp("head.human_box", d, 6, &box_bias),
        human_var: b.mlp("head.human_var", d, 4, &[VAR_BIAS; 4]),
        object_box: b.mlp("head.object_box", d, 6, &box_bias),
        object_var: b.mlp("head.object_var", d, 4, &[VAR_BIAS; 4]),
        verb: b.verb_head("head.verb", cfg),
        aux_verb: cfg.additional_classifier.then(|| b.verb_head("head.verb_aux", cfg)),
    };
    (b.store, layout)
}

/// Fixed 2-D sinusoidal code `[grid², d]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding(grid: usize, d: usize) -> DiffArray {
    let half = d / 2;
    let mut data = Vec::with_capacity(grid * grid * d);
    let code = |pos: usize, k: usize| {
        let x = (pos as f64 + 0.5) / grid as f64 * std::f64::consts::TAU;
        let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
        if k % 2 == 0 {
            (x / freq).sin()
        } else {
            (x / freq).cos()
        }
    };
    for y in 0..grid {
        for x in 0..grid {
            data.extend((0..half).map(|k| code(y, k)));
            data.extend((0..d - half).map(|k| code(x, k)));
        }
    }
    DiffArray::new(vec![grid * grid, d], data).expect("positive extents")
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
    pos: DiffArray,
}

impl Model {
    /// Freshly initialized weights; deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (params, layout) = build(&cfg, seed);
        let pos = positional_encoding(cfg.grid_size(), cfg.d_model);
        Ok(Self {
            cfg,
            params,
            layout,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    pub fn positional(&self) -> &DiffArray {
        &self.pos
    }

    /// Places a raster on the tape as a constant `[S, S, 3]` array.
    pub fn image(&self, tape: &mut Tape, raster: &Raster) -> Result<Var, ModelError> {
        let s = self.cfg.image_size;
        if raster.size != s || raster.data.len() != s * s * 3 {
            return Err(ModelError::BadImage {
                expected: s,
                got: raster.size,
            });
        }
        Ok(tape.constant(DiffArray::new(vec![s, s, 3], raster.data.clone())?))
    }

    /// Stride-2 3×3 convolutions with ReLU between them.
    pub fn stem(&self, t: &mut Tape, p: &BoundParams, image: Var) -> Result<FeatureMap, ModelError> {
        let s = self.cfg.image_size;
        if t.shape(image) != [s, s, 3] {
            return Err(TensorError::BadShape(t.shape(image).to_vec()).into());
        }
        let mut x = image;
        let (mut side, mut channels) = (s, 3);
        let last = self.layout.stem.len() - 1;
        for (i, conv) in self.layout.stem.iter().enumerate() {
            let geom = ConvGeom {
                height: side,
                width: side,
                channels,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let cols = t.im2col(x, geom)?;
            let y = t.linear(cols, p.vars[conv.w], p.vars[conv.b])?;
            side = geom.output_hw().0;
            channels = t.shape(y)[1];
            x = if i < last {
                let y = t.relu(y);
                t.reshape(y, &[side, side, channels])?
            } else {
                y
            };
        }
        Ok(FeatureMap { tokens: x, grid: side })
    }

    fn linear(&self, t: &mut Tape, p: &BoundParams, x: Var, l: Lin) -> Result<Var, TensorError> {
        t.linear(x, p.vars[l.w], p.vars[l.b])
    }

    fn norm(&self, t: &mut Tape, p: &BoundParams, x: Var, n: Norm) -> Result<Var, TensorError> {
        t.layer_norm(x, p.vars[n.g], p.vars[n.b], LAYER_NORM_EPS)
    }

    /// Multi-head attention; returns the output and per-head probabilities.
    fn attention(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        a: Attn,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let q = self.linear(t, p, query, a.q)?;
        let k = self.linear(t, p, key, a.k)?;
        let v = self.linear(t, p, value, a.v)?;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (t.slice(q, 1, lo, hi)?, t.slice(k, 1, lo, hi)?, t.slice(v, 1, lo, hi)?)
            };
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale);
            let w = t.softmax(scores, 1)?;
            outs.push(t.matmul(w, vh)?);
            probs.push(w);
        }
        let cat = if heads == 1 { outs[0] } else { t.concat(&outs, 1)? };
        Ok((self.linear(t, p, cat, a.o)?, probs))
    }

    fn ffn(&self, t: &mut Tape, p: &BoundParams, x: Var, l1: Lin, l2: Lin) -> Result<Var, TensorError> {
        let h = self.linear(t, p, x, l1)?;
        let h = t.relu(h);
        self.linear(t, p, h, l2)
    }

    /// Post-norm encoder over `tokens + pos`.
    pub fn encode(&self, t: &mut Tape, p: &BoundParams, f: &FeatureMap, pos: Var) -> Result<Encoded, ModelError> {
        let mut x = t.add(f.tokens, pos)?;
        let mut attention = Vec::new();
        for layer in &self.layout.encoder {
            let (a, w) = self.attention(t, p, layer.attn, x, x, x)?;
            attention.extend(w);
            let r = t.add(x, a)?;
            x = self.norm(t, p, r, layer.ln1)?;
            let f = self.ffn(t, p, x, layer.ff1, layer.ff2)?;
            let r = t.add(x, f)?;
            x = self.norm(t, p, r, layer.ln2)?;
        }
        Ok(Encoded { tokens: x, attention })
    }

    fn decode(&self, t: &mut Tape, p: &BoundParams, dec: &Decoder, memory: Var) -> Result<Decoded, ModelError> {
        let mut x = p.vars[dec.queries];
        let mut out = Decoded {
            emb: x,
            self_attention: Vec::new(),
            cross_attention: Vec::new(),
        };
        for layer in &dec.layers {
            let (a, w) = self.attention(t, p, layer.self_attn, x, x, x)?;
            out.self_attention.extend(w);
            let r = t.add(x, a)?;
            x = self.norm(t, p, r, layer.ln1)?;
            let (a, w) = self.attention(t, p, layer.cross, x, memory, memory)?;
            out.cross_attention.extend(w);
            let r = t.add(x, a)?;
            x = self.norm(t, p, r, layer.ln2)?;
            let f = self.ffn(t, p, x, layer.ff1, layer.ff2)?;
            let r = t.add(x, f)?;
            x = self.norm(t, p, r, layer.ln3)?;
        }
        out.emb = x;
        Ok(out)
    }

    /// Localization decoder over the encoded tokens.
    pub fn decode_loc(&self, t: &mut Tape, p: &BoundParams, memory: &Encoded) -> Result<Decoded, ModelError> {
        self.decode(t, p, &self.layout.loc, memory.tokens)
    }

    /// Interaction decoder over the encoded tokens.
    pub fn decode_inter(&self, t: &mut Tape, p: &BoundParams, memory: &Encoded) -> Result<Decoded, ModelError> {
        self.decode(t, p, &self.layout.inter, memory.tokens)
    }

    /// Stem, encoder and both decoders; returns `(loc_emb, inter_emb)`.
    pub fn trunk(&self, t: &mut Tape, p: &BoundParams, raster: &Raster) -> Result<(Var, Var), ModelError> {
        let image = self.image(t, raster)?;
        let f = self.stem(t, p, image)?;
        let pos = t.constant(self.pos.clone());
        let enc = self.encode(t, p, &f, pos)?;
        let loc = self.decode_loc(t, p, &enc)?;
        let inter = self.decode_inter(t, p, &enc)?;
        Ok((loc.emb, inter.emb))
    }

    fn mlp(&self, t: &mut Tape, p: &BoundParams, x: Var, m: Mlp) -> Result<Var, TensorError> {
        self.ffn(t, p, x, m.hidden, m.out)
    }

    fn verb_stack(&self, t: &mut Tape, p: &BoundParams, head: &VerbHead, x: Var, dropout: bool) -> Result<Var, TensorError> {
        let mut h = x;
        for l in &head.ffn {
            let z = self.linear(t, p, h, *l)?;
            let z = t.relu(z);
            h = t.dropout(z, self.cfg.dropout_rate, dropout)?;
        }
        self.linear(t, p, h, head.out)
    }

    /// Verb logits `[Q, num_verbs + 1]`, with dropout after every FFN layer when active.
    pub fn verb_logits(&self, t: &mut Tape, p: &BoundParams, inter_emb: Var, dropout_active: bool) -> Result<Var, ModelError> {
        Ok(self.verb_stack(t, p, &self.layout.verb, inter_emb, dropout_active)?)
    }

    /// Logits of the additional verb classifier, if configured.
    pub fn aux_verb_logits(&self, t: &mut Tape, p: &BoundParams, inter_emb: Var) -> Result<Option<Var>, ModelError> {
        match &self.layout.aux_verb {
            Some(head) => Ok(Some(self.verb_stack(t, p, head, inter_emb, false)?)),
            None => Ok(None),
        }
    }

    fn box_head(&self, t: &mut Tape, p: &BoundParams, emb: Var, mean: Mlp, var: Mlp) -> Result<BoxHead, TensorError> {
        let raw = self.mlp(t, p, emb, mean)?;
        let c = t.slice(raw, 1, 0, 2)?;
        let center = t.sigmoid(c);
        let o = t.slice(raw, 1, 2, 6)?;
        let mu = t.softplus(o);
        let v = self.mlp(t, p, emb, var)?;
        let var = t.softplus(v);

        let col = |t: &mut Tape, x: Var, k: usize| t.slice(x, 1, k, k + 1);
        let (cx, cy) = (col(t, center, 0)?, col(t, center, 1)?);
        let (l, r) = (col(t, mu, 0)?, col(t, mu, 1)?);
        let (tp, b) = (col(t, mu, 2)?, col(t, mu, 3)?);
        let x1 = t.sub(cx, l)?;
        let y1 = t.sub(cy, tp)?;
        let x2 = t.add(cx, r)?;
        let y2 = t.add(cy, b)?;
        let corners = t.concat(&[x1, y1, x2, y2], 1)?;
        Ok(BoxHead {
            center,
            mu,
            var,
            corners,
        })
    }

    /// All prediction branches for one forward pass.
    pub fn heads(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        loc_emb: Var,
        inter_emb: Var,
        dropout_active: bool,
    ) -> Result<HeadOutputs, ModelError> {
        let l = &self.layout;
        Ok(HeadOutputs {
            human_logits: self.mlp(t, p, loc_emb, l.human_cls)?,
            object_logits: self.mlp(t, p, loc_emb, l.object_cls)?,
            verb_logits: self.verb_logits(t, p, inter_emb, dropout_active)?,
            human: self.box_head(t, p, loc_emb, l.human_box, l.human_var)?,
            object: self.box_head(t, p, loc_emb, l.object_box, l.object_var)?,
        })
    }
}

fn softmax_rows(logits: &DiffArray) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn read_box(t: &Tape, head: &BoxHead, i: usize) -> (Point, GaussianBox, BBox) {
    let c = t.value(head.center).row(i);
    let center = Point::new(c[0], c[1]);
    let mu: [f64; 4] = t.value(head.mu).row(i).try_into().expect("four offsets");
    let var: [f64; 4] = t.value(head.var).row(i).try_into().expect("four variances");
    // softplus keeps both strictly positive; tiny values may round to zero.
    let var = var.map(|v| v.max(f64::MIN_POSITIVE));
    let offsets = BoxOffsets {
        l: mu[0],
        r: mu[1],
        t: mu[2],
        b: mu[3],
    };
    let gauss = GaussianBox { mu, var };
    (center, gauss, offsets_to_box(center, offsets))
}

/// Reads per-slot predictions off the tape.
///
/// `verb_logits` selects which verb pass supplies `verb_probs`;
/// `inter_var` is per slot (zeros when `None`).
pub fn predictions(t: &Tape, out: &HeadOutputs, verb_logits: Var, inter_var: Option<&[f64]>) -> Vec<HoiPrediction> {
    let human = softmax_rows(t.value(out.human_logits));
    let object = softmax_rows(t.value(out.object_logits));
    let verb = softmax_rows(t.value(verb_logits));
    human
        .into_iter()
        .zip(object)
        .zip(verb)
        .enumerate()
        .map(|(i, ((h, o), v))| {
            let (hc, hg, hb) = read_box(t, &out.human, i);
            let (oc, og, ob) = read_box(t, &out.object, i);
            HoiPrediction {
                human_box: hb,
                object_box: ob,
                human_probs: h,
                object_probs: o,
                verb_probs: v,
                human_center: hc,
                object_center: oc,
                box_gauss_h: hg,
                box_gauss_o: og,
                inter_var: inter_var.map_or(0.0, |iv| iv[i]),
            }
        })
        .collect()
}
