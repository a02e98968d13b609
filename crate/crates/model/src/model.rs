//! Convolutional encoder plus pre-norm transformer decoder over the joint
//! text/location vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textloc_core::{EncodingScheme, QuantGrid, TokenId, TokenKind, Vocabulary};

use crate::error::ModelError;
use crate::real::{rm, tr, Real};
use crate::tape::{softmax_in_place, Tape, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    /// Vertical and horizontal stride.
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: QuantGrid,
    pub scheme: EncodingScheme,
    pub vocab_size: usize,
    pub encoder: Vec<ConvStage>,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Longest prompt plus target the decoder accepts.
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Default size for CPU training on synthetic pages (well under 1M
    /// parameters). Total stride is 8 vertically and 4 horizontally, which
    /// keeps about one feature column per glyph.
    pub fn desk(vocab: &Vocabulary, scheme: EncodingScheme) -> Self {
        ModelConfig {
            grid: *vocab.grid(),
            scheme,
            vocab_size: vocab.len(),
            encoder: vec![
                ConvStage { channels: 16, stride: [2, 2] },
                ConvStage { channels: 32, stride: [2, 2] },
                ConvStage { channels: 64, stride: [2, 1] },
                ConvStage { channels: 96, stride: [1, 1] },
            ],
            d_model: 96,
            heads: 4,
            layers: 2,
            ffn: 256,
            max_seq_len: 512,
            dropout: 0.0,
            seed: 17,
        }
    }

    /// Two decoder layers at minimal width, for gradient checks.
    pub fn micro(vocab: &Vocabulary, scheme: EncodingScheme) -> Self {
        ModelConfig {
            encoder: vec![ConvStage { channels: 3, stride: [2, 2] }, ConvStage { channels: 4, stride: [2, 1] }],
            d_model: 8,
            heads: 2,
            layers: 2,
            ffn: 12,
            max_seq_len: 64,
            ..ModelConfig::desk(vocab, scheme)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.encoder.is_empty() {
            return bad("encoder needs at least one stage");
        }
        if self.encoder.iter().any(|s| s.channels == 0 || s.stride.contains(&0)) {
            return bad("encoder stages need positive channels and strides");
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad("d_model must be a positive multiple of 4");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.ffn == 0 || self.max_seq_len < 2 {
            return bad("ffn and max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Total (vertical, horizontal) downsampling factor of the encoder.
    pub fn stride(&self) -> (usize, usize) {
        self.encoder.iter().fold((1, 1), |(y, x), s| (y * s.stride[0], x * s.stride[1]))
    }

    /// Number of encoder features for an `h` x `w` image.
    pub fn feature_len(&self, h: usize, w: usize) -> usize {
        let (fy, fx) = self.stride();
        h.div_ceil(fy) * w.div_ceil(fx)
    }

    /// Largest accepted image as (height, width): the grid extent.
    pub fn max_image(&self) -> (usize, usize) {
        let (w, h) = self.grid.extent();
        (h as usize, w as usize)
    }
}

/// Which part of the network a parameter belongs to. Token embeddings and
/// the output head are part of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Whether weight decay applies (matrices only).
    pub fn decays(&self) -> bool {
        self.shape.len() >= 2
    }
}

type Affine = (usize, usize);

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1: Affine,
    self_q: Affine,
    self_k: Affine,
    self_v: Affine,
    self_o: Affine,
    ln2: Affine,
    cross_q: Affine,
    cross_k: Affine,
    cross_v: Affine,
    cross_o: Affine,
    ln3: Affine,
    ffn1: Affine,
    ffn2: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Affine>,
    proj: Affine,
    enc_ln: Affine,
    tok_emb: usize,
    layers: Vec<LayerIdx>,
    ln_f: Affine,
    out_bias: usize,
    specs: Vec<ParamSpec>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, group, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64, group: ParamGroup) -> Affine {
        (
            self.add(format!("{name}.w"), vec![fan_in, fan_out], group, Init::Uniform(std)),
            self.add(format!("{name}.b"), vec![fan_out], group, Init::Zeros),
        )
    }

    fn norm(&mut self, name: &str, d: usize, group: ParamGroup) -> Affine {
        (
            self.add(format!("{name}.g"), vec![d], group, Init::Ones),
            self.add(format!("{name}.b"), vec![d], group, Init::Zeros),
        )
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        use ParamGroup::{Decoder, Encoder};
        let mut b = LayoutBuilder { specs: Vec::new() };
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, s) in c.encoder.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push((
                b.add(format!("enc.conv{i}.w"), vec![s.channels, cin * 9], Encoder, Init::Uniform(std)),
                b.add(format!("enc.conv{i}.b"), vec![s.channels], Encoder, Init::Zeros),
            ));
            cin = s.channels;
        }
        let d = c.d_model;
        let proj = b.linear("enc.proj", cin, d, (1.0 / cin as f64).sqrt(), Encoder);
        let enc_ln = b.norm("enc.ln", d, Encoder);
        let tok_emb = b.add("dec.tok_emb".into(), vec![c.vocab_size, d], Decoder, Init::Uniform(0.5 / (d as f64).sqrt()));
        let std_in = (1.0 / d as f64).sqrt();
        let std_out = std_in / (2.0 * c.layers as f64).sqrt();
        let layers = (0..c.layers)
            .map(|l| {
                let p = format!("dec.l{l}");
                LayerIdx {
                    ln1: b.norm(&format!("{p}.ln1"), d, Decoder),
                    self_q: b.linear(&format!("{p}.self.q"), d, d, std_in, Decoder),
                    self_k: b.linear(&format!("{p}.self.k"), d, d, std_in, Decoder),
                    self_v: b.linear(&format!("{p}.self.v"), d, d, std_in, Decoder),
                    self_o: b.linear(&format!("{p}.self.o"), d, d, std_out, Decoder),
                    ln2: b.norm(&format!("{p}.ln2"), d, Decoder),
                    cross_q: b.linear(&format!("{p}.cross.q"), d, d, std_in, Decoder),
                    cross_k: b.linear(&format!("{p}.cross.k"), d, d, std_in, Decoder),
                    cross_v: b.linear(&format!("{p}.cross.v"), d, d, std_in, Decoder),
                    cross_o: b.linear(&format!("{p}.cross.o"), d, d, std_out, Decoder),
                    ln3: b.norm(&format!("{p}.ln3"), d, Decoder),
                    ffn1: b.linear(&format!("{p}.ffn1"), d, c.ffn, std_in, Decoder),
                    ffn2: b.linear(&format!("{p}.ffn2"), c.ffn, d, (1.0 / c.ffn as f64).sqrt() / (2.0 * c.layers as f64).sqrt(), Decoder),
                }
            })
            .collect();
        let ln_f = b.norm("dec.ln_f", d, Decoder);
        let out_bias = b.add("dec.out_bias".into(), vec![c.vocab_size], Decoder, Init::Zeros);
        Layout { convs, proj, enc_ln, tok_emb, layers, ln_f, out_bias, specs: b.specs }
    }
}

/// Sinusoid of width `d` for one position.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// 2-D encoding for an `h` x `w` feature map: the first half of each vector
/// encodes the row, the second half the column.
pub fn positional_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let rows: Vec<Vec<f64>> = (0..h).map(|r| sinusoid(r, half)).collect();
    let cols: Vec<Vec<f64>> = (0..w).map(|c| sinusoid(c, half)).collect();
    let mut out = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            out.extend_from_slice(&rows[r]);
            out.extend_from_slice(&cols[c]);
        }
    }
    out
}

/// Grayscale page as ink intensity in `[0, 1]` (1 = black), optionally padded
/// beyond its valid region.
#[derive(Debug, Clone, PartialEq)]
pub struct InkImage {
    width: usize,
    height: usize,
    valid_width: usize,
    valid_height: usize,
    data: Vec<f32>,
}

impl InkImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ModelError::EmptyImage);
        }
        Ok(InkImage { width, height, valid_width: width, valid_height: height, data })
    }

    /// From 8-bit luminance where 255 is white paper.
    pub fn from_luma(width: usize, height: usize, luma: &[u8]) -> Result<Self, ModelError> {
        Self::new(width, height, luma.iter().map(|&p| f32::from(255 - p) / 255.0).collect())
    }

    /// Copy padded with blank paper to `height` x `width`; the valid region is
    /// unchanged.
    pub fn padded(&self, height: usize, width: usize) -> Self {
        let (height, width) = (height.max(self.height), width.max(self.width));
        let mut data = vec![0.0; height * width];
        for y in 0..self.height {
            data[y * width..y * width + self.width].copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        InkImage { width, height, valid_width: self.valid_width, valid_height: self.valid_height, data }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// (height, width) of the region holding the page.
    pub fn valid_size(&self) -> (usize, usize) {
        (self.valid_height, self.valid_width)
    }

    fn valid_data<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.valid_height * self.valid_width);
        for y in 0..self.valid_height {
            out.extend(self.data[y * self.width..y * self.width + self.valid_width].iter().map(|&v| T::from_f64(f64::from(v))));
        }
        out
    }
}

/// One training example: the decoder reads `prompt` then `target` (which
/// starts with `<bos>`) and is scored on `target[1..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: InkImage,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossClass {
    Ignore,
    Text,
    Location,
}

impl Sample {
    /// Decoder input ids: the prompt followed by all target tokens but the last.
    pub fn input_ids(&self) -> Vec<usize> {
        self.prompt
            .iter()
            .chain(&self.target[..self.target.len().saturating_sub(1)])
            .map(|&t| t as usize)
            .collect()
    }

    /// Next-token label and loss class for every decoder input position.
    /// Prompt positions and the forced `<bos>` are ignored.
    pub fn labels(&self, vocab: &Vocabulary) -> Vec<(usize, LossClass)> {
        let p = self.prompt.len();
        let n = p + self.target.len().saturating_sub(1);
        (0..n)
            .map(|i| {
                if i < p {
                    return (0, LossClass::Ignore);
                }
                let next = self.target[i - p + 1];
                let class = match vocab.kind(next) {
                    Some(k) if k.is_location() => LossClass::Location,
                    Some(TokenKind::Pad) | None => LossClass::Ignore,
                    Some(_) => LossClass::Text,
                };
                (next as usize, class)
            })
            .collect()
    }
}

/// Samples are processed independently; the batch only fixes the token
/// counts that normalize the two loss terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub text_ce: f64,
    pub loc_ce: f64,
    pub lambda: f64,
    pub text_tokens: usize,
    pub loc_tokens: usize,
}

/// Encoder output for one image, plus the cross-attention keys and values of
/// every decoder layer.
#[derive(Debug, Clone)]
pub struct Memory<T> {
    pub features: Vec<T>,
    pub len: usize,
    /// Feature map (rows, cols).
    pub map: (usize, usize),
    cross_kv: Vec<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated target, starting with `<bos>`.
    pub tokens: Vec<TokenId>,
    /// No `<eos>` was produced within the length budget.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<Vec<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        Self::check_pair(&config, &vocab)?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => vec![T::ZERO; s.numel()],
                Init::Ones => vec![T::ONE; s.numel()],
                Init::Uniform(std) => {
                    let a = std * 3f64.sqrt();
                    (0..s.numel()).map(|_| T::from_f64(rng.random_range(-a..=a))).collect()
                }
            })
            .collect();
        Ok(Model { config, vocab, layout, params })
    }

    /// Rebuilds a model from stored tensors, checked against the layout.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: Vec<Vec<T>>) -> Result<Self, ModelError> {
        Self::check_pair(&config, &vocab)?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, got {}", layout.specs.len(), params.len())));
        }
        for (s, p) in layout.specs.iter().zip(&params) {
            if p.len() != s.numel() {
                return Err(ModelError::Checkpoint(format!("{}: expected {} values, got {}", s.name, s.numel(), p.len())));
            }
        }
        Ok(Model { config, vocab, layout, params })
    }

    fn check_pair(config: &ModelConfig, vocab: &Vocabulary) -> Result<(), ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() || config.grid != *vocab.grid() {
            return Err(ModelError::Config("config and vocabulary disagree on size or grid".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Trainable mask selecting the given groups.
    pub fn group_mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.layout.specs.iter().map(|s| groups.contains(&s.group)).collect()
    }

    /// Index of the token-embedding table.
    pub fn token_embedding(&self) -> (&[T], usize) {
        (&self.params[self.layout.tok_emb], self.config.d_model)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| p.iter().map(|&v| U::from_f64(v.to_f64())).collect()).collect(),
        }
    }

    fn check_image(&self, image: &InkImage) -> Result<(), ModelError> {
        let (h, w) = image.valid_size();
        let (max_h, max_w) = self.config.max_image();
        if h > max_h || w > max_w {
            return Err(ModelError::ImageTooLarge { height: h, width: w, max_height: max_h, max_width: max_w });
        }
        Ok(())
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<(), ModelError> {
        self.check_image(&s.image)?;
        self.check_tokens(&s.prompt)?;
        self.check_tokens(&s.target)?;
        if s.target.len() < 2 || s.target[0] != self.vocab.bos() {
            return Err(ModelError::MalformedTarget);
        }
        let len = s.prompt.len() + s.target.len();
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len, max: self.config.max_seq_len });
        }
        Ok(())
    }

    fn p(&self, t: &mut Tape<'_, T>, i: usize) -> Var {
        let shape = self.layout.specs[i].shape.clone();
        t.param(i, &shape)
    }

    fn linear(&self, t: &mut Tape<'_, T>, x: Var, (w, b): Affine) -> Var {
        let (w, b) = (self.p(t, w), self.p(t, b));
        let y = t.matmul(x, w, false);
        t.add_row(y, b)
    }

    fn norm(&self, t: &mut Tape<'_, T>, x: Var, (g, b): Affine) -> Var {
        let (g, b) = (self.p(t, g), self.p(t, b));
        t.layer_norm(x, g, b)
    }

    /// Encoder features `[N, d]` on the tape, and the feature map size.
    fn encode_on(&self, t: &mut Tape<'_, T>, image: &InkImage) -> (Var, (usize, usize)) {
        let (h, w) = image.valid_size();
        let mut x = t.input(image.valid_data(), &[1, h, w]);
        for (stage, &(wi, bi)) in self.config.encoder.iter().zip(&self.layout.convs) {
            let (wv, bv) = (self.p(t, wi), self.p(t, bi));
            x = t.conv2d(x, wv, bv, (stage.stride[0], stage.stride[1]));
            x = t.gelu(x);
        }
        let map = (t.shape(x)[1], t.shape(x)[2]);
        let x = t.transpose(x);
        let x = self.linear(t, x, self.layout.proj);
        let d = self.config.d_model;
        let pe = t.input(positional_2d(map.0, map.1, d).into_iter().map(T::from_f64).collect(), &[map.0 * map.1, d]);
        let x = t.add(x, pe);
        (self.norm(t, x, self.layout.enc_ln), map)
    }

    fn attention_block(
        &self,
        t: &mut Tape<'_, T>,
        q_in: Var,
        kv_in: Var,
        (q, k, v, o): (Affine, Affine, Affine, Affine),
        causal: bool,
    ) -> Var {
        let qv = self.linear(t, q_in, q);
        let kv = self.linear(t, kv_in, k);
        let vv = self.linear(t, kv_in, v);
        let a = t.attention(qv, kv, vv, self.config.heads, causal);
        self.linear(t, a, o)
    }

    /// Logits `[L, V]` for decoder inputs `ids` attending to `memory`.
    fn decode_on(&self, t: &mut Tape<'_, T>, memory: Var, ids: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let d = self.config.d_model;
        let p_drop = self.config.dropout;
        let mut dropout = |t: &mut Tape<'_, T>, x: Var| match rng.as_deref_mut() {
            Some(r) => t.dropout(x, p_drop, r),
            None => x,
        };
        let table = self.p(t, self.layout.tok_emb);
        let emb = t.embedding(table, ids);
        let emb = t.scale(emb, T::from_f64((d as f64).sqrt()));
        let pe: Vec<T> = (0..ids.len()).flat_map(|i| sinusoid(i, d)).map(T::from_f64).collect();
        let pe = t.input(pe, &[ids.len(), d]);
        let x0 = t.add(emb, pe);
        let mut x = dropout(t, x0);
        for l in &self.layout.layers {
            let h = self.norm(t, x, l.ln1);
            let a = self.attention_block(t, h, h, (l.self_q, l.self_k, l.self_v, l.self_o), true);
            let a = dropout(t, a);
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln2);
            let a = self.attention_block(t, h, memory, (l.cross_q, l.cross_k, l.cross_v, l.cross_o), false);
            let a = dropout(t, a);
            x = t.add(x, a);
            let h = self.norm(t, x, l.ln3);
            let f = self.linear(t, h, l.ffn1);
            let f = t.gelu(f);
            let f = self.linear(t, f, l.ffn2);
            let f = dropout(t, f);
            x = t.add(x, f);
        }
        let h = self.norm(t, x, self.layout.ln_f);
        let logits = t.matmul(h, table, true);
        let bias = self.p(t, self.layout.out_bias);
        t.add_row(logits, bias)
    }

    /// Encoder features as `[N, d]` values with the feature-map size.
    pub fn encode_image(&self, image: &InkImage) -> Result<(Vec<T>, (usize, usize)), ModelError> {
        self.check_image(image)?;
        let frozen = vec![false; self.params.len()];
        let mut t = Tape::new(&self.params, &frozen);
        let (x, map) = self.encode_on(&mut t, image);
        Ok((t.value(x).to_vec(), map))
    }

    /// Teacher-forced logits `[L, V]` over `prompt ++ target[..len-1]`.
    pub fn logits(&self, sample: &Sample) -> Result<Vec<T>, ModelError> {
        self.check_sample(sample)?;
        let frozen = vec![false; self.params.len()];
        let mut t = Tape::new(&self.params, &frozen);
        let (mem, _) = self.encode_on(&mut t, &sample.image);
        let logits = self.decode_on(&mut t, mem, &sample.input_ids(), None);
        Ok(t.value(logits).to_vec())
    }

    /// Loss without gradients.
    pub fn loss(&self, batch: &Batch, lambda: f64) -> Result<LossBreakdown, ModelError> {
        let frozen = vec![false; self.params.len()];
        self.loss_and_grad(batch, lambda, &frozen, None, None)
    }

    /// Combined loss `λ·text_ce + (1−λ)·loc_ce` where each term averages
    /// over its token positions across the whole batch. With `grads`, the
    /// gradient of the total with respect to every `trainable` parameter is
    /// added into it.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        lambda: f64,
        trainable: &[bool],
        mut grads: Option<&mut [Vec<T>]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossBreakdown, ModelError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ModelError::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        let mut labels = Vec::with_capacity(batch.samples.len());
        let (mut n_text, mut n_loc) = (0usize, 0usize);
        for s in &batch.samples {
            self.check_sample(s)?;
            let l = s.labels(&self.vocab);
            n_text += l.iter().filter(|x| x.1 == LossClass::Text).count();
            n_loc += l.iter().filter(|x| x.1 == LossClass::Location).count();
            labels.push(l);
        }
        let w_text = if n_text > 0 { lambda / n_text as f64 } else { 0.0 };
        let w_loc = if n_loc > 0 { (1.0 - lambda) / n_loc as f64 } else { 0.0 };
        let (mut sum_text, mut sum_loc) = (0.0f64, 0.0f64);
        let track = grads.is_some();
        let frozen = vec![false; self.params.len()];
        let mask = if track { trainable } else { &frozen[..] };
        for (s, l) in batch.samples.iter().zip(&labels) {
            let mut t = Tape::new(&self.params, mask);
            let (mem, _) = self.encode_on(&mut t, &s.image);
            let logits = self.decode_on(&mut t, mem, &s.input_ids(), dropout_rng.as_deref_mut());
            let targets: Vec<usize> = l.iter().map(|x| x.0).collect();
            let weights: Vec<T> = l
                .iter()
                .map(|x| match x.1 {
                    LossClass::Text => T::from_f64(w_text),
                    LossClass::Location => T::from_f64(w_loc),
                    LossClass::Ignore => T::ZERO,
                })
                .collect();
            let ce = t.weighted_ce(logits, &targets, &weights);
            let nll = t.nll(ce).expect("ce node");
            for (x, v) in l.iter().zip(nll) {
                match x.1 {
                    LossClass::Text => sum_text += v.to_f64(),
                    LossClass::Location => sum_loc += v.to_f64(),
                    LossClass::Ignore => {}
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                t.backward(ce, g);
            }
        }
        let text_ce = if n_text > 0 { sum_text / n_text as f64 } else { 0.0 };
        let loc_ce = if n_loc > 0 { sum_loc / n_loc as f64 } else { 0.0 };
        if !text_ce.is_finite() || !loc_ce.is_finite() {
            return Err(ModelError::NonFiniteLoss { text_ce, loc_ce });
        }
        Ok(LossBreakdown {
            total: lambda * text_ce + (1.0 - lambda) * loc_ce,
            text_ce,
            loc_ce,
            lambda,
            text_tokens: n_text,
            loc_tokens: n_loc,
        })
    }

    /// Runs the encoder once and precomputes every layer's cross-attention
    /// keys and values.
    pub fn memory(&self, image: &InkImage) -> Result<Memory<T>, ModelError> {
        let (features, map) = self.encode_image(image)?;
        let len = map.0 * map.1;
        let cross_kv = self
            .layout
            .layers
            .iter()
            .map(|l| (self.dense(&features, len, l.cross_k), self.dense(&features, len, l.cross_v)))
            .collect();
        Ok(Memory { features, len, map, cross_kv })
    }

    /// `x [rows, in] · W + b` on plain buffers.
    fn dense(&self, x: &[T], rows: usize, (w, b): Affine) -> Vec<T> {
        let shape = &self.layout.specs[w].shape;
        let (fin, fout) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(rows * fout);
        for _ in 0..rows {
            out.extend_from_slice(&self.params[b]);
        }
        T::gemm(rows, fin, fout, T::ONE, x, rm(fin), &self.params[w], rm(fout), T::ONE, &mut out, rm(fout));
        out
    }

    fn norm_vec(&self, x: &[T], (g, b): Affine) -> Vec<T> {
        let n = x.len();
        let nf = T::from_f64(n as f64);
        let mut mean = T::ZERO;
        for &v in x {
            mean += v;
        }
        mean = mean / nf;
        let mut var = T::ZERO;
        for &v in x {
            var += (v - mean) * (v - mean);
        }
        let rs = T::ONE / (var / nf + T::from_f64(LAYER_NORM_EPS)).sqrt();
        let (gv, bv) = (&self.params[g], &self.params[b]);
        (0..n).map(|j| (x[j] - mean) * rs * gv[j] + bv[j]).collect()
    }

    /// Single-query attention against `len` cached keys/values.
    fn attend(&self, q: &[T], keys: &[T], values: &[T], len: usize) -> Vec<T> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::ZERO; d];
        let mut scores = vec![T::ZERO; len];
        for h in 0..heads {
            T::gemm(1, dh, len, scale, &q[h * dh..], rm(d), &keys[h * dh..], tr(d), T::ZERO, &mut scores, rm(len));
            softmax_in_place(&mut scores, len);
            T::gemm(1, len, dh, T::ONE, &scores, rm(len), &values[h * dh..], rm(d), T::ZERO, &mut out[h * dh..], rm(d));
        }
        out
    }

    /// Greedy decoding of up to `max_len` target tokens (including `<bos>`).
    pub fn generate(&self, image: &InkImage, prompt: &[TokenId], max_len: usize) -> Result<Generation, ModelError> {
        let memory = self.memory(image)?;
        self.generate_from(&memory, prompt, max_len).map(|(g, _)| g)
    }

    /// Greedy decoding against a precomputed [`Memory`]; also returns the
    /// logits of every generated step.
    pub fn generate_from(
        &self,
        memory: &Memory<T>,
        prompt: &[TokenId],
        max_len: usize,
    ) -> Result<(Generation, Vec<Vec<T>>), ModelError> {
        self.check_tokens(prompt)?;
        let max_len = max_len.min(self.config.max_seq_len.saturating_sub(prompt.len())).max(1);
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let emb = &self.params[self.layout.tok_emb];
        let emb_scale = T::from_f64((d as f64).sqrt());
        let mut caches: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); self.layout.layers.len()];
        let mut step = |token: TokenId, pos: usize| -> Vec<T> {
            let pe = sinusoid(pos, d);
            let row = &emb[token as usize * d..(token as usize + 1) * d];
            let mut x: Vec<T> = row.iter().zip(&pe).map(|(&e, &p)| e * emb_scale + T::from_f64(p)).collect();
            for (l, (cache, (ck, cv))) in self.layout.layers.iter().zip(caches.iter_mut().zip(&memory.cross_kv)) {
                let h = self.norm_vec(&x, l.ln1);
                let q = self.dense(&h, 1, l.self_q);
                cache.0.extend(self.dense(&h, 1, l.self_k));
                cache.1.extend(self.dense(&h, 1, l.self_v));
                let a = self.attend(&q, &cache.0, &cache.1, pos + 1);
                let o = self.dense(&a, 1, l.self_o);
                x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
                let h = self.norm_vec(&x, l.ln2);
                let q = self.dense(&h, 1, l.cross_q);
                let a = self.attend(&q, ck, cv, memory.len);
                let o = self.dense(&a, 1, l.cross_o);
                x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
                let h = self.norm_vec(&x, l.ln3);
                let f: Vec<T> = self.dense(&h, 1, l.ffn1).into_iter().map(gelu).collect();
                let f = self.dense(&f, 1, l.ffn2);
                x.iter_mut().zip(&f).for_each(|(x, &o)| *x += o);
            }
            let h = self.norm_vec(&x, self.layout.ln_f);
            let mut logits = self.params[self.layout.out_bias].clone();
            T::gemm(1, d, v, T::ONE, &h, rm(d), emb, tr(d), T::ONE, &mut logits, rm(v));
            logits
        };
        let mut pos = 0;
        for &tok in prompt {
            step(tok, pos);
            pos += 1;
        }
        let mut tokens = vec![self.vocab.bos()];
        let mut trace = Vec::new();
        let mut truncated = true;
        while tokens.len() < max_len {
            let logits = step(*tokens.last().expect("bos"), pos);
            pos += 1;
            let next = argmax(&logits) as TokenId;
            trace.push(logits);
            tokens.push(next);
            if next == self.vocab.eos() {
                truncated = false;
                break;
            }
        }
        Ok((Generation { tokens, truncated }, trace))
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::from_f64(0.044_715) * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + u.tanh())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
