//! Convolutional-recurrent recognizer with a character head and an optional
//! row head, explicit backpropagation and per-sample SGD.
//!
//! Layout of one forward pass for a `32 × W` image:
//!
//! ```text
//! conv(3×3, same) → ReLU → 2×2 max-pool      (repeated per conv layer)
//! column features (channels × height)        T = W / D columns
//! linear projection → ReLU
//! GRU, forward and (optionally) backward     concatenated per step
//! char head: linear → log-softmax            K + 1 outputs, blank last
//! row head:  linear → log-softmax            R + 1 outputs, blank last
//! ```
//!
//! `D = 2^(pooling layers)` is the width downsampling factor.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{self, CtcError, LogProbSequence};
use crate::glyphs::{Bitmap, WordSample, GLYPH_SIZE};

/// Floating point type the model can be instantiated with.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Width in bytes; doubles as the dtype tag in checkpoints.
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// `C = alpha·A·B + beta·C` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[inline]
fn c<F: Real>(v: f64) -> F {
    F::from_f64(v).unwrap()
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image must be {GLYPH_SIZE} pixels high and a positive multiple of {downsample} wide, got {height}×{width}")]
    ImageShape {
        height: usize,
        width: usize,
        downsample: usize,
    },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("non-finite loss on word {word_id} (writer {writer_id}): char {char_loss}, row {row_loss:?}")]
    Divergence {
        word_id: usize,
        writer_id: usize,
        char_loss: f64,
        row_loss: Option<f64>,
    },
    #[error("learning rate must be non-negative and finite, got {0}")]
    LearningRate(f64),
    #[error("sample has {chars} characters but {rows} row labels")]
    LabelMismatch { chars: usize, rows: usize },
}

/// One convolution stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    /// Odd square kernel size; padding keeps the spatial size.
    pub kernel: usize,
    /// Follow with a 2×2 max-pool.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv: Vec<ConvLayer>,
    /// Width of the per-column projection that flattens the height axis.
    pub projection: usize,
    /// Recurrent hidden size per direction.
    pub hidden: usize,
    pub bidirectional: bool,
    /// Character classes `K` (blank excluded).
    pub num_chars: usize,
    /// Row classes `R` (blank excluded).
    pub num_rows: usize,
    /// Attach the row head (proposed model) or not (baseline).
    pub aux_head: bool,
    /// Longest word the model must be able to emit.
    pub max_word_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two conv stages (16 and 32 channels, each pooled), a 64-wide
    /// projection and a bidirectional GRU with 64 units: `D = 4`.
    pub fn standard(num_chars: usize, num_rows: usize, aux_head: bool, seed: u64) -> Self {
        Self {
            conv: vec![
                ConvLayer {
                    channels: 16,
                    kernel: 3,
                    pool: true,
                },
                ConvLayer {
                    channels: 32,
                    kernel: 3,
                    pool: true,
                },
            ],
            projection: 64,
            hidden: 64,
            bidirectional: true,
            num_chars,
            num_rows,
            aux_head,
            max_word_len: 12,
            seed,
        }
    }

    /// Width downsampling factor `D`.
    pub fn downsample(&self) -> usize {
        1 << self.conv.iter().filter(|l| l.pool).count()
    }

    /// Height of the feature map after the conv stack.
    pub fn feature_height(&self) -> usize {
        GLYPH_SIZE / self.downsample()
    }

    /// Per-column feature size fed to the projection.
    pub fn column_features(&self) -> usize {
        self.conv.last().map_or(1, |l| l.channels) * self.feature_height()
    }

    pub fn rnn_output(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    /// Time steps produced for an image `width` pixels wide.
    pub fn steps_for_width(&self, width: usize) -> usize {
        width / self.downsample()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        let d = self.downsample();
        if GLYPH_SIZE % d != 0 || d > GLYPH_SIZE {
            return bad(format!("downsampling factor {d} does not divide {GLYPH_SIZE}"));
        }
        if let Some(l) = self.conv.iter().find(|l| l.kernel % 2 == 0 || l.channels == 0) {
            return bad(format!("conv layer needs an odd kernel and channels > 0, got {l:?}"));
        }
        if self.projection == 0 || self.hidden == 0 {
            return bad("projection and hidden sizes must be positive".into());
        }
        if self.num_chars == 0 || (self.aux_head && self.num_rows == 0) {
            return bad("heads need at least one class".into());
        }
        if self.max_word_len == 0 {
            return bad("max_word_len must be positive".into());
        }
        let steps = self.steps_for_width(GLYPH_SIZE * self.max_word_len);
        if steps < 2 * self.max_word_len + 1 {
            return bad(format!(
                "{steps} steps for a {}-character word, need at least {}",
                self.max_word_len,
                2 * self.max_word_len + 1
            ));
        }
        Ok(())
    }
}

/// Dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| c(rng.random_range(-bound..bound))).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F> {
    /// `[out, in, k, k]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F> {
    /// `[3H, in]`, gate order reset, update, candidate.
    pub w_ih: Tensor<F>,
    /// `[3H, H]`
    pub w_hh: Tensor<F>,
    pub b_ih: Tensor<F>,
    pub b_hh: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<F> {
    /// `[out, in]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// All learnable tensors. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub conv: Vec<ConvParams<F>>,
    pub projection: LinearParams<F>,
    pub gru_forward: GruParams<F>,
    pub gru_backward: Option<GruParams<F>>,
    pub char_head: LinearParams<F>,
    pub row_head: Option<LinearParams<F>>,
}

impl<F: Real> Params<F> {
    /// Tensors in declaration order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &l.weight));
            out.push((format!("conv{i}.bias"), &l.bias));
        }
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        push_gru("gru_forward", &self.gru_forward, &mut out);
        if let Some(g) = &self.gru_backward {
            push_gru("gru_backward", g, &mut out);
        }
        out.push(("char_head.weight".into(), &self.char_head.weight));
        out.push(("char_head.bias".into(), &self.char_head.bias));
        if let Some(h) = &self.row_head {
            out.push(("row_head.weight".into(), &h.weight));
            out.push(("row_head.bias".into(), &h.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in &mut self.conv {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        for g in std::iter::once(&mut self.gru_forward).chain(self.gru_backward.as_mut()) {
            out.push(&mut g.w_ih);
            out.push(&mut g.w_hh);
            out.push(&mut g.b_ih);
            out.push(&mut g.b_hh);
        }
        out.push(&mut self.char_head.weight);
        out.push(&mut self.char_head.bias);
        if let Some(h) = &mut self.row_head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let lin = |l: &LinearParams<F>| LinearParams {
            weight: l.weight.zeros_like(),
            bias: l.bias.zeros_like(),
        };
        let gru = |g: &GruParams<F>| GruParams {
            w_ih: g.w_ih.zeros_like(),
            w_hh: g.w_hh.zeros_like(),
            b_ih: g.b_ih.zeros_like(),
            b_hh: g.b_hh.zeros_like(),
        };
        Self {
            conv: self
                .conv
                .iter()
                .map(|l| ConvParams {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                })
                .collect(),
            projection: lin(&self.projection),
            gru_forward: gru(&self.gru_forward),
            gru_backward: self.gru_backward.as_ref().map(gru),
            char_head: lin(&self.char_head),
            row_head: self.row_head.as_ref().map(lin),
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn push_gru<'a, F>(prefix: &str, g: &'a GruParams<F>, out: &mut Vec<(String, &'a Tensor<F>)>) {
    out.push((format!("{prefix}.w_ih"), &g.w_ih));
    out.push((format!("{prefix}.w_hh"), &g.w_hh));
    out.push((format!("{prefix}.b_ih"), &g.b_ih));
    out.push((format!("{prefix}.b_hh"), &g.b_hh));
}

/// Expected tensor shapes for a config, in declaration order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let mut in_c = 1;
    for l in &cfg.conv {
        shapes.push(vec![l.channels, in_c, l.kernel, l.kernel]);
        shapes.push(vec![l.channels]);
        in_c = l.channels;
    }
    shapes.push(vec![cfg.projection, cfg.column_features()]);
    shapes.push(vec![cfg.projection]);
    let dirs = if cfg.bidirectional { 2 } else { 1 };
    for _ in 0..dirs {
        shapes.push(vec![3 * cfg.hidden, cfg.projection]);
        shapes.push(vec![3 * cfg.hidden, cfg.hidden]);
        shapes.push(vec![3 * cfg.hidden]);
        shapes.push(vec![3 * cfg.hidden]);
    }
    shapes.push(vec![cfg.num_chars + 1, cfg.rnn_output()]);
    shapes.push(vec![cfg.num_chars + 1]);
    if cfg.aux_head {
        shapes.push(vec![cfg.num_rows + 1, cfg.rnn_output()]);
        shapes.push(vec![cfg.num_rows + 1]);
    }
    shapes
}

/// Per-step outputs of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub char: LogProbSequence,
    pub row: Option<LogProbSequence>,
}

/// Losses of one training step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub char: f64,
    pub row: Option<f64>,
}

/// Result of [`Model::train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: StepLosses,
    /// Greedy transcription of the character head before the update.
    pub hypothesis: Vec<usize>,
}

/// Knobs of a single SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lr: f64,
    /// Weight of the row loss in the objective.
    pub row_weight: f64,
    /// Rescale the gradient to this global L2 norm when it is exceeded.
    pub clip_norm: Option<f64>,
}

impl StepOptions {
    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            row_weight: 1.0,
            clip_norm: None,
        }
    }
}

/// Model parameters plus training bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    /// SGD updates applied so far.
    pub step: u64,
    /// Completed training epochs.
    pub epoch: u64,
    /// Hash of the label map the model was built for (empty if unknown).
    pub label_map_hash: String,
}

impl<F: Real> Model<F> {
    /// Deterministic initialization from `config.seed`.
    ///
    /// ReLU layers (conv, projection) draw from `U(±sqrt(6 / fan_in))` with
    /// zero bias; recurrent and head tensors from `U(±1 / sqrt(fan_in))`.
    /// The row head is drawn last, so a baseline and a proposed model with
    /// the same seed share every other parameter.
    pub fn new(config: ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut conv = Vec::new();
        let mut in_c = 1;
        for l in &config.conv {
            let fan_in = (in_c * l.kernel * l.kernel) as f64;
            conv.push(ConvParams {
                weight: Tensor::uniform(
                    &[l.channels, in_c, l.kernel, l.kernel],
                    (6.0 / fan_in).sqrt(),
                    &mut rng,
                ),
                bias: Tensor::zeros(&[l.channels]),
            });
            in_c = l.channels;
        }
        let feat = config.column_features();
        let projection = LinearParams {
            weight: Tensor::uniform(
                &[config.projection, feat],
                (6.0 / feat as f64).sqrt(),
                &mut rng,
            ),
            bias: Tensor::zeros(&[config.projection]),
        };
        let gru = |rng: &mut ChaCha8Rng| {
            let h = config.hidden;
            let b = 1.0 / (h as f64).sqrt();
            GruParams {
                w_ih: Tensor::uniform(&[3 * h, config.projection], b, rng),
                w_hh: Tensor::uniform(&[3 * h, h], b, rng),
                b_ih: Tensor::uniform(&[3 * h], b, rng),
                b_hh: Tensor::uniform(&[3 * h], b, rng),
            }
        };
        let gru_forward = gru(&mut rng);
        let gru_backward = config.bidirectional.then(|| gru(&mut rng));
        let head = |out: usize, rng: &mut ChaCha8Rng| {
            let fan_in = config.rnn_output();
            let b = 1.0 / (fan_in as f64).sqrt();
            LinearParams {
                weight: Tensor::uniform(&[out, fan_in], b, rng),
                bias: Tensor::uniform(&[out], b, rng),
            }
        };
        let char_head = head(config.num_chars + 1, &mut rng);
        let row_head = config.aux_head.then(|| head(config.num_rows + 1, &mut rng));
        Ok(Self {
            params: Params {
                conv,
                projection,
                gru_forward,
                gru_backward,
                char_head,
                row_head,
            },
            config,
            step: 0,
            epoch: 0,
            label_map_hash: String::new(),
        })
    }

    pub fn with_label_map_hash(mut self, hash: impl Into<String>) -> Self {
        self.label_map_hash = hash.into();
        self
    }

    /// Same trunk and character head, row head removed.
    pub fn without_row_head(&self) -> Self {
        let mut m = self.clone();
        m.config.aux_head = false;
        m.params.row_head = None;
        m
    }

    pub fn has_row_head(&self) -> bool {
        self.params.row_head.is_some()
    }

    fn check_image(&self, image: &Bitmap) -> Result<(), NetError> {
        let d = self.config.downsample();
        if image.height() != GLYPH_SIZE || image.width() == 0 || image.width() % d != 0 {
            return Err(NetError::ImageShape {
                height: image.height(),
                width: image.width(),
                downsample: d,
            });
        }
        Ok(())
    }

    /// Runs both heads on one word image.
    pub fn forward(&self, image: &Bitmap) -> Result<HeadOutputs, NetError> {
        self.check_image(image)?;
        let trace = self.run(image);
        Ok(trace.outputs)
    }

    /// Gradient of the objective with respect to every parameter, plus the
    /// losses, without touching the parameters.
    pub fn gradients(
        &self,
        sample: &WordSample,
        row_weight: f64,
    ) -> Result<(StepLosses, Params<F>, HeadOutputs), NetError> {
        self.check_image(&sample.image)?;
        if sample.rows.len() != sample.chars.len() {
            return Err(NetError::LabelMismatch {
                chars: sample.chars.len(),
                rows: sample.rows.len(),
            });
        }
        let trace = self.run(&sample.image);
        let outputs = &trace.outputs;
        let loss = ctc::total_loss(
            (&outputs.char, &sample.chars),
            outputs.row.as_ref().map(|lp| (lp, sample.rows.as_slice())),
            row_weight,
        )?;
        let losses = StepLosses {
            total: loss.total,
            char: loss.char.loss,
            row: loss.row.as_ref().map(|r| r.loss),
        };
        if !losses.total.is_finite() {
            return Err(NetError::Divergence {
                word_id: sample.word_id,
                writer_id: sample.writer_id,
                char_loss: losses.char,
                row_loss: losses.row,
            });
        }
        let grads = self.backward(&trace, &loss.char.grad, loss.row.as_ref().map(|r| r.grad.as_slice()));
        Ok((losses, grads, trace.outputs))
    }

    /// One SGD step on the summed CTC objective. Returns the losses measured
    /// before the update.
    pub fn train_step(
        &mut self,
        sample: &WordSample,
        opts: &StepOptions,
    ) -> Result<StepReport, NetError> {
        if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
            return Err(NetError::LearningRate(opts.lr));
        }
        let (losses, grads, outputs) = self.gradients(sample, opts.row_weight)?;
        let hypothesis = crate::metrics::greedy_decode(&outputs.char);
        let mut scale = opts.lr;
        if let Some(max_norm) = opts.clip_norm {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|g| {
                    let g = g.to_f64().unwrap();
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                scale *= max_norm / norm;
            }
        }
        if scale != 0.0 {
            let s: F = c(scale);
            let mut grads = grads;
            for (p, g) in self.params.tensors_mut().into_iter().zip(grads.tensors_mut()) {
                for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                    *pv -= s * *gv;
                }
            }
            if !self.params.all_finite() {
                return Err(NetError::Divergence {
                    word_id: sample.word_id,
                    writer_id: sample.writer_id,
                    char_loss: losses.char,
                    row_loss: losses.row,
                });
            }
        }
        self.step += 1;
        Ok(StepReport { losses, hypothesis })
    }

    /// Objective value without gradients.
    pub fn loss(&self, sample: &WordSample, row_weight: f64) -> Result<StepLosses, NetError> {
        let out = self.forward(&sample.image)?;
        let loss = ctc::total_loss(
            (&out.char, &sample.chars),
            out.row.as_ref().map(|lp| (lp, sample.rows.as_slice())),
            row_weight,
        )?;
        Ok(StepLosses {
            total: loss.total,
            char: loss.char.loss,
            row: loss.row.map(|r| r.loss),
        })
    }

    fn run(&self, image: &Bitmap) -> Trace<F> {
        let cfg = &self.config;
        let mut x: Vec<F> = image.to_unit();
        let (mut ch, mut h, mut w) = (1, image.height(), image.width());
        let mut convs = Vec::with_capacity(cfg.conv.len());
        for (layer, p) in cfg.conv.iter().zip(&self.params.conv) {
            let mut act = conv2d_same(&x, ch, h, w, &p.weight, &p.bias, layer.kernel);
            for v in &mut act {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
            let out_c = layer.channels;
            let (pooled, idx, ph, pw) = if layer.pool {
                let (p, i) = max_pool2(&act, out_c, h, w);
                (p, Some(i), h / 2, w / 2)
            } else {
                (act.clone(), None, h, w)
            };
            convs.push(ConvTrace {
                input: std::mem::replace(&mut x, pooled),
                in_c: ch,
                h,
                w,
                act,
                pool_idx: idx,
            });
            ch = out_c;
            h = ph;
            w = pw;
        }
        // Columns become time steps: feat[t][c * h + y].
        let steps = w;
        let feat_dim = ch * h;
        let mut feat = vec![F::zero(); steps * feat_dim];
        for cc in 0..ch {
            for y in 0..h {
                let row = &x[(cc * h + y) * w..(cc * h + y + 1) * w];
                for (t, &v) in row.iter().enumerate() {
                    feat[t * feat_dim + cc * h + y] = v;
                }
            }
        }
        let p = cfg.projection;
        let mut proj = vec![F::zero(); steps * p];
        for t in 0..steps {
            let out = &mut proj[t * p..(t + 1) * p];
            linear(&self.params.projection, &feat[t * feat_dim..(t + 1) * feat_dim], out);
            for v in out.iter_mut() {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
        }
        let hid = cfg.hidden;
        let fwd = gru_forward(&self.params.gru_forward, &proj, steps, p, false);
        let bwd = self
            .params
            .gru_backward
            .as_ref()
            .map(|g| gru_forward(g, &proj, steps, p, true));
        let o = cfg.rnn_output();
        let mut rnn_out = vec![F::zero(); steps * o];
        for t in 0..steps {
            rnn_out[t * o..t * o + hid].copy_from_slice(fwd.output(t));
            if let Some(b) = &bwd {
                rnn_out[t * o + hid..(t + 1) * o].copy_from_slice(b.output(t));
            }
        }
        let head = |lp: &LinearParams<F>, classes: usize| {
            let mut scores = vec![0.0; steps * (classes + 1)];
            let mut buf = vec![F::zero(); classes + 1];
            for t in 0..steps {
                linear(lp, &rnn_out[t * o..(t + 1) * o], &mut buf);
                for (s, v) in scores[t * (classes + 1)..].iter_mut().zip(&buf) {
                    *s = v.to_f64().unwrap();
                }
            }
            LogProbSequence::from_scores(steps, classes, scores).expect("head shape")
        };
        let char = head(&self.params.char_head, cfg.num_chars);
        let row = self
            .params
            .row_head
            .as_ref()
            .map(|lp| head(lp, cfg.num_rows));
        Trace {
            convs,
            final_shape: (ch, h, w),
            feat,
            proj,
            fwd,
            bwd,
            rnn_out,
            outputs: HeadOutputs { char, row },
        }
    }

    fn backward(&self, trace: &Trace<F>, char_grad: &[f64], row_grad: Option<&[f64]>) -> Params<F> {
        let cfg = &self.config;
        let mut grads = self.params.zeros_like();
        let steps = trace.outputs.char.steps();
        let o = cfg.rnn_output();
        let mut d_rnn = vec![F::zero(); steps * o];

        let mut head_back = |lp: &LinearParams<F>, g: &mut LinearParams<F>, score_grad: &[f64]| {
            let width = lp.bias.data.len();
            let mut gs = vec![F::zero(); width];
            for t in 0..steps {
                for (dst, &src) in gs.iter_mut().zip(&score_grad[t * width..(t + 1) * width]) {
                    *dst = c(src);
                }
                linear_backward(
                    lp,
                    g,
                    &trace.rnn_out[t * o..(t + 1) * o],
                    &gs,
                    Some(&mut d_rnn[t * o..(t + 1) * o]),
                );
            }
        };
        head_back(&self.params.char_head, &mut grads.char_head, char_grad);
        if let (Some(lp), Some(g), Some(rg)) = (&self.params.row_head, &mut grads.row_head, row_grad) {
            head_back(lp, g, rg);
        }

        let hid = cfg.hidden;
        let p = cfg.projection;
        let mut d_proj = vec![F::zero(); steps * p];
        let d_fwd: Vec<F> = (0..steps)
            .flat_map(|t| d_rnn[t * o..t * o + hid].iter().copied())
            .collect();
        gru_backward(
            &self.params.gru_forward,
            &mut grads.gru_forward,
            &trace.fwd,
            &trace.proj,
            &d_fwd,
            &mut d_proj,
        );
        if let (Some(gp), Some(gg), Some(tr)) = (
            &self.params.gru_backward,
            &mut grads.gru_backward,
            &trace.bwd,
        ) {
            let d_bwd: Vec<F> = (0..steps)
                .flat_map(|t| d_rnn[t * o + hid..(t + 1) * o].iter().copied())
                .collect();
            gru_backward(gp, gg, tr, &trace.proj, &d_bwd, &mut d_proj);
        }

        // projection ReLU
        for (d, &a) in d_proj.iter_mut().zip(&trace.proj) {
            if a <= F::zero() {
                *d = F::zero();
            }
        }
        let (ch, h, w) = trace.final_shape;
        let feat_dim = ch * h;
        let mut d_feat = vec![F::zero(); steps * feat_dim];
        for t in 0..steps {
            linear_backward(
                &self.params.projection,
                &mut grads.projection,
                &trace.feat[t * feat_dim..(t + 1) * feat_dim],
                &d_proj[t * p..(t + 1) * p],
                Some(&mut d_feat[t * feat_dim..(t + 1) * feat_dim]),
            );
        }
        let mut d_x = vec![F::zero(); ch * h * w];
        for cc in 0..ch {
            for y in 0..h {
                for t in 0..w {
                    d_x[(cc * h + y) * w + t] = d_feat[t * feat_dim + cc * h + y];
                }
            }
        }

        for (i, (layer, ct)) in cfg.conv.iter().zip(&trace.convs).enumerate().rev() {
            let out_c = layer.channels;
            let mut d_act = match &ct.pool_idx {
                Some(idx) => {
                    let mut d = vec![F::zero(); out_c * ct.h * ct.w];
                    for (&src, &g) in idx.iter().zip(&d_x) {
                        d[src as usize] += g;
                    }
                    d
                }
                None => d_x,
            };
            for (d, &a) in d_act.iter_mut().zip(&ct.act) {
                if a <= F::zero() {
                    *d = F::zero();
                }
            }
            let need_input_grad = i > 0;
            d_x = conv2d_same_backward(
                &ct.input,
                ct.in_c,
                ct.h,
                ct.w,
                &self.params.conv[i].weight,
                layer.kernel,
                &d_act,
                &mut grads.conv[i],
                need_input_grad,
            );
        }
        grads
    }
}

struct ConvTrace<F> {
    input: Vec<F>,
    in_c: usize,
    h: usize,
    w: usize,
    /// Post-ReLU activations before pooling.
    act: Vec<F>,
    /// Flat index into `act` of each pooled maximum.
    pool_idx: Option<Vec<u32>>,
}

struct Trace<F> {
    convs: Vec<ConvTrace<F>>,
    final_shape: (usize, usize, usize),
    feat: Vec<F>,
    /// Post-ReLU projection, `T × P`.
    proj: Vec<F>,
    fwd: GruTrace<F>,
    bwd: Option<GruTrace<F>>,
    rnn_out: Vec<F>,
    outputs: HeadOutputs,
}

/// `out = W x + b`.
fn linear<F: Real>(lp: &LinearParams<F>, x: &[F], out: &mut [F]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &lp.weight.data[i * n_in..(i + 1) * n_in];
        *o = lp.bias.data[i] + dot(row, x);
    }
}

/// Accumulates `dW += g xᵀ`, `db += g` and optionally `dx += Wᵀ g`.
fn linear_backward<F: Real>(
    lp: &LinearParams<F>,
    grads: &mut LinearParams<F>,
    x: &[F],
    g: &[F],
    dx: Option<&mut [F]>,
) {
    let n_in = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == F::zero() {
            continue;
        }
        grads.bias.data[i] += gi;
        axpy(gi, x, &mut grads.weight.data[i * n_in..(i + 1) * n_in]);
    }
    if let Some(dx) = dx {
        for (i, &gi) in g.iter().enumerate() {
            if gi != F::zero() {
                axpy(gi, &lp.weight.data[i * n_in..(i + 1) * n_in], dx);
            }
        }
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Same-padding 2-D convolution of a `[in_c, h, w]` map.
/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
struct Mat<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, F> Mat<'a, F> {
    fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }
    fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }
    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b + (accumulate ? out : 0)`, `out` row-major.
fn gemm<F: Real>(a: Mat<'_, F>, b: Mat<'_, F>, out: &mut [F], accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above pin every buffer to the extent the
    // dimensions and strides address.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `same`-padded `k×k` patches: row `(ic, ky, kx)`, column `(y, x)`.
fn im2col<F: Real>(input: &[F], in_c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![F::zero(); in_c * k * k * hw];
    for ic in 0..in_c {
        let src = &input[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(dx, w);
                let row = &mut col[((ic * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<F: Real>(col: &[F], in_c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![F::zero(); in_c * hw];
    for ic in 0..in_c {
        let dst = &mut out[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(dx, w);
                let row = &col[((ic * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, &g) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_same<F: Real>(
    input: &[F],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    k: usize,
) -> Vec<F> {
    let out_c = weight.shape[0];
    let hw = h * w;
    let col = im2col(input, in_c, h, w, k);
    let mut out = vec![F::zero(); out_c * hw];
    for (oc, plane) in out.chunks_exact_mut(hw.max(1)).enumerate() {
        plane.fill(bias.data[oc]);
    }
    gemm(
        Mat::new(&weight.data, out_c, in_c * k * k),
        Mat::new(&col, in_c * k * k, hw),
        &mut out,
        true,
    );
    out
}

/// Output positions whose shifted source index stays inside `[0, n)`.
#[inline]
fn valid_range(shift: isize, n: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_same_backward<F: Real>(
    input: &[F],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &Tensor<F>,
    k: usize,
    d_out: &[F],
    grads: &mut ConvParams<F>,
    need_input_grad: bool,
) -> Vec<F> {
    let out_c = weight.shape[0];
    let hw = h * w;
    let patch = in_c * k * k;
    for (oc, g_plane) in d_out.chunks_exact(hw.max(1)).enumerate() {
        grads.bias.data[oc] += g_plane.iter().copied().sum::<F>();
    }
    let col = im2col(input, in_c, h, w, k);
    let d_out_m = Mat::new(d_out, out_c, hw);
    gemm(d_out_m, Mat::new(&col, patch, hw).t(), &mut grads.weight.data, true);
    if !need_input_grad {
        return Vec::new();
    }
    let mut d_col = col;
    gemm(Mat::new(&weight.data, out_c, patch).t(), d_out_m, &mut d_col, false);
    col2im(&d_col, in_c, h, w, k)
}

/// 2×2 max-pool with stride 2; returns pooled map and argmax indices.
fn max_pool2<F: Real>(x: &[F], ch: usize, h: usize, w: usize) -> (Vec<F>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * ph * pw);
    let mut idx = Vec::with_capacity(ch * ph * pw);
    for cc in 0..ch {
        let base = cc * h * w;
        for y in 0..ph {
            for xx in 0..pw {
                let mut best = base + 2 * y * w + 2 * xx;
                for (oy, ox) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + oy) * w + 2 * xx + ox;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Stored activations of one GRU direction, indexed by processing order.
struct GruTrace<F> {
    hidden: usize,
    steps: usize,
    reverse: bool,
    /// `(T + 1) × H`, entry 0 is the zero initial state.
    h: Vec<F>,
    r: Vec<F>,
    z: Vec<F>,
    n: Vec<F>,
    /// `W_hn h + b_hn` per step.
    hn: Vec<F>,
}

impl<F: Real> GruTrace<F> {
    /// Hidden state emitted at sequence position `t`.
    fn output(&self, t: usize) -> &[F] {
        let k = if self.reverse { self.steps - 1 - t } else { t };
        &self.h[(k + 1) * self.hidden..(k + 2) * self.hidden]
    }
}

fn gru_forward<F: Real>(
    g: &GruParams<F>,
    xs: &[F],
    steps: usize,
    in_dim: usize,
    reverse: bool,
) -> GruTrace<F> {
    let hid = g.w_hh.shape[1];
    let mut tr = GruTrace {
        hidden: hid,
        steps,
        reverse,
        h: vec![F::zero(); (steps + 1) * hid],
        r: vec![F::zero(); steps * hid],
        z: vec![F::zero(); steps * hid],
        n: vec![F::zero(); steps * hid],
        hn: vec![F::zero(); steps * hid],
    };
    let mut gi = vec![F::zero(); 3 * hid];
    let mut gh = vec![F::zero(); 3 * hid];
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let x = &xs[t * in_dim..(t + 1) * in_dim];
        let (prev, rest) = tr.h.split_at_mut((k + 1) * hid);
        let h_prev = &prev[k * hid..];
        let h_next = &mut rest[..hid];
        for j in 0..3 * hid {
            gi[j] = g.b_ih.data[j] + dot(&g.w_ih.data[j * in_dim..(j + 1) * in_dim], x);
            gh[j] = g.b_hh.data[j] + dot(&g.w_hh.data[j * hid..(j + 1) * hid], h_prev);
        }
        for j in 0..hid {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[hid + j] + gh[hid + j]);
            let hn = gh[2 * hid + j];
            let n = (gi[2 * hid + j] + r * hn).tanh();
            h_next[j] = (F::one() - z) * n + z * h_prev[j];
            tr.r[k * hid + j] = r;
            tr.z[k * hid + j] = z;
            tr.n[k * hid + j] = n;
            tr.hn[k * hid + j] = hn;
        }
    }
    tr
}

/// Backpropagation through time. `d_out` is `T × H` in sequence order;
/// input gradients accumulate into `d_x`.
fn gru_backward<F: Real>(
    g: &GruParams<F>,
    grads: &mut GruParams<F>,
    tr: &GruTrace<F>,
    xs: &[F],
    d_out: &[F],
    d_x: &mut [F],
) {
    let hid = tr.hidden;
    let steps = tr.steps;
    let in_dim = g.w_ih.shape[1];
    let mut dh = vec![F::zero(); hid];
    let mut gi = vec![F::zero(); 3 * hid];
    let mut gh = vec![F::zero(); 3 * hid];
    for k in (0..steps).rev() {
        let t = if tr.reverse { steps - 1 - k } else { k };
        for j in 0..hid {
            dh[j] += d_out[t * hid + j];
        }
        let h_prev = &tr.h[k * hid..(k + 1) * hid];
        let mut dh_prev = vec![F::zero(); hid];
        for j in 0..hid {
            let i = k * hid + j;
            let (r, z, n, hn) = (tr.r[i], tr.z[i], tr.n[i], tr.hn[i]);
            let d = dh[j];
            let dn = d * (F::one() - z);
            let dz = d * (h_prev[j] - n);
            dh_prev[j] = d * z;
            let dn_pre = dn * (F::one() - n * n);
            let dr = dn_pre * hn;
            let dr_pre = dr * r * (F::one() - r);
            let dz_pre = dz * z * (F::one() - z);
            gi[j] = dr_pre;
            gi[hid + j] = dz_pre;
            gi[2 * hid + j] = dn_pre;
            gh[j] = dr_pre;
            gh[hid + j] = dz_pre;
            gh[2 * hid + j] = dn_pre * r;
        }
        let x = &xs[t * in_dim..(t + 1) * in_dim];
        let dx = &mut d_x[t * in_dim..(t + 1) * in_dim];
        for j in 0..3 * hid {
            let (a, b) = (gi[j], gh[j]);
            grads.b_ih.data[j] += a;
            grads.b_hh.data[j] += b;
            axpy(a, x, &mut grads.w_ih.data[j * in_dim..(j + 1) * in_dim]);
            axpy(a, &g.w_ih.data[j * in_dim..(j + 1) * in_dim], dx);
            axpy(b, h_prev, &mut grads.w_hh.data[j * hid..(j + 1) * hid]);
            axpy(b, &g.w_hh.data[j * hid..(j + 1) * hid], &mut dh_prev);
        }
        dh = dh_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(aux: bool) -> ModelConfig {
        ModelConfig {
            conv: vec![ConvLayer {
                channels: 2,
                kernel: 3,
                pool: true,
            }],
            projection: 4,
            hidden: 8,
            bidirectional: true,
            num_chars: 3,
            num_rows: 2,
            aux_head: aux,
            max_word_len: 3,
            seed: 5,
        }
    }

    fn probe(width: usize) -> Bitmap {
        let pixels = (0..GLYPH_SIZE * width)
            .map(|i| ((i * 37 + i / 7) % 256) as u8)
            .collect();
        Bitmap::new(GLYPH_SIZE, width, pixels)
    }

    #[test]
    fn initialization_is_deterministic() {
        let cfg = ModelConfig::standard(20, 5, true, 9);
        let a = Model::<f32>::new(cfg.clone()).unwrap();
        let b = Model::<f32>::new(cfg).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<_> = a.params.tensors().iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, param_shapes(&a.config));
    }

    #[test]
    fn baseline_has_no_row_head() {
        let m = Model::<f32>::new(ModelConfig::standard(20, 5, false, 9)).unwrap();
        assert!(m.params.row_head.is_none());
        assert!(!m.params.named().iter().any(|(n, _)| n.starts_with("row_head")));
        let out = m.forward(&probe(128)).unwrap();
        assert!(out.row.is_none());
    }

    #[test]
    fn baseline_and_proposed_share_trunk_at_init() {
        let base = Model::<f32>::new(ModelConfig::standard(20, 5, false, 3)).unwrap();
        let prop = Model::<f32>::new(ModelConfig::standard(20, 5, true, 3)).unwrap();
        assert_eq!(prop.without_row_head().params, base.params);
    }

    #[test]
    fn step_count_follows_width() {
        let cfg = ModelConfig::standard(20, 5, true, 0);
        assert_eq!(cfg.downsample(), 4);
        assert_eq!(cfg.steps_for_width(384), 96);
        assert!(96 >= 2 * 12 + 1);
        let m = Model::<f32>::new(cfg).unwrap();
        let out = m.forward(&probe(128)).unwrap();
        assert_eq!(out.char.steps(), 32);
        assert_eq!(out.row.as_ref().unwrap().steps(), 32);
        assert_eq!(out, m.forward(&probe(128)).unwrap());
    }

    #[test]
    fn outputs_are_normalized() {
        let m = Model::<f32>::new(ModelConfig::standard(20, 5, true, 1)).unwrap();
        let out = m.forward(&probe(96)).unwrap();
        for lp in [&out.char, out.row.as_ref().unwrap()] {
            for t in 0..lp.steps() {
                assert!(ctc::log_sum_exp(lp.row(t)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_configs_and_images() {
        let mut cfg = ModelConfig::standard(20, 5, true, 0);
        cfg.conv.extend((0..3).map(|_| ConvLayer {
            channels: 4,
            kernel: 3,
            pool: true,
        }));
        // D = 32 leaves one step per character.
        assert!(matches!(Model::<f32>::new(cfg), Err(NetError::Config(_))));
        let mut cfg = ModelConfig::standard(20, 5, true, 0);
        cfg.conv[0].kernel = 4;
        assert!(matches!(Model::<f32>::new(cfg), Err(NetError::Config(_))));

        let m = Model::<f32>::new(ModelConfig::standard(20, 5, true, 0)).unwrap();
        assert!(matches!(
            m.forward(&Bitmap::zeros(16, 64)),
            Err(NetError::ImageShape { .. })
        ));
        assert!(matches!(
            m.forward(&Bitmap::zeros(32, 30)),
            Err(NetError::ImageShape { .. })
        ));
    }

    #[test]
    fn removing_row_head_keeps_char_outputs() {
        let m = Model::<f64>::new(tiny_config(true)).unwrap();
        let img = probe(96);
        let with = m.forward(&img).unwrap();
        let without = m.without_row_head().forward(&img).unwrap();
        assert_eq!(with.char, without.char);
        assert!(without.row.is_none());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = Model::<f32>::new(tiny_config(true)).unwrap();
        let sample = WordSample {
            image: probe(96),
            chars: vec![0, 2, 1],
            rows: vec![0, 1, 1],
            writer_id: 0,
            word_id: 0,
        };
        let before = m.params.clone();
        let a = m.train_step(&sample, &StepOptions::sgd(0.0)).unwrap();
        let b = m.train_step(&sample, &StepOptions::sgd(0.0)).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.total, a.losses.char + a.losses.row.unwrap());
        assert_eq!(m.step, 2);
        assert!(matches!(
            m.train_step(&sample, &StepOptions::sgd(-1.0)),
            Err(NetError::LearningRate(_))
        ));
    }

    #[test]
    fn repeated_steps_reduce_char_loss() {
        let mut m = Model::<f32>::new(tiny_config(false)).unwrap();
        let sample = WordSample {
            image: probe(96),
            chars: vec![2, 0, 1],
            rows: vec![1, 0, 0],
            writer_id: 0,
            word_id: 0,
        };
        let initial = m.loss(&sample, 1.0).unwrap().char;
        for _ in 0..200 {
            m.train_step(&sample, &StepOptions::sgd(0.01)).unwrap();
        }
        let last = m.loss(&sample, 1.0).unwrap().char;
        assert!(last < initial, "{initial} -> {last}");
    }

    #[test]
    fn infeasible_sample_is_rejected() {
        let m = Model::<f64>::new(tiny_config(false)).unwrap();
        // 32 px wide, D = 2: 16 steps cannot emit 17 labels.
        let sample = WordSample {
            image: probe(32),
            chars: vec![0; 9],
            rows: vec![0; 9],
            writer_id: 0,
            word_id: 0,
        };
        assert!(matches!(
            m.gradients(&sample, 1.0),
            Err(NetError::Ctc(CtcError::Infeasible { .. }))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = Model::<f64>::new(tiny_config(true)).unwrap();
        let sample = WordSample {
            image: probe(64),
            chars: vec![2, 0, 0],
            rows: vec![1, 0, 0],
            writer_id: 0,
            word_id: 0,
        };
        let (_, grads, _) = model.gradients(&sample, 1.0).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe_model = model.clone();
        let grad_tensors: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
        for (ti, g) in grad_tensors.iter().enumerate() {
            // every eighth value keeps the unit test quick; the acceptance
            // suite checks all of them
            for i in (0..g.data.len()).step_by(8) {
                let orig = probe_model.params.tensors_mut()[ti].data[i];
                probe_model.params.tensors_mut()[ti].data[i] = orig + h;
                let up = probe_model.loss(&sample, 1.0).unwrap().total;
                probe_model.params.tensors_mut()[ti].data[i] = orig - h;
                let down = probe_model.loss(&sample, 1.0).unwrap().total;
                probe_model.params.tensors_mut()[ti].data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.data[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
