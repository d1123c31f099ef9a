//! Deterministic desk-scale toy model.
//!
//! Encoder: linear patch embedding + learned positional embeddings, a stack
//! of pre-norm transformer blocks (single-head attention, GELU MLP), final
//! layer norm. Decoder: the prompt maps to a feature vector via Fourier
//! positional features and a learned projection; per-pixel logits are the
//! bilinearly upsampled similarity field between that vector and the
//! embedding grid, under a calibrated affine.
//!
//! Every stage is smooth, and each has a hand-derived reverse pass, so input
//! gradients are exact (finite-difference checks hold to ~1e-6 relative).

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_input_resolution, DecPullback, EncPullback, SegModel};
use crate::error::{Error, Result};
use crate::math;
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits, Prompt};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. The defaults keep full attack sweeps and
/// finite-difference checks in the seconds range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyArch {
    pub input_h: usize,
    pub input_w: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub fourier_freqs: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            patch_size: 8,
            dim: 64,
            blocks: 2,
            mlp_hidden: 128,
            fourier_freqs: 4,
        }
    }
}

impl ToyArch {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 || self.mlp_hidden == 0 || self.fourier_freqs == 0
        {
            return Err(Error::config("toy arch sizes must be positive"));
        }
        if self.input_h % self.patch_size != 0 || self.input_w % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by patch size {}",
                self.input_h, self.input_w, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn tokens_h(&self) -> usize {
        self.input_h / self.patch_size
    }

    pub fn tokens_w(&self) -> usize {
        self.input_w / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.tokens_h() * self.tokens_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * ImageTensor::CHANNELS
    }

    pub fn prompt_feat_dim(&self) -> usize {
        2 + 4 * self.fourier_freqs
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ToyParams {
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf: LayerNorm,
    pub prompt_w: Array2<f64>,
    pub prompt_b: Array1<f64>,
    pub logit_scale: f64,
    pub logit_offset: f64,
}

fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn init_params(arch: &ToyArch, seed: u64) -> ToyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = arch.dim;
    let ln = |dim: usize| LayerNorm {
        gamma: Array1::ones(dim),
        beta: Array1::zeros(dim),
    };
    let patch_w = randn2(&mut rng, arch.patch_dim(), d, 1.0 / (arch.patch_dim() as f64).sqrt());
    let pos = randn2(&mut rng, arch.tokens(), d, 0.02);
    let blocks = (0..arch.blocks)
        .map(|_| {
            let std = 1.0 / (d as f64).sqrt();
            BlockParams {
                ln1: ln(d),
                wq: randn2(&mut rng, d, d, std),
                bq: Array1::zeros(d),
                wk: randn2(&mut rng, d, d, std),
                bk: Array1::zeros(d),
                wv: randn2(&mut rng, d, d, std),
                bv: Array1::zeros(d),
                wo: randn2(&mut rng, d, d, std),
                bo: Array1::zeros(d),
                ln2: ln(d),
                w1: randn2(&mut rng, d, arch.mlp_hidden, std),
                b1: Array1::zeros(arch.mlp_hidden),
                w2: randn2(&mut rng, arch.mlp_hidden, d, 1.0 / (arch.mlp_hidden as f64).sqrt()),
                b2: Array1::zeros(d),
            }
        })
        .collect();
    let prompt_w = randn2(
        &mut rng,
        arch.prompt_feat_dim(),
        d,
        1.0 / (arch.prompt_feat_dim() as f64).sqrt(),
    );
    ToyParams {
        patch_w,
        patch_b: Array1::zeros(d),
        pos,
        blocks,
        lnf: ln(d),
        prompt_w,
        prompt_b: Array1::zeros(d),
        logit_scale: 1.0,
        logit_offset: 0.0,
    }
}

struct LnTape {
    xhat: Array2<f64>,
    inv: Vec<f64>,
}

fn layernorm_fwd(x: &Array2<f64>, ln: &LayerNorm, want_tape: bool) -> (Array2<f64>, Option<LnTape>) {
    let (rows, dim) = x.dim();
    let mut y = Array2::zeros((rows, dim));
    let mut xhat = Array2::zeros((rows, dim));
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = istd;
        for c in 0..dim {
            let xh = (x[(r, c)] - mean) * istd;
            xhat[(r, c)] = xh;
            y[(r, c)] = ln.gamma[c] * xh + ln.beta[c];
        }
    }
    let tape = want_tape.then_some(LnTape { xhat, inv });
    (y, tape)
}

fn layernorm_bwd(d_y: &Array2<f64>, ln: &LayerNorm, tape: &LnTape) -> Array2<f64> {
    let (rows, dim) = d_y.dim();
    let mut d_x = Array2::zeros((rows, dim));
    for r in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..dim {
            let dxh = d_y[(r, c)] * ln.gamma[c];
            m1 += dxh;
            m2 += dxh * tape.xhat[(r, c)];
        }
        m1 /= dim as f64;
        m2 /= dim as f64;
        for c in 0..dim {
            let dxh = d_y[(r, c)] * ln.gamma[c];
            d_x[(r, c)] = tape.inv[r] * (dxh - m1 - tape.xhat[(r, c)] * m2);
        }
    }
    d_x
}

/// `x (rows,in) · w (in,out) + b`.
fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = math::matmul(x, w);
    for mut row in y.rows_mut() {
        row += b;
    }
    y
}

struct BlockTape {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Array2<f64>,
    m1: Array2<f64>,
    ln1: LnTape,
    ln2: LnTape,
}

struct EncTape {
    blocks: Vec<BlockTape>,
    lnf: LnTape,
}

/// The toy segmentation model. Construction is deterministic in the seed;
/// evaluation is read-only and thread-safe.
#[derive(Debug, Clone)]
pub struct ToyModel {
    arch: ToyArch,
    params: ToyParams,
    identity: String,
}

impl ToyModel {
    /// Seed-initialized model with the default architecture and decoder
    /// calibration applied (non-degenerate masks).
    pub fn seeded(seed: u64) -> Self {
        let mut m = Self::uncalibrated(ToyArch::default(), seed);
        super::calibrate::calibrate_decoder(&mut m, seed);
        m.identity = format!("toy-s{seed}");
        m
    }

    /// Seed-initialized model without decoder calibration.
    pub fn uncalibrated(arch: ToyArch, seed: u64) -> Self {
        arch.validate().expect("valid toy arch");
        let params = init_params(&arch, seed);
        Self {
            arch,
            params,
            identity: format!("toy-s{seed}-uncal"),
        }
    }

    pub fn with_arch(arch: ToyArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = init_params(&arch, seed);
        let mut m = Self {
            arch,
            params,
            identity: String::new(),
        };
        super::calibrate::calibrate_decoder(&mut m, seed);
        m.identity = format!("toy-s{seed}");
        Ok(m)
    }

    pub fn arch(&self) -> &ToyArch {
        &self.arch
    }

    pub(crate) fn params(&self) -> &ToyParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ToyParams {
        &mut self.params
    }

    pub(crate) fn set_identity(&mut self, id: String) {
        self.identity = id;
    }

    pub(crate) fn set_logit_affine(&mut self, scale: f64, offset: f64) {
        self.params.logit_scale = scale;
        self.params.logit_offset = offset;
    }

    fn extract_patches(&self, image: &ImageTensor) -> Array2<f64> {
        let p = self.arch.patch_size;
        let (th, tw) = (self.arch.tokens_h(), self.arch.tokens_w());
        let data = image.data();
        let mut patches = Array2::zeros((self.arch.tokens(), self.arch.patch_dim()));
        for ty in 0..th {
            for tx in 0..tw {
                let t = ty * tw + tx;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..ImageTensor::CHANNELS {
                            patches[(t, (py * p + px) * ImageTensor::CHANNELS + c)] =
                                data[(ty * p + py, tx * p + px, c)];
                        }
                    }
                }
            }
        }
        patches
    }

    fn scatter_patches(&self, d_patches: &Array2<f64>) -> Array3<f64> {
        let p = self.arch.patch_size;
        let (th, tw) = (self.arch.tokens_h(), self.arch.tokens_w());
        let mut d_img = Array3::zeros((self.arch.input_h, self.arch.input_w, ImageTensor::CHANNELS));
        for ty in 0..th {
            for tx in 0..tw {
                let t = ty * tw + tx;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..ImageTensor::CHANNELS {
                            d_img[(ty * p + py, tx * p + px, c)] =
                                d_patches[(t, (py * p + px) * ImageTensor::CHANNELS + c)];
                        }
                    }
                }
            }
        }
        d_img
    }

    fn block_fwd(&self, bp: &BlockParams, x: &Array2<f64>, want_tape: bool) -> (Array2<f64>, Option<BlockTape>) {
        let inv_sqrt_d = 1.0 / (self.arch.dim as f64).sqrt();
        let (h1, ln1_tape) = layernorm_fwd(x, &bp.ln1, want_tape);
        let q = linear(&h1, &bp.wq, &bp.bq);
        let k = linear(&h1, &bp.wk, &bp.bk);
        let v = linear(&h1, &bp.wv, &bp.bv);
        let mut att = math::matmul_transb(&q, &k);
        att.mapv_inplace(|s| s * inv_sqrt_d);
        math::softmax_rows(&mut att);
        let ao = math::matmul(&att, &v);
        let aout = linear(&ao, &bp.wo, &bp.bo);
        let x2 = x + &aout;

        let (h2, ln2_tape) = layernorm_fwd(&x2, &bp.ln2, want_tape);
        let m1 = linear(&h2, &bp.w1, &bp.b1);
        let g = m1.mapv(math::gelu);
        let m2 = linear(&g, &bp.w2, &bp.b2);
        let x3 = &x2 + &m2;

        let tape = want_tape.then(|| BlockTape {
            q,
            k,
            v,
            att,
            m1,
            ln1: ln1_tape.unwrap(),
            ln2: ln2_tape.unwrap(),
        });
        (x3, tape)
    }

    fn block_bwd(&self, bp: &BlockParams, tape: &BlockTape, d_x3: &Array2<f64>) -> Array2<f64> {
        let inv_sqrt_d = 1.0 / (self.arch.dim as f64).sqrt();

        // MLP branch: x3 = x2 + w2·gelu(w1·ln2(x2))
        let d_g = math::matmul_transb(d_x3, &bp.w2);
        let mut d_m1 = d_g;
        d_m1.zip_mut_with(&tape.m1, |dg, &m| *dg *= math::gelu_grad(m));
        let d_h2 = math::matmul_transb(&d_m1, &bp.w1);
        let d_x2 = d_x3 + &layernorm_bwd(&d_h2, &bp.ln2, &tape.ln2);

        // attention branch: x2 = x1 + wo·(softmax(q·kᵀ/√d)·v)
        let d_ao = math::matmul_transb(&d_x2, &bp.wo);
        let d_att = math::matmul_transb(&d_ao, &tape.v);
        let d_v = math::matmul_transa(&tape.att, &d_ao);
        let rows = d_att.dim().0;
        let mut d_scores = Array2::zeros(d_att.dim());
        for r in 0..rows {
            let dot: f64 = d_att
                .row(r)
                .iter()
                .zip(tape.att.row(r).iter())
                .map(|(a, b)| a * b)
                .sum();
            for c in 0..d_att.dim().1 {
                d_scores[(r, c)] = tape.att[(r, c)] * (d_att[(r, c)] - dot);
            }
        }
        let mut d_q = math::matmul(&d_scores, &tape.k);
        d_q.mapv_inplace(|v| v * inv_sqrt_d);
        let mut d_k = math::matmul_transa(&d_scores, &tape.q);
        d_k.mapv_inplace(|v| v * inv_sqrt_d);

        let d_h1 = math::matmul_transb(&d_q, &bp.wq)
            + math::matmul_transb(&d_k, &bp.wk)
            + math::matmul_transb(&d_v, &bp.wv);
        &d_x2 + &layernorm_bwd(&d_h1, &bp.ln1, &tape.ln1)
    }

    fn encode_tokens(&self, image: &ImageTensor, want_tape: bool) -> (Array2<f64>, Option<EncTape>) {
        let patches = self.extract_patches(image);
        let mut x = linear(&patches, &self.params.patch_w, &self.params.patch_b);
        x += &self.params.pos;
        let mut block_tapes = Vec::with_capacity(self.params.blocks.len());
        for bp in &self.params.blocks {
            let (nx, tape) = self.block_fwd(bp, &x, want_tape);
            x = nx;
            if let Some(t) = tape {
                block_tapes.push(t);
            }
        }
        let (y, lnf_tape) = layernorm_fwd(&x, &self.params.lnf, want_tape);
        let tape = want_tape.then(|| EncTape {
            blocks: block_tapes,
            lnf: lnf_tape.unwrap(),
        });
        (y, tape)
    }

    fn encoder_backward(&self, tape: &EncTape, d_grid: &Array3<f64>) -> Array3<f64> {
        let (th, tw) = (self.arch.tokens_h(), self.arch.tokens_w());
        let d = self.arch.dim;
        let mut d_tok = Array2::zeros((self.arch.tokens(), d));
        for ty in 0..th {
            for tx in 0..tw {
                for c in 0..d {
                    d_tok[(ty * tw + tx, c)] = d_grid[(ty, tx, c)];
                }
            }
        }
        let mut d_x = layernorm_bwd(&d_tok, &self.params.lnf, &tape.lnf);
        for (bp, bt) in self.params.blocks.iter().zip(&tape.blocks).rev() {
            d_x = self.block_bwd(bp, bt, &d_x);
        }
        let d_patches = math::matmul_transb(&d_x, &self.params.patch_w);
        self.scatter_patches(&d_patches)
    }

    fn tokens_to_grid(&self, tokens: &Array2<f64>) -> Array3<f64> {
        let (th, tw) = (self.arch.tokens_h(), self.arch.tokens_w());
        let d = self.arch.dim;
        Array3::from_shape_fn((th, tw, d), |(ty, tx, c)| tokens[(ty * tw + tx, c)])
    }

    /// Fourier positional features of a (sub-pixel) point.
    fn point_features(&self, x: f64, y: f64) -> Vec<f64> {
        let u = (x + 0.5) / self.arch.input_w as f64;
        let v = (y + 0.5) / self.arch.input_h as f64;
        let mut feats = Vec::with_capacity(self.arch.prompt_feat_dim());
        feats.push(u);
        feats.push(v);
        for f in 0..self.arch.fourier_freqs {
            let freq = (1u64 << f) as f64 * std::f64::consts::TAU;
            feats.push((freq * u).sin());
            feats.push((freq * u).cos());
            feats.push((freq * v).sin());
            feats.push((freq * v).cos());
        }
        feats
    }

    fn prompt_features(&self, prompt: &Prompt) -> Vec<f64> {
        match *prompt {
            Prompt::Point { x, y } => self.point_features(x as f64, y as f64),
            // pooled positional feature: mean over four corners and center
            Prompt::Box { x1, y1, x2, y2 } => {
                let (x1, y1, x2, y2) = (x1 as f64, y1 as f64, x2 as f64, y2 as f64);
                let pts = [
                    (x1, y1),
                    (x2, y1),
                    (x1, y2),
                    (x2, y2),
                    ((x1 + x2) / 2.0, (y1 + y2) / 2.0),
                ];
                let mut acc = vec![0.0; self.arch.prompt_feat_dim()];
                for (px, py) in pts {
                    for (a, f) in acc.iter_mut().zip(self.point_features(px, py)) {
                        *a += f / pts.len() as f64;
                    }
                }
                acc
            }
        }
    }

    /// Prompt embedding vector (tanh of a learned projection of the
    /// positional features).
    fn prompt_vector(&self, prompt: &Prompt) -> Array1<f64> {
        let feats = self.prompt_features(prompt);
        let mut out = self.params.prompt_b.clone();
        for (i, &f) in feats.iter().enumerate() {
            for c in 0..self.arch.dim {
                out[c] += f * self.params.prompt_w[(i, c)];
            }
        }
        out.mapv_inplace(f64::tanh);
        out
    }

    /// Similarity field between the embedding grid and a prompt vector,
    /// centered on its grid mean (the decoder scores each cell's response
    /// relative to the image's average response to the prompt).
    fn similarity_field(&self, embedding: &Array3<f64>, p: &Array1<f64>) -> Array2<f64> {
        let (th, tw, d) = embedding.dim();
        let mut field = Array2::from_shape_fn((th, tw), |(ty, tx)| {
            (0..d).map(|c| embedding[(ty, tx, c)] * p[c]).sum()
        });
        let mean = field.sum() / (th * tw) as f64;
        field.mapv_inplace(|v| v - mean);
        field
    }

    fn upsample_field(&self, field: &Array2<f64>) -> Array2<f64> {
        let (th, tw) = field.dim();
        let (h, w) = (self.arch.input_h, self.arch.input_w);
        let ys = math::bilinear_axis(th, h);
        let xs = math::bilinear_axis(tw, w);
        let mut out = Array2::zeros((h, w));
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                out[(oy, ox)] = self.params.logit_scale
                    * (wy0 * wx0 * field[(y0, x0)]
                        + wy0 * wx1 * field[(y0, x1)]
                        + wy1 * wx0 * field[(y1, x0)]
                        + wy1 * wx1 * field[(y1, x1)])
                    + self.params.logit_offset;
            }
        }
        out
    }

    fn check_embedding(&self, embedding: &EmbeddingGrid) -> Result<()> {
        let expect = self.embedding_shape();
        let got = (embedding.grid_h(), embedding.grid_w(), embedding.dim());
        if got != expect {
            return Err(Error::input(format!(
                "embedding shape {got:?} does not match model {} shape {expect:?}",
                self.identity
            )));
        }
        Ok(())
    }

    /// Raw (pre-affine) similarity values for calibration.
    pub(crate) fn raw_similarity(&self, image: &ImageTensor, prompt: &Prompt) -> Result<Vec<f64>> {
        check_input_resolution(self, image)?;
        prompt.validate(self.arch.input_h, self.arch.input_w)?;
        let (tokens, _) = self.encode_tokens(image, false);
        let grid = self.tokens_to_grid(&tokens);
        let p = self.prompt_vector(prompt);
        let field = self.similarity_field(&grid, &p);
        let (th, tw) = field.dim();
        let ys = math::bilinear_axis(th, self.arch.input_h);
        let xs = math::bilinear_axis(tw, self.arch.input_w);
        let mut vals = Vec::with_capacity(self.arch.input_h * self.arch.input_w);
        for &(y0, y1, wy0, wy1) in &ys {
            for &(x0, x1, wx0, wx1) in &xs {
                vals.push(
                    wy0 * wx0 * field[(y0, x0)]
                        + wy0 * wx1 * field[(y0, x1)]
                        + wy1 * wx0 * field[(y1, x0)]
                        + wy1 * wx1 * field[(y1, x1)],
                );
            }
        }
        Ok(vals)
    }
}

impl SegModel for ToyModel {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn patch_size(&self) -> usize {
        self.arch.patch_size
    }

    fn input_resolution(&self) -> (usize, usize) {
        (self.arch.input_h, self.arch.input_w)
    }

    fn embedding_shape(&self) -> (usize, usize, usize) {
        (self.arch.tokens_h(), self.arch.tokens_w(), self.arch.dim)
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<EmbeddingGrid> {
        check_input_resolution(self, image)?;
        let (tokens, _) = self.encode_tokens(image, false);
        EmbeddingGrid::new(self.tokens_to_grid(&tokens))
    }

    fn decode_mask(&self, embedding: &EmbeddingGrid, prompt: &Prompt) -> Result<MaskLogits> {
        self.check_embedding(embedding)?;
        prompt.validate(self.arch.input_h, self.arch.input_w)?;
        let p = self.prompt_vector(prompt);
        let field = self.similarity_field(embedding.data(), &p);
        MaskLogits::new(self.upsample_field(&field))
    }

    fn encode_with_pullback<'a>(
        &'a self,
        image: &ImageTensor,
    ) -> Result<(EmbeddingGrid, EncPullback<'a>)> {
        check_input_resolution(self, image)?;
        let (tokens, tape) = self.encode_tokens(image, true);
        let tape = tape.expect("tape requested");
        let grid = EmbeddingGrid::new(self.tokens_to_grid(&tokens))?;
        let pb: EncPullback<'a> = Box::new(move |d_emb: &Array3<f64>| {
            Ok(self.encoder_backward(&tape, d_emb))
        });
        Ok((grid, pb))
    }

    fn decode_with_pullback<'a>(
        &'a self,
        embedding: &EmbeddingGrid,
        prompt: &Prompt,
    ) -> Result<(MaskLogits, DecPullback<'a>)> {
        self.check_embedding(embedding)?;
        prompt.validate(self.arch.input_h, self.arch.input_w)?;
        let p = self.prompt_vector(prompt);
        let field = self.similarity_field(embedding.data(), &p);
        let logits = MaskLogits::new(self.upsample_field(&field))?;
        let (th, tw) = (self.arch.tokens_h(), self.arch.tokens_w());
        let dim = self.arch.dim;
        let (h, w) = (self.arch.input_h, self.arch.input_w);
        let scale = self.params.logit_scale;
        let pb: DecPullback<'a> = Box::new(move |d_logits: &Array2<f64>| {
            let ys = math::bilinear_axis(th, h);
            let xs = math::bilinear_axis(tw, w);
            let mut d_field = Array2::<f64>::zeros((th, tw));
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    let g = scale * d_logits[(oy, ox)];
                    d_field[(y0, x0)] += wy0 * wx0 * g;
                    d_field[(y0, x1)] += wy0 * wx1 * g;
                    d_field[(y1, x0)] += wy1 * wx0 * g;
                    d_field[(y1, x1)] += wy1 * wx1 * g;
                }
            }
            // back through the grid-mean centering
            let mean = d_field.sum() / (th * tw) as f64;
            d_field.mapv_inplace(|v| v - mean);
            let mut d_emb = Array3::zeros((th, tw, dim));
            for ty in 0..th {
                for tx in 0..tw {
                    let ds = d_field[(ty, tx)];
                    for c in 0..dim {
                        d_emb[(ty, tx, c)] = ds * p[c];
                    }
                }
            }
            Ok(d_emb)
        });
        Ok((logits, pb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearEmbedding;
    use crate::synth;

    #[test]
    fn encode_deterministic_and_pure() {
        let m = ToyModel::seeded(0);
        let img = ImageTensor::zeros(32, 32);
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&img).unwrap();
        assert_eq!(a, b, "repeated encode must be bitwise identical");
        let copy = img.clone();
        let c = m.encode_image(&copy).unwrap();
        assert_eq!(a, c, "encode must be a pure function of the pixels");
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let m = ToyModel::seeded(0);
        let img = ImageTensor::zeros(16, 32);
        let err = m.encode_image(&img).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32x32") && msg.contains("16x32"), "got: {msg}");
    }

    #[test]
    fn embedding_shape_independent_of_content() {
        let m = ToyModel::seeded(3);
        for seed in 0..4 {
            let img = synth::shapes_image(seed, 32, 32);
            let e = m.encode_image(&img).unwrap();
            assert_eq!((e.grid_h(), e.grid_w(), e.dim()), m.embedding_shape());
        }
    }

    #[test]
    fn decode_deterministic_and_prompt_sensitive() {
        let m = ToyModel::seeded(0);
        let img = synth::shapes_image(7, 32, 32);
        let e = m.encode_image(&img).unwrap();
        let p1 = Prompt::point(4, 5);
        let p2 = Prompt::point(27, 20);
        let l1 = m.decode_mask(&e, &p1).unwrap();
        let l1b = m.decode_mask(&e, &p1).unwrap();
        assert_eq!(l1, l1b);
        let l2 = m.decode_mask(&e, &p2).unwrap();
        assert_ne!(l1, l2, "distinct prompts should change at least one logit");
        assert_eq!((l1.height(), l1.width()), (32, 32));
    }

    #[test]
    fn decode_rejects_out_of_bounds_prompt() {
        let m = ToyModel::seeded(0);
        let e = m.encode_image(&ImageTensor::zeros(32, 32)).unwrap();
        let err = m.decode_mask(&e, &Prompt::point(40, 2)).unwrap_err();
        assert!(err.to_string().contains("40"), "coordinates in message");
    }

    #[test]
    fn box_extent_changes_mask_size() {
        let m = ToyModel::seeded(0);
        let img = synth::shapes_image(3, 32, 32);
        let e = m.encode_image(&img).unwrap();
        let whole = m.decode_mask(&e, &Prompt::bbox(0, 0, 31, 31)).unwrap();
        let tiny = m.decode_mask(&e, &Prompt::bbox(15, 15, 16, 16)).unwrap();
        let count = |l: &MaskLogits| l.as_slice().iter().filter(|v| **v > 0.0).count();
        assert_ne!(count(&whole), count(&tiny));
    }

    #[test]
    fn forward_equals_composition() {
        let m = ToyModel::seeded(1);
        let img = synth::shapes_image(5, 32, 32);
        let p = Prompt::point(10, 12);
        let direct = m.forward(&img, &p).unwrap();
        let composed = m.decode_mask(&m.encode_image(&img).unwrap(), &p).unwrap();
        assert_eq!(direct, composed);
    }

    #[test]
    fn calibrated_masks_are_nondegenerate() {
        let m = ToyModel::seeded(0);
        let img = synth::shapes_image(11, 32, 32);
        let logits = m.forward(&img, &Prompt::point(16, 16)).unwrap();
        let pos = logits.as_slice().iter().filter(|v| **v > 0.0).count();
        assert!(pos > 0, "calibrated toy decoder should mask some pixels");
        assert!(pos < 32 * 32, "and leave some background");
    }

    #[test]
    fn constant_objective_gives_zero_gradient() {
        struct Constant;
        impl crate::model::Objective for Constant {
            fn eval(
                &self,
                e: &EmbeddingGrid,
                _l: &[MaskLogits],
            ) -> Result<crate::model::ObjectiveEval> {
                Ok(crate::model::ObjectiveEval {
                    value: 1.25,
                    d_embedding: Some(Array3::zeros(e.data().dim())),
                    d_logits: vec![],
                })
            }
        }
        let m = ToyModel::seeded(0);
        let img = synth::shapes_image(1, 32, 32);
        let eval = m.input_gradient(&img, &Constant).unwrap();
        assert!(eval.pixel_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn embedding_sum_gradient_matches_central_differences() {
        let m = ToyModel::seeded(0);
        let img = synth::shapes_image(2, 32, 32);
        let (gh, gw, gd) = m.embedding_shape();
        let obj = LinearEmbedding {
            weights: Array3::ones((gh, gw, gd)),
        };
        let eval = m.input_gradient(&img, &obj).unwrap();

        let loss = |im: &ImageTensor| -> f64 { m.encode_image(im).unwrap().flat().iter().sum() };
        let h = 1e-3;
        let mut checked = 0;
        for &(y, x, c) in &[(0usize, 0usize, 0usize), (5, 9, 1), (13, 22, 2), (31, 31, 0), (17, 3, 1)] {
            let mut up = img.data().clone();
            up[(y, x, c)] += h;
            let mut dn = img.data().clone();
            dn[(y, x, c)] -= h;
            let fd = (loss(&ImageTensor::from_clamped(up).unwrap())
                - loss(&ImageTensor::from_clamped(dn).unwrap()))
                / (2.0 * h);
            let an = eval.pixel_grad[(y, x, c)];
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "rel err {rel} at ({y},{x},{c}): an={an} fd={fd}");
            checked += 1;
        }
        assert_eq!(checked, 5);
    }
}
