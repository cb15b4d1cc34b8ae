//! Toy visual encoder with learnable anatomy query tokens.
//!
//! Token sequence: `[CLS, G*G patch tokens, M query tokens]`. Patches are the
//! grid cells projected from F channels to width D; the CLS token is its
//! positional embedding alone; query `k` is `queries[k]` plus its positional
//! embedding. The sequence passes through E pre-norm blocks
//! (`x + attn(ln(x))`, then `x + mlp(ln(x))`) and a final layer norm.
//!
//! Heads on the final states `y`:
//! - boxes: `sigmoid(W2 gelu(W1 y_q))` read as center-size `(cx, cy, w, h)`;
//! - regions: `normalize(fusion([region_proj(y_q); mean(y_patches)]))`;
//! - CLS: `normalize(cls_proj(y_0))`.
//!
//! All gradients are hand-derived; the `gradcheck` module checks them
//! against central differences.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Grid;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{dot, l2_normalize, l2_normalize_backward, matmul, matmul_at, matmul_bt, sigmoid, Mat};
use crate::textembed::fnv1a64;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub grid_size: usize,
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_queries: usize,
    pub text_dim: usize,
    /// Temperature applied to region/sentence cosine similarities.
    pub temperature: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            channels: 16,
            width: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            num_queries: 29,
            text_dim: 64,
            temperature: 0.07,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_size", self.grid_size),
            ("channels", self.channels),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_queries", self.num_queries),
            ("text_dim", self.text_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be > 0".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches() + self.num_queries
    }

    fn query_offset(&self) -> usize {
        1 + self.num_patches()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Mat,
    /// `1 x out`
    pub bias: Mat,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
            bias: Mat::zeros(1, output),
        }
    }

    fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.weight);
        for i in 0..y.rows {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias.data) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.weight.add_assign(&matmul_at(x, dy));
        for i in 0..dy.rows {
            for (g, d) in grad.bias.data.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        matmul_bt(dy, &self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Mat,
    pub bias: Mat,
}

struct LayerNormCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gain: Mat::from_vec(1, width, vec![1.0; width]),
            bias: Mat::zeros(1, width),
        }
    }

    fn zeros(width: usize) -> Self {
        Self {
            gain: Mat::zeros(1, width),
            bias: Mat::zeros(1, width),
        }
    }

    fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols as f64;
        let mut y = x.zeros_like();
        let mut xhat = x.zeros_like();
        let mut rstd = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let out = y.row_mut(i);
            for j in 0..x.cols {
                out[j] = xhat.data[i * x.cols + j] * self.gain.data[j] + self.bias.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let n = dy.cols;
        let mut dx = dy.zeros_like();
        let mut dxhat = vec![0.0; n];
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..n {
                grad.gain.data[j] += dyr[j] * xh[j];
                grad.bias.data[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gain.data[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
            let mean_dx = dot(&dxhat, xh) / n as f64;
            let r = cache.rstd[i];
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(d),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            attn_out: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            mlp_in: Linear::zeros(d, hidden),
            mlp_out: Linear::zeros(hidden, d),
        }
    }
}

/// All trainable tensors of the encoder (and, with the same layout, their
/// gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_proj: Linear,
    pub pos_embed: Mat,
    pub queries: Mat,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub box_hidden: Linear,
    pub box_out: Linear,
    pub region_proj: Linear,
    pub fusion: Linear,
    pub cls_proj: Linear,
    /// Log of the multiplier applied to CLS/disease cosine similarities.
    pub logit_scale: Mat,
}

impl EncoderParams {
    /// All tensors zero (layer-norm gains included); the layout used for
    /// gradient accumulators.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        Self {
            config: config.clone(),
            patch_proj: Linear::zeros(config.channels, d),
            pos_embed: Mat::zeros(config.seq_len(), d),
            queries: Mat::zeros(config.num_queries, d),
            blocks: (0..config.blocks).map(|_| Block::zeros(d, hidden)).collect(),
            ln_final: LayerNorm::zeros(d),
            box_hidden: Linear::zeros(d, d),
            box_out: Linear::zeros(d, 4),
            region_proj: Linear::zeros(d, d),
            fusion: Linear::zeros(2 * d, config.text_dim),
            cls_proj: Linear::zeros(d, config.text_dim),
            logit_scale: Mat::zeros(1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Visits every tensor in a fixed order with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat)) {
        fn lin<'a>(p: &str, l: &'a Linear, f: &mut dyn FnMut(String, &'a Mat)) {
            f(format!("{p}.weight"), &l.weight);
            f(format!("{p}.bias"), &l.bias);
        }
        fn ln<'a>(p: &str, l: &'a LayerNorm, f: &mut dyn FnMut(String, &'a Mat)) {
            f(format!("{p}.gain"), &l.gain);
            f(format!("{p}.bias"), &l.bias);
        }
        lin("patch_proj", &self.patch_proj, f);
        f("pos_embed".into(), &self.pos_embed);
        f("queries".into(), &self.queries);
        for (i, b) in self.blocks.iter().enumerate() {
            ln(&format!("blocks.{i}.ln1"), &b.ln1, f);
            lin(&format!("blocks.{i}.query"), &b.query, f);
            lin(&format!("blocks.{i}.key"), &b.key, f);
            lin(&format!("blocks.{i}.value"), &b.value, f);
            lin(&format!("blocks.{i}.attn_out"), &b.attn_out, f);
            ln(&format!("blocks.{i}.ln2"), &b.ln2, f);
            lin(&format!("blocks.{i}.mlp_in"), &b.mlp_in, f);
            lin(&format!("blocks.{i}.mlp_out"), &b.mlp_out, f);
        }
        ln("ln_final", &self.ln_final, f);
        lin("box_hidden", &self.box_hidden, f);
        lin("box_out", &self.box_out, f);
        lin("region_proj", &self.region_proj, f);
        lin("fusion", &self.fusion, f);
        lin("cls_proj", &self.cls_proj, f);
        f("logit_scale".into(), &self.logit_scale);
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m)));
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::visit`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut Mat>) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        fn ln<'a>(l: &'a mut LayerNorm, out: &mut Vec<&'a mut Mat>) {
            out.push(&mut l.gain);
            out.push(&mut l.bias);
        }
        lin(&mut self.patch_proj, &mut out);
        out.push(&mut self.pos_embed);
        out.push(&mut self.queries);
        for b in self.blocks.iter_mut() {
            ln(&mut b.ln1, &mut out);
            lin(&mut b.query, &mut out);
            lin(&mut b.key, &mut out);
            lin(&mut b.value, &mut out);
            lin(&mut b.attn_out, &mut out);
            ln(&mut b.ln2, &mut out);
            lin(&mut b.mlp_in, &mut out);
            lin(&mut b.mlp_out, &mut out);
        }
        ln(&mut self.ln_final, &mut out);
        lin(&mut self.box_hidden, &mut out);
        lin(&mut self.box_out, &mut out);
        lin(&mut self.region_proj, &mut out);
        lin(&mut self.fusion, &mut out);
        lin(&mut self.cls_proj, &mut out);
        out.push(&mut self.logit_scale);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, m| out.extend_from_slice(&m.data));
        out
    }

    /// Writes a flat vector (as produced by [`EncoderParams::flatten`]) back.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        let others = other.tensors();
        for (m, (_, o)) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in m.data.iter_mut().zip(&o.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.norm_sq()).sum()
    }

    /// FNV-1a over the little-endian bytes of every value, in visit order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        self.visit(&mut |_, m| {
            for v in &m.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        fnv1a64(&bytes)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.data.iter().all(|v| v.is_finite()))
    }

    pub fn logit_scale_value(&self) -> f64 {
        self.logit_scale.data[0].exp()
    }
}

/// Seeded truncated-normal weights (cut at two standard deviations), zero
/// biases, unit layer-norm gains, and `logit_scale = ln(1 / temperature)`.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut params = EncoderParams::zeros(config);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let bound = 2.0 * config.init_std;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, m) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".bias") || name.ends_with(".gain") || name == "logit_scale" {
            continue;
        }
        let mut r = rng::stream(config.seed, "encoder/init", &[fnv1a64(name.as_bytes())]);
        for v in m.data.iter_mut() {
            *v = loop {
                let x: f64 = normal.sample(&mut r);
                if x.abs() <= bound {
                    break x;
                }
            };
        }
    }
    for b in params.blocks.iter_mut() {
        b.ln1 = LayerNorm::new(config.width);
        b.ln2 = LayerNorm::new(config.width);
    }
    params.ln_final = LayerNorm::new(config.width);
    params.logit_scale.data[0] = (1.0 / config.temperature).ln();
    Ok(params)
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn gelu_mat(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect())
}

struct BlockCache {
    x_in: Mat,
    ln1: LayerNormCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `T x T` row-stochastic matrix per head.
    probs: Vec<Mat>,
    attn: Mat,
    ln2: LayerNormCache,
    b: Mat,
    pre: Mat,
    act: Mat,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    patches: Mat,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    y: Mat,
    box_pre: Mat,
    box_act: Mat,
    region: Mat,
    fused_in: Mat,
    region_norms: Vec<f64>,
    cls_norm: f64,
}

pub struct EncoderOutput {
    /// Unit-norm CLS embedding in text space.
    pub cls_embedding: Vec<f64>,
    /// Mean of the final patch states (width D).
    pub pooled_patch: Vec<f64>,
    /// `M x 4` center-size boxes in (0,1).
    pub box_preds: Mat,
    /// `M x text_dim`, unit-norm rows.
    pub region_embeddings: Mat,
    pub cache: ForwardCache,
}

/// Upstream gradients for the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub box_preds: Mat,
    pub region_embeddings: Mat,
    pub cls_embedding: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            box_preds: Mat::zeros(config.num_queries, 4),
            region_embeddings: Mat::zeros(config.num_queries, config.text_dim),
            cls_embedding: vec![0.0; config.text_dim],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &OutputGrads, scale: f64) {
        for (a, b) in self.box_preds.data.iter_mut().zip(&other.box_preds.data) {
            *a += scale * b;
        }
        for (a, b) in self.region_embeddings.data.iter_mut().zip(&other.region_embeddings.data) {
            *a += scale * b;
        }
        for (a, b) in self.cls_embedding.iter_mut().zip(&other.cls_embedding) {
            *a += scale * b;
        }
    }
}

fn attention_forward(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let t = q.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dh;
        let hi = lo + dh;
        let mut p = Mat::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[lo..hi];
            let prow = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                let s = dot(qi, &k.row(j)[lo..hi]) * scale;
                prow[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in prow.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            prow.iter_mut().for_each(|s| *s /= sum);
            let orow = &mut out.data[i * d + lo..i * d + hi];
            for j in 0..t {
                let pij = prow[j];
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[lo..hi]) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(q: &Mat, k: &Mat, v: &Mat, probs: &[Mat], dout: &Mat) -> (Mat, Mat, Mat) {
    let t = q.rows;
    let d = q.cols;
    let heads = probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(t, d);
    let mut dk = Mat::zeros(t, d);
    let mut dv = Mat::zeros(t, d);
    let mut dp = vec![0.0; t];
    for (h, p) in probs.iter().enumerate() {
        let lo = h * dh;
        let hi = lo + dh;
        for i in 0..t {
            let doi = &dout.row(i)[lo..hi];
            let prow = p.row(i);
            for j in 0..t {
                dp[j] = dot(doi, &v.row(j)[lo..hi]);
                let pij = prow[j];
                for (g, &x) in dv.data[j * d + lo..j * d + hi].iter_mut().zip(doi) {
                    *g += pij * x;
                }
            }
            let mix = dot(prow, &dp);
            for j in 0..t {
                let ds = prow[j] * (dp[j] - mix) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[lo..hi];
                for (g, &x) in dq.data[i * d + lo..i * d + hi].iter_mut().zip(kj) {
                    *g += ds * x;
                }
                let qi = &q.row(i)[lo..hi];
                for (g, &x) in dk.data[j * d + lo..j * d + hi].iter_mut().zip(qi) {
                    *g += ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}

fn check_grid(config: &EncoderConfig, grid: &Grid) -> Result<()> {
    if grid.size != config.grid_size || grid.channels != config.channels {
        return Err(Error::Shape(format!(
            "grid is {0}x{0}x{1}, encoder expects {2}x{2}x{3}",
            grid.size, grid.channels, config.grid_size, config.channels
        )));
    }
    if grid.data.len() != grid.size * grid.size * grid.channels {
        return Err(Error::Shape("grid data length does not match its shape".into()));
    }
    Ok(())
}

pub fn forward(params: &EncoderParams, grid: &Grid) -> Result<EncoderOutput> {
    let c = &params.config;
    check_grid(c, grid)?;
    let d = c.width;
    let np = c.num_patches();
    let m = c.num_queries;
    let qo = c.query_offset();

    let patches = Mat::from_vec(np, c.channels, grid.data.clone());
    let projected = params.patch_proj.forward(&patches);
    let mut x = params.pos_embed.clone();
    for p in 0..np {
        for (o, v) in x.row_mut(1 + p).iter_mut().zip(projected.row(p)) {
            *o += v;
        }
    }
    for k in 0..m {
        for (o, v) in x.row_mut(qo + k).iter_mut().zip(params.queries.row(k)) {
            *o += v;
        }
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (a, ln1) = block.ln1.forward(&x);
        let q = block.query.forward(&a);
        let k = block.key.forward(&a);
        let v = block.value.forward(&a);
        let (attn, probs) = attention_forward(&q, &k, &v, c.heads);
        let mut h = block.attn_out.forward(&attn);
        h.add_assign(&x);
        let (b, ln2) = block.ln2.forward(&h);
        let pre = block.mlp_in.forward(&b);
        let act = gelu_mat(&pre);
        let mut out = block.mlp_out.forward(&act);
        out.add_assign(&h);
        caches.push(BlockCache {
            x_in: std::mem::replace(&mut x, out),
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            b,
            pre,
            act,
        });
    }
    let (y, ln_final) = params.ln_final.forward(&x);

    let mut yq = Mat::zeros(m, d);
    for k in 0..m {
        yq.row_mut(k).copy_from_slice(y.row(qo + k));
    }
    let box_pre = params.box_hidden.forward(&yq);
    let box_act = gelu_mat(&box_pre);
    let logits = params.box_out.forward(&box_act);
    let box_preds = Mat::from_vec(m, 4, logits.data.iter().map(|&z| sigmoid(z)).collect());

    let mut pooled = vec![0.0; d];
    for p in 0..np {
        for (o, v) in pooled.iter_mut().zip(y.row(1 + p)) {
            *o += v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= np as f64);

    let region = params.region_proj.forward(&yq);
    let mut fused_in = Mat::zeros(m, 2 * d);
    for k in 0..m {
        let row = fused_in.row_mut(k);
        row[..d].copy_from_slice(region.row(k));
        row[d..].copy_from_slice(&pooled);
    }
    let mut region_embeddings = params.fusion.forward(&fused_in);
    let region_norms = (0..m).map(|k| l2_normalize(region_embeddings.row_mut(k))).collect();

    let cls_state = Mat::from_vec(1, d, y.row(0).to_vec());
    let mut cls_embedding = params.cls_proj.forward(&cls_state).data;
    let cls_norm = l2_normalize(&mut cls_embedding);

    Ok(EncoderOutput {
        cls_embedding,
        pooled_patch: pooled,
        box_preds,
        region_embeddings,
        cache: ForwardCache {
            patches,
            blocks: caches,
            ln_final,
            y,
            box_pre,
            box_act,
            region,
            fused_in,
            region_norms,
            cls_norm,
        },
    })
}

/// Reverse pass. Returns gradients in the parameter layout; `logit_scale`
/// is left at zero because it only enters through the global loss.
pub fn backward(params: &EncoderParams, output: &EncoderOutput, grads: &OutputGrads) -> Result<EncoderParams> {
    let c = &params.config;
    let d = c.width;
    let np = c.num_patches();
    let m = c.num_queries;
    let qo = c.query_offset();
    if grads.box_preds.rows != m
        || grads.box_preds.cols != 4
        || grads.region_embeddings.rows != m
        || grads.region_embeddings.cols != c.text_dim
        || grads.cls_embedding.len() != c.text_dim
    {
        return Err(Error::Shape("output gradients do not match the encoder heads".into()));
    }
    let cache = &output.cache;
    let mut g = params.zeros_like();
    let mut dy = Mat::zeros(c.seq_len(), d);

    // CLS head.
    let d_cls = l2_normalize_backward(&output.cls_embedding, cache.cls_norm, &grads.cls_embedding);
    let cls_state = Mat::from_vec(1, d, cache.y.row(0).to_vec());
    let d_cls_state = params
        .cls_proj
        .backward(&cls_state, &Mat::from_vec(1, c.text_dim, d_cls), &mut g.cls_proj);
    for (o, v) in dy.row_mut(0).iter_mut().zip(&d_cls_state.data) {
        *o += v;
    }

    // Region head.
    let mut d_fused = Mat::zeros(m, c.text_dim);
    for k in 0..m {
        let row = l2_normalize_backward(
            output.region_embeddings.row(k),
            cache.region_norms[k],
            grads.region_embeddings.row(k),
        );
        d_fused.row_mut(k).copy_from_slice(&row);
    }
    let d_fused_in = params.fusion.backward(&cache.fused_in, &d_fused, &mut g.fusion);
    let mut d_region = Mat::zeros(m, d);
    let mut d_pooled = vec![0.0; d];
    for k in 0..m {
        let row = d_fused_in.row(k);
        d_region.row_mut(k).copy_from_slice(&row[..d]);
        for (o, v) in d_pooled.iter_mut().zip(&row[d..]) {
            *o += v;
        }
    }
    let mut yq = Mat::zeros(m, d);
    for k in 0..m {
        yq.row_mut(k).copy_from_slice(cache.y.row(qo + k));
    }
    let mut d_yq = params.region_proj.backward(&yq, &d_region, &mut g.region_proj);
    for p in 0..np {
        for (o, v) in dy.row_mut(1 + p).iter_mut().zip(&d_pooled) {
            *o += v / np as f64;
        }
    }
    debug_assert_eq!(cache.region.rows, m);

    // Box head.
    let mut d_logits = Mat::zeros(m, 4);
    for (i, dl) in d_logits.data.iter_mut().enumerate() {
        let s = output.box_preds.data[i];
        *dl = grads.box_preds.data[i] * s * (1.0 - s);
    }
    let mut d_act = params.box_out.backward(&cache.box_act, &d_logits, &mut g.box_out);
    for (da, &z) in d_act.data.iter_mut().zip(&cache.box_pre.data) {
        *da *= gelu_grad(z);
    }
    d_yq.add_assign(&params.box_hidden.backward(&yq, &d_act, &mut g.box_hidden));
    for k in 0..m {
        for (o, v) in dy.row_mut(qo + k).iter_mut().zip(d_yq.row(k)) {
            *o += v;
        }
    }

    let mut dx = params.ln_final.backward(&cache.ln_final, &dy, &mut g.ln_final);

    for (bi, block) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut g.blocks[bi];
        // out = h + mlp_out(gelu(mlp_in(ln2(h))))
        let mut d_act = block.mlp_out.backward(&bc.act, &dx, &mut gb.mlp_out);
        for (da, &z) in d_act.data.iter_mut().zip(&bc.pre.data) {
            *da *= gelu_grad(z);
        }
        let d_b = block.mlp_in.backward(&bc.b, &d_act, &mut gb.mlp_in);
        let mut d_h = block.ln2.backward(&bc.ln2, &d_b, &mut gb.ln2);
        d_h.add_assign(&dx);
        // h = x + attn_out(attention(q, k, v))
        let d_attn = block.attn_out.backward(&bc.attn, &d_h, &mut gb.attn_out);
        let (dq, dk, dv) = attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, &d_attn);
        let mut d_a = block.query.backward(&bc.a, &dq, &mut gb.query);
        d_a.add_assign(&block.key.backward(&bc.a, &dk, &mut gb.key));
        d_a.add_assign(&block.value.backward(&bc.a, &dv, &mut gb.value));
        let mut d_x = block.ln1.backward(&bc.ln1, &d_a, &mut gb.ln1);
        d_x.add_assign(&d_h);
        debug_assert_eq!(bc.x_in.rows, d_x.rows);
        dx = d_x;
    }

    g.pos_embed.add_assign(&dx);
    for k in 0..m {
        for (o, v) in g.queries.row_mut(k).iter_mut().zip(dx.row(qo + k)) {
            *o += v;
        }
    }
    let mut d_proj = Mat::zeros(np, d);
    for p in 0..np {
        d_proj.row_mut(p).copy_from_slice(dx.row(1 + p));
    }
    params.patch_proj.backward(&cache.patches, &d_proj, &mut g.patch_proj);
    Ok(g)
}

/// Recomputes the forward pass for `grid` and back-propagates `grads`.
pub fn backward_from_grid(params: &EncoderParams, grid: &Grid, grads: &OutputGrads) -> Result<EncoderParams> {
    let out = forward(params, grid)?;
    backward(params, &out, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            grid_size: 2,
            channels: 3,
            width: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            num_queries: 3,
            text_dim: 6,
            ..EncoderConfig::default()
        }
    }

    fn grid_for(c: &EncoderConfig, seed: u64) -> Grid {
        let mut g = Grid::zeros(c.grid_size, c.channels);
        let mut r = rng::stream(seed, "test/grid", &[]);
        g.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        g
    }

    #[test]
    fn shapes() {
        let c = EncoderConfig {
            grid_size: 4,
            ..EncoderConfig::default()
        };
        assert_eq!(c.seq_len(), 46);
        let p = init_params(&c).unwrap();
        let out = forward(&p, &grid_for(&c, 1)).unwrap();
        assert_eq!((out.box_preds.rows, out.box_preds.cols), (29, 4));
        assert_eq!((out.region_embeddings.rows, out.region_embeddings.cols), (29, 64));
        assert_eq!(out.cls_embedding.len(), 64);
        assert_eq!(out.pooled_patch.len(), 32);
        for k in 0..29 {
            let n = dot(out.region_embeddings.row(k), out.region_embeddings.row(k)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(out.box_preds.data.iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn zero_box_head_gives_half() {
        let c = small();
        let mut p = init_params(&c).unwrap();
        p.box_out.weight = Mat::zeros(c.width, 4);
        let out = forward(&p, &Grid::zeros(c.grid_size, c.channels)).unwrap();
        assert!(out.box_preds.data.iter().all(|&b| b == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = grid_for(&c, 2);
        let a = forward(&p, &g).unwrap();
        let b = forward(&p, &g).unwrap();
        assert_eq!(a.box_preds, b.box_preds);
        assert_eq!(a.region_embeddings, b.region_embeddings);
        assert_eq!(a.cls_embedding, b.cls_embedding);
    }

    #[test]
    fn shape_mismatch_errors() {
        let c = small();
        let p = init_params(&c).unwrap();
        assert!(matches!(forward(&p, &Grid::zeros(3, c.channels)), Err(Error::Shape(_))));
        let out = forward(&p, &grid_for(&c, 1)).unwrap();
        let mut bad = OutputGrads::zeros(&c);
        bad.cls_embedding.pop();
        assert!(matches!(backward(&p, &out, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let c = small();
        let a = init_params(&c).unwrap();
        let b = init_params(&c).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let other = init_params(&EncoderConfig { seed: 1, ..c.clone() }).unwrap();
        assert_ne!(a.checksum(), other.checksum());
        let bound = 2.0 * c.init_std;
        for (name, m) in a.tensors() {
            if name.ends_with(".gain") || name == "logit_scale" {
                continue;
            }
            assert!(m.data.iter().all(|v| v.is_finite() && v.abs() <= bound), "{name}");
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grad() {
        let c = small();
        let p = init_params(&c).unwrap();
        let g = backward_from_grid(&p, &grid_for(&c, 3), &OutputGrads::zeros(&c)).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn flatten_roundtrip() {
        let c = small();
        let p = init_params(&c).unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten());
        assert_eq!(p, q);
    }
}
