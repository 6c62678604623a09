//! Trainable feature extractor, AdamW and checkpoints.
//!
//! The extractor maps each `p x p` RGB patch to a `C`-dim feature:
//!
//! ```text
//! e = W_e x + b_e
//! h = e + relu(W_h e + b_h)
//! f = h + conv3x3(h) + b_m + offset
//! ```
//!
//! The 3x3 convolution wraps around the grid edges, so rolling the image by
//! whole patches rolls the feature grid by the same number of cells. `offset`
//! is a fixed positive constant that keeps cell features away from zero norm.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Image;
use crate::matching::{FeatureGrid, RefinerParams};

/// Constant added to every output channel.
pub const FEATURE_OFFSET: f64 = 0.01;

const CHECKPOINT_FORMAT: &str = "m2p-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image {width}x{height} is not divisible into {patch}x{patch} patches")]
    BadDims {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint block {block} has {got} values, config expects {expected}")]
    ShapeMismatch {
        block: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    pub channels: usize,
    pub refiner_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 32,
            refiner_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Grid cell center in image pixels.
pub fn grid_to_image(g: f64, patch: usize) -> f64 {
    let p = patch as f64;
    g * p + p / 2.0 - 0.5
}

/// Inverse of [`grid_to_image`].
pub fn image_to_grid(v: f64, patch: usize) -> f64 {
    let p = patch as f64;
    (v - p / 2.0 + 0.5) / p
}

pub const BLOCK_NAMES: [&str; 10] = [
    "embed_w",
    "embed_b",
    "mlp_w",
    "mlp_b",
    "mix_w",
    "mix_b",
    "refiner_w1",
    "refiner_b1",
    "refiner_w2",
    "refiner_b2",
];

/// Number of extractor blocks at the front of [`BLOCK_NAMES`].
pub const EXTRACTOR_BLOCKS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `C x patch_len`, patch values ordered `(row, col, channel)`.
    pub embed_w: Vec<f64>,
    pub embed_b: Vec<f64>,
    /// `C x C`.
    pub mlp_w: Vec<f64>,
    pub mlp_b: Vec<f64>,
    /// `9 x C_out x C_in`, taps in row-major kernel order.
    pub mix_w: Vec<f64>,
    pub mix_b: Vec<f64>,
    pub refiner: RefinerParams,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config.channels;
        Self {
            config,
            embed_w: vec![0.0; c * config.patch_len()],
            embed_b: vec![0.0; c],
            mlp_w: vec![0.0; c * c],
            mlp_b: vec![0.0; c],
            mix_w: vec![0.0; 9 * c * c],
            mix_b: vec![0.0; c],
            refiner: RefinerParams::zeros(config.refiner_hidden),
        }
    }

    /// Seeded fan-in uniform init. The embedding bias centres inputs around
    /// mid-grey and the refiner starts close to a pass-through.
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let c = config.channels;
        let plen = config.patch_len();
        let mut uniform = |v: &mut [f64], bound: f64| {
            for x in v.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        };
        uniform(&mut p.embed_w, (3.0 / plen as f64).sqrt());
        uniform(&mut p.mlp_w, (1.0 / c as f64).sqrt());
        uniform(&mut p.mix_w, (1.0 / (9 * c) as f64).sqrt());
        let hidden = config.refiner_hidden;
        uniform(&mut p.refiner.w1, 0.05);
        uniform(&mut p.refiner.w2, 0.05 / hidden as f64);
        for ch in 0..hidden {
            p.refiner.w1[ch * 9 + 4] += 1.0;
            p.refiner.b1[ch] = 1.0;
            p.refiner.w2[ch * 9 + 4] += 1.0 / hidden as f64;
        }
        p.refiner.b2[0] = -1.0;
        for o in 0..c {
            let row = &p.embed_w[o * plen..(o + 1) * plen];
            p.embed_b[o] = -0.5 * row.iter().sum::<f64>();
        }
        p
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            &self.embed_w,
            &self.embed_b,
            &self.mlp_w,
            &self.mlp_b,
            &self.mix_w,
            &self.mix_b,
            &self.refiner.w1,
            &self.refiner.b1,
            &self.refiner.w2,
            &self.refiner.b2,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.mlp_w,
            &mut self.mlp_b,
            &mut self.mix_w,
            &mut self.mix_b,
            &mut self.refiner.w1,
            &mut self.refiner.b1,
            &mut self.refiner.w2,
            &mut self.refiner.b2,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += other`, block by block in declared order.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Intermediate activations for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    grid_w: usize,
    grid_h: usize,
    patches: Vec<f64>,
    embed: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn check_dims(cfg: &ModelConfig, img: &Image) -> Result<(usize, usize), ModelError> {
    let p = cfg.patch;
    if p == 0
        || !img.width.is_multiple_of(p)
        || !img.height.is_multiple_of(p)
        || img.width == 0
        || img.height == 0
    {
        return Err(ModelError::BadDims {
            width: img.width,
            height: img.height,
            patch: p,
        });
    }
    Ok((img.width / p, img.height / p))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Index of the cell `(x + dx, y + dy)` with wrap-around.
#[inline]
fn wrap(x: usize, y: usize, dx: isize, dy: isize, w: usize, h: usize) -> usize {
    let nx = (x as isize + dx).rem_euclid(w as isize) as usize;
    let ny = (y as isize + dy).rem_euclid(h as isize) as usize;
    ny * w + nx
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn forward_with_cache(
    params: &ModelParams,
    img: &Image,
) -> Result<(FeatureGrid, ForwardCache), ModelError> {
    let cfg = &params.config;
    let (gw, gh) = check_dims(cfg, img)?;
    let (p, c, plen) = (cfg.patch, cfg.channels, cfg.patch_len());
    let n = gw * gh;

    let mut patches = vec![0.0; n * plen];
    for gy in 0..gh {
        for gx in 0..gw {
            let dst = &mut patches[(gy * gw + gx) * plen..(gy * gw + gx + 1) * plen];
            for py in 0..p {
                let row = (gy * p + py) * img.width + gx * p;
                dst[py * p * 3..(py + 1) * p * 3]
                    .copy_from_slice(&img.data[row * 3..(row + p) * 3]);
            }
        }
    }

    let mut embed = vec![0.0; n * c];
    let mut pre = vec![0.0; n * c];
    let mut hidden = vec![0.0; n * c];
    for cell in 0..n {
        let x = &patches[cell * plen..(cell + 1) * plen];
        let e = &mut embed[cell * c..(cell + 1) * c];
        for o in 0..c {
            e[o] = params.embed_b[o] + dot(&params.embed_w[o * plen..(o + 1) * plen], x);
        }
        let a = &mut pre[cell * c..(cell + 1) * c];
        for o in 0..c {
            a[o] = params.mlp_b[o] + dot(&params.mlp_w[o * c..(o + 1) * c], e);
        }
        let h = &mut hidden[cell * c..(cell + 1) * c];
        for o in 0..c {
            h[o] = e[o] + a[o].max(0.0);
        }
    }

    let mut out = vec![0.0; n * c];
    for y in 0..gh {
        for x in 0..gw {
            let cell = y * gw + x;
            let f = &mut out[cell * c..(cell + 1) * c];
            for o in 0..c {
                f[o] = hidden[cell * c + o] + params.mix_b[o] + FEATURE_OFFSET;
            }
            for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                let nb = wrap(x, y, dx, dy, gw, gh);
                let hn = &hidden[nb * c..(nb + 1) * c];
                let wt = &params.mix_w[t * c * c..(t + 1) * c * c];
                for o in 0..c {
                    f[o] += dot(&wt[o * c..(o + 1) * c], hn);
                }
            }
        }
    }
    let grid = FeatureGrid {
        height: gh,
        width: gw,
        channels: c,
        values: out,
    };
    let cache = ForwardCache {
        grid_w: gw,
        grid_h: gh,
        patches,
        embed,
        pre,
        hidden,
    };
    Ok((grid, cache))
}

pub fn forward(params: &ModelParams, img: &Image) -> Result<FeatureGrid, ModelError> {
    forward_with_cache(params, img).map(|(g, _)| g)
}

/// Accumulates extractor gradients for the upstream gradient `d_features`
/// (laid out like the forward output) into `grads`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_features: &[f64],
    grads: &mut ModelParams,
) -> Result<(), ModelError> {
    let cfg = &params.config;
    let (c, plen) = (cfg.channels, cfg.patch_len());
    let (gw, gh) = (cache.grid_w, cache.grid_h);
    let n = gw * gh;
    if d_features.len() != n * c {
        return Err(ModelError::GradientShape {
            expected: n * c,
            got: d_features.len(),
        });
    }

    // f = h + conv(h) + b
    let mut d_hidden = d_features.to_vec();
    for y in 0..gh {
        for x in 0..gw {
            let cell = y * gw + x;
            let df = &d_features[cell * c..(cell + 1) * c];
            axpy(&mut grads.mix_b, 1.0, df);
            for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                let nb = wrap(x, y, dx, dy, gw, gh);
                let hn = &cache.hidden[nb * c..(nb + 1) * c];
                let wt = &params.mix_w[t * c * c..(t + 1) * c * c];
                let gw_t = &mut grads.mix_w[t * c * c..(t + 1) * c * c];
                let dh = &mut d_hidden[nb * c..(nb + 1) * c];
                for o in 0..c {
                    let g = df[o];
                    if g == 0.0 {
                        continue;
                    }
                    axpy(&mut gw_t[o * c..(o + 1) * c], g, hn);
                    axpy(dh, g, &wt[o * c..(o + 1) * c]);
                }
            }
        }
    }

    // h = e + relu(a), a = W_h e + b_h, e = W_e x + b_e
    let mut d_pre = vec![0.0; c];
    let mut d_embed = vec![0.0; c];
    for cell in 0..n {
        let dh = &d_hidden[cell * c..(cell + 1) * c];
        let a = &cache.pre[cell * c..(cell + 1) * c];
        let e = &cache.embed[cell * c..(cell + 1) * c];
        for o in 0..c {
            d_pre[o] = if a[o] > 0.0 { dh[o] } else { 0.0 };
        }
        d_embed.copy_from_slice(dh);
        for o in 0..c {
            let g = d_pre[o];
            if g == 0.0 {
                continue;
            }
            grads.mlp_b[o] += g;
            axpy(&mut grads.mlp_w[o * c..(o + 1) * c], g, e);
            axpy(&mut d_embed, g, &params.mlp_w[o * c..(o + 1) * c]);
        }
        let x = &cache.patches[cell * plen..(cell + 1) * plen];
        for o in 0..c {
            let g = d_embed[o];
            grads.embed_b[o] += g;
            axpy(&mut grads.embed_w[o * plen..(o + 1) * plen], g, x);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    hyper: &AdamWConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let m_blocks = state.m.blocks_mut();
    let v_blocks = state.v.blocks_mut();
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(m_blocks)
        .zip(v_blocks)
    {
        for i in 0..p.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= hyper.lr * hyper.weight_decay * p[i];
            p[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optim: Option<OptimState>,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockShape {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    blocks: Vec<BlockShape>,
    seed: u64,
    step: u64,
    optimizer: bool,
}

fn write_blocks(w: &mut impl Write, p: &ModelParams) -> std::io::Result<()> {
    for block in p.blocks() {
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_blocks(r: &mut impl Read, p: &mut ModelParams) -> Result<(), ModelError> {
    let mut buf = [0u8; 8];
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::Format("parameter data ends early".into()))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(())
}

impl Checkpoint {
    /// One JSON header line, then little-endian f64 blobs: parameters, and if
    /// present the optimizer's first and second moments.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config,
            blocks: BLOCK_NAMES
                .iter()
                .zip(self.params.blocks())
                .map(|(n, b)| BlockShape {
                    name: n.to_string(),
                    len: b.len(),
                })
                .collect(),
            seed: self.seed,
            step: self.step,
            optimizer: self.optim.is_some(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        let json = serde_json::to_string(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        write_blocks(&mut w, &self.params)?;
        if let Some(opt) = &self.optim {
            w.write_all(&opt.step.to_le_bytes())?;
            write_blocks(&mut w, &opt.m)?;
            write_blocks(&mut w, &opt.v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(ModelError::Format("missing header line".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| ModelError::Format(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut params = ModelParams::zeros(header.config);
        if header.blocks.len() != BLOCK_NAMES.len() {
            return Err(ModelError::Format(format!(
                "expected {} blocks, header lists {}",
                BLOCK_NAMES.len(),
                header.blocks.len()
            )));
        }
        for ((shape, name), block) in header.blocks.iter().zip(BLOCK_NAMES).zip(params.blocks()) {
            if shape.name != name {
                return Err(ModelError::Format(format!(
                    "expected block {name}, found {}",
                    shape.name
                )));
            }
            if shape.len != block.len() {
                return Err(ModelError::ShapeMismatch {
                    block: name.into(),
                    expected: block.len(),
                    got: shape.len,
                });
            }
        }
        read_blocks(&mut r, &mut params)?;
        let optim = if header.optimizer {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::Format("optimizer state ends early".into()))?;
            let mut st = OptimState::new(header.config);
            st.step = u64::from_le_bytes(buf);
            read_blocks(&mut r, &mut st.m)?;
            read_blocks(&mut r, &mut st.v)?;
            Some(st)
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ModelError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            params,
            optim,
            seed: header.seed,
            step: header.step,
        })
    }
}
