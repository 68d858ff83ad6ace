//! Top-K sparse autoencoders over residual-stream activations.
//!
//! ```text
//! pre_j = (h - b_dec) . W_enc[:, j] + b_enc[j]
//! z     = clamp0(topk_K(pre))
//! h_hat = z^T W_dec + b_dec
//! ```
//!
//! Top-K keeps the K largest pre-activations (lowest index wins ties) and
//! only then clamps negative survivors to zero. Decoder rows are kept at unit
//! norm after every optimizer step.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TKSA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Samples per gradient work unit. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    dict_size: usize,
    hidden_dim: usize,
    k: usize,
    /// d x D, row-major: `w_enc[i * D + j]`.
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    /// D x d, row-major: `w_dec[j * d + i]`.
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
}

/// Gradients with the same layout as [`SaeModel`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl SaeGrads {
    fn zeros(d: usize, dict: usize) -> Self {
        SaeGrads {
            w_enc: vec![0.0; d * dict],
            b_enc: vec![0.0; dict],
            w_dec: vec![0.0; dict * d],
            b_dec: vec![0.0; d],
        }
    }

    fn add_assign(&mut self, o: &SaeGrads) {
        for (a, b) in [
            (&mut self.w_enc, &o.w_enc),
            (&mut self.b_enc, &o.b_enc),
            (&mut self.w_dec, &o.w_dec),
            (&mut self.b_dec, &o.b_dec),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// All gradient entries in parameter order (`w_enc, b_enc, w_dec, b_dec`).
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

/// Which parameter block a flat index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    WEnc,
    BEnc,
    WDec,
    BDec,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl SaeModel {
    /// Builds a model from explicit parameters, validating shapes.
    pub fn from_parts(
        hidden_dim: usize,
        dict_size: usize,
        k: usize,
        w_enc: Vec<f64>,
        b_enc: Vec<f64>,
        w_dec: Vec<f64>,
        b_dec: Vec<f64>,
    ) -> Result<Self> {
        if hidden_dim == 0 || dict_size == 0 || k == 0 || k > dict_size {
            return Err(Error::InvalidConfig(format!(
                "need d > 0 and 0 < K <= D, got d={hidden_dim} D={dict_size} K={k}"
            )));
        }
        let expect = [
            (w_enc.len(), hidden_dim * dict_size),
            (b_enc.len(), dict_size),
            (w_dec.len(), dict_size * hidden_dim),
            (b_dec.len(), hidden_dim),
        ];
        for (got, expected) in expect {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(SaeModel {
            dict_size,
            hidden_dim,
            k,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    /// Random unit-norm decoder rows, tied encoder init (`W_enc = W_dec^T`),
    /// zero biases.
    pub fn init(hidden_dim: usize, dict_size: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec: Vec<f64> = (0..dict_size * hidden_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in w_dec.chunks_exact_mut(hidden_dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let mut w_enc = vec![0.0; hidden_dim * dict_size];
        for j in 0..dict_size {
            for i in 0..hidden_dim {
                w_enc[i * dict_size + j] = w_dec[j * hidden_dim + i];
            }
        }
        Self::from_parts(
            hidden_dim,
            dict_size,
            k,
            w_enc,
            vec![0.0; dict_size],
            w_dec,
            vec![0.0; hidden_dim],
        )
    }

    pub fn dict_size(&self) -> usize {
        self.dict_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w_enc(&self) -> &[f64] {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &[f64] {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    /// Decoder row (atom) of feature `j`.
    pub fn decoder_row(&self, j: usize) -> &[f64] {
        &self.w_dec[j * self.hidden_dim..(j + 1) * self.hidden_dim]
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.dict_size {
            return Err(Error::InvalidConfig(format!("K={k} with D={}", self.dict_size)));
        }
        self.k = k;
        Ok(())
    }

    /// Mutable access to one parameter entry; used by finite-difference checks.
    pub fn param_mut(&mut self, block: ParamBlock, index: usize) -> &mut f64 {
        match block {
            ParamBlock::WEnc => &mut self.w_enc[index],
            ParamBlock::BEnc => &mut self.b_enc[index],
            ParamBlock::WDec => &mut self.w_dec[index],
            ParamBlock::BDec => &mut self.b_dec[index],
        }
    }

    /// Maps a flat index (as in [`SaeGrads::flatten`]) to its block.
    pub fn locate_param(&self, flat: usize) -> (ParamBlock, usize) {
        let sizes = [
            (ParamBlock::WEnc, self.w_enc.len()),
            (ParamBlock::BEnc, self.b_enc.len()),
            (ParamBlock::WDec, self.w_dec.len()),
            (ParamBlock::BDec, self.b_dec.len()),
        ];
        let mut rest = flat;
        for (block, n) in sizes {
            if rest < n {
                return (block, rest);
            }
            rest -= n;
        }
        panic!("parameter index {flat} out of range");
    }

    pub fn num_params(&self) -> usize {
        self.w_enc.len() + self.b_enc.len() + self.w_dec.len() + self.b_dec.len()
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                got: h.len(),
            });
        }
        check_finite(h, "SAE input")
    }

    /// Raw encoder pre-activations (no Top-K, no clamp).
    pub fn pre_activations(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        Ok(self.pre_unchecked(h))
    }

    fn pre_unchecked(&self, h: &[f64]) -> Vec<f64> {
        let dict = self.dict_size;
        let mut pre = self.b_enc.clone();
        for (i, (&hi, &bi)) in h.iter().zip(&self.b_dec).enumerate() {
            let x = hi - bi;
            if x == 0.0 {
                continue;
            }
            let row = &self.w_enc[i * dict..(i + 1) * dict];
            pre.iter_mut().zip(row).for_each(|(p, w)| *p += x * w);
        }
        pre
    }

    /// Indices of the K largest entries of `pre`, lowest index first among
    /// equal values, returned in ascending index order.
    fn topk_indices(&self, pre: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..pre.len()).collect();
        let cmp = |a: &usize, b: &usize| pre[*b].total_cmp(&pre[*a]).then(a.cmp(b));
        if self.k < idx.len() {
            idx.select_nth_unstable_by(self.k - 1, cmp);
            idx.truncate(self.k);
        }
        idx.sort_unstable();
        idx
    }

    /// Sparse Top-K code: `(index, value)` pairs with value > 0, ascending
    /// index.
    pub fn encode_sparse(&self, h: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_input(h)?;
        Ok(self.encode_sparse_unchecked(h))
    }

    fn encode_sparse_unchecked(&self, h: &[f64]) -> Vec<(usize, f64)> {
        let pre = self.pre_unchecked(h);
        self.topk_indices(&pre)
            .into_iter()
            .filter(|&j| pre[j] > 0.0)
            .map(|j| (j, pre[j]))
            .collect()
    }

    /// Dense code. With `apply_topk` the Top-K mask and clamp are applied;
    /// without it the raw pre-activations are returned.
    pub fn encode(&self, h: &[f64], apply_topk: bool) -> Result<Vec<f64>> {
        self.check_input(h)?;
        if !apply_topk {
            return Ok(self.pre_unchecked(h));
        }
        let mut z = vec![0.0; self.dict_size];
        for (j, v) in self.encode_sparse_unchecked(h) {
            z[j] = v;
        }
        Ok(z)
    }

    /// `z^T W_dec + b_dec`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dict_size {
            return Err(Error::DimensionMismatch {
                expected: self.dict_size,
                got: z.len(),
            });
        }
        check_finite(z, "SAE code")?;
        let mut out = self.b_dec.clone();
        for (j, &zj) in z.iter().enumerate() {
            if zj != 0.0 {
                self.add_atom(&mut out, j, zj);
            }
        }
        Ok(out)
    }

    /// Decodes a sparse code.
    pub fn decode_sparse(&self, code: &[(usize, f64)]) -> Vec<f64> {
        let mut out = self.b_dec.clone();
        for &(j, v) in code {
            self.add_atom(&mut out, j, v);
        }
        out
    }

    /// `out += scale * W_dec[j, :]`.
    pub fn add_atom(&self, out: &mut [f64], j: usize, scale: f64) {
        out.iter_mut()
            .zip(self.decoder_row(j))
            .for_each(|(o, w)| *o += scale * w);
    }

    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        Ok(self.decode_sparse(&self.encode_sparse_unchecked(h)))
    }

    /// Mean over the batch of the per-sample mean squared error.
    pub fn loss(&self, batch: &[Vec<f64>]) -> f64 {
        let d = self.hidden_dim as f64;
        let total: f64 = batch
            .iter()
            .map(|h| {
                let rec = self.decode_sparse(&self.encode_sparse_unchecked(h));
                rec.iter().zip(h).map(|(r, x)| (r - x) * (r - x)).sum::<f64>() / d
            })
            .sum();
        total / batch.len() as f64
    }

    fn accumulate_grad(&self, h: &[f64], scale: f64, g: &mut SaeGrads) -> f64 {
        let d = self.hidden_dim;
        let dict = self.dict_size;
        let x: Vec<f64> = h.iter().zip(&self.b_dec).map(|(a, b)| a - b).collect();
        let code = self.encode_sparse_unchecked(h);
        let rec = self.decode_sparse(&code);
        let resid: Vec<f64> = rec.iter().zip(h).map(|(r, y)| r - y).collect();
        let sq: f64 = resid.iter().map(|r| r * r).sum();
        // dL/dh_hat
        let gr: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale / d as f64).collect();
        // Direct path through the output bias.
        g.b_dec.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
        for &(j, zj) in &code {
            let row = self.decoder_row(j);
            let dz: f64 = row.iter().zip(&gr).map(|(w, e)| w * e).sum();
            let grow = &mut g.w_dec[j * d..(j + 1) * d];
            grow.iter_mut().zip(&gr).for_each(|(a, e)| *a += zj * e);
            g.b_enc[j] += dz;
            for i in 0..d {
                g.w_enc[i * dict + j] += x[i] * dz;
                // x = h - b_dec
                g.b_dec[i] -= self.w_enc[i * dict + j] * dz;
            }
        }
        sq / d as f64
    }

    /// Loss (as [`SaeModel::loss`]) and its gradient. The Top-K mask is
    /// treated as fixed, so gradients flow only through surviving
    /// coordinates.
    pub fn loss_and_grad(&self, batch: &[Vec<f64>]) -> (f64, SaeGrads) {
        let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        self.loss_and_grad_refs(&refs)
    }

    fn loss_and_grad_refs(&self, batch: &[&[f64]]) -> (f64, SaeGrads) {
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, SaeGrads)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = SaeGrads::zeros(self.hidden_dim, self.dict_size);
                let l: f64 = chunk
                    .iter()
                    .map(|h| self.accumulate_grad(h, scale, &mut g))
                    .sum();
                (l, g)
            })
            .collect();
        let mut total = SaeGrads::zeros(self.hidden_dim, self.dict_size);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            total.add_assign(g);
        }
        (loss * scale, total)
    }

    /// Rescales every decoder row to unit norm. Zero rows are left alone.
    pub fn normalize_decoder(&mut self) {
        for row in self.w_dec.chunks_exact_mut(self.hidden_dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    /// Rounds every parameter to the nearest f32 so the model round-trips
    /// through a checkpoint unchanged.
    pub fn quantize_f32(&mut self) {
        for v in [&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec] {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    // -----------------------------------------------------------------------
    // Checkpoint I/O
    // -----------------------------------------------------------------------

    /// Header `magic, version, D, K, d` (u32 LE) followed by `W_enc`, `b_enc`,
    /// `W_dec`, `b_dec` as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.num_params() * 4);
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.dict_size as u32,
            self.k as u32,
            self.hidden_dim as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for block in [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec] {
            for &x in block.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint("bad magic or short header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {}", word(0))));
        }
        let (dict, k, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let n = 2 * d * dict + dict + d;
        if bytes.len() != 20 + 4 * n {
            return Err(Error::BadCheckpoint(format!(
                "expected {} bytes, found {}",
                20 + 4 * n,
                bytes.len()
            )));
        }
        let mut vals = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |m: usize| -> Vec<f64> { vals.by_ref().take(m).collect() };
        let w_enc = take(d * dict);
        let b_enc = take(dict);
        let w_dec = take(dict * d);
        let b_dec = take(d);
        Self::from_parts(d, dict, k, w_enc, b_enc, w_dec, b_dec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dict_size: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the (shuffled) data held out for the quality report.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dict_size: 512,
            k: 8,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeQualityReport {
    pub mean_cosine: f64,
    pub dead_fraction: f64,
    pub mean_activation_norm: f64,
    pub activation_counts: Vec<u64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub quality: SaeQualityReport,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t);
        let bc2 = 1.0 - Self::B2.powi(self.t);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (i, (pi, gi)) in p.iter_mut().zip(g.iter()).enumerate() {
                let m = &mut self.m[off + i];
                let v = &mut self.v[off + i];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gi;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gi * gi;
                *pi -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            }
            off += p.len();
        }
    }
}

/// Trains a Top-K SAE on `data` (one d-vector per token).
///
/// Data are shuffled once with the config seed to carve out the holdout
/// slice, then reshuffled per epoch from the same generator. The output bias
/// is initialised to the training mean.
pub fn train(data: &[Vec<f64>], config: &TrainConfig) -> Result<(SaeModel, TrainOutcome)> {
    let first = data.first().ok_or(Error::EmptyStream)?;
    let d = first.len();
    if config.k == 0 || config.k > config.dict_size {
        return Err(Error::InvalidConfig(format!(
            "need 0 < K <= D, got K={} D={}",
            config.k, config.dict_size
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::InvalidConfig("holdout fraction must be in [0, 1)".into()));
    }
    for h in data {
        if h.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: h.len(),
            });
        }
        check_finite(h, "training activation")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.len() as f64) * config.holdout_fraction).floor() as usize;
    let n_hold = if n_hold >= data.len() { 0 } else { n_hold };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();

    let mut model = SaeModel::init(d, config.dict_size, config.k, config.seed ^ 0x5AE0_5AE0)?;
    let mut mean = vec![0.0; d];
    for &i in &train_idx {
        mean.iter_mut().zip(&data[i]).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    model.b_dec = mean;

    let mut adam = Adam::new(model.num_params(), config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in train_idx.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = batch_idx.iter().map(|&i| data[i].as_slice()).collect();
            let (loss, mut grads) = model.loss_and_grad_refs(&batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            project_out_radial(&model, &mut grads);
            let SaeModel {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
                ..
            } = &mut model;
            adam.step(
                &mut [w_enc, b_enc, w_dec, b_dec],
                &[&grads.w_enc, &grads.b_enc, &grads.w_dec, &grads.b_dec],
            );
            model.normalize_decoder();
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: mean_loss,
            });
        }
        log::debug!("epoch {epoch}: loss {mean_loss:.6}");
        history.push(mean_loss);
    }
    model.quantize_f32();
    model.normalize_decoder();
    model.quantize_f32();

    let eval: Vec<&[f64]> = if hold_idx.is_empty() {
        train_idx.iter().map(|&i| data[i].as_slice()).collect()
    } else {
        let mut h = hold_idx.to_vec();
        h.sort_unstable();
        h.iter().map(|&i| data[i].as_slice()).collect()
    };
    let quality = quality_report_refs(&model, &eval)?;
    let final_loss = model.loss(&eval.iter().map(|s| s.to_vec()).collect::<Vec<_>>());
    Ok((
        model,
        TrainOutcome {
            final_loss,
            loss_history: history,
            quality,
        },
    ))
}

/// Removes the component of each decoder-row gradient parallel to the row,
/// so the unit-norm constraint is respected to first order.
fn project_out_radial(model: &SaeModel, grads: &mut SaeGrads) {
    let d = model.hidden_dim;
    for (row, g) in model.w_dec.chunks_exact(d).zip(grads.w_dec.chunks_exact_mut(d)) {
        let dot: f64 = row.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(row).for_each(|(gi, ri)| *gi -= dot * ri);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Reconstruction diagnostics over an evaluation pool: mean input/output
/// cosine, fraction of features never active, and mean input norm.
pub fn quality_report(model: &SaeModel, data: &[Vec<f64>]) -> Result<SaeQualityReport> {
    let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    quality_report_refs(model, &refs)
}

fn quality_report_refs(model: &SaeModel, data: &[&[f64]]) -> Result<SaeQualityReport> {
    if data.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut counts = vec![0u64; model.dict_size];
    let mut cos_sum = 0.0;
    let mut norm_sum = 0.0;
    for h in data {
        model.check_input(h)?;
        let code = model.encode_sparse_unchecked(h);
        for &(j, _) in &code {
            counts[j] += 1;
        }
        let rec = model.decode_sparse(&code);
        cos_sum += cosine(h, &rec);
        norm_sum += h.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let n = data.len() as f64;
    let dead = counts.iter().filter(|&&c| c == 0).count();
    Ok(SaeQualityReport {
        mean_cosine: cos_sum / n,
        dead_fraction: dead as f64 / model.dict_size as f64,
        mean_activation_norm: norm_sum / n,
        activation_counts: counts,
        samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// d = D = 3, identity encoder/decoder, zero biases.
    fn identity_sae(k: usize) -> SaeModel {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        SaeModel::from_parts(3, 3, k, eye.clone(), vec![0.0; 3], eye, vec![0.0; 3]).unwrap()
    }

    #[test]
    fn topk_keeps_two_largest() {
        let m = identity_sae(2);
        assert_eq!(m.encode(&[3.0, 1.0, 2.0], true).unwrap(), vec![3.0, 0.0, 2.0]);
    }

    #[test]
    fn full_k_clamps_negatives_only() {
        let m = identity_sae(3);
        assert_eq!(m.encode(&[3.0, -1.0, 2.0], true).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(m.encode(&[3.0, -1.0, 2.0], false).unwrap(), vec![3.0, -1.0, 2.0]);
    }

    #[test]
    fn selection_happens_before_clamp() {
        // K=2 picks indices 0 and 2 (values 1, -0.5); -0.5 is clamped, so
        // only one feature survives even though K=2.
        let m = identity_sae(2);
        assert_eq!(m.encode(&[1.0, -2.0, -0.5], true).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = identity_sae(1);
        assert_eq!(m.encode(&[2.0, 2.0, 2.0], true).unwrap(), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn centred_input_gives_zero_code() {
        let mut m = identity_sae(2);
        m.b_dec = vec![0.5, -1.0, 2.0];
        assert_eq!(m.encode(&[0.5, -1.0, 2.0], true).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn decode_bias_and_single_atom() {
        let mut m = SaeModel::init(4, 6, 2, 3).unwrap();
        m.b_dec = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(m.decode(&[0.0; 6]).unwrap(), m.b_dec);
        let mut e = vec![0.0; 6];
        e[4] = 1.0;
        let expect: Vec<f64> = m.decoder_row(4).iter().zip(&m.b_dec).map(|(a, b)| a + b).collect();
        assert_eq!(m.decode(&e).unwrap(), expect);
    }

    #[test]
    fn dimension_errors() {
        let m = identity_sae(2);
        assert!(matches!(m.encode(&[1.0], true), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.decode(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.encode(&[f64::NAN, 0.0, 0.0], true), Err(Error::NonFinite(_))));
    }

    #[test]
    fn perfect_model_has_unit_cosine() {
        let m = identity_sae(3);
        let data = vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.1, 9.0]];
        let q = quality_report(&m, &data).unwrap();
        assert!((q.mean_cosine - 1.0).abs() < 1e-12);
        assert_eq!(q.dead_fraction, 0.0);
    }

    #[test]
    fn all_dead_when_nothing_fires() {
        let m = SaeModel::from_parts(
            2,
            4,
            2,
            vec![0.0; 8],
            vec![-1.0; 4],
            SaeModel::init(2, 4, 2, 0).unwrap().w_dec,
            vec![0.0; 2],
        )
        .unwrap();
        let q = quality_report(&m, &[vec![1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
        assert_eq!(q.dead_fraction, 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SaeModel::init(5, 7, 3, 11).unwrap();
        m.quantize_f32();
        let back = SaeModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(SaeModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn train_constant_dataset() {
        let c = vec![0.3, -1.2, 2.5, 0.0];
        let data = vec![c.clone(); 64];
        let cfg = TrainConfig {
            dict_size: 8,
            k: 2,
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let (m, out) = train(&data, &cfg).unwrap();
        let r = m.reconstruct(&c).unwrap();
        for (a, b) in r.iter().zip(&c) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
        assert!(out.final_loss < 1e-4, "{}", out.final_loss);
    }

    #[test]
    fn train_rejects_empty_and_bad_k() {
        assert!(matches!(train(&[], &TrainConfig::default()), Err(Error::EmptyStream)));
        let cfg = TrainConfig {
            dict_size: 4,
            k: 5,
            ..Default::default()
        };
        assert!(matches!(train(&[vec![1.0]], &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let data: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64 * 1e300, -1e300]).collect();
        let cfg = TrainConfig {
            dict_size: 4,
            k: 2,
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        assert!(matches!(train(&data, &cfg), Err(Error::Divergence { .. })));
    }
}
