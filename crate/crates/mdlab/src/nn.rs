//! Minimal feed-forward networks with hand-rolled reverse-mode gradients.
//!
//! [`ScoreNet`] is the score architecture used throughout: the input is
//! projected to the hidden width, time enters as Fourier features of the
//! log-SNR processed by a two-layer MLP into a 128-dimensional conditioning
//! vector, the backbone is a stack of residual blocks (LayerNorm + Linear
//! twice, SiLU, additive time conditioning), and the output head is
//! zero-initialized and scaled by `1/sigma(t)` so the initial score is zero.
//!
//! [`PotentialNet`] is a small scalar MLP `raw(x)` exposing
//! `eta = raw^2 / 2 >= 0` with exact input gradients; it backs the
//! eikonal-penalized potential training mode.
//!
//! Everything is `f64`, single-threaded and deterministic given the seed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::rngs::StdRng;
use rand::Rng;

use crate::sampler::NoiseSchedule;

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_freqs: usize,
    pub time_embed_dim: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden: usize, n_blocks: usize) -> Self {
        Self { input_dim, hidden, n_blocks, n_freqs: 16, time_embed_dim: 128 }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    let bv = b.row(0);
    for mut row in y.rows_mut() {
        row += &bv;
    }
    y
}

/// Returns (y, xhat, istd): y = gamma * xhat + beta rowwise.
fn layernorm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let h = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut istd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mu = row.sum() / h;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / h;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * s);
        istd[i] = s;
    }
    let mut y = xhat.clone();
    let g = gamma.row(0);
    let b = beta.row(0);
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    (y, xhat, istd)
}

/// Backward through layernorm; returns dx and accumulates dgamma/dbeta.
fn layernorm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
    gamma: &Array2<f64>,
    dgamma: &mut Array2<f64>,
    dbeta: &mut Array2<f64>,
) -> Array2<f64> {
    let h = dy.ncols() as f64;
    for (dyr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
        for j in 0..dy.ncols() {
            dgamma[(0, j)] += dyr[j] * xr[j];
            dbeta[(0, j)] += dyr[j];
        }
    }
    let g = gamma.row(0);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let xr = xhat.row(i);
        let mut m1 = 0.0; // mean(dxhat)
        let mut m2 = 0.0; // mean(dxhat * xhat)
        for j in 0..dy.ncols() {
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 += dxh * xr[j];
        }
        m1 /= h;
        m2 /= h;
        for j in 0..dy.ncols() {
            let dxh = dyr[j] * g[j];
            dx[(i, j)] = istd[i] * (dxh - m1 - xr[j] * m2);
        }
    }
    dx
}

/// Parameters of one residual block.
#[derive(Debug, Clone)]
struct Block {
    ln1_g: Array2<f64>,
    ln1_b: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    wt: Array2<f64>,
    ln2_g: Array2<f64>,
    ln2_b: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

/// The score network. See the module docs for the block layout:
///
/// ```text
/// u   = silu(lin1(ln1(h)) + temb * Wt)
/// out = h + lin2(ln2(u))
/// ```
#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub cfg: NetConfig,
    freqs: Vec<f64>,
    logsnr_lo: f64,
    time_w1: Array2<f64>,
    time_b1: Array2<f64>,
    time_w2: Array2<f64>,
    time_b2: Array2<f64>,
    w_in: Array2<f64>,
    b_in: Array2<f64>,
    blocks: Vec<Block>,
    w_out: Array2<f64>,
    b_out: Array2<f64>,
}

fn fan_in_uniform(rows: usize, cols: usize, rng: &mut StdRng) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ScoreNet {
    /// Fresh network; hidden layers fan-in uniform, the output head zeroed
    /// so the initial score field is identically zero.
    pub fn new(cfg: NetConfig, schedule: &NoiseSchedule, rng: &mut StdRng) -> Self {
        let (t_lo, t_hi) = schedule.t_range();
        let u_a = schedule.log_snr(t_lo);
        let u_b = schedule.log_snr(t_hi);
        let logsnr_lo = u_a.min(u_b);
        let span = (u_a - u_b).abs().max(1e-9);
        // Geometric frequencies: the lowest resolves the whole logSNR range,
        // the highest resolves ~120 positions across it.
        let nf = cfg.n_freqs;
        let f0 = std::f64::consts::PI / span;
        let growth = 120f64;
        let freqs = (0..nf)
            .map(|j| f0 * growth.powf(j as f64 / (nf as f64 - 1.0).max(1.0)))
            .collect();
        let te = cfg.time_embed_dim;
        let h = cfg.hidden;
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                ln1_g: Array2::ones((1, h)),
                ln1_b: Array2::zeros((1, h)),
                w1: fan_in_uniform(h, h, rng),
                b1: Array2::zeros((1, h)),
                wt: fan_in_uniform(te, h, rng),
                ln2_g: Array2::ones((1, h)),
                ln2_b: Array2::zeros((1, h)),
                w2: fan_in_uniform(h, h, rng),
                b2: Array2::zeros((1, h)),
            })
            .collect();
        Self {
            cfg,
            freqs,
            logsnr_lo,
            time_w1: fan_in_uniform(2 * nf, te, rng),
            time_b1: Array2::zeros((1, te)),
            time_w2: fan_in_uniform(te, te, rng),
            time_b2: Array2::zeros((1, te)),
            w_in: fan_in_uniform(cfg.input_dim, h, rng),
            b_in: Array2::zeros((1, h)),
            blocks,
            w_out: Array2::zeros((h, cfg.input_dim)),
            b_out: Array2::zeros((1, cfg.input_dim)),
        }
    }

    /// Fourier features of the log-SNR (length 2 * n_freqs, before the MLP).
    pub fn fourier_features(&self, t: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        let v = schedule.log_snr(t) - self.logsnr_lo;
        let mut out = Vec::with_capacity(2 * self.freqs.len());
        for f in &self.freqs {
            out.push((f * v).sin());
            out.push((f * v).cos());
        }
        out
    }

    fn fourier_batch(&self, ts: &[f64], schedule: &NoiseSchedule) -> Array2<f64> {
        let mut m = Array2::zeros((ts.len(), 2 * self.freqs.len()));
        for (i, &t) in ts.iter().enumerate() {
            let v = schedule.log_snr(t) - self.logsnr_lo;
            for (j, f) in self.freqs.iter().enumerate() {
                m[(i, 2 * j)] = (f * v).sin();
                m[(i, 2 * j + 1)] = (f * v).cos();
            }
        }
        m
    }

    /// The 128-dimensional conditioning vector for a single time.
    pub fn time_embedding(&self, t: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        let feats = self.fourier_batch(&[t], schedule);
        let a1 = linear(&feats, &self.time_w1, &self.time_b1);
        let h1 = a1.mapv(silu);
        let temb = linear(&h1, &self.time_w2, &self.time_b2);
        temb.row(0).to_vec()
    }

    /// Forward pass returning the score (raw head output divided by
    /// sigma(t)) and the cache needed for the backward pass.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        ts: &[f64],
        schedule: &NoiseSchedule,
    ) -> (Array2<f64>, ForwardCache) {
        assert_eq!(x.nrows(), ts.len());
        assert_eq!(x.ncols(), self.cfg.input_dim);
        let feats = self.fourier_batch(ts, schedule);
        let a1 = linear(&feats, &self.time_w1, &self.time_b1);
        let h1 = a1.mapv(silu);
        let temb = linear(&h1, &self.time_w2, &self.time_b2);

        let mut h = linear(&x.to_owned(), &self.w_in, &self.b_in);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (n1, xhat1, istd1) = layernorm(&h, &blk.ln1_g, &blk.ln1_b);
            let mut apre = linear(&n1, &blk.w1, &blk.b1);
            apre += &temb.dot(&blk.wt);
            let u = apre.mapv(silu);
            let (n2, xhat2, istd2) = layernorm(&u, &blk.ln2_g, &blk.ln2_b);
            let v = linear(&n2, &blk.w2, &blk.b2);
            h += &v;
            blocks.push(BlockCache { xhat1, istd1, n1, apre, xhat2, istd2, n2 });
        }
        let raw = linear(&h, &self.w_out, &self.b_out);
        let sigmas: Vec<f64> = ts.iter().map(|&t| schedule.sigma(t)).collect();
        let mut score = raw;
        for (i, mut row) in score.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v / sigmas[i]);
        }
        let cache = ForwardCache {
            x: x.to_owned(),
            feats,
            a1,
            h1,
            temb,
            blocks,
            h_final: h,
            sigmas,
        };
        (score, cache)
    }

    /// Score at a single point (used by the score-field abstraction).
    pub fn score_one(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let (s, _) = self.forward(xm.view(), &[t], schedule);
        s.row(0).to_vec()
    }

    /// Reverse-mode pass from a cotangent on the score output; returns
    /// parameter gradients (aligned with [`ScoreNet::params`]).
    pub fn backward(&self, cache: &ForwardCache, dscore: &Array2<f64>) -> Grads {
        let mut g = Grads::zeros_like(self);
        // undo the 1/sigma output scaling
        let mut dout = dscore.clone();
        for (i, mut row) in dout.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v / cache.sigmas[i]);
        }
        // output head
        let w_out_i = idx::w_out(self.blocks.len());
        g.t[w_out_i] += &cache.h_final.t().dot(&dout);
        accum_colsum(&mut g.t[w_out_i + 1], &dout);
        let mut dh = dout.dot(&self.w_out.t());
        let mut dtemb: Array2<f64> = Array2::zeros(cache.temb.raw_dim());

        let nb = self.blocks.len();
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[bi];
            let base = idx::block_base(bi);
            // v path
            let dv = dh.clone();
            g.t[base + idx::B_W2] += &c.n2.t().dot(&dv);
            accum_colsum(&mut g.t[base + idx::B_B2], &dv);
            let dn2 = dv.dot(&blk.w2.t());
            let (dg2, db2) = (base + idx::B_LN2G, base + idx::B_LN2B);
            let du = {
                let (mut dgamma, mut dbeta) = (g.t[dg2].clone(), g.t[db2].clone());
                let du =
                    layernorm_backward(&dn2, &c.xhat2, &c.istd2, &blk.ln2_g, &mut dgamma, &mut dbeta);
                g.t[dg2] = dgamma;
                g.t[db2] = dbeta;
                du
            };
            let dapre = &du * &c.apre.mapv(silu_grad);
            g.t[base + idx::B_W1] += &c.n1.t().dot(&dapre);
            accum_colsum(&mut g.t[base + idx::B_B1], &dapre);
            g.t[base + idx::B_WT] += &cache.temb.t().dot(&dapre);
            dtemb += &dapre.dot(&blk.wt.t());
            let dn1 = dapre.dot(&blk.w1.t());
            let (dg1, db1) = (base + idx::B_LN1G, base + idx::B_LN1B);
            let dh_ln = {
                let (mut dgamma, mut dbeta) = (g.t[dg1].clone(), g.t[db1].clone());
                let dx =
                    layernorm_backward(&dn1, &c.xhat1, &c.istd1, &blk.ln1_g, &mut dgamma, &mut dbeta);
                g.t[dg1] = dgamma;
                g.t[db1] = dbeta;
                dx
            };
            dh += &dh_ln; // residual: dh_in = dh_out + d(ln path)
            let _ = nb;
        }
        // input projection
        g.t[idx::W_IN] += &cache.x.t().dot(&dh);
        accum_colsum(&mut g.t[idx::B_IN], &dh);
        // time MLP
        g.t[idx::TIME_W2] += &cache.h1.t().dot(&dtemb);
        accum_colsum(&mut g.t[idx::TIME_B2], &dtemb);
        let dh1 = dtemb.dot(&self.time_w2.t());
        let da1 = &dh1 * &cache.a1.mapv(silu_grad);
        g.t[idx::TIME_W1] += &cache.feats.t().dot(&da1);
        accum_colsum(&mut g.t[idx::TIME_B1], &da1);
        g
    }

    /// Variance-weighted DSM loss and parameter gradients on a batch:
    /// `x_t = alpha(t) x0 + sigma(t) eps`, target `-eps/sigma(t)`,
    /// loss `mean_i Var(t_i) |s(x_t_i, t_i) - target_i|^2`.
    pub fn dsm_loss_and_grad(
        &self,
        x0: &Array2<f64>,
        eps: &Array2<f64>,
        ts: &[f64],
        schedule: &NoiseSchedule,
    ) -> (f64, Grads) {
        let b = x0.nrows();
        assert!(b > 0, "batch must be nonempty");
        assert_eq!(eps.raw_dim(), x0.raw_dim());
        let mut xt = Array2::zeros(x0.raw_dim());
        let mut target = Array2::zeros(x0.raw_dim());
        let mut vars = Vec::with_capacity(b);
        for i in 0..b {
            let t = ts[i];
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            vars.push(schedule.var(t));
            for j in 0..x0.ncols() {
                xt[(i, j)] = a * x0[(i, j)] + s * eps[(i, j)];
                target[(i, j)] = -eps[(i, j)] / s;
            }
        }
        let (score, cache) = self.forward(xt.view(), ts, schedule);
        let mut loss = 0.0;
        let mut dscore = Array2::zeros(score.raw_dim());
        for i in 0..b {
            let w = vars[i];
            for j in 0..score.ncols() {
                let r = score[(i, j)] - target[(i, j)];
                loss += w * r * r;
                dscore[(i, j)] = 2.0 * w * r / b as f64;
            }
        }
        loss /= b as f64;
        (loss, self.backward(&cache, &dscore))
    }

    /// Parameter tensors in a fixed order (biases and LayerNorm parameters
    /// are stored as 1-row matrices).
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
            &self.w_in,
            &self.b_in,
        ];
        for b in &self.blocks {
            v.extend([&b.ln1_g, &b.ln1_b, &b.w1, &b.b1, &b.wt, &b.ln2_g, &b.ln2_b, &b.w2, &b.b2]);
        }
        v.push(&self.w_out);
        v.push(&self.b_out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = vec![
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
            &mut self.w_in,
            &mut self.b_in,
        ];
        for b in &mut self.blocks {
            v.push(&mut b.ln1_g);
            v.push(&mut b.ln1_b);
            v.push(&mut b.w1);
            v.push(&mut b.b1);
            v.push(&mut b.wt);
            v.push(&mut b.ln2_g);
            v.push(&mut b.ln2_b);
            v.push(&mut b.w2);
            v.push(&mut b.b2);
        }
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Writes a checkpoint: one JSON header line (shapes, config, step)
    /// followed by the flat little-endian f64 parameter blob.
    pub fn save_checkpoint(
        &self,
        path: &std::path::Path,
        step: u64,
        schedule: &NoiseSchedule,
    ) -> std::io::Result<()> {
        use std::io::Write;
        let shapes: Vec<[usize; 2]> = self.params().iter().map(|p| [p.nrows(), p.ncols()]).collect();
        let header = serde_json::json!({
            "format": "mdlab-checkpoint-v1",
            "step": step,
            "cfg": self.cfg,
            "schedule": schedule,
            "freqs": self.freqs,
            "logsnr_lo": self.logsnr_lo,
            "shapes": shapes,
        });
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for p in self.params() {
            for v in p.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint written by [`ScoreNet::save_checkpoint`].
    pub fn load_checkpoint(path: &std::path::Path) -> std::io::Result<(Self, u64, NoiseSchedule)> {
        use std::io::{BufRead, Read};
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        f.read_line(&mut line)?;
        let header: serde_json::Value = serde_json::from_str(&line)?;
        let cfg: NetConfig = serde_json::from_value(header["cfg"].clone())
            .map_err(std::io::Error::other)?;
        let schedule: NoiseSchedule = serde_json::from_value(header["schedule"].clone())
            .map_err(std::io::Error::other)?;
        let step = header["step"].as_u64().unwrap_or(0);
        let freqs: Vec<f64> =
            serde_json::from_value(header["freqs"].clone()).map_err(std::io::Error::other)?;
        let logsnr_lo = header["logsnr_lo"].as_f64().unwrap_or(0.0);
        let mut rng = StdRng::seed_from_u64(0);
        let mut net = ScoreNet::new(cfg, &schedule, &mut rng);
        net.freqs = freqs;
        net.logsnr_lo = logsnr_lo;
        let shapes: Vec<[usize; 2]> =
            serde_json::from_value(header["shapes"].clone()).map_err(std::io::Error::other)?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;
        let mut off = 0usize;
        for (p, sh) in net.params_mut().into_iter().zip(&shapes) {
            assert_eq!([p.nrows(), p.ncols()], *sh, "checkpoint shape mismatch");
            for v in p.iter_mut() {
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&blob[off..off + 8]);
                *v = f64::from_le_bytes(bytes);
                off += 8;
            }
        }
        assert_eq!(off, blob.len(), "checkpoint blob size mismatch");
        Ok((net, step, schedule))
    }
}

use rand::SeedableRng;

/// Indices of the shared (non-block) tensors in the parameter order, and
/// offsets of block tensors.
mod idx {
    pub const TIME_W1: usize = 0;
    pub const TIME_B1: usize = 1;
    pub const TIME_W2: usize = 2;
    pub const TIME_B2: usize = 3;
    pub const W_IN: usize = 4;
    pub const B_IN: usize = 5;
    pub const PER_BLOCK: usize = 9;
    pub const B_LN1G: usize = 0;
    pub const B_LN1B: usize = 1;
    pub const B_W1: usize = 2;
    pub const B_B1: usize = 3;
    pub const B_WT: usize = 4;
    pub const B_LN2G: usize = 5;
    pub const B_LN2B: usize = 6;
    pub const B_W2: usize = 7;
    pub const B_B2: usize = 8;

    pub fn block_base(bi: usize) -> usize {
        6 + bi * PER_BLOCK
    }

    pub fn w_out(n_blocks: usize) -> usize {
        6 + n_blocks * PER_BLOCK
    }
}

/// Gradient tensors aligned with [`ScoreNet::params`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub t: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &ScoreNet) -> Self {
        Self { t: net.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect() }
    }

    pub fn global_norm(&self) -> f64 {
        self.t.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.t {
            g.mapv_inplace(|v| v * s);
        }
    }
}

fn accum_colsum(acc: &mut Array2<f64>, m: &Array2<f64>) {
    let s = m.sum_axis(Axis(0));
    let mut row = acc.row_mut(0);
    row += &s;
}

/// AdamW with global-norm gradient clipping and linear learning-rate warmup.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(net: &ScoreNet, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: 1.0,
            warmup_steps: 100,
            step: 0,
            m: net.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: net.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update: clip at `clip_norm`, Adam moments with bias correction,
    /// decoupled weight decay. Increments the step count by exactly 1.
    pub fn apply(&mut self, net: &mut ScoreNet, mut grads: Grads) {
        let gn = grads.global_norm();
        assert!(gn.is_finite(), "non-finite gradient norm");
        if gn > self.clip_norm {
            grads.scale(self.clip_norm / gn);
        }
        self.step += 1;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let lr = self.lr * warm;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in net
            .params_mut()
            .into_iter()
            .zip(grads.t.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_adamw(p, g, m, v, self.beta1, self.beta2, self.eps, lr, self.weight_decay, bc1, bc2);
        }
        debug_assert!(net.all_finite(), "non-finite parameter after optimizer step");
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_adamw(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    b1: f64,
    b2: f64,
    eps: f64,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    for ((pi, gi), (mi, vi)) in
        p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
    {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
    }
}

/// Per-block forward activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    xhat1: Array2<f64>,
    istd1: Array1<f64>,
    n1: Array2<f64>,
    apre: Array2<f64>,
    xhat2: Array2<f64>,
    istd2: Array1<f64>,
    n2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    feats: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    temb: Array2<f64>,
    blocks: Vec<BlockCache>,
    h_final: Array2<f64>,
    sigmas: Vec<f64>,
}

impl ForwardCache {
    /// Pre-affine LayerNorm activations of the first block, for tests.
    pub fn first_block_xhat(&self) -> Option<&Array2<f64>> {
        self.blocks.first().map(|b| &b.xhat1)
    }
}

// ---------------------------------------------------------------------------
// Scalar potential network
// ---------------------------------------------------------------------------

/// Small scalar MLP `raw(x)`; the potential is `eta(x) = raw(x)^2 / 2`,
/// nonnegative by construction, with `raw` playing the role of a signed
/// distance surrogate (the eikonal residual vanishes iff |grad raw| = 1 near
/// the zero set).
#[derive(Debug, Clone)]
pub struct PotentialNet {
    pub input_dim: usize,
    pub hidden: usize,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
    w3: Array2<f64>,
    b3: Array2<f64>,
}

impl PotentialNet {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut StdRng) -> Self {
        Self {
            input_dim,
            hidden,
            w1: fan_in_uniform(input_dim, hidden, rng),
            b1: Array2::zeros((1, hidden)),
            w2: fan_in_uniform(hidden, hidden, rng),
            b2: Array2::zeros((1, hidden)),
            w3: fan_in_uniform(hidden, 1, rng),
            b3: Array2::from_elem((1, 1), 0.1),
        }
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let a1 = linear(&xm, &self.w1, &self.b1);
        let h1 = a1.mapv(silu);
        let a2 = linear(&h1, &self.w2, &self.b2);
        let h2 = a2.mapv(silu);
        linear(&h2, &self.w3, &self.b3)[(0, 0)]
    }

    pub fn eta(&self, x: &[f64]) -> f64 {
        let r = self.raw(x);
        0.5 * r * r
    }

    /// raw and its exact input gradient.
    pub fn raw_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let a1 = linear(&xm, &self.w1, &self.b1);
        let h1 = a1.mapv(silu);
        let a2 = linear(&h1, &self.w2, &self.b2);
        let h2 = a2.mapv(silu);
        let raw = linear(&h2, &self.w3, &self.b3)[(0, 0)];
        // reverse pass for the input gradient
        let dh2 = self.w3.column(0).to_owned(); // (H,)
        let da2: Array1<f64> =
            dh2.iter().zip(a2.row(0)).map(|(d, a)| d * silu_grad(*a)).collect();
        let dh1 = self.w2.dot(&da2);
        let da1: Array1<f64> =
            dh1.iter().zip(a1.row(0)).map(|(d, a)| d * silu_grad(*a)).collect();
        let dx = self.w1.dot(&da1);
        (raw, dx.to_vec())
    }

    /// grad of eta = raw * grad raw.
    pub fn grad_eta(&self, x: &[f64]) -> Vec<f64> {
        let (raw, mut g) = self.raw_and_grad(x);
        for v in g.iter_mut() {
            *v *= raw;
        }
        g
    }

    /// Batched forward over rows of `xs`, returning raw values and the cache.
    pub fn forward_batch(&self, xs: &Array2<f64>) -> (Vec<f64>, PotCache) {
        let a1 = linear(xs, &self.w1, &self.b1);
        let h1 = a1.mapv(silu);
        let a2 = linear(&h1, &self.w2, &self.b2);
        let h2 = a2.mapv(silu);
        let raw = linear(&h2, &self.w3, &self.b3);
        (raw.column(0).to_vec(), PotCache { x: xs.clone(), a1, h1, a2, h2 })
    }

    /// Parameter gradients for a loss with per-row cotangents `draw`.
    pub fn backward_batch(&self, cache: &PotCache, draw: &[f64]) -> PotGrads {
        let b = draw.len();
        let draw = Array2::from_shape_vec((b, 1), draw.to_vec()).expect("shape");
        let mut g = PotGrads::zeros_like(self);
        g.t[4] += &cache.h2.t().dot(&draw);
        accum_colsum(&mut g.t[5], &draw);
        let dh2 = draw.dot(&self.w3.t());
        let da2 = &dh2 * &cache.a2.mapv(silu_grad);
        g.t[2] += &cache.h1.t().dot(&da2);
        accum_colsum(&mut g.t[3], &da2);
        let dh1 = da2.dot(&self.w2.t());
        let da1 = &dh1 * &cache.a1.mapv(silu_grad);
        g.t[0] += &cache.x.t().dot(&da1);
        accum_colsum(&mut g.t[1], &da1);
        g
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct PotCache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PotGrads {
    pub t: Vec<Array2<f64>>,
}

impl PotGrads {
    pub fn zeros_like(net: &PotentialNet) -> Self {
        Self { t: net.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect() }
    }

    pub fn global_norm(&self) -> f64 {
        self.t.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.t {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// AdamW over a raw tensor list (used for the potential net, which does not
/// share the ScoreNet parameter container).
#[derive(Debug, Clone)]
pub struct AdamWFlat {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamWFlat {
    pub fn new(shapes: &[&Array2<f64>], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            clip_norm: 1.0,
            warmup_steps: 100,
            step: 0,
            m: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn apply(&mut self, params: Vec<&mut Array2<f64>>, mut grads: Vec<Array2<f64>>) {
        let gn: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!(gn.is_finite(), "non-finite gradient norm");
        if gn > self.clip_norm {
            let s = self.clip_norm / gn;
            for g in &mut grads {
                g.mapv_inplace(|v| v * s);
            }
        }
        self.step += 1;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let lr = self.lr * warm;
        let bc1 = 1.0 - 0.9f64.powi(self.step as i32);
        let bc2 = 1.0 - 0.999f64.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.into_iter().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_adamw(p, g, m, v, 0.9, 0.999, 1e-8, lr, self.weight_decay, bc1, bc2);
        }
    }
}
