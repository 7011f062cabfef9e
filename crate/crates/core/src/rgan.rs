//! Per-asset recurrent GAN with an MMD-regularized generator, KS validation
//! and HLC downsampling of generated fine-frequency changes.
//!
//! Networks train on standardized percentage changes; a [`GanPair`] keeps the
//! training mean and standard deviation to map samples back.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use folio_nn::{Checkpoint, Dense, Graph, LstmCell, NodeId, OptimizerState, ParamRecord, ParamStore, Tensor};

use crate::error::{CoreError, Result};
use crate::market::MarketData;

/// Terms of the Kolmogorov series; the tail beyond is far below `f64` eps
/// for every `lambda` where the series is evaluated.
const KS_TERMS: usize = 100;
/// Below this `lambda` the Kolmogorov tail probability is 1 to machine
/// precision and the alternating series converges too slowly to evaluate.
const KS_LAMBDA_MIN: f64 = 0.18;
/// Floor on `1 + r` for generated fine changes, so prices stay positive.
const MIN_GROWTH: f64 = 0.05;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    sigma: f64,
}

impl RbfKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(CoreError::Invalid(format!("kernel bandwidth {sigma} must be positive")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `exp(-|x - y|^2 / (2 sigma^2))`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Median pairwise Euclidean distance over the pooled samples, or 1 when the
/// median is zero.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    if pooled.len() < 2 {
        return Err(CoreError::InsufficientData("bandwidth needs >= 2 pooled points".into()));
    }
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    let n = d.len();
    d.sort_by(f64::total_cmp);
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

fn kernel_sum(x: &[Vec<f64>], y: &[Vec<f64>], k: &RbfKernel, skip_diag: bool) -> f64 {
    let mut s = 0.0;
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if !(skip_diag && i == j) {
                s += k.eval(a, b);
            }
        }
    }
    s
}

/// All-pairs biased estimator; self-similarities are included so that the
/// estimate of a batch against itself is exactly zero.
pub fn mmd2_biased(x: &[Vec<f64>], y: &[Vec<f64>], k: &RbfKernel) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(CoreError::InsufficientData("MMD needs non-empty batches".into()));
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    Ok(kernel_sum(x, x, k, false) / (m * m) - 2.0 * kernel_sum(x, y, k, false) / (m * n)
        + kernel_sum(y, y, k, false) / (n * n))
}

/// Unbiased estimator: within-batch terms average over the `M(M-1)` ordered
/// pairs `i != j`.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], k: &RbfKernel) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(CoreError::InsufficientData("unbiased MMD needs >= 2 samples per batch".into()));
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    Ok(kernel_sum(x, x, k, true) / (m * (m - 1.0)) - 2.0 * kernel_sum(x, y, k, false) / (m * n)
        + kernel_sum(y, y, k, true) / (n * (n - 1.0)))
}

/// Unbiased MMD^2 between a constant batch `real: [M, d]` and a graph node
/// `gen: [N, d]`, differentiable in `gen`.
pub fn mmd2_unbiased_graph(g: &mut Graph, real: &Tensor, gen: NodeId, k: &RbfKernel) -> Result<NodeId> {
    let (m, d) = (real.rows(), real.cols());
    let n = g.value(gen).rows();
    if m < 2 || n < 2 || g.value(gen).cols() != d {
        return Err(CoreError::InsufficientData("unbiased MMD needs >= 2 samples per batch".into()));
    }
    let rows: Vec<Vec<f64>> = (0..m).map(|r| real.row_slice(r).to_vec()).collect();
    let xx = kernel_sum(&rows, &rows, k, true) / (m as f64 * (m as f64 - 1.0));
    let inv = -1.0 / (2.0 * k.sigma * k.sigma);

    let x = g.constant(real.clone())?;
    let ones = g.constant(Tensor::filled(&[1, d], 1.0))?;
    let ysq = g.square(gen)?;
    let ysq_col = g.row_sums(ysq)?;
    let ysq_row = g.matmul_t(ones, ysq)?;
    let xsq_row = g.constant(Tensor::row(
        &rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect::<Vec<f64>>(),
    ))?;

    // |y_i - x_j|^2 = |y_i|^2 + |x_j|^2 - 2 y_i . x_j
    let yx = g.matmul_t(gen, x)?;
    let yx = g.scale(yx, -2.0)?;
    let yx = g.add_col(yx, ysq_col)?;
    let yx = g.add_row(yx, xsq_row)?;
    let kyx = g.scale(yx, inv)?;
    let kyx = g.exp(kyx)?;
    let kyx = g.sum(kyx)?;

    let yy = g.matmul_t(gen, gen)?;
    let yy = g.scale(yy, -2.0)?;
    let yy = g.add_col(yy, ysq_col)?;
    let yy = g.add_row(yy, ysq_row)?;
    let kyy = g.scale(yy, inv)?;
    let kyy = g.exp(kyy)?;
    let kyy = g.sum(kyy)?;
    // Diagonal entries are exp(0) = 1 and carry no gradient.
    let kyy = g.add_scalar(kyy, -(n as f64))?;

    let within = g.scale(kyy, 1.0 / (n as f64 * (n as f64 - 1.0)))?;
    let cross = g.scale(kyx, -2.0 / (m as f64 * n as f64))?;
    let s = g.add(within, cross)?;
    Ok(g.add_scalar(s, xx)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Noise dimension per time step.
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub disc_hidden: usize,
    /// Window length of generated and real sequences.
    pub seq_len: usize,
    pub batch: usize,
    /// Discriminator/generator step pairs.
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the MMD regularizer in the generator loss.
    pub zeta: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 8,
            gen_hidden: 32,
            disc_hidden: 32,
            seq_len: 95,
            batch: 128,
            steps: 2000,
            learning_rate: 1e-3,
            zeta: 1.0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.gen_hidden == 0 || self.disc_hidden == 0 || self.seq_len == 0 {
            return Err(CoreError::Config("GAN dimensions must be positive".into()));
        }
        if self.batch < 2 {
            return Err(CoreError::Config("GAN batch must be >= 2 for the unbiased MMD".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.zeta >= 0.0) {
            return Err(CoreError::Config("GAN learning rate must be positive and zeta >= 0".into()));
        }
        Ok(())
    }
}

/// Layer handles of a generator/discriminator pair. Values live in the
/// stores of the owning [`GanPair`].
#[derive(Debug, Clone)]
pub struct GanNets {
    pub gen_lstm: LstmCell,
    pub gen_out: Dense,
    pub disc_lstm: LstmCell,
    pub disc_out: Dense,
    pub seq_len: usize,
    pub noise_dim: usize,
}

impl GanNets {
    /// Generated sequences as one node per step, each `[batch, 1]`.
    /// `noise` holds one `[batch, noise_dim]` tensor per step.
    pub fn generator_steps(&self, g: &mut Graph, gen: &ParamStore, noise: &[Tensor]) -> Result<Vec<NodeId>> {
        if noise.len() != self.seq_len {
            return Err(CoreError::Invalid(format!("{} noise steps, need {}", noise.len(), self.seq_len)));
        }
        let zs = noise.iter().map(|z| g.constant(z.clone())).collect::<folio_nn::Result<Vec<_>>>()?;
        let hs = self.gen_lstm.run(g, gen, &zs)?;
        let w = g.param(gen, self.gen_out.w)?;
        let b = g.param(gen, self.gen_out.b)?;
        let mut out = Vec::with_capacity(hs.len());
        for h in hs {
            let y = g.matmul(h, w)?;
            out.push(g.add_row(y, b)?);
        }
        Ok(out)
    }

    /// Probability that each sequence is real, `[batch, 1]`.
    pub fn discriminator(&self, g: &mut Graph, disc: &ParamStore, steps: &[NodeId]) -> Result<NodeId> {
        let hs = self.disc_lstm.run(g, disc, steps)?;
        let last = *hs.last().ok_or_else(|| CoreError::Invalid("empty sequence".into()))?;
        let logit = self.disc_out.forward(g, disc, last)?;
        Ok(g.sigmoid(logit)?)
    }

    /// Places a `[batch, seq_len]` tensor on the graph as per-step constants.
    pub fn sequence_inputs(&self, g: &mut Graph, batch: &Tensor) -> Result<Vec<NodeId>> {
        let rows = batch.rows();
        (0..batch.cols())
            .map(|t| {
                let col = (0..rows).map(|r| batch.get(r, t)).collect();
                Ok(g.constant(Tensor::matrix(rows, 1, col)?)?)
            })
            .collect()
    }
}

/// A trained (or fresh) generator/discriminator pair for one asset.
#[derive(Debug, Clone)]
pub struct GanPair {
    pub asset: String,
    pub config: GanConfig,
    pub nets: GanNets,
    pub gen: ParamStore,
    pub disc: ParamStore,
    /// Training-series moments used for standardization.
    pub mean: f64,
    pub sd: f64,
    pub trained: bool,
}

impl GanPair {
    pub fn new<R: Rng + ?Sized>(asset: &str, config: &GanConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        let nets = GanNets {
            gen_lstm: LstmCell::new(&mut gen, "gen.lstm", config.noise_dim, config.gen_hidden, rng)?,
            gen_out: Dense::new(&mut gen, "gen.out", config.gen_hidden, 1, rng)?,
            disc_lstm: LstmCell::new(&mut disc, "disc.lstm", 1, config.disc_hidden, rng)?,
            disc_out: Dense::new(&mut disc, "disc.out", config.disc_hidden, 1, rng)?,
            seq_len: config.seq_len,
            noise_dim: config.noise_dim,
        };
        Ok(Self {
            asset: asset.to_string(),
            config: config.clone(),
            nets,
            gen,
            disc,
            mean: 0.0,
            sd: 1.0,
            trained: false,
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Tensor> {
        (0..self.config.seq_len)
            .map(|_| {
                let data = (0..batch * self.config.noise_dim)
                    .map(|_| StandardNormal.sample(rng))
                    .collect();
                Tensor::matrix(batch, self.config.noise_dim, data).expect("shape")
            })
            .collect()
    }

    /// Generated sequences in standardized units, `[batch, seq_len]`.
    pub fn generate_standardized<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Tensor> {
        let noise = self.sample_noise(batch, rng);
        self.generate_from(&noise)
    }

    pub fn generate_from(&self, noise: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let steps = self.nets.generator_steps(&mut g, &self.gen, noise)?;
        let seq = g.concat_cols(&steps)?;
        Ok(g.value(seq).clone())
    }

    /// Generated percentage-change sequences in data units.
    pub fn generate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let t = self.generate_standardized(count, rng)?;
        Ok((0..count)
            .map(|r| t.row_slice(r).iter().map(|z| self.mean + self.sd * z).collect())
            .collect())
    }

    /// Discriminator probabilities for standardized sequences.
    pub fn discriminate(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let steps = self.nets.sequence_inputs(&mut g, batch)?;
        let p = self.nets.discriminator(&mut g, &self.disc, &steps)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.gen.to_checkpoint();
        ck.extend(self.disc.to_checkpoint());
        ck.params.push(ParamRecord {
            name: "meta.moments".into(),
            shape: vec![1, 2],
            values: vec![self.mean, self.sd],
        });
        ck
    }

    /// Rebuilds a trained pair from a checkpoint written by
    /// [`GanPair::to_checkpoint`] with the same configuration.
    pub fn from_checkpoint<R: Rng + ?Sized>(
        asset: &str,
        config: &GanConfig,
        ck: &Checkpoint,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pair = Self::new(asset, config, rng)?;
        let gen = Checkpoint {
            params: ck.params.iter().filter(|r| r.name.starts_with("gen.")).cloned().collect(),
        };
        let disc = Checkpoint {
            params: ck.params.iter().filter(|r| r.name.starts_with("disc.")).cloned().collect(),
        };
        pair.gen.load_checkpoint(&gen)?;
        pair.disc.load_checkpoint(&disc)?;
        let meta = ck
            .params
            .iter()
            .find(|r| r.name == "meta.moments" && r.values.len() == 2)
            .ok_or_else(|| CoreError::Invalid("checkpoint lacks meta.moments".into()))?;
        pair.mean = meta.values[0];
        pair.sd = meta.values[1];
        pair.trained = true;
        Ok(pair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub disc: f64,
    pub gen: f64,
    /// `mean log(1 - D(G(z)))`, the adversarial part of the generator loss.
    pub adversarial: f64,
    pub mmd2: f64,
}

/// Discriminator loss `-mean[log D(h) + log(1 - D(G(z)))]` on the graph,
/// with the generated batch as a constant.
pub fn disc_loss_graph(
    nets: &GanNets,
    g: &mut Graph,
    disc: &ParamStore,
    real: &Tensor,
    fake: &Tensor,
) -> Result<NodeId> {
    let b = real.rows();
    let rs = nets.sequence_inputs(g, real)?;
    let fs = nets.sequence_inputs(g, fake)?;
    let pr = nets.discriminator(g, disc, &rs)?;
    let pf = nets.discriminator(g, disc, &fs)?;
    let lr = g.binary_log_loss(pr, Tensor::filled(&[b, 1], 1.0))?;
    let lf = g.binary_log_loss(pf, Tensor::filled(&[fake.rows(), 1], 0.0))?;
    Ok(g.add(lr, lf)?)
}

/// Generator loss `mean log(1 - D(G(z))) + zeta * MMD^2(real, G(z))` on the
/// graph. Returns `(loss, adversarial, mmd2)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn gen_loss_graph(
    nets: &GanNets,
    g: &mut Graph,
    gen: &ParamStore,
    disc: &ParamStore,
    real: &Tensor,
    noise: &[Tensor],
    kernel: &RbfKernel,
    zeta: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    g.freeze(disc);
    let steps = nets.generator_steps(g, gen, noise)?;
    let b = g.value(steps[0]).rows();
    let p = nets.discriminator(g, disc, &steps)?;
    // binary_log_loss with target 0 is -mean log(1 - p), clamped.
    let bll = g.binary_log_loss(p, Tensor::filled(&[b, 1], 0.0))?;
    let adv = g.scale(bll, -1.0)?;
    let seq = g.concat_cols(&steps)?;
    let mmd = mmd2_unbiased_graph(g, real, seq, kernel)?;
    let reg = g.scale(mmd, zeta)?;
    Ok((g.add(adv, reg)?, adv, mmd))
}

/// Generator loss with the bandwidth set to the median pairwise distance of
/// the pooled real and generated batch. Returns `(loss, mmd2, sigma)`.
fn gen_step_graph(pair: &GanPair, g: &mut Graph, real: &Tensor, noise: &[Tensor]) -> Result<(NodeId, NodeId, f64)> {
    let nets = &pair.nets;
    g.freeze(&pair.disc);
    let steps = nets.generator_steps(g, &pair.gen, noise)?;
    let b = g.value(steps[0]).rows();
    let seq = g.concat_cols(&steps)?;
    let sigma = median_bandwidth(&tensor_rows(real), &tensor_rows(g.value(seq)))?;
    let kernel = RbfKernel::new(sigma)?;
    let p = nets.discriminator(g, &pair.disc, &steps)?;
    let bll = g.binary_log_loss(p, Tensor::filled(&[b, 1], 0.0))?;
    let adv = g.scale(bll, -1.0)?;
    let mmd = mmd2_unbiased_graph(g, real, seq, &kernel)?;
    let reg = g.scale(mmd, pair.config.zeta)?;
    Ok((g.add(adv, reg)?, mmd, sigma))
}

/// Both losses on one real batch and one noise batch.
pub fn gan_losses(pair: &GanPair, real: &Tensor, noise: &[Tensor], kernel: &RbfKernel) -> Result<GanLosses> {
    if real.rows() < 2 {
        return Err(CoreError::InsufficientData("GAN losses need a batch of >= 2".into()));
    }
    let fake = pair.generate_from(noise)?;
    let mut g = Graph::new();
    let d = disc_loss_graph(&pair.nets, &mut g, &pair.disc, real, &fake)?;
    let (gl, adv, mmd) = gen_loss_graph(&pair.nets, &mut g, &pair.gen, &pair.disc, real, noise, kernel, pair.config.zeta)?;
    let v = |n: NodeId| g.value(n).data()[0];
    Ok(GanLosses {
        disc: v(d),
        gen: v(gl),
        adversarial: v(adv),
        mmd2: v(mmd),
    })
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Per-step record of adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanStepLog {
    pub step: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub mmd2: f64,
    pub sigma: f64,
}

/// All length-`k` windows with stride 1.
pub fn windows(series: &[f64], k: usize) -> Vec<Vec<f64>> {
    if series.len() < k {
        return Vec::new();
    }
    series.windows(k).map(<[f64]>::to_vec).collect()
}

fn batch_tensor<R: Rng + ?Sized>(pool: &[Vec<f64>], b: usize, rng: &mut R) -> Tensor {
    let k = pool[0].len();
    let mut data = Vec::with_capacity(b * k);
    for _ in 0..b {
        data.extend_from_slice(&pool[rng.random_range(0..pool.len())]);
    }
    Tensor::matrix(b, k, data).expect("shape")
}

/// Trains a pair on one asset's percentage-change series. Each step is one
/// discriminator update followed by one generator update on fresh batches.
pub fn train_rgan<R: Rng + ?Sized>(
    asset: &str,
    series: &[f64],
    config: &GanConfig,
    rng: &mut R,
    mut log: impl FnMut(&GanStepLog),
) -> Result<GanPair> {
    config.validate()?;
    if series.len() < config.seq_len + 1 {
        return Err(CoreError::InsufficientData(format!(
            "{} changes cannot cut two windows of {}",
            series.len(),
            config.seq_len
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("GAN training series"));
    }
    let mut pair = GanPair::new(asset, config, rng)?;
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    // Rounding leaves a tiny nonzero sd on constant input.
    if !(sd > 0.0) || series.iter().all(|v| *v == series[0]) {
        return Err(CoreError::Degenerate(format!("asset {asset} has constant changes")));
    }
    pair.mean = mean;
    pair.sd = sd;
    let standardized: Vec<f64> = series.iter().map(|v| (v - mean) / sd).collect();
    let pool = windows(&standardized, config.seq_len);

    let mut gen_opt = OptimizerState::adam(config.learning_rate);
    let mut disc_opt = OptimizerState::adam(config.learning_rate);
    let b = config.batch;
    for step in 0..config.steps {
        // Discriminator step against a detached generated batch.
        let real = batch_tensor(&pool, b, rng);
        let fake = pair.generate_standardized(b, rng)?;
        let mut g = Graph::new();
        let dl = disc_loss_graph(&pair.nets, &mut g, &pair.disc, &real, &fake)?;
        let grads = g.backward(dl)?;
        pair.disc.zero_grad();
        pair.disc.accumulate(&g, &grads);
        disc_opt.step(&mut pair.disc)?;
        let disc_loss = g.value(dl).data()[0];

        // Generator step; the bandwidth follows the pooled batch.
        let real = batch_tensor(&pool, b, rng);
        let noise = pair.sample_noise(b, rng);
        let mut g = Graph::new();
        let (gl, mmd, sigma) = gen_step_graph(&pair, &mut g, &real, &noise)?;
        let grads = g.backward(gl)?;
        pair.gen.zero_grad();
        pair.gen.accumulate(&g, &grads);
        gen_opt.step(&mut pair.gen)?;
        log(&GanStepLog {
            step,
            disc_loss,
            gen_loss: g.value(gl).data()[0],
            mmd2: g.value(mmd).data()[0],
            sigma,
        });
    }
    pair.trained = true;
    Ok(pair)
}

/// Two-sample KS statistic `sup |F_a - F_b|` over the pooled values.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::InsufficientData("KS needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("KS sample"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Kolmogorov tail `Q(lambda) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < KS_LAMBDA_MIN {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=KS_TERMS {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// `(D, p)` with the asymptotic p-value at effective size `na nb / (na + nb)`.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let d = ks_statistic(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ne = na * nb / (na + nb);
    Ok((d, kolmogorov_q(ne.sqrt() * d)))
}

/// Mean over generated series of the best p-value against any holdout
/// series.
pub fn ks_validate(generated: &[Vec<f64>], holdout: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || holdout.is_empty() {
        return Err(CoreError::InsufficientData("KS validation needs generated and holdout series".into()));
    }
    let mut total = 0.0;
    for gs in generated {
        let mut best = 0.0f64;
        for hs in holdout {
            best = best.max(ks_test(gs, hs)?.1);
        }
        total += best;
    }
    Ok(total / generated.len() as f64)
}

/// One bar of changes relative to the previous close.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HlcChange {
    pub close: f64,
    pub high: f64,
    pub low: f64,
}

/// Groups `f` fine changes into one bar. The group's opening level counts
/// toward the high and low, so `high >= max(close, 0)` and
/// `low <= min(close, 0)`.
pub fn downsample_to_hlc(fine: &[f64], f: usize) -> Result<Vec<HlcChange>> {
    if f == 0 || !fine.len().is_multiple_of(f) {
        return Err(CoreError::Invalid(format!(
            "{} fine changes do not split into groups of {f}",
            fine.len()
        )));
    }
    if fine.iter().any(|r| !(1.0 + r > 0.0)) {
        return Err(CoreError::Invalid("fine change at or below -100%".into()));
    }
    Ok(fine
        .chunks_exact(f)
        .map(|grp| {
            let (mut c, mut hi, mut lo) = (1.0f64, 1.0f64, 1.0f64);
            for r in grp {
                c *= 1.0 + r;
                hi = hi.max(c);
                lo = lo.min(c);
            }
            HlcChange {
                close: c - 1.0,
                high: hi - 1.0,
                low: lo - 1.0,
            }
        })
        .collect())
}

/// Synthetic bars per risky asset, `[asset][bar]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisode {
    pub bars: Vec<Vec<HlcChange>>,
}

impl SyntheticEpisode {
    pub fn horizon(&self) -> usize {
        self.bars.first().map_or(0, Vec::len)
    }

    /// Price bars whose last close meets the first open of `real` for each
    /// asset. Opens equal the previous synthetic close.
    pub fn to_market(&self, real: &MarketData) -> Result<MarketData> {
        let m = real.num_risky();
        if self.bars.len() != m {
            return Err(CoreError::Invalid(format!("{} synthetic assets for {m} real ones", self.bars.len())));
        }
        let h = self.horizon();
        if h == 0 || real.is_empty() {
            return Err(CoreError::InsufficientData("empty synthetic horizon or real data".into()));
        }
        let mut levels = vec![vec![[1.0f64; 4]; h]; m];
        for (i, bars) in self.bars.iter().enumerate() {
            let mut prev = 1.0;
            for (t, b) in bars.iter().enumerate() {
                levels[i][t] = [prev, prev * (1.0 + b.high), prev * (1.0 + b.low), prev * (1.0 + b.close)];
                prev *= 1.0 + b.close;
            }
            let scale = real.open[0][i + 1] / prev;
            for l in &mut levels[i] {
                l.iter_mut().for_each(|v| *v *= scale);
            }
        }
        let row = |t: usize, k: usize| -> Vec<f64> {
            std::iter::once(1.0).chain((0..m).map(|i| levels[i][t][k])).collect()
        };
        Ok(MarketData {
            timestamps: vec![real.timestamps[0]; h],
            assets: real.assets.clone(),
            open: (0..h).map(|t| row(t, 0)).collect(),
            high: (0..h).map(|t| row(t, 1)).collect(),
            low: (0..h).map(|t| row(t, 2)).collect(),
            close: (0..h).map(|t| row(t, 3)).collect(),
            index: None,
            index_name: real.index_name.clone(),
        })
    }
}

/// How generated fine changes relate to the training series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineScale {
    /// The training series already has the fine frequency.
    Native,
    /// The training series has the bar frequency; fine changes get mean
    /// `mu / f` and deviation `sd / sqrt(f)` so `f` of them compound to
    /// roughly one bar.
    SplitBar,
}

/// Generates `horizon` bars per asset from `f`-step fine series. Windows of
/// the generator's length are tiled and the tail truncated.
pub fn generate_episode<R: Rng + ?Sized>(
    pairs: &[GanPair],
    horizon: usize,
    f: usize,
    scale: FineScale,
    rng: &mut R,
) -> Result<SyntheticEpisode> {
    let mut bars = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if !pair.trained {
            return Err(CoreError::Invalid(format!("GAN for {} is untrained", pair.asset)));
        }
        let fine_len = horizon * f;
        let k = pair.config.seq_len;
        let count = fine_len.div_ceil(k);
        let z = if count > 0 {
            pair.generate_standardized(count, rng)?
        } else {
            Tensor::zeros(&[0, k])
        };
        let (mu, sd) = match scale {
            FineScale::Native => (pair.mean, pair.sd),
            FineScale::SplitBar => (pair.mean / f as f64, pair.sd / (f as f64).sqrt()),
        };
        let fine: Vec<f64> = z
            .data()
            .iter()
            .take(fine_len)
            .map(|v| (mu + sd * v).max(MIN_GROWTH - 1.0))
            .collect();
        bars.push(downsample_to_hlc(&fine, f)?);
    }
    Ok(SyntheticEpisode { bars })
}

/// Prepends `horizon` synthetic bars to `data`. A zero horizon returns the
/// data unchanged.
pub fn augment_episode<R: Rng + ?Sized>(
    data: &MarketData,
    pairs: &[GanPair],
    horizon: usize,
    f: usize,
    scale: FineScale,
    rng: &mut R,
) -> Result<MarketData> {
    if horizon == 0 {
        return Ok(data.clone());
    }
    if pairs.len() != data.num_risky() {
        return Err(CoreError::Invalid(format!(
            "{} GAN pairs for {} assets",
            pairs.len(),
            data.num_risky()
        )));
    }
    let ep = generate_episode(pairs, horizon, f, scale, rng)?;
    let synth = ep.to_market(data)?;
    let mut out = data.clone();
    out.prepend(synth)?;
    Ok(out)
}
