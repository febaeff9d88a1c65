//! Losses, training masks, the synthetic moving-rectangle dataset and the
//! SGD training loop.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::codec::{encode, mask_video, MaskVolume, PixelMask, PixelVideo, PATCH};
use crate::diffusion::{Conditioning, Guidance, NoiseSchedule};
use crate::math;
use crate::model::{OutDreamer, Trainable};
use crate::nn::{ParamId, Params};
use crate::rng::Rng;
use crate::{invalid, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the latent alignment term.
    pub beta: f64,
    /// The latent term is active only for `t < t_latent`.
    pub t_latent: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.02,
            t_latent: 200,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.beta >= 0.0) || self.t_latent > total_steps {
            return Err(invalid!(
                "need beta >= 0 and t_latent <= {total_steps}, got {} and {}",
                self.beta,
                self.t_latent
            ));
        }
        Ok(())
    }

    pub fn latent_active(&self, t: usize) -> bool {
        self.beta != 0.0 && t < self.t_latent
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn diffusion_loss(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<Var> {
    same_shape(tape, "diffusion loss", eps, eps_hat)?;
    let diff = tape.sub(eps_hat, eps)?;
    let sq = tape.square(diff);
    tape.mean_all(sq)
}

/// Mean over frames of `|μ̂_j − μ_j| + |v̂_j − v_j|`, where `μ_j`, `v_j` are the
/// mean and variance of frame `j` over all rows, columns and channels of an
/// `(h, w, s, d)` latent.
pub fn latent_alignment_loss(tape: &mut Tape, z0_hat: Var, z0: Var) -> Result<Var> {
    same_shape(tape, "latent alignment loss", z0_hat, z0)?;
    if tape.shape(z0).len() != 4 {
        return Err(invalid!("latent alignment loss expects (h, w, s, d), got {:?}", tape.shape(z0)));
    }
    let (mean_hat, var_hat) = tape.reduce_stats(z0_hat, &[0, 1, 3])?;
    let (mean, var) = tape.reduce_stats(z0, &[0, 1, 3])?;
    let dm = tape.sub(mean_hat, mean)?;
    let dv = tape.sub(var_hat, var)?;
    let dm = tape.abs(dm);
    let dv = tape.abs(dv);
    let per_frame = tape.add(dm, dv)?;
    tape.mean_all(per_frame)
}

/// `L_ε + g_t β L_latent` with `g_t = [t < t_latent]`. When the gate is
/// closed the result is `l_eps` itself.
pub fn total_loss(tape: &mut Tape, l_eps: Var, l_latent: Var, t: usize, config: &LossConfig) -> Result<Var> {
    if !config.latent_active(t) {
        return Ok(l_eps);
    }
    let weighted = tape.mul_scalar(l_latent, config.beta);
    tape.add(l_eps, weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDirection {
    /// Columns are generated (left/right of the given region).
    Horizontal,
    /// Rows are generated (above/below the given region).
    Vertical,
}

/// Frame-constant outpainting mask with `round(ratio·extent)` generated
/// lines, `round(split·ratio·extent)` of them on the left (or top).
pub fn outpaint_mask(
    rows: usize,
    cols: usize,
    frames: usize,
    ratio: f64,
    direction: MaskDirection,
    split: f64,
) -> Result<PixelMask> {
    if !(0.0..1.0).contains(&ratio) || !(0.0..=1.0).contains(&split) {
        return Err(invalid!("mask ratio {ratio} or split {split} out of range"));
    }
    let extent = match direction {
        MaskDirection::Horizontal => cols,
        MaskDirection::Vertical => rows,
    };
    let total = (math::round(ratio * extent as f64) as usize).min(extent);
    let lead = (math::round(split * ratio * extent as f64) as usize).min(total);
    let given = lead..extent - (total - lead);
    Ok(PixelMask::from_frame_fn(rows, cols, frames, |r, c| match direction {
        MaskDirection::Horizontal => given.contains(&c),
        MaskDirection::Vertical => given.contains(&r),
    }))
}

/// Random training mask: ratio in `[0.1, 0.8]`, random direction, random
/// side split.
pub fn sample_training_mask(rows: usize, cols: usize, frames: usize, rng: &mut Rng) -> Result<MaskVolume> {
    let ratio = rng.uniform_range(0.1, 0.8);
    let direction = if rng.bool(0.5) {
        MaskDirection::Horizontal
    } else {
        MaskDirection::Vertical
    };
    let split = rng.uniform();
    let pixel = outpaint_mask(rows, cols, frames, ratio, direction, split)?;
    MaskVolume::from_pixel(pixel, PATCH)
}

/// One axis-aligned rectangle moving with constant integer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f64; 3],
    /// Rows and columns moved per frame; positions wrap at the borders.
    pub velocity: (i64, i64),
}

/// Render rectangles over a uniform background; later rectangles are drawn
/// on top of earlier ones.
pub fn render_scene(
    rows: usize,
    cols: usize,
    frames: usize,
    background: [f64; 3],
    rects: &[MovingRect],
) -> Result<PixelVideo> {
    let mut t = Tensor::zeros(&[rows, cols, frames, 3]);
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let mut color = background;
                for rect in rects {
                    let top = (rect.top as i64 + rect.velocity.0 * f as i64).rem_euclid(rows as i64) as usize;
                    let left = (rect.left as i64 + rect.velocity.1 * f as i64).rem_euclid(cols as i64) as usize;
                    let dr = (r + rows - top) % rows;
                    let dc = (c + cols - left) % cols;
                    if dr < rect.height && dc < rect.width {
                        color = rect.color;
                    }
                }
                let base = ((r * cols + c) * frames + f) * 3;
                t.data_mut()[base..base + 3].copy_from_slice(&color);
            }
        }
    }
    PixelVideo::new(t)
}

/// One random scene: background plus 1–3 rectangles, speed up to one pixel
/// per frame on each axis.
pub fn synth_video(rows: usize, cols: usize, frames: usize, rng: &mut Rng) -> Result<PixelVideo> {
    if rows == 0 || cols == 0 || frames == 0 {
        return Err(invalid!("empty synthetic video {rows}x{cols}x{frames}"));
    }
    let color = |rng: &mut Rng| [rng.uniform(), rng.uniform(), rng.uniform()];
    let background = color(rng);
    let count = rng.int_range(1, 3) as usize;
    let velocity = (rng.int_range(-1, 1), rng.int_range(-1, 1));
    let rects: Vec<MovingRect> = (0..count)
        .map(|_| MovingRect {
            top: rng.index(rows),
            left: rng.index(cols),
            height: 1 + rng.index(rows.div_ceil(2)),
            width: 1 + rng.index(cols.div_ceil(2)),
            color: color(rng),
            velocity,
        })
        .collect();
    render_scene(rows, cols, frames, background, &rects)
}

/// `n` synthetic videos from one seed.
pub fn synth_dataset(n: usize, rows: usize, cols: usize, frames: usize, seed: u64) -> Result<Vec<PixelVideo>> {
    let mut rng = Rng::seed(seed);
    (0..n).map(|_| synth_video(rows, cols, frames, &mut rng)).collect()
}

/// Plain gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v ← μv + g`, `θ ← θ − lr·v` for every `(param, grad)` pair.
    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Tensor)]) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (id, g) in grads {
            let slot = params.iter().position(|(pid, _)| pid == *id).expect("id from this set");
            let v = match self.velocity[slot].take() {
                Some(v) => v.zip_map(g, |v, g| self.momentum * v + g)?,
                None => g.clone(),
            };
            let param = params.get_mut(*id);
            param.value = param.value.zip_map(&v, |p, v| p - self.lr * v)?;
            self.velocity[slot] = Some(v);
        }
        Ok(())
    }
}

/// Everything random about one training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub video: PixelVideo,
    pub mask: MaskVolume,
    pub t: usize,
    pub eps: Tensor,
    pub guidance: Guidance,
}

impl TrainSample {
    pub fn draw(video: PixelVideo, schedule: &NoiseSchedule, text_dropout: f64, rng: &mut Rng) -> Result<Self> {
        let mask = sample_training_mask(video.rows(), video.cols(), video.frames(), rng)?;
        let t = 1 + rng.index(schedule.steps());
        let latent_shape = [video.rows() / PATCH, video.cols() / PATCH, video.frames(), 3 * PATCH * PATCH];
        let eps = rng.normal_tensor(&latent_shape);
        let guidance = if rng.bool(text_dropout) {
            Guidance::Unconditional
        } else {
            Guidance::Conditional
        };
        Ok(Self {
            video,
            mask,
            t,
            eps,
            guidance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub t: usize,
    pub l_eps: f64,
    pub l_latent: f64,
    pub l_total: f64,
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Forward, backward and one optimizer update on a single sample. Nothing
/// is updated if any loss or gradient is non-finite.
pub fn train_step(
    model: &mut OutDreamer,
    optimizer: &mut Sgd,
    sample: &TrainSample,
    schedule: &NoiseSchedule,
    loss_config: &LossConfig,
    trainable: Trainable,
) -> Result<StepLosses> {
    let z0 = model.config.latent_norm.normalize(&encode(&sample.video, PATCH)?)?;
    let masked = mask_video(&sample.video, &sample.mask.pixel)?;
    let cond = Conditioning {
        z_masked: encode(&masked, PATCH)?,
        mask: sample.mask.latent.clone(),
    };
    let z_t = schedule.q_sample(z0.tensor(), sample.t, &sample.eps)?;

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |prm| trainable.includes(prm));
    let z_t = tape.constant(z_t);
    let eps = tape.constant(sample.eps.clone());
    let z0 = tape.constant(z0.into_tensor());
    let eps_hat = model.forward(&mut tape, &p, z_t, sample.t, &cond, sample.guidance)?;
    let l_eps = diffusion_loss(&mut tape, eps, eps_hat)?;
    let z0_hat = schedule.predict_z0_var(&mut tape, z_t, sample.t, eps_hat)?;
    let l_latent = latent_alignment_loss(&mut tape, z0_hat, z0)?;
    let l_total = total_loss(&mut tape, l_eps, l_latent, sample.t, loss_config)?;
    for (name, v) in [("eps_hat", eps_hat), ("L_eps", l_eps), ("L_latent", l_latent), ("L_total", l_total)] {
        check_finite(name, tape.value(v))?;
    }
    tape.backward(l_total)?;

    let mut grads = Vec::new();
    for (id, prm) in model.params.iter() {
        if let Some(g) = tape.grad(p[id]) {
            check_finite(&alloc::format!("grad of {}", prm.name), g)?;
            grads.push((id, g.clone()));
        }
    }
    optimizer.step(&mut model.params, &grads)?;
    Ok(StepLosses {
        t: sample.t,
        l_eps: tape.value(l_eps).item(),
        l_latent: tape.value(l_latent).item(),
        l_total: tape.value(l_total).item(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub trainable: Trainable,
    /// Probability of training a step with the null text embedding.
    pub text_dropout: f64,
    /// Number of distinct videos cycled through; `0` draws a fresh video
    /// every step.
    pub dataset_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            frames: 8,
            steps: 500,
            lr: 1e-3,
            momentum: 0.9,
            loss: LossConfig::default(),
            seed: 0,
            trainable: Trainable::All,
            text_dropout: 0.1,
            dataset_size: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.loss.validate(schedule.steps())?;
        if self.rows % PATCH != 0 || self.cols % PATCH != 0 || self.rows == 0 || self.cols == 0 || self.frames == 0 {
            return Err(invalid!(
                "video {}x{}x{} must be non-empty with sides divisible by {PATCH}",
                self.rows,
                self.cols,
                self.frames
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(invalid!("lr, momentum or text dropout out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub losses: StepLosses,
}

impl StepLog {
    /// `step, t, L_eps, L_latent, L_total`
    pub fn line(&self) -> String {
        let l = &self.losses;
        alloc::format!("{}, {}, {:.9e}, {:.9e}, {:.9e}", self.step, l.t, l.l_eps, l.l_latent, l.l_total)
    }
}

/// Runs [`train_step`] over synthetic data.
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub optimizer: Sgd,
    rng: Rng,
    pool: Vec<PixelVideo>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate(&schedule)?;
        let mut rng = Rng::seed(config.seed);
        let mut data_rng = rng.fork();
        let pool = (0..config.dataset_size)
            .map(|_| synth_video(config.rows, config.cols, config.frames, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            optimizer: Sgd::new(config.lr, config.momentum),
            config,
            schedule,
            rng,
            pool,
            step: 0,
        })
    }

    pub fn next_sample(&mut self) -> Result<TrainSample> {
        let c = &self.config;
        let video = if self.pool.is_empty() {
            synth_video(c.rows, c.cols, c.frames, &mut self.rng)?
        } else {
            self.pool[self.step % self.pool.len()].clone()
        };
        TrainSample::draw(video, &self.schedule, c.text_dropout, &mut self.rng)
    }

    /// Train for `config.steps` steps, reporting each step to `on_step`.
    pub fn run(&mut self, model: &mut OutDreamer, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let sample = self.next_sample()?;
            let losses = train_step(
                model,
                &mut self.optimizer,
                &sample,
                &self.schedule,
                &self.config.loss,
                self.config.trainable,
            )?;
            let entry = StepLog {
                step: self.step,
                losses,
            };
            on_step(&entry);
            log.push(entry);
            self.step += 1;
        }
        Ok(log)
    }
}
