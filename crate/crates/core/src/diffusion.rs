//! Deterministic denoising-diffusion harness with hookable attention sites.
//!
//! The schedule is the classic linear-beta ramp. Inversion is edit-friendly:
//! every forward latent `z_t` is drawn independently from the marginal
//! `sqrt(abar_t) z_0 + sqrt(1-abar_t) eps`, and for each step we store the
//! additive residual that makes the reverse update land exactly on the
//! recorded latent:
//!
//! ```text
//! residual_t = z_{t-1} - posterior_mean(z_t, t)
//! ```
//!
//! Replaying the sampler with the stored residuals therefore reconstructs
//! `z_0` bit-exactly for any deterministic denoiser, while registered
//! attention hooks can steer the prediction away from the recorded
//! trajectory in a controlled way.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{self_attention, AttentionProjections, SourceTag};
use crate::tensor::{resize_feature_nearest, FeatureMap, Matrix};
use crate::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_SKIP: usize = 30;

/// Linear-beta noise schedule over `steps` timesteps, of which the final
/// `skip` reverse steps are bypassed by the transfer pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    skip: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Builds the schedule. Betas ramp linearly from `1e-4` to `0.02` inclusive;
/// cumulative alpha products are strictly decreasing in `t`.
pub fn make_schedule(steps: usize, skip: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidInput("schedule needs at least one step".into()));
    }
    if skip >= steps {
        return Err(Error::InvalidInput(format!(
            "skip {skip} must be smaller than steps {steps}"
        )));
    }
    let mut betas = Vec::with_capacity(steps);
    for i in 0..steps {
        let beta = if steps == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
        };
        betas.push(beta);
    }
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for &beta in &betas {
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { steps, skip, betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn skip(&self) -> usize {
        self.skip
    }

    /// Timestep the output stream starts from: `steps - skip`.
    pub fn first_executed_step(&self) -> usize {
        self.steps - self.skip
    }

    /// `beta_t`, `t` in `1..=steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1` is the identity
    /// boundary at which `add_noise` returns `z_0` unchanged.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Forward marginal: `sqrt(abar_t) z_0 + sqrt(1-abar_t) noise`.
pub fn add_noise(
    z0: &FeatureMap,
    t: usize,
    noise: &FeatureMap,
    sched: &DiffusionSchedule,
) -> Result<FeatureMap> {
    if t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} out of range for a {}-step schedule",
            sched.steps()
        )));
    }
    if z0.shape() != noise.shape() {
        return Err(Error::InvalidInput(format!(
            "noise shape {:?} does not match z0 shape {:?}",
            noise.shape(),
            z0.shape()
        )));
    }
    let abar = sched.alpha_bar(t);
    let a = abar.sqrt() as f32;
    let b = (1.0 - abar).sqrt() as f32;
    let data = z0
        .data()
        .iter()
        .zip(noise.data().iter())
        .map(|(&z, &n)| a * z + b * n)
        .collect();
    FeatureMap::new(z0.channels(), z0.height(), z0.width(), data)
}

/// One attention location inside a denoiser, identified by name and fixed
/// spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSite {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

/// Replacement for a site's attention computation. Receives the site's own
/// projections for the current input plus the timestep, and returns the
/// attention output (`positions x head_dim`).
pub type AttentionHook = Box<dyn FnMut(&AttentionProjections, usize) -> Result<Matrix>>;

/// A noise predictor with named attention sites whose attention computation
/// can be replaced by hooks. Predictions must be deterministic in
/// `(z, t, weights, hooks)`.
pub trait Denoiser {
    fn predict(&mut self, z: &FeatureMap, t: usize) -> Result<FeatureMap>;

    fn attention_sites(&self) -> &[AttentionSite];

    /// Registers `hook` at a site; unknown site ids fail here, at
    /// registration, rather than being silently ignored.
    fn register_hook(&mut self, site_id: &str, hook: AttentionHook) -> Result<()>;

    fn clear_hooks(&mut self);

    /// Bookkeeping label stamped onto harvested projections.
    fn set_source_tag(&mut self, _tag: SourceTag) {}
}

fn posterior_mean(
    z_t: &FeatureMap,
    t: usize,
    d: &mut dyn Denoiser,
    sched: &DiffusionSchedule,
) -> Result<FeatureMap> {
    let eps = d.predict(z_t, t)?;
    if eps.shape() != z_t.shape() {
        return Err(Error::InvalidState(format!(
            "denoiser returned shape {:?} for input {:?}",
            eps.shape(),
            z_t.shape()
        )));
    }
    let beta = sched.beta(t);
    let coef = (beta / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / sched.alpha(t).sqrt()) as f32;
    let data = z_t
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&z, &e)| inv_sqrt_alpha * (z - coef * e))
        .collect();
    FeatureMap::new(z_t.shape().0, z_t.shape().1, z_t.shape().2, data)
}

/// One reverse update: posterior mean from the denoiser's epsilon prediction
/// plus the stored residual for this step. Hooks registered on the denoiser
/// take effect inside the prediction.
pub fn sample_step(
    z_t: &FeatureMap,
    t: usize,
    d: &mut dyn Denoiser,
    residual: Option<&FeatureMap>,
    sched: &DiffusionSchedule,
) -> Result<FeatureMap> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} out of range for a {}-step schedule",
            sched.steps()
        )));
    }
    let residual = residual.ok_or_else(|| {
        Error::InvalidState(format!("sample_step at t={t} requires a stored residual"))
    })?;
    if residual.shape() != z_t.shape() {
        return Err(Error::InvalidInput(format!(
            "residual shape {:?} does not match latent shape {:?}",
            residual.shape(),
            z_t.shape()
        )));
    }
    let mean = posterior_mean(z_t, t, d, sched)?;
    let data = mean
        .data()
        .iter()
        .zip(residual.data().iter())
        .map(|(&m, &r)| m + r)
        .collect();
    FeatureMap::new(z_t.shape().0, z_t.shape().1, z_t.shape().2, data)
}

/// Recorded forward latents plus the per-step residuals that make replay
/// exact, and a cache of attention projections harvested during replay.
#[derive(Debug)]
pub struct InversionTrajectory {
    latents: Vec<FeatureMap>,
    residuals: Vec<FeatureMap>,
    projections: HashMap<(String, usize), AttentionProjections>,
}

impl InversionTrajectory {
    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    /// Latent at timestep `t`, `t` in `0..=steps`.
    pub fn latent(&self, t: usize) -> Option<&FeatureMap> {
        self.latents.get(t)
    }

    /// Residual consumed by the reverse update at step `t`, `t` in `1..=steps`.
    pub fn residual_for_step(&self, t: usize) -> Option<&FeatureMap> {
        if t == 0 {
            None
        } else {
            self.residuals.get(t - 1)
        }
    }

    pub fn projection(&self, site_id: &str, t: usize) -> Option<&AttentionProjections> {
        self.projections.get(&(site_id.to_string(), t))
    }

    pub fn insert_projection(&mut self, site_id: String, t: usize, proj: AttentionProjections) {
        self.projections.insert((site_id, t), proj);
    }

    pub fn projection_count(&self) -> usize {
        self.projections.len()
    }
}

/// Draws a standard-normal map with the given shape from `rng`.
fn standard_normal_map(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let data: Vec<f32> =
        (0..channels * height * width).map(|_| StandardNormal.sample(rng)).collect();
    FeatureMap::new(channels, height, width, data).expect("normal draws are finite")
}

/// Edit-friendly inversion of `z0`: records independent forward latents for
/// every timestep and the residuals that make each reverse step land on the
/// recorded latent. The denoiser is used as-is; callers are expected to run
/// it without hooks here.
pub fn invert(
    z0: &FeatureMap,
    d: &mut dyn Denoiser,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<InversionTrajectory> {
    if z0.is_empty() {
        return Err(Error::InvalidInput("cannot invert an empty feature map".into()));
    }
    let (c, h, w) = z0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Vec::with_capacity(sched.steps() + 1);
    latents.push(z0.clone());
    for t in 1..=sched.steps() {
        let noise = standard_normal_map(c, h, w, &mut rng);
        latents.push(add_noise(z0, t, &noise, sched)?);
    }
    let mut residuals = Vec::with_capacity(sched.steps());
    for t in 1..=sched.steps() {
        let mean = posterior_mean(&latents[t], t, d, sched)?;
        let data = latents[t - 1]
            .data()
            .iter()
            .zip(mean.data().iter())
            .map(|(&z, &m)| z - m)
            .collect();
        residuals.push(FeatureMap::new(c, h, w, data)?);
    }
    Ok(InversionTrajectory { latents, residuals, projections: HashMap::new() })
}

/// Replays the reverse process from timestep `t_start` down to 0 using the
/// stored residuals. With no hooks registered this reconstructs
/// `latent(0)` exactly.
pub fn replay_from(
    traj: &InversionTrajectory,
    d: &mut dyn Denoiser,
    sched: &DiffusionSchedule,
    t_start: usize,
) -> Result<FeatureMap> {
    if t_start > traj.steps() || sched.steps() != traj.steps() {
        return Err(Error::InvalidInput(format!(
            "replay start {t_start} invalid for a {}-step trajectory under a {}-step schedule",
            traj.steps(),
            sched.steps()
        )));
    }
    let mut z = traj
        .latent(t_start)
        .ok_or_else(|| Error::InvalidState("trajectory is missing its start latent".into()))?
        .clone();
    for t in (1..=t_start).rev() {
        z = sample_step(&z, t, d, traj.residual_for_step(t), sched)?;
    }
    Ok(z)
}

/// Full replay from the terminal latent.
pub fn replay(
    traj: &InversionTrajectory,
    d: &mut dyn Denoiser,
    sched: &DiffusionSchedule,
) -> Result<FeatureMap> {
    replay_from(traj, d, sched, traj.steps())
}

/// Replays steps `1..=t_hi` of a recorded trajectory with recording hooks on
/// the named sites, storing every harvested projection into the trajectory's
/// cache. Hook neutrality keeps the replayed stream on the recorded latents.
pub fn harvest_projections(
    traj: &mut InversionTrajectory,
    d: &mut dyn Denoiser,
    sites: &[String],
    t_hi: usize,
) -> Result<()> {
    if t_hi > traj.steps() {
        return Err(Error::InvalidInput(format!(
            "harvest endpoint {t_hi} exceeds trajectory steps {}",
            traj.steps()
        )));
    }
    type Harvested = Vec<((String, usize), AttentionProjections)>;
    let store: Rc<RefCell<Harvested>> = Rc::new(RefCell::new(Vec::new()));
    for site in sites {
        let slot = Rc::clone(&store);
        let sid = site.clone();
        let registered = d.register_hook(
            site,
            Box::new(move |proj, t| {
                slot.borrow_mut().push(((sid.clone(), t), proj.clone()));
                self_attention(proj)
            }),
        );
        if let Err(e) = registered {
            d.clear_hooks();
            return Err(e);
        }
    }
    let mut run = Ok(());
    for t in (1..=t_hi).rev() {
        let latent = match traj.latent(t) {
            Some(l) => l.clone(),
            None => {
                run = Err(Error::InvalidState(format!("trajectory missing latent {t}")));
                break;
            }
        };
        if let Err(e) = d.predict(&latent, t) {
            run = Err(e);
            break;
        }
    }
    d.clear_hooks();
    run?;
    let collected = Rc::try_unwrap(store)
        .map_err(|_| Error::InvalidState("projection store still shared after hook teardown".into()))?
        .into_inner();
    for (key, proj) in collected {
        traj.projections.insert(key, proj);
    }
    Ok(())
}

const HIDDEN: usize = 8;
const HEAD_DIM: usize = 8;

#[derive(Debug, Clone)]
struct SiteWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

#[derive(Debug, Clone)]
struct IoWeights {
    conv_in: Vec<f32>,
    conv_out: Vec<f32>,
}

/// Minimal attention denoiser: two 3x3 convolutional mixing blocks with one
/// self-attention site per configured resolution between them. Weights are
/// drawn from a seeded generator and never trained; outputs are tanh-bounded
/// so predictions stay finite at any scale.
pub struct ToyAttentionDenoiser {
    seed: u64,
    sites: Vec<AttentionSite>,
    site_weights: Vec<SiteWeights>,
    io_weights: HashMap<usize, IoWeights>,
    phases: Vec<f32>,
    hooks: HashMap<String, AttentionHook>,
    tag: SourceTag,
}

fn sample_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            (x * std) as f32
        })
        .collect();
    Matrix::new(rows, cols, data).expect("normal draws are finite")
}

impl ToyAttentionDenoiser {
    /// `resolutions` lists the attention sites as `(height, width)` pairs;
    /// each becomes a site named `"{h}x{w}"`.
    pub fn new(seed: u64, resolutions: &[(usize, usize)]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f32> = (0..HIDDEN)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        let mut sites = Vec::with_capacity(resolutions.len());
        let mut site_weights = Vec::with_capacity(resolutions.len());
        for &(h, w) in resolutions {
            if h == 0 || w == 0 {
                return Err(Error::InvalidInput(format!(
                    "attention site {h}x{w} has a zero dimension"
                )));
            }
            let id = format!("{h}x{w}");
            if sites.iter().any(|s: &AttentionSite| s.id == id) {
                return Err(Error::InvalidInput(format!("duplicate attention site {id}")));
            }
            let proj_std = 1.0 / (HIDDEN as f64).sqrt();
            site_weights.push(SiteWeights {
                wq: sample_matrix(HIDDEN, HEAD_DIM, proj_std, &mut rng),
                wk: sample_matrix(HIDDEN, HEAD_DIM, proj_std, &mut rng),
                wv: sample_matrix(HIDDEN, HEAD_DIM, proj_std, &mut rng),
                wo: sample_matrix(HEAD_DIM, HIDDEN, 0.4 / (HEAD_DIM as f64).sqrt(), &mut rng),
            });
            sites.push(AttentionSite { id, height: h, width: w });
        }
        Ok(Self {
            seed,
            sites,
            site_weights,
            io_weights: HashMap::new(),
            phases,
            hooks: HashMap::new(),
            tag: SourceTag::Output,
        })
    }

    /// The factory signature carries no channel count, so per-channel conv
    /// weights are derived lazily and deterministically from (seed, channels).
    fn ensure_io_weights(&mut self, channels: usize) -> IoWeights {
        if let Some(w) = self.io_weights.get(&channels) {
            return w.clone();
        }
        let sub_seed = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(channels as u64)
            .rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let std_in = 0.5 / ((channels * 9) as f64).sqrt();
        let std_out = 0.5 / ((HIDDEN * 9) as f64).sqrt();
        let conv_in: Vec<f32> = (0..HIDDEN * channels * 9)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                (x * std_in) as f32
            })
            .collect();
        let conv_out: Vec<f32> = (0..channels * HIDDEN * 9)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                (x * std_out) as f32
            })
            .collect();
        let w = IoWeights { conv_in, conv_out };
        self.io_weights.insert(channels, w.clone());
        w
    }
}

/// 3x3 zero-padded convolution; weights laid out `[oc][ic][ky][kx]`.
fn conv3x3(input: &FeatureMap, weights: &[f32], out_channels: usize) -> Result<FeatureMap> {
    let (in_c, h, w) = input.shape();
    debug_assert_eq!(weights.len(), out_channels * in_c * 9);
    let mut out = FeatureMap::zeros(out_channels, h, w);
    for oc in 0..out_channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for ic in 0..in_c {
                    let ch = input.channel(ic);
                    let base = (oc * in_c + ic) * 9;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let wgt = weights[base + ky * 3 + kx];
                            acc += wgt as f64 * ch[sy as usize * w + sx as usize] as f64;
                        }
                    }
                }
                out.set(oc, y, x, acc as f32);
            }
        }
    }
    Ok(out)
}

/// One row per spatial position (row-major), one column per channel.
fn tokens_from(f: &FeatureMap) -> Matrix {
    let (c, h, w) = f.shape();
    let n = h * w;
    let mut data = vec![0.0f32; n * c];
    for ch in 0..c {
        let plane = f.channel(ch);
        for (i, &v) in plane.iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    Matrix::new(n, c, data).expect("token layout preserves finiteness")
}

fn feature_from_tokens(m: &Matrix, h: usize, w: usize) -> Result<FeatureMap> {
    let c = m.cols();
    if m.rows() != h * w {
        return Err(Error::InvalidState(format!(
            "token matrix has {} rows for a {}x{} grid",
            m.rows(),
            h,
            w
        )));
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..m.rows() {
            out.channel_mut(ch)[i] = m.get(i, ch);
        }
    }
    Ok(out)
}

impl Denoiser for ToyAttentionDenoiser {
    fn predict(&mut self, z: &FeatureMap, t: usize) -> Result<FeatureMap> {
        if z.is_empty() {
            return Err(Error::InvalidInput("denoiser input is empty".into()));
        }
        let (c, h, w) = z.shape();
        let io = self.ensure_io_weights(c);
        let mut hidden = conv3x3(z, &io.conv_in, HIDDEN)?;
        for ch in 0..HIDDEN {
            let bias = 0.1 * (self.phases[ch] * (t as f32 + 1.0)).sin();
            for v in hidden.channel_mut(ch) {
                *v = (*v + bias).tanh();
            }
        }

        let tag = self.tag;
        let hooks = &mut self.hooks;
        for (site, sw) in self.sites.iter().zip(self.site_weights.iter()) {
            let local = resize_feature_nearest(&hidden, site.height, site.width)?;
            let tokens = tokens_from(&local);
            let q = tokens.matmul(&sw.wq)?;
            let k = tokens.matmul(&sw.wk)?;
            let v = tokens.matmul(&sw.wv)?;
            let proj = AttentionProjections::new(q, k, v, site.id.clone(), tag)?;
            let att = match hooks.get_mut(&site.id) {
                Some(hook) => hook(&proj, t)?,
                None => self_attention(&proj)?,
            };
            if att.rows() != tokens.rows() || att.cols() != HEAD_DIM {
                return Err(Error::InvalidState(format!(
                    "attention at site {} returned {}x{}, expected {}x{}",
                    site.id,
                    att.rows(),
                    att.cols(),
                    tokens.rows(),
                    HEAD_DIM
                )));
            }
            let mixed = att.matmul(&sw.wo)?;
            let local_map = feature_from_tokens(&mixed, site.height, site.width)?;
            let up = resize_feature_nearest(&local_map, h, w)?;
            for ch in 0..HIDDEN {
                let delta = up.channel(ch).to_vec();
                for (v, d) in hidden.channel_mut(ch).iter_mut().zip(delta) {
                    *v = (*v + d).tanh();
                }
            }
        }

        let mut out = conv3x3(&hidden, &io.conv_out, c)?;
        for v in out.data_mut() {
            *v = v.tanh();
        }
        FeatureMap::new(c, h, w, out.into_data())
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    fn register_hook(&mut self, site_id: &str, hook: AttentionHook) -> Result<()> {
        if !self.sites.iter().any(|s| s.id == site_id) {
            return Err(Error::Config(format!(
                "denoiser has no attention site named {site_id}"
            )));
        }
        self.hooks.insert(site_id.to_string(), hook);
        Ok(())
    }

    fn clear_hooks(&mut self) {
        self.hooks.clear();
    }

    fn set_source_tag(&mut self, tag: SourceTag) {
        self.tag = tag;
    }
}

/// Zero-predicting denoiser: the reverse update degenerates to the explicit
/// affine map `z_{t-1} = z_t / sqrt(alpha_t) + residual_t`, which makes
/// trajectories hand-checkable. It has no attention sites, so hook
/// registration is an unsupported operation.
#[derive(Debug, Default, Clone, Copy)]
pub struct AnalyticDenoiser;

impl AnalyticDenoiser {
    pub fn new() -> Self {
        Self
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict(&mut self, z: &FeatureMap, _t: usize) -> Result<FeatureMap> {
        let (c, h, w) = z.shape();
        Ok(FeatureMap::zeros(c, h, w))
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &[]
    }

    fn register_hook(&mut self, site_id: &str, _hook: AttentionHook) -> Result<()> {
        Err(Error::Unsupported(format!(
            "analytic denoiser has no attention sites (requested {site_id})"
        )))
    }

    fn clear_hooks(&mut self) {}
}
