//! Denoising diffusion decoder from speech codes (or, after fine-tuning,
//! autoregressive hidden states) to normalized MEL spectrograms. The
//! denoiser alternates modulated conv resblocks with full attention at a
//! single temporal resolution; timestep and pooled speaker signals modulate
//! the group norms, the per-frame conditioning sequence is concatenated at
//! the input, and both conditioning signals are jointly dropped during
//! training to enable conditioning-free guidance at sampling time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ar::{self, ArConfig};
use crate::audio::mel::{normalized_from_values, MelConfig, NormalizedMel};
use crate::error::{Error, Result};
use crate::nn::{self, ParamView};

/// Group-norm epsilon; larger than the layer-norm one so near-constant
/// groups cannot blow up the inverse std as training memorizes.
const GN_EPS: f64 = 1e-4;
use crate::numerics::{AdamW, Ema, Graph, NodeId, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_mels: usize,
    /// Channel width of the per-frame conditioning sequence.
    pub cond_width: usize,
    pub code_vocab: usize,
    pub cond_layers: usize,
    pub groups: usize,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability that both conditioning signals are dropped in a step.
    pub cond_dropout: f64,
    pub vlb_weight: f64,
    pub learned_variance: bool,
    /// Feed-forward blocks inside the attention layers (config flag keeps
    /// the FF-less variant available for comparison).
    pub attn_ff: bool,
    /// Diagnostic switch: group-norm modulation on/off.
    pub modulation: bool,
    pub guidance_scale: f64,
    pub ddim_steps: usize,
    pub eta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
}

impl DiffusionConfig {
    pub fn desk() -> Self {
        DiffusionConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            n_mels: 80,
            cond_width: 64,
            code_vocab: 64,
            cond_layers: 2,
            groups: 8,
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cond_dropout: 0.15,
            vlb_weight: 0.001,
            learned_variance: true,
            attn_ff: true,
            modulation: true,
            guidance_scale: 2.0,
            ddim_steps: 64,
            eta: 0.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.001,
            warmup_steps: 30,
            ema_decay: 0.98,
        }
    }

    pub fn paper() -> Self {
        DiffusionConfig {
            depth: 10,
            dim: 1024,
            heads: 16,
            code_vocab: 8192,
            lr: 1e-5,
            warmup_steps: 1000,
            ema_decay: 0.999,
            ..Self::desk()
        }
    }

    pub fn toy() -> Self {
        DiffusionConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            n_mels: 4,
            cond_width: 6,
            code_vocab: 6,
            cond_layers: 1,
            groups: 2,
            ..Self::desk()
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.learned_variance {
            2 * self.n_mels
        } else {
            self.n_mels
        }
    }
}

/// Precomputed linear noise schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Posterior variance of q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

/// Forward process draw: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x0.len()],
            got: vec![noise.len()],
            context: "q_sample noise".into(),
        });
    }
    if t >= sched.len() {
        return Err(Error::contract(format!("t {t} out of schedule {}", sched.len())));
    }
    let ab = sched.alpha_bar[t];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| sa * x + sb * n).collect())
}

const P: &str = "diff";
/// Global gradient-norm clip applied before each optimizer step.
const GRAD_CLIP_NORM: f64 = 1.0;

pub fn init_params(cfg: &DiffusionConfig, rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    let d = cfg.dim;
    // timestep embedding MLP
    nn::init_linear(&mut params, &format!("{P}.t1"), d, d, rng);
    nn::init_linear(&mut params, &format!("{P}.t2"), d, d, rng);
    // speaker conditioning encoder (own encoder, same shape as the prior's)
    nn::init_linear(&mut params, &format!("{P}.cond.in"), cfg.n_mels, d, rng);
    nn::init_transformer_stack(&mut params, &format!("{P}.cond"), cfg.cond_layers, d, rng);
    // learned null embeddings for conditioning-free guidance
    params.add_normal(&format!("{P}.null_speech"), vec![1, d], 0.02, rng);
    params.add_normal(&format!("{P}.null_seq"), vec![1, cfg.cond_width], 0.02, rng);
    // code embedding for the pretraining conditioning pathway
    params.add_normal(&format!("{P}.code_emb"), vec![cfg.code_vocab, cfg.cond_width], 0.02, rng);
    // input projection over concatenated channels
    init_conv(&mut params, &format!("{P}.in"), cfg.n_mels + cfg.cond_width, d, 1, rng);
    for i in 0..cfg.depth {
        if i % 2 == 0 {
            init_resblock(&mut params, &format!("{P}.blk{i}"), d, rng);
        } else {
            nn::init_transformer_block(&mut params, &format!("{P}.blk{i}"), d, cfg.attn_ff, rng);
        }
    }
    init_conv(&mut params, &format!("{P}.out"), d, cfg.out_channels(), 1, rng);
    params
}

/// Added when fine-tuning on AR hidden states: fresh projection from the AR
/// width onto the conditioning width.
pub fn add_latent_proj(params: &mut Params, cfg: &DiffusionConfig, ar_dim: usize, rng: &mut impl Rng) {
    nn::init_linear(params, &format!("{P}.latent_proj"), ar_dim, cfg.cond_width, rng);
}

pub fn has_latent_proj(params: &Params) -> bool {
    params.try_id(&format!("{P}.latent_proj.w")).is_some()
}

fn conv_std(cin: usize, k: usize) -> f64 {
    (2.0 / (cin * k) as f64).sqrt()
}

fn init_conv(params: &mut Params, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    params.add_normal(&format!("{name}.w"), vec![cout, cin, k], conv_std(cin, k), rng);
    params.add_zeros(&format!("{name}.b"), vec![cout]);
}

fn init_resblock(params: &mut Params, name: &str, c: usize, rng: &mut impl Rng) {
    init_conv(params, &format!("{name}.c1"), c, c, 3, rng);
    init_conv(params, &format!("{name}.c2"), c, c, 3, rng);
    nn::init_linear(params, &format!("{name}.mod1"), c, 2 * c, rng);
    nn::init_linear(params, &format!("{name}.mod2"), c, 2 * c, rng);
}

fn conv(g: &mut Graph, pv: &ParamView, x: NodeId, name: &str, k_pad: usize) -> NodeId {
    let w = pv.node(g, &format!("{name}.w"));
    let b = pv.node(g, &format!("{name}.b"));
    g.conv1d(x, w, b, 1, k_pad)
}

/// Group norm whose scale and shift come from the conditioning vector:
/// gn(x) * (1 + s) + b with (s, b) = linear(silu(m)).
fn modulated_group_norm(
    g: &mut Graph,
    pv: &ParamView,
    x: NodeId,
    m: Option<NodeId>,
    mod_name: &str,
    groups: usize,
) -> NodeId {
    let h = g.group_norm(x, groups, GN_EPS);
    let m = match m {
        Some(m) => m,
        None => return h,
    };
    let c = g.value(x).shape[0];
    let act = g.silu(m);
    let ss = nn::linear(g, pv, act, mod_name); // [1, 2c]
    let scale = g.slice_cols(ss, 0, c);
    let shift = g.slice_cols(ss, c, c);
    let scale1 = g.add_const(scale, 1.0);
    let hs = g.mul_channel(h, scale1);
    g.add_channel(hs, shift)
}

fn resblock(
    g: &mut Graph,
    pv: &ParamView,
    x: NodeId,
    m: Option<NodeId>,
    name: &str,
    groups: usize,
) -> NodeId {
    let h = modulated_group_norm(g, pv, x, m, &format!("{name}.mod1"), groups);
    let h = g.silu(h);
    let h = conv(g, pv, h, &format!("{name}.c1"), 1);
    let h = modulated_group_norm(g, pv, h, m, &format!("{name}.mod2"), groups);
    let h = g.silu(h);
    let h = conv(g, pv, h, &format!("{name}.c2"), 1);
    g.add(x, h)
}

/// All conditioning for one denoiser call.
pub struct DenoiserInput {
    /// Noised spectrogram values, [n_mels, frames].
    pub x_t: Tensor,
    pub t: usize,
    /// alpha_bar at `t`; anchors the noise prediction (see
    /// [`denoiser_forward`]).
    pub alpha_bar_t: f64,
    /// Pooled speaker vector node (from [`cond_encode`]); ignored when
    /// `null_cond` is set.
    pub cond_speech: Option<NodeId>,
    /// Per-frame conditioning [frames, cond_width]; ignored when `null_cond`.
    pub cond_seq: Option<NodeId>,
    /// Replace both conditioning signals with the learned null embeddings.
    pub null_cond: bool,
}

/// Speaker encoder over reference clips (the diffusion model's own).
pub fn cond_encode(
    g: &mut Graph,
    pv: &ParamView,
    clips: &[&NormalizedMel],
    cfg: &DiffusionConfig,
) -> Result<NodeId> {
    if clips.is_empty() {
        return Err(Error::contract("cond_encode requires at least one clip"));
    }
    let mut vecs = Vec::with_capacity(clips.len());
    for clip in clips {
        let x = g.constant(Tensor::matrix(clip.n_mels, clip.frames, clip.data.clone()));
        let xt = g.transpose(x);
        let h = nn::linear(g, pv, xt, &format!("{P}.cond.in"));
        let pos = g.constant(nn::sinusoidal_table(clip.frames, cfg.dim));
        let h = g.add(h, pos);
        let h = nn::transformer_stack(g, pv, h, &format!("{P}.cond"), cfg.cond_layers, cfg.heads, false);
        vecs.push(g.mean_rows(h));
    }
    if vecs.len() == 1 {
        return Ok(vecs[0]);
    }
    let stacked = g.concat_rows(&vecs);
    Ok(g.mean_rows(stacked))
}

/// Embed speech codes and repeat 4x to the frame rate: [4L, cond_width].
pub fn codes_to_cond_seq(g: &mut Graph, pv: &ParamView, codes: &[u16], cfg: &DiffusionConfig) -> Result<NodeId> {
    for &c in codes {
        if c as usize >= cfg.code_vocab {
            return Err(Error::contract(format!("code {c} out of vocab {}", cfg.code_vocab)));
        }
    }
    let table = pv.node(g, &format!("{P}.code_emb"));
    let ids: Vec<usize> = codes.iter().map(|&c| c as usize).collect();
    let e = g.embed(table, &ids); // [L, cw]
    let et = g.transpose(e); // [cw, L]
    let up = g.upsample(et, 4); // [cw, 4L]
    Ok(g.transpose(up))
}

/// Project AR hidden states onto the conditioning width and repeat 4x:
/// [4L, cond_width]. `latents` is [L, ar_dim].
pub fn latents_to_cond_seq(g: &mut Graph, pv: &ParamView, latents: NodeId, cfg: &DiffusionConfig) -> NodeId {
    let proj = nn::linear(g, pv, latents, &format!("{P}.latent_proj"));
    let pt = g.transpose(proj);
    let up = g.upsample(pt, 4);
    let _ = cfg;
    g.transpose(up)
}

/// Predicted noise [n_mels, frames] and, with learned variance, the raw
/// variance-interpolation channel of the same shape.
pub struct DenoiserOutput {
    pub eps: NodeId,
    pub var: Option<NodeId>,
}

pub fn denoiser_forward(
    g: &mut Graph,
    pv: &ParamView,
    input: &DenoiserInput,
    cfg: &DiffusionConfig,
) -> Result<DenoiserOutput> {
    let frames = input.x_t.shape[1];
    if input.x_t.shape[0] != cfg.n_mels {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.n_mels, frames],
            got: input.x_t.shape.clone(),
            context: "denoiser x_t".into(),
        });
    }
    if input.t >= cfg.train_timesteps {
        return Err(Error::contract(format!(
            "t {} outside schedule {}",
            input.t, cfg.train_timesteps
        )));
    }
    // conditioning signals, possibly replaced by the learned nulls
    let (spk, seq) = if input.null_cond {
        let null_s = pv.node(g, &format!("{P}.null_speech"));
        let null_q = pv.node(g, &format!("{P}.null_seq"));
        let rows: Vec<NodeId> = vec![null_q; frames];
        (null_s, g.concat_rows(&rows))
    } else {
        let spk = input
            .cond_speech
            .ok_or_else(|| Error::contract("cond_speech required unless null_cond"))?;
        let seq = input
            .cond_seq
            .ok_or_else(|| Error::contract("cond_seq required unless null_cond"))?;
        let seq_len = g.value(seq).rows();
        if seq_len != frames {
            return Err(Error::ShapeMismatch {
                expected: vec![frames, cfg.cond_width],
                got: g.value(seq).shape.clone(),
                context: "cond_seq frames (4x upsampling alignment)".into(),
            });
        }
        (spk, seq)
    };

    // timestep + speaker modulation vector
    let temb = g.constant(nn::sinusoidal_embedding(input.t as f64, cfg.dim));
    let t1 = nn::linear(g, pv, temb, &format!("{P}.t1"));
    let t1 = g.silu(t1);
    let t2 = nn::linear(g, pv, t1, &format!("{P}.t2"));
    let m = g.add(t2, spk);
    let m = if cfg.modulation { Some(m) } else { None };

    // concatenate per-frame conditioning as channels, project in
    let x = g.constant(input.x_t.clone());
    let seq_t = g.transpose(seq); // [cw, frames]
    let h = g.concat_rows(&[x, seq_t]); // [(n_mels + cw), frames]
    let mut h = conv(g, pv, h, &format!("{P}.in"), 0);

    for i in 0..cfg.depth {
        if i % 2 == 0 {
            h = resblock(g, pv, h, m, &format!("{P}.blk{i}"), cfg.groups);
        } else {
            let ht = g.transpose(h);
            let ht = nn::transformer_block(g, pv, ht, &format!("{P}.blk{i}"), cfg.heads, false, cfg.attn_ff);
            h = g.transpose(ht);
        }
    }
    let out = conv(g, pv, h, &format!("{P}.out"), 0);
    let (raw, var) = if cfg.learned_variance {
        (
            g.slice_rows(out, 0, cfg.n_mels),
            Some(g.slice_rows(out, cfg.n_mels, cfg.n_mels)),
        )
    } else {
        (out, None)
    };
    // The head estimates the clean signal; the noise prediction is derived
    // as eps = (x_t - sqrt(abar) x0_est) / sqrt(1 - abar). This keeps the
    // network's own output bounded at every timestep while the module
    // contract stays in terms of predicted noise.
    let ab = input.alpha_bar_t;
    let x0_est = g.tanh(raw);
    let xt_node = g.constant(input.x_t.clone());
    let scaled_x0 = g.scale(x0_est, ab.sqrt());
    let centered = g.sub(xt_node, scaled_x0);
    let eps = g.scale(centered, 1.0 / (1.0 - ab).sqrt().max(1e-12));
    Ok(DenoiserOutput { eps, var })
}

/// Hybrid loss: ||eps - eps_hat||^2 plus the weighted variational term with
/// a frozen-mean model distribution (gradients reach the variance channel
/// only). Returns the scalar loss node.
#[allow(clippy::too_many_arguments)]
fn vlb_term(
    g: &mut Graph,
    x0: &Tensor,
    x_t: &[f64],
    t: usize,
    eps_hat: NodeId,
    var: NodeId,
    sched: &NoiseSchedule,
) -> NodeId {
    let ab_t = sched.alpha_bar[t];
    let a_t = sched.alpha[t];
    let b_t = sched.beta[t];
    let post_var = sched.posterior_variance(t).max(1e-20);
    // model mean with gradient-stopped eps
    let eps_d = g.detach(eps_hat);
    let xt_node = g.constant(Tensor::new(x0.shape.clone(), x_t.to_vec()));
    let coef = b_t / (1.0 - ab_t).sqrt();
    let scaled_eps = g.scale(eps_d, coef);
    let centered = g.sub(xt_node, scaled_eps);
    let mu_model = g.scale(centered, 1.0 / a_t.sqrt());
    // interpolated log variance: frac in (0,1) via sigmoid of the raw output
    let frac = g.sigmoid(var);
    let lb = g.scale(frac, b_t.ln());
    let one_minus = g.scale(frac, -1.0);
    let one_minus = g.add_const(one_minus, 1.0);
    let lpost = g.scale(one_minus, post_var.ln());
    let logvar = g.add(lb, lpost);

    if t > 0 {
        // q posterior mean
        let ab_prev = sched.alpha_bar[t - 1];
        let c0 = ab_prev.sqrt() * b_t / (1.0 - ab_t);
        let ct = a_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let x0_node = g.constant(x0.clone());
        let p0 = g.scale(x0_node, c0);
        let pt = g.scale(xt_node, ct);
        let mu_q = g.add(p0, pt);
        // KL(N(mu_q, post_var) || N(mu_model, exp(logvar))) elementwise
        let half_logvar = g.scale(logvar, 0.5);
        let neg = g.scale(logvar, -1.0);
        let inv_var = g.exp(neg);
        let diff = g.sub(mu_q, mu_model);
        let diff2 = g.mul(diff, diff);
        let num = g.add_const(diff2, post_var);
        let quad = g.mul(num, inv_var);
        let quad = g.scale(quad, 0.5);
        let kl = g.add(half_logvar, quad);
        let kl = g.add_const(kl, -0.5 * post_var.ln() - 0.5);
        g.mean_all(kl)
    } else {
        // t = 0: gaussian NLL of x0 under the model distribution
        let x0_node = g.constant(x0.clone());
        let diff = g.sub(x0_node, mu_model);
        let diff2 = g.mul(diff, diff);
        let neg = g.scale(logvar, -1.0);
        let inv_var = g.exp(neg);
        let quad = g.mul(diff2, inv_var);
        let quad = g.scale(quad, 0.5);
        let half_logvar = g.scale(logvar, 0.5);
        let nll = g.add(half_logvar, quad);
        let nll = g.add_const(nll, 0.5 * (2.0 * std::f64::consts::PI).ln());
        g.mean_all(nll)
    }
}

/// Gaussian noise tensor from the caller's RNG.
pub fn draw_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| crate::numerics::gaussian(rng)).collect()
}

/// Conditioning source for training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CondSource {
    Codes,
    ArLatents,
}

pub struct DiffusionExample {
    pub x0: NormalizedMel,
    pub codes: Vec<u16>,
    pub cond_clips: Vec<NormalizedMel>,
    /// Text ids, required for the AR-latent pathway.
    pub text_ids: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct DiffusionLosses {
    pub total: f64,
    pub mse: f64,
    pub vlb: f64,
    /// Whether this step dropped the conditioning signals.
    pub cond_dropped: bool,
}

pub struct DiffusionTrainer {
    pub cfg: DiffusionConfig,
    pub params: Params,
    pub opt: AdamW,
    pub ema: Ema,
    pub sched: NoiseSchedule,
    pub source: CondSource,
    /// Frozen AR model for the fine-tune stage.
    pub ar: Option<(Params, ArConfig)>,
    pub step_rng: ChaCha8Rng,
}

impl DiffusionTrainer {
    pub fn new(cfg: DiffusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = init_params(&cfg, rng);
        let opt = AdamW::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.warmup_steps);
        let ema = Ema::new(&params, cfg.ema_decay);
        let sched = make_schedule(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)?;
        let step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        Ok(DiffusionTrainer {
            cfg,
            params,
            opt,
            ema,
            sched,
            source: CondSource::Codes,
            ar: None,
            step_rng,
        })
    }

    /// Resume from converged code-conditioned weights, switching the
    /// conditioning pathway to frozen-AR hidden states through a fresh
    /// projection.
    pub fn new_finetune(
        cfg: DiffusionConfig,
        mut base_params: Params,
        ar_params: Params,
        ar_cfg: ArConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ar_cfg.code_vocab != cfg.code_vocab {
            return Err(Error::Config(format!(
                "AR code vocab {} does not match diffusion {}",
                ar_cfg.code_vocab, cfg.code_vocab
            )));
        }
        if !has_latent_proj(&base_params) {
            add_latent_proj(&mut base_params, &cfg, ar_cfg.dim, rng);
        }
        let opt = AdamW::new(&base_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.warmup_steps);
        let ema = Ema::new(&base_params, cfg.ema_decay);
        let sched = make_schedule(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)?;
        let step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        Ok(DiffusionTrainer {
            cfg,
            params: base_params,
            opt,
            ema,
            sched,
            source: CondSource::ArLatents,
            ar: Some((ar_params, ar_cfg)),
            step_rng,
        })
    }

    /// One training step over a batch. Each item draws its own timestep,
    /// noise, and joint conditioning-dropout decision.
    pub fn train_step(&mut self, batch: &[&DiffusionExample]) -> Result<DiffusionLosses> {
        assert!(!batch.is_empty());
        // draw per-item randomness up front on the single step RNG
        struct Draw {
            t: usize,
            dropped: bool,
            noise_seed: u64,
        }
        let draws: Vec<Draw> = (0..batch.len())
            .map(|_| Draw {
                t: self.step_rng.gen_range(0..self.cfg.train_timesteps),
                dropped: self.step_rng.gen::<f64>() < self.cfg.cond_dropout,
                noise_seed: self.step_rng.gen(),
            })
            .collect();

        self.params.zero_grads();
        let mut total = 0.0;
        let mut mse_total = 0.0;
        let mut vlb_total = 0.0;
        let mut any_dropped = false;
        for (ex, draw) in batch.iter().zip(&draws) {
            let (l, m, v) = self.item_loss(ex, draw.t, draw.dropped, draw.noise_seed)?;
            total += l;
            mse_total += m;
            vlb_total += v;
            any_dropped |= draw.dropped;
        }
        let b = batch.len() as f64;
        self.params.scale_grads(1.0 / b);
        self.params.clip_grad_norm(GRAD_CLIP_NORM);
        self.opt.step(&mut self.params)?;
        self.ema.update(&self.params)?;
        Ok(DiffusionLosses {
            total: total / b,
            mse: mse_total / b,
            vlb: vlb_total / b,
            cond_dropped: any_dropped,
        })
    }

    fn item_loss(&mut self, ex: &DiffusionExample, t: usize, dropped: bool, noise_seed: u64) -> Result<(f64, f64, f64)> {
        let cfg = self.cfg;
        let x0 = Tensor::matrix(ex.x0.n_mels, ex.x0.frames, ex.x0.data.clone());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = draw_noise(&mut noise_rng, x0.numel());
        let x_t = q_sample(&x0.data, t, &noise, &self.sched)?;

        let mut g = Graph::new();
        let pv = ParamView::trainable(&self.params);
        let ab_t = self.sched.alpha_bar[t];
        let input = if dropped {
            DenoiserInput {
                x_t: Tensor::new(x0.shape.clone(), x_t.clone()),
                t,
                alpha_bar_t: ab_t,
                cond_speech: None,
                cond_seq: None,
                null_cond: true,
            }
        } else {
            let clip_refs: Vec<&NormalizedMel> = ex.cond_clips.iter().collect();
            let spk = cond_encode(&mut g, &pv, &clip_refs, &cfg)?;
            let seq = match self.source {
                CondSource::Codes => codes_to_cond_seq(&mut g, &pv, &ex.codes, &cfg)?,
                CondSource::ArLatents => {
                    let (ar_params, ar_cfg) = self
                        .ar
                        .as_ref()
                        .ok_or_else(|| Error::StageDependency("fine-tune requires an AR model".into()))?;
                    let clip_refs: Vec<&NormalizedMel> = ex.cond_clips.iter().collect();
                    let ar_cond = ar::cond_vector(ar_params, ar_cfg, &clip_refs)?;
                    let lat = ar::extract_latents(ar_params, ar_cfg, &ex.text_ids, &ex.codes, &ar_cond)?;
                    let lat_node = g.constant(Tensor::matrix(ex.codes.len(), ar_cfg.dim, lat));
                    latents_to_cond_seq(&mut g, &pv, lat_node, &cfg)
                }
            };
            DenoiserInput {
                x_t: Tensor::new(x0.shape.clone(), x_t.clone()),
                t,
                alpha_bar_t: ab_t,
                cond_speech: Some(spk),
                cond_seq: Some(seq),
                null_cond: false,
            }
        };
        let out = denoiser_forward(&mut g, &pv, &input, &cfg)?;
        let noise_node = g.constant(Tensor::new(x0.shape.clone(), noise.clone()));
        let mse = g.mse(out.eps, noise_node);
        let loss = match out.var {
            Some(var) if cfg.learned_variance => {
                let vlb = vlb_term(&mut g, &x0, &x_t, t, out.eps, var, &self.sched);
                let wv = g.scale(vlb, cfg.vlb_weight);
                let l = g.add(mse, wv);
                (l, Some(vlb))
            }
            _ => (mse, None),
        };
        let (loss_node, vlb_node) = loss;
        g.backward(loss_node)?;
        let grads = g.param_grads();
        self.params.accumulate(&grads)?;
        Ok((
            g.scalar_value(loss_node),
            g.scalar_value(mse),
            vlb_node.map(|v| g.scalar_value(v)).unwrap_or(0.0),
        ))
    }
}

/// Inference-side conditioning bundle.
pub struct SamplingCond<'a> {
    pub cond_clips: Vec<&'a NormalizedMel>,
    /// Codes (pretraining pathway) or AR latents (fine-tuned pathway).
    pub codes: Option<&'a [u16]>,
    pub ar_latents: Option<(&'a [f64], usize)>, // (values [L*ar_dim], ar_dim)
}

fn forward_eps(
    params: &Params,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    x_t: &[f64],
    frames: usize,
    t: usize,
    cond: Option<&SamplingCond>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pv = ParamView::frozen(params);
    let input = match cond {
        None => DenoiserInput {
            x_t: Tensor::matrix(cfg.n_mels, frames, x_t.to_vec()),
            t,
            alpha_bar_t: sched.alpha_bar[t],
            cond_speech: None,
            cond_seq: None,
            null_cond: true,
        },
        Some(c) => {
            let spk = cond_encode(&mut g, &pv, &c.cond_clips, cfg)?;
            let seq = match (c.codes, c.ar_latents) {
                (Some(codes), None) => codes_to_cond_seq(&mut g, &pv, codes, cfg)?,
                (None, Some((lat, ar_dim))) => {
                    let l = lat.len() / ar_dim;
                    let lat_node = g.constant(Tensor::matrix(l, ar_dim, lat.to_vec()));
                    latents_to_cond_seq(&mut g, &pv, lat_node, cfg)
                }
                _ => return Err(Error::contract("exactly one conditioning sequence source required")),
            };
            DenoiserInput {
                x_t: Tensor::matrix(cfg.n_mels, frames, x_t.to_vec()),
                t,
                alpha_bar_t: sched.alpha_bar[t],
                cond_speech: Some(spk),
                cond_seq: Some(seq),
                null_cond: false,
            }
        }
    };
    let out = denoiser_forward(&mut g, &pv, &input, cfg)?;
    Ok(g.value(out.eps).data.clone())
}

/// Guided noise prediction: eps_null + scale * (eps_cond - eps_null).
/// Scales 0 and 1 return the cached single-forward results exactly.
pub fn cfg_predict(
    params: &Params,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    x_t: &[f64],
    frames: usize,
    t: usize,
    cond: &SamplingCond,
    scale: f64,
) -> Result<Vec<f64>> {
    if scale == 0.0 {
        return forward_eps(params, cfg, sched, x_t, frames, t, None);
    }
    let eps_cond = forward_eps(params, cfg, sched, x_t, frames, t, Some(cond))?;
    if scale == 1.0 {
        return Ok(eps_cond);
    }
    let eps_null = forward_eps(params, cfg, sched, x_t, frames, t, None)?;
    Ok(eps_null
        .iter()
        .zip(&eps_cond)
        .map(|(n, c)| n + scale * (c - n))
        .collect())
}

/// Evenly strided subsequence of the training schedule, ascending, ending at
/// the last trained step.
pub fn ddim_timesteps(train_t: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| (i + 1) * train_t / steps - 1).collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceStep {
    pub t: usize,
    pub mean_abs_eps: f64,
    pub mean_abs_x: f64,
}

/// Deterministic DDIM sampling (eta = 0 adds no fresh noise after the
/// initial draw). Returns the decoded spectrogram clamped to [-1, 1].
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_with_trace(
    params: &Params,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    cond: &SamplingCond,
    frames: usize,
    mel_config: MelConfig,
    seed: u64,
) -> Result<(NormalizedMel, Vec<TraceStep>)> {
    if cfg.ddim_steps > sched.len() {
        return Err(Error::contract(format!(
            "ddim steps {} exceed schedule length {}",
            cfg.ddim_steps,
            sched.len()
        )));
    }
    let n = cfg.n_mels * frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = draw_noise(&mut rng, n);
    let taus = ddim_timesteps(sched.len(), cfg.ddim_steps);
    let mut trace = Vec::with_capacity(taus.len());
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let eps = cfg_predict(params, cfg, sched, &x, frames, t, cond, cfg.guidance_scale)?;
        let ab = sched.alpha_bar[t];
        let ab_prev = if k > 0 { sched.alpha_bar[taus[k - 1]] } else { 1.0 };
        let sigma = if cfg.eta > 0.0 {
            cfg.eta
                * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                * (1.0 - ab / ab_prev).sqrt()
        } else {
            0.0
        };
        let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for i in 0..n {
            let x0_pred = (x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
            x[i] = ab_prev.sqrt() * x0_pred + dir_coef * eps[i];
            if sigma > 0.0 {
                x[i] += sigma * crate::numerics::gaussian(&mut rng);
            }
        }
        trace.push(TraceStep {
            t,
            mean_abs_eps: eps.iter().map(|v| v.abs()).sum::<f64>() / n as f64,
            mean_abs_x: x.iter().map(|v| v.abs()).sum::<f64>() / n as f64,
        });
    }
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok((
        normalized_from_values(cfg.n_mels, frames, x, mel_config),
        trace,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    params: &Params,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    cond: &SamplingCond,
    frames: usize,
    mel_config: MelConfig,
    seed: u64,
) -> Result<NormalizedMel> {
    ddim_sample_with_trace(params, cfg, sched, cond, frames, mel_config, seed).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_clip(n_mels: usize, seed: u64) -> NormalizedMel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 4;
        let data = (0..n_mels * frames).map(|_| rng.gen_range(-0.8..0.8)).collect();
        normalized_from_values(n_mels, frames, data, MelConfig::default())
    }

    #[test]
    fn schedule_construction_and_invariants() {
        let s = make_schedule(1, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar, vec![0.9]);

        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[999] < s.alpha_bar[0]);
        // independent cumulative product recomputation
        let mut acc = 1.0;
        for (i, b) in s.beta.iter().enumerate() {
            acc *= 1.0 - b;
            assert!((s.alpha_bar[i] - acc).abs() < 1e-15);
        }
        assert!(make_schedule(10, 0.5, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
    }

    #[test]
    fn q_sample_limits_and_shape_errors() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = vec![0.5, -0.3];
        let noise = vec![1.0, -1.0];
        // early t: alpha_bar near 1, x_t near x0
        let xt = q_sample(&x0, 0, &noise, &s).unwrap();
        assert!((xt[0] - x0[0]).abs() < 0.02);
        // late t: alpha_bar near 0, x_t near noise
        let xt = q_sample(&x0, 999, &noise, &s).unwrap();
        assert!((xt[0] - noise[0]).abs() < 0.1);
        assert!(q_sample(&x0, 0, &[1.0], &s).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_variance() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &t in &[100usize, 500, 900] {
            let n = 100_000;
            let x0 = vec![0.0; 1];
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..n {
                let noise = vec![crate::numerics::gaussian(&mut rng)];
                let xt = q_sample(&x0, t, &noise, &s).unwrap();
                acc += xt[0];
                acc2 += xt[0] * xt[0];
            }
            let mean = acc / n as f64;
            let var = acc2 / n as f64 - mean * mean;
            let want = 1.0 - s.alpha_bar[t];
            assert!(
                (var - want).abs() / want < 0.02,
                "t={t}: var {var} vs {want}"
            );
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = DiffusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng);
        let frames = 8;
        let mut g = Graph::new();
        let pv = ParamView::frozen(&params);
        let input = DenoiserInput {
            x_t: Tensor::matrix(cfg.n_mels, frames, vec![0.1; cfg.n_mels * frames]),
            t: 10,
            alpha_bar_t: 0.9,
            cond_speech: None,
            cond_seq: None,
            null_cond: true,
        };
        let out = denoiser_forward(&mut g, &pv, &input, &cfg).unwrap();
        assert_eq!(g.value(out.eps).shape, vec![cfg.n_mels, frames]);
        assert_eq!(g.value(out.var.unwrap()).shape, vec![cfg.n_mels, frames]);
    }

    #[test]
    fn null_flags_make_output_independent_of_conditioning() {
        let cfg = DiffusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&cfg, &mut rng);
        let frames = 8;
        let x_t = Tensor::matrix(cfg.n_mels, frames, (0..cfg.n_mels * frames).map(|i| (i as f64 * 0.1).sin()).collect());
        let run = |clip_seed: u64, codes: &[u16]| -> Vec<f64> {
            let mut g = Graph::new();
            let pv = ParamView::frozen(&params);
            let clip = toy_clip(cfg.n_mels, clip_seed);
            let spk = cond_encode(&mut g, &pv, &[&clip], &cfg).unwrap();
            let seq = codes_to_cond_seq(&mut g, &pv, codes, &cfg).unwrap();
            let input = DenoiserInput {
                x_t: x_t.clone(),
                t: 5,
                alpha_bar_t: 0.9,
                cond_speech: Some(spk),
                cond_seq: Some(seq),
                null_cond: true, // nulls override the provided signals
            };
            let out = denoiser_forward(&mut g, &pv, &input, &cfg).unwrap();
            g.value(out.eps).data.clone()
        };
        let a = run(1, &[0, 1]);
        let b = run(9, &[3, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_modulation_weights_reduce_to_plain_group_norm() {
        let cfg = DiffusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = init_params(&cfg, &mut rng);
        // zero every modulation projection (and biases)
        for i in (0..cfg.depth).step_by(2) {
            for part in ["mod1", "mod2"] {
                for wb in ["w", "b"] {
                    params.get_mut(&format!("diff.blk{i}.{part}.{wb}")).value.fill(0.0);
                }
            }
        }
        let frames = 8;
        let x_t = Tensor::matrix(cfg.n_mels, frames, (0..cfg.n_mels * frames).map(|i| (i as f64 * 0.23).cos()).collect());
        let run = |modulation: bool| -> Vec<f64> {
            let mut c = cfg;
            c.modulation = modulation;
            let mut g = Graph::new();
            let pv = ParamView::frozen(&params);
            let input = DenoiserInput {
                x_t: x_t.clone(),
                t: 7,
                alpha_bar_t: 0.8,
                cond_speech: None,
                cond_seq: None,
                null_cond: true,
            };
            let out = denoiser_forward(&mut g, &pv, &input, &c).unwrap();
            g.value(out.eps).data.clone()
        };
        let modulated = run(true);
        let plain = run(false);
        assert_eq!(modulated, plain);
    }

    #[test]
    fn cfg_predict_scale_algebra() {
        let cfg = DiffusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_params(&cfg, &mut rng);
        let frames = 8;
        let x_t: Vec<f64> = (0..cfg.n_mels * frames).map(|i| (i as f64 * 0.31).sin()).collect();
        let clip = toy_clip(cfg.n_mels, 5);
        let codes = vec![0u16, 1];
        let cond = SamplingCond {
            cond_clips: vec![&clip],
            codes: Some(&codes),
            ar_latents: None,
        };
        let sched = make_schedule(cfg.train_timesteps, cfg.beta_start, cfg.beta_end).unwrap();
        let eps_cond = forward_eps(&params, &cfg, &sched, &x_t, frames, 3, Some(&cond)).unwrap();
        let eps_null = forward_eps(&params, &cfg, &sched, &x_t, frames, 3, None).unwrap();
        // scale 1 and 0 are exactly the cached forwards
        assert_eq!(cfg_predict(&params, &cfg, &sched, &x_t, frames, 3, &cond, 1.0).unwrap(), eps_cond);
        assert_eq!(cfg_predict(&params, &cfg, &sched, &x_t, frames, 3, &cond, 0.0).unwrap(), eps_null);
        // scale 2: null + 2 (cond - null) == 2 cond - null
        let got = cfg_predict(&params, &cfg, &sched, &x_t, frames, 3, &cond, 2.0).unwrap();
        for i in 0..got.len() {
            let want = 2.0 * eps_cond[i] - eps_null[i];
            assert!((got[i] - want).abs() < 1e-12);
        }
        // linear in scale: eps(s) - eps(0) = s * (eps(1) - eps(0))
        for &s in &[0.5, 2.0, 3.0] {
            let es = cfg_predict(&params, &cfg, &sched, &x_t, frames, 3, &cond, s).unwrap();
            for i in 0..es.len() {
                let want = eps_null[i] + s * (eps_cond[i] - eps_null[i]);
                assert!((es[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_deterministic_and_bounded() {
        let cfg = DiffusionConfig {
            ddim_steps: 8,
            ..DiffusionConfig::toy()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_params(&cfg, &mut rng);
        let sched = make_schedule(cfg.train_timesteps, cfg.beta_start, cfg.beta_end).unwrap();
        let clip = toy_clip(cfg.n_mels, 7);
        let codes = vec![2u16, 4];
        let cond = SamplingCond {
            cond_clips: vec![&clip],
            codes: Some(&codes),
            ar_latents: None,
        };
        let a = ddim_sample(&params, &cfg, &sched, &cond, 8, MelConfig::default(), 42).unwrap();
        let b = ddim_sample(&params, &cfg, &sched, &cond, 8, MelConfig::default(), 42).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v) && v.is_finite()));

        let bad = DiffusionConfig {
            ddim_steps: cfg.train_timesteps + 1,
            ..cfg
        };
        assert!(ddim_sample(&params, &bad, &sched, &cond, 8, MelConfig::default(), 42).is_err());
    }

    #[test]
    fn one_step_ddim_with_exact_eps_recovers_x0() {
        // synthetic construction: if eps_hat equals the true noise, the
        // x0-prediction is exact at any t
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = draw_noise(&mut rng, 64);
        for &t in &[10usize, 400, 999] {
            let xt = q_sample(&x0, t, &noise, &sched).unwrap();
            let ab = sched.alpha_bar[t];
            for i in 0..64 {
                let x0_pred = (xt[i] - (1.0 - ab).sqrt() * noise[i]) / ab.sqrt();
                assert!((x0_pred - x0[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ddim_timestep_subsequence() {
        let taus = ddim_timesteps(1000, 64);
        assert_eq!(taus.len(), 64);
        assert_eq!(*taus.last().unwrap(), 999);
        assert!(taus.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn full_forward_grad_check_at_toy_dims() {
        use crate::numerics::grad_check;
        let cfg = DiffusionConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_params(&cfg, &mut rng);
        let frames = 4;
        let x_t = Tensor::matrix(
            cfg.n_mels,
            frames,
            (0..cfg.n_mels * frames).map(|i| (i as f64 * 0.37).sin() * 0.5).collect(),
        );
        let spk = Tensor::matrix(1, cfg.dim, (0..cfg.dim).map(|i| (i as f64 * 0.13).cos() * 0.2).collect());
        let seq = Tensor::matrix(
            frames,
            cfg.cond_width,
            (0..frames * cfg.cond_width).map(|i| (i as f64 * 0.41).sin() * 0.3).collect(),
        );
        let target = Tensor::matrix(cfg.n_mels, frames, vec![0.1; cfg.n_mels * frames]);
        let report = grad_check(
            &[spk, seq],
            |g, ids| {
                let pv = ParamView::trainable(&params);
                let input = DenoiserInput {
                    x_t: x_t.clone(),
                    t: 3,
                    alpha_bar_t: 0.99,
                    cond_speech: Some(ids[0]),
                    cond_seq: Some(ids[1]),
                    null_cond: false,
                };
                let out = denoiser_forward(g, &pv, &input, &cfg).unwrap();
                let tgt = g.constant(target.clone());
                let mse = g.mse(out.eps, tgt);
                match out.var {
                    Some(var) => {
                        let vm = g.mean_all(var);
                        let vsq = g.mul(vm, vm);
                        g.add(mse, vsq)
                    }
                    None => mse,
                }
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
