//! Contrastive dual encoder pairing text tokens with speech-code tokens.
//! Both sides share an architecture (separate weights): token embedding plus
//! fixed sinusoidal positions, a bidirectional transformer, mean pooling, a
//! linear projection and L2 normalization. Similarity scores rank sampled
//! candidates before any diffusion decoding happens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ParamView};
use crate::numerics::{AdamW, Ema, Graph, NodeId, Params, Tensor};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClvpConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub code_vocab: usize,
    pub max_text: usize,
    pub max_codes: usize,
    pub token_dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
}

impl ClvpConfig {
    pub fn desk() -> Self {
        ClvpConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            text_vocab: 256,
            code_vocab: 64,
            max_text: 64,
            max_codes: 256,
            token_dropout: 0.15,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 0.001,
            warmup_steps: 20,
            ema_decay: 0.98,
        }
    }

    pub fn paper() -> Self {
        ClvpConfig {
            layers: 20,
            dim: 768,
            heads: 12,
            code_vocab: 8192,
            max_text: 350,
            max_codes: 293,
            lr: 3e-4,
            warmup_steps: 500,
            ema_decay: 0.999,
            ..Self::desk()
        }
    }

    pub fn toy() -> Self {
        ClvpConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            text_vocab: 8,
            code_vocab: 6,
            max_text: 8,
            max_codes: 8,
            ..Self::desk()
        }
    }
}

const P: &str = "clvp";
/// Global gradient-norm clip applied before each optimizer step.
const GRAD_CLIP_NORM: f64 = 1.0;
/// CLIP-style learned temperature, stored in log space.
pub const LOGIT_SCALE_INIT: f64 = 2.6592600369327783; // ln(1/0.07)
pub const LOGIT_SCALE_MAX: f64 = 100.0;

pub fn init_params(cfg: &ClvpConfig, rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    for (side, vocab) in [("text", cfg.text_vocab), ("speech", cfg.code_vocab)] {
        params.add_normal(&format!("{P}.{side}.emb"), vec![vocab, cfg.dim], 0.02, rng);
        params.add_normal(&format!("{P}.{side}.mask_emb"), vec![1, cfg.dim], 0.02, rng);
        nn::init_transformer_stack(&mut params, &format!("{P}.{side}.stack"), cfg.layers, cfg.dim, rng);
        nn::init_linear(&mut params, &format!("{P}.{side}.proj"), cfg.dim, cfg.dim, rng);
    }
    params.add(&format!("{P}.logit_scale"), vec![1], vec![LOGIT_SCALE_INIT]);
    params
}

/// Bernoulli keep/drop decisions for train-mode token dropout.
pub fn draw_token_dropout(rng: &mut impl Rng, len: usize, rate: f64) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < rate).collect()
}

/// Encode an embedded sequence [L, dim] into a unit vector [1, dim].
fn encode_seq(g: &mut Graph, pv: &ParamView, x: NodeId, side: &str, cfg: &ClvpConfig) -> NodeId {
    let len = g.value(x).rows();
    let pos = g.constant(nn::sinusoidal_table(len, cfg.dim));
    let h = g.add(x, pos);
    let h = nn::transformer_stack(g, pv, h, &format!("{P}.{side}.stack"), cfg.layers, cfg.heads, false);
    let pooled = g.mean_rows(h);
    let proj = nn::linear(g, pv, pooled, &format!("{P}.{side}.proj"));
    nn::l2_normalize(g, proj)
}

fn encode_side(
    g: &mut Graph,
    pv: &ParamView,
    ids: &[u16],
    side: &str,
    vocab: usize,
    max_len: usize,
    cfg: &ClvpConfig,
    dropout: Option<&[bool]>,
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::contract(format!("{side} encoder needs at least one token")));
    }
    if ids.len() > max_len {
        return Err(Error::TooLong {
            got: ids.len(),
            max: max_len,
            context: format!("{side} tokens"),
        });
    }
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::contract(format!("{side} id {id} out of vocab {vocab}")));
        }
    }
    let emb = pv.node(g, &format!("{P}.{side}.emb"));
    let idvec: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let mut x = g.embed(emb, &idvec);
    if let Some(drop) = dropout {
        // dropped tokens are replaced by a learned mask embedding
        let l = ids.len();
        let d = cfg.dim;
        let mut keep_mat = vec![0.0; l * d];
        let mut drop_mat = vec![0.0; l * d];
        for (i, &dropped) in drop.iter().enumerate() {
            let row = if dropped { &mut drop_mat } else { &mut keep_mat };
            row[i * d..(i + 1) * d].fill(1.0);
        }
        let keep_c = g.constant(Tensor::matrix(l, d, keep_mat));
        let drop_c = g.constant(Tensor::matrix(l, d, drop_mat));
        let mask_emb = pv.node(g, &format!("{P}.{side}.mask_emb"));
        let mask_rows_src: Vec<NodeId> = vec![mask_emb; l];
        let mask_rows = g.concat_rows(&mask_rows_src);
        let kept = g.mul(x, keep_c);
        let masked = g.mul(mask_rows, drop_c);
        x = g.add(kept, masked);
    }
    Ok(encode_seq(g, pv, x, side, cfg))
}

/// Text tokens -> unit embedding. Train mode applies token dropout with the
/// caller's RNG.
pub fn encode_text(
    g: &mut Graph,
    pv: &ParamView,
    ids: &[u16],
    cfg: &ClvpConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let drop = train_rng.map(|rng| draw_token_dropout(rng, ids.len(), cfg.token_dropout));
    encode_side(g, pv, ids, "text", cfg.text_vocab, cfg.max_text, cfg, drop.as_deref())
}

/// Speech-code tokens -> unit embedding.
pub fn encode_speech(
    g: &mut Graph,
    pv: &ParamView,
    ids: &[u16],
    cfg: &ClvpConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let drop = train_rng.map(|rng| draw_token_dropout(rng, ids.len(), cfg.token_dropout));
    encode_side(g, pv, ids, "speech", cfg.code_vocab, cfg.max_codes, cfg, drop.as_deref())
}

/// Symmetric cross entropy over scaled cosine similarities with matched
/// pairs on the diagonal. `text_embs` and `speech_embs` are [B, dim].
pub fn contrastive_loss(
    g: &mut Graph,
    pv: &ParamView,
    text_embs: NodeId,
    speech_embs: NodeId,
) -> Result<NodeId> {
    let b = g.value(text_embs).rows();
    if b < 2 {
        return Err(Error::contract("contrastive loss needs a batch of at least 2"));
    }
    let log_scale = pv.node(g, &format!("{P}.logit_scale"));
    let scale = g.exp(log_scale);
    let st = g.transpose(speech_embs);
    let sims = g.matmul(text_embs, st);
    let scaled = g.mul_scalar_node(sims, scale);
    let diag: Vec<usize> = (0..b).collect();
    let mask = vec![true; b];
    let row_ce = g.masked_cross_entropy(scaled, &diag, &mask);
    let scaled_t = g.transpose(scaled);
    let col_ce = g.masked_cross_entropy(scaled_t, &diag, &mask);
    let sum = g.add(row_ce, col_ce);
    Ok(g.scale(sum, 0.5))
}

/// Cosine similarity between a text and a code sequence under the trained
/// model; eval mode, no dropout.
pub fn score(params: &Params, cfg: &ClvpConfig, text_ids: &[u16], code_ids: &[u16]) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamView::frozen(params);
    let t = encode_text(&mut g, &pv, text_ids, cfg, None)?;
    let s = encode_speech(&mut g, &pv, code_ids, cfg, None)?;
    let p = g.mul(t, s);
    let dot = g.sum_all(p);
    Ok(g.scalar_value(dot))
}

/// Score all candidates and return (candidate index, score) for the top k,
/// descending; ties keep the lower candidate index first.
pub fn rerank(
    params: &Params,
    cfg: &ClvpConfig,
    text_ids: &[u16],
    candidates: &[Vec<u16>],
    k: usize,
    parallel: bool,
) -> Result<Vec<(usize, f64)>> {
    if k < 1 {
        return Err(Error::contract("rerank requires k >= 1"));
    }
    if candidates.is_empty() {
        return Err(Error::contract("rerank requires at least one candidate"));
    }
    let scores: Vec<Result<f64>> = par::map_indexed(candidates.len(), parallel, |i| {
        score(params, cfg, text_ids, &candidates[i])
    });
    let mut indexed: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, s) in scores.into_iter().enumerate() {
        indexed.push((i, s?));
    }
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    Ok(indexed)
}

pub struct ClvpExample {
    pub text_ids: Vec<u16>,
    pub codes: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct ClvpLosses {
    pub contrastive: f64,
}

pub struct ClvpTrainer {
    pub cfg: ClvpConfig,
    pub params: Params,
    pub opt: AdamW,
    pub ema: Ema,
    step_rng: ChaCha8Rng,
}

impl ClvpTrainer {
    pub fn new(cfg: ClvpConfig, rng: &mut impl Rng) -> Self {
        let params = init_params(&cfg, rng);
        let opt = AdamW::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.warmup_steps);
        let ema = Ema::new(&params, cfg.ema_decay);
        let step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        ClvpTrainer {
            cfg,
            params,
            opt,
            ema,
            step_rng,
        }
    }

    /// One contrastive step over a matched batch. The whole batch shares one
    /// graph because the loss couples all pairs.
    pub fn train_step(&mut self, batch: &[&ClvpExample]) -> Result<ClvpLosses> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let pv = ParamView::trainable(&self.params);
        let mut text_embs = Vec::with_capacity(batch.len());
        let mut speech_embs = Vec::with_capacity(batch.len());
        for ex in batch {
            text_embs.push(encode_text(&mut g, &pv, &ex.text_ids, &cfg, Some(&mut self.step_rng))?);
            speech_embs.push(encode_speech(&mut g, &pv, &ex.codes, &cfg, Some(&mut self.step_rng))?);
        }
        let t = g.concat_rows(&text_embs);
        let s = g.concat_rows(&speech_embs);
        let loss = contrastive_loss(&mut g, &pv, t, s)?;
        g.backward(loss)?;
        self.params.zero_grads();
        let grads = g.param_grads();
        self.params.accumulate(&grads)?;
        self.params.clip_grad_norm(GRAD_CLIP_NORM);
        self.opt.step(&mut self.params)?;
        // CLIP-style clamp on the exponentiated scale
        let ls = &mut self.params.get_mut(&format!("{P}.logit_scale")).value[0];
        *ls = ls.min(LOGIT_SCALE_MAX.ln());
        self.ema.update(&self.params)?;
        Ok(ClvpLosses {
            contrastive: g.scalar_value(loss),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let cfg = ClvpConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng);
        let norm_of = || -> (Vec<f64>, f64) {
            let mut g = Graph::new();
            let pv = ParamView::frozen(&params);
            let e = encode_text(&mut g, &pv, &[1, 2, 3], &cfg, None).unwrap();
            let v = g.value(e).data.clone();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (v, n)
        };
        let (a, na) = norm_of();
        let (b, nb) = norm_of();
        assert_eq!(a, b);
        assert!((na - 1.0).abs() < 1e-6);
        assert!((nb - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_keeps_about_85_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000usize;
        let mut dropped = 0usize;
        for _ in 0..n {
            let d = draw_token_dropout(&mut rng, 1, 0.15);
            if d[0] {
                dropped += 1;
            }
        }
        let p = dropped as f64 / n as f64;
        // 4-sigma binomial interval around 0.15
        let sigma = (0.15 * 0.85 / n as f64).sqrt();
        assert!((p - 0.15).abs() < 4.0 * sigma, "rate {p}");
    }

    #[test]
    fn paper_scale_overlong_input_is_error() {
        let cfg = ClvpConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // tiny stand-in params not needed: length check precedes any lookup
        let params = init_params(&ClvpConfig::toy(), &mut rng);
        let mut g = Graph::new();
        let pv = ParamView::frozen(&params);
        let ids = vec![0u16; 294];
        match encode_speech(&mut g, &pv, &ids, &cfg, None) {
            Err(Error::TooLong { got, max, .. }) => {
                assert_eq!(got, 294);
                assert_eq!(max, 293);
            }
            other => panic!("expected TooLong, got {other:?}"),
        }
    }

    #[test]
    fn contrastive_loss_uniform_and_aligned_limits() {
        let cfg = ClvpConfig::toy();
        let mut params = Params::new();
        params.add("clvp.logit_scale", vec![1], vec![LOGIT_SCALE_MAX.ln()]);
        let _ = cfg;
        // identical unit embeddings with a big scale drive the loss to 0
        let b = 4;
        let d = 8;
        let mut rows = vec![0.0; b * d];
        for i in 0..b {
            rows[i * d + i] = 1.0; // orthonormal rows
        }
        let mut g = Graph::new();
        let pv = ParamView::trainable(&params);
        let t = g.constant(Tensor::matrix(b, d, rows.clone()));
        let s = g.constant(Tensor::matrix(b, d, rows));
        let loss = contrastive_loss(&mut g, &pv, t, s).unwrap();
        assert!(g.scalar_value(loss) < 1e-6);

        // all-equal embeddings give uniform logits: loss = ln B exactly
        let mut g2 = Graph::new();
        let pv2 = ParamView::trainable(&params);
        let uniform = vec![1.0 / (d as f64).sqrt(); b * d];
        let t2 = g2.constant(Tensor::matrix(b, d, uniform.clone()));
        let s2 = g2.constant(Tensor::matrix(b, d, uniform));
        let loss2 = contrastive_loss(&mut g2, &pv2, t2, s2).unwrap();
        assert!((g2.scalar_value(loss2) - (b as f64).ln()).abs() < 1e-9);

        // batch of one is a contract violation
        let mut g3 = Graph::new();
        let pv3 = ParamView::trainable(&params);
        let t3 = g3.constant(Tensor::matrix(1, d, vec![0.5; d]));
        let s3 = g3.constant(Tensor::matrix(1, d, vec![0.5; d]));
        assert!(contrastive_loss(&mut g3, &pv3, t3, s3).is_err());
    }

    #[test]
    fn random_init_loss_is_near_ln_b() {
        let cfg = ClvpConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = init_params(&cfg, &mut rng);
        let b = 8;
        let mut g = Graph::new();
        let pv = ParamView::trainable(&params);
        let mut text_embs = Vec::new();
        let mut speech_embs = Vec::new();
        let mut data_rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..b {
            let t: Vec<u16> = (0..6).map(|_| data_rng.gen_range(4..200u16)).collect();
            let s: Vec<u16> = (0..10).map(|_| data_rng.gen_range(0..cfg.code_vocab as u16)).collect();
            text_embs.push(encode_text(&mut g, &pv, &t, &cfg, None).unwrap());
            speech_embs.push(encode_speech(&mut g, &pv, &s, &cfg, None).unwrap());
        }
        let t = g.concat_rows(&text_embs);
        let s = g.concat_rows(&speech_embs);
        let loss = contrastive_loss(&mut g, &pv, t, s).unwrap();
        let lv = g.scalar_value(loss);
        assert!((lv - (b as f64).ln()).abs() < 0.3, "loss {lv}");
    }

    #[test]
    fn loss_invariant_under_joint_permutation() {
        let mut params = Params::new();
        params.add("clvp.logit_scale", vec![1], vec![LOGIT_SCALE_INIT]);
        let b = 4;
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..b {
                let n = v[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
                for j in 0..d {
                    v[i * d + j] /= n;
                }
            }
            v
        };
        let t = mk(&mut rng);
        let s = mk(&mut rng);
        let perm = [2usize, 0, 3, 1];
        let permute = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for (new_i, &old_i) in perm.iter().enumerate() {
                out[new_i * d..(new_i + 1) * d].copy_from_slice(&v[old_i * d..(old_i + 1) * d]);
            }
            out
        };
        let eval = |tv: Vec<f64>, sv: Vec<f64>| -> f64 {
            let mut g = Graph::new();
            let pv = ParamView::trainable(&params);
            let t = g.constant(Tensor::matrix(b, d, tv));
            let s = g.constant(Tensor::matrix(b, d, sv));
            let l = contrastive_loss(&mut g, &pv, t, s).unwrap();
            g.scalar_value(l)
        };
        let base = eval(t.clone(), s.clone());
        let permuted = eval(permute(&t), permute(&s));
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn score_is_bounded_and_rerank_is_stable() {
        let cfg = ClvpConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_params(&cfg, &mut rng);
        let s = score(&params, &cfg, &[1, 2], &[0, 1, 2]).unwrap();
        assert!(s >= -1.0 - 1e-9 && s <= 1.0 + 1e-9);

        // single candidate, k=1
        let top = rerank(&params, &cfg, &[1, 2], &[vec![0, 1]], 1, false).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].0, 0);

        // identical candidates tie; order preserved
        let cands = vec![vec![3u16, 4], vec![3u16, 4], vec![3u16, 4]];
        let ranked = rerank(&params, &cfg, &[1, 2], &cands, 3, true).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(rerank(&params, &cfg, &[1], &cands, 0, false).is_err());
    }

    #[test]
    fn full_forward_grad_check_at_toy_dims() {
        use crate::numerics::grad_check;
        let cfg = ClvpConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(&cfg, &mut rng);
        // FD over continuous token embeddings through both encoders and the
        // contrastive loss
        let l = 3;
        let mk = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Tensor::matrix(l, cfg.dim, (0..l * cfg.dim).map(|_| r.gen_range(-0.5..0.5)).collect())
        };
        let inputs = vec![mk(1), mk(2), mk(3), mk(4)];
        let report = grad_check(
            &inputs,
            |g, ids| {
                let pv = ParamView::trainable(&params);
                let t0 = super::encode_seq(g, &pv, ids[0], "text", &cfg);
                let t1 = super::encode_seq(g, &pv, ids[1], "text", &cfg);
                let s0 = super::encode_seq(g, &pv, ids[2], "speech", &cfg);
                let s1 = super::encode_seq(g, &pv, ids[3], "speech", &cfg);
                let t = g.concat_rows(&[t0, t1]);
                let s = g.concat_rows(&[s0, s1]);
                contrastive_loss(g, &pv, t, s).unwrap()
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
