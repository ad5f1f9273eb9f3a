//! Causal transformer prior over speech codes, conditioned on text tokens
//! and a pooled speaker embedding. The prompt is a single attention context:
//! one conditioning slot, then the text segment, then the code segment, with
//! separate learned positional tables for the two token segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::mel::NormalizedMel;
use crate::error::{Error, Result};
use crate::nn::{self, ParamView};
use crate::numerics::{AdamW, Ema, Graph, NodeId, Params, Tensor};
use crate::par;
use crate::textdata::bpe::END_TEXT;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    /// Speech-code vocabulary (the tokenizer codebook size).
    pub code_vocab: usize,
    pub max_text: usize,
    pub max_mel: usize,
    /// Conditioning encoder depth and input cap.
    pub cond_layers: usize,
    pub max_cond_samples: usize,
    pub cond_clips_per_sample: usize,
    pub text_loss_weight: f64,
    pub mel_loss_weight: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    /// Restrict training to short clips for the first half of a run.
    pub short_first_curriculum: bool,
}

impl ArConfig {
    pub fn desk() -> Self {
        ArConfig {
            layers: 3,
            dim: 64,
            heads: 4,
            text_vocab: 256,
            code_vocab: 64,
            max_text: 64,
            max_mel: 128,
            cond_layers: 2,
            max_cond_samples: 132_300,
            cond_clips_per_sample: 2,
            text_loss_weight: 0.01,
            mel_loss_weight: 1.0,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 0.01,
            warmup_steps: 20,
            ema_decay: 0.98,
            short_first_curriculum: false,
        }
    }

    pub fn paper() -> Self {
        ArConfig {
            layers: 30,
            dim: 1024,
            heads: 16,
            code_vocab: 8192,
            max_text: 402,
            max_mel: 604,
            lr: 1e-4,
            warmup_steps: 500,
            ema_decay: 0.999,
            ..Self::desk()
        }
    }

    pub fn toy() -> Self {
        ArConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            text_vocab: 8,
            code_vocab: 6,
            max_text: 8,
            max_mel: 8,
            cond_layers: 1,
            ..Self::desk()
        }
    }

    /// Mel-segment input ids: codes, then BM, then EM.
    pub fn bm_id(&self) -> usize {
        self.code_vocab
    }

    pub fn em_in_id(&self) -> usize {
        self.code_vocab + 1
    }

    /// Output head vocabulary: codes plus EM.
    pub fn em_out_id(&self) -> usize {
        self.code_vocab
    }
}

const P: &str = "ar";
/// Global gradient-norm clip applied before each optimizer step.
const GRAD_CLIP_NORM: f64 = 1.0;

pub fn init_params(cfg: &ArConfig, rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    let d = cfg.dim;
    params.add_normal(&format!("{P}.text_emb"), vec![cfg.text_vocab, d], 0.02, rng);
    params.add_normal(&format!("{P}.mel_emb"), vec![cfg.code_vocab + 2, d], 0.02, rng);
    params.add_normal(&format!("{P}.text_pos"), vec![cfg.max_text + 2, d], 0.02, rng);
    params.add_normal(&format!("{P}.mel_pos"), vec![cfg.max_mel + 2, d], 0.02, rng);
    nn::init_linear(&mut params, &format!("{P}.cond.in"), 80, d, rng);
    nn::init_transformer_stack(&mut params, &format!("{P}.cond"), cfg.cond_layers, d, rng);
    nn::init_transformer_stack(&mut params, &format!("{P}.stack"), cfg.layers, d, rng);
    nn::init_linear(&mut params, &format!("{P}.text_head"), d, cfg.text_vocab, rng);
    nn::init_linear(&mut params, &format!("{P}.mel_head"), d, cfg.code_vocab + 1, rng);
    params
}

/// Encode reference clips into a single speaker vector: per clip a
/// self-attention stack mean-pooled over frames, then the clip vectors are
/// averaged again.
pub fn cond_encode(
    g: &mut Graph,
    pv: &ParamView,
    clips: &[&NormalizedMel],
    cfg: &ArConfig,
) -> Result<NodeId> {
    if clips.is_empty() {
        return Err(Error::contract("cond_encode requires at least one clip"));
    }
    let mut vecs = Vec::with_capacity(clips.len());
    for clip in clips {
        let max_frames = cfg.max_cond_samples / 256;
        if clip.frames > max_frames {
            return Err(Error::TooLong {
                got: clip.frames,
                max: max_frames,
                context: "conditioning clip frames".into(),
            });
        }
        let x = g.constant(Tensor::matrix(clip.n_mels, clip.frames, clip.data.clone()));
        let xt = g.transpose(x); // [frames, n_mels]
        let h = nn::linear(g, pv, xt, &format!("{P}.cond.in"));
        let pos = g.constant(nn::sinusoidal_table(clip.frames, cfg.dim));
        let h = g.add(h, pos);
        let h = nn::transformer_stack(g, pv, h, &format!("{P}.cond"), cfg.cond_layers, cfg.heads, false);
        vecs.push(g.mean_rows(h)); // [1, dim]
    }
    if vecs.len() == 1 {
        return Ok(vecs[0]);
    }
    let stacked = g.concat_rows(&vecs);
    Ok(g.mean_rows(stacked))
}

/// Row offsets of the assembled prompt:
/// `[SC][BT]<text...>[ET][BM]<codes...>([EM])`.
#[derive(Debug, Clone, Copy)]
pub struct PromptLayout {
    pub text_len: usize,
    pub code_len: usize,
    pub with_em: bool,
}

impl PromptLayout {
    pub fn total_len(&self) -> usize {
        4 + self.text_len + self.code_len + usize::from(self.with_em)
    }

    /// First row whose next-token target is a text token (the BT row).
    pub fn text_pred_start(&self) -> usize {
        1
    }

    /// Rows predicting text tokens plus ET.
    pub fn text_pred_len(&self) -> usize {
        self.text_len + 1
    }

    /// First row whose next-token target is a code token (the BM row).
    pub fn mel_pred_start(&self) -> usize {
        3 + self.text_len
    }

    /// Rows predicting code tokens plus EM (teacher-forced layouts only).
    pub fn mel_pred_len(&self) -> usize {
        self.code_len + 1
    }

    /// First row carrying a code id as input.
    pub fn code_rows_start(&self) -> usize {
        4 + self.text_len
    }
}

/// Assemble the prompt embedding sequence. The conditioning vector occupies
/// one leading attention slot; text and code segments each start their
/// positional table at zero.
pub fn assemble_prompt(
    g: &mut Graph,
    pv: &ParamView,
    cond: NodeId,
    text_ids: &[u16],
    code_ids: &[u16],
    with_em: bool,
    cfg: &ArConfig,
) -> Result<(NodeId, PromptLayout)> {
    if text_ids.len() > cfg.max_text {
        return Err(Error::TooLong {
            got: text_ids.len(),
            max: cfg.max_text,
            context: "text tokens".into(),
        });
    }
    if code_ids.len() > cfg.max_mel {
        return Err(Error::TooLong {
            got: code_ids.len(),
            max: cfg.max_mel,
            context: "mel codes".into(),
        });
    }
    let text_emb = pv.node(g, &format!("{P}.text_emb"));
    let mel_emb = pv.node(g, &format!("{P}.mel_emb"));
    let text_pos = pv.node(g, &format!("{P}.text_pos"));
    let mel_pos = pv.node(g, &format!("{P}.mel_pos"));

    // text segment: BT, text tokens, ET with positions 0..n+2
    let mut text_seg_ids: Vec<usize> = Vec::with_capacity(text_ids.len() + 2);
    text_seg_ids.push(crate::textdata::bpe::BEGIN_TEXT as usize);
    text_seg_ids.extend(text_ids.iter().map(|&t| t as usize));
    text_seg_ids.push(END_TEXT as usize);
    let text_tok = g.embed(text_emb, &text_seg_ids);
    let text_posn = g.slice_rows(text_pos, 0, text_seg_ids.len());
    let text_seq = g.add(text_tok, text_posn);

    // mel segment: BM, codes (, EM) with positions restarting at 0
    let mut mel_seg_ids: Vec<usize> = Vec::with_capacity(code_ids.len() + 2);
    mel_seg_ids.push(cfg.bm_id());
    mel_seg_ids.extend(code_ids.iter().map(|&c| c as usize));
    if with_em {
        mel_seg_ids.push(cfg.em_in_id());
    }
    let mel_tok = g.embed(mel_emb, &mel_seg_ids);
    let mel_posn = g.slice_rows(mel_pos, 0, mel_seg_ids.len());
    let mel_seq = g.add(mel_tok, mel_posn);

    let seq = g.concat_rows(&[cond, text_seq, mel_seq]);
    let layout = PromptLayout {
        text_len: text_ids.len(),
        code_len: code_ids.len(),
        with_em,
    };
    Ok((seq, layout))
}

/// Forward outputs: final hidden states and both logit heads over the full
/// sequence.
pub struct ArOutput {
    pub hidden: NodeId,
    pub text_logits: NodeId,
    pub mel_logits: NodeId,
}

pub fn forward(g: &mut Graph, pv: &ParamView, seq: NodeId, cfg: &ArConfig) -> ArOutput {
    let hidden = nn::transformer_stack(g, pv, seq, &format!("{P}.stack"), cfg.layers, cfg.heads, true);
    let text_logits = nn::linear(g, pv, hidden, &format!("{P}.text_head"));
    let mel_logits = nn::linear(g, pv, hidden, &format!("{P}.mel_head"));
    ArOutput {
        hidden,
        text_logits,
        mel_logits,
    }
}

/// Weighted next-token loss: `w_text * CE(text segment) + w_mel * CE(code
/// segment incl. EM)`. Mask entries cover the code rows (right padding).
pub fn loss(
    g: &mut Graph,
    out: &ArOutput,
    layout: &PromptLayout,
    text_ids: &[u16],
    code_ids: &[u16],
    code_mask: Option<&[bool]>,
    cfg: &ArConfig,
) -> Result<NodeId> {
    if !layout.with_em {
        return Err(Error::contract("loss requires a teacher-forced layout with EM"));
    }
    // text rows: BT + text[..n-1] predict text tokens, last text row predicts ET
    let text_rows = g.slice_rows(out.text_logits, layout.text_pred_start(), layout.text_pred_len());
    let mut text_targets: Vec<usize> = text_ids.iter().map(|&t| t as usize).collect();
    text_targets.push(END_TEXT as usize);
    let text_mask = vec![true; text_targets.len()];
    let text_ce = g.masked_cross_entropy(text_rows, &text_targets, &text_mask);

    let mel_rows = g.slice_rows(out.mel_logits, layout.mel_pred_start(), layout.mel_pred_len());
    let mut mel_targets: Vec<usize> = code_ids.iter().map(|&c| c as usize).collect();
    mel_targets.push(cfg.em_out_id());
    let mel_mask: Vec<bool> = match code_mask {
        Some(m) => {
            if m.len() != code_ids.len() {
                return Err(Error::contract("code mask length must match code ids"));
            }
            // the EM prediction is real whenever the last code is real
            let mut v = m.to_vec();
            v.push(m.last().copied().unwrap_or(true));
            v
        }
        None => vec![true; mel_targets.len()],
    };
    let mel_ce = g.masked_cross_entropy(mel_rows, &mel_targets, &mel_mask);

    let wt = g.scale(text_ce, cfg.text_loss_weight);
    let wm = g.scale(mel_ce, cfg.mel_loss_weight);
    Ok(g.add(wt, wm))
}

/// Final hidden rows at the code positions, teacher-forced: [m, dim].
pub fn latents(g: &mut Graph, out: &ArOutput, layout: &PromptLayout) -> NodeId {
    g.slice_rows(out.hidden, layout.code_rows_start(), layout.code_len)
}

pub mod sampling {
    //! Decoding transforms in application order: repetition penalty, then
    //! temperature, then nucleus truncation. Kept as pure functions so they
    //! can be checked against hand-enumerated distributions.

    /// CTRL-style penalty on already-emitted ids: positive logits divide by
    /// the penalty, negative logits multiply. Signs never flip.
    pub fn apply_repetition_penalty(logits: &mut [f64], emitted: &[bool], penalty: f64) {
        if penalty == 1.0 {
            return;
        }
        for (id, l) in logits.iter_mut().enumerate() {
            if emitted.get(id).copied().unwrap_or(false) {
                if *l > 0.0 {
                    *l /= penalty;
                } else {
                    *l *= penalty;
                }
            }
        }
    }

    pub fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Minimal prefix of the sorted distribution with cumulative mass >= p,
    /// renormalized. Returns (id, prob) pairs in descending-probability
    /// order; equal probabilities keep ascending id order.
    pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut kept = Vec::new();
        let mut cum = 0.0;
        for &id in &order {
            kept.push(id);
            cum += probs[id];
            if cum >= p - 1e-12 {
                break;
            }
        }
        let total: f64 = kept.iter().map(|&id| probs[id]).sum();
        kept.into_iter().map(|id| (id, probs[id] / total)).collect()
    }

    /// Inverse-CDF draw over (id, prob) pairs.
    pub fn draw(kept: &[(usize, f64)], u: f64) -> usize {
        let mut cum = 0.0;
        for &(id, pr) in kept {
            cum += pr;
            if u < cum {
                return id;
            }
        }
        kept.last().expect("non-empty nucleus").0
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SamplingControls {
    pub top_p: f64,
    pub temperature: f64,
    pub repetition_penalty: f64,
}

impl Default for SamplingControls {
    fn default() -> Self {
        SamplingControls {
            top_p: 0.8,
            temperature: 0.8,
            repetition_penalty: 2.0,
        }
    }
}

/// One sampled candidate with its provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Candidate {
    pub seed_stream: u64,
    pub codes: Vec<u16>,
    pub log_prob: f64,
}

/// Autoregressive decode of `n_candidates` code sequences. Candidate i uses
/// its own RNG stream derived from (seed, i), so results are identical
/// whether candidates run sequentially or in parallel.
pub fn sample(
    params: &Params,
    cfg: &ArConfig,
    text_ids: &[u16],
    cond_vec: &[f64],
    n_candidates: usize,
    controls: &SamplingControls,
    seed: u64,
    parallel: bool,
) -> Result<Vec<Candidate>> {
    if n_candidates < 1 {
        return Err(Error::contract("n_candidates must be >= 1"));
    }
    if cond_vec.len() != cfg.dim {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.dim],
            got: vec![cond_vec.len()],
            context: "conditioning vector".into(),
        });
    }
    let results: Vec<Result<Candidate>> = par::map_indexed(n_candidates, parallel, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sample_one(params, cfg, text_ids, cond_vec, controls, &mut rng, i as u64)
    });
    results.into_iter().collect()
}

fn sample_one(
    params: &Params,
    cfg: &ArConfig,
    text_ids: &[u16],
    cond_vec: &[f64],
    controls: &SamplingControls,
    rng: &mut ChaCha8Rng,
    stream: u64,
) -> Result<Candidate> {
    let mut codes: Vec<u16> = Vec::new();
    let mut emitted = vec![false; cfg.code_vocab + 1];
    let mut log_prob = 0.0;
    loop {
        let mut g = Graph::new();
        let pv = ParamView::frozen(params);
        let cond = g.constant(Tensor::matrix(1, cfg.dim, cond_vec.to_vec()));
        let (seq, layout) = assemble_prompt(&mut g, &pv, cond, text_ids, &codes, false, cfg)?;
        let out = forward(&mut g, &pv, seq, cfg);
        let last = layout.total_len() - 1;
        let logits_node = g.slice_rows(out.mel_logits, last, 1);
        let mut logits = g.value(logits_node).data.clone();

        sampling::apply_repetition_penalty(&mut logits, &emitted, controls.repetition_penalty);
        let next = if controls.temperature < 1e-8 {
            let probs = sampling::softmax(&logits);
            (0..probs.len())
                .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap().then(b.cmp(&a)))
                .unwrap()
        } else {
            for l in &mut logits {
                *l /= controls.temperature;
            }
            let probs = sampling::softmax(&logits);
            let kept = sampling::nucleus_filter(&probs, controls.top_p);
            let u: f64 = rng.gen();
            let id = sampling::draw(&kept, u);
            log_prob += kept.iter().find(|(k, _)| *k == id).unwrap().1.ln();
            id
        };
        if next == cfg.em_out_id() || codes.len() >= cfg.max_mel {
            break;
        }
        emitted[next] = true;
        codes.push(next as u16);
    }
    Ok(Candidate {
        seed_stream: stream,
        codes,
        log_prob,
    })
}

/// Teacher-forced latents for a complete (text, codes) pair: [m, dim] values.
pub fn extract_latents(
    params: &Params,
    cfg: &ArConfig,
    text_ids: &[u16],
    code_ids: &[u16],
    cond_vec: &[f64],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pv = ParamView::frozen(params);
    let cond = g.constant(Tensor::matrix(1, cfg.dim, cond_vec.to_vec()));
    let (seq, layout) = assemble_prompt(&mut g, &pv, cond, text_ids, code_ids, true, cfg)?;
    let out = forward(&mut g, &pv, seq, cfg);
    let lat = latents(&mut g, &out, &layout);
    Ok(g.value(lat).data.clone())
}

/// Inference-path conditioning vector from reference clips.
pub fn cond_vector(params: &Params, cfg: &ArConfig, clips: &[&NormalizedMel]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pv = ParamView::frozen(params);
    let c = cond_encode(&mut g, &pv, clips, cfg)?;
    Ok(g.value(c).data.clone())
}

/// One training example: tokenized text, target codes, conditioning clips.
pub struct ArExample {
    pub text_ids: Vec<u16>,
    pub codes: Vec<u16>,
    pub cond_clips: Vec<NormalizedMel>,
}

#[derive(Debug, Clone)]
pub struct ArLosses {
    pub total: f64,
}

pub struct ArTrainer {
    pub cfg: ArConfig,
    pub params: Params,
    pub opt: AdamW,
    pub ema: Ema,
}

impl ArTrainer {
    pub fn new(cfg: ArConfig, rng: &mut impl Rng) -> Self {
        let params = init_params(&cfg, rng);
        let opt = AdamW::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.warmup_steps);
        let ema = Ema::new(&params, cfg.ema_decay);
        ArTrainer { cfg, params, opt, ema }
    }

    pub fn train_step(&mut self, batch: &[&ArExample], parallel: bool) -> Result<ArLosses> {
        assert!(!batch.is_empty());
        let cfg = self.cfg;
        let params = &self.params;
        let results: Vec<Result<(Vec<(usize, Vec<f64>)>, f64)>> =
            par::map_indexed(batch.len(), parallel, |i| {
                let ex = batch[i];
                let mut g = Graph::new();
                let pv = ParamView::trainable(params);
                let clip_refs: Vec<&NormalizedMel> = ex.cond_clips.iter().collect();
                let cond = cond_encode(&mut g, &pv, &clip_refs, &cfg)?;
                let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &ex.text_ids, &ex.codes, true, &cfg)?;
                let out = forward(&mut g, &pv, seq, &cfg);
                let l = loss(&mut g, &out, &layout, &ex.text_ids, &ex.codes, None, &cfg)?;
                g.backward(l)?;
                let grads: Vec<(usize, Vec<f64>)> = g
                    .param_grads()
                    .into_iter()
                    .map(|(pid, gr)| (pid, gr.to_vec()))
                    .collect();
                Ok((grads, g.scalar_value(l)))
            });
        self.params.zero_grads();
        let mut total = 0.0;
        for r in results {
            let (grads, l) = r?;
            let refs: Vec<(usize, &[f64])> = grads.iter().map(|(p, v)| (*p, v.as_slice())).collect();
            self.params.accumulate(&refs)?;
            total += l;
        }
        let b = batch.len() as f64;
        self.params.scale_grads(1.0 / b);
        self.params.clip_grad_norm(GRAD_CLIP_NORM);
        self.opt.step(&mut self.params)?;
        self.ema.update(&self.params)?;
        Ok(ArLosses { total: total / b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::{normalized_from_values, MelConfig};

    fn toy_clip(cfg: &ArConfig, seed: u64) -> NormalizedMel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 6;
        let data = (0..80 * frames).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let _ = cfg;
        normalized_from_values(80, frames, data, MelConfig::default())
    }

    #[test]
    fn prompt_length_example() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let pv = ParamView::frozen(&params);
        let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
        let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &[1, 2, 3], &[0, 1, 2, 3, 4], true, &cfg).unwrap();
        assert_eq!(layout.total_len(), 13);
        assert_eq!(g.value(seq).rows(), 13);
    }

    #[test]
    fn empty_codes_layout_ends_at_bm() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let pv = ParamView::frozen(&params);
        let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
        let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &[1, 2], &[], false, &cfg).unwrap();
        // [SC][BT][T][T][ET][BM]
        assert_eq!(layout.total_len(), 6);
        let rows = g.value(seq).rows();
        assert_eq!(rows, 6);
        // last row is BM embedding + mel position 0
        let mel_emb = &params.get("ar.mel_emb").value;
        let mel_pos = &params.get("ar.mel_pos").value;
        let d = cfg.dim;
        let bm = cfg.bm_id();
        let want: Vec<f64> = (0..d).map(|j| mel_emb[bm * d + j] + mel_pos[j]).collect();
        let got = &g.value(seq).data[(rows - 1) * d..rows * d];
        assert_eq!(got, &want[..]);
    }

    #[test]
    fn mel_positions_restart_regardless_of_text_length() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&cfg, &mut rng);
        let bm_row = |text: &[u16]| -> Vec<f64> {
            let mut g = Graph::new();
            let pv = ParamView::frozen(&params);
            let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
            let (seq, layout) = assemble_prompt(&mut g, &pv, cond, text, &[], false, &cfg).unwrap();
            let rows = layout.total_len();
            g.value(seq).data[(rows - 1) * cfg.dim..rows * cfg.dim].to_vec()
        };
        assert_eq!(bm_row(&[1]), bm_row(&[1, 2, 3, 4]));
    }

    #[test]
    fn overlong_segments_are_errors() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let pv = ParamView::frozen(&params);
        let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
        let long_text = vec![1u16; cfg.max_text + 1];
        assert!(matches!(
            assemble_prompt(&mut g, &pv, cond, &long_text, &[], false, &cfg),
            Err(Error::TooLong { .. })
        ));
        let long_codes = vec![0u16; cfg.max_mel + 1];
        assert!(matches!(
            assemble_prompt(&mut g, &pv, cond, &[1], &long_codes, false, &cfg),
            Err(Error::TooLong { .. })
        ));
    }

    #[test]
    fn causality_logits_invariant_to_suffix() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_params(&cfg, &mut rng);
        let run = |codes: &[u16]| -> (Vec<f64>, usize) {
            let mut g = Graph::new();
            let pv = ParamView::frozen(&params);
            let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.1; cfg.dim]));
            let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &[1, 2], codes, false, &cfg).unwrap();
            let out = forward(&mut g, &pv, seq, &cfg);
            (g.value(out.mel_logits).data.clone(), layout.total_len())
        };
        let (full, _) = run(&[0, 1, 2, 3]);
        let (pre, pre_len) = run(&[0, 1]);
        let v = cfg.code_vocab + 1;
        assert_eq!(&full[..pre_len * v], &pre[..]);

        // latents at earlier positions unaffected by later code edits
        let lat = |codes: &[u16]| {
            extract_latents(&params, &cfg, &[1, 2], codes, &vec![0.1; cfg.dim]).unwrap()
        };
        let a = lat(&[0, 1, 2, 3]);
        let b = lat(&[0, 1, 2, 5]);
        assert_eq!(&a[..3 * cfg.dim], &b[..3 * cfg.dim]);
        assert_ne!(&a[3 * cfg.dim..], &b[3 * cfg.dim..]);
    }

    #[test]
    fn cond_encode_mean_semantics() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(&cfg, &mut rng);
        let c1 = toy_clip(&cfg, 10);
        let c2 = toy_clip(&cfg, 11);
        let one = cond_vector(&params, &cfg, &[&c1]).unwrap();
        let dup = cond_vector(&params, &cfg, &[&c1, &c1]).unwrap();
        assert_eq!(one, dup);
        let two = cond_vector(&params, &cfg, &[&c1, &c2]).unwrap();
        let v2 = cond_vector(&params, &cfg, &[&c2]).unwrap();
        for j in 0..cfg.dim {
            let mean = (one[j] + v2[j]) / 2.0;
            assert!((two[j] - mean).abs() < 1e-12);
        }
        assert!(cond_vector(&params, &cfg, &[]).is_err());
    }

    #[test]
    fn uniform_logits_ce_is_ln_vocab() {
        // CE over a 64-way uniform distribution is ln 64
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 64, vec![0.0; 64]));
        let ce = g.masked_cross_entropy(logits, &[17], &[true]);
        assert!((g.scalar_value(ce) - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn text_weight_scales_text_gradients_exactly() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_params(&cfg, &mut rng);
        let grad_for = |w: f64| -> Vec<f64> {
            let mut c = cfg;
            c.text_loss_weight = w;
            c.mel_loss_weight = 0.0;
            let mut g = Graph::new();
            let pv = ParamView::trainable(&params);
            let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
            let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &[1, 2], &[0, 1], true, &c).unwrap();
            let out = forward(&mut g, &pv, seq, &c);
            let l = loss(&mut g, &out, &layout, &[1, 2], &[0, 1], None, &c).unwrap();
            g.backward(l).unwrap();
            let pid = params.id("ar.text_head.w");
            g.param_grads()
                .iter()
                .find(|(p, _)| *p == pid)
                .map(|(_, gr)| gr.to_vec())
                .unwrap()
        };
        let g1 = grad_for(1.0);
        let g001 = grad_for(0.01);
        for (a, b) in g1.iter().zip(&g001) {
            let want = a * 0.01;
            assert!(
                (want - b).abs() <= 1e-12 * want.abs().max(1e-300),
                "{want} vs {b}"
            );
        }
    }

    #[test]
    fn fully_masked_codes_give_zero_mel_loss() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(&cfg, &mut rng);
        let mut c = cfg;
        c.text_loss_weight = 0.0;
        let mut g = Graph::new();
        let pv = ParamView::trainable(&params);
        let cond = g.constant(Tensor::matrix(1, cfg.dim, vec![0.0; cfg.dim]));
        let (seq, layout) = assemble_prompt(&mut g, &pv, cond, &[1], &[0, 1], true, &c).unwrap();
        let out = forward(&mut g, &pv, seq, &c);
        let mask = vec![false, false];
        let l = loss(&mut g, &out, &layout, &[1], &[0, 1], Some(&mask), &c).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        g.backward(l).unwrap();
        let pid = params.id("ar.mel_head.w");
        let got = g.param_grads().iter().any(|(p, gr)| *p == pid && gr.iter().any(|v| *v != 0.0));
        assert!(!got, "mel head should receive zero gradient");
    }

    #[test]
    fn nucleus_oracle_four_symbols() {
        let kept = sampling::nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert!((kept[1].1 - 0.375).abs() < 1e-12);
        let total: f64 = kept.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repetition_penalty_convention() {
        let mut logits = vec![1.0, -1.0, 0.5];
        sampling::apply_repetition_penalty(&mut logits, &[true, true, false], 2.0);
        assert_eq!(logits, vec![0.5, -2.0, 0.5]);
        // sign never changes
        for (orig, new) in [(1.0, 0.5), (-1.0, -2.0)] {
            assert_eq!(orig > 0.0, new > 0.0);
        }
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = init_params(&cfg, &mut rng);
        let controls = SamplingControls {
            temperature: 0.0,
            ..Default::default()
        };
        let cond = vec![0.05; cfg.dim];
        let a = sample(&params, &cfg, &[1, 2], &cond, 2, &controls, 7, false).unwrap();
        let b = sample(&params, &cfg, &[1, 2], &cond, 2, &controls, 7, true).unwrap();
        assert_eq!(a[0].codes, b[0].codes);
        assert_eq!(a[1].codes, b[1].codes);
        assert_eq!(a[0].codes, a[1].codes); // greedy ignores the stream
        assert!(sample(&params, &cfg, &[1], &cond, 0, &controls, 7, false).is_err());
    }

    #[test]
    fn full_forward_grad_check_at_toy_dims() {
        use crate::numerics::grad_check;
        let cfg = ArConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_params(&cfg, &mut rng);
        // check d(loss)/d(cond vector) through the whole stack
        let cond = Tensor::matrix(1, cfg.dim, (0..cfg.dim).map(|i| (i as f64 * 0.21).sin() * 0.3).collect());
        let report = grad_check(
            &[cond],
            |g, ids| {
                let pv = ParamView::trainable(&params);
                let (seq, layout) = assemble_prompt(g, &pv, ids[0], &[1, 2], &[0, 1, 2], true, &cfg).unwrap();
                let out = forward(g, &pv, seq, &cfg);
                loss(g, &out, &layout, &[1, 2], &[0, 1, 2], None, &cfg).unwrap()
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }
}
