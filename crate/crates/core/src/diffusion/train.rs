//! Denoising-score-matching training of the decoder, plus per-speaker
//! fine-tuning.
//!
//! Each step samples `t ~ U[t_min, 1]` and noise, draws `x_t` from the
//! closed-form kernel, and minimizes the lambda-weighted residual
//! `mean((sqrt(lambda(t)) * s_theta(x_t, xbar, t, c) + noise)^2)`, which stays
//! bounded as `t -> t_min`. The reconstruction crop and the crop feeding the
//! speaker condition are drawn independently from the same utterance.

use ndarray::{Array2, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::unet::ScoreNetwork;
use super::{forward_sample, NoiseSchedule, T_MIN};
use crate::audio::{MelSpectrogram, Waveform};
use crate::encoder::TrainOutcome;
use crate::nn::{accumulate_grads, scale_grads, Adam, Forward, NodeId};
use crate::seeds::derive_seed;
use crate::speaker::EmbeddingProvider;
use crate::{Error, Result};

/// One decoder training utterance: full mel, its prior (ground-truth or
/// encoder-predicted SIMS), and the audio for conditioning crops.
#[derive(Debug, Clone)]
pub struct DecoderTrainItem {
    pub id: String,
    pub mel: MelSpectrogram,
    pub xbar: Array2<f64>,
    pub audio: Waveform,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Frames per reconstruction crop.
    pub crop_frames: usize,
    /// Cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 100,
            crop_frames: 128,
            max_steps: 0,
        }
    }
}

impl DecoderTrainConfig {
    /// Reference fine-tuning settings (lower rate, fewer epochs).
    pub fn finetune_defaults() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 30,
            ..Default::default()
        }
    }
}

fn crop_frames(
    src: &Array2<f64>,
    start: usize,
    len: usize,
    fill: f64,
) -> Array2<f64> {
    let mut out = Array2::from_elem((len, src.ncols()), fill);
    let avail = src.nrows().saturating_sub(start).min(len);
    out.slice_mut(ndarray::s![..avail, ..])
        .assign(&src.slice(ndarray::s![start..start + avail, ..]));
    out
}

/// The randomness consumed by one loss evaluation. Fixing it makes the loss
/// a deterministic function of the parameters (finite-difference checks).
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub t: f64,
    pub noise: Array2<f64>,
    pub rec_start: usize,
    pub cond_start: usize,
}

impl LossDraw {
    pub fn sample(
        rng: &mut ChaCha12Rng,
        item: &DecoderTrainItem,
        crop: usize,
        cond_frames: usize,
        n_mels: usize,
    ) -> Self {
        let f = item.mel.n_frames();
        let rec_max = f.saturating_sub(crop);
        let cond_max = f.saturating_sub(cond_frames);
        Self {
            t: rng.random_range(T_MIN..1.0),
            noise: Array2::from_shape_fn((crop, n_mels), |_| -> f64 { StandardNormal.sample(rng) }),
            rec_start: if rec_max > 0 { rng.random_range(0..=rec_max) } else { 0 },
            cond_start: if cond_max > 0 { rng.random_range(0..=cond_max) } else { 0 },
        }
    }
}

/// Frames needed so a conditioning crop can always be embedded (>= 0.5 s).
fn cond_crop_frames(item: &DecoderTrainItem, crop: usize) -> usize {
    let hop_samples = item.mel.hop_samples().max(1);
    let min_frames = (0.55 * item.mel.sample_rate_hz as f64 / hop_samples as f64).ceil() as usize;
    crop.max(min_frames)
}

/// Builds the score-matching loss graph for one item and one draw.
/// Returns the scalar loss node.
pub(crate) fn decoder_loss_graph(
    net: &ScoreNetwork,
    fwd: &mut Forward,
    item: &DecoderTrainItem,
    draw: &LossDraw,
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    crop: usize,
) -> Result<NodeId> {
    let floor = item.mel.frames.iter().cloned().fold(f64::INFINITY, f64::min);
    let x0 = crop_frames(&item.mel.frames, draw.rec_start, crop, floor);
    let xbar = crop_frames(&item.xbar, draw.rec_start, crop, floor);

    // conditioning crop from the same utterance, drawn independently
    let cond_len = cond_crop_frames(item, crop);
    let hop = item.mel.hop_samples();
    let s0 = (draw.cond_start * hop).min(item.audio.len().saturating_sub(1));
    let s1 = (s0 + cond_len * hop).min(item.audio.len());
    let cond_audio = Waveform::new(
        item.audio.samples()[s0..s1].to_vec(),
        item.audio.sample_rate_hz(),
    )?;
    let embedding = provider.embed_utterance(&item.id, &cond_audio)?;

    let x_t = forward_sample(&x0, &xbar, draw.t, &draw.noise, schedule)?;
    let sqrt_lambda = schedule.lambda(draw.t)?.sqrt();

    let xt_node = fwd.tape.constant(x_t.into_dimensionality::<IxDyn>().unwrap());
    let xb_node = fwd
        .tape
        .constant(xbar.into_dimensionality::<IxDyn>().unwrap());
    let cond = net.condition_graph(fwd, &embedding.v, draw.t);
    let score = net.score_graph(fwd, xt_node, xb_node, draw.t, cond);

    let scaled = fwd.tape.scale(score, sqrt_lambda);
    let noise_node = fwd
        .tape
        .constant(draw.noise.clone().into_dimensionality::<IxDyn>().unwrap());
    let resid = fwd.tape.add(scaled, noise_node);
    let sq = fwd.tape.mul(resid, resid);
    Ok(fwd.tape.mean_all(sq))
}

/// One stochastic loss evaluation (no gradients), for logging and tests.
pub fn decoder_loss(
    net: &ScoreNetwork,
    item: &DecoderTrainItem,
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    crop: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let cond_len = cond_crop_frames(item, crop);
    let draw = LossDraw::sample(rng, item, crop, cond_len, item.mel.n_mels());
    let mut fwd = Forward::new(&net.params, false);
    let loss = decoder_loss_graph(net, &mut fwd, item, &draw, provider, schedule, crop)?;
    Ok(fwd.tape.scalar(loss))
}

/// Average loss over fixed seeded draws; comparable across checkpoints.
pub fn decoder_eval_loss(
    net: &ScoreNetwork,
    items: &[DecoderTrainItem],
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    crop: usize,
    seed: u64,
    n_draws: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, item) in items.iter().enumerate() {
        for d in 0..n_draws {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                seed,
                &["decoder-eval", &i.to_string(), &d.to_string()],
            ));
            acc += decoder_loss(net, item, provider, schedule, crop, &mut rng)?;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

fn run_training(
    mut net: ScoreNetwork,
    items: &[DecoderTrainItem],
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    tc: &DecoderTrainConfig,
    seed: u64,
    stage: &str,
) -> Result<TrainOutcome<ScoreNetwork>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty decoder corpus".into()));
    }
    let mut adam = Adam::new(tc.learning_rate);
    let mut loss_log = Vec::new();
    let mut last_good = net.params.clone();
    let mut step = 0usize;

    'outer: for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            seed,
            &[stage, "epoch", &epoch.to_string()],
        ));
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size.max(1)) {
            let mut grads = crate::nn::GradMap::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let item = &items[idx];
                let cond_len = cond_crop_frames(item, tc.crop_frames);
                let draw =
                    LossDraw::sample(&mut rng, item, tc.crop_frames, cond_len, item.mel.n_mels());
                let mut fwd = Forward::new(&net.params, true);
                let loss =
                    decoder_loss_graph(&net, &mut fwd, item, &draw, provider, schedule, tc.crop_frames)?;
                batch_loss += fwd.tape.scalar(loss);
                accumulate_grads(&mut grads, fwd.tape.backward(loss));
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                log::error!("{stage} diverged at step {step}; keeping last checkpoint");
                net.params = last_good;
                return Ok(TrainOutcome {
                    model: net,
                    loss_log,
                    diverged_at: Some(step),
                });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adam.step(&mut net.params, &grads);
            loss_log.push(batch_loss);
            step += 1;
            if step % 25 == 0 {
                last_good = net.params.clone();
            }
            if tc.max_steps > 0 && step >= tc.max_steps {
                break 'outer;
            }
        }
        if epoch % 5 == 0 {
            log::info!(
                "{stage} epoch {epoch}: loss {:.6}",
                loss_log.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(TrainOutcome {
        model: net,
        loss_log,
        diverged_at: None,
    })
}

/// Pre-trains the decoder on typical speech (ground-truth SIMS priors).
pub fn train_decoder(
    cfg: super::unet::ScoreNetworkConfig,
    items: &[DecoderTrainItem],
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    tc: &DecoderTrainConfig,
    seed: u64,
) -> Result<TrainOutcome<ScoreNetwork>> {
    let net = ScoreNetwork::new(cfg, derive_seed(seed, &["decoder-init"]))?;
    log::info!(
        "training decoder: {} parameters, {} utterances",
        net.param_count(),
        items.len()
    );
    run_training(net, items, provider, schedule, tc, seed, "decoder-train")
}

/// Fine-tunes a pre-trained decoder on one atypical speaker's data. The
/// result carries the speaker tag; the encoder and SIMS dictionary are not
/// touched.
pub fn finetune_decoder(
    net: &ScoreNetwork,
    speaker_id: &str,
    items: &[DecoderTrainItem],
    provider: &dyn EmbeddingProvider,
    schedule: &NoiseSchedule,
    tc: &DecoderTrainConfig,
    seed: u64,
) -> Result<TrainOutcome<ScoreNetwork>> {
    let clone = ScoreNetwork {
        cfg: net.cfg.clone(),
        params: net.params.clone(),
        speaker_tag: Some(speaker_id.to_string()),
    };
    log::info!("fine-tuning decoder for speaker {speaker_id}: {} utterances", items.len());
    run_training(
        clone,
        items,
        provider,
        schedule,
        tc,
        derive_seed(seed, &["finetune", speaker_id]),
        "decoder-finetune",
    )
}
