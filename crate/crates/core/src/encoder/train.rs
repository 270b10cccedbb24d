//! Encoder training loop: Adam over the summed three-part loss.

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{EncoderConfig, EncoderModel};
use crate::align::PhonemeId;
use crate::audio::MelSpectrogram;
use crate::nn::{accumulate_grads, scale_grads, Adam, Forward, NodeId};
use crate::seeds::derive_seed;
use crate::Result;

/// One training utterance with its alignment-derived targets.
#[derive(Debug, Clone)]
pub struct EncoderTrainItem {
    pub mel: MelSpectrogram,
    /// Ground-truth SIMS frames, same shape as `mel.frames`.
    pub gt_sims: ndarray::Array2<f64>,
    pub labels: Vec<PhonemeId>,
    /// Per-frame log duration (seconds) of the owning phoneme.
    pub log_dur: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cap on optimizer steps; handy for smoke tests. 0 means no cap.
    pub max_steps: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 128,
            epochs: 200,
            max_steps: 0,
        }
    }
}

/// A finished (or aborted) training run. `diverged_at` reports the step where
/// a non-finite loss appeared; the model is then the last good snapshot.
pub struct TrainOutcome<M> {
    pub model: M,
    pub loss_log: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Builds the scalar training loss for one item on a forward tape.
pub(crate) fn encoder_loss_graph(
    model: &EncoderModel,
    fwd: &mut Forward,
    item: &EncoderTrainItem,
    silence: PhonemeId,
) -> NodeId {
    let f = item.mel.n_frames();
    let mel = fwd
        .tape
        .constant(item.mel.frames.clone().into_dimensionality::<IxDyn>().unwrap());
    let (sims, logits, log_dur) = model.forward_graph(fwd, mel);

    let gt = fwd
        .tape
        .constant(item.gt_sims.clone().into_dimensionality::<IxDyn>().unwrap());
    let diff = fwd.tape.sub(sims, gt);
    let sq = fwd.tape.mul(diff, diff);
    let l_sims = fwd.tape.mean_all(sq);

    let targets: Vec<usize> = item.labels.iter().map(|p| p.0).collect();
    let l_phon = fwd.tape.cross_entropy_mean(logits, &targets);

    let mask_vec: Vec<f64> = item
        .labels
        .iter()
        .map(|&p| if p == silence { 0.0 } else { 1.0 })
        .collect();
    let n_voiced = mask_vec.iter().sum::<f64>();
    let mask = fwd.tape.constant(
        ndarray::Array2::from_shape_vec((f, 1), mask_vec)
            .unwrap()
            .into_dyn(),
    );
    let gt_dur = fwd.tape.constant(
        ndarray::Array2::from_shape_vec((f, 1), item.log_dur.clone())
            .unwrap()
            .into_dyn(),
    );
    let ddiff = fwd.tape.sub(log_dur, gt_dur);
    let dsq = fwd.tape.mul(ddiff, ddiff);
    let dmasked = fwd.tape.mul(dsq, mask);
    let dsum = fwd.tape.sum_all(dmasked);
    let l_dur = fwd.tape.scale(dsum, 1.0 / n_voiced.max(1.0));

    let wp = fwd.tape.scale(l_phon, model.cfg.lambda_phoneme);
    let wd = fwd.tape.scale(l_dur, model.cfg.lambda_duration);
    let partial = fwd.tape.add(l_sims, wp);
    fwd.tape.add(partial, wd)
}

/// Trains an encoder from scratch on typical-speech items.
pub fn train_encoder(
    cfg: EncoderConfig,
    items: &[EncoderTrainItem],
    train: &EncoderTrainConfig,
    seed: u64,
) -> Result<TrainOutcome<EncoderModel>> {
    let mut model = EncoderModel::new(cfg, derive_seed(seed, &["encoder-init"]))?;
    log::info!(
        "training encoder: {} parameters, {} utterances",
        model.param_count(),
        items.len()
    );
    let silence = PhonemeId(0);
    let mut adam = Adam::new(train.learning_rate);
    let mut loss_log = Vec::new();
    let mut last_good = model.params.clone();
    let mut step = 0usize;

    'outer: for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(seed, &["encoder-epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);

        for batch in order.chunks(train.batch_size.max(1)) {
            let mut grads = crate::nn::GradMap::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let mut fwd = Forward::new(&model.params, true);
                let loss = encoder_loss_graph(&model, &mut fwd, &items[idx], silence);
                batch_loss += fwd.tape.scalar(loss);
                accumulate_grads(&mut grads, fwd.tape.backward(loss));
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                log::error!("encoder training diverged at step {step}; keeping last checkpoint");
                model.params = last_good;
                return Ok(TrainOutcome {
                    model,
                    loss_log,
                    diverged_at: Some(step),
                });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads);
            loss_log.push(batch_loss);
            step += 1;
            if step % 25 == 0 {
                last_good = model.params.clone();
            }
            if train.max_steps > 0 && step >= train.max_steps {
                break 'outer;
            }
        }
        if epoch % 10 == 0 {
            log::info!(
                "epoch {epoch}: loss {:.6}",
                loss_log.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(TrainOutcome {
        model,
        loss_log,
        diverged_at: None,
    })
}
