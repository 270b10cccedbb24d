//! Reverse-SDE sampling: Euler-Maruyama backwards from the data-dependent
//! prior `N(xbar, I)` to a mel-spectrogram.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::unet::{build_speaker_condition, score_forward, ScoreNetwork};
use super::{NoiseSchedule, T_MIN};
use crate::speaker::SpeakerEmbedding;
use crate::{Error, Result};

/// Runs the reverse SDE with an arbitrary score estimator.
///
/// Starting from `X ~ N(xbar, I)`, each of the `n_steps` Euler steps at time
/// `t` (from 1 down to `T_MIN` in steps of `1/n_steps`) applies
///
/// `X <- X - h beta(t) (1/2 (xbar - X) - score(X, t)) + sqrt(beta(t) h) xi`.
///
/// `inject_noise = false` drops the `xi` term (deterministic drift only).
pub fn reverse_sde_with_score<F>(
    mut score: F,
    xbar: &Array2<f64>,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
    inject_noise: bool,
) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("sampler needs n_steps >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = xbar.dim();
    let draw = |rng: &mut ChaCha12Rng| {
        Array2::from_shape_fn(dim, |_| -> f64 { StandardNormal.sample(rng) })
    };

    // prior draw with unit variance
    let mut x = xbar + &draw(&mut rng);
    let h = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = (1.0 - k as f64 * h).max(T_MIN);
        let beta = schedule.beta(t);
        let s = score(&x, t)?;
        if s.dim() != dim {
            return Err(Error::Shape("score estimate has wrong shape".into()));
        }
        let drift = (&(xbar - &x) * 0.5 - &s) * (h * beta);
        x = &x - &drift;
        if inject_noise {
            x = &x + &(draw(&mut rng) * (beta * h).sqrt());
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k, t });
        }
    }
    Ok(x)
}

/// Samples a mel matrix from the trained score network under a speaker
/// condition. `xbar` must already be padded to a multiple of 4 frames; the
/// output has the same shape (trim with the recorded original frame count).
pub fn reverse_sde_sample(
    net: &ScoreNetwork,
    xbar: &Array2<f64>,
    embedding: &SpeakerEmbedding,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if xbar.nrows() % 4 != 0 {
        return Err(Error::Shape(format!(
            "prior has {} frames; pad to a multiple of 4 first",
            xbar.nrows()
        )));
    }
    reverse_sde_with_score(
        |x, t| {
            let cond = build_speaker_condition(net, embedding, t)?;
            score_forward(net, x, xbar, t, &cond)
        },
        xbar,
        schedule,
        n_steps,
        seed,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;

    #[test]
    fn single_step_zero_score_zero_noise_is_one_euler_step() {
        let xbar = ndarray::array![[0.5, -0.5]];
        let s = NoiseSchedule::default();
        let out = reverse_sde_with_score(
            |_, _| Ok(Array2::zeros((1, 2))),
            &xbar,
            &s,
            1,
            7,
            false,
        )
        .unwrap();
        // reproduce by hand: x0 = xbar + z; x1 = x0 - h beta(1) (xbar - x0)/2
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z = Array2::from_shape_fn((1, 2), |_| -> f64 {
            StandardNormal.sample(&mut rng)
        });
        let x0 = &xbar + &z;
        let beta = s.beta(1.0);
        let want = &x0 - &((&xbar - &x0) * 0.5 * beta);
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_oracle_recovers_data_moments() {
        // 1-d data N(2, 0.25), prior xbar = 0, analytic marginal score
        let s = NoiseSchedule::default();
        let mu0 = 2.0;
        let var0 = 0.25;
        let xbar_scalar = 0.0;
        let n = 10_000usize;
        let xbar = Array2::from_elem((n, 1), xbar_scalar);
        let out = reverse_sde_with_score(
            |x, t| {
                let mc = s.mean_coeff(t)?;
                let lam = s.lambda(t)?;
                let mean_t = xbar_scalar + (mu0 - xbar_scalar) * mc;
                let var_t = var0 * mc * mc + lam;
                Ok(x.mapv(|v| -(v - mean_t) / var_t))
            },
            &xbar,
            &s,
            100,
            42,
            true,
        )
        .unwrap();
        let mean = out.sum() / n as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu0).abs() < 0.05, "mean {mean}");
        assert!((var - var0).abs() / var0 < 0.10, "var {var}");
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let cfg = crate::diffusion::unet::tests::tiny_cfg();
        let net = ScoreNetwork::new(cfg, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let xbar = Array2::from_shape_fn((8, 8), |_| rng.random_range(-2.0..0.0));
        let e = crate::speaker::SpeakerEmbedding::new(
            Array1::from_shape_fn(10, |_| rng.random_range(-1.0..1.0)),
            None,
        )
        .unwrap();
        let s = NoiseSchedule::default();
        let a = reverse_sde_sample(&net, &xbar, &e, &s, 5, 99).unwrap();
        let b = reverse_sde_sample(&net, &xbar, &e, &s, 5, 99).unwrap();
        assert_eq!(a, b);
        let c = reverse_sde_sample(&net, &xbar, &e, &s, 5, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unpadded_prior_rejected() {
        let cfg = crate::diffusion::unet::tests::tiny_cfg();
        let net = ScoreNetwork::new(cfg, 3).unwrap();
        let xbar = Array2::zeros((6, 8));
        let e = crate::speaker::SpeakerEmbedding::new(Array1::ones(10), None).unwrap();
        assert!(reverse_sde_sample(&net, &xbar, &e, &NoiseSchedule::default(), 2, 0).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let xbar = Array2::zeros((1, 1));
        let r = reverse_sde_with_score(
            |_, _| Ok(Array2::zeros((1, 1))),
            &xbar,
            &NoiseSchedule::default(),
            0,
            0,
            true,
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_score_reports_step() {
        let xbar = Array2::zeros((1, 1));
        let r = reverse_sde_with_score(
            |_, _| Ok(Array2::from_elem((1, 1), f64::NAN)),
            &xbar,
            &NoiseSchedule::default(),
            4,
            0,
            false,
        );
        match r {
            Err(Error::NonFiniteState { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }

    #[test]
    fn doubling_steps_keeps_oracle_mean_within_mc_error() {
        let s = NoiseSchedule::default();
        let mu0 = 1.0;
        let var0 = 0.09;
        let n = 10_000usize;
        let xbar = Array2::zeros((n, 1));
        let run = |steps: usize| {
            let out = reverse_sde_with_score(
                |x, t| {
                    let mc = s.mean_coeff(t)?;
                    let lam = s.lambda(t)?;
                    let mean_t = mu0 * mc;
                    let var_t = var0 * mc * mc + lam;
                    Ok(x.mapv(|v| -(v - mean_t) / var_t))
                },
                &xbar,
                &s,
                steps,
                7,
                true,
            )
            .unwrap();
            out.sum() / n as f64
        };
        let m100 = run(100);
        let m200 = run(200);
        let mc_se = (1.0f64 / n as f64).sqrt(); // generous bound on vars here
        assert!(
            (m100 - m200).abs() < mc_se * 3.0,
            "means {m100} vs {m200} differ beyond MC error"
        );
    }
}
