//! The conditional score network: a U-Net over (channel, mel, frame) images
//! with sinusoidal diffusion-time embedding and broadcast speaker channels.
//!
//! Input channels are `[x_t, xbar, speaker condition x cond_channels]`; the
//! output is a single channel estimating the score at `x_t`.

use ndarray::{Array1, Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nn::{sinusoidal_embedding, Forward, NodeId, ParamInit, ParamStore};
use crate::speaker::SpeakerEmbedding;
use crate::{Error, Result};

/// U-Net widths and conditioning dimensions. Four feature-map resolutions by
/// default; tests shrink `base_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreNetworkConfig {
    pub n_mels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Broadcast speaker-condition channels (and conditioner output dim).
    pub cond_channels: usize,
    /// Dimension of the speaker embedding fed to the conditioner.
    pub spk_embedding_dim: usize,
    pub time_pe_dim: usize,
    pub spk_pe_dim: usize,
    pub norm_groups: usize,
}

impl Default for ScoreNetworkConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 8],
            cond_channels: 128,
            spk_embedding_dim: 256,
            time_pe_dim: 64,
            spk_pe_dim: 64,
            norm_groups: 8,
        }
    }
}

impl ScoreNetworkConfig {
    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults cannot be empty".into()));
        }
        if self.time_pe_dim % 2 != 0 || self.spk_pe_dim % 2 != 0 {
            return Err(Error::Config("positional embedding dims must be even".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Total input channels: x_t, xbar, and the broadcast condition.
    pub fn in_channels(&self) -> usize {
        2 + self.cond_channels
    }
}

/// Largest divisor of `c` that is at most `groups`.
fn groups_for(groups: usize, c: usize) -> usize {
    let mut g = groups.min(c);
    while c % g != 0 {
        g -= 1;
    }
    g.max(1)
}

pub struct ScoreNetwork {
    pub cfg: ScoreNetworkConfig,
    pub params: ParamStore,
    /// Set once the network has been fine-tuned to one target speaker.
    pub speaker_tag: Option<String>,
}

impl ScoreNetwork {
    pub fn new(cfg: ScoreNetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let n_stages = widths.len();
        let time_dim = cfg.time_dim();
        let mut params = ParamStore::new();
        let mut init = ParamInit::new(&mut params, seed);

        init.linear("spkcond.l1", cfg.spk_embedding_dim + cfg.spk_pe_dim, 256);
        init.linear("spkcond.l2", 256, cfg.cond_channels);
        init.linear("temb.l1", cfg.time_pe_dim, time_dim);
        init.linear("temb.l2", time_dim, time_dim);
        init.conv2d("in.conv", widths[0], cfg.in_channels(), 3);

        let res = |init: &mut ParamInit, name: &str, c_in: usize, c_out: usize| {
            init.norm(&format!("{name}.gn1"), c_in);
            init.conv2d(&format!("{name}.conv1"), c_out, c_in, 3);
            init.linear(&format!("{name}.temb"), time_dim, c_out);
            init.norm(&format!("{name}.gn2"), c_out);
            init.conv2d(&format!("{name}.conv2"), c_out, c_out, 3);
            if c_in != c_out {
                init.conv2d(&format!("{name}.skip"), c_out, c_in, 1);
            }
        };

        let mut c_prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            res(&mut init, &format!("down{i}"), c_prev, w);
            if i + 1 < n_stages {
                init.conv2d(&format!("ds{i}"), w, w, 3);
            }
            c_prev = w;
        }
        let deepest = *widths.last().unwrap();
        res(&mut init, "mid0", deepest, deepest);
        res(&mut init, "mid1", deepest, deepest);

        let mut c_cur = deepest;
        for i in (0..n_stages - 1).rev() {
            init.conv2d(&format!("us{i}"), c_cur, c_cur, 3);
            res(&mut init, &format!("up{i}"), c_cur + widths[i], widths[i]);
            c_cur = widths[i];
        }
        init.norm("out.gn", widths[0]);
        init.conv2d("out.conv", 1, widths[0], 3);

        Ok(Self {
            cfg,
            params,
            speaker_tag: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn res_block(
        &self,
        fwd: &mut Forward,
        name: &str,
        x: NodeId,
        temb: NodeId,
        c_in: usize,
        c_out: usize,
    ) -> NodeId {
        let g1 = groups_for(self.cfg.norm_groups, c_in);
        let g2 = groups_for(self.cfg.norm_groups, c_out);
        let h = fwd.group_norm(&format!("{name}.gn1"), x, g1);
        let h = fwd.tape.silu(h);
        let h = fwd.conv2d(&format!("{name}.conv1"), h, 1, 1);
        let ta = fwd.tape.silu(temb);
        let tb = fwd.linear(&format!("{name}.temb"), ta); // (1, c_out)
        let tb = fwd.tape.reshape(tb, &[c_out]);
        let h = fwd.tape.add_bias_channels(h, tb);
        let h = fwd.group_norm(&format!("{name}.gn2"), h, g2);
        let h = fwd.tape.silu(h);
        let h = fwd.conv2d(&format!("{name}.conv2"), h, 1, 1);
        let skip = if c_in != c_out {
            fwd.conv2d(&format!("{name}.skip"), x, 0, 1)
        } else {
            x
        };
        fwd.tape.add(h, skip)
    }

    /// Speaker-condition graph: `MLP([e ; PE(t)])`, GELU in between.
    pub(crate) fn condition_graph(&self, fwd: &mut Forward, e: &Array1<f64>, t: f64) -> NodeId {
        let pe = sinusoidal_embedding(t * 1000.0, self.cfg.spk_pe_dim);
        let mut row = Vec::with_capacity(e.len() + pe.len());
        row.extend(e.iter().copied());
        row.extend(pe.iter().copied());
        let n = row.len();
        let input = fwd.tape.constant(
            Array2::from_shape_vec((1, n), row).unwrap().into_dyn(),
        );
        let h = fwd.linear("spkcond.l1", input);
        let h = fwd.tape.gelu(h);
        fwd.linear("spkcond.l2", h) // (1, cond_channels)
    }

    /// The full score graph. `x_t` and `xbar` are (F, n_mels) constants;
    /// `cond` is a (1, cond_channels) node. Returns an (F, n_mels) node.
    pub(crate) fn score_graph(
        &self,
        fwd: &mut Forward,
        x_t: NodeId,
        xbar: NodeId,
        t: f64,
        cond: NodeId,
    ) -> NodeId {
        let shape = fwd.tape.shape(x_t).to_vec();
        let (f, n_mels) = (shape[0], shape[1]);
        let widths = self.cfg.widths();
        let n_stages = widths.len();

        // image layout: (1, n_mels, F) per signal channel
        let xt_img = {
            let tr = fwd.tape.transpose(x_t);
            fwd.tape.reshape(tr, &[1, n_mels, f])
        };
        let xb_img = {
            let tr = fwd.tape.transpose(xbar);
            fwd.tape.reshape(tr, &[1, n_mels, f])
        };
        // broadcast condition: outer product of ones (n_mels*F, 1) with c (1, cond)
        let ones = fwd
            .tape
            .constant(ndarray::Array2::from_elem((n_mels * f, 1), 1.0).into_dyn());
        let spread = fwd.tape.matmul(ones, cond); // (n_mels*F, cond)
        let spread_t = fwd.tape.transpose(spread); // (cond, n_mels*F)
        let cond_img = fwd
            .tape
            .reshape(spread_t, &[self.cfg.cond_channels, n_mels, f]);
        let sig = fwd.tape.concat_channels(xt_img, xb_img);
        let x = fwd.tape.concat_channels(sig, cond_img);

        // diffusion-time embedding
        let pe = sinusoidal_embedding(t * 1000.0, self.cfg.time_pe_dim);
        let pe_node = fwd.tape.constant(
            Array2::from_shape_vec((1, self.cfg.time_pe_dim), pe.to_vec())
                .unwrap()
                .into_dyn(),
        );
        let temb = fwd.linear("temb.l1", pe_node);
        let temb = fwd.tape.silu(temb);
        let temb = fwd.linear("temb.l2", temb); // (1, time_dim)

        let mut h = fwd.conv2d("in.conv", x, 1, 1);
        let mut c_prev = widths[0];
        let mut skips: Vec<(NodeId, usize, usize, usize)> = Vec::new(); // (node, ch, h, w)
        for (i, &w) in widths.iter().enumerate() {
            h = self.res_block(fwd, &format!("down{i}"), h, temb, c_prev, w);
            if i + 1 < n_stages {
                let s = fwd.tape.shape(h).to_vec();
                skips.push((h, w, s[1], s[2]));
                h = fwd.conv2d(&format!("ds{i}"), h, 1, 2);
            }
            c_prev = w;
        }
        let deepest = *widths.last().unwrap();
        h = self.res_block(fwd, "mid0", h, temb, deepest, deepest);
        h = self.res_block(fwd, "mid1", h, temb, deepest, deepest);

        let mut c_cur = deepest;
        for i in (0..n_stages - 1).rev() {
            let (skip, skip_c, skip_h, skip_w) = skips.pop().expect("skip per stage");
            h = fwd.tape.upsample2x(h);
            h = fwd.conv2d(&format!("us{i}"), h, 1, 1);
            h = fwd.tape.crop_hw(h, skip_h, skip_w);
            h = fwd.tape.concat_channels(h, skip);
            h = self.res_block(fwd, &format!("up{i}"), h, temb, c_cur + skip_c, widths[i]);
            c_cur = widths[i];
        }
        let g = groups_for(self.cfg.norm_groups, widths[0]);
        h = fwd.group_norm("out.gn", h, g);
        h = fwd.tape.silu(h);
        h = fwd.conv2d("out.conv", h, 1, 1); // (1, n_mels, F)
        let flat = fwd.tape.reshape(h, &[n_mels, f]);
        fwd.tape.transpose(flat) // (F, n_mels)
    }
}

/// Evaluates the speaker conditioner: a `cond_channels` vector per
/// (embedding, diffusion time) pair. Deterministic.
pub fn build_speaker_condition(
    net: &ScoreNetwork,
    e: &SpeakerEmbedding,
    t: f64,
) -> Result<Array1<f64>> {
    if e.dim() != net.cfg.spk_embedding_dim {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match conditioner input {}",
            e.dim(),
            net.cfg.spk_embedding_dim
        )));
    }
    let mut fwd = Forward::new(&net.params, false);
    let c = net.condition_graph(&mut fwd, &e.v, t);
    let v = fwd.tape.value(c).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    Ok(v.row(0).to_owned())
}

/// Deterministic score estimate for a padded input (F must be a multiple of
/// 4; the caller pads and trims).
pub fn score_forward(
    net: &ScoreNetwork,
    x_t: &Array2<f64>,
    xbar: &Array2<f64>,
    t: f64,
    cond: &Array1<f64>,
) -> Result<Array2<f64>> {
    if x_t.nrows() % 4 != 0 {
        return Err(Error::Shape(format!(
            "frame count {} is not a multiple of 4; pad before scoring",
            x_t.nrows()
        )));
    }
    if x_t.dim() != xbar.dim() {
        return Err(Error::Shape("x_t and xbar shapes differ".into()));
    }
    if cond.len() != net.cfg.cond_channels {
        return Err(Error::Shape(format!(
            "condition has {} channels, network expects {}",
            cond.len(),
            net.cfg.cond_channels
        )));
    }
    let mut fwd = Forward::new(&net.params, false);
    let xt_node = fwd.tape.constant(x_t.clone().into_dimensionality::<IxDyn>().unwrap());
    let xb_node = fwd.tape.constant(xbar.clone().into_dimensionality::<IxDyn>().unwrap());
    let cond_node = fwd.tape.constant(
        Array2::from_shape_vec((1, cond.len()), cond.to_vec())
            .unwrap()
            .into_dyn(),
    );
    let out = net.score_graph(&mut fwd, xt_node, xb_node, t, cond_node);
    let v = fwd
        .tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Audio("score network produced non-finite output".into()));
    }
    Ok(v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn tiny_cfg() -> ScoreNetworkConfig {
        ScoreNetworkConfig {
            n_mels: 8,
            base_channels: 4,
            channel_mults: vec![1, 2, 4, 8],
            cond_channels: 6,
            spk_embedding_dim: 10,
            time_pe_dim: 8,
            spk_pe_dim: 8,
            norm_groups: 4,
        }
    }

    fn rand_mat(f: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((f, n), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_emb(dim: usize, seed: u64) -> SpeakerEmbedding {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        SpeakerEmbedding::new(
            Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn shapes_follow_input() {
        let net = ScoreNetwork::new(tiny_cfg(), 1).unwrap();
        let e = rand_emb(10, 2);
        for f in [4usize, 12, 32] {
            let x = rand_mat(f, 8, f as u64);
            let xb = rand_mat(f, 8, f as u64 + 100);
            let c = build_speaker_condition(&net, &e, 0.5).unwrap();
            let s = score_forward(&net, &x, &xb, 0.5, &c).unwrap();
            assert_eq!(s.dim(), (f, 8));
        }
    }

    #[test]
    fn f_not_multiple_of_4_rejected() {
        let net = ScoreNetwork::new(tiny_cfg(), 1).unwrap();
        let e = rand_emb(10, 3);
        let c = build_speaker_condition(&net, &e, 0.5).unwrap();
        let x = rand_mat(6, 8, 1);
        assert!(score_forward(&net, &x, &x, 0.5, &c).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = ScoreNetwork::new(tiny_cfg(), 5).unwrap();
        let e = rand_emb(10, 6);
        let x = rand_mat(8, 8, 7);
        let xb = rand_mat(8, 8, 8);
        let c = build_speaker_condition(&net, &e, 0.3).unwrap();
        let a = score_forward(&net, &x, &xb, 0.3, &c).unwrap();
        let b = score_forward(&net, &x, &xb, 0.3, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_shape_and_determinism() {
        let net = ScoreNetwork::new(tiny_cfg(), 9).unwrap();
        let e = rand_emb(10, 10);
        let a = build_speaker_condition(&net, &e, 0.7).unwrap();
        let b = build_speaker_condition(&net, &e, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        // default config emits exactly 128 dims
        let default_net = ScoreNetwork::new(
            ScoreNetworkConfig {
                base_channels: 4,
                n_mels: 8,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let e256 = rand_emb(256, 11);
        let c = build_speaker_condition(&default_net, &e256, 0.2).unwrap();
        assert_eq!(c.len(), 128);
    }

    #[test]
    fn distinct_embeddings_give_distinct_conditions() {
        let net = ScoreNetwork::new(tiny_cfg(), 12).unwrap();
        let a = build_speaker_condition(&net, &rand_emb(10, 13), 0.5).unwrap();
        let b = build_speaker_condition(&net, &rand_emb(10, 14), 0.5).unwrap();
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
        // so do distinct times
        let c = build_speaker_condition(&net, &rand_emb(10, 13), 0.9).unwrap();
        let dt: f64 = a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(dt > 1e-9);
    }

    #[test]
    fn wrong_embedding_dim_rejected() {
        let net = ScoreNetwork::new(tiny_cfg(), 15).unwrap();
        let e = rand_emb(11, 16);
        assert!(build_speaker_condition(&net, &e, 0.5).is_err());
    }
}
