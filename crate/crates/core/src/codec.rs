//! Latent encoder/decoder pair. Identity mode works in pixel space; learned mode
//! is a per-frame convolutional autoencoder with 2x spatial downsampling.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::TrainLogLine;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{he_normal, Bound, ParamStore};
use crate::rng::derived_rng;
use crate::tensor::Tensor;
use crate::video::Video;

/// Diffusion-state tensor `[frames, channels, height, width]`.
pub type LatentVideo = Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub mode: CodecMode,
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub step: u64,
    #[serde(skip)]
    pub store: ParamStore,
}

impl CodecParams {
    pub fn identity(channels: usize) -> Self {
        CodecParams {
            mode: CodecMode::Identity,
            factor: 1,
            latent_channels: channels,
            hidden: 0,
            step: 0,
            store: ParamStore::new(),
        }
    }

    /// Untrained learned codec: `unshuffle2 → conv3x3 → SiLU → conv3x3` down, and the mirror image up.
    pub fn learned(channels: usize, latent_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, "codec/init", 0);
        let mut s = ParamStore::new();
        let c4 = channels * 4;
        s.insert("enc/c1/w", he_normal(&mut rng, vec![hidden, c4, 3, 3], c4 * 9, 1.0));
        s.insert("enc/c1/b", Tensor::zeros(vec![hidden]));
        s.insert("enc/c2/w", he_normal(&mut rng, vec![latent_channels, hidden, 3, 3], hidden * 9, 0.5));
        s.insert("enc/c2/b", Tensor::zeros(vec![latent_channels]));
        s.insert("dec/c1/w", he_normal(&mut rng, vec![hidden, latent_channels, 3, 3], latent_channels * 9, 1.0));
        s.insert("dec/c1/b", Tensor::zeros(vec![hidden]));
        s.insert("dec/c2/w", he_normal(&mut rng, vec![hidden, hidden, 3, 3], hidden * 9, 1.0));
        s.insert("dec/c2/b", Tensor::zeros(vec![hidden]));
        s.insert("dec/c3/w", he_normal(&mut rng, vec![c4, hidden, 3, 3], hidden * 9, 0.5));
        s.insert("dec/c3/b", Tensor::zeros(vec![c4]));
        CodecParams { mode: CodecMode::Learned, factor: 2, latent_channels, hidden, step: 0, store: s }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Latent shape for a `[n, c, h, w]` video.
    pub fn latent_dims(&self, dims: [usize; 4]) -> Result<[usize; 4]> {
        let [n, _, h, w] = dims;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by codec factor {}", self.factor)));
        }
        Ok([n, self.latent_channels, h / self.factor, w / self.factor])
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        match self.mode {
            CodecMode::Identity => x,
            CodecMode::Learned => {
                let u = g.pixel_unshuffle(x, 2);
                let h = g.conv2d(u, b.get("enc/c1/w"), Some(b.get("enc/c1/b")));
                let h = g.silu(h);
                g.conv2d(h, b.get("enc/c2/w"), Some(b.get("enc/c2/b")))
            }
        }
    }

    /// Identity mode clamps to `[0, 1]`; learned mode ends in a sigmoid.
    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Var {
        match self.mode {
            CodecMode::Identity => g.clamp01(z),
            CodecMode::Learned => {
                let h = g.conv2d(z, b.get("dec/c1/w"), Some(b.get("dec/c1/b")));
                let h = g.silu(h);
                let h = g.conv2d(h, b.get("dec/c2/w"), Some(b.get("dec/c2/b")));
                let h = g.silu(h);
                let o = g.conv2d(h, b.get("dec/c3/w"), Some(b.get("dec/c3/b")));
                let o = g.pixel_shuffle(o, 2);
                g.sigmoid(o)
            }
        }
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentVideo> {
        self.latent_dims(x.dims4())?;
        if self.mode == CodecMode::Identity {
            return Ok(x.clone());
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &b, xv);
        Ok(g.value(z).clone())
    }

    pub fn encode(&self, x: &Video) -> Result<LatentVideo> {
        self.encode_tensor(&x.to_tensor())
    }

    /// Decoded pixels as a tensor (no rounding to `f32`).
    pub fn decode_tensor(&self, z: &LatentVideo) -> Result<Tensor> {
        let [_, c, _, _] = z.dims4();
        if c != self.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.latent_channels)));
        }
        if !z.is_finite() {
            return Err(Error::Numerical("non-finite latent".into()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, &b, zv);
        Ok(g.value(x).clone())
    }

    pub fn decode(&self, z: &LatentVideo) -> Result<Video> {
        let t = self.decode_tensor(z)?;
        let [n, c, h, w] = t.dims4();
        Video::from_f64_clamped(n, c, h, w, t.data())
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let mut s = self.store.clone();
        s.insert("meta/step", Tensor::scalar(self.step as f64));
        s.save(&stem.with_extension("btfw"))?;
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let mut p: CodecParams = serde_json::from_str(&text)?;
        let mut store = ParamStore::load(&stem.with_extension("btfw"))?;
        if let Some(step) = store.remove("meta/step") {
            p.step = step.item() as u64;
        }
        p.store = store;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub mode: CodecMode,
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Clips per minibatch; every frame of a clip is used.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig { mode: CodecMode::Learned, latent_channels: 4, hidden: 32, epochs: 6, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

/// Mean-squared reconstruction error of `decode(encode(x))` over a set of clips.
pub fn reconstruction_mse(codec: &CodecParams, data: &[(Video, usize)]) -> Result<f64> {
    let per: Vec<(f64, usize)> = data
        .par_iter()
        .map(|(v, _)| {
            let x = v.to_tensor();
            let r = codec.decode_tensor(&codec.encode_tensor(&x)?)?;
            let se: f64 = x.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((se, x.len()))
        })
        .collect::<Result<_>>()?;
    let (se, n) = per.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(se / n as f64)
}

/// Trains the learned autoencoder on mean-squared reconstruction. Identity mode returns at once.
pub fn train_codec(
    data: &[(Video, usize)],
    cfg: &CodecTrainConfig,
    log: &mut dyn FnMut(&TrainLogLine),
) -> Result<CodecParams> {
    let channels = data.first().map(|(v, _)| v.channels()).ok_or_else(|| Error::Empty("training set".into()))?;
    if cfg.mode == CodecMode::Identity {
        return Ok(CodecParams::identity(channels));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut codec = CodecParams::learned(channels, cfg.latent_channels, cfg.hidden, cfg.seed);
    let sizes: Vec<usize> = codec.store.iter().map(|(_, t)| t.len()).collect();
    let decay: Vec<bool> = codec.store.iter().map(|(n, _)| n.ends_with("/w")).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() }, &sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, "codec/shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let per: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let b = codec.bind(&mut g, true);
                    let x = g.constant(data[i].0.to_tensor());
                    let z = codec.encode_graph(&mut g, &b, x);
                    let r = codec.decode_graph(&mut g, &b, z);
                    let l = g.mse_mean(r, x);
                    let mut grads = g.backward(l);
                    let gs = b.vars().map(|(_, v)| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()])).collect();
                    (g.value(l).item(), gs)
                })
                .collect();
            let inv = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (l, gs) in per {
                total += l;
                for (a, g) in acc.iter_mut().zip(gs) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            }
            if !total.is_finite() {
                return Err(Error::Diverged { step: codec.step as usize, loss: total });
            }
            loss_sum += total;
            let refs: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut [f64]> = codec.store.tensors_mut().map(Tensor::data_mut).collect();
            opt.step(&mut ps, &refs, &decay);
            codec.step += 1;
        }
        log(&TrainLogLine { epoch, split: "train".into(), loss: loss_sum / data.len() as f64, accuracy: f64::NAN });
    }
    codec.store.round_to_f32();
    Ok(codec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip_and_zero_latent() {
        let c = CodecParams::identity(3);
        assert_eq!(c.num_params(), 0);
        let x = Video::new(2, 3, 2, 2, (0..24).map(|i| i as f32 / 23.0).collect()).unwrap();
        let z = c.encode(&x).unwrap();
        assert_eq!(z.data(), x.to_tensor().data());
        assert_eq!(c.decode(&z).unwrap(), x);
        let zero = Tensor::zeros(vec![2, 3, 2, 2]);
        assert!(c.decode(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learned_shapes() {
        let c = CodecParams::learned(3, 4, 8, 1);
        assert_eq!(c.latent_dims([8, 3, 32, 32]).unwrap(), [8, 4, 16, 16]);
        assert!(c.latent_dims([8, 3, 31, 32]).is_err());
        let x = Video::filled(2, 3, 8, 8, 0.5).unwrap();
        let z = c.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 4]);
        assert_eq!(z, c.encode(&x).unwrap());
        let y = c.decode(&z).unwrap();
        assert_eq!(y.dims(), [2, 3, 8, 8]);
    }
}
