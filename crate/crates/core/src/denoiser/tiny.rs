//! Small convolutional encoder-decoder with skip connections and a
//! sinusoidal timestep embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, silu, silu_act, silu_backward, silu_grad, upsample2,
    upsample2_backward, Act, Conv2d, Linear,
};
use super::precond::Preconditioner;
use super::Denoiser;
use crate::error::{Error, Result};
use crate::grid::PseudoRealStack;

/// Architecture hyperparameters. `channels[i]` is the width at level `i`;
/// the number of levels is `channels.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyUNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub emb_dim: usize,
    pub hidden_dim: usize,
}

impl TinyUNetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            channels: vec![8, 16, 16, 32],
            emb_dim: 32,
            hidden_dim: 64,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "in_channels must be a positive even number, got {}",
                self.in_channels
            )));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0 || c > 64) {
            return Err(Error::InvalidParameter(format!(
                "channel widths must be in 1..=64, got {:?}",
                self.channels
            )));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter(
                "embedding sizes must be positive and emb_dim even".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub conv_a: Conv2d,
    pub temb: Linear,
    pub conv_b: Conv2d,
}

impl Block {
    fn zeros(cin: usize, cout: usize, hidden: usize) -> Self {
        Self {
            conv_a: Conv2d::zeros(cin, cout),
            temb: Linear::zeros(hidden, cout),
            conv_b: Conv2d::zeros(cout, cout),
        }
    }

    fn init(cin: usize, cout: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_a: Conv2d::init(cin, cout, 1.0, rng),
            temb: Linear::init(hidden, cout, 1.0, rng),
            conv_b: Conv2d::init(cout, cout, 1.0, rng),
        }
    }

    fn forward(&self, x: Act, h_emb: &[f32]) -> (Act, BlockCache) {
        let mut a_pre = self.conv_a.forward(&x);
        let bias = self.temb.forward(h_emb);
        let hw = a_pre.hw();
        for (c, chunk) in a_pre.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        let a_act = silu_act(&a_pre);
        let b_pre = self.conv_b.forward(&a_act);
        let out = silu_act(&b_pre);
        (
            out,
            BlockCache {
                input: x,
                a_pre,
                a_act,
                b_pre,
            },
        )
    }

    /// Returns `dL/dinput`; accumulates `dL/dh_emb` into `dh_emb`.
    fn backward(
        &self,
        cache: &BlockCache,
        dy: &Act,
        h_emb: &[f32],
        grad: &mut Block,
        dh_emb: &mut [f32],
    ) -> Act {
        let db = silu_backward(&cache.b_pre, dy);
        let da_act = self.conv_b.backward(&cache.a_act, &db, &mut grad.conv_b);
        let da = silu_backward(&cache.a_pre, &da_act);
        let hw = da.hw();
        let dbias: Vec<f32> = da.data.chunks(hw).map(|c| c.iter().sum()).collect();
        let dh = self.temb.backward(h_emb, &dbias, &mut grad.temb);
        dh_emb.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
        self.conv_a.backward(&cache.input, &da, &mut grad.conv_a)
    }
}

pub(crate) struct BlockCache {
    input: Act,
    a_pre: Act,
    a_act: Act,
    b_pre: Act,
}

/// Weights of the tiny denoiser together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiserWeights {
    pub(crate) config: TinyUNetConfig,
    pub(crate) time: Linear,
    pub(crate) conv_in: Conv2d,
    pub(crate) enc: Vec<Block>,
    pub(crate) dec: Vec<Block>,
    pub(crate) conv_out: Conv2d,
    pub(crate) precond: Option<Preconditioner>,
}

pub(crate) struct ForwardCache {
    t_emb: Vec<f32>,
    h_pre: Vec<f32>,
    h_emb: Vec<f32>,
    x_in: Act,
    conv_in_out_shape: (usize, usize, usize),
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    out_in: Act,
}

fn sinusoidal(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut e = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin() as f32;
        e[half + i] = arg.cos() as f32;
    }
    e
}

impl TinyDenoiserWeights {
    /// All-zero weights; the network then outputs zeros.
    pub fn zeros(config: TinyUNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let hid = config.hidden_dim;
        let enc = (0..ch.len())
            .map(|i| Block::zeros(if i == 0 { ch[0] } else { ch[i - 1] }, ch[i], hid))
            .collect();
        let dec = (0..ch.len() - 1)
            .map(|i| Block::zeros(ch[i + 1] + ch[i], ch[i], hid))
            .collect();
        Ok(Self {
            time: Linear::zeros(config.emb_dim, hid),
            conv_in: Conv2d::zeros(config.in_channels, ch[0]),
            enc,
            dec,
            conv_out: Conv2d::zeros(ch[0], config.in_channels),
            config,
            precond: None,
        })
    }

    /// Seeded random initialization.
    pub fn init(config: TinyUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels.clone();
        let hid = config.hidden_dim;
        let time = Linear::init(config.emb_dim, hid, 1.0, &mut rng);
        let conv_in = Conv2d::init(config.in_channels, ch[0], 1.0, &mut rng);
        let enc = (0..ch.len())
            .map(|i| Block::init(if i == 0 { ch[0] } else { ch[i - 1] }, ch[i], hid, &mut rng))
            .collect();
        let dec = (0..ch.len() - 1)
            .map(|i| Block::init(ch[i + 1] + ch[i], ch[i], hid, &mut rng))
            .collect();
        let conv_out = Conv2d::init(ch[0], config.in_channels, 0.1, &mut rng);
        Ok(Self {
            config,
            time,
            conv_in,
            enc,
            dec,
            conv_out,
            precond: None,
        })
    }

    pub fn config(&self) -> &TinyUNetConfig {
        &self.config
    }

    pub fn preconditioner(&self) -> Option<&Preconditioner> {
        self.precond.as_ref()
    }

    /// Wraps the network: `eps = lin * u + c_out * f(c_in * u, t)` with
    /// `u = x_t - sqrt(alpha_bar) * mean`.
    pub fn with_preconditioner(mut self, p: Preconditioner) -> Self {
        self.precond = Some(p);
        self
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// Named parameter tensors in a fixed order.
    pub(crate) fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.weight"), vec![l.dout, l.din], &l.weight[..]));
            out.push((format!("{name}.bias"), vec![l.dout], &l.bias[..]));
        }
        fn conv<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, name: &str, c: &'a Conv2d) {
            out.push((format!("{name}.weight"), vec![c.cout, c.cin, 3, 3], &c.weight[..]));
            out.push((format!("{name}.bias"), vec![c.cout], &c.bias[..]));
        }
        lin(&mut out, "time", &self.time);
        conv(&mut out, "conv_in", &self.conv_in);
        for (prefix, blocks) in [("enc", &self.enc), ("dec", &self.dec)] {
            for (i, b) in blocks.iter().enumerate() {
                conv(&mut out, &format!("{prefix}{i}.conv_a"), &b.conv_a);
                lin(&mut out, &format!("{prefix}{i}.temb"), &b.temb);
                conv(&mut out, &format!("{prefix}{i}.conv_b"), &b.conv_b);
            }
        }
        conv(&mut out, "conv_out", &self.conv_out);
        out
    }

    /// Mutable parameter buffers in the same order as [`Self::tensors`].
    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.time.weight, &mut self.time.bias];
        out.push(&mut self.conv_in.weight);
        out.push(&mut self.conv_in.bias);
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            out.push(&mut b.conv_a.weight);
            out.push(&mut b.conv_a.bias);
            out.push(&mut b.temb.weight);
            out.push(&mut b.temb.bias);
            out.push(&mut b.conv_b.weight);
            out.push(&mut b.conv_b.bias);
        }
        out.push(&mut self.conv_out.weight);
        out.push(&mut self.conv_out.bias);
        out
    }

    fn check_input(&self, x: &Act) -> Result<()> {
        let m = self.config.spatial_multiple();
        if x.c != self.config.in_channels || x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "tiny denoiser expects {} channels and sides divisible by {m}, got {}x{}x{}",
                self.config.in_channels, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x: Act, t: usize) -> Result<(Act, ForwardCache)> {
        self.check_input(&x)?;
        let t_emb = sinusoidal(t, self.config.emb_dim);
        let h_pre = self.time.forward(&t_emb);
        let h_emb: Vec<f32> = h_pre.iter().map(|&v| silu(v)).collect();

        let levels = self.config.levels();
        let mut h = self.conv_in.forward(&x);
        let conv_in_out_shape = (h.c, h.h, h.w);
        let mut skips = Vec::with_capacity(levels);
        let mut enc_caches = Vec::with_capacity(levels);
        for (i, block) in self.enc.iter().enumerate() {
            let (out, cache) = block.forward(h, &h_emb);
            enc_caches.push(cache);
            h = if i + 1 < levels { avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let mut dec_caches: Vec<BlockCache> = Vec::with_capacity(levels - 1);
        for i in (0..levels - 1).rev() {
            let up = upsample2(&h);
            let cat = Act::concat(&up, &skips[i]);
            let (out, cache) = self.dec[i].forward(cat, &h_emb);
            dec_caches.push(cache);
            h = out;
        }
        dec_caches.reverse();
        let y = self.conv_out.forward(&h);
        Ok((
            y,
            ForwardCache {
                t_emb,
                h_pre,
                h_emb,
                x_in: x,
                conv_in_out_shape,
                enc: enc_caches,
                dec: dec_caches,
                out_in: h,
            },
        ))
    }

    /// Accumulates the gradient of `<dy, f(x)>` into `grad`.
    pub(crate) fn backward(&self, cache: &ForwardCache, dy: &Act, grad: &mut TinyDenoiserWeights) {
        let levels = self.config.levels();
        let mut dh_emb = vec![0.0f32; self.config.hidden_dim];
        let mut dh = self.conv_out.backward(&cache.out_in, dy, &mut grad.conv_out);
        let mut dskips: Vec<Option<Act>> = vec![None; levels];
        for i in 0..levels - 1 {
            let dcat = self.dec[i].backward(
                &cache.dec[i],
                &dh,
                &cache.h_emb,
                &mut grad.dec[i],
                &mut dh_emb,
            );
            let up_c = self.config.channels[i + 1];
            let (dup, dskip) = dcat.split(up_c);
            dskips[i] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        // dh now holds the gradient at the bottleneck output.
        for i in (0..levels).rev() {
            let mut dout = if i + 1 < levels {
                avg_pool2_backward(&dh)
            } else {
                dh.clone()
            };
            if let Some(ds) = &dskips[i] {
                dout.add_assign(ds);
            }
            dh = self.enc[i].backward(
                &cache.enc[i],
                &dout,
                &cache.h_emb,
                &mut grad.enc[i],
                &mut dh_emb,
            );
        }
        debug_assert_eq!((dh.c, dh.h, dh.w), cache.conv_in_out_shape);
        self.conv_in.backward(&cache.x_in, &dh, &mut grad.conv_in);
        let dpre: Vec<f32> = dh_emb
            .iter()
            .zip(&cache.h_pre)
            .map(|(g, &p)| g * silu_grad(p))
            .collect();
        self.time.backward(&cache.t_emb, &dpre, &mut grad.time);
    }

    /// Noise prediction for a pseudo-real stack, preconditioned if a
    /// preconditioner is attached.
    pub fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        let (c, h, w) = x_t.shape();
        let act = |data| Act { c, h, w, data };
        let out = match &self.precond {
            None => {
                let (y, _) = self.forward(act(x_t.data().iter().map(|&v| v as f32).collect()), t)?;
                y.data
            }
            Some(p) => {
                let k = p.coeffs(t)?;
                let u: Vec<f32> = x_t.data().iter().map(|&v| v as f32 - k.sa * p.mean).collect();
                let (y, _) = self.forward(act(u.iter().map(|v| v * k.c_in).collect()), t)?;
                u.iter().zip(&y.data).map(|(u, f)| k.lin * u + k.c_out * f).collect()
            }
        };
        PseudoRealStack::from_vec(c, h, w, out.into_iter().map(f64::from).collect())
    }
}

/// Forward pass of the tiny network.
pub fn tiny_denoiser_eps(
    w: &TinyDenoiserWeights,
    x_t: &PseudoRealStack,
    t: usize,
) -> Result<PseudoRealStack> {
    w.eps(x_t, t)
}

/// [`Denoiser`] adapter over trained weights.
#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    weights: TinyDenoiserWeights,
}

impl TinyDenoiser {
    pub fn new(weights: TinyDenoiserWeights) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &TinyDenoiserWeights {
        &self.weights
    }
}

impl Denoiser for TinyDenoiser {
    fn eps(&self, x_t: &PseudoRealStack, t: usize) -> Result<PseudoRealStack> {
        self.weights.eps(x_t, t)
    }
}
