//! Time-conditioned Unet that predicts the clean slice directly.
//!
//! Per resolution level: a stack of residual blocks followed by a stride-2
//! convolution (except at the bottom). The decoder mirrors this with 2x2
//! transposed convolutions and concatenates the encoder features of the
//! same resolution. Residual blocks use group norm and SiLU before each
//! convolution, and inject the timestep through scale-shift normalization.

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{silu_backward, Conv2d, GroupNorm, GroupNormCache, Linear, Param, Upsample2x};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Feature channels per resolution level.
    pub channel_dims: Vec<usize>,
    pub residual_blocks_per_level: usize,
    /// Width of the sinusoidal timestep encoding and its projection MLP.
    pub time_embed_dim: usize,
    pub input_channels: usize,
    /// Upper bound; clamped to a divisor of each layer's channel count.
    pub groupnorm_groups: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// Full-scale architecture: channels [128, 128, 256], 3 blocks per level.
    pub fn reference() -> Self {
        Self {
            channel_dims: vec![128, 128, 256],
            residual_blocks_per_level: 3,
            time_embed_dim: 512,
            input_channels: 1,
            groupnorm_groups: 8,
            init_seed: 0,
        }
    }

    /// Same topology at a CPU-friendly width.
    pub fn desk() -> Self {
        Self {
            channel_dims: vec![32, 32, 64],
            time_embed_dim: 128,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_dims.is_empty() || self.channel_dims.contains(&0) {
            return Err(Error::param("channel_dims must be nonempty and positive"));
        }
        if self.residual_blocks_per_level == 0 {
            return Err(Error::param("need at least one residual block per level"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::param("time_embed_dim must be even and positive"));
        }
        if self.input_channels == 0 || self.groupnorm_groups == 0 {
            return Err(Error::param("input_channels and groupnorm_groups must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_dims.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Sinusoidal timestep encoding: `[sin(t / w_i) ..., cos(t / w_i) ...]` with
/// `w_i` geometrically spaced from 1 to 10000.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("embedding dimension {dim} must be even")));
    }
    if t < 0.0 {
        return Err(Error::param("timestep must be nonnegative"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            10000f64.powf(i as f64 / (half - 1) as f64)
        };
        out[i] = (t / omega).sin();
        out[half + i] = (t / omega).cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock<F> {
    norm1: GroupNorm<F>,
    conv1: Conv2d<F>,
    emb_proj: Linear<F>,
    norm2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
    out_channels: usize,
}

struct ResBlockCache<F> {
    x: Array4<F>,
    norm1: GroupNormCache<F>,
    pre1: Array4<F>,
    act1: Array4<F>,
    norm2: GroupNormCache<F>,
    normed2: Array4<F>,
    scale: Array2<F>,
    pre2: Array4<F>,
    act2: Array4<F>,
}

fn silu4<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.mapv(super::layers::silu)
}

impl<F: Real> ResBlock<F> {
    fn new(cin: usize, cout: usize, emb_dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(groups, cin),
            conv1: Conv2d::new(cin, cout, 3, 1, 1, rng),
            emb_proj: Linear::new(emb_dim, 2 * cout, rng),
            norm2: GroupNorm::new(groups, cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, rng)),
            out_channels: cout,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        v.extend(self.norm1.params_mut());
        v.extend(self.conv1.params_mut());
        v.extend(self.emb_proj.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv2.params_mut());
        if let Some(skip) = self.skip.as_mut() {
            v.extend(skip.params_mut());
        }
        v
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = Vec::new();
        v.extend(self.norm1.params());
        v.extend(self.conv1.params());
        v.extend(self.emb_proj.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        if let Some(skip) = self.skip.as_ref() {
            v.extend(skip.params());
        }
        v
    }

    fn forward(&self, x: Array4<F>, emb: &Array2<F>) -> (Array4<F>, ResBlockCache<F>) {
        let c = self.out_channels;
        let (pre1, norm1) = self.norm1.forward(&x);
        let act1 = silu4(&pre1);
        let h = self.conv1.forward(&act1);
        let ss = self.emb_proj.forward(emb);
        let scale = ss.slice(s![.., ..c]).to_owned();
        let shift = ss.slice(s![.., c..]);
        let (normed2, norm2) = self.norm2.forward(&h);
        let mut pre2 = normed2.clone();
        for ((mut item, sc), sh) in pre2
            .outer_iter_mut()
            .zip(scale.outer_iter())
            .zip(shift.outer_iter())
        {
            for ((mut plane, &a), &b) in item.outer_iter_mut().zip(sc.iter()).zip(sh.iter()) {
                plane.mapv_inplace(|v| v * (F::one() + a) + b);
            }
        }
        let act2 = silu4(&pre2);
        let mut out = self.conv2.forward(&act2);
        match &self.skip {
            Some(skip) => out += &skip.forward(&x),
            None => out += &x,
        }
        let cache = ResBlockCache {
            x,
            norm1,
            pre1,
            act1,
            norm2,
            normed2,
            scale,
            pre2,
            act2,
        };
        (out, cache)
    }

    /// Returns dL/dx and accumulates dL/d(emb) into `demb`.
    fn backward(
        &mut self,
        cache: ResBlockCache<F>,
        dout: &Array4<F>,
        emb: &Array2<F>,
        demb: &mut Array2<F>,
    ) -> Array4<F> {
        let c = self.out_channels;
        let mut dact2 = self.conv2.backward(&cache.act2, dout, true).expect("input grad");
        silu_backward(&cache.pre2, &mut dact2);
        let dpre2 = dact2;
        let n = dpre2.dim().0;
        let mut dss = Array2::<F>::zeros((n, 2 * c));
        let mut dnormed2 = dpre2.clone();
        for i in 0..n {
            for ch in 0..c {
                let g = dpre2.slice(s![i, ch, .., ..]);
                let xn = cache.normed2.slice(s![i, ch, .., ..]);
                dss[[i, ch]] = g.iter().zip(xn.iter()).map(|(&a, &b)| a * b).sum();
                dss[[i, c + ch]] = g.sum();
                let factor = F::one() + cache.scale[[i, ch]];
                dnormed2.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v * factor);
            }
        }
        *demb += &self.emb_proj.backward(emb, &dss);
        let dh = self.norm2.backward(&cache.norm2, &dnormed2);
        let mut dact1 = self.conv1.backward(&cache.act1, &dh, true).expect("input grad");
        silu_backward(&cache.pre1, &mut dact1);
        let mut dx = self.norm1.backward(&cache.norm1, &dact1);
        match self.skip.as_mut() {
            Some(skip) => dx += &skip.backward(&cache.x, dout, true).expect("input grad"),
            None => dx += dout,
        }
        dx
    }
}

struct Level<F> {
    blocks: Vec<ResBlock<F>>,
    downsample: Option<Conv2d<F>>,
}

struct UpLevel<F> {
    upsample: Upsample2x<F>,
    blocks: Vec<ResBlock<F>>,
}

/// Intermediate activations kept by [`Unet::forward`] for the backward pass.
pub struct UnetCache<F> {
    sinusoid: Array2<F>,
    time_hidden: Array2<F>,
    time_act: Array2<F>,
    temb: Array2<F>,
    emb: Array2<F>,
    input: Array4<F>,
    down: Vec<(Vec<ResBlockCache<F>>, Option<Array4<F>>)>,
    up: Vec<(Array4<F>, Vec<ResBlockCache<F>>)>,
    norm_out: GroupNormCache<F>,
    pre_out: Array4<F>,
    act_out: Array4<F>,
}

/// The denoising network, generic over its scalar type.
pub struct Unet<F> {
    config: DenoiserConfig,
    time1: Linear<F>,
    time2: Linear<F>,
    conv_in: Conv2d<F>,
    down: Vec<Level<F>>,
    /// Indexed by level; the bottom level has no decoder stage.
    up: Vec<UpLevel<F>>,
    norm_out: GroupNorm<F>,
    conv_out: Conv2d<F>,
    /// Number of optimizer steps applied so far.
    pub training_steps: u64,
}

impl<F: Real> Clone for Unet<F> {
    fn clone(&self) -> Self {
        let mut out = Unet::new(self.config.clone()).expect("validated config");
        out.load_parameters(self.parameters().into_iter().map(|p| p.value.clone()))
            .expect("same architecture");
        out.training_steps = self.training_steps;
        out
    }
}

impl<F: Real> std::fmt::Debug for Unet<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Unet")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .field("training_steps", &self.training_steps)
            .finish()
    }
}

impl<F: Real> Unet<F> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let chans = &config.channel_dims;
        let g = config.groupnorm_groups;
        let ted = config.time_embed_dim;
        let nblocks = config.residual_blocks_per_level;
        let time1 = Linear::new(ted, ted, &mut rng);
        let time2 = Linear::new(ted, ted, &mut rng);
        let conv_in = Conv2d::new(config.input_channels, chans[0], 3, 1, 1, &mut rng);
        let mut down = Vec::new();
        let mut cin = chans[0];
        for (l, &c) in chans.iter().enumerate() {
            let blocks = (0..nblocks)
                .map(|b| ResBlock::new(if b == 0 { cin } else { c }, c, ted, g, &mut rng))
                .collect();
            let downsample = (l + 1 < chans.len()).then(|| Conv2d::new(c, c, 3, 2, 1, &mut rng));
            down.push(Level { blocks, downsample });
            cin = c;
        }
        let mut up = Vec::new();
        for l in 0..chans.len() - 1 {
            let c = chans[l];
            let upsample = Upsample2x::new(chans[l + 1], c, &mut rng);
            let blocks = (0..nblocks)
                .map(|b| ResBlock::new(if b == 0 { 2 * c } else { c }, c, ted, g, &mut rng))
                .collect();
            up.push(UpLevel { upsample, blocks });
        }
        let norm_out = GroupNorm::new(g, chans[0]);
        let conv_out = Conv2d::new(chans[0], config.input_channels, 3, 1, 1, &mut rng).zeroed();
        Ok(Self {
            config,
            time1,
            time2,
            conv_in,
            down,
            up,
            norm_out,
            conv_out,
            training_steps: 0,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// All parameters in a fixed traversal order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        v.extend(self.time1.params_mut());
        v.extend(self.time2.params_mut());
        v.extend(self.conv_in.params_mut());
        for level in &mut self.down {
            for b in &mut level.blocks {
                v.extend(b.params_mut());
            }
            if let Some(d) = level.downsample.as_mut() {
                v.extend(d.params_mut());
            }
        }
        for level in &mut self.up {
            v.extend(level.upsample.params_mut());
            for b in &mut level.blocks {
                v.extend(b.params_mut());
            }
        }
        v.extend(self.norm_out.params_mut());
        v.extend(self.conv_out.params_mut());
        v
    }

    pub fn parameters(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = Vec::new();
        v.extend(self.time1.params());
        v.extend(self.time2.params());
        v.extend(self.conv_in.params());
        for level in &self.down {
            for b in &level.blocks {
                v.extend(b.params());
            }
            if let Some(d) = level.downsample.as_ref() {
                v.extend(d.params());
            }
        }
        for level in &self.up {
            v.extend(level.upsample.params());
            for b in &level.blocks {
                v.extend(b.params());
            }
        }
        v.extend(self.norm_out.params());
        v.extend(self.conv_out.params());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Replaces every parameter value, in [`Self::parameters`] order.
    pub fn load_parameters<I>(&mut self, values: I) -> Result<()>
    where
        I: IntoIterator<Item = ndarray::ArrayD<F>>,
    {
        let mut values = values.into_iter();
        for p in self.parameters_mut() {
            let v = values
                .next()
                .ok_or_else(|| Error::Checkpoint("too few parameter tensors".into()))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match architecture {:?}",
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        if values.next().is_some() {
            return Err(Error::Checkpoint("too many parameter tensors".into()));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Checks an `(N, C, H, W)` input against the architecture.
    pub fn check_input(&self, shape: &[usize], timesteps: usize) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::param(format!("expected (N, C, H, W) input, got {shape:?}")));
        }
        if shape[1] != self.config.input_channels {
            return Err(Error::param(format!(
                "model expects {} channels, got {}",
                self.config.input_channels, shape[1]
            )));
        }
        let m = self.config.size_multiple();
        if shape[2] == 0 || shape[3] == 0 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::param(format!(
                "spatial size {}x{} must be a positive multiple of {m}",
                shape[2], shape[3]
            )));
        }
        if timesteps != shape[0] {
            return Err(Error::param(format!(
                "{} timesteps for a batch of {}",
                timesteps, shape[0]
            )));
        }
        Ok(())
    }

    fn sinusoids(&self, timesteps: &[usize]) -> Array2<F> {
        let dim = self.config.time_embed_dim;
        let mut out = Array2::<F>::zeros((timesteps.len(), dim));
        for (mut row, &t) in out.outer_iter_mut().zip(timesteps) {
            let e = time_embedding(t as f64, dim).expect("validated dimension");
            row.iter_mut().zip(e).for_each(|(d, v)| *d = F::of(v));
        }
        out
    }

    /// Evaluation-mode prediction of the clean batch.
    pub fn predict(&self, x: &Array4<F>, timesteps: &[usize]) -> Result<Array4<F>> {
        self.forward(x, timesteps).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &Array4<F>, timesteps: &[usize]) -> Result<(Array4<F>, UnetCache<F>)> {
        self.check_input(x.shape(), timesteps.len())?;
        let x = x.as_standard_layout().into_owned();
        let sinusoid = self.sinusoids(timesteps);
        let time_hidden = self.time1.forward(&sinusoid);
        let time_act = time_hidden.mapv(super::layers::silu);
        let temb = self.time2.forward(&time_act);
        let emb = temb.mapv(super::layers::silu);

        let mut h = self.conv_in.forward(&x);
        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (out, cache) = b.forward(h, &emb);
                caches.push(cache);
                h = out;
            }
            match &level.downsample {
                Some(d) => {
                    let next = d.forward(&h);
                    skips.push(h.clone());
                    down_caches.push((caches, Some(h)));
                    h = next;
                }
                None => down_caches.push((caches, None)),
            }
        }
        let mut up_caches: Vec<(Array4<F>, Vec<ResBlockCache<F>>)> = Vec::with_capacity(self.up.len());
        for (level, skip) in self.up.iter().zip(skips).rev() {
            let up = level.upsample.forward(&h);
            let mut cur = concatenate(Axis(1), &[up.view(), skip.view()])
                .expect("matching spatial sizes")
                .as_standard_layout()
                .into_owned();
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (out, cache) = b.forward(cur, &emb);
                caches.push(cache);
                cur = out;
            }
            up_caches.push((h, caches));
            h = cur;
        }
        up_caches.reverse();
        let (pre_out, norm_out) = self.norm_out.forward(&h);
        let act_out = silu4(&pre_out);
        let y = self.conv_out.forward(&act_out);
        let cache = UnetCache {
            sinusoid,
            time_hidden,
            time_act,
            temb,
            emb,
            input: x,
            down: down_caches,
            up: up_caches,
            norm_out,
            pre_out,
            act_out,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients of a scalar loss given dL/d(output).
    pub fn backward(&mut self, cache: UnetCache<F>, dy: &Array4<F>) {
        let UnetCache {
            sinusoid,
            time_hidden,
            time_act,
            temb,
            emb,
            input,
            down,
            up,
            norm_out,
            pre_out,
            act_out,
        } = cache;
        let mut demb = Array2::<F>::zeros(emb.raw_dim());
        let mut dact = self.conv_out.backward(&act_out, dy, true).expect("input grad");
        silu_backward(&pre_out, &mut dact);
        let mut dh = self.norm_out.backward(&norm_out, &dact);

        let mut dskips: Vec<Array4<F>> = Vec::with_capacity(self.up.len());
        for (level, (up_input, caches)) in self.up.iter_mut().zip(up) {
            for (b, cache) in level.blocks.iter_mut().zip(caches).rev() {
                dh = b.backward(cache, &dh, &emb, &mut demb);
            }
            let c = level.upsample.bias.value.len();
            let dup = dh.slice(s![.., ..c, .., ..]).as_standard_layout().into_owned();
            dskips.push(dh.slice(s![.., c.., .., ..]).as_standard_layout().into_owned());
            dh = level.upsample.backward(&up_input, &dup);
        }
        for (l, (level, (caches, down_input))) in self.down.iter_mut().zip(down).enumerate().rev() {
            if let (Some(d), Some(x)) = (level.downsample.as_mut(), down_input.as_ref()) {
                dh = d.backward(x, &dh, true).expect("input grad");
                dh += &dskips[l];
            }
            for (b, cache) in level.blocks.iter_mut().zip(caches).rev() {
                dh = b.backward(cache, &dh, &emb, &mut demb);
            }
        }
        self.conv_in.backward(&input, &dh, false);

        let mut dtemb = demb;
        silu_backward(&temb, &mut dtemb);
        let mut dtime_act = self.time2.backward(&time_act, &dtemb);
        silu_backward(&time_hidden, &mut dtime_act);
        self.time1.backward(&sinusoid, &dtime_act);
    }
}
