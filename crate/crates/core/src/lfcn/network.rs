//! Encoder, lyncean head (decreasing 7/5/3 kernels), learnable bilinear
//! upsampling and the logistic output, with a full manual backward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::rng_from;
use crate::scalar::Scalar;

use super::ops::{
    bilinear_kernel, conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, sigmoid, upsample_geometry,
};
use super::tensor::Tensor;

/// RGB plus the positive and negative click maps.
pub const INPUT_CHANNELS: usize = 5;
const RGB_CHANNELS: usize = 3;

/// Output-stride variant; finer networks are initialised from coarser ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Score map at the encoder's terminal stride (8 with three pooling blocks).
    Coarse,
    /// Adds one skip fusion from the previous block, halving the output stride.
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl EncoderBlock {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            pool: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub encoder: Vec<EncoderBlock>,
    pub head_kernels: Vec<usize>,
    pub head_channels: usize,
    pub granularity: Granularity,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: INPUT_CHANNELS,
            encoder: vec![EncoderBlock::new(16), EncoderBlock::new(32), EncoderBlock::new(64)],
            head_kernels: vec![7, 5, 3],
            head_channels: 32,
            granularity: Granularity::Fine,
        }
    }
}

impl NetworkConfig {
    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_channels != INPUT_CHANNELS {
            return bad(format!(
                "input must have {INPUT_CHANNELS} channels, got {}",
                self.input_channels
            ));
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one block".into());
        }
        for b in &self.encoder {
            if b.out_channels == 0 || b.kernel % 2 == 0 || b.stride != 1 || !b.pool {
                return bad(format!(
                    "encoder blocks must be odd-kernel, stride-1 convolutions followed by pooling: {b:?}"
                ));
            }
        }
        if self.head_kernels.is_empty() || self.head_kernels.iter().any(|k| k % 2 == 0) {
            return bad("head kernels must be odd".into());
        }
        if self.head_kernels.windows(2).any(|w| w[0] <= w[1]) {
            return bad("head kernels must be strictly decreasing".into());
        }
        if self.head_channels == 0 {
            return bad("head needs at least one channel".into());
        }
        if self.granularity == Granularity::Fine && self.encoder.len() < 2 {
            return bad("fine granularity needs two encoder blocks".into());
        }
        upsample_geometry(self.output_stride())?;
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << self.encoder.len()
    }

    pub fn output_stride(&self) -> usize {
        match self.granularity {
            Granularity::Coarse => self.input_multiple(),
            Granularity::Fine => self.input_multiple() / 2,
        }
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = self.input_channels;
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((
                format!("enc{}.weight", i + 1),
                vec![b.out_channels, in_ch, b.kernel, b.kernel],
            ));
            out.push((format!("enc{}.bias", i + 1), vec![b.out_channels]));
            in_ch = b.out_channels;
        }
        for (j, &k) in self.head_kernels.iter().enumerate() {
            out.push((format!("head{}.weight", j + 1), vec![self.head_channels, in_ch, k, k]));
            out.push((format!("head{}.bias", j + 1), vec![self.head_channels]));
            in_ch = self.head_channels;
        }
        for j in 0..self.head_kernels.len() {
            out.push((format!("proj{}.weight", j + 1), vec![1, self.head_channels, 1, 1]));
            out.push((format!("proj{}.bias", j + 1), vec![1]));
        }
        if self.granularity == Granularity::Fine {
            let skip_ch = self.encoder[self.encoder.len() - 2].out_channels;
            out.push(("skip.weight".into(), vec![1, skip_ch, 1, 1]));
            out.push(("skip.bias".into(), vec![1]));
            let (k, _, _) = upsample_geometry(2).expect("factor 2 is supported");
            out.push(("up2.weight".into(), vec![1, 1, k, k]));
        }
        let (k, _, _) = upsample_geometry(self.output_stride()).expect("validated");
        out.push(("up.weight".into(), vec![1, 1, k, k]));
        out
    }
}

/// True for the layers appended after the encoder (they train at a boosted rate).
pub fn is_head_parameter(name: &str) -> bool {
    name.starts_with("head") || name.starts_with("proj")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
}

/// Gradients aligned index-for-index with [`Network::params`].
pub type Gradients<T> = Vec<Tensor<T>>;

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    enc_inputs: Vec<Tensor<T>>,
    enc_pre: Vec<Tensor<T>>,
    enc_argmax: Vec<Vec<usize>>,
    enc_outputs: Vec<Tensor<T>>,
    head_inputs: Vec<Tensor<T>>,
    head_pre: Vec<Tensor<T>>,
    head_outputs: Vec<Tensor<T>>,
    score: Tensor<T>,
    fused: Option<Tensor<T>>,
    pub logits: Tensor<T>,
    pub prob: Tensor<T>,
}

impl<T: Scalar> Network<T> {
    pub(crate) fn from_parts(config: NetworkConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn granularity(&self) -> Granularity {
        self.config.granularity
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("layout always contains {name}"))
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index(name)].value
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (c, h, w) = input.dims3()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "network takes {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = self.config.input_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {w}x{h} is not a multiple of {m} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Probability map `(1, H, W)`; see [`Network::forward_cached`].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(input)?.prob)
    }

    /// Runs the whole pipeline and keeps every intermediate for [`Network::backward`].
    ///
    /// Probabilities are clamped to `[ε, 1 − ε]` with ε the scalar's machine
    /// epsilon so they stay strictly inside the unit interval.
    pub fn forward_cached(&self, input: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(input)?;
        let cfg = &self.config;
        let mut enc_inputs = Vec::new();
        let mut enc_pre = Vec::new();
        let mut enc_argmax = Vec::new();
        let mut enc_outputs = Vec::new();
        let mut x = input.clone();
        for (i, b) in cfg.encoder.iter().enumerate() {
            let pre = conv2d_forward(
                &x,
                self.p(&format!("enc{}.weight", i + 1)),
                Some(self.p(&format!("enc{}.bias", i + 1))),
                1,
                b.kernel / 2,
            )?;
            let pooled = maxpool2x2_forward(&relu_forward(&pre))?;
            enc_inputs.push(x);
            enc_pre.push(pre);
            enc_argmax.push(pooled.argmax);
            x = pooled.output.clone();
            enc_outputs.push(pooled.output);
        }

        let mut head_inputs = Vec::new();
        let mut head_pre = Vec::new();
        let mut head_outputs = Vec::new();
        let mut score: Option<Tensor<T>> = None;
        for (j, &k) in cfg.head_kernels.iter().enumerate() {
            let pre = conv2d_forward(
                &x,
                self.p(&format!("head{}.weight", j + 1)),
                Some(self.p(&format!("head{}.bias", j + 1))),
                1,
                k / 2,
            )?;
            let act = relu_forward(&pre);
            let proj = conv2d_forward(
                &act,
                self.p(&format!("proj{}.weight", j + 1)),
                Some(self.p(&format!("proj{}.bias", j + 1))),
                1,
                0,
            )?;
            match score.as_mut() {
                Some(s) => s.add_assign(&proj)?,
                None => score = Some(proj),
            }
            head_inputs.push(std::mem::replace(&mut x, act.clone()));
            head_pre.push(pre);
            head_outputs.push(act);
        }
        let score = score.expect("head has at least one layer");

        let (_, stride, pad) = upsample_geometry(cfg.output_stride())?;
        let (fused, logits) = match cfg.granularity {
            Granularity::Coarse => (
                None,
                conv_transpose2d_forward(&score, self.p("up.weight"), stride, pad)?,
            ),
            Granularity::Fine => {
                let (_, s2, p2) = upsample_geometry(2)?;
                let mut fused = conv_transpose2d_forward(&score, self.p("up2.weight"), s2, p2)?;
                let skip_src = &enc_outputs[enc_outputs.len() - 2];
                fused.add_assign(&conv2d_forward(
                    skip_src,
                    self.p("skip.weight"),
                    Some(self.p("skip.bias")),
                    1,
                    0,
                )?)?;
                let logits = conv_transpose2d_forward(&fused, self.p("up.weight"), stride, pad)?;
                (Some(fused), logits)
            }
        };
        let eps = T::epsilon();
        let prob = logits.map(|z| sigmoid(z).max(eps).min(T::one() - eps));
        Ok(ForwardCache {
            enc_inputs,
            enc_pre,
            enc_argmax,
            enc_outputs,
            head_inputs,
            head_pre,
            head_outputs,
            score,
            fused,
            logits,
            prob,
        })
    }

    /// Back-propagates a gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::Shape("logit gradient shape mismatch".into()));
        }
        let cfg = &self.config;
        let mut grads: Gradients<T> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let idx = |n: &str| self.index(n);

        let (_, stride, pad) = upsample_geometry(cfg.output_stride())?;
        let mut skip_grad: Option<Tensor<T>> = None;
        let d_score = match cfg.granularity {
            Granularity::Coarse => {
                let (ds, dk) = conv_transpose2d_backward(&cache.score, self.p("up.weight"), grad_logits, stride, pad)?;
                grads[idx("up.weight")] = dk;
                ds
            }
            Granularity::Fine => {
                let fused = cache.fused.as_ref().expect("fine pass caches the fused map");
                let (d_fused, dk) = conv_transpose2d_backward(fused, self.p("up.weight"), grad_logits, stride, pad)?;
                grads[idx("up.weight")] = dk;
                let skip_src = &cache.enc_outputs[cache.enc_outputs.len() - 2];
                let sg = conv2d_backward(skip_src, self.p("skip.weight"), &d_fused, 1, 0)?;
                grads[idx("skip.weight")] = sg.kernel;
                grads[idx("skip.bias")] = sg.bias;
                skip_grad = Some(sg.input);
                let (_, s2, p2) = upsample_geometry(2)?;
                let (ds, dk2) = conv_transpose2d_backward(&cache.score, self.p("up2.weight"), &d_fused, s2, p2)?;
                grads[idx("up2.weight")] = dk2;
                ds
            }
        };

        // Head: every layer's activation feeds its own projection and the next layer.
        let n_head = cfg.head_kernels.len();
        let mut d_act_next: Option<Tensor<T>> = None;
        for j in (0..n_head).rev() {
            let wname = format!("proj{}.weight", j + 1);
            let pg = conv2d_backward(&cache.head_outputs[j], self.p(&wname), &d_score, 1, 0)?;
            grads[idx(&wname)] = pg.kernel;
            grads[idx(&format!("proj{}.bias", j + 1))] = pg.bias;
            let mut d_act = pg.input;
            if let Some(d) = d_act_next.take() {
                d_act.add_assign(&d)?;
            }
            let d_pre = relu_backward(&cache.head_pre[j], &d_act)?;
            let hname = format!("head{}.weight", j + 1);
            let hg = conv2d_backward(
                &cache.head_inputs[j],
                self.p(&hname),
                &d_pre,
                1,
                cfg.head_kernels[j] / 2,
            )?;
            grads[idx(&hname)] = hg.kernel;
            grads[idx(&format!("head{}.bias", j + 1))] = hg.bias;
            d_act_next = Some(hg.input);
        }

        let mut d_x = d_act_next.expect("head has at least one layer");
        let n_enc = cfg.encoder.len();
        for i in (0..n_enc).rev() {
            if i + 2 == n_enc {
                if let Some(sg) = skip_grad.take() {
                    d_x.add_assign(&sg)?;
                }
            }
            let d_relu = maxpool2x2_backward(cache.enc_pre[i].shape(), &cache.enc_argmax[i], &d_x)?;
            let d_pre = relu_backward(&cache.enc_pre[i], &d_relu)?;
            let wname = format!("enc{}.weight", i + 1);
            let g = conv2d_backward(
                &cache.enc_inputs[i],
                self.p(&wname),
                &d_pre,
                1,
                cfg.encoder[i].kernel / 2,
            )?;
            grads[idx(&wname)] = g.kernel;
            grads[idx(&format!("enc{}.bias", i + 1))] = g.bias;
            d_x = g.input;
        }
        Ok(grads)
    }
}

fn he_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

/// Fresh parameters, optionally seeded from a coarser network.
///
/// The first convolution's RGB slices are He-normal; its click-map slices are
/// exactly zero. Encoder and head kernels are He-normal, biases zero, the
/// 1×1 score projections and skip layer zero, and upsampling kernels bilinear.
/// With `from_coarse`, every parameter whose name and shape both match is copied.
pub fn init_network<T: Scalar>(
    config: NetworkConfig,
    rng_seed: u64,
    from_coarse: Option<&Network<T>>,
) -> Result<Network<T>> {
    config.validate()?;
    if let Some(c) = from_coarse {
        if c.config.encoder != config.encoder
            || c.config.head_kernels != config.head_kernels
            || c.config.head_channels != config.head_channels
            || c.config.output_stride() < config.output_stride()
        {
            return Err(Error::Checkpoint(
                "coarse network is incompatible with the requested architecture".into(),
            ));
        }
    }
    let mut rng = rng_from(rng_seed);
    let mut params = Vec::new();
    for (name, shape) in config.parameter_layout() {
        let value = if name == "enc1.weight" {
            let (o, i, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
            let rgb = he_normal::<T>(&mut rng, &[o, RGB_CHANNELS, kh, kw], RGB_CHANNELS * kh * kw);
            let mut t = Tensor::zeros(&shape);
            let plane = kh * kw;
            for oc in 0..o {
                let src = &rgb.data()[oc * RGB_CHANNELS * plane..(oc + 1) * RGB_CHANNELS * plane];
                t.data_mut()[oc * i * plane..oc * i * plane + RGB_CHANNELS * plane].copy_from_slice(src);
            }
            t
        } else if name.starts_with("up") {
            let k = shape[2];
            let factor = if name == "up2.weight" {
                2
            } else {
                config.output_stride()
            };
            let b = bilinear_kernel::<T>(1, factor)?;
            debug_assert_eq!(b.shape()[2], k);
            b
        } else if name.ends_with(".bias") || name.starts_with("proj") || name.starts_with("skip") {
            Tensor::zeros(&shape)
        } else {
            let fan_in = shape[1..].iter().product();
            he_normal(&mut rng, &shape, fan_in)
        };
        params.push(Param { name, value });
    }
    if let Some(coarse) = from_coarse {
        for p in &mut params {
            if let Some(src) = coarse.param(&p.name) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                }
            }
        }
    }
    Network::from_parts(config, params)
}
