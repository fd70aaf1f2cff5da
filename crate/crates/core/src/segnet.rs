//! Small mirrored encoder-decoder segmentation network.
//!
//! Encoder level `l` has `base * 2^l` channels (two 3x3 conv + ReLU, then
//! 2x2 max-pool). The bottleneck repeats the deepest width. Each decoder
//! level upsamples (nearest), convolves down to the skip width, concatenates
//! the skip and fuses with another 3x3 conv. A 1x1 head produces the logits.

use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::alignment::FeatureStack;
use crate::autodiff::{Graph, Var};
use crate::error::{config_err, usage, Result};
use crate::math;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Feature tap used by the alignment losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Tap {
    /// Bottleneck.
    #[default]
    A,
    /// Output of the middle encoder level.
    B,
    /// Both of the above.
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TapLayer {
    Bottleneck,
    Middle,
}

impl Tap {
    pub fn layers(self) -> &'static [TapLayer] {
        match self {
            Tap::A => &[TapLayer::Bottleneck],
            Tap::B => &[TapLayer::Middle],
            Tap::C => &[TapLayer::Bottleneck, TapLayer::Middle],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub image_size: usize,
    pub tap: Tap,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { in_channels: 1, classes: 2, levels: 3, base_channels: 8, image_size: 32, tap: Tap::A, seed: 0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.levels == 0 || self.classes < 2 {
            return Err(config_err!("degenerate network config {:?}", self));
        }
        let stride = 1usize.checked_shl(self.levels as u32).unwrap_or(0);
        if stride == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(config_err!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.levels
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Encoder level whose output is tap B.
    pub fn middle_level(&self) -> usize {
        self.levels / 2
    }

    /// `[C, H, W]` of a tap for a single sample.
    pub fn tap_shape(&self, layer: TapLayer) -> [usize; 3] {
        match layer {
            TapLayer::Bottleneck => {
                let s = self.image_size >> self.levels;
                [self.bottleneck_channels(), s, s]
            }
            TapLayer::Middle => {
                let l = self.middle_level();
                let s = self.image_size >> l;
                [self.channels(l), s, s]
            }
        }
    }

    /// `(out, in, k)` of every conv, in parameter order (each followed by its bias).
    pub fn conv_layout(&self) -> Vec<(usize, usize, usize)> {
        let mut layout = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            let c = self.channels(l);
            layout.push((c, cin, 3));
            layout.push((c, c, 3));
            cin = c;
        }
        let cb = self.bottleneck_channels();
        layout.push((cb, cin, 3));
        layout.push((cb, cb, 3));
        let mut prev = cb;
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            layout.push((c, prev, 3));
            layout.push((c, 2 * c, 3));
            prev = c;
        }
        layout.push((self.classes, prev, 1));
        layout
    }
}

/// Network parameters: conv kernels `[out, in, k, k]` each followed by a bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: NetConfig,
    params: Vec<Tensor>,
}

/// Forward pass result with plain values.
#[derive(Debug, Clone)]
pub struct SegOutput {
    pub logits: Tensor,
    pub taps: Vec<(TapLayer, FeatureStack)>,
}

/// Graph handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegVars {
    pub logits: Var,
    pub bottleneck: Var,
    pub middle: Var,
}

impl SegVars {
    pub fn tap(&self, layer: TapLayer) -> Var {
        match layer {
            TapLayer::Bottleneck => self.bottleneck,
            TapLayer::Middle => self.middle,
        }
    }
}

impl SegNet {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`) from the init stream, zero biases.
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let mut params = Vec::new();
        for (out, cin, k) in config.conv_layout() {
            let fan_in = (cin * k * k) as f64;
            let normal = Normal::new(0.0, math::sqrt(2.0 / fan_in)).expect("positive std");
            params.push(Tensor::from_fn(&[out, cin, k, k], |_| normal.sample(&mut rng)));
            params.push(Tensor::zeros(&[out]));
        }
        Ok(SegNet { config, params })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .conv_layout()
            .into_iter()
            .flat_map(|(out, cin, k)| [Tensor::zeros(&[out, cin, k, k]), Tensor::zeros(&[out])])
            .collect();
        Ok(SegNet { config, params })
    }

    /// Rebuild from a parameter list, checking every shape.
    pub fn from_params(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::zeros(config)?;
        if params.len() != template.params.len()
            || params.iter().zip(&template.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(usage!("parameter list does not match the network layout"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(crate::Error::NonFinite("network parameters"));
        }
        Ok(SegNet { config: template.config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Put every parameter on the graph; `trainable = false` registers constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Forward pass over registered parameters. `images` is `[N, in, H, W]`.
    pub fn forward_var(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<SegVars> {
        let cfg = &self.config;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4
            || shape[1] != cfg.in_channels
            || shape[2] != cfg.image_size
            || shape[3] != cfg.image_size
        {
            return Err(usage!(
                "expected [N, {}, {}, {}] images, got {:?}",
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size,
                shape
            ));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter layout");
        let mut conv = |g: &mut Graph, x: Var, relu: bool| -> Result<Var> {
            let k = next();
            let b = next();
            let pad = g.shape(k)[2] / 2;
            let y = g.conv2d(x, k, 1, pad)?;
            let ys = g.shape(y).to_vec();
            let b = g.reshape(b, &[1, ys[1], 1, 1])?;
            let b = g.expand(b, &ys)?;
            let y = g.add(y, b)?;
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut x = images;
        let mut skips = Vec::with_capacity(cfg.levels);
        for _ in 0..cfg.levels {
            x = conv(g, x, true)?;
            x = conv(g, x, true)?;
            skips.push(x);
            x = g.maxpool2d(x, 2)?;
        }
        x = conv(g, x, true)?;
        let bottleneck = conv(g, x, true)?;
        x = bottleneck;
        for skip in skips.iter().rev() {
            x = g.upsample_nearest(x, 2)?;
            x = conv(g, x, true)?;
            x = g.concat(&[x, *skip], 1)?;
            x = conv(g, x, true)?;
        }
        let logits = conv(g, x, false)?;
        Ok(SegVars { logits, bottleneck, middle: skips[cfg.middle_level()] })
    }

    /// Value-only forward pass; `images` is `[N, in, H, W]`.
    pub fn forward(&self, images: &Tensor) -> Result<SegOutput> {
        forward_values(self, images)
    }

    /// Deep copy frozen for teacher use.
    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot(self.clone())
    }
}

fn forward_values(net: &SegNet, images: &Tensor) -> Result<SegOutput> {
    let mut g = Graph::new();
    let params = net.register(&mut g, false)?;
    let x = g.constant(images.clone())?;
    let vars = net.forward_var(&mut g, &params, x)?;
    let taps = net
        .config
        .tap
        .layers()
        .iter()
        .map(|&l| Ok((l, FeatureStack::new(g.value(vars.tap(l)).clone())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegOutput { logits: g.value(vars.logits).clone(), taps })
}

/// Frozen parameter set with forward-only access.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot(SegNet);

impl TeacherSnapshot {
    pub fn forward(&self, images: &Tensor) -> Result<SegOutput> {
        forward_values(&self.0, images)
    }

    /// Forward on a shared graph with the parameters as constants.
    pub fn forward_var(&self, g: &mut Graph, images: Var) -> Result<SegVars> {
        let params = self.0.register(g, false)?;
        self.0.forward_var(g, &params, images)
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        self.clone()
    }

    pub fn params(&self) -> &[Tensor] {
        self.0.params()
    }

    pub fn config(&self) -> &NetConfig {
        self.0.config()
    }
}

/// Class probabilities `[N, C, H, W]` from logits (softmax over axis 1).
pub fn probabilities(logits: &Tensor) -> Tensor {
    crate::autodiff::softmax_raw(logits, 1)
}

/// Images `[N, H, W]` or `[H, W]` values as an `[N, 1, H, W]` batch.
pub fn batch_images(images: &[&[f64]], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for im in images {
        data.extend_from_slice(im);
    }
    Tensor::new(&[images.len(), 1, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::replay::seg_ce_loss_var;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, size, size], |_| rng.random_range(0.0..1.0))
    }

    fn expected_param_count(cfg: &NetConfig) -> usize {
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let mut n = 0;
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            let c = cfg.base_channels * (1 << l);
            n += conv(c, cin, 3) + conv(c, c, 3);
            cin = c;
        }
        n += 2 * conv(cin, cin, 3);
        let mut prev = cin;
        for l in (0..cfg.levels).rev() {
            let c = cfg.base_channels * (1 << l);
            n += conv(c, prev, 3) + conv(c, 2 * c, 3);
            prev = c;
        }
        n + conv(cfg.classes, prev, 1)
    }

    #[test]
    fn init_is_deterministic() {
        let a = SegNet::init(NetConfig::default()).unwrap();
        let b = SegNet::init(NetConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = SegNet::init(NetConfig { seed: 1, ..NetConfig::default() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn channel_ladder_and_param_count() {
        let cfg = NetConfig::default();
        assert_eq!((0..3).map(|l| cfg.channels(l)).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert_eq!(cfg.bottleneck_channels(), 32);
        let net = SegNet::init(cfg.clone()).unwrap();
        // encoder 80+584 | 1168+2320 | 4640+9248, bottleneck 2*9248,
        // decoder 9248+18464 | 4624+4624 | 1160+1160, head 18
        assert_eq!(net.param_count(), 75_834);
        assert_eq!(expected_param_count(&cfg), 75_834);
    }

    #[test]
    fn divisibility_is_checked() {
        let cfg = NetConfig { image_size: 20, ..NetConfig::default() };
        assert!(matches!(SegNet::init(cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn forward_shapes() {
        let net = SegNet::init(NetConfig { tap: Tap::C, ..NetConfig::default() }).unwrap();
        let out = net.forward(&random_images(1, 32, 0)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 32, 32]);
        assert_eq!(out.taps[0].0, TapLayer::Bottleneck);
        assert_eq!(out.taps[0].1.as_tensor().shape(), &[1, 32, 4, 4]);
        assert_eq!(out.taps[1].1.as_tensor().shape(), &[1, 16, 16, 16]);
        assert!(net.forward(&random_images(1, 16, 0)).is_err());
    }

    #[test]
    fn full_scale_bottleneck() {
        let cfg = NetConfig { levels: 4, base_channels: 16, image_size: 192, ..NetConfig::default() };
        assert_eq!(cfg.tap_shape(TapLayer::Bottleneck), [128, 12, 12]);
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let net = SegNet::zeros(NetConfig { image_size: 16, levels: 2, ..NetConfig::default() }).unwrap();
        let out = net.forward(&random_images(2, 16, 1)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert!(probabilities(&out.logits).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let net = SegNet::init(NetConfig { image_size: 16, levels: 2, ..NetConfig::default() }).unwrap();
        let p = probabilities(&net.forward(&random_images(2, 16, 2)).unwrap().logits);
        let hw = 256;
        for n in 0..2 {
            for i in 0..hw {
                let s = p.data()[n * 2 * hw + i] + p.data()[n * 2 * hw + hw + i];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn snapshot_is_isolated_and_exact() {
        let cfg = NetConfig { image_size: 16, levels: 2, ..NetConfig::default() };
        let mut net = SegNet::init(cfg).unwrap();
        let teacher = net.snapshot();
        let again = teacher.snapshot();
        for s in 0..10 {
            let x = random_images(1, 16, 100 + s);
            let a = net.forward(&x).unwrap().logits;
            assert_eq!(a, teacher.forward(&x).unwrap().logits);
            assert_eq!(a, again.forward(&x).unwrap().logits);
        }
        let x = random_images(1, 16, 7);
        let before = teacher.forward(&x).unwrap().logits;
        net.params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(teacher.forward(&x).unwrap().logits, before);
        assert_ne!(net.forward(&x).unwrap().logits, before);
    }

    #[test]
    fn seg_loss_through_network_matches_finite_differences() {
        let cfg = NetConfig { image_size: 8, levels: 2, base_channels: 2, ..NetConfig::default() };
        let mut net = SegNet::init(cfg).unwrap();
        // nonzero biases keep pre-activations off the ReLU kink
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for b in net.params_mut().iter_mut().skip(1).step_by(2) {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
        let images = random_images(2, 8, 3);
        let mask = Tensor::from_fn(&[2, 8, 8], |i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 });
        let mut inputs = net.params().to_vec();
        inputs.push(images);
        let report = grad_check(
            |g, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let out = net.forward_var(g, params, x[0])?;
                seg_ce_loss_var(g, out.logits, &mask)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.worst() < 1e-4, "{:?}", report);
    }
}
