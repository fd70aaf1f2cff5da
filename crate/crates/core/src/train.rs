//! Continual training over a domain sequence.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::alignment::{
    cna_loss_var, cra_loss_var, feature_map_var, identity_pairing, pair_features, CnaConfig, MAX_PAIRING_BATCH,
};
use crate::autodiff::{softmax_raw, Graph, Var};
use crate::error::{config_err, usage, Result};
use crate::hsic::{KernelKind, KernelSpec, SampleMatrix};
use crate::math;
use crate::metrics::{dice, hd95, iou, Mask, MetricMatrix};
use crate::replay::{kd_loss_var, rekd_var, seg_ce_loss_var, total_loss_var, BufferEntry, LossWeights, ReservoirBuffer};
use crate::rng::{stream_rng, Stream};
use crate::segnet::{NetConfig, SegNet, Tap, TeacherSnapshot};
use crate::synth::{default_sequence, generate_domain, split, DomainSpec, Sample, SplitSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam (`beta = 0.9 / 0.999`, `eps = 1e-8`) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Optimizer { kind, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - math::powf(Self::BETA1, self.t as f64);
        let bc2 = 1.0 - math::powf(Self::BETA2, self.t as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (i, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * d;
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * d * d;
                        *w -= lr * (m[i] / bc1) / (math::sqrt(v[i] / bc2) + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Every hyperparameter of a run. All toggles off is sequential fine-tuning.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct RunConfig {
    pub domains: usize,
    pub samples_per_domain: usize,
    pub image_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr_first: f64,
    pub lr_rest: f64,
    pub lr_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub kernel: KernelSpec,
    /// `None` disables MAD filtering of the pairing candidates.
    pub mad_multiplier: Option<f64>,
    pub tap: Tap,
    pub rekd: bool,
    pub cra: bool,
    pub cna: bool,
    pub feature_pairing: bool,
    /// Extra segmentation loss on replayed samples (off in the reference objective).
    pub replay_seg: bool,
    pub optimizer: OptimizerKind,
    /// Training streams: initialisation, shuffling, reservoir, buffer sampling.
    pub seed: u64,
    /// Domain sequence and splits.
    pub data_seed: u64,
    pub label: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::reference();
        RunConfig {
            domains: 3,
            samples_per_domain: 200,
            image_size: 32,
            levels: 3,
            base_channels: 8,
            epochs: 15,
            batch_size: 4,
            buffer_capacity: 50,
            lr_first: 2e-4,
            lr_rest: 1e-4,
            lr_decay: 0.99,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            alpha: 2.0,
            kernel: KernelSpec::default(),
            mad_multiplier: Some(3.0),
            tap: Tap::A,
            rekd: true,
            cra: true,
            cna: true,
            feature_pairing: true,
            replay_seg: false,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            data_seed: 0,
            label: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale benchmark: 16x16 images, two levels, 100 samples per
    /// domain, learning rates raised to converge within 15 epochs.
    pub fn desk() -> Self {
        RunConfig {
            samples_per_domain: 100,
            image_size: 16,
            levels: 2,
            lr_first: 1e-3,
            lr_rest: 5e-4,
            ..RunConfig::default()
        }
    }

    /// Sequential fine-tuning: every regularizer off.
    pub fn seq(self) -> Self {
        RunConfig { rekd: false, cra: false, cna: false, feature_pairing: false, replay_seg: false, ..self }
    }

    pub fn any_replay(&self) -> bool {
        self.rekd || self.cra || self.cna || self.replay_seg
    }

    /// Weights of the training objective. The CRA weight enters by magnitude:
    /// `L_CRA` is already `-HSIC`, so a negative `lambda2` applied literally
    /// would push the two batches apart instead of aligning them.
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2.abs(), lambda3: self.lambda3 }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 1,
            classes: 2,
            levels: self.levels,
            base_channels: self.base_channels,
            image_size: self.image_size,
            tap: self.tap,
            seed: self.seed,
        }
    }

    pub fn cna_config(&self) -> CnaConfig {
        CnaConfig::with_alpha(self.alpha)
    }

    /// Short tag of the active regularizers, e.g. `REKD+CRA+CNA` or `SEQ`.
    pub fn signature(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if self.rekd {
            parts.push("REKD");
        }
        if self.cra {
            parts.push(if self.feature_pairing { "CRA" } else { "CRAo" });
        }
        if self.cna {
            parts.push("CNA");
        }
        if self.replay_seg {
            parts.push("RSEG");
        }
        if parts.is_empty() {
            String::from("SEQ")
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        self.weights().validate()?;
        self.kernel.validate()?;
        self.cna_config().validate()?;
        if self.domains < 2 {
            return Err(config_err!("need at least 2 domains, got {}", self.domains));
        }
        if self.samples_per_domain < 4 {
            return Err(config_err!("need at least 4 samples per domain"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        if self.batch_size > MAX_PAIRING_BATCH {
            return Err(config_err!("batch size {} exceeds {}", self.batch_size, MAX_PAIRING_BATCH));
        }
        if (self.cra || self.cna) && self.batch_size < 2 {
            return Err(config_err!("alignment losses need batch size >= 2"));
        }
        if self.cra && self.kernel.kind != KernelKind::Rbf {
            return Err(config_err!("CRA needs an RBF kernel"));
        }
        if self.any_replay() && self.buffer_capacity == 0 {
            return Err(config_err!("replay needs a positive buffer capacity"));
        }
        if let Some(m) = self.mad_multiplier {
            if !(m >= 0.0) {
                return Err(config_err!("MAD multiplier must be >= 0, got {}", m));
            }
        }
        for (name, v) in [("lr_first", self.lr_first), ("lr_rest", self.lr_rest), ("lr_decay", self.lr_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{} must be positive, got {}", name, v));
            }
        }
        Ok(())
    }

    /// Number of samples in a training split.
    pub fn train_size(&self) -> usize {
        let n = self.samples_per_domain as f64;
        let s = SplitSpec::default();
        self.samples_per_domain - math::round(s.val * n) as usize - math::round(s.test * n) as usize
    }
}

/// A generated and split domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Default domain sequence for a config, generated and split 60:15:25.
pub fn prepare_domains(config: &RunConfig) -> Result<Vec<DomainData>> {
    config.validate()?;
    synthesize_domains(config.domains, config.data_seed, config.image_size, config.samples_per_domain)
}

/// `t` domains of `samples` each from [`default_sequence`], split 60:15:25.
pub fn synthesize_domains(t: usize, seed: u64, image_size: usize, samples: usize) -> Result<Vec<DomainData>> {
    default_sequence(t, seed, image_size)?
        .into_iter()
        .map(|spec| {
            let data = generate_domain(&spec, samples)?;
            let (train, val, test) = split(&data, &SplitSpec::default(), spec.seed)?;
            Ok(DomainData { spec, train, val, test })
        })
        .collect()
}

/// `[n, 1, H, W]` images and `[n, H, W]` masks.
pub fn batch_tensors<'a, I>(samples: I, size: usize) -> Result<(Tensor, Tensor)>
where
    I: IntoIterator<Item = (&'a [f64], &'a Mask)>,
{
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    let mut n = 0;
    for (im, m) in samples {
        images.extend_from_slice(im);
        masks.extend(m.to_values());
        n += 1;
    }
    Ok((Tensor::new(&[n, 1, size, size], images)?, Tensor::new(&[n, size, size], masks)?))
}

/// Handles of the loss terms on one graph.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub seg: Var,
    pub rekd: Option<Var>,
    pub cra: Option<Var>,
    pub cna: Option<Var>,
}

/// Replayed batch plus the frozen teacher used for distillation.
#[derive(Clone, Copy)]
pub struct ReplayBatch<'a> {
    pub teacher: &'a TeacherSnapshot,
    pub images: &'a Tensor,
    pub masks: &'a Tensor,
}

/// The training objective for one step on `graph`, over parameters already
/// registered as `params`. Pairings, and the sample pairs that define a
/// median bandwidth, are chosen on the current values and held fixed.
pub fn objective_var(
    g: &mut Graph,
    net: &SegNet,
    params: &[Var],
    images: &Tensor,
    masks: &Tensor,
    replay: Option<ReplayBatch<'_>>,
    config: &RunConfig,
) -> Result<ObjectiveVars> {
    let x = g.constant(images.clone())?;
    let cur = net.forward_var(g, params, x)?;
    let mut seg = seg_ce_loss_var(g, cur.logits, masks)?;
    let (mut rekd, mut cra, mut cna) = (None, None, None);
    if let Some(rb) = replay.filter(|_| config.any_replay()) {
        if rb.images.shape()[0] != images.shape()[0] {
            return Err(usage!("replay batch size differs from the current batch"));
        }
        let xb = g.constant(rb.images.clone())?;
        let buf = net.forward_var(g, params, xb)?;
        if config.replay_seg {
            let l = seg_ce_loss_var(g, buf.logits, rb.masks)?;
            seg = g.add(seg, l)?;
        }
        let teacher_buf = if config.rekd || config.cna {
            Some(rb.teacher.forward_var(g, xb)?)
        } else {
            None
        };
        if config.rekd {
            let tb = teacher_buf.expect("teacher forward");
            let tc = rb.teacher.forward_var(g, x)?;
            let kd_buf = {
                let t = g.constant(softmax_raw(g.value(tb.logits), 1))?;
                let s = g.softmax(buf.logits, 1)?;
                kd_loss_var(g, t, s)?
            };
            let kd_cur = {
                let t = g.constant(softmax_raw(g.value(tc.logits), 1))?;
                let s = g.softmax(cur.logits, 1)?;
                kd_loss_var(g, t, s)?
            };
            rekd = Some(rekd_var(g, kd_buf, kd_cur)?);
        }
        if config.cra {
            let mut acc: Option<Var> = None;
            for &layer in config.tap.layers() {
                let fb = feature_map_var(g, buf.tap(layer))?;
                let fc = feature_map_var(g, cur.tap(layer))?;
                let mb = SampleMatrix::from_tensor(g.value(fb).clone())?;
                let mc = SampleMatrix::from_tensor(g.value(fc).clone())?;
                let pairing = if config.feature_pairing {
                    pair_features(&mb, &mc, &config.kernel, config.mad_multiplier)?
                } else {
                    identity_pairing(&mb, &mc, &config.kernel)?
                };
                let l = cra_loss_var(g, fb, fc, &pairing, &config.kernel)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            cra = acc;
        }
        if config.cna {
            let tb = teacher_buf.expect("teacher forward");
            let mut acc: Option<Var> = None;
            for &layer in config.tap.layers() {
                let t = g.constant(g.value(tb.tap(layer)).clone())?;
                let l = cna_loss_var(g, buf.tap(layer), t, &config.cna_config())?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            cna = acc;
        }
    }
    let total = total_loss_var(g, seg, rekd, cra, cna, &config.weights())?;
    Ok(ObjectiveVars { total, seg, rekd, cra, cna })
}

/// Scalar values of the loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossValues {
    pub total: f64,
    pub seg: f64,
    pub rekd: f64,
    pub cra: f64,
    pub cna: f64,
}

/// Objective value and parameter gradients.
pub fn loss_and_grads(
    net: &SegNet,
    images: &Tensor,
    masks: &Tensor,
    replay: Option<ReplayBatch<'_>>,
    config: &RunConfig,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = net.register(&mut g, true)?;
    let o = objective_var(&mut g, net, &params, images, masks, replay, config)?;
    g.backward(o.total)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let values = LossValues {
        total: g.value(o.total).item(),
        seg: g.value(o.seg).item(),
        rekd: val(o.rekd),
        cra: val(o.cra),
        cna: val(o.cna),
    };
    let grads = params
        .iter()
        .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(p))))
        .collect();
    Ok((values, grads))
}

/// Mean per-sample Dice, IoU and HD95.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalScores {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

pub const EVAL_BATCH: usize = 16;

/// Predicted masks (per-pixel argmax, ties to background).
pub fn predict(net: &SegNet, images: &[&[f64]]) -> Result<Vec<Mask>> {
    let size = net.config().image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = crate::segnet::batch_images(chunk, size)?;
        let logits = net.forward(&x)?.logits;
        let per = 2 * size * size;
        for n in 0..chunk.len() {
            out.push(Mask::from_class_scores(size, size, &logits.data()[n * per..(n + 1) * per])?);
        }
    }
    Ok(out)
}

pub fn evaluate(net: &SegNet, samples: &[Sample]) -> Result<EvalScores> {
    if samples.is_empty() {
        return Err(usage!("evaluation on an empty split"));
    }
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let preds = predict(net, &images)?;
    let (mut d, mut j, mut h) = (0.0, 0.0, 0.0);
    for (p, s) in preds.iter().zip(samples) {
        d += dice(p, &s.mask)?;
        j += iou(p, &s.mask)?;
        h += hd95(p, &s.mask)?;
    }
    let n = samples.len() as f64;
    Ok(EvalScores { dice: d / n, iou: j / n, hd95: h / n })
}

/// Per-epoch record of mean losses and validation Dice.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochTrace {
    pub domain: usize,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub losses: LossValues,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSummary {
    pub avg: f64,
    pub bwt: f64,
}

impl MetricSummary {
    pub fn of(m: &MetricMatrix) -> Result<Self> {
        Ok(MetricSummary { avg: m.avg()?, bwt: m.bwt()? })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunResult {
    pub config: RunConfig,
    pub signature: String,
    pub dice: MetricMatrix,
    pub iou: MetricMatrix,
    pub hd95: MetricMatrix,
    pub dice_summary: MetricSummary,
    pub iou_summary: MetricSummary,
    pub hd95_summary: MetricSummary,
    /// Dice forgetting curve of every domain `i`: `dice[j][i]` for `j >= i`.
    pub forgetting_curves: Vec<Vec<f64>>,
    pub best_epochs: Vec<usize>,
    pub traces: Vec<EpochTrace>,
    /// Filled in by callers that have a clock.
    pub wall_clock_secs: Option<f64>,
}

/// Final state of a run besides its result.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub net: SegNet,
    pub buffer: ReservoirBuffer,
}

/// Train through every domain in order. `observer` sees each epoch trace.
pub fn train_continual(
    config: &RunConfig,
    domains: &[DomainData],
    observer: &mut dyn FnMut(&EpochTrace),
) -> Result<RunOutput> {
    config.validate()?;
    if domains.len() != config.domains {
        return Err(config_err!("config expects {} domains, got {}", config.domains, domains.len()));
    }
    for d in domains {
        if d.train.len() < config.batch_size || d.val.is_empty() || d.test.is_empty() {
            return Err(config_err!("domain splits too small for batch size {}", config.batch_size));
        }
        if d.train.iter().chain(&d.val).chain(&d.test).any(|s| s.size() != config.image_size) {
            return Err(config_err!("domain image size differs from the config"));
        }
    }
    let k = domains.len();
    let size = config.image_size;
    let mut net = SegNet::init(config.net_config())?;
    let mut buffer = ReservoirBuffer::new(config.buffer_capacity.max(1), config.seed)?;
    let (mut dice_m, mut iou_m, mut hd_m) = (MetricMatrix::new(k), MetricMatrix::new(k), MetricMatrix::new(k));
    let mut traces = Vec::new();
    let mut best_epochs = Vec::new();
    let mut stream_index = 0u64;

    for (t, domain) in domains.iter().enumerate() {
        let teacher = (t > 0).then(|| net.snapshot());
        let mut opt = Optimizer::new(config.optimizer, net.params());
        let mut sampler = stream_rng(config.seed, Stream::Sampler, t as u64);
        let mut lr = if t == 0 { config.lr_first } else { config.lr_rest };
        let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..domain.train.len()).collect();
            order.shuffle(&mut stream_rng(config.seed, Stream::DataShuffle, ((t as u64) << 32) | epoch as u64));
            let full = order.len() / config.batch_size * config.batch_size;
            let mut sums = LossValues::default();
            let mut steps = 0;
            for batch in order[..full].chunks(config.batch_size) {
                let (images, masks) =
                    batch_tensors(batch.iter().map(|&i| (domain.train[i].image.as_slice(), &domain.train[i].mask)), size)?;
                let replay_tensors = match &teacher {
                    Some(_) if config.any_replay() && !buffer.is_empty() => {
                        let picked = buffer.sample(batch.len(), &mut sampler)?;
                        Some(batch_tensors(picked.iter().map(|e| (e.image.as_slice(), &e.mask)), size)?)
                    }
                    _ => None,
                };
                let replay = match (&teacher, &replay_tensors) {
                    (Some(teacher), Some((bi, bm))) => Some(ReplayBatch { teacher, images: bi, masks: bm }),
                    _ => None,
                };
                let (values, grads) = loss_and_grads(&net, &images, &masks, replay, config)?;
                opt.step(net.params_mut(), &grads, lr);
                if net.params().iter().any(|p| !p.is_finite()) {
                    return Err(crate::Error::NonFinite("parameters after update"));
                }
                sums.total += values.total;
                sums.seg += values.seg;
                sums.rekd += values.rekd;
                sums.cra += values.cra;
                sums.cna += values.cna;
                steps += 1;
                if epoch == 0 {
                    for &i in batch {
                        offer(&mut buffer, &domain.train[i], t, &mut stream_index)?;
                    }
                }
            }
            if epoch == 0 {
                for &i in &order[full..] {
                    offer(&mut buffer, &domain.train[i], t, &mut stream_index)?;
                }
            }
            let val_dice = evaluate(&net, &domain.val)?.dice;
            let s = steps.max(1) as f64;
            let trace = EpochTrace {
                domain: t,
                epoch,
                lr,
                steps,
                losses: LossValues {
                    total: sums.total / s,
                    seg: sums.seg / s,
                    rekd: sums.rekd / s,
                    cra: sums.cra / s,
                    cna: sums.cna / s,
                },
                val_dice,
            };
            observer(&trace);
            traces.push(trace);
            if best.as_ref().is_none_or(|(b, _, _)| val_dice > *b) {
                best = Some((val_dice, epoch, net.params().to_vec()));
            }
            lr *= config.lr_decay;
        }

        let (_, best_epoch, params) = best.expect("at least one epoch");
        best_epochs.push(best_epoch);
        net = SegNet::from_params(config.net_config(), params)?;
        for (i, other) in domains.iter().enumerate() {
            let s = evaluate(&net, &other.test)?;
            dice_m.set(t, i, s.dice);
            iou_m.set(t, i, s.iou);
            hd_m.set(t, i, s.hd95);
        }
    }

    let forgetting_curves = (0..k).map(|i| dice_m.forgetting_curve(i)).collect::<Result<Vec<_>>>()?;
    let result = RunResult {
        config: config.clone(),
        signature: config.signature(),
        dice_summary: MetricSummary::of(&dice_m)?,
        iou_summary: MetricSummary::of(&iou_m)?,
        hd95_summary: MetricSummary::of(&hd_m)?,
        dice: dice_m,
        iou: iou_m,
        hd95: hd_m,
        forgetting_curves,
        best_epochs,
        traces,
        wall_clock_secs: None,
    };
    Ok(RunOutput { result, net, buffer })
}

fn offer(buffer: &mut ReservoirBuffer, s: &Sample, domain: usize, stream_index: &mut u64) -> Result<()> {
    buffer.offer(BufferEntry::new(s.image.clone(), s.mask.clone(), domain, *stream_index)?);
    *stream_index += 1;
    Ok(())
}
