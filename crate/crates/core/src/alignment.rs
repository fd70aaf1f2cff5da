//! Cross-representation alignment (feature mapping + feature pairing) and
//! cross-network alignment losses over bottleneck feature stacks.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, dim_err, usage, Result};
use crate::hsic::{hsic_nonlinear, hsic_nonlinear_var, KernelSpec, SampleMatrix};
use crate::math;
use crate::tensor::Tensor;
use crate::EPS;

/// Largest batch for which exhaustive pairing is allowed (8! = 40320).
pub const MAX_PAIRING_BATCH: usize = 8;

/// Relative tolerance under which two candidate HSIC values count as tied.
pub const TIE_RTOL: f64 = 1e-12;

/// Batch of feature maps, `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(Tensor);

impl FeatureStack {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(dim_err!("feature stack must be [N, C, H, W], got {:?}", t.shape()));
        }
        t.check_finite("feature stack")?;
        Ok(FeatureStack(t))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    /// `H * W`.
    pub fn spatial(&self) -> usize {
        self.0.shape()[2] * self.0.shape()[3]
    }

    /// `[C, H, W]` values of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.channels() * self.spatial();
        &self.0.data()[i * len..(i + 1) * len]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Softmax channel weights; positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights(Vec<f64>);

impl ChannelWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mean absolute activation per channel of one `[C, H*W]` map.
pub fn channel_energy(map: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || map.is_empty() || !map.len().is_multiple_of(channels) {
        return Err(dim_err!("map of {} values does not split into {} channels", map.len(), channels));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("channel_energy input"));
    }
    let hw = map.len() / channels;
    Ok(map.chunks(hw).map(|ch| ch.iter().map(|v| v.abs()).sum::<f64>() / hw as f64).collect())
}

/// Max-subtracted softmax of the channel energies.
pub fn channel_weights(z: &[f64]) -> ChannelWeights {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| math::exp(v - max)).collect();
    let total: f64 = e.iter().sum();
    ChannelWeights(e.into_iter().map(|v| v / total).collect())
}

/// `phi(F) = (1/C) sum_k lambda_k |F_k|`, flattened row-major over `H x W`.
pub fn feature_map(map: &[f64], channels: usize) -> Result<Vec<f64>> {
    let z = channel_energy(map, channels)?;
    let w = channel_weights(&z);
    let hw = map.len() / channels;
    let mut out = alloc::vec![0.0; hw];
    for (ch, lambda) in map.chunks(hw).zip(w.as_slice()) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += lambda * v.abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= channels as f64);
    Ok(out)
}

/// Feature mapping applied to every sample: an `N x (H*W)` matrix.
pub fn map_features(stack: &FeatureStack) -> Result<SampleMatrix> {
    let mut values = Vec::with_capacity(stack.batch() * stack.spatial());
    for i in 0..stack.batch() {
        values.extend(feature_map(stack.sample(i), stack.channels())?);
    }
    SampleMatrix::new(stack.batch(), stack.spatial(), values)
}

/// Differentiable feature mapping of `[N, C, H, W]` into `[N, H*W]`.
/// The channel weights stay in the graph.
pub fn feature_map_var(g: &mut Graph, f: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(dim_err!("feature map input must be [N, C, H, W], got {:?}", shape));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = g.reshape(f, &[n, c, hw])?;
    let a = g.abs(flat)?;
    let z = g.mean_axis(a, 2)?;
    let lambda = g.softmax(z, 1)?;
    let lambda = g.expand(lambda, &[n, c, hw])?;
    let weighted = g.mul(lambda, a)?;
    let s = g.sum_axis(weighted, 1)?;
    let s = g.scale(s, 1.0 / c as f64)?;
    g.reshape(s, &[n, hw])
}

/// Indices `i` with `|v_i - median| <= multiplier * MAD`.
pub fn mad_filter(values: &[f64], multiplier: f64) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(usage!("MAD filter of an empty sequence"));
    }
    let med = math::median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let mad = math::median(&dev);
    let limit = multiplier * mad;
    Ok(dev.iter().enumerate().filter(|(_, &d)| d <= limit).map(|(i, _)| i).collect())
}

/// Outcome of the permutation search.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingResult {
    /// Row `i` of the buffer features is `permutation[i]` of the input order.
    pub permutation: Vec<usize>,
    pub hsic_value: f64,
    pub candidates_total: usize,
    pub candidates_kept: usize,
}

/// Step to the next permutation in lexicographic order; false after the last.
pub fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive feature pairing.
///
/// Every row permutation of `buffer` is scored by nonlinear HSIC against
/// `current`. The scores are MAD-filtered (`mad_multiplier = None` keeps all),
/// then the best kept permutation is returned. Scores within [`TIE_RTOL`] of
/// the best count as tied and the lexicographically smallest tied
/// permutation wins.
pub fn pair_features(
    buffer: &SampleMatrix,
    current: &SampleMatrix,
    kspec: &KernelSpec,
    mad_multiplier: Option<f64>,
) -> Result<PairingResult> {
    let n = buffer.rows();
    if current.rows() != n {
        return Err(usage!("pairing needs equal batches: {} vs {}", n, current.rows()));
    }
    if n < 2 {
        return Err(usage!("pairing needs N >= 2, got {}", n));
    }
    if n > MAX_PAIRING_BATCH {
        return Err(config_err!("pairing batch {} exceeds the factorial guard {}", n, MAX_PAIRING_BATCH));
    }
    let mut perms = Vec::new();
    let mut values = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        values.push(hsic_nonlinear(&buffer.permute_rows(&p)?, current, kspec, kspec)?);
        perms.push(p.clone());
        if !next_permutation(&mut p) {
            break;
        }
    }
    let kept = match mad_multiplier {
        Some(m) => mad_filter(&values, m)?,
        None => (0..values.len()).collect(),
    };
    let best = kept.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_RTOL * best.abs();
    let winner = *kept
        .iter()
        .find(|&&i| values[i] >= best - tol)
        .expect("kept set contains the maximum");
    Ok(PairingResult {
        permutation: perms[winner].clone(),
        hsic_value: values[winner],
        candidates_total: values.len(),
        candidates_kept: kept.len(),
    })
}

/// No-search pairing: buffer sample `i` with current sample `i`.
pub fn identity_pairing(buffer: &SampleMatrix, current: &SampleMatrix, kspec: &KernelSpec) -> Result<PairingResult> {
    let n = buffer.rows();
    let hsic_value = hsic_nonlinear(buffer, current, kspec, kspec)?;
    Ok(PairingResult { permutation: (0..n).collect(), hsic_value, candidates_total: 1, candidates_kept: 1 })
}

pub fn cra_loss(pairing: &PairingResult) -> f64 {
    -pairing.hsic_value
}

/// Differentiable CRA loss `-HSIC(buffer[perm], current)` with the
/// permutation held fixed.
pub fn cra_loss_var(
    g: &mut Graph,
    buffer_mapped: Var,
    current_mapped: Var,
    pairing: &PairingResult,
    kspec: &KernelSpec,
) -> Result<Var> {
    let permuted = g.select_rows(buffer_mapped, &pairing.permutation)?;
    let h = hsic_nonlinear_var(g, permuted, current_mapped, kspec, kspec)?;
    g.neg(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CnaConfig {
    pub alpha: f64,
    pub eps_log: f64,
    pub eps_std: f64,
}

impl Default for CnaConfig {
    fn default() -> Self {
        CnaConfig { alpha: 2.0, eps_log: EPS, eps_std: EPS }
    }
}

impl CnaConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        CnaConfig { alpha, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.eps_log > 0.0) || !(self.eps_std >= 0.0) {
            return Err(config_err!("invalid CNA config {:?}", self));
        }
        Ok(())
    }
}

/// Flatten each sample and divide by its own l2 norm (zero rows stay zero).
pub fn cna_rescale(stack: &FeatureStack) -> Result<SampleMatrix> {
    let d = stack.channels() * stack.spatial();
    let mut values = Vec::with_capacity(stack.batch() * d);
    for i in 0..stack.batch() {
        let s = stack.sample(i);
        let norm = math::sqrt(s.iter().map(|v| v * v).sum::<f64>()).max(EPS);
        values.extend(s.iter().map(|v| v / norm));
    }
    SampleMatrix::new(stack.batch(), d, values)
}

/// Diagonal of the standardised cross-correlation, `v_i = (1/N) sum_n s[n,i] t[n,i]`.
/// The full `d' x d'` matrix is never formed.
pub fn cna_diag_corr(student: &SampleMatrix, teacher: &SampleMatrix, eps_std: f64) -> Result<Vec<f64>> {
    let n = student.rows();
    if n < 2 {
        return Err(usage!("CNA correlation needs N >= 2, got {}", n));
    }
    if teacher.rows() != n || teacher.cols() != student.cols() {
        return Err(dim_err!(
            "CNA inputs differ: {}x{} vs {}x{}",
            n,
            student.cols(),
            teacher.rows(),
            teacher.cols()
        ));
    }
    let s = crate::hsic::standardize(student, eps_std);
    let t = crate::hsic::standardize(teacher, eps_std);
    Ok((0..student.cols())
        .map(|i| (0..n).map(|r| s.get(r, i) * t.get(r, i)).sum::<f64>() / n as f64)
        .collect())
}

/// `log2( sum_i |v_i - 1|^(2 alpha) + eps_log )`.
pub fn cna_loss(v: &[f64], config: &CnaConfig) -> f64 {
    let s: f64 = v.iter().map(|x| math::powf((x - 1.0).abs(), 2.0 * config.alpha)).sum();
    math::ln(s + config.eps_log) / core::f64::consts::LN_2
}

/// Differentiable diagonal correlation of `[N, d']` rows.
pub fn cna_diag_corr_var(g: &mut Graph, student: Var, teacher: Var, eps_std: f64) -> Result<Var> {
    let n = g.shape(student)[0];
    if n < 2 {
        return Err(usage!("CNA correlation needs N >= 2, got {}", n));
    }
    let s = g.standardize_cols(student, eps_std)?;
    let t = g.standardize_cols(teacher, eps_std)?;
    let prod = g.mul(s, t)?;
    g.mean_axis(prod, 0)
}

pub fn cna_loss_from_v(g: &mut Graph, v: Var, config: &CnaConfig) -> Result<Var> {
    let dev = g.add_scalar(v, -1.0)?;
    let dev = g.abs(dev)?;
    let p = g.pow(dev, 2.0 * config.alpha)?;
    let s = g.sum(p)?;
    let s = g.add_scalar(s, config.eps_log)?;
    let l = g.log(s)?;
    g.scale(l, 1.0 / core::f64::consts::LN_2)
}

/// Full CNA pipeline on `[N, C, H, W]` student and teacher features:
/// flatten, l2-rescale per sample, standardise, diagonal correlation, loss.
pub fn cna_loss_var(g: &mut Graph, student: Var, teacher: Var, config: &CnaConfig) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    if shape.len() != 4 || g.shape(teacher) != &shape[..] {
        return Err(dim_err!("CNA features must share an [N, C, H, W] shape"));
    }
    let flat = [shape[0], shape[1] * shape[2] * shape[3]];
    let s = g.reshape(student, &flat)?;
    let s = g.l2_normalize_rows(s)?;
    let t = g.reshape(teacher, &flat)?;
    let t = g.l2_normalize_rows(t)?;
    let v = cna_diag_corr_var(g, s, t, config.eps_std)?;
    cna_loss_from_v(g, v, config)
}
