//! Reservoir replay buffer, pixelwise segmentation / distillation losses and
//! the weighted total objective.

use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, usage, Result};
use crate::math;
use crate::metrics::Mask;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Probabilities are squeezed into `[PROB_CLIP, 1 - PROB_CLIP]` before every `log`.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub image: Vec<f64>,
    pub mask: Mask,
    pub domain_id: usize,
    pub stream_index: u64,
}

impl BufferEntry {
    pub fn new(image: Vec<f64>, mask: Mask, domain_id: usize, stream_index: u64) -> Result<Self> {
        if image.len() != mask.height() * mask.width() {
            return Err(usage!("image of {} values for a {}x{} mask", image.len(), mask.height(), mask.width()));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(usage!("buffer images must lie in [0, 1]"));
        }
        Ok(BufferEntry { image, mask, domain_id, stream_index })
    }
}

/// Fixed-capacity uniform sample of everything ever offered.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirBuffer {
    capacity: usize,
    seen: u64,
    entries: Vec<BufferEntry>,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(config_err!("buffer capacity must be positive"));
        }
        Ok(ReservoirBuffer { capacity, seen: 0, entries: Vec::new(), rng: stream_rng(seed, Stream::Reservoir, 0) })
    }

    /// Restore from checkpointed parts.
    pub fn from_parts(capacity: usize, seen: u64, entries: Vec<BufferEntry>, rng: ChaCha8Rng) -> Result<Self> {
        let expected = (capacity as u64).min(seen) as usize;
        if capacity == 0 || entries.len() != expected {
            return Err(usage!("buffer holds {} entries, expected {}", entries.len(), expected));
        }
        Ok(ReservoirBuffer { capacity, seen, entries, rng })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Offer one item; returns the slot it landed in, if any.
    pub fn offer(&mut self, entry: BufferEntry) -> Option<usize> {
        let n = self.seen;
        self.seen += 1;
        if (n as usize) < self.capacity {
            self.entries.push(entry);
            return Some(self.entries.len() - 1);
        }
        let j = self.rng.random_range(0..=n);
        if (j as usize) < self.capacity {
            self.entries[j as usize] = entry;
            Some(j as usize)
        } else {
            None
        }
    }

    /// Indices of `k` entries: without replacement when possible, else with.
    pub fn sample_indices<R: RngCore>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        let len = self.entries.len();
        if len == 0 {
            return Err(usage!("sampling from an empty buffer"));
        }
        if len >= k {
            Ok(index::sample(rng, len, k).into_vec())
        } else {
            Ok((0..k).map(|_| rng.random_range(0..len)).collect())
        }
    }

    pub fn sample<R: RngCore>(&self, k: usize, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        Ok(self.sample_indices(k, rng)?.into_iter().map(|i| &self.entries[i]).collect())
    }
}

fn check_class_pair(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(usage!("{} shapes differ: {:?} vs {:?}", what, a, b));
    }
    Ok(())
}

fn check_logits_mask(logits: &[usize], mask: &[usize]) -> Result<()> {
    if logits.len() != 4 || logits[1] != 2 || mask != [logits[0], logits[2], logits[3]] {
        return Err(usage!("logits {:?} do not match mask {:?} with 2 classes", logits, mask));
    }
    Ok(())
}

/// Affine map of `[0, 1]` onto `[PROB_CLIP, 1 - PROB_CLIP]`. Unlike a hard
/// clamp it keeps a gradient on saturated wrong predictions, which would
/// otherwise never recover.
fn clip(p: f64) -> f64 {
    PROB_CLIP + (1.0 - 2.0 * PROB_CLIP) * p
}

/// Mean pixelwise cross-entropy of softmax(`logits` `[N, 2, H, W]`) against a binary `[N, H, W]` mask.
pub fn seg_ce_loss(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    check_logits_mask(logits.shape(), mask.shape())?;
    let probs = crate::autodiff::softmax_raw(logits, 1);
    let hw = logits.shape()[2] * logits.shape()[3];
    let mut s = 0.0;
    for (p, &y) in mask.data().iter().enumerate() {
        let (n, i) = (p / hw, p % hw);
        let c = usize::from(y > 0.5);
        s -= math::ln(clip(probs.data()[(n * 2 + c) * hw + i]));
    }
    Ok(s / mask.len() as f64)
}

/// Soft cross-entropy `-sum_c t_c ln s_c`, averaged over pixels and batch.
pub fn kd_loss(teacher_probs: &Tensor, student_probs: &Tensor) -> Result<f64> {
    check_class_pair(teacher_probs.shape(), student_probs.shape(), "distillation")?;
    if teacher_probs.rank() != 4 {
        return Err(usage!("distillation expects [N, C, H, W], got {:?}", teacher_probs.shape()));
    }
    let pixels = teacher_probs.len() / teacher_probs.shape()[1];
    let s: f64 = teacher_probs
        .data()
        .iter()
        .zip(student_probs.data())
        .map(|(t, s)| -t * math::ln(clip(*s)))
        .sum();
    Ok(s / pixels as f64)
}

fn one_hot(mask: &Tensor) -> Tensor {
    let (n, h, w) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    let hw = h * w;
    Tensor::from_fn(&[n, 2, h, w], |idx| {
        let (b, c, i) = (idx / (2 * hw), (idx / hw) % 2, idx % hw);
        let fg = mask.data()[b * hw + i] > 0.5;
        if fg == (c == 1) {
            1.0
        } else {
            0.0
        }
    })
}

fn soft_ce_var(g: &mut Graph, target: Var, student_probs: Var) -> Result<Var> {
    let shape = g.shape(student_probs).to_vec();
    let pixels = shape[0] * shape[2] * shape[3];
    let squeezed = g.scale(student_probs, 1.0 - 2.0 * PROB_CLIP)?;
    let clipped = g.add_scalar(squeezed, PROB_CLIP)?;
    let logp = g.log(clipped)?;
    let prod = g.mul(target, logp)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / pixels as f64)
}

/// Differentiable [`seg_ce_loss`] with respect to the logits.
pub fn seg_ce_loss_var(g: &mut Graph, logits: Var, mask: &Tensor) -> Result<Var> {
    check_logits_mask(g.shape(logits), mask.shape())?;
    let target = g.constant(one_hot(mask))?;
    let probs = g.softmax(logits, 1)?;
    soft_ce_var(g, target, probs)
}

/// Differentiable [`kd_loss`]; gradients flow to both arguments.
pub fn kd_loss_var(g: &mut Graph, teacher_probs: Var, student_probs: Var) -> Result<Var> {
    check_class_pair(g.shape(teacher_probs), g.shape(student_probs), "distillation")?;
    if g.shape(teacher_probs).len() != 4 {
        return Err(usage!("distillation expects [N, C, H, W]"));
    }
    soft_ce_var(g, teacher_probs, student_probs)
}

/// Regularizer weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    /// `(0.01, -0.75, 0.9)`.
    pub fn reference() -> Self {
        LossWeights { lambda1: 0.01, lambda2: -0.75, lambda3: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite() && self.lambda3.is_finite()) {
            return Err(config_err!("non-finite loss weights {:?}", self));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::reference()
    }
}

/// `L_seg + l1 L_REKD + l2 L_CRA + l3 L_CNA`.
pub fn total_loss(seg: f64, rekd: f64, cra: f64, cna: f64, w: &LossWeights) -> f64 {
    seg + w.lambda1 * rekd + w.lambda2 * cra + w.lambda3 * cna
}

/// Graph version of [`total_loss`]; absent terms never enter the graph.
pub fn total_loss_var(
    g: &mut Graph,
    seg: Var,
    rekd: Option<Var>,
    cra: Option<Var>,
    cna: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = seg;
    for (term, weight) in [(rekd, w.lambda1), (cra, w.lambda2), (cna, w.lambda3)] {
        if let Some(t) = term {
            let t = g.scale(t, weight)?;
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

/// `0.5 (KD_buffer + KD_current)`.
pub fn rekd_var(g: &mut Graph, kd_buffer: Var, kd_current: Var) -> Result<Var> {
    let s = g.add(kd_buffer, kd_current)?;
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn entry(i: u64) -> BufferEntry {
        BufferEntry::new(vec![0.5; 4], Mask::empty(2, 2), 0, i).unwrap()
    }

    #[test]
    fn under_capacity_keeps_order() {
        let mut b = ReservoirBuffer::new(10, 0).unwrap();
        for i in 0..5 {
            b.offer(entry(i));
        }
        let ids: Vec<u64> = b.entries().iter().map(|e| e.stream_index).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn reservoir_is_deterministic_and_bounded() {
        let run = |seed| {
            let mut b = ReservoirBuffer::new(7, seed).unwrap();
            for i in 0..100 {
                b.offer(entry(i));
                assert_eq!(b.len(), 7.min(i as usize + 1));
            }
            b
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).entries(), run(4).entries());
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let mut b = ReservoirBuffer::new(6, 1).unwrap();
        for i in 0..6 {
            b.offer(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut idx = b.sample_indices(6, &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(b.sample_indices(9, &mut rng).unwrap().len(), 9);
        let empty = ReservoirBuffer::new(3, 0).unwrap();
        assert!(matches!(empty.sample_indices(1, &mut rng), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn single_draws_are_uniform() {
        let mut b = ReservoirBuffer::new(5, 1).unwrap();
        for i in 0..5 {
            b.offer(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..trials {
            counts[b.sample_indices(1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 0.2;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sd, "{:?}", counts);
        }
    }

    fn logits_for(p_fg: f64) -> Tensor {
        // softmax(0, ln(p/(1-p))) = (1-p, p)
        Tensor::new(&[1, 2, 1, 1], vec![0.0, (p_fg / (1.0 - p_fg)).ln()]).unwrap()
    }

    #[test]
    fn seg_ce_cases() {
        let fg = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        assert!((seg_ce_loss(&logits_for(0.5), &fg).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((seg_ce_loss(&logits_for(0.6), &fg).unwrap() - 0.51083).abs() < 1e-5);
        let sure = Tensor::new(&[1, 2, 1, 1], vec![-800.0, 800.0]).unwrap();
        let l = seg_ce_loss(&sure, &fg).unwrap();
        assert!(l > 0.0 && l < 2e-7, "{}", l);
        assert!(seg_ce_loss(&sure, &Tensor::zeros(&[1, 2, 1])).is_err());
    }

    #[test]
    fn kd_cases() {
        let u = Tensor::full(&[1, 2, 1, 1], 0.5);
        assert!((kd_loss(&u, &u).unwrap() - 2f64.ln()).abs() < 1e-12);
        let t = Tensor::new(&[1, 2, 1, 1], vec![0.8, 0.2]).unwrap();
        let s = Tensor::new(&[1, 2, 1, 1], vec![0.6, 0.4]).unwrap();
        assert!((kd_loss(&t, &s).unwrap() - 0.59192).abs() < 1e-5);
        let one = Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert!(kd_loss(&one, &one).unwrap() < 2e-7);
        assert!(kd_loss(&one, &Tensor::full(&[1, 2, 1, 2], 0.5)).is_err());
    }

    #[test]
    fn graph_losses_match_values() {
        let logits = Tensor::from_fn(&[2, 2, 3, 3], |i| ((i * 5) as f64 * 0.37).sin() * 3.0);
        let mask = Tensor::from_fn(&[2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
        let mut g = Graph::new();
        let l = g.constant(logits.clone()).unwrap();
        let v = seg_ce_loss_var(&mut g, l, &mask).unwrap();
        assert!((g.value(v).item() - seg_ce_loss(&logits, &mask).unwrap()).abs() < 1e-14);
        let p = crate::autodiff::softmax_raw(&logits, 1);
        let q = crate::autodiff::softmax_raw(&logits.map(|x| 0.5 * x), 1);
        let (pv, qv) = (g.constant(p.clone()).unwrap(), g.constant(q.clone()).unwrap());
        let k = kd_loss_var(&mut g, pv, qv).unwrap();
        assert!((g.value(k).item() - kd_loss(&p, &q).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::reference();
        assert!((total_loss(0.5, 0.7, -0.2, 1.0, &w) - 1.557).abs() < 1e-12);
        assert_eq!(total_loss(0.5, 0.0, 0.0, 0.0, &w), 0.5);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        assert_eq!(total_loss(0.3, 9.0, 9.0, 9.0, &zero), 0.3);
        assert!(LossWeights { lambda1: f64::NAN, ..w }.validate().is_err());
        let mut g = Graph::new();
        let seg = g.constant(Tensor::scalar(0.5)).unwrap();
        let t = total_loss_var(&mut g, seg, None, None, None, &w).unwrap();
        assert_eq!(t, seg);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let logits = Tensor::from_fn(&[2, 2, 2, 2], |i| ((i * 3) as f64 * 0.71).cos());
        let mask = Tensor::from_fn(&[2, 2, 2], |i| (i % 2) as f64);
        let r = grad_check(|g, v| seg_ce_loss_var(g, v[0], &mask), core::slice::from_ref(&logits), 1e-5).unwrap();
        assert!(r.worst() < 1e-4, "{:?}", r);
        let t = crate::autodiff::softmax_raw(&logits.map(|x| 2.0 * x), 1);
        let r = grad_check(
            |g, v| {
                let tv = g.constant(t.clone())?;
                let s = g.softmax(v[0], 1)?;
                kd_loss_var(g, tv, s)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(r.worst() < 1e-4, "{:?}", r);
    }

    fn entropy(p: &Tensor) -> f64 {
        let pixels = p.len() / p.shape()[1];
        -p.data().iter().map(|&x| x * clip(x).ln()).sum::<f64>() / pixels as f64
    }

    fn arb_probs() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-4.0f64..4.0, 2 * 2 * 3)
            .prop_map(|v| crate::autodiff::softmax_raw(&Tensor::new(&[2, 2, 1, 3], v).unwrap(), 1))
    }

    proptest! {
        #[test]
        fn kd_self_is_entropy(p in arb_probs()) {
            prop_assert!((kd_loss(&p, &p).unwrap() - entropy(&p)).abs() < 1e-10);
        }

        #[test]
        fn kd_dominates_teacher_entropy(t in arb_probs(), s in arb_probs()) {
            prop_assert!(kd_loss(&t, &s).unwrap() >= entropy(&t) - 1e-12);
        }

        #[test]
        fn total_loss_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -5.0f64..5.0, k in -3.0f64..3.0) {
            let w = LossWeights::reference();
            let base = total_loss(a, b, c, d, &w);
            let shifted = total_loss(a, b + k, c, d, &w);
            prop_assert!((shifted - base - w.lambda1 * k).abs() < 1e-12);
            let shifted = total_loss(a, b, c + k, d, &w);
            prop_assert!((shifted - base - w.lambda2 * k).abs() < 1e-12);
        }

        #[test]
        fn reservoir_never_exceeds_capacity(cap in 1usize..20, n in 0u64..200, seed in any::<u64>()) {
            let mut b = ReservoirBuffer::new(cap, seed).unwrap();
            for i in 0..n {
                b.offer(entry(i));
            }
            prop_assert_eq!(b.len(), cap.min(n as usize));
            prop_assert_eq!(b.seen(), n);
        }
    }
}
