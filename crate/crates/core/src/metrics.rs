//! Segmentation overlap/boundary metrics and continual-learning aggregates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, usage, Result};
use crate::math;

/// Binary `H x W` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(dim_err!("mask {}x{} with {} values", height, width, bits.len()));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    /// Values above 0.5 are foreground.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v > 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Per-pixel argmax of `[2, H, W]` class scores; ties go to background.
    pub fn from_class_scores(height: usize, width: usize, scores: &[f64]) -> Result<Self> {
        let hw = height * width;
        if scores.len() != 2 * hw {
            return Err(dim_err!("expected 2x{}x{} scores, got {}", height, width, scores.len()));
        }
        Self::new(height, width, (0..hw).map(|p| scores[hw + p] > scores[p]).collect())
    }

    /// Foreground pixels with a background 4-neighbour or on the image border.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                if edge
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1)
                {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn check_same(a: &Mask, b: &Mask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(usage!("mask shapes differ: {}x{} vs {}x{}", a.height, a.width, b.height, b.width));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    (inter, a.count(), b.count())
}

/// `2|A n B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let (inter, na, nb) = overlap(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A n B| / |A u B|`, 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let (inter, na, nb) = overlap(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Nearest-rank 95th percentile: ascending sort, index `ceil(0.95 n) - 1`.
pub fn percentile95(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = (math::ceil(0.95 * values.len() as f64) as usize).max(1) - 1;
    values[idx]
}

fn dist(p: (usize, usize), q: (usize, usize)) -> f64 {
    let dr = p.0 as f64 - q.0 as f64;
    let dc = p.1 as f64 - q.1 as f64;
    math::sqrt(dr * dr + dc * dc)
}

/// Directed 95th-percentile distance from every point of `from` to its nearest point in `to`.
pub fn directed_h95(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect();
    percentile95(&mut d)
}

/// Symmetric HD95 between point sets; `empty_value` when exactly one is empty.
pub fn hd95_points(a: &[(usize, usize)], b: &[(usize, usize)], empty_value: f64) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => empty_value,
        _ => directed_h95(a, b).max(directed_h95(b, a)),
    }
}

/// HD95 between mask boundaries. One empty mask scores the image diagonal.
pub fn hd95(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let h = a.height as f64;
    let w = a.width as f64;
    Ok(hd95_points(&a.boundary(), &b.boundary(), math::sqrt(h * h + w * w)))
}

/// `K x K` table, entry `(j, i)` = metric after training through domain `j`
/// evaluated on domain `i`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricMatrix {
    k: usize,
    entries: Vec<Option<f64>>,
}

impl MetricMatrix {
    pub fn new(k: usize) -> Self {
        MetricMatrix { k, entries: vec![None; k * k] }
    }

    /// Build from complete rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let mut m = Self::new(k);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(dim_err!("row {} has {} entries, expected {}", j, row.len(), k));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(j, i, v);
            }
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set(&mut self, j: usize, i: usize, v: f64) {
        self.entries[j * self.k + i] = Some(v);
    }

    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.entries[j * self.k + i]
    }

    pub fn row(&self, j: usize) -> &[Option<f64>] {
        &self.entries[j * self.k..(j + 1) * self.k]
    }

    fn need(&self, j: usize, i: usize) -> Result<f64> {
        self.get(j, i).ok_or_else(|| usage!("metric entry ({}, {}) not populated", j, i))
    }

    /// `(1/(K-1)) sum_{i<K} (m[K,i] - m[i,i])`.
    pub fn bwt(&self) -> Result<f64> {
        if self.k < 2 {
            return Err(usage!("BWT needs K >= 2, got {}", self.k));
        }
        let last = self.k - 1;
        let mut s = 0.0;
        for i in 0..last {
            s += self.need(last, i)? - self.need(i, i)?;
        }
        Ok(s / last as f64)
    }

    /// Mean of the final row.
    pub fn avg(&self) -> Result<f64> {
        if self.k == 0 {
            return Err(usage!("AVG of an empty matrix"));
        }
        let last = self.k - 1;
        let mut s = 0.0;
        for i in 0..self.k {
            s += self.need(last, i)?;
        }
        Ok(s / self.k as f64)
    }

    /// `m[j, i]` for `j = i..K` (zero-based `i`).
    pub fn forgetting_curve(&self, i: usize) -> Result<Vec<f64>> {
        if i >= self.k {
            return Err(usage!("domain {} out of range for K = {}", i, self.k));
        }
        (i..self.k).map(|j| self.need(j, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(r, c) in on {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn dice_and_iou_cases() {
        let a = mask_from(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask_from(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let b = mask_from(4, 4, &[(0, 0), (0, 1), (1, 0), (2, 2), (2, 3), (3, 3)]);
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert!((iou(&a, &b).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        let e = Mask::empty(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn hd95_cases() {
        let a = mask_from(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        assert_eq!(hd95_points(&[(0, 0)], &[(3, 4)], 0.0), 5.0);
        let e = Mask::empty(8, 8);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);
        assert!((hd95(&a, &e).unwrap() - 128f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn percentile_suppresses_single_outlier() {
        let mut d = vec![0.0; 19];
        d.push(10.0);
        assert_eq!(percentile95(&mut d), 0.0);
        assert_eq!(percentile95(&mut [4.0]), 4.0);
    }

    #[test]
    fn boundary_of_filled_square() {
        let mut on = Vec::new();
        for r in 1..4 {
            for c in 1..4 {
                on.push((r, c));
            }
        }
        let b = mask_from(5, 5, &on).boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn argmax_ties_are_background() {
        let m = Mask::from_class_scores(1, 3, &[0.5, 0.2, 0.9, 0.5, 0.8, 0.1]).unwrap();
        assert_eq!(m.bits(), &[false, true, false]);
    }

    #[test]
    fn bwt_avg_cases() {
        let m = MetricMatrix::from_rows(&[vec![0.8, 0.0], vec![0.7, 0.9]]).unwrap();
        assert!((m.bwt().unwrap() + 0.1).abs() < 1e-12);
        let mut h = MetricMatrix::new(3);
        h.set(0, 0, 10.0);
        h.set(1, 1, 12.0);
        h.set(2, 2, 9.0);
        h.set(2, 0, 20.0);
        h.set(2, 1, 15.0);
        assert_eq!(h.bwt().unwrap(), 6.5);
        let m = MetricMatrix::from_rows(&[vec![0.5, 0.5], vec![0.6, 0.8]]).unwrap();
        assert!((m.avg().unwrap() - 0.7).abs() < 1e-15);
        let one = MetricMatrix::from_rows(&[vec![0.42]]).unwrap();
        assert_eq!(one.avg().unwrap(), 0.42);
        assert!(one.bwt().is_err());
        let flat = MetricMatrix::from_rows(&[vec![0.9, 0.0], vec![0.9, 0.9]]).unwrap();
        assert_eq!(flat.bwt().unwrap(), 0.0);
    }

    #[test]
    fn forgetting_curve_cases() {
        let m = MetricMatrix::from_rows(&[
            vec![0.9, 0.1, 0.1],
            vec![0.8, 0.9, 0.1],
            vec![0.7, 0.85, 0.9],
        ])
        .unwrap();
        assert_eq!(m.forgetting_curve(0).unwrap(), vec![0.9, 0.8, 0.7]);
        assert_eq!(m.forgetting_curve(2).unwrap().len(), 1);
        assert!(m.forgetting_curve(3).is_err());
    }

    fn arb_mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn dice_dominates_iou((a, b) in arb_mask_pair()) {
            let d = dice(&a, &b).unwrap();
            let j = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert!(d >= j - 1e-15);
        }

        #[test]
        fn hd95_symmetric_and_nonnegative((a, b) in arb_mask_pair()) {
            let ab = hd95(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, hd95(&b, &a).unwrap());
        }
    }
}
