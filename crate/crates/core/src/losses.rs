//! Training objective terms as pure functions.
//!
//! Pretrained networks are out of the picture: feature-space losses take
//! [`FeatureStack`]s produced by any [`FeatureExtractor`].

use thiserror::Error;

use crate::tensor::Tensor4;

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("probability {value} at a labeled pixel is not positive")]
    NonPositiveProbability { value: f64 },
    #[error("probability {value} exceeds 1")]
    ProbabilityAboveOne { value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

/// Multi-scale features of one image, coarse or fine in any fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub levels: Vec<Tensor4>,
    pub provenance: String,
}

impl FeatureStack {
    pub fn new(levels: Vec<Tensor4>, provenance: impl Into<String>) -> Result<Self, LossError> {
        if levels.is_empty() {
            return Err(LossError::Empty("feature stack"));
        }
        Ok(Self {
            levels,
            provenance: provenance.into(),
        })
    }
}

/// Anything that maps an image to a [`FeatureStack`].
pub trait FeatureExtractor {
    fn extract(&self, image: &Tensor4) -> FeatureStack;
}

/// Stand-in extractor: the image itself followed by repeated 2x2 average
/// pools, `levels` tensors in total.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolPyramid {
    pub levels: usize,
}

impl FeatureExtractor for AvgPoolPyramid {
    fn extract(&self, image: &Tensor4) -> FeatureStack {
        let mut levels = vec![image.clone()];
        while levels.len() < self.levels.max(1) {
            let prev = levels.last().unwrap();
            let [n, c, h, w] = prev.dims();
            let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
            let next = Tensor4::from_fn([n, c, oh, ow], |b, ch, y, x| {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for sy in 2 * y..(2 * y + 2).min(h) {
                    for sx in 2 * x..(2 * x + 2).min(w) {
                        acc += prev.get(b, ch, sy, sx);
                        cnt += 1.0;
                    }
                }
                acc / cnt
            });
            levels.push(next);
        }
        FeatureStack {
            levels,
            provenance: format!("avg-pool pyramid ({} levels)", self.levels),
        }
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

/// Discriminator hinge loss: `mean(relu(1 - d_real)) + mean(relu(1 + d_fake))`.
pub fn hinge_d(d_real: &[f64], d_fake: &[f64]) -> Result<f64, LossError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(LossError::Empty("score map"));
    }
    let real = mean(d_real.iter().map(|&d| -(d - 1.0).min(0.0)));
    let fake = mean(d_fake.iter().map(|&d| -(-1.0 - d).min(0.0)));
    Ok(real + fake)
}

/// Generator adversarial loss: `-mean(d_fake)`.
pub fn hinge_g(d_fake: &[f64]) -> Result<f64, LossError> {
    if d_fake.is_empty() {
        return Err(LossError::Empty("score map"));
    }
    Ok(-mean(d_fake.iter().copied()))
}

fn level_l1(a: &Tensor4, b: &Tensor4, level: usize) -> Result<f64, LossError> {
    if a.dims() != b.dims() {
        return Err(LossError::ShapeMismatch(format!(
            "level {level}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
}

fn check_depth(real: &FeatureStack, fake: &FeatureStack) -> Result<(), LossError> {
    if real.levels.len() != fake.levels.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} vs {} levels",
            real.levels.len(),
            fake.levels.len()
        )));
    }
    Ok(())
}

/// Sum over levels of the mean absolute difference.
pub fn feature_matching(real: &FeatureStack, fake: &FeatureStack) -> Result<f64, LossError> {
    check_depth(real, fake)?;
    let mut total = 0.0;
    for (i, (r, f)) in real.levels.iter().zip(&fake.levels).enumerate() {
        let l1 = level_l1(r, f, i)?;
        if !r.is_empty() {
            total += l1 / r.len() as f64;
        }
    }
    Ok(total)
}

/// Sum over levels of the plain (unnormalized) L1 distance.
pub fn perceptual(real_feats: &FeatureStack, fake_feats: &FeatureStack) -> Result<f64, LossError> {
    check_depth(real_feats, fake_feats)?;
    real_feats
        .levels
        .iter()
        .zip(&fake_feats.levels)
        .enumerate()
        .map(|(i, (r, f))| level_l1(f, r, i))
        .sum()
}

/// [`perceptual`] on features drawn from `extractor`.
pub fn perceptual_with<E: FeatureExtractor>(extractor: &E, real: &Tensor4, fake: &Tensor4) -> Result<f64, LossError> {
    perceptual(&extractor.extract(real), &extractor.extract(fake))
}

/// Per-class weights `H·W / pixel count` for each batch item; absent
/// classes get 0. Indexed `[batch][class]`.
pub fn class_weights(seg_onehot: &Tensor4) -> Vec<Vec<f64>> {
    let [n, c, h, w] = seg_onehot.dims();
    let area = (h * w) as f64;
    (0..n)
        .map(|b| {
            (0..c)
                .map(|ch| {
                    let count: f64 = seg_onehot.plane(b, ch).iter().sum();
                    if count > 0.0 {
                        area / count
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Class-weighted cross-entropy of both segmentations against the layout,
/// summed over pixels and over the batch.
pub fn semantic_alignment(
    seg_onehot: &Tensor4,
    seg_probs_real: &Tensor4,
    seg_probs_fake: &Tensor4,
) -> Result<f64, LossError> {
    for (name, t) in [("real", seg_probs_real), ("fake", seg_probs_fake)] {
        if t.dims() != seg_onehot.dims() {
            return Err(LossError::ShapeMismatch(format!(
                "{name} probabilities {:?} vs layout {:?}",
                t.dims(),
                seg_onehot.dims()
            )));
        }
    }
    let weights = class_weights(seg_onehot);
    let [n, c, _, _] = seg_onehot.dims();
    let log_p = |p: f64| -> Result<f64, LossError> {
        if !(p > 0.0) {
            return Err(LossError::NonPositiveProbability { value: p });
        }
        if p > 1.0 + 1e-9 {
            return Err(LossError::ProbabilityAboveOne { value: p });
        }
        Ok(p.max(PROB_FLOOR).ln())
    };
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let wgt = weights[b][ch];
            if wgt == 0.0 {
                continue;
            }
            let s = seg_onehot.plane(b, ch);
            let pr = seg_probs_real.plane(b, ch);
            let pf = seg_probs_fake.plane(b, ch);
            let mut acc = 0.0;
            for i in 0..s.len() {
                if s[i] != 0.0 {
                    acc += s[i] * (log_p(pr[i])? + log_p(pf[i])?);
                }
            }
            total -= wgt * acc;
        }
    }
    Ok(total)
}

/// Trade-off weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub fm: f64,
    pub perc: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            fm: 10.0,
            perc: 10.0,
            seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(adv: f64, fm: f64, perc: f64, seg: f64) -> Result<Self, LossError> {
        let w = Self { adv, fm, perc, seg };
        if [adv, fm, perc, seg].iter().any(|v| !(*v >= 0.0)) {
            return Err(LossError::ShapeMismatch(format!("loss weights must be nonnegative: {w:?}")));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub adv_g: f64,
    pub fm: f64,
    pub perc: f64,
    pub seg: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.adv * parts.adv_g + w.fm * parts.fm + w.perc * parts.perc + w.seg * parts.seg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(dims: [usize; 4], v: f64) -> Tensor4 {
        Tensor4::from_fn(dims, |_, _, _, _| v)
    }

    fn stack(levels: Vec<Tensor4>) -> FeatureStack {
        FeatureStack::new(levels, "test").unwrap()
    }

    #[test]
    fn hinge_d_values() {
        assert_eq!(hinge_d(&[2.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(hinge_d(&[0.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(hinge_d(&[1.0, -1.0], &[-1.0, -1.0]).unwrap(), 1.0);
        assert!(hinge_d(&[], &[0.0]).is_err());
    }

    #[test]
    fn hinge_g_values() {
        assert_eq!(hinge_g(&[0.5]).unwrap(), -0.5);
        assert_eq!(hinge_g(&[0.0]).unwrap(), 0.0);
        assert_eq!(hinge_g(&[1.0, 3.0]).unwrap(), -2.0);
    }

    #[test]
    fn feature_matching_values() {
        let a = stack(vec![filled([1, 2, 3, 3], 1.0)]);
        let b = stack(vec![filled([1, 2, 3, 3], 0.0)]);
        assert_eq!(feature_matching(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_matching(&a, &b).unwrap(), 1.0);

        let r = stack(vec![filled([1, 1, 2, 2], 0.5), filled([1, 3, 4, 4], 0.25)]);
        let f = stack(vec![filled([1, 1, 2, 2], 0.0), filled([1, 3, 4, 4], 0.0)]);
        assert_eq!(feature_matching(&r, &f).unwrap(), 0.75);

        let bad = stack(vec![filled([1, 2, 3, 2], 0.0)]);
        assert!(matches!(feature_matching(&a, &bad), Err(LossError::ShapeMismatch(_))));
    }

    #[test]
    fn perceptual_values() {
        let base = filled([1, 1, 2, 2], 0.0);
        assert_eq!(perceptual(&stack(vec![base.clone()]), &stack(vec![base.clone()])).unwrap(), 0.0);

        let mut three = base.clone();
        three.data_mut()[..3].fill(1.0);
        assert_eq!(perceptual(&stack(vec![base.clone()]), &stack(vec![three])).unwrap(), 3.0);

        let r = stack(vec![filled([1, 1, 1, 2], 0.0), filled([1, 1, 1, 5], 0.0)]);
        let f = stack(vec![filled([1, 1, 1, 2], 1.0), filled([1, 1, 1, 5], -1.0)]);
        assert_eq!(perceptual(&r, &f).unwrap(), 7.0);
    }

    #[test]
    fn perceptual_through_extractor() {
        let e = AvgPoolPyramid { levels: 5 };
        let img = Tensor4::from_fn([1, 3, 16, 16], |_, c, y, x| (c + y * x) as f64 * 0.01);
        let feats = e.extract(&img);
        assert_eq!(feats.levels.len(), 5);
        assert_eq!(feats.levels[4].dims(), [1, 3, 1, 1]);
        assert_eq!(perceptual_with(&e, &img, &img).unwrap(), 0.0);
    }

    #[test]
    fn class_weights_values() {
        // 4x4 map: class 0 covers 8 pixels, class 1 covers 8, class 2 absent.
        let seg = Tensor4::from_fn([1, 3, 4, 4], |_, c, y, _| match c {
            0 => (y < 2) as u8 as f64,
            1 => (y >= 2) as u8 as f64,
            _ => 0.0,
        });
        assert_eq!(class_weights(&seg), vec![vec![2.0, 2.0, 0.0]]);
        let all = filled([1, 1, 4, 4], 1.0);
        assert_eq!(class_weights(&all), vec![vec![1.0]]);
    }

    #[test]
    fn semantic_alignment_values() {
        let seg = Tensor4::from_fn([1, 2, 2, 2], |_, c, _, _| (c == 0) as u8 as f64);
        assert_eq!(semantic_alignment(&seg, &seg, &seg).unwrap(), 0.0);

        let half = filled([1, 2, 2, 2], 0.5);
        let v = semantic_alignment(&seg, &half, &half).unwrap();
        assert!((v - 8.0 * 2f64.ln()).abs() < 1e-12);

        let mut tiny = seg.clone();
        tiny.data_mut()[0] = 1e-300;
        let v = semantic_alignment(&seg, &seg, &tiny).unwrap();
        assert!((v + PROB_FLOOR.ln()).abs() < 1e-9 && v.is_finite());

        let mut zero = seg.clone();
        zero.data_mut()[0] = 0.0;
        assert!(matches!(
            semantic_alignment(&seg, &zero, &seg),
            Err(LossError::NonPositiveProbability { .. })
        ));
    }

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        let ones = LossParts {
            adv_g: 1.0,
            fm: 1.0,
            perc: 1.0,
            seg: 1.0,
        };
        assert_eq!(total_loss(&ones, &w), 22.0);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let mixed = LossParts {
            adv_g: -0.5,
            fm: 0.1,
            perc: 0.2,
            seg: 0.3,
        };
        assert!((total_loss(&mixed, &w) - 2.8).abs() < 1e-12);
        assert!(LossWeights::new(1.0, -1.0, 0.0, 0.0).is_err());
    }
}
