//! Training objectives: L1 + structural-similarity reconstruction, feature
//! content loss, channel-statistics style loss, identity-pulling consistency
//! loss, and their weighted total.

use crate::model::FeaturePyramid;
use crate::tensor::{Tape, TensorError, TensorId};
use crate::STATS_EPSILON;

/// Uniform window edge used by the structural-similarity term.
pub const SSIM_WINDOW: usize = 7;
/// Stabilizers for a unit dynamic range: `(0.01·L)²` and `(0.03·L)²`.
pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;

/// Weights balancing the phase-2 objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_style: f32,
    pub lambda_content: f32,
    pub lambda_consistency: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_style: 100.0,
            lambda_content: 150.0,
            lambda_consistency: 200.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> bool {
        self.lambda_style >= 0.0 && self.lambda_content >= 0.0 && self.lambda_consistency >= 0.0
    }

    pub fn without_consistency(mut self) -> Self {
        self.lambda_consistency = 0.0;
        self
    }
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    let diff = tape.sub(a, b)?;
    let mag = tape.abs(diff);
    Ok(tape.mean(mag))
}

/// `1 − mean SSIM` over all valid `SSIM_WINDOW`³ neighbourhoods (uniform
/// window). Inputs are nominally in `[0, 1]`.
pub fn ssim_loss(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "ssim_loss",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let mu_a = tape.boxfilter3d(a, SSIM_WINDOW)?;
    let mu_b = tape.boxfilter3d(b, SSIM_WINDOW)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mean_aa = tape.boxfilter3d(aa, SSIM_WINDOW)?;
    let mean_bb = tape.boxfilter3d(bb, SSIM_WINDOW)?;
    let mean_ab = tape.boxfilter3d(ab, SSIM_WINDOW)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(mean_aa, mu_a2)?;
    let var_b = tape.sub(mean_bb, mu_b2)?;
    let cov = tape.sub(mean_ab, mu_ab)?;

    let lum_num = {
        let t = tape.mul_scalar(mu_ab, 2.0);
        tape.add_scalar(t, SSIM_C1)
    };
    let lum_den = {
        let t = tape.add(mu_a2, mu_b2)?;
        tape.add_scalar(t, SSIM_C1)
    };
    let con_num = {
        let t = tape.mul_scalar(cov, 2.0);
        tape.add_scalar(t, SSIM_C2)
    };
    let con_den = {
        let t = tape.add(var_a, var_b)?;
        tape.add_scalar(t, SSIM_C2)
    };
    let num = tape.mul(lum_num, con_num)?;
    let den = tape.mul(lum_den, con_den)?;
    let ssim_map = tape.div(num, den)?;
    let mean = tape.mean(ssim_map);
    let neg = tape.mul_scalar(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Equal-weight blend of L1 and SSIM terms.
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: TensorId,
    original: TensorId,
) -> Result<TensorId, TensorError> {
    let l1 = l1_loss(tape, pred, original)?;
    let ssim = ssim_loss(tape, pred, original)?;
    let l1_half = tape.mul_scalar(l1, 0.5);
    let ssim_half = tape.mul_scalar(ssim, 0.5);
    tape.add(l1_half, ssim_half)
}

/// Mean squared difference between the deepest re-encoded prediction
/// features and the translated features the decoder consumed.
pub fn content_loss(
    tape: &mut Tape,
    pred_phi4: TensorId,
    adain_output: TensorId,
) -> Result<TensorId, TensorError> {
    let diff = tape.sub(pred_phi4, adain_output)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Squared distance between per-channel means and standard deviations,
/// summed over all four pyramid levels and averaged over the batch.
pub fn style_loss(
    tape: &mut Tape,
    pred: &FeaturePyramid,
    target: &FeaturePyramid,
) -> Result<TensorId, TensorError> {
    let mut total: Option<TensorId> = None;
    for k in 0..4 {
        if tape.shape(pred.phi[k]) != tape.shape(target.phi[k]) {
            return Err(TensorError::ShapeMismatch {
                op: "style_loss",
                lhs: tape.shape(pred.phi[k]).to_vec(),
                rhs: tape.shape(target.phi[k]).to_vec(),
            });
        }
        let batch = tape.shape(pred.phi[k])[0] as f32;
        let (mu_p, sd_p) = tape.channel_stats(pred.phi[k], STATS_EPSILON)?;
        let (mu_t, sd_t) = tape.channel_stats(target.phi[k], STATS_EPSILON)?;
        let dm = tape.sub(mu_p, mu_t)?;
        let dm2 = tape.mul(dm, dm)?;
        let ds = tape.sub(sd_p, sd_t)?;
        let ds2 = tape.mul(ds, ds)?;
        let sum_m = tape.sum(dm2);
        let sum_s = tape.sum(ds2);
        let level = tape.add(sum_m, sum_s)?;
        let level = tape.mul_scalar(level, 1.0 / batch);
        total = Some(match total {
            None => level,
            Some(t) => tape.add(t, level)?,
        });
    }
    Ok(total.expect("four levels"))
}

/// Identity regularizer pulling the prediction toward the input; shares the
/// reconstruction-loss definition.
pub fn consistency_loss(
    tape: &mut Tape,
    pred: TensorId,
    input: TensorId,
) -> Result<TensorId, TensorError> {
    reconstruction_loss(tape, pred, input)
}

/// The three phase-2 terms plus their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct Phase2Loss {
    pub total: TensorId,
    pub content: TensorId,
    pub style: TensorId,
    pub consistency: TensorId,
}

/// `λ_content·content + λ_style·style + λ_consistency·consistency`.
pub fn phase2_total(
    tape: &mut Tape,
    pred: TensorId,
    input: TensorId,
    pred_features: &FeaturePyramid,
    target_features: &FeaturePyramid,
    adain_output: TensorId,
    weights: &LossWeights,
) -> Result<Phase2Loss, TensorError> {
    let content = content_loss(tape, pred_features.top(), adain_output)?;
    let style = style_loss(tape, pred_features, target_features)?;
    let consistency = consistency_loss(tape, pred, input)?;
    let wc = tape.mul_scalar(content, weights.lambda_content);
    let ws = tape.mul_scalar(style, weights.lambda_style);
    let wk = tape.mul_scalar(consistency, weights.lambda_consistency);
    let partial = tape.add(wc, ws)?;
    let total = tape.add(partial, wk)?;
    Ok(Phase2Loss {
        total,
        content,
        style,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn pyramid_from(tape: &mut Tape, tensors: [Tensor; 4]) -> FeaturePyramid {
        let phi = tensors.map(|t| tape.leaf(t));
        FeaturePyramid { phi }
    }

    #[test]
    fn l1_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[1, 1, 8, 8, 8], 1, 0.0, 1.0));
        let same = l1_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let zero = tape.leaf(Tensor::zeros(vec![1]));
        let one = tape.leaf(Tensor::scalar(1.0));
        let unit = l1_loss(&mut tape, zero, one).unwrap();
        assert_eq!(tape.scalar_value(unit), 1.0);
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let a = random_tensor(&[1, 1, 8, 8, 8], 3, 0.0, 1.0);
        let b = random_tensor(&[1, 1, 8, 8, 8], 5, 0.0, 1.0);
        let expect: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.numel() as f64;
        let mut tape = Tape::new();
        let ai = tape.leaf(a);
        let bi = tape.leaf(b);
        let loss = l1_loss(&mut tape, ai, bi).unwrap();
        assert!((tape.scalar_value(loss) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[1, 1, 8, 8, 8], 7, 0.0, 1.0));
        let loss = ssim_loss(&mut tape, x, x).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-5);
    }

    #[test]
    fn ssim_constant_mismatch_matches_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 1, 8, 8, 8]));
        let b = tape.leaf(Tensor::full(vec![1, 1, 8, 8, 8], 1.0));
        let loss = ssim_loss(&mut tape, a, b).unwrap();
        // constant patches: ssim = (2·0·1 + C1)·C2 / ((0 + 1 + C1)·C2)
        let expect = 1.0 - SSIM_C1 / (1.0 + SSIM_C1);
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn ssim_small_perturbation_gives_small_loss() {
        let a = random_tensor(&[1, 1, 10, 10, 10], 9, 0.2, 0.8);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in b.data_mut() {
            *v += rng.random_range(-0.005..0.005);
        }
        let mut tape = Tape::new();
        let ai = tape.leaf(a);
        let bi = tape.leaf(b);
        let loss = ssim_loss(&mut tape, ai, bi).unwrap();
        assert!(tape.scalar_value(loss) < 0.05, "{}", tape.scalar_value(loss));
    }

    #[test]
    fn ssim_rejects_window_underflow() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4, 4]));
        let b = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4, 4]));
        assert!(ssim_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn reconstruction_is_half_l1_plus_half_ssim() {
        let a = random_tensor(&[1, 1, 8, 8, 8], 13, 0.0, 1.0);
        let b = random_tensor(&[1, 1, 8, 8, 8], 17, 0.0, 1.0);
        let mut tape = Tape::new();
        let ai = tape.leaf(a);
        let bi = tape.leaf(b);
        let l1 = l1_loss(&mut tape, ai, bi).unwrap();
        let ssim = ssim_loss(&mut tape, ai, bi).unwrap();
        let rec = reconstruction_loss(&mut tape, ai, bi).unwrap();
        let expect = 0.5 * tape.scalar_value(l1) + 0.5 * tape.scalar_value(ssim);
        assert!((tape.scalar_value(rec) - expect).abs() < 1e-6);
        let same = reconstruction_loss(&mut tape, ai, ai).unwrap();
        assert!(tape.scalar_value(same).abs() < 1e-5);
    }

    #[test]
    fn reconstruction_decreases_along_linear_path() {
        let target = random_tensor(&[1, 1, 8, 8, 8], 19, 0.2, 0.8);
        let start = random_tensor(&[1, 1, 8, 8, 8], 23, 0.2, 0.8);
        let mut last = f32::INFINITY;
        for step in 0..5 {
            let t = step as f32 / 4.0;
            let mut probe = start.clone();
            for (p, goal) in probe.data_mut().iter_mut().zip(target.data()) {
                *p = *p * (1.0 - t) + goal * t;
            }
            let mut tape = Tape::new();
            let pi = tape.leaf(probe);
            let gi = tape.leaf(target.clone());
            let loss = reconstruction_loss(&mut tape, pi, gi).unwrap();
            let v = tape.scalar_value(loss);
            assert!(v < last, "step {step}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn content_loss_basics_and_homogeneity() {
        let a = random_tensor(&[1, 4, 2, 2, 2], 29, -1.0, 1.0);
        let b = random_tensor(&[1, 4, 2, 2, 2], 31, -1.0, 1.0);
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone());
        let bi = tape.leaf(b.clone());
        let same = content_loss(&mut tape, ai, ai).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let l = content_loss(&mut tape, ai, bi).unwrap();
        // elementwise oracle
        let expect: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.numel() as f64;
        assert!((tape.scalar_value(l) as f64 - expect).abs() < 1e-6);

        // scaling the difference by c scales the loss by c²
        let mut scaled = a.clone();
        for (s, (x, y)) in scaled.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
            *s = y + 3.0 * (x - y);
        }
        let si = tape.leaf(scaled);
        let l9 = content_loss(&mut tape, si, bi).unwrap();
        let ratio = tape.scalar_value(l9) / tape.scalar_value(l);
        assert!((ratio - 9.0).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn style_loss_zero_for_same_pyramid() {
        let mut tape = Tape::new();
        let t: [Tensor; 4] = std::array::from_fn(|k| {
            random_tensor(&[1, 2, 4 >> k.min(2), 4 >> k.min(2), 4 >> k.min(2)], 37 + k as u64, 0.0, 1.0)
        });
        let p1 = pyramid_from(&mut tape, t.clone());
        let p2 = pyramid_from(&mut tape, t);
        let l = style_loss(&mut tape, &p1, &p2).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-9);
    }

    #[test]
    fn style_loss_invariant_under_spatial_permutation() {
        let base: [Tensor; 4] =
            std::array::from_fn(|k| random_tensor(&[1, 2, 4, 4, 4], 41 + k as u64, 0.0, 1.0));
        let permuted: [Tensor; 4] = std::array::from_fn(|k| {
            let mut t = base[k].clone();
            // reverse each channel's voxels: a spatial permutation
            let n = 64;
            for c in 0..2 {
                t.data_mut()[c * n..(c + 1) * n].reverse();
            }
            t
        });
        let mut tape = Tape::new();
        let p = pyramid_from(&mut tape, base);
        let q = pyramid_from(&mut tape, permuted);
        let l = style_loss(&mut tape, &p, &q).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-8, "{}", tape.scalar_value(l));
    }

    #[test]
    fn style_loss_hand_built_statistics_case() {
        // level 1 differs with stats (0,1) vs (1,2); other levels identical.
        // values {-1, 1} ⇒ mean 0, var 1; {-1, 3} ⇒ mean 1, var 4.
        let mk = |lo: f32, hi: f32| {
            let data: Vec<f32> = (0..8).map(|i| if i % 2 == 0 { lo } else { hi }).collect();
            Tensor::new(vec![1, 1, 2, 2, 2], data).unwrap()
        };
        let shared: [Tensor; 3] =
            std::array::from_fn(|k| random_tensor(&[1, 1, 2, 2, 2], 43 + k as u64, 0.0, 1.0));
        let mut tape = Tape::new();
        let p = pyramid_from(
            &mut tape,
            [mk(-1.0, 1.0), shared[0].clone(), shared[1].clone(), shared[2].clone()],
        );
        let q = pyramid_from(
            &mut tape,
            [mk(-1.0, 3.0), shared[0].clone(), shared[1].clone(), shared[2].clone()],
        );
        let l = style_loss(&mut tape, &p, &q).unwrap();
        // (0-1)² + (1-2)² = 2
        assert!((tape.scalar_value(l) - 2.0).abs() < 1e-4, "{}", tape.scalar_value(l));
    }

    #[test]
    fn consistency_equals_reconstruction_by_construction() {
        let a = random_tensor(&[1, 1, 8, 8, 8], 47, 0.0, 1.0);
        let b = random_tensor(&[1, 1, 8, 8, 8], 53, 0.0, 1.0);
        let mut tape = Tape::new();
        let ai = tape.leaf(a);
        let bi = tape.leaf(b);
        let c = consistency_loss(&mut tape, ai, bi).unwrap();
        let r = reconstruction_loss(&mut tape, ai, bi).unwrap();
        assert_eq!(tape.scalar_value(c), tape.scalar_value(r));
    }

    #[test]
    fn phase2_total_weighting() {
        // unit component losses ⇒ total = λc + λs + λk = 450 by default
        let mut tape = Tape::new();
        let one = tape.leaf(Tensor::scalar(1.0));
        let w = LossWeights::default();
        let wc = tape.mul_scalar(one, w.lambda_content);
        let ws = tape.mul_scalar(one, w.lambda_style);
        let wk = tape.mul_scalar(one, w.lambda_consistency);
        let t = tape.add(wc, ws).unwrap();
        let t = tape.add(t, wk).unwrap();
        assert_eq!(tape.scalar_value(t), 450.0);
    }

    #[test]
    fn phase2_total_composes_components() {
        let pred = random_tensor(&[1, 1, 8, 8, 8], 59, 0.1, 0.9);
        let input = random_tensor(&[1, 1, 8, 8, 8], 61, 0.1, 0.9);
        let phi: [Tensor; 4] =
            std::array::from_fn(|k| random_tensor(&[1, 2, 2, 2, 2], 67 + k as u64, 0.0, 1.0));
        let tphi: [Tensor; 4] =
            std::array::from_fn(|k| random_tensor(&[1, 2, 2, 2, 2], 71 + k as u64, 0.0, 1.0));
        let adain_out = random_tensor(&[1, 2, 2, 2, 2], 73, 0.0, 1.0);

        let mut tape = Tape::new();
        let pi = tape.leaf(pred);
        let ii = tape.leaf(input);
        let pp = pyramid_from(&mut tape, phi);
        let tp = pyramid_from(&mut tape, tphi);
        let ai = tape.leaf(adain_out);

        let weights = LossWeights::default();
        let loss = phase2_total(&mut tape, pi, ii, &pp, &tp, ai, &weights).unwrap();
        let expect = weights.lambda_content * tape.scalar_value(loss.content)
            + weights.lambda_style * tape.scalar_value(loss.style)
            + weights.lambda_consistency * tape.scalar_value(loss.consistency);
        assert!((tape.scalar_value(loss.total) - expect).abs() < expect.abs() * 1e-5 + 1e-5);

        // weights (0,0,1) reduce the total to the consistency term
        let only_k = LossWeights {
            lambda_style: 0.0,
            lambda_content: 0.0,
            lambda_consistency: 1.0,
        };
        let reduced = phase2_total(&mut tape, pi, ii, &pp, &tp, ai, &only_k).unwrap();
        assert_eq!(
            tape.scalar_value(reduced.total),
            tape.scalar_value(reduced.consistency)
        );
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        // L1 away from kinks: keep |a - b| bounded away from 0
        let a = {
            let mut t = random_tensor(&[1, 1, 8, 8, 8], 79, 0.5, 0.9);
            for v in t.data_mut() {
                *v += 0.05;
            }
            t
        };
        let b = random_tensor(&[1, 1, 8, 8, 8], 83, 0.0, 0.4);
        let err = check_gradients(
            |tape, ai| {
                let bi = tape.leaf(b.clone());
                l1_loss(tape, ai, bi).unwrap()
            },
            &a,
            1e-3,
        );
        assert!(err < 1e-2, "l1: {err}");

        let err = check_gradients(
            |tape, ai| {
                let bi = tape.leaf(b.clone());
                ssim_loss(tape, ai, bi).unwrap()
            },
            &a,
            1e-3,
        );
        assert!(err < 1e-2, "ssim: {err}");

        let adain_out = random_tensor(&[1, 2, 2, 2, 2], 89, 0.0, 1.0);
        let err = check_gradients(
            |tape, xi| {
                let ai = tape.leaf(adain_out.clone());
                content_loss(tape, xi, ai).unwrap()
            },
            &random_tensor(&[1, 2, 2, 2, 2], 97, 0.0, 1.0),
            1e-3,
        );
        assert!(err < 1e-2, "content: {err}");

        // style loss wrt the first pyramid level, other levels fixed
        let fixed: [Tensor; 3] =
            std::array::from_fn(|k| random_tensor(&[1, 2, 2, 2, 2], 101 + k as u64, 0.0, 1.0));
        let target: [Tensor; 4] =
            std::array::from_fn(|k| random_tensor(&[1, 2, 2, 2, 2], 107 + k as u64, 0.0, 1.0));
        let err = check_gradients(
            |tape, xi| {
                let pred = FeaturePyramid {
                    phi: [
                        xi,
                        tape.leaf(fixed[0].clone()),
                        tape.leaf(fixed[1].clone()),
                        tape.leaf(fixed[2].clone()),
                    ],
                };
                let tgt = pyramid_from(tape, target.clone());
                style_loss(tape, &pred, &tgt).unwrap()
            },
            &random_tensor(&[1, 2, 2, 2, 2], 113, 0.0, 1.0),
            1e-3,
        );
        assert!(err < 1e-2, "style: {err}");
    }
}
