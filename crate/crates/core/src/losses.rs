//! Training objectives: text-to-pixel contrastive loss for segmentation,
//! smooth L1 on the grasp maps, and the self-supervised motion loss for
//! affordance training.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::heads::{GraspMaps, RgsOutput, NUM_ROTATIONS};

/// Binary site labels over the stride-4 grid. Every site is either positive
/// or negative, so the two classes partition the grid by construction.
#[derive(Clone, Debug)]
pub struct PixelLabelField {
    /// Row-major over the stride-4 grid; true = positive class.
    pub positive: Vec<bool>,
}

impl PixelLabelField {
    pub fn new(positive: Vec<bool>) -> Result<Self> {
        if positive.is_empty() {
            return Err(Error::Loss("label field has no sites".into()));
        }
        Ok(PixelLabelField { positive })
    }

    /// Downsample a full-resolution binary mask to the stride-4 grid; a site
    /// is positive when the majority of its 4x4 block is.
    pub fn from_mask(mask: &Array2<bool>) -> Result<Self> {
        let (h, w) = mask.dim();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Loss(format!("mask {h}x{w} not divisible by 4")));
        }
        let mut positive = Vec::with_capacity(h / 4 * (w / 4));
        for by in 0..h / 4 {
            for bx in 0..w / 4 {
                let mut count = 0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        if mask[(by * 4 + dy, bx * 4 + dx)] {
                            count += 1;
                        }
                    }
                }
                positive.push(count > 8);
            }
        }
        PixelLabelField::new(positive)
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Per-site sigmoid contrast between the kernel-projected sentence feature
/// and pixel features, realized on the head's logit map:
/// mean over sites of -log sigma(z_i) for positives and
/// -log(1 - sigma(z_i)) for negatives.
pub fn text_to_pixel_contrastive(
    t: &mut Tape,
    logits: Var,
    labels: &PixelLabelField,
) -> Result<Var> {
    let n = t.value(logits).len();
    if n == 0 || labels.positive.is_empty() {
        return Err(Error::Loss("contrastive loss over an empty site set".into()));
    }
    if n != labels.positive.len() {
        return Err(Error::Loss(format!(
            "{n} logits vs {} labels",
            labels.positive.len()
        )));
    }
    let flat = t.reshape(logits, &[n]);
    // -log sigma(z) = softplus(-z); -log(1-sigma(z)) = softplus(z)
    let signs: Vec<f64> = labels
        .positive
        .iter()
        .map(|&p| if p { -1.0 } else { 1.0 })
        .collect();
    let signs = ArrayD::from_shape_vec(IxDyn(&[n]), signs).unwrap();
    let signed = t.mul_const(flat, &signs);
    let per_site = t.softplus(signed);
    Ok(t.mean_all(per_site))
}

/// Plain smooth-L1 (beta = 1) between a prediction map and a constant
/// target, averaged over the sites selected by `valid` (all sites when
/// `valid` is `None`).
pub fn smooth_l1_mean(
    t: &mut Tape,
    pred: Var,
    target: &ArrayD<f64>,
    valid: Option<&[bool]>,
) -> Result<Var> {
    if t.shape(pred) != target.shape() {
        return Err(Error::Loss(format!(
            "prediction shape {:?} vs target {:?}",
            t.shape(pred),
            target.shape()
        )));
    }
    let n = target.len();
    let d = t.sub_const(pred, target);
    let sl = t.smooth_l1(d, 1.0);
    match valid {
        None => Ok(t.mean_all(sl)),
        Some(mask) => {
            if mask.len() != n {
                return Err(Error::Loss("valid mask length mismatch".into()));
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Loss("valid mask selects no site".into()));
            }
            let sel: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let sel = ArrayD::from_shape_vec(IxDyn(&[n]), sel).unwrap();
            let flat = t.reshape(sl, &[n]);
            let masked = t.mul_const(flat, &sel);
            let total = t.sum_all(masked);
            Ok(t.scale(total, 1.0 / count as f64))
        }
    }
}

/// Combined smooth-L1 over the three grasp heads. Quality is supervised on
/// every site (1 inside the rasterized rectangles, 0 elsewhere); angle
/// (through its sin/cos channels) and width (normalized by the maximum
/// gripper width) only on the valid sites inside the rectangles.
pub fn smooth_l1_maps(
    t: &mut Tape,
    out: &RgsOutput,
    target: &GraspMaps,
    valid: &Array2<bool>,
    max_width_px: f64,
) -> Result<Var> {
    let (h, w) = target.quality.dim();
    if valid.dim() != (h, w) {
        return Err(Error::Loss("valid mask shape mismatch".into()));
    }
    if !valid.iter().any(|&m| m) {
        return Err(Error::Loss("no valid grasp sites".into()));
    }
    let valid_flat: Vec<bool> = valid.iter().copied().collect();

    let q_target = target.quality.clone().into_dyn();
    let l_q = smooth_l1_mean(t, out.quality, &q_target, None)?;

    let sin_target = target.angle.mapv(|a| (2.0 * a).sin()).into_dyn();
    let cos_target = target.angle.mapv(|a| (2.0 * a).cos()).into_dyn();
    let l_sin = smooth_l1_mean(t, out.sin, &sin_target, Some(&valid_flat))?;
    let l_cos = smooth_l1_mean(t, out.cos, &cos_target, Some(&valid_flat))?;
    let l_angle = t.add(l_sin, l_cos);
    let l_angle = t.scale(l_angle, 0.5);

    let w_target = target.width.mapv(|p| p / max_width_px).into_dyn();
    let l_w = smooth_l1_mean(t, out.width_norm, &w_target, Some(&valid_flat))?;

    let qa = t.add(l_q, l_angle);
    Ok(t.add(qa, l_w))
}

/// The executed grasp of one affordance episode.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExecutedAction {
    /// Column of the executed pixel.
    pub x: usize,
    /// Row of the executed pixel.
    pub y: usize,
    /// Rotation channel index, < NUM_ROTATIONS.
    pub rotation: usize,
    pub success: bool,
}

/// Binary cross-entropy between the affordance score at the executed
/// (pixel, rotation) and the observed success; every other site is
/// unsupervised for that sample.
pub fn rga_motion_loss(t: &mut Tape, scores: Var, action: &ExecutedAction) -> Result<Var> {
    let shape = t.shape(scores).to_vec();
    if shape.len() != 3 || shape[2] != NUM_ROTATIONS {
        return Err(Error::Input(format!(
            "affordance stack shape {shape:?}, expected (H, W, {NUM_ROTATIONS})"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if action.y >= h || action.x >= w || action.rotation >= NUM_ROTATIONS {
        return Err(Error::Input(format!(
            "executed action ({}, {}, rot {}) out of bounds for {h}x{w}x{NUM_ROTATIONS}",
            action.x, action.y, action.rotation
        )));
    }
    let flat = (action.y * w + action.x) * NUM_ROTATIONS + action.rotation;
    let p = t.gather(scores, &[flat]);
    let eps = 1e-12;
    let prob = if action.success {
        p
    } else {
        let neg = t.scale(p, -1.0);
        t.add_scalar(neg, 1.0)
    };
    let clamped = t.clamp_min(prob, eps);
    let ln = t.ln(clamped);
    let sum = t.sum_all(ln);
    Ok(t.scale(sum, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn leaf_logits(t: &mut Tape, vals: &[f64]) -> Var {
        t.leaf(ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn all_zero_logits_give_ln_two() {
        let mut t = Tape::new();
        let z = leaf_logits(&mut t, &[0.0; 8]);
        let labels = PixelLabelField::new(vec![true, false, true, false, true, false, true, false])
            .unwrap();
        let l = text_to_pixel_contrastive(&mut t, z, &labels).unwrap();
        assert!((t.scalar(l) - LN2).abs() < 1e-12);
        assert!((LN2 - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn worked_two_site_example() {
        let mut t = Tape::new();
        let z = leaf_logits(&mut t, &[2.0, -2.0]);
        let labels = PixelLabelField::new(vec![true, false]).unwrap();
        let l = text_to_pixel_contrastive(&mut t, z, &labels).unwrap();
        // -log sigma(2) at both sites
        let expect = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((t.scalar(l) - expect).abs() < 1e-9);
        assert!((expect - 0.1269280).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let mut t = Tape::new();
        let z = leaf_logits(&mut t, &[40.0, -40.0]);
        let labels = PixelLabelField::new(vec![true, false]).unwrap();
        let l = text_to_pixel_contrastive(&mut t, z, &labels).unwrap();
        assert!(t.scalar(l) < 1e-12);
    }

    #[test]
    fn loss_monotone_in_logits() {
        let labels = PixelLabelField::new(vec![true, false]).unwrap();
        let eval = |zp: f64, zn: f64| {
            let mut t = Tape::new();
            let z = leaf_logits(&mut t, &[zp, zn]);
            let l = text_to_pixel_contrastive(&mut t, z, &labels).unwrap();
            t.scalar(l)
        };
        let mut prev = eval(-1.0, 1.0);
        for step in 1..6 {
            let cur = eval(-1.0 + step as f64, 1.0 - step as f64);
            assert!(cur < prev, "loss not decreasing at step {step}");
            prev = cur;
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let logits = [1.3, -0.4, 0.9, 2.2, -1.7];
        let labels = [true, false, true, true, false];
        let eval = |order: &[usize]| {
            let mut t = Tape::new();
            let z: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
            let y: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
            let zv = leaf_logits(&mut t, &z);
            let l = text_to_pixel_contrastive(&mut t, zv, &PixelLabelField::new(y).unwrap())
                .unwrap();
            t.scalar(l)
        };
        let a = eval(&[0, 1, 2, 3, 4]);
        let b = eval(&[4, 2, 0, 1, 3]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_site_set_is_a_loss_error() {
        assert!(matches!(
            PixelLabelField::new(vec![]),
            Err(Error::Loss(_))
        ));
    }

    #[test]
    fn label_field_from_mask_partitions_grid() {
        let mut mask = Array2::from_elem((8, 8), false);
        for y in 0..4 {
            for x in 0..4 {
                mask[(y, x)] = true;
            }
        }
        let f = PixelLabelField::from_mask(&mask).unwrap();
        assert_eq!(f.positive.len(), 4);
        assert_eq!(f.num_positive(), 1);
        assert!(f.positive[0]);
    }

    #[test]
    fn smooth_l1_worked_values() {
        let mut t = Tape::new();
        let p = leaf_logits(&mut t, &[0.5]);
        let target = ArrayD::zeros(IxDyn(&[1]));
        let l = smooth_l1_mean(&mut t, p, &target, None).unwrap();
        assert!((t.scalar(l) - 0.125).abs() < 1e-12);

        let p = leaf_logits(&mut t, &[2.0]);
        let l = smooth_l1_mean(&mut t, p, &target, None).unwrap();
        assert!((t.scalar(l) - 1.5).abs() < 1e-12);

        let p = leaf_logits(&mut t, &[0.7, -0.3]);
        let target = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.7, -0.3]).unwrap();
        let l = smooth_l1_mean(&mut t, p, &target, None).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn motion_loss_worked_values() {
        let mut t = Tape::new();
        let mut scores = ArrayD::from_elem(IxDyn(&[4, 4, NUM_ROTATIONS]), 0.1);
        scores[[2, 3, 1]] = 0.5;
        let s = t.leaf(scores.clone());
        let action = ExecutedAction {
            x: 3,
            y: 2,
            rotation: 1,
            success: true,
        };
        let l = rga_motion_loss(&mut t, s, &action).unwrap();
        assert!((t.scalar(l) - LN2).abs() < 1e-12);

        scores[[2, 3, 1]] = 1.0 - 1e-9;
        let s = t.leaf(scores.clone());
        let l = rga_motion_loss(&mut t, s, &action).unwrap();
        assert!(t.scalar(l) < 1e-8);

        // perturbing non-executed sites leaves the loss unchanged
        scores[[0, 0, 0]] = 0.99;
        scores[[3, 3, 5]] = 0.01;
        let s = t.leaf(scores);
        let l2 = rga_motion_loss(&mut t, s, &action).unwrap();
        assert_eq!(t.scalar(l), t.scalar(l2));
    }

    #[test]
    fn motion_loss_failure_branch() {
        let mut t = Tape::new();
        let mut scores = ArrayD::from_elem(IxDyn(&[4, 4, NUM_ROTATIONS]), 0.5);
        scores[[1, 1, 0]] = 0.75;
        let s = t.leaf(scores);
        let action = ExecutedAction {
            x: 1,
            y: 1,
            rotation: 0,
            success: false,
        };
        let l = rga_motion_loss(&mut t, s, &action).unwrap();
        assert!((t.scalar(l) - (-(0.25f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn motion_loss_out_of_bounds_is_input_error() {
        let mut t = Tape::new();
        let s = t.leaf(ArrayD::from_elem(IxDyn(&[4, 4, NUM_ROTATIONS]), 0.5));
        let action = ExecutedAction {
            x: 4,
            y: 0,
            rotation: 0,
            success: true,
        };
        assert!(matches!(
            rga_motion_loss(&mut t, s, &action),
            Err(Error::Input(_))
        ));
        let action = ExecutedAction {
            x: 0,
            y: 0,
            rotation: NUM_ROTATIONS,
            success: true,
        };
        assert!(matches!(
            rga_motion_loss(&mut t, s, &action),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = store.add_param("z", &[12], Init::Normal(1.5), false, &mut rng);
        let labels = PixelLabelField::new(
            (0..12).map(|i| i % 3 == 0).collect(),
        )
        .unwrap();
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let zv = t.param(s, z);
                text_to_pixel_contrastive(t, zv, &labels).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn smooth_l1_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = store.add_param("p", &[3, 4], Init::Normal(0.8), false, &mut rng);
        let target = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| 0.2 * ix[0] as f64);
        let valid: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let pv = t.param(s, p);
                smooth_l1_mean(t, pv, &target, Some(&valid)).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn motion_loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let raw = store.add_param("raw", &[2, 2, NUM_ROTATIONS], Init::Normal(0.5), false, &mut rng);
        let action = ExecutedAction {
            x: 1,
            y: 0,
            rotation: 2,
            success: true,
        };
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let rv = t.param(s, raw);
                let probs = t.sigmoid(rv);
                rga_motion_loss(t, probs, &action).unwrap()
            },
            1e-5,
        );
    }
}
