//! Task projectors.
//!
//! All three task variants share the dynamic-kernel projector: the decoder
//! feature f_c is upsampled to a stride-4 map F_c while the sentence feature
//! is projected into a K x K convolution kernel plus bias (length
//! K*K*D + 1 per output channel) that is applied to F_c. The grasp variant
//! duplicates that head for quality/angle/width maps; the affordance
//! variant decodes rotated copies of the sentence-modulated feature map
//! with a shared pointwise FCN.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};

/// Number of discrete gripper rotations in the affordance stack (30° steps).
pub const NUM_ROTATIONS: usize = 6;

/// Length of one dynamic convolution filter: K*K*D weights plus one bias.
pub fn dynamic_kernel_len(k: usize, d: usize) -> usize {
    k * k * d + 1
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct HeadsConfig {
    /// Dynamic kernel spatial size K.
    pub kernel_size: usize,
    /// Channels D of the stride-4 projected map.
    pub kernel_dim: usize,
    /// Mask threshold on sigmoid(logit) for the binary segmentation output.
    pub mask_threshold: f64,
    /// Maximum gripper opening in pixels; width maps are trained normalized
    /// to [0, 1] and scaled by this at recovery time.
    pub max_width_px: f64,
    /// Hidden width of the affordance FCN.
    pub rga_channels: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            kernel_size: 3,
            kernel_dim: 32,
            mask_threshold: 0.35,
            max_width_px: 32.0,
            rga_channels: 16,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self, image_hw: (usize, usize), decode_stride: usize) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("dynamic kernel size must be odd".into()));
        }
        if self.kernel_dim == 0 || self.rga_channels == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.max_width_px <= 0.0 {
            return Err(Error::Config("max gripper width must be positive".into()));
        }
        if image_hw.0 % 4 != 0 || image_hw.1 % 4 != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by 4",
                image_hw.0, image_hw.1
            )));
        }
        let factor = decode_stride / 4;
        if decode_stride < 4 || !factor.is_power_of_two() || factor * 4 != decode_stride {
            return Err(Error::Config(format!(
                "decode stride {decode_stride} must be 4 times a power of two"
            )));
        }
        Ok(())
    }
}

/// Dynamic-kernel segmentation projector with `out_ch` output channels.
pub struct SegmentationHead {
    up_convs: Vec<Conv2d>,
    final_proj: Conv2d,
    kernel_gen: Linear,
    pub k: usize,
    pub d: usize,
    pub out_ch: usize,
    grid: (usize, usize),
    image_hw: (usize, usize),
}

pub struct SegOutput {
    /// (H/4, W/4, out_ch) logits at the stride-4 grid.
    pub stride4: Var,
    /// (H, W, out_ch) logits upsampled to full resolution.
    pub full: Var,
}

impl SegmentationHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        sentence_dim: usize,
        grid: (usize, usize),
        image_hw: (usize, usize),
        cfg: &HeadsConfig,
        out_ch: usize,
    ) -> Result<Self> {
        let target = (image_hw.0 / 4, image_hw.1 / 4);
        if target.0 % grid.0 != 0 || !(target.0 / grid.0).is_power_of_two() {
            return Err(Error::Config(format!(
                "stride-4 grid {:?} is not a power-of-two upsample of {:?}",
                target, grid
            )));
        }
        let steps = (target.0 / grid.0).trailing_zeros() as usize;
        let mut up_convs = Vec::with_capacity(steps);
        for s in 0..steps {
            up_convs.push(Conv2d::he(
                store,
                rng,
                &format!("{name}.up{s}"),
                3,
                in_dim,
                in_dim,
                1,
                false,
            ));
        }
        let final_proj = Conv2d::he(
            store,
            rng,
            &format!("{name}.proj"),
            1,
            in_dim,
            cfg.kernel_dim,
            1,
            false,
        );
        let kernel_gen = Linear::xavier(
            store,
            rng,
            &format!("{name}.kernel_gen"),
            sentence_dim,
            out_ch * dynamic_kernel_len(cfg.kernel_size, cfg.kernel_dim),
            false,
        );
        Ok(SegmentationHead {
            up_convs,
            final_proj,
            kernel_gen,
            k: cfg.kernel_size,
            d: cfg.kernel_dim,
            out_ch,
            grid,
            image_hw,
        })
    }

    /// f_c tokens (n, C_d) + sentence (1, C_s) -> stride-4 and full logits.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, f_c: Var, sentence: Var) -> Result<SegOutput> {
        let dim_in = t.shape(f_c)[1];
        let mut map = t.reshape(f_c, &[self.grid.0, self.grid.1, dim_in]);
        for conv in &self.up_convs {
            map = t.upsample_bilinear(map, 2);
            map = conv.forward(t, store, map);
            map = t.relu(map);
        }
        let fm = self.final_proj.forward(t, store, map);
        let (h4, w4) = (self.image_hw.0 / 4, self.image_hw.1 / 4);

        // sentence -> per-channel dynamic filters (K*K*D weights + bias)
        let kern_flat = self.kernel_gen.forward(t, store, sentence);
        let per = dynamic_kernel_len(self.k, self.d);
        let mut chans = Vec::with_capacity(self.out_ch);
        for c in 0..self.out_ch {
            let w = t.slice_cols(kern_flat, c * per, per - 1);
            let b = t.slice_cols(kern_flat, c * per + per - 1, 1);
            let kernel = t.reshape(w, &[self.k, self.k, self.d, 1]);
            let conv = t.conv2d(fm, kernel, 1, (self.k - 1) / 2);
            let flat = t.reshape(conv, &[h4 * w4, 1]);
            let bias = t.reshape(b, &[1]);
            let logit = t.add_bias(flat, bias);
            chans.push(logit);
        }
        let stride4 = if chans.len() == 1 {
            chans[0]
        } else {
            t.concat_cols(&chans)
        };
        let stride4 = t.reshape(stride4, &[h4, w4, self.out_ch]);
        let full = t.resize_bilinear(stride4, self.image_hw.0, self.image_hw.1);
        Ok(SegOutput { stride4, full })
    }
}

/// RES projector: one dynamic-kernel head producing mask logits.
pub struct ResHead {
    pub seg: SegmentationHead,
    pub mask_threshold: f64,
}

impl ResHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        sentence_dim: usize,
        grid: (usize, usize),
        image_hw: (usize, usize),
        cfg: &HeadsConfig,
    ) -> Result<Self> {
        Ok(ResHead {
            seg: SegmentationHead::new(
                store,
                rng,
                "heads.res",
                in_dim,
                sentence_dim,
                grid,
                image_hw,
                cfg,
                1,
            )?,
            mask_threshold: cfg.mask_threshold,
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, f_c: Var, sentence: Var) -> Result<SegOutput> {
        self.seg.forward(t, store, f_c, sentence)
    }

    /// Binary mask from full-resolution logits: sigmoid(logit) > threshold.
    pub fn binarize(&self, t: &Tape, full_logits: Var) -> Array2<bool> {
        let v = t.value(full_logits);
        let (h, w) = (v.shape()[0], v.shape()[1]);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let p = 1.0 / (1.0 + (-v[[y, x, 0]]).exp());
            p > self.mask_threshold
        })
    }
}

/// Grasp maps as plain arrays: quality in [0,1], angle in [-pi/2, pi/2),
/// width in pixels (non-negative).
#[derive(Clone, Debug)]
pub struct GraspMaps {
    pub quality: Array2<f64>,
    pub angle: Array2<f64>,
    pub width: Array2<f64>,
}

/// Tape-level outputs of the triple grasp head plus the retained mask head.
pub struct RgsOutput {
    pub mask: SegOutput,
    /// (H, W) grasp quality after sigmoid.
    pub quality: Var,
    /// (H, W) raw sin(2 theta) channel.
    pub sin: Var,
    /// (H, W) raw cos(2 theta) channel.
    pub cos: Var,
    /// (H, W) normalized width after softplus.
    pub width_norm: Var,
}

/// Triplicated dynamic-kernel heads for quality/angle/width, with the RES
/// mask head retained for grounding output. No parameter sharing between
/// the four heads.
pub struct RgsHeads {
    pub mask: SegmentationHead,
    pub quality: SegmentationHead,
    pub angle: SegmentationHead,
    pub width: SegmentationHead,
    pub mask_threshold: f64,
    pub max_width_px: f64,
}

impl RgsHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        sentence_dim: usize,
        grid: (usize, usize),
        image_hw: (usize, usize),
        cfg: &HeadsConfig,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out_ch: usize| {
            SegmentationHead::new(
                store, rng, name, in_dim, sentence_dim, grid, image_hw, cfg, out_ch,
            )
        };
        Ok(RgsHeads {
            mask: mk(store, rng, "heads.rgs_mask", 1)?,
            quality: mk(store, rng, "heads.rgs_quality", 1)?,
            angle: mk(store, rng, "heads.rgs_angle", 2)?,
            width: mk(store, rng, "heads.rgs_width", 1)?,
            mask_threshold: cfg.mask_threshold,
            max_width_px: cfg.max_width_px,
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, f_c: Var, sentence: Var) -> Result<RgsOutput> {
        let (h, w) = {
            let mask = self.mask.image_hw;
            (mask.0, mask.1)
        };
        let mask = self.mask.forward(t, store, f_c, sentence)?;
        let q = self.quality.forward(t, store, f_c, sentence)?;
        let q_full = t.reshape(q.full, &[h, w]);
        let quality = t.sigmoid(q_full);
        let a = self.angle.forward(t, store, f_c, sentence)?;
        let a_flat = t.reshape(a.full, &[h * w, 2]);
        let sin = t.slice_cols(a_flat, 0, 1);
        let sin = t.reshape(sin, &[h, w]);
        let cos = t.slice_cols(a_flat, 1, 1);
        let cos = t.reshape(cos, &[h, w]);
        let p = self.width.forward(t, store, f_c, sentence)?;
        let p_full = t.reshape(p.full, &[h, w]);
        let width_norm = t.softplus(p_full);
        Ok(RgsOutput {
            mask,
            quality,
            sin,
            cos,
            width_norm,
        })
    }

    /// Materialize grasp maps: angle folded to [-pi/2, pi/2) through the
    /// (sin 2t, cos 2t) parameterization, width scaled to pixels.
    pub fn grasp_maps(&self, t: &Tape, out: &RgsOutput) -> GraspMaps {
        let q = t.value(out.quality);
        let s = t.value(out.sin);
        let c = t.value(out.cos);
        let wn = t.value(out.width_norm);
        let (h, w) = (q.shape()[0], q.shape()[1]);
        let quality = Array2::from_shape_fn((h, w), |(y, x)| q[[y, x]]);
        let angle = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut th = 0.5 * s[[y, x]].atan2(c[[y, x]]);
            if th >= std::f64::consts::FRAC_PI_2 {
                th -= std::f64::consts::PI;
            }
            th
        });
        let width = Array2::from_shape_fn((h, w), |(y, x)| wn[[y, x]] * self.max_width_px);
        GraspMaps {
            quality,
            angle,
            width,
        }
    }
}

/// Pixel-wise grasp scores over the discrete rotations.
#[derive(Clone, Debug)]
pub struct AffordanceStack {
    /// (H, W, NUM_ROTATIONS) scores in [0, 1]; channel k scores grasps at
    /// orientation k * 30°.
    pub scores: Array3<f64>,
}

/// Rotated-decode affordance head. The vision-language map F_a (sentence
/// feature times f_c) is rotated to each orientation, decoded for
/// horizontal grasps by a shared pointwise FCN, and the score maps are
/// rotated back. Pointwise (1x1) decode keeps the rotate-decode-unrotate
/// loop rotation-equivariant, so orientation channels agree on radially
/// symmetric inputs.
pub struct AffordanceHead {
    sent_proj: Linear,
    fc1: Conv2d,
    fc2: Conv2d,
    fc3: Conv2d,
    grid: (usize, usize),
    image_hw: (usize, usize),
    dim: usize,
}

impl AffordanceHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        sentence_dim: usize,
        grid: (usize, usize),
        image_hw: (usize, usize),
        cfg: &HeadsConfig,
    ) -> Result<Self> {
        let cf = cfg.rga_channels;
        Ok(AffordanceHead {
            sent_proj: Linear::xavier(store, rng, "heads.rga.sent", sentence_dim, in_dim, false),
            fc1: Conv2d::he(store, rng, "heads.rga.fc1", 1, in_dim, cf, 1, false),
            fc2: Conv2d::he(store, rng, "heads.rga.fc2", 1, cf, cf, 1, false),
            fc3: Conv2d::he(store, rng, "heads.rga.fc3", 1, cf, 1, 1, false),
            grid,
            image_hw,
            dim: in_dim,
        })
    }

    /// F_a = proj(f_s) ⊙ f_c, reshaped onto the decoding grid.
    pub fn vision_language_map(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        f_c: Var,
        sentence: Var,
    ) -> Var {
        let s = self.sent_proj.forward(t, store, sentence);
        let sv = t.reshape(s, &[self.dim]);
        let fa = t.mul_row_vec(f_c, sv);
        t.reshape(fa, &[self.grid.0, self.grid.1, self.dim])
    }

    /// Decode horizontal-grasp scores from an (unrotated) feature map:
    /// pointwise FCN, upsample to full resolution, sigmoid.
    pub fn plain_decode(&self, t: &mut Tape, store: &ParamStore, fa_map: Var) -> Var {
        let x = self.fc1.forward(t, store, fa_map);
        let x = t.relu(x);
        let x = self.fc2.forward(t, store, x);
        let x = t.relu(x);
        let x = self.fc3.forward(t, store, x);
        let up = t.resize_bilinear(x, self.image_hw.0, self.image_hw.1);
        t.sigmoid(up)
    }

    /// Full affordance stack: channel k = rotate back (decode (rotate F_a
    /// by -k*30°)). The k = 0 path involves no resampling at all.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, f_c: Var, sentence: Var) -> Result<Var> {
        let fa = self.vision_language_map(t, store, f_c, sentence);
        let mut chans = Vec::with_capacity(NUM_ROTATIONS);
        let (h, w) = self.image_hw;
        for k in 0..NUM_ROTATIONS {
            let angle = k as f64 * std::f64::consts::PI / NUM_ROTATIONS as f64;
            let rotated = t.rotate(fa, -angle);
            let scores = self.plain_decode(t, store, rotated);
            let back = t.rotate(scores, angle);
            chans.push(t.reshape(back, &[h * w, 1]));
        }
        let stack = t.concat_cols(&chans);
        Ok(t.reshape(stack, &[h, w, NUM_ROTATIONS]))
    }

    pub fn stack_values(&self, t: &Tape, scores: Var) -> AffordanceStack {
        let v = t.value(scores);
        let (h, w) = self.image_hw;
        AffordanceStack {
            scores: Array3::from_shape_fn((h, w, NUM_ROTATIONS), |(y, x, k)| v[[y, x, k]]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn head_cfg() -> HeadsConfig {
        HeadsConfig {
            kernel_size: 3,
            kernel_dim: 8,
            mask_threshold: 0.35,
            max_width_px: 32.0,
            rga_channels: 6,
        }
    }

    #[test]
    fn kernel_length_law() {
        assert_eq!(dynamic_kernel_len(3, 64), 577);
        assert_eq!(dynamic_kernel_len(1, 16), 17);
        for k in [1usize, 3, 5] {
            for d in [1usize, 7, 32] {
                assert_eq!(dynamic_kernel_len(k, d), k * k * d + 1);
            }
        }
    }

    #[test]
    fn stride4_site_count_416() {
        // 416x416 input keeps exactly (416/4)^2 stride-4 sites
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let cfg = head_cfg();
        let head = SegmentationHead::new(
            &mut store,
            &mut r,
            "heads.res",
            4,
            6,
            (26, 26),
            (416, 416),
            &cfg,
            1,
        )
        .unwrap();
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::zeros(IxDyn(&[26 * 26, 4])));
        let sent = t.leaf(ArrayD::zeros(IxDyn(&[1, 6])));
        let out = head.forward(&mut t, &store, f_c, sent).unwrap();
        assert_eq!(t.shape(out.stride4), &[104, 104, 1]);
        assert_eq!(104 * 104, 10816);
        assert_eq!(t.shape(out.full), &[416, 416, 1]);
    }

    #[test]
    fn zero_kernel_gives_logit_zero_probability_half() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let cfg = head_cfg();
        let head = SegmentationHead::new(
            &mut store,
            &mut r,
            "heads.res",
            4,
            6,
            (4, 4),
            (64, 64),
            &cfg,
            1,
        )
        .unwrap();
        // zero the kernel generator so F_s and its bias are exactly zero
        for suffix in ["w", "b"] {
            let id = store.find(&format!("heads.res.kernel_gen.{suffix}")).unwrap();
            let shape = store.entry(id).value.shape().to_vec();
            store.load_value(id, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::from_elem(IxDyn(&[16, 4]), 0.37));
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), 0.9));
        let out = head.forward(&mut t, &store, f_c, sent).unwrap();
        assert!(t.value(out.stride4).iter().all(|&v| v == 0.0));
        assert!(t.value(out.full).iter().all(|&v| v == 0.0));
        // sigma(0) = 0.5 everywhere
        let p = 1.0 / (1.0 + (-0.0f64).exp());
        assert_eq!(p, 0.5);
    }

    fn rgs_setup() -> (ParamStore, RgsHeads) {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let cfg = head_cfg();
        let heads =
            RgsHeads::new(&mut store, &mut r, 4, 6, (4, 4), (64, 64), &cfg).unwrap();
        (store, heads)
    }

    #[test]
    fn zeroed_rgs_heads_give_default_maps() {
        let (mut store, heads) = rgs_setup();
        let zero: Vec<_> = store
            .iter()
            .filter(|(_, e)| e.name.contains("kernel_gen"))
            .map(|(id, e)| (id, e.value.shape().to_vec()))
            .collect();
        for (id, shape) in zero {
            store.load_value(id, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::from_elem(IxDyn(&[16, 4]), 0.4));
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), -0.2));
        let out = heads.forward(&mut t, &store, f_c, sent).unwrap();
        let maps = heads.grasp_maps(&t, &out);
        let softplus0 = (1.0f64 + 1.0).ln() * heads.max_width_px;
        assert!(maps.quality.iter().all(|&q| (q - 0.5).abs() < 1e-12));
        assert!(maps.angle.iter().all(|&a| a == 0.0));
        assert!(maps.width.iter().all(|&p| (p - softplus0).abs() < 1e-9));
    }

    #[test]
    fn rgs_maps_have_image_shape_and_bounds() {
        let (store, heads) = rgs_setup();
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::from_shape_fn(IxDyn(&[16, 4]), |ix| {
            0.3 * ix[0] as f64 - 0.2 * ix[1] as f64
        }));
        let sent = t.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 6]), |ix| 0.1 * ix[1] as f64));
        let out = heads.forward(&mut t, &store, f_c, sent).unwrap();
        let maps = heads.grasp_maps(&t, &out);
        assert_eq!(maps.quality.dim(), (64, 64));
        assert_eq!(maps.angle.dim(), (64, 64));
        assert_eq!(maps.width.dim(), (64, 64));
        assert!(maps.quality.iter().all(|&q| (0.0..=1.0).contains(&q)));
        assert!(maps
            .angle
            .iter()
            .all(|&a| (-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2).contains(&a)));
        assert!(maps.width.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn different_features_give_different_quality() {
        let (store, heads) = rgs_setup();
        let run = |bias: f64| {
            let mut t = Tape::new();
            let f_c = t.leaf(ArrayD::from_shape_fn(IxDyn(&[16, 4]), |ix| {
                bias + 0.1 * ix[0] as f64
            }));
            let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), 0.5));
            let out = heads.forward(&mut t, &store, f_c, sent).unwrap();
            heads.grasp_maps(&t, &out).quality
        };
        assert_ne!(run(0.2), run(-0.8));
    }

    fn rga_setup(seed: u64) -> (ParamStore, AffordanceHead) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cfg = head_cfg();
        let head =
            AffordanceHead::new(&mut store, &mut r, 4, 6, (8, 8), (32, 32), &cfg).unwrap();
        (store, head)
    }

    #[test]
    fn rga_stack_shape_and_bounds() {
        let (store, head) = rga_setup(4);
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::from_shape_fn(IxDyn(&[64, 4]), |ix| {
            0.2 * ix[0] as f64 * 0.1 - 0.3 * ix[1] as f64
        }));
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), 0.4));
        let out = head.forward(&mut t, &store, f_c, sent).unwrap();
        assert_eq!(t.shape(out), &[32, 32, NUM_ROTATIONS]);
        assert!(t.value(out).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_rotation_channel_equals_plain_decode_bitwise() {
        let (store, head) = rga_setup(5);
        let mut t = Tape::new();
        let f_c = t.leaf(ArrayD::from_shape_fn(IxDyn(&[64, 4]), |ix| {
            (ix[0] as f64).sin() + 0.1 * ix[1] as f64
        }));
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 6]), -0.3));
        let stack = head.forward(&mut t, &store, f_c, sent).unwrap();
        let fa = head.vision_language_map(&mut t, &store, f_c, sent);
        let plain = head.plain_decode(&mut t, &store, fa);
        let sv = t.value(stack);
        let pv = t.value(plain);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(sv[[y, x, 0]].to_bits(), pv[[y, x, 0]].to_bits());
            }
        }
    }

    #[test]
    fn radially_symmetric_map_gives_equal_channels() {
        let (store, head) = rga_setup(6);
        let mut t = Tape::new();
        // smooth radial feature about the grid center; constant-dominant so
        // bilinear resampling error stays well under the tolerance
        let fa = t.leaf(ArrayD::from_shape_fn(IxDyn(&[8, 8, 4]), |ix| {
            let dy = ix[0] as f64 - 3.5;
            let dx = ix[1] as f64 - 3.5;
            let r2 = (dy * dy + dx * dx) / 24.5;
            0.8 + 0.005 * (1.0 - r2) + 0.05 * ix[2] as f64
        }));
        let mut chans = Vec::new();
        for k in 0..NUM_ROTATIONS {
            let angle = k as f64 * std::f64::consts::PI / NUM_ROTATIONS as f64;
            let rotated = t.rotate(fa, -angle);
            let scores = head.plain_decode(&mut t, &store, rotated);
            let back = t.rotate(scores, angle);
            chans.push(t.value(back).clone());
        }
        // compare inside the disk untouched by rotation zero padding
        let (h, w) = (32.0f64, 32.0f64);
        let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
        // stay clear of the zero-padding halo: one feature-grid cell (4 px)
        // inside the inscribed disk plus the bilinear reach of the rotation
        let radius = (h.min(w) / 2.0) - 8.0;
        for k in 1..NUM_ROTATIONS {
            for y in 0..32 {
                for x in 0..32 {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if (dy * dy + dx * dx).sqrt() > radius {
                        continue;
                    }
                    let d = (chans[k][[y, x, 0]] - chans[0][[y, x, 0]]).abs();
                    assert!(
                        d < 1e-3,
                        "channel {k} differs at ({y},{x}) by {d:.2e}"
                    );
                }
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let cfg = HeadsConfig {
            kernel_size: 1,
            kernel_dim: 3,
            mask_threshold: 0.35,
            max_width_px: 16.0,
            rga_channels: 3,
        };
        let head = SegmentationHead::new(
            &mut store,
            &mut r,
            "heads.res",
            3,
            4,
            (2, 2),
            (8, 8),
            &cfg,
            2,
        )
        .unwrap();
        let f_c = store.add_param("heads.test_fc", &[4, 3], Init::Normal(0.5), false, &mut r);
        let sent = store.add_param("heads.test_sent", &[1, 4], Init::Normal(0.5), false, &mut r);
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let fc = t.param(s, f_c);
                let se = t.param(s, sent);
                let out = head.forward(t, s, fc, se).unwrap();
                let sq = t.mul(out.full, out.full);
                t.mean_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn rga_gradients_flow_through_rotations() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let cfg = HeadsConfig {
            kernel_size: 1,
            kernel_dim: 3,
            mask_threshold: 0.35,
            max_width_px: 16.0,
            rga_channels: 2,
        };
        let head = AffordanceHead::new(&mut store, &mut r, 3, 4, (4, 4), (8, 8), &cfg).unwrap();
        let f_c = store.add_param("heads.test_fc", &[16, 3], Init::Normal(0.5), false, &mut r);
        let sent = store.add_param("heads.test_sent", &[1, 4], Init::Normal(0.5), false, &mut r);
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let fc = t.param(s, f_c);
                let se = t.param(s, sent);
                let out = head.forward(t, s, fc, se).unwrap();
                // probe a single executed site on channel 3 like the motion loss
                let g = t.gather(out, &[(4 * 8 + 5) * NUM_ROTATIONS + 3]);
                t.sum_all(g)
            },
            1e-4,
        );
    }
}
