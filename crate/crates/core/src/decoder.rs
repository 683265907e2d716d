//! Multimodal transformer decoder.
//!
//! Pixel-Sentence Fusion resamples the multi-scale visual features to a
//! common decoding grid, modulates each scale with a projection of the
//! sentence feature (elementwise multiplication) and sums across scales.
//! Pixel-Words Fusion then runs a post-layer-norm transformer decoder
//! (self-attention, cross-attention against word tokens, feed-forward)
//! producing the multimodal feature f_c.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Token width C_d of the fused features.
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub num_layers: usize,
    /// The decoding grid is (H/stride, W/stride) of the input image.
    pub decode_stride: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 48,
            heads: 4,
            ffn_expansion: 2,
            num_layers: 2,
            decode_stride: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, image_hw: (usize, usize)) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_expansion == 0 || self.num_layers == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if image_hw.0 % self.decode_stride != 0 || image_hw.1 % self.decode_stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by decode stride {}",
                image_hw.0, image_hw.1, self.decode_stride
            )));
        }
        Ok(())
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

pub struct MultimodalDecoder {
    pub cfg: DecoderConfig,
    pub grid: (usize, usize),
    scale_projs: Vec<Conv2d>,
    sent_projs: Vec<Linear>,
    pos_emb: crate::nn::ParamId,
    layers: Vec<DecoderLayer>,
}

impl MultimodalDecoder {
    /// `scale_channels` lists the channel width of each incoming visual
    /// scale (one per adapter tap).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        scale_channels: &[usize],
        sentence_dim: usize,
        text_dim: usize,
        image_hw: (usize, usize),
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate(image_hw)?;
        if scale_channels.is_empty() {
            return Err(Error::Config("decoder needs at least one visual scale".into()));
        }
        let grid = (image_hw.0 / cfg.decode_stride, image_hw.1 / cfg.decode_stride);
        let mut scale_projs = Vec::new();
        let mut sent_projs = Vec::new();
        for (i, &ch) in scale_channels.iter().enumerate() {
            scale_projs.push(Conv2d::he(
                store,
                rng,
                &format!("decoder.scale{i}.proj"),
                1,
                ch,
                cfg.dim,
                1,
                false,
            ));
            sent_projs.push(Linear::xavier(
                store,
                rng,
                &format!("decoder.scale{i}.sent"),
                sentence_dim,
                cfg.dim,
                false,
            ));
        }
        let pos_emb = store.add_param(
            "decoder.pos_emb",
            &[grid.0 * grid.1, cfg.dim],
            Init::Normal(0.02),
            false,
            rng,
        );
        let mut layers = Vec::new();
        for l in 0..cfg.num_layers {
            let p = format!("decoder.layer{l}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.self_attn"),
                    cfg.dim,
                    cfg.dim,
                    cfg.dim,
                    cfg.heads,
                    false,
                ),
                ln1: LayerNorm::new(store, rng, &format!("{p}.ln1"), cfg.dim, false),
                cross_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.cross_attn"),
                    cfg.dim,
                    text_dim,
                    cfg.dim,
                    cfg.heads,
                    false,
                ),
                ln2: LayerNorm::new(store, rng, &format!("{p}.ln2"), cfg.dim, false),
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), cfg.dim, cfg.ffn_expansion, false),
                ln3: LayerNorm::new(store, rng, &format!("{p}.ln3"), cfg.dim, false),
            });
        }
        Ok(MultimodalDecoder {
            cfg: cfg.clone(),
            grid,
            scale_projs,
            sent_projs,
            pos_emb,
            layers,
        })
    }

    /// Fuse multi-scale visual features with the sentence feature. Each
    /// scale is resampled to the decoding grid, projected, modulated by a
    /// per-scale projection of f_s and summed. Returns the (gh, gw, C_d)
    /// pixel-sentence feature map.
    pub fn pixel_sentence_fuse(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        scales: &[Var],
        sentence: Var,
    ) -> Result<Var> {
        if scales.len() != self.scale_projs.len() {
            return Err(Error::Config(format!(
                "got {} scales, decoder built for {}",
                scales.len(),
                self.scale_projs.len()
            )));
        }
        let (gh, gw) = self.grid;
        let n = gh * gw;
        let mut acc: Option<Var> = None;
        for (i, &scale) in scales.iter().enumerate() {
            let r = t.resize_bilinear(scale, gh, gw);
            let p = self.scale_projs[i].forward(t, store, r);
            let flat = t.reshape(p, &[n, self.cfg.dim]);
            let s = self.sent_projs[i].forward(t, store, sentence);
            let sv = t.reshape(s, &[self.cfg.dim]);
            let m = t.mul_row_vec(flat, sv);
            acc = Some(match acc {
                None => m,
                Some(a) => t.add(a, m),
            });
        }
        let fused = acc.unwrap();
        Ok(t.reshape(fused, &[gh, gw, self.cfg.dim]))
    }

    /// Post-LN transformer decode against the word tokens; padded word
    /// slots are excluded from cross-attention. Returns f_c as
    /// (gh*gw, C_d) tokens.
    pub fn pixel_words_decode(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        pixel_sentence: Var,
        words: Var,
        pad_mask: &[bool],
    ) -> Result<Var> {
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::Input("all word slots are padding".into()));
        }
        if pad_mask.len() != t.shape(words)[0] {
            return Err(Error::Input("padding mask length mismatch".into()));
        }
        let (gh, gw) = self.grid;
        let n = gh * gw;
        let mut x = t.reshape(pixel_sentence, &[n, self.cfg.dim]);
        let pos = t.param(store, self.pos_emb);
        x = t.add(x, pos);
        for layer in &self.layers {
            let a = layer.self_attn.forward(t, store, x, x, None);
            let r = t.add(a, x);
            x = layer.ln1.forward(t, store, r);
            let c = layer.cross_attn.forward(t, store, x, words, Some(pad_mask));
            let r = t.add(c, x);
            x = layer.ln2.forward(t, store, r);
            let f = layer.ffn.forward(t, store, x);
            let r = t.add(f, x);
            x = layer.ln3.forward(t, store, r);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn build(num_layers: usize, seed: u64) -> (ParamStore, MultimodalDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DecoderConfig {
            dim: 16,
            heads: 4,
            ffn_expansion: 2,
            num_layers,
            decode_stride: 16,
        };
        let dec = MultimodalDecoder::new(&mut store, &mut rng, &[8, 12, 6], 24, 10, (64, 64), &cfg)
            .unwrap();
        (store, dec)
    }

    fn scale_vars(t: &mut Tape) -> Vec<Var> {
        let mk = |t: &mut Tape, h: usize, w: usize, c: usize, o: f64| {
            t.leaf(ArrayD::from_shape_fn(IxDyn(&[h, w, c]), |ix| {
                o + 0.1 * ix[0] as f64 - 0.05 * ix[1] as f64 + 0.01 * ix[2] as f64
            }))
        };
        vec![mk(t, 8, 8, 8, 0.1), mk(t, 16, 16, 12, -0.2), mk(t, 32, 32, 6, 0.3)]
    }

    #[test]
    fn fuse_output_matches_decoding_grid() {
        let (store, dec) = build(2, 3);
        let mut t = Tape::new();
        let scales = scale_vars(&mut t);
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 24]), 0.5));
        let f = dec.pixel_sentence_fuse(&mut t, &store, &scales, sent).unwrap();
        assert_eq!(t.shape(f), &[4, 4, 16]);
    }

    #[test]
    fn all_ones_sentence_projection_reduces_to_scale_sum() {
        let (mut store, dec) = build(1, 3);
        // force every sentence projection to emit exactly 1
        for i in 0..3 {
            let w = store.find(&format!("decoder.scale{i}.sent.w")).unwrap();
            let b = store.find(&format!("decoder.scale{i}.sent.b")).unwrap();
            let wshape = store.entry(w).value.shape().to_vec();
            store.load_value(w, ArrayD::zeros(IxDyn(&wshape))).unwrap();
            store
                .load_value(b, ArrayD::from_elem(IxDyn(&[16]), 1.0))
                .unwrap();
        }
        let mut t = Tape::new();
        let scales = scale_vars(&mut t);
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 24]), 0.77));
        let fused = dec
            .pixel_sentence_fuse(&mut t, &store, &scales, sent)
            .unwrap();

        // oracle: resample + project each scale, plain sum
        let mut acc: Option<Var> = None;
        for (i, &s) in scales.iter().enumerate() {
            let r = t.resize_bilinear(s, 4, 4);
            let p = dec.scale_projs[i].forward(&mut t, &store, r);
            acc = Some(match acc {
                None => p,
                Some(a) => t.add(a, p),
            });
        }
        let expect = acc.unwrap();
        let d = (t.value(fused) - t.value(expect)).mapv(f64::abs).sum();
        assert!(d < 1e-12, "fusion is not a plain sum: {d}");
    }

    #[test]
    fn zero_sentence_projection_annihilates_output() {
        let (mut store, dec) = build(1, 3);
        for i in 0..3 {
            for suffix in ["w", "b"] {
                let id = store.find(&format!("decoder.scale{i}.sent.{suffix}")).unwrap();
                let shape = store.entry(id).value.shape().to_vec();
                store.load_value(id, ArrayD::zeros(IxDyn(&shape))).unwrap();
            }
        }
        let mut t = Tape::new();
        let scales = scale_vars(&mut t);
        let sent = t.leaf(ArrayD::from_elem(IxDyn(&[1, 24]), 0.9));
        let fused = dec
            .pixel_sentence_fuse(&mut t, &store, &scales, sent)
            .unwrap();
        assert!(t.value(fused).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_sublayers_reduce_to_iterated_layer_norm() {
        let (mut store, dec) = build(2, 5);
        let zero: Vec<_> = store
            .iter()
            .filter(|(_, e)| {
                e.name.contains("self_attn")
                    || e.name.contains("cross_attn")
                    || e.name.contains(".ffn.")
            })
            .map(|(id, e)| (id, e.value.shape().to_vec()))
            .collect();
        for (id, shape) in zero {
            store.load_value(id, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
        let mut t = Tape::new();
        let fvs = t.leaf(ArrayD::from_shape_fn(IxDyn(&[4, 4, 16]), |ix| {
            0.3 * ix[0] as f64 - 0.2 * ix[1] as f64 + 0.05 * ix[2] as f64
        }));
        let words = t.leaf(ArrayD::from_elem(IxDyn(&[6, 10]), 0.4));
        let mask = vec![true; 6];
        let out = dec
            .pixel_words_decode(&mut t, &store, fvs, words, &mask)
            .unwrap();

        // oracle: x = fvs + pos, then six successive layer norms
        let mut x = t.reshape(fvs, &[16, 16]);
        let pos = t.param(&store, dec.pos_emb);
        x = t.add(x, pos);
        for layer in &dec.layers {
            x = layer.ln1.forward(&mut t, &store, x);
            x = layer.ln2.forward(&mut t, &store, x);
            x = layer.ln3.forward(&mut t, &store, x);
        }
        let d = (t.value(out) - t.value(x)).mapv(f64::abs).sum();
        assert!(d < 1e-12, "residual-path mismatch: {d}");
    }

    #[test]
    fn padded_word_slots_do_not_influence_output() {
        let (store, dec) = build(2, 7);
        let mut t = Tape::new();
        let fvs = t.leaf(ArrayD::from_shape_fn(IxDyn(&[4, 4, 16]), |ix| {
            0.1 * (ix[0] + ix[1] + ix[2]) as f64
        }));
        let mask = vec![true, true, true, false, false, false];
        let mut w1 = ArrayD::from_shape_fn(IxDyn(&[6, 10]), |ix| 0.2 * ix[0] as f64 + 0.1 * ix[1] as f64);
        let words1 = t.leaf(w1.clone());
        let out1 = dec
            .pixel_words_decode(&mut t, &store, fvs, words1, &mask)
            .unwrap();
        // scramble only the padded slots
        for j in 3..6 {
            for c in 0..10 {
                w1[[j, c]] = 99.0 + (j * c) as f64;
            }
        }
        let words2 = t.leaf(w1);
        let out2 = dec
            .pixel_words_decode(&mut t, &store, fvs, words2, &mask)
            .unwrap();
        assert_eq!(t.value(out1), t.value(out2));
    }

    #[test]
    fn layer_count_changes_output() {
        let (s1, d1) = build(1, 11);
        let (s2, d2) = build(2, 11);
        let run = |store: &ParamStore, dec: &MultimodalDecoder| {
            let mut t = Tape::new();
            let fvs = t.leaf(ArrayD::from_shape_fn(IxDyn(&[4, 4, 16]), |ix| {
                0.2 * ix[0] as f64 - 0.1 * ix[2] as f64
            }));
            let words = t.leaf(ArrayD::from_shape_fn(IxDyn(&[6, 10]), |ix| {
                0.1 * (ix[0] * 10 + ix[1]) as f64
            }));
            let mask = vec![true; 6];
            let out = dec
                .pixel_words_decode(&mut t, store, fvs, words, &mask)
                .unwrap();
            t.value(out).clone()
        };
        assert_ne!(run(&s1, &d1), run(&s2, &d2));
    }

    #[test]
    fn sentence_sensitivity() {
        let (store, dec) = build(2, 13);
        let run = |sval: f64| {
            let mut t = Tape::new();
            let scales = scale_vars(&mut t);
            let sent = t.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 24]), |ix| {
                sval + 0.01 * ix[1] as f64
            }));
            let fvs = dec.pixel_sentence_fuse(&mut t, &store, &scales, sent).unwrap();
            let words = t.leaf(ArrayD::from_elem(IxDyn(&[6, 10]), 0.3));
            let mask = vec![true; 6];
            let out = dec
                .pixel_words_decode(&mut t, &store, fvs, words, &mask)
                .unwrap();
            t.value(out).clone()
        };
        assert_ne!(run(0.4), run(-0.6));
    }

    #[test]
    fn all_padding_is_an_input_error() {
        let (store, dec) = build(1, 17);
        let mut t = Tape::new();
        let fvs = t.leaf(ArrayD::zeros(IxDyn(&[4, 4, 16])));
        let words = t.leaf(ArrayD::zeros(IxDyn(&[6, 10])));
        let mask = vec![false; 6];
        assert!(matches!(
            dec.pixel_words_decode(&mut t, &store, fvs, words, &mask),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = DecoderConfig {
            dim: 8,
            heads: 2,
            ffn_expansion: 2,
            num_layers: 1,
            decode_stride: 16,
        };
        let dec =
            MultimodalDecoder::new(&mut store, &mut rng, &[4], 6, 5, (32, 32), &cfg).unwrap();
        let scale = store.add_param("decoder.test_scale", &[4, 4, 4], Init::Normal(0.5), false, &mut rng);
        let sent = store.add_param("decoder.test_sent", &[1, 6], Init::Normal(0.5), false, &mut rng);
        let words = store.add_param("decoder.test_words", &[4, 5], Init::Normal(0.5), false, &mut rng);
        let mask = vec![true, true, true, false];
        crate::autodiff::check_grads(
            &mut store,
            |t, s| {
                let sc = t.param(s, scale);
                let se = t.param(s, sent);
                let wo = t.param(s, words);
                let fvs = dec.pixel_sentence_fuse(t, s, &[sc], se).unwrap();
                let fc = dec.pixel_words_decode(t, s, fvs, wo, &mask).unwrap();
                let sq = t.mul(fc, fc);
                t.mean_all(sq)
            },
            1e-4,
        );
    }
}
