//! Frozen dual-encoder backbone.
//!
//! A deterministic, seeded stand-in for a large pretrained image/text
//! encoder pair: a small convolutional stage stack for vision and a small
//! pre-norm transformer stack for text. Every parameter is frozen at build
//! time. Between consecutive stages an interceptor may replace the visual
//! and text features, which is where the adapters plug in. Real encoder
//! weights can be swapped in through the named-array archive boundary.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{self, ArchiveEntry};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Conv2d, Embedding, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore,
    Snapshot,
};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Number of encoder stages N (vision conv stages and text blocks).
    pub num_stages: usize,
    /// Output channels of each vision stage.
    pub stage_channels: Vec<usize>,
    /// Stride of each vision stage's convolution.
    pub stage_strides: Vec<usize>,
    /// Stem patch size and stride (one strided conv on the RGB input).
    pub stem_stride: usize,
    /// Input image resolution (rows, cols).
    pub image_hw: (usize, usize),
    /// Token sequence length L.
    pub token_len: usize,
    /// Text token channel width.
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_ffn_expansion: usize,
    /// Sentence feature width.
    pub sentence_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_stages: 4,
            stage_channels: vec![16, 24, 32, 40],
            stage_strides: vec![1, 2, 2, 2],
            stem_stride: 4,
            image_hw: (64, 64),
            token_len: 20,
            text_dim: 32,
            text_heads: 4,
            text_ffn_expansion: 2,
            sentence_dim: 64,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB.len(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!(
                "need at least 2 stages, got {}",
                self.num_stages
            )));
        }
        if self.stage_channels.len() != self.num_stages
            || self.stage_strides.len() != self.num_stages
        {
            return Err(Error::Config(format!(
                "stage_channels/stage_strides must have {} entries",
                self.num_stages
            )));
        }
        let positive = [
            self.stem_stride,
            self.image_hw.0,
            self.image_hw.1,
            self.token_len,
            self.text_dim,
            self.text_heads,
            self.text_ffn_expansion,
            self.sentence_dim,
            self.vocab_size,
        ];
        if positive.iter().any(|&v| v == 0)
            || self.stage_channels.iter().any(|&c| c == 0)
            || self.stage_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::Config("all backbone dimensions must be positive".into()));
        }
        if self.text_dim % self.text_heads != 0 {
            return Err(Error::Config(
                "text_dim must be divisible by text_heads".into(),
            ));
        }
        // every stage grid must divide evenly
        let (mut h, mut w) = self.image_hw;
        if h % self.stem_stride != 0 || w % self.stem_stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by stem stride {}",
                h, w, self.stem_stride
            )));
        }
        h /= self.stem_stride;
        w /= self.stem_stride;
        for (i, &s) in self.stage_strides.iter().enumerate() {
            if h % s != 0 || w % s != 0 {
                return Err(Error::Config(format!(
                    "stage {} stride {} does not divide grid {}x{}",
                    i + 1,
                    s,
                    h,
                    w
                )));
            }
            h /= s;
            w /= s;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("stage {} grid collapsed to zero", i + 1)));
            }
        }
        Ok(())
    }

    /// Spatial grid of each stage output, i = 1..=N.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (
            self.image_hw.0 / self.stem_stride,
            self.image_hw.1 / self.stem_stride,
        );
        let mut out = Vec::with_capacity(self.num_stages);
        for &s in &self.stage_strides {
            h /= s;
            w /= s;
            out.push((h, w));
        }
        out
    }
}

/// Per-stage feature pair as plain arrays (shape-checked snapshots of the
/// tape values).
#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub stage: usize,
    pub visual: ndarray::ArrayD<f64>,
    pub text: ndarray::ArrayD<f64>,
}

/// Tape handles produced by [`Backbone::encode`].
pub struct EncodedVars {
    /// Post-interception stage outputs, i = 1..=N: visual (H_i, W_i, C_i),
    /// text (L, C_t).
    pub stages: Vec<(Var, Var)>,
    /// Sentence feature as a (1, C_s) row.
    pub sentence: Var,
    /// Final word-level features (L, C_t).
    pub words: Var,
    pub pad_mask: Vec<bool>,
}

impl EncodedVars {
    pub fn to_stage_features(&self, tape: &Tape) -> Vec<StageFeatures> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, (v, t))| StageFeatures {
                stage: i + 1,
                visual: tape.value(*v).clone(),
                text: tape.value(*t).clone(),
            })
            .collect()
    }
}

/// Hook invoked between consecutive encoder stages. `stage` is the 1-based
/// index of the stage whose outputs are being replaced (1..=N-1); the
/// returned pair feeds the next vision/text blocks.
pub trait StageInterceptor {
    fn intercept(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        stage: usize,
        f_v: Var,
        f_t: Var,
        pad_mask: &[bool],
    ) -> Result<(Var, Var)>;
}

struct TextBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Conv2d,
    stages: Vec<Conv2d>,
    tok_emb: Embedding,
    pos_emb: crate::nn::ParamId,
    text_blocks: Vec<TextBlock>,
    final_ln: LayerNorm,
    sent_proj: Linear,
}

/// Prefix under which every backbone parameter is registered.
pub const PARAM_PREFIX: &str = "backbone.";

pub fn build_toy_backbone(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &mut rng;
    let frozen = true;

    let stem = Conv2d::he(
        store,
        r,
        "backbone.vision.stem",
        cfg.stem_stride,
        3,
        cfg.stage_channels[0],
        cfg.stem_stride,
        frozen,
    )
    .with_pad(0);
    let mut stages = Vec::with_capacity(cfg.num_stages);
    let mut cin = cfg.stage_channels[0];
    for i in 0..cfg.num_stages {
        let cout = cfg.stage_channels[i];
        stages.push(Conv2d::he(
            store,
            r,
            &format!("backbone.vision.stage{}.conv", i + 1),
            3,
            cin,
            cout,
            cfg.stage_strides[i],
            frozen,
        ));
        cin = cout;
    }

    let tok_emb = Embedding::new(
        store,
        r,
        "backbone.text.tok_emb",
        cfg.vocab_size,
        cfg.text_dim,
        0.7,
        frozen,
    );
    let pos_emb = store.add_param(
        "backbone.text.pos_emb",
        &[cfg.token_len, cfg.text_dim],
        Init::Normal(0.2),
        frozen,
        r,
    );
    let mut text_blocks = Vec::with_capacity(cfg.num_stages);
    for i in 0..cfg.num_stages {
        let p = format!("backbone.text.block{}", i + 1);
        text_blocks.push(TextBlock {
            ln1: LayerNorm::new(store, r, &format!("{p}.ln1"), cfg.text_dim, frozen),
            attn: MultiHeadAttention::new(
                store,
                r,
                &format!("{p}.attn"),
                cfg.text_dim,
                cfg.text_dim,
                cfg.text_dim,
                cfg.text_heads,
                frozen,
            ),
            ln2: LayerNorm::new(store, r, &format!("{p}.ln2"), cfg.text_dim, frozen),
            ffn: FeedForward::new(
                store,
                r,
                &format!("{p}.ffn"),
                cfg.text_dim,
                cfg.text_ffn_expansion,
                frozen,
            ),
        });
    }
    let final_ln = LayerNorm::new(store, r, "backbone.text.final_ln", cfg.text_dim, frozen);
    let sent_proj = Linear::xavier(
        store,
        r,
        "backbone.text.sent_proj",
        cfg.text_dim,
        cfg.sentence_dim,
        frozen,
    );

    Ok(Backbone {
        cfg: cfg.clone(),
        stem,
        stages,
        tok_emb,
        pos_emb,
        text_blocks,
        final_ln,
        sent_proj,
    })
}

impl Backbone {
    /// Staged forward pass. After each stage i < N the interceptor (if any)
    /// may replace the stage outputs before they enter the next blocks.
    /// Backbone parameters are read-only here.
    pub fn encode(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        image: &Array3<f64>,
        tokens: &[usize],
        pad_mask: &[bool],
        mut interceptor: Option<&mut dyn StageInterceptor>,
    ) -> Result<EncodedVars> {
        let (h, w, c) = image.dim();
        if (h, w) != self.cfg.image_hw || c != 3 {
            return Err(Error::Input(format!(
                "image shape ({h},{w},{c}) does not match configured ({}x{}x3)",
                self.cfg.image_hw.0, self.cfg.image_hw.1
            )));
        }
        if tokens.len() != self.cfg.token_len || pad_mask.len() != self.cfg.token_len {
            return Err(Error::Input(format!(
                "token sequence length {} does not match configured {}",
                tokens.len(),
                self.cfg.token_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::Input("padding mask marks no valid token".into()));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }

        let img = t.leaf3(image.clone());
        let mut f_v = self.stem.forward(t, store, img);
        f_v = t.relu(f_v);

        let emb = self.tok_emb.forward(t, store, tokens);
        let pos = t.param(store, self.pos_emb);
        let mut f_t = t.add(emb, pos);

        let sizes = self.cfg.stage_sizes();
        let mut stages = Vec::with_capacity(self.cfg.num_stages);
        for i in 0..self.cfg.num_stages {
            f_v = self.stages[i].forward(t, store, f_v);
            f_v = t.relu(f_v);
            f_t = self.text_block(t, store, i, f_t, pad_mask);

            let expected_v = [sizes[i].0, sizes[i].1, self.cfg.stage_channels[i]];
            if t.shape(f_v) != expected_v {
                return Err(Error::Internal(format!(
                    "stage {} visual shape {:?}, expected {:?}",
                    i + 1,
                    t.shape(f_v),
                    expected_v
                )));
            }

            // hooks sit between consecutive blocks only
            if i + 1 < self.cfg.num_stages {
                if let Some(hook) = interceptor.as_deref_mut() {
                    let (nv, nt) = hook.intercept(t, store, i + 1, f_v, f_t, pad_mask)?;
                    if t.shape(nv) != t.shape(f_v) {
                        return Err(Error::Interception(format!(
                            "hook at stage {} returned visual shape {:?}, expected {:?}",
                            i + 1,
                            t.shape(nv),
                            t.shape(f_v)
                        )));
                    }
                    if t.shape(nt) != t.shape(f_t) {
                        return Err(Error::Interception(format!(
                            "hook at stage {} returned text shape {:?}, expected {:?}",
                            i + 1,
                            t.shape(nt),
                            t.shape(f_t)
                        )));
                    }
                    f_v = nv;
                    f_t = nt;
                }
            }
            stages.push((f_v, f_t));
        }

        let words = self.final_ln.forward(t, store, f_t);
        let pooled = t.masked_mean_rows(words, pad_mask);
        let pooled_row = t.reshape(pooled, &[1, self.cfg.text_dim]);
        let sentence = self.sent_proj.forward(t, store, pooled_row);

        Ok(EncodedVars {
            stages,
            sentence,
            words,
            pad_mask: pad_mask.to_vec(),
        })
    }

    fn text_block(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        i: usize,
        x: Var,
        pad_mask: &[bool],
    ) -> Var {
        let blk = &self.text_blocks[i];
        let n = blk.ln1.forward(t, store, x);
        let a = blk.attn.forward(t, store, n, n, Some(pad_mask));
        let x = t.add(x, a);
        let n = blk.ln2.forward(t, store, x);
        let f = blk.ffn.forward(t, store, n);
        t.add(x, f)
    }

    /// Bitwise snapshot of every backbone parameter.
    pub fn snapshot(&self, store: &ParamStore) -> Snapshot {
        store.snapshot_matching(|e| e.name.starts_with(PARAM_PREFIX))
    }

    /// True iff every backbone parameter is exactly equal to its snapshot.
    pub fn assert_frozen(&self, store: &ParamStore, snap: &Snapshot) -> Result<bool> {
        store.matches_snapshot(snap)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.num_scalars(|e| e.name.starts_with(PARAM_PREFIX))
    }

    /// Export backbone weights to the named-array archive with a config echo.
    pub fn export_weights(&self, store: &ParamStore, path: &std::path::Path) -> Result<()> {
        let entries: Vec<ArchiveEntry> = store
            .iter()
            .filter(|(_, e)| e.name.starts_with(PARAM_PREFIX))
            .map(|(_, e)| ArchiveEntry::f64(&e.name, e.frozen, e.value.clone()))
            .collect();
        let meta = toml::to_string(&WeightsMeta {
            kind: "backbone-weights".into(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        archive::write_archive(path, &meta, &entries)
    }

    /// Import backbone weights (the pluggable boundary for real encoders).
    /// Every backbone parameter must be present with matching shape.
    pub fn import_weights(&self, store: &mut ParamStore, path: &std::path::Path) -> Result<()> {
        let (_meta, entries) = archive::read_archive(path)?;
        let expect = store
            .iter()
            .filter(|(_, e)| e.name.starts_with(PARAM_PREFIX))
            .count();
        if entries.len() != expect {
            return Err(Error::Format(format!(
                "weights archive holds {} arrays, backbone has {expect}",
                entries.len()
            )));
        }
        for e in &entries {
            let id = store.find(&e.name).ok_or_else(|| {
                Error::Format(format!("weights entry {} matches no backbone parameter", e.name))
            })?;
            store.load_value(id, e.as_f64()?.clone())?;
        }
        Ok(())
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct WeightsMeta {
    kind: String,
    seed: u64,
    config: BackboneConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ArrayD};

    fn cfg() -> BackboneConfig {
        BackboneConfig::default()
    }

    fn test_image() -> Array3<f64> {
        Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 11) % 13) as f64 / 13.0
        })
    }

    fn tok() -> (Vec<usize>, Vec<bool>) {
        crate::tokenizer::Tokenizer::with_default_vocab(20)
            .tokenize("the red cube")
            .unwrap()
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        let c = cfg();
        let mut s1 = ParamStore::new();
        let b1 = build_toy_backbone(&mut s1, &c).unwrap();
        let mut s2 = ParamStore::new();
        let _b2 = build_toy_backbone(&mut s2, &c).unwrap();
        let snap = b1.snapshot(&s1);
        assert!(s2.matches_snapshot(&snap).unwrap());
    }

    #[test]
    fn zero_stages_is_a_config_error() {
        let mut c = cfg();
        c.num_stages = 0;
        c.stage_channels.clear();
        c.stage_strides.clear();
        let mut store = ParamStore::new();
        assert!(matches!(
            build_toy_backbone(&mut store, &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_sizes_halve_with_stem_downsample() {
        let c = cfg();
        assert_eq!(c.stage_sizes(), vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn all_params_frozen() {
        let mut store = ParamStore::new();
        let _b = build_toy_backbone(&mut store, &cfg()).unwrap();
        assert!(store.iter().all(|(_, e)| e.frozen));
        assert!(store.iter().all(|(_, e)| e.name.starts_with(PARAM_PREFIX)));
    }

    #[test]
    fn encode_without_hooks_is_deterministic() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let (ids, mask) = tok();
        let img = test_image();
        let run = |store: &ParamStore| {
            let mut t = Tape::new();
            let out = b.encode(&mut t, store, &img, &ids, &mask, None).unwrap();
            (
                t.value(out.stages[3].0).clone(),
                t.value(out.sentence).clone(),
            )
        };
        let (v1, s1) = run(&store);
        let (v2, s2) = run(&store);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);
    }

    struct ZeroVisual {
        at: usize,
    }
    impl StageInterceptor for ZeroVisual {
        fn intercept(
            &mut self,
            t: &mut Tape,
            _store: &ParamStore,
            stage: usize,
            f_v: Var,
            f_t: Var,
            _mask: &[bool],
        ) -> Result<(Var, Var)> {
            if stage == self.at {
                let z = t.scale(f_v, 0.0);
                Ok((z, f_t))
            } else {
                Ok((f_v, f_t))
            }
        }
    }

    struct AddZero;
    impl StageInterceptor for AddZero {
        fn intercept(
            &mut self,
            t: &mut Tape,
            _store: &ParamStore,
            _stage: usize,
            f_v: Var,
            f_t: Var,
            _mask: &[bool],
        ) -> Result<(Var, Var)> {
            let zv = t.scale(f_v, 0.0);
            let zt = t.scale(f_t, 0.0);
            let nv = t.add(f_v, zv);
            let nt = t.add(f_t, zt);
            Ok((nv, nt))
        }
    }

    struct BadShape;
    impl StageInterceptor for BadShape {
        fn intercept(
            &mut self,
            t: &mut Tape,
            _store: &ParamStore,
            _stage: usize,
            f_v: Var,
            f_t: Var,
            _mask: &[bool],
        ) -> Result<(Var, Var)> {
            let squashed = t.reshape(f_v, &[1, t.value(f_v).len()]);
            Ok((squashed, f_t))
        }
    }

    #[test]
    fn additive_zero_hook_matches_plain_pass() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let (ids, mask) = tok();
        let img = test_image();

        let mut t1 = Tape::new();
        let plain = b.encode(&mut t1, &store, &img, &ids, &mask, None).unwrap();
        let mut t2 = Tape::new();
        let mut hook = AddZero;
        let hooked = b
            .encode(&mut t2, &store, &img, &ids, &mask, Some(&mut hook))
            .unwrap();
        for ((v1, w1), (v2, w2)) in plain.stages.iter().zip(&hooked.stages) {
            assert_eq!(t1.value(*v1), t2.value(*v2));
            assert_eq!(t1.value(*w1), t2.value(*w2));
        }
        assert_eq!(t1.value(plain.sentence), t2.value(hooked.sentence));
    }

    #[test]
    fn zeroing_stage2_changes_downstream_features() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let (ids, mask) = tok();
        let img = test_image();

        let mut t1 = Tape::new();
        let plain = b.encode(&mut t1, &store, &img, &ids, &mask, None).unwrap();
        let mut t2 = Tape::new();
        let mut hook = ZeroVisual { at: 2 };
        let hooked = b
            .encode(&mut t2, &store, &img, &ids, &mask, Some(&mut hook))
            .unwrap();
        // stage 1 unchanged, stages 3..N differ from the plain pass
        assert_eq!(t1.value(plain.stages[0].0), t2.value(hooked.stages[0].0));
        for i in 2..4 {
            assert_ne!(t1.value(plain.stages[i].0), t2.value(hooked.stages[i].0));
        }
    }

    #[test]
    fn bad_hook_shape_is_an_interception_error() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let (ids, mask) = tok();
        let img = test_image();
        let mut t = Tape::new();
        let mut hook = BadShape;
        assert!(matches!(
            b.encode(&mut t, &store, &img, &ids, &mask, Some(&mut hook)),
            Err(Error::Interception(_))
        ));
    }

    #[test]
    fn wrong_image_shape_is_an_input_error() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let (ids, mask) = tok();
        let img = Array3::<f64>::zeros((32, 64, 3));
        let mut t = Tape::new();
        assert!(matches!(
            b.encode(&mut t, &store, &img, &ids, &mask, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn snapshot_catches_manual_perturbation() {
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        let snap = b.snapshot(&store);
        assert!(b.assert_frozen(&store, &snap).unwrap());
        let id = store.find("backbone.vision.stem.k").unwrap();
        let mut v: ArrayD<f64> = store.entry(id).value.clone();
        v.as_slice_mut().unwrap()[0] += 1e-9;
        store.load_value(id, v).unwrap();
        assert!(!b.assert_frozen(&store, &snap).unwrap());
    }

    #[test]
    fn weights_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.rga");
        let mut store = ParamStore::new();
        let b = build_toy_backbone(&mut store, &cfg()).unwrap();
        b.export_weights(&store, &path).unwrap();

        let mut c2 = cfg();
        c2.seed = 1234;
        let mut store2 = ParamStore::new();
        let b2 = build_toy_backbone(&mut store2, &c2).unwrap();
        let snap1 = b.snapshot(&store);
        assert!(!store2.matches_snapshot(&snap1).unwrap());
        b2.import_weights(&mut store2, &path).unwrap();
        assert!(store2.matches_snapshot(&snap1).unwrap());
    }
}
