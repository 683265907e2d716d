//! Bi-directional vision-language adapter with an optional depth stream.
//!
//! One adapter sits between each pair of consecutive backbone stages. Per
//! stage it down-projects both streams to a shared token width, adds the
//! carried state from the previous adapter, fuses visual/depth/text tokens
//! in a single self-attention layer, writes the fused features back into
//! the frozen streams through zero-initialized projections, and emits
//! stand-alone forward-layer taps for the decoder.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, StageInterceptor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    /// Shared token width C_a.
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Kernel size of the visual down-projection (1 keeps it per-site).
    pub down_kernel: usize,
    /// Feed depth tokens through the fusion layer.
    pub use_depth: bool,
    /// Emit stand-alone forward-layer taps for the decoder; when off the
    /// decoder consumes the raw backbone stage features instead.
    pub forward_layers: bool,
    /// Write fused features back into the backbone streams.
    pub back_projection: bool,
    /// Channels of the visual forward-layer taps.
    pub tap_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            dim: 32,
            heads: 4,
            ffn_expansion: 2,
            down_kernel: 1,
            use_depth: false,
            forward_layers: true,
            back_projection: true,
            tap_dim: 32,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_expansion == 0 || self.tap_dim == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "adapter dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.down_kernel == 0 || self.down_kernel % 2 == 0 {
            return Err(Error::Config("down-projection kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Carried adapter streams between stages; token counts follow the stage grid.
pub struct AdapterState {
    pub visual: Var,
    pub text: Var,
    pub depth: Option<Var>,
    pub grid: (usize, usize),
}

/// One fused-feature tap per adapter stage, routed to the decoder.
pub struct TapEntry {
    pub stage: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    /// (h, w, channels) visual tap.
    pub visual: Var,
    /// (L, C_t) text tap.
    pub text: Option<Var>,
}

pub struct AdapterLayer {
    pub stage: usize,
    down_v: Conv2d,
    down_t: Linear,
    ln_v: LayerNorm,
    ln_d: LayerNorm,
    ln_t: LayerNorm,
    attn: MultiHeadAttention,
    ffn: FeedForward,
    back_v: Conv2d,
    back_t: Linear,
    fl_v: Conv2d,
    fl_t: Linear,
    dim: usize,
}

impl AdapterLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        stage: usize,
        stream_channels: usize,
        text_dim: usize,
        cfg: &AdapterConfig,
    ) -> Self {
        let p = format!("adapter.stage{stage}");
        let ca = cfg.dim;
        AdapterLayer {
            stage,
            down_v: Conv2d::he(
                store,
                rng,
                &format!("{p}.down_v"),
                cfg.down_kernel,
                stream_channels,
                ca,
                1,
                false,
            ),
            down_t: Linear::xavier(store, rng, &format!("{p}.down_t"), text_dim, ca, false),
            ln_v: LayerNorm::new(store, rng, &format!("{p}.ln_v"), ca, false),
            ln_d: LayerNorm::new(store, rng, &format!("{p}.ln_d"), ca, false),
            ln_t: LayerNorm::new(store, rng, &format!("{p}.ln_t"), ca, false),
            attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{p}.attn"),
                ca,
                ca,
                ca,
                cfg.heads,
                false,
            ),
            ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), ca, cfg.ffn_expansion, false),
            // zero-initialized so the adapter starts as an exact identity
            // on the frozen streams
            back_v: Conv2d::new(
                store,
                rng,
                &format!("{p}.back_v"),
                1,
                ca,
                stream_channels,
                1,
                Init::Zero,
                false,
            ),
            back_t: Linear::zeros(store, rng, &format!("{p}.back_t"), ca, text_dim, false),
            fl_v: Conv2d::he(store, rng, &format!("{p}.fl_v"), 1, ca, cfg.tap_dim, 1, false),
            fl_t: Linear::xavier(store, rng, &format!("{p}.fl_t"), ca, text_dim, false),
            dim: ca,
        }
    }

    /// Down-project both streams to the shared width and add the carried
    /// state: v = Conv(f_v) + prev_v, t = Linear(f_t) + prev_t.
    /// `f_v` is (h, w, C_i); outputs are token matrices.
    pub fn down_project(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        f_v: Var,
        f_t: Var,
        prev_v: Var,
        prev_t: Var,
    ) -> (Var, Var) {
        let shape = t.shape(f_v).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let dv = self.down_v.forward(t, store, f_v);
        let dv = t.reshape(dv, &[h * w, self.dim]);
        let v_hat = t.add(dv, prev_v);
        let dt = self.down_t.forward(t, store, f_t);
        let t_hat = t.add(dt, prev_t);
        (v_hat, t_hat)
    }

    /// Joint token fusion: per-modality layer norm, concat, one
    /// self-attention + feed-forward layer with residuals, split back into
    /// the original partition sizes.
    pub fn fuse_tokens(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        v_hat: Var,
        depth_prev: Option<Var>,
        t_hat: Var,
        pad_mask: &[bool],
    ) -> Result<(Var, Option<Var>, Var)> {
        let nv = t.shape(v_hat)[0];
        let nt = t.shape(t_hat)[0];
        if t.shape(v_hat)[1] != self.dim || t.shape(t_hat)[1] != self.dim {
            return Err(Error::Fusion(format!(
                "token widths {:?}/{:?} do not match adapter dim {}",
                t.shape(v_hat),
                t.shape(t_hat),
                self.dim
            )));
        }
        if pad_mask.len() != nt {
            return Err(Error::Fusion("padding mask length mismatch".into()));
        }
        let lv = self.ln_v.forward(t, store, v_hat);
        let mut parts = vec![lv];
        let mut nd = 0;
        if let Some(d) = depth_prev {
            if t.shape(d)[1] != self.dim {
                return Err(Error::Fusion("depth token width mismatch".into()));
            }
            nd = t.shape(d)[0];
            parts.push(self.ln_d.forward(t, store, d));
        }
        parts.push(self.ln_t.forward(t, store, t_hat));
        let x = t.concat_rows(&parts);

        let mut key_mask = vec![true; nv + nd];
        key_mask.extend_from_slice(pad_mask);
        let a = self.attn.forward(t, store, x, x, Some(&key_mask));
        let x = t.add(a, x);
        let f = self.ffn.forward(t, store, x);
        let x = t.add(f, x);

        let out_v = t.slice_rows(x, 0, nv);
        let out_d = if nd > 0 {
            Some(t.slice_rows(x, nv, nd))
        } else {
            None
        };
        let out_t = t.slice_rows(x, nv + nd, nt);
        Ok((out_v, out_d, out_t))
    }

    /// Write fused features back into the backbone streams:
    /// f_v + Conv(adpt_v), f_t + Linear(adpt_t).
    pub fn back_project(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        adpt_v: Var,
        adpt_t: Var,
        f_v: Var,
        f_t: Var,
    ) -> (Var, Var) {
        let shape = t.shape(f_v).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let vg = t.reshape(adpt_v, &[h, w, self.dim]);
        let bv = self.back_v.forward(t, store, vg);
        let new_v = t.add(bv, f_v);
        let bt = self.back_t.forward(t, store, adpt_t);
        let new_t = t.add(bt, f_t);
        (new_v, new_t)
    }

    /// Stand-alone forward layers routing fused features out to the decoder.
    pub fn forward_taps(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        adpt_v: Var,
        adpt_t: Var,
        grid: (usize, usize),
    ) -> (Var, Var) {
        let vg = t.reshape(adpt_v, &[grid.0, grid.1, self.dim]);
        let tap_v = self.fl_v.forward(t, store, vg);
        let tap_t = self.fl_t.forward(t, store, adpt_t);
        (tap_v, tap_t)
    }
}

pub struct DepthStem {
    conv: Conv2d,
    stem_stride: usize,
    stage1_grid: (usize, usize),
    dim: usize,
}

impl DepthStem {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        backbone: &BackboneConfig,
        cfg: &AdapterConfig,
    ) -> Self {
        DepthStem {
            conv: Conv2d::he(
                store,
                rng,
                "adapter.depth_stem.conv",
                backbone.stem_stride,
                1,
                cfg.dim,
                backbone.stem_stride,
                false,
            )
            .with_pad(0),
            stem_stride: backbone.stem_stride,
            stage1_grid: backbone.stage_sizes()[0],
            dim: cfg.dim,
        }
    }

    /// Depth image (H, W) in meters -> stage-1-grid tokens (H1*W1, C_a).
    /// The image is normalized to zero mean and unit variance first.
    pub fn forward(&self, t: &mut Tape, depth: &ndarray::Array2<f64>, store: &ParamStore) -> Result<Var> {
        if depth.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(
                "depth map must be finite and non-negative".into(),
            ));
        }
        let (h, w) = depth.dim();
        if h % self.stem_stride != 0 || w % self.stem_stride != 0 {
            return Err(Error::Input(format!(
                "depth map {h}x{w} not divisible by stem stride {}",
                self.stem_stride
            )));
        }
        let mean = depth.mean().unwrap();
        let var = depth.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        let std = var.sqrt().max(1e-8);
        let normed = depth.mapv(|v| (v - mean) / std);
        let cube = normed
            .into_shape_with_order((h, w, 1))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let x = t.leaf3(cube);
        let tokens = self.conv.forward(t, store, x);
        let cur = (t.shape(tokens)[0], t.shape(tokens)[1]);
        let tokens = if cur != self.stage1_grid {
            t.resize_bilinear(tokens, self.stage1_grid.0, self.stage1_grid.1)
        } else {
            tokens
        };
        let n = self.stage1_grid.0 * self.stage1_grid.1;
        Ok(t.reshape(tokens, &[n, self.dim]))
    }
}

/// All adapter layers for one backbone, positions 1..=N-1.
pub struct AdapterStack {
    pub cfg: AdapterConfig,
    pub layers: Vec<AdapterLayer>,
    pub depth_stem: DepthStem,
    stage_grids: Vec<(usize, usize)>,
}

impl AdapterStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        backbone: &BackboneConfig,
        cfg: &AdapterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for stage in 1..backbone.num_stages {
            layers.push(AdapterLayer::new(
                store,
                rng,
                stage,
                backbone.stage_channels[stage - 1],
                backbone.text_dim,
                cfg,
            ));
        }
        let depth_stem = DepthStem::new(store, rng, backbone, cfg);
        Ok(AdapterStack {
            cfg: cfg.clone(),
            layers,
            depth_stem,
            stage_grids: backbone.stage_sizes(),
        })
    }

    /// Start a forward run; computes initial depth tokens when enabled.
    pub fn begin(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        depth: Option<&ndarray::Array2<f64>>,
    ) -> Result<AdapterRun<'_>> {
        let depth0 = match (self.cfg.use_depth, depth) {
            (true, Some(d)) => Some(self.depth_stem.forward(t, d, store)?),
            (true, None) => {
                return Err(Error::Input(
                    "adapter configured with depth tokens but no depth map given".into(),
                ))
            }
            (false, _) => None,
        };
        Ok(AdapterRun {
            stack: self,
            state: None,
            depth0,
            taps: Vec::new(),
        })
    }
}

/// Per-forward adapter state: carried streams plus the collected taps.
pub struct AdapterRun<'a> {
    stack: &'a AdapterStack,
    state: Option<AdapterState>,
    depth0: Option<Var>,
    pub taps: Vec<TapEntry>,
}

impl AdapterRun<'_> {
    /// Resample carried tokens when the stage grid changed: bilinear for
    /// the visual/adapter stream, average pooling for depth tokens.
    fn resample(
        t: &mut Tape,
        tokens: Var,
        from: (usize, usize),
        to: (usize, usize),
        dim: usize,
        pool: bool,
    ) -> Var {
        if from == to {
            return tokens;
        }
        let g = t.reshape(tokens, &[from.0, from.1, dim]);
        let r = if pool && from.0 % to.0 == 0 && from.1 % to.1 == 0 && from.0 / to.0 == from.1 / to.1
        {
            t.avg_pool(g, from.0 / to.0)
        } else {
            t.resize_bilinear(g, to.0, to.1)
        };
        t.reshape(r, &[to.0 * to.1, dim])
    }
}

impl StageInterceptor for AdapterRun<'_> {
    fn intercept(
        &mut self,
        t: &mut Tape,
        store: &ParamStore,
        stage: usize,
        f_v: Var,
        f_t: Var,
        pad_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let layer = &self.stack.layers[stage - 1];
        let grid = self.stack.stage_grids[stage - 1];
        let n = grid.0 * grid.1;
        let ca = self.stack.cfg.dim;

        // carried state; all-zero ahead of the first adapter
        let (prev_v, prev_t, prev_d) = match self.state.take() {
            Some(s) => {
                let pv = Self::resample(t, s.visual, s.grid, grid, ca, false);
                let pd = s
                    .depth
                    .map(|d| Self::resample(t, d, s.grid, grid, ca, true));
                (pv, s.text, pd)
            }
            None => {
                let zv = t.leaf(ArrayD::zeros(ndarray::IxDyn(&[n, ca])));
                let zt = t.leaf(ArrayD::zeros(ndarray::IxDyn(&[pad_mask.len(), ca])));
                let d0 = self.depth0.map(|d| {
                    let g0 = self.stack.stage_grids[0];
                    Self::resample(t, d, g0, grid, ca, true)
                });
                (zv, zt, d0)
            }
        };

        let (v_hat, t_hat) = layer.down_project(t, store, f_v, f_t, prev_v, prev_t);
        let (adpt_v, adpt_d, adpt_t) = layer.fuse_tokens(t, store, v_hat, prev_d, t_hat, pad_mask)?;

        let (new_v, new_t) = if self.stack.cfg.back_projection {
            layer.back_project(t, store, adpt_v, adpt_t, f_v, f_t)
        } else {
            (f_v, f_t)
        };

        if self.stack.cfg.forward_layers {
            let (tap_v, tap_t) = layer.forward_taps(t, store, adpt_v, adpt_t, grid);
            self.taps.push(TapEntry {
                stage,
                grid,
                channels: self.stack.cfg.tap_dim,
                visual: tap_v,
                text: Some(tap_t),
            });
        } else {
            // ablation: decoder consumes the raw (post back-projection)
            // backbone stage features
            self.taps.push(TapEntry {
                stage,
                grid,
                channels: t.shape(new_v)[2],
                visual: new_v,
                text: None,
            });
        }

        self.state = Some(AdapterState {
            visual: adpt_v,
            text: adpt_t,
            depth: adpt_d,
            grid,
        });
        Ok((new_v, new_t))
    }
}

// ---- parameter registry ----

pub const KNOWN_GROUPS: &[&str] = &["backbone.", "adapter.", "decoder.", "heads."];

#[derive(Clone, Debug)]
pub struct RegistryEntry {
    pub name: String,
    pub count: usize,
    pub frozen: bool,
    pub group: String,
}

/// Exact partition of every parameter into frozen/tunable with group totals.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ParamRegistry {
    pub fn tunable_total(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.count)
            .sum()
    }

    pub fn frozen_total(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.frozen)
            .map(|e| e.count)
            .sum()
    }

    pub fn group_total(&self, group: &str, frozen: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.frozen == frozen)
            .map(|e| e.count)
            .sum()
    }

    /// Tunable parameters as a percentage of the frozen backbone.
    pub fn ratio_percent(&self) -> f64 {
        let frozen_backbone = self.group_total("backbone.", true);
        if frozen_backbone == 0 {
            return 0.0;
        }
        100.0 * self.tunable_total() as f64 / frozen_backbone as f64
    }
}

/// Enumerate and classify every parameter in the store. Backbone parameters
/// must be frozen and everything else tunable; a parameter outside the known
/// groups (or with an inconsistent flag) is an audit error.
pub fn tunable_parameters(store: &ParamStore) -> Result<ParamRegistry> {
    let mut entries = Vec::new();
    for (_, e) in store.iter() {
        let group = KNOWN_GROUPS
            .iter()
            .find(|g| e.name.starts_with(*g))
            .ok_or_else(|| Error::Audit(format!("parameter {} belongs to no known group", e.name)))?;
        let should_be_frozen = *group == "backbone.";
        if e.frozen != should_be_frozen {
            return Err(Error::Audit(format!(
                "parameter {} frozen flag {} conflicts with group {}",
                e.name, e.frozen, group
            )));
        }
        entries.push(RegistryEntry {
            name: e.name.clone(),
            count: e.value.len(),
            frozen: e.frozen,
            group: group.to_string(),
        });
    }
    Ok(ParamRegistry { entries })
}
