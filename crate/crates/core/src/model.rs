//! Task model assembly: frozen backbone, adapter stack, multimodal decoder
//! and the task-specific projector, all parameterized from one config.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterConfig, AdapterStack};
use crate::autodiff::{Tape, Var};
use crate::backbone::{build_toy_backbone, Backbone, BackboneConfig};
use crate::decoder::{DecoderConfig, MultimodalDecoder};
use crate::error::{Error, Result};
use crate::heads::{AffordanceHead, HeadsConfig, ResHead, RgsHeads, RgsOutput, SegOutput};
use crate::nn::ParamStore;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Res,
    Rgs,
    Rga,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "res" => Ok(Task::Res),
            "rgs" => Ok(Task::Rgs),
            "rga" => Ok(Task::Rga),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Res => "res",
            Task::Rgs => "rgs",
            Task::Rga => "rga",
        })
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn desk_default(task: Task) -> Self {
        let mut adapter = AdapterConfig::default();
        adapter.use_depth = task != Task::Res;
        ModelConfig {
            task,
            backbone: BackboneConfig::default(),
            adapter,
            decoder: DecoderConfig::default(),
            heads: HeadsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.decoder.validate(self.backbone.image_hw)?;
        self.heads
            .validate(self.backbone.image_hw, self.decoder.decode_stride)?;
        if self.task == Task::Res && self.adapter.use_depth {
            return Err(Error::Config(
                "the res task takes no depth input; disable adapter depth tokens".into(),
            ));
        }
        Ok(())
    }
}

pub enum TaskHeads {
    Res(ResHead),
    Rgs(RgsHeads),
    Rga(AffordanceHead),
}

/// Task-specific tape outputs of one forward pass.
pub enum TaskOutput {
    Res {
        seg: SegOutput,
    },
    Rgs {
        out: RgsOutput,
    },
    Rga {
        /// (H, W, 6) affordance scores in [0, 1].
        scores: Var,
    },
}

impl TaskOutput {
    pub fn as_res(&self) -> &SegOutput {
        match self {
            TaskOutput::Res { seg } => seg,
            _ => panic!("not a res output"),
        }
    }

    pub fn as_rgs(&self) -> &RgsOutput {
        match self {
            TaskOutput::Rgs { out } => out,
            _ => panic!("not a rgs output"),
        }
    }

    pub fn as_rga(&self) -> Var {
        match self {
            TaskOutput::Rga { scores } => *scores,
            _ => panic!("not a rga output"),
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub adapters: AdapterStack,
    pub decoder: MultimodalDecoder,
    pub heads: TaskHeads,
    pub tokenizer: Tokenizer,
}

impl Model {
    /// Build the full model; backbone parameters come from the backbone
    /// seed, everything tunable from `tunable_seed`.
    pub fn build(cfg: &ModelConfig, tunable_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = build_toy_backbone(&mut store, &cfg.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(tunable_seed);
        let adapters = AdapterStack::new(&mut store, &mut rng, &cfg.backbone, &cfg.adapter)?;
        let scale_channels: Vec<usize> = if cfg.adapter.forward_layers {
            vec![cfg.adapter.tap_dim; cfg.backbone.num_stages - 1]
        } else {
            cfg.backbone.stage_channels[..cfg.backbone.num_stages - 1].to_vec()
        };
        let decoder = MultimodalDecoder::new(
            &mut store,
            &mut rng,
            &scale_channels,
            cfg.backbone.sentence_dim,
            cfg.backbone.text_dim,
            cfg.backbone.image_hw,
            &cfg.decoder,
        )?;
        let grid = decoder.grid;
        let heads = match cfg.task {
            Task::Res => TaskHeads::Res(ResHead::new(
                &mut store,
                &mut rng,
                cfg.decoder.dim,
                cfg.backbone.sentence_dim,
                grid,
                cfg.backbone.image_hw,
                &cfg.heads,
            )?),
            Task::Rgs => TaskHeads::Rgs(RgsHeads::new(
                &mut store,
                &mut rng,
                cfg.decoder.dim,
                cfg.backbone.sentence_dim,
                grid,
                cfg.backbone.image_hw,
                &cfg.heads,
            )?),
            Task::Rga => TaskHeads::Rga(AffordanceHead::new(
                &mut store,
                &mut rng,
                cfg.decoder.dim,
                cfg.backbone.sentence_dim,
                grid,
                cfg.backbone.image_hw,
                &cfg.heads,
            )?),
        };
        let tokenizer = Tokenizer::with_default_vocab(cfg.backbone.token_len);
        if tokenizer.vocab_size() != cfg.backbone.vocab_size {
            return Err(Error::Config(format!(
                "config vocab size {} does not match the tokenizer's {}",
                cfg.backbone.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Model {
            cfg: cfg.clone(),
            store,
            backbone,
            adapters,
            decoder,
            heads,
            tokenizer,
        })
    }

    /// Whether this model consumes a depth map.
    pub fn needs_depth(&self) -> bool {
        self.cfg.adapter.use_depth
    }

    /// Full forward pass for one sample.
    pub fn forward(
        &self,
        t: &mut Tape,
        image: &Array3<f64>,
        token_ids: &[usize],
        pad_mask: &[bool],
        depth: Option<&Array2<f64>>,
    ) -> Result<TaskOutput> {
        let mut run = self
            .adapters
            .begin(t, &self.store, if self.needs_depth() { depth } else { None })?;
        let encoded =
            self.backbone
                .encode(t, &self.store, image, token_ids, pad_mask, Some(&mut run))?;

        let scales: Vec<Var> = run.taps.iter().map(|tap| tap.visual).collect();
        // route the last text tap out alongside the backbone's words
        let words = match run.taps.last().and_then(|tap| tap.text) {
            Some(tap_t) => t.add(encoded.words, tap_t),
            None => encoded.words,
        };

        let fvs = self
            .decoder
            .pixel_sentence_fuse(t, &self.store, &scales, encoded.sentence)?;
        let f_c = self
            .decoder
            .pixel_words_decode(t, &self.store, fvs, words, pad_mask)?;

        match &self.heads {
            TaskHeads::Res(head) => {
                let seg = head.forward(t, &self.store, f_c, encoded.sentence)?;
                Ok(TaskOutput::Res { seg })
            }
            TaskHeads::Rgs(heads) => {
                let out = heads.forward(t, &self.store, f_c, encoded.sentence)?;
                Ok(TaskOutput::Rgs { out })
            }
            TaskHeads::Rga(head) => {
                let scores = head.forward(t, &self.store, f_c, encoded.sentence)?;
                Ok(TaskOutput::Rga { scores })
            }
        }
    }

    /// Tokenize an expression with the model's tokenizer.
    pub fn tokenize(&self, expression: &str) -> Result<(Vec<usize>, Vec<bool>)> {
        self.tokenizer.tokenize(expression)
    }

    /// Binary mask from RES logits using the configured threshold.
    pub fn binarize_mask(&self, t: &Tape, full_logits: Var) -> Array2<bool> {
        let v = t.value(full_logits);
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let thr = self.cfg.heads.mask_threshold;
        Array2::from_shape_fn((h, w), |(y, x)| {
            1.0 / (1.0 + (-v[[y, x, 0]]).exp()) > thr
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Array3<f64> {
        Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
            ((y * 3 + x * 5 + c * 7) % 17) as f64 / 17.0
        })
    }

    fn depth() -> Array2<f64> {
        Array2::from_shape_fn((64, 64), |(y, x)| 1.0 + ((y + x) % 5) as f64 * 0.01)
    }

    #[test]
    fn res_model_forward_shapes() {
        let cfg = ModelConfig::desk_default(Task::Res);
        let model = Model::build(&cfg, 1).unwrap();
        let (ids, mask) = model.tokenize("the red cube").unwrap();
        let mut t = Tape::new();
        let out = model.forward(&mut t, &image(), &ids, &mask, None).unwrap();
        let seg = out.as_res();
        assert_eq!(t.shape(seg.stride4), &[16, 16, 1]);
        assert_eq!(t.shape(seg.full), &[64, 64, 1]);
    }

    #[test]
    fn rgs_model_needs_depth() {
        let cfg = ModelConfig::desk_default(Task::Rgs);
        let model = Model::build(&cfg, 1).unwrap();
        assert!(model.needs_depth());
        let (ids, mask) = model.tokenize("the red cube").unwrap();
        let mut t = Tape::new();
        assert!(model.forward(&mut t, &image(), &ids, &mask, None).is_err());
        let d = depth();
        let out = model.forward(&mut t, &image(), &ids, &mask, Some(&d)).unwrap();
        let rgs = out.as_rgs();
        assert_eq!(t.shape(rgs.quality), &[64, 64]);
    }

    #[test]
    fn rga_model_forward() {
        let cfg = ModelConfig::desk_default(Task::Rga);
        let model = Model::build(&cfg, 2).unwrap();
        let (ids, mask) = model.tokenize("the mustard bottle").unwrap();
        let mut t = Tape::new();
        let d = depth();
        let out = model.forward(&mut t, &image(), &ids, &mask, Some(&d)).unwrap();
        assert_eq!(t.shape(out.as_rga()), &[64, 64, 6]);
    }

    #[test]
    fn res_with_depth_is_a_config_error() {
        let mut cfg = ModelConfig::desk_default(Task::Res);
        cfg.adapter.use_depth = true;
        assert!(matches!(Model::build(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn registry_covers_whole_model() {
        let cfg = ModelConfig::desk_default(Task::Rgs);
        let model = Model::build(&cfg, 3).unwrap();
        let reg = crate::adapter::tunable_parameters(&model.store).unwrap();
        assert_eq!(
            reg.tunable_total() + reg.frozen_total(),
            model.store.num_scalars(|_| true)
        );
        assert!(reg.group_total("heads.", false) > 0);
        assert!(reg.group_total("decoder.", false) > 0);
        assert!(reg.group_total("adapter.", false) > 0);
    }

    #[test]
    fn ablation_without_forward_layers_still_runs() {
        let mut cfg = ModelConfig::desk_default(Task::Res);
        cfg.adapter.forward_layers = false;
        let model = Model::build(&cfg, 4).unwrap();
        let (ids, mask) = model.tokenize("the blue ball").unwrap();
        let mut t = Tape::new();
        let out = model.forward(&mut t, &image(), &ids, &mask, None).unwrap();
        assert_eq!(t.shape(out.as_res().full), &[64, 64, 1]);
    }

    #[test]
    fn forward_layer_taps_differ_from_raw_features_after_fusion() {
        // with FL on and nonzero adapter tokens the decoder input differs
        // from the raw stage features
        let cfg = ModelConfig::desk_default(Task::Res);
        let model = Model::build(&cfg, 5).unwrap();
        let (ids, mask) = model.tokenize("the red cube").unwrap();
        let mut t = Tape::new();
        let mut run = model.adapters.begin(&mut t, &model.store, None).unwrap();
        let encoded = model
            .backbone
            .encode(&mut t, &model.store, &image(), &ids, &mask, Some(&mut run))
            .unwrap();
        for (tap, (stage_v, _)) in run.taps.iter().zip(&encoded.stages) {
            if t.shape(tap.visual) == t.shape(*stage_v) {
                assert_ne!(t.value(tap.visual), t.value(*stage_v));
            }
        }
    }
}
