//! The two-view sparse detector: tiny convolutional backbone, bilinear RoI
//! cropping, six cascaded refinement heads with self- and cross-view
//! attention, dual objectness/malignancy classification, box regression and
//! MIL pooling up to image, breast and exam scores.

mod backbone;
mod head;
pub mod mil;
mod roi;

pub use mil::{exam_score, MilScheme};
pub use roi::roi_align;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::numerics::{init::normal, Graph, NodeId, NumericsError, ParamStore, Tensor};
use crate::numerics::{BoundParams, ParamId};

use backbone::Backbone;
use head::StageParams;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture knobs. Defaults follow the reference setup: 40 proposals,
/// 64-dim features, 8 heads, 6 stages, 7x7 RoI grid, bottleneck 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_proposals: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub stages: usize,
    pub roi_size: usize,
    pub dynconv_bottleneck: usize,
    pub mil_scheme: MilScheme,
    /// Dropout rate inside attention residuals during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_proposals: 40,
            feature_dim: 64,
            heads: 8,
            stages: 6,
            roi_size: 7,
            dynconv_bottleneck: 16,
            mil_scheme: MilScheme::NoisyOr,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Structural checks shared by every entry point. The production cascade
    /// is six stages; tests shrink it through the struct directly.
    pub fn validate(&self) -> Result<()> {
        if self.num_proposals == 0 {
            return Err(ModelError::Config("need at least one proposal".into()));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "feature dim {} not divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.feature_dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "feature dim {} must be divisible by 4",
                self.feature_dim
            )));
        }
        if self.stages == 0 {
            return Err(ModelError::Config("need at least one stage".into()));
        }
        Ok(())
    }

    /// Full validation for training/evaluation runs, where the stage count
    /// is pinned to six.
    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        if self.stages != 6 {
            return Err(ModelError::Config(format!(
                "cascade must have 6 stages, got {}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Which of the three components are active. All on reproduces the full
/// model; switching them off walks the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentFlags {
    pub dual_heads: bool,
    pub multi_view: bool,
    pub mil: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        ComponentFlags {
            dual_heads: true,
            multi_view: true,
            mil: true,
        }
    }
}

impl ComponentFlags {
    pub fn label(&self) -> String {
        match (self.dual_heads, self.multi_view, self.mil) {
            (false, false, false) => "baseline".to_string(),
            (true, false, false) => "dual".to_string(),
            (true, true, false) => "dual+mv".to_string(),
            (true, false, true) => "dual+mil".to_string(),
            (true, true, true) => "full".to_string(),
            (d, m, i) => format!("dual={d},mv={m},mil={i}"),
        }
    }
}

/// One stage's outputs for one view.
pub struct HeadOutput {
    /// Detached, clipped boxes: the geometry cropped at the next stage and
    /// reported at evaluation.
    pub boxes: Vec<BBox>,
    /// Differentiable `[n, 4]` decode of this stage's deltas (unclipped).
    pub boxes_t: NodeId,
    /// `[n]` objectness logits.
    pub objectness: NodeId,
    /// `[n]` malignancy logits (== objectness when dual heads are off).
    pub malignancy: NodeId,
    /// `[n, d]` refined proposal features.
    pub features: NodeId,
}

pub struct ViewForward {
    pub stages: Vec<HeadOutput>,
    /// Final-stage pooled image score in [0, 1].
    pub image_score: NodeId,
    /// Pooled score per stage (last element == `image_score`).
    pub stage_image_scores: Vec<NodeId>,
}

pub struct BreastForward {
    pub cc: ViewForward,
    pub mlo: ViewForward,
    /// Mean of the two final-stage view scores.
    pub breast_score: NodeId,
    pub stage_breast_scores: Vec<NodeId>,
}

impl BreastForward {
    pub fn view(&self, view: crate::synthdata::View) -> &ViewForward {
        match view {
            crate::synthdata::View::Cc => &self.cc,
            crate::synthdata::View::Mlo => &self.mlo,
        }
    }
}

/// Convert a stored f32 image into a `[h, w]` tensor.
pub fn image_to_tensor(height: usize, width: usize, pixels: &[f32]) -> Tensor {
    Tensor::new(
        vec![height, width],
        pixels.iter().map(|&p| p as f64).collect(),
    )
    .expect("pixel count matches dims")
}

pub struct MnmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    stages: Vec<StageParams>,
    proposal_features: ParamId,
    gap_head: (ParamId, ParamId),
}

impl MnmModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<MnmModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, config.feature_dim, &mut rng)?;
        let stages = (0..config.stages)
            .map(|i| StageParams::init(&mut store, i, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let proposal_features = store.add(
            "proposal_features",
            vec![config.num_proposals, config.feature_dim],
            normal(&mut rng, 0.02, config.num_proposals * config.feature_dim),
        );
        let gap_w = store.add(
            "gap_head.weight",
            vec![config.feature_dim, 1],
            crate::numerics::init::xavier_uniform(&mut rng, config.feature_dim, 1, config.feature_dim),
        );
        let gap_b = store.add("gap_head.bias", vec![1], vec![0.0]);
        Ok(MnmModel {
            config: config.clone(),
            store,
            backbone,
            stages,
            proposal_features,
            gap_head: (gap_w, gap_b),
        })
    }

    /// Run the full cascade on one breast (both views). `dropout` should be
    /// the configured rate during training and 0 everywhere else; the rng is
    /// only consumed when dropout is positive.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        image_cc: Tensor,
        image_mlo: Tensor,
        flags: &ComponentFlags,
        dropout: f64,
        rng: &mut R,
    ) -> Result<BreastForward> {
        let (img_h, img_w) = (image_cc.shape()[0] as f64, image_cc.shape()[1] as f64);
        if image_cc.shape() != image_mlo.shape() {
            return Err(ModelError::Config(format!(
                "view shapes differ: {:?} vs {:?}",
                image_cc.shape(),
                image_mlo.shape()
            )));
        }
        let img_cc = g.leaf(image_cc);
        let img_mlo = g.leaf(image_mlo);
        let feat_cc = self.backbone.forward(g, bound, img_cc)?;
        let feat_mlo = self.backbone.forward(g, bound, img_mlo)?;

        let whole_image = BBox::new(0.0, 0.0, img_w, img_h)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let mut boxes_cc = vec![whole_image; self.config.num_proposals];
        let mut boxes_mlo = boxes_cc.clone();
        let mut h_cc = bound.node(self.proposal_features);
        let mut h_mlo = h_cc;

        let mut stages_cc = Vec::with_capacity(self.config.stages);
        let mut stages_mlo = Vec::with_capacity(self.config.stages);
        for stage in &self.stages {
            h_cc = stage.self_attention(g, bound, h_cc, dropout, rng)?;
            h_mlo = stage.self_attention(g, bound, h_mlo, dropout, rng)?;
            if flags.multi_view {
                let (cc, mlo) =
                    stage.cross_view_attention(g, bound, h_cc, h_mlo, dropout, rng)?;
                h_cc = cc;
                h_mlo = mlo;
            }
            h_cc = stage.instance_interaction(
                g, bound, h_cc, feat_cc, &boxes_cc, &self.config, dropout, rng,
            )?;
            h_mlo = stage.instance_interaction(
                g, bound, h_mlo, feat_mlo, &boxes_mlo, &self.config, dropout, rng,
            )?;

            let (obj_cc, mal_cc) = stage.dual_classify(g, bound, h_cc, flags.dual_heads)?;
            let (obj_mlo, mal_mlo) = stage.dual_classify(g, bound, h_mlo, flags.dual_heads)?;
            let (bt_cc, new_cc) = stage.regress(g, bound, h_cc, &boxes_cc, img_w, img_h)?;
            let (bt_mlo, new_mlo) = stage.regress(g, bound, h_mlo, &boxes_mlo, img_w, img_h)?;

            stages_cc.push(HeadOutput {
                boxes: new_cc.clone(),
                boxes_t: bt_cc,
                objectness: obj_cc,
                malignancy: mal_cc,
                features: h_cc,
            });
            stages_mlo.push(HeadOutput {
                boxes: new_mlo.clone(),
                boxes_t: bt_mlo,
                objectness: obj_mlo,
                malignancy: mal_mlo,
                features: h_mlo,
            });
            boxes_cc = new_cc;
            boxes_mlo = new_mlo;
        }

        let pool_view = |g: &mut Graph, stages: &[HeadOutput]| -> Result<ViewForward> {
            let mut scores = Vec::with_capacity(stages.len());
            for s in stages {
                let probs = g.sigmoid(s.malignancy);
                scores.push(mil::image_pool(
                    g,
                    bound,
                    probs,
                    s.features,
                    self.config.mil_scheme,
                    self.gap_head,
                )?);
            }
            Ok(ViewForward {
                stages: Vec::new(), // filled by the caller
                image_score: *scores.last().expect("at least one stage"),
                stage_image_scores: scores,
            })
        };
        let mut view_cc = pool_view(g, &stages_cc)?;
        view_cc.stages = stages_cc;
        let mut view_mlo = pool_view(g, &stages_mlo)?;
        view_mlo.stages = stages_mlo;

        let stage_breast_scores = view_cc
            .stage_image_scores
            .iter()
            .zip(&view_mlo.stage_image_scores)
            .map(|(&a, &b)| mil::breast_score(g, a, b))
            .collect::<Result<Vec<_>>>()?;
        let breast_score = *stage_breast_scores.last().expect("at least one stage");

        Ok(BreastForward {
            cc: view_cc,
            mlo: view_mlo,
            breast_score,
            stage_breast_scores,
        })
    }

    /// Write `params.bin`, `params.json` and `model_config.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.display())))?;
        self.store
            .save(&dir.join("params.bin"), &dir.join("params.json"))?;
        let cfg = serde_json::to_string_pretty(&self.config)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("model_config.json"), cfg)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint directory, verifying that the blob
    /// matches the config's parameter layout exactly.
    pub fn load_checkpoint(dir: &Path) -> Result<MnmModel> {
        let cfg_text = std::fs::read_to_string(dir.join("model_config.json"))
            .map_err(|e| ModelError::Checkpoint(format!("model_config.json: {e}")))?;
        let config: ModelConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| ModelError::Checkpoint(format!("model_config.json: {e}")))?;
        let mut model = MnmModel::init(&config, 0)?;
        let loaded = ParamStore::load(&dir.join("params.bin"), &dir.join("params.json"))?;
        model.replace_params(&loaded)?;
        Ok(model)
    }

    /// Overwrite parameter values from another store with identical names
    /// and shapes.
    pub fn replace_params(&mut self, loaded: &ParamStore) -> Result<()> {
        if loaded.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model needs {}",
                loaded.len(),
                self.store.len()
            )));
        }
        for id in loaded.ids() {
            let name = loaded.name(id);
            let own = self.store.id_of(name).ok_or_else(|| {
                ModelError::Checkpoint(format!("unexpected parameter {name}"))
            })?;
            if self.store.shape(own) != loaded.shape(id) {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match model {:?}",
                    loaded.shape(id),
                    self.store.shape(own)
                )));
            }
            self.store
                .values_mut(own)
                .copy_from_slice(loaded.values(id));
        }
        Ok(())
    }
}
