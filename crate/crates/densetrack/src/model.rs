//! Full tracking model: encoder + recurrent refiner + parameter registry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::build_pyramid;
use crate::encoder::{
    split_context_hidden, tile_query, BackboneConfig, BackboneKind, Encoder, FeatureBundle,
};
use crate::error::Result;
use crate::numerics::{checkpoint, concat, Element, InitCtx, ParamSet, Tensor};
use crate::refiner::{add_time_bias, time_embedding, Refiner, RefinerConfig, TrackState};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub refiner: RefinerConfig,
}

impl ModelConfig {
    /// Full-size model: ConvNeXt backbone, 3 blocks, radius-4 / 5-scale
    /// correlation, 4 iterations.
    pub fn main_full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::convnext_main(),
            refiner: RefinerConfig::default(),
        }
    }

    /// Smaller variant: residual encoder, refiner unchanged.
    pub fn tiny_full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::basic_tiny(),
            refiner: RefinerConfig::default(),
        }
    }

    /// Desk-scale model for CPU training on 64×64 synthetic videos.
    /// 64×64 frames give 8×8 feature cells, which caps the pyramid at 3
    /// levels (2^(L-1) must stay below the cell extent).
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                scale: 0.375,
                block_depths: [1, 1, 1],
                ..BackboneConfig::basic_tiny()
            },
            refiner: RefinerConfig {
                n_blocks: 2,
                heads: 4,
                corr_radius: 3,
                corr_levels: 3,
                ..RefinerConfig::default()
            },
        }
    }

    pub fn context_dim(&self) -> usize {
        self.backbone.context_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.refiner.validate(self.context_dim())
    }
}

pub struct TrackModel<E: Element> {
    pub cfg: ModelConfig,
    pub params: ParamSet<E>,
    pub encoder: Encoder<E>,
    pub refiner: Refiner<E>,
}

/// Query-frame encoding, computed once per video and reused by every
/// window: full feature map plus the context/hidden split.
pub struct QueryEncoding<E: Element> {
    pub feat: Tensor<E>,
    pub context: Tensor<E>,
    pub hidden_init: Tensor<E>,
}

impl<E: Element> TrackModel<E> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = InitCtx::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut ctx, "encoder", &cfg.backbone)?;
        let refiner = Refiner::new(&mut ctx, "refiner", &cfg.refiner, cfg.backbone.context_dim())?;
        Ok(TrackModel {
            cfg: cfg.clone(),
            params,
            encoder,
            refiner,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.total_values_with_prefix("encoder.backbone")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_params(path, &self.params)
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::load_params(path, &self.params)
    }

    /// Encode the query frame [1,3,H,W] and split its features.
    pub fn encode_query(&self, frame: &Tensor<E>) -> Result<QueryEncoding<E>> {
        let feats = self.encoder.encode_frames(frame)?;
        let s = feats.shape().to_vec();
        let feat = feats.reshape(&[s[1], s[2], s[3]]);
        let (context, hidden_init) = split_context_hidden(&feat, self.cfg.backbone.kind)?;
        Ok(QueryEncoding {
            feat,
            context,
            hidden_init,
        })
    }

    /// Encode one window's frames and pair them with the query split.
    pub fn encode_window(
        &self,
        frames: &Tensor<E>,
        query: &QueryEncoding<E>,
    ) -> Result<FeatureBundle<E>> {
        Ok(FeatureBundle {
            frame_feats: self.encoder.encode_frames(frames)?,
            query_context: query.context.clone(),
            query_hidden_init: query.hidden_init.clone(),
        })
    }

    /// The map correlated against target features: the full query features.
    /// For the splitting backbone this is context ‖ hidden; the basic
    /// backbone uses the (shared) map directly.
    pub fn query_feat_for_correlation(&self, bundle: &FeatureBundle<E>) -> Tensor<E> {
        match self.cfg.backbone.kind {
            BackboneKind::ConvnextMain => {
                concat(&[&bundle.query_context, &bundle.query_hidden_init], 0)
            }
            BackboneKind::BasicTiny => bundle.query_context.clone(),
        }
    }

    /// Run K refinement iterations on one window given an initial state.
    /// Returns every intermediate state (training supervises all of them).
    pub fn refine_window(
        &self,
        bundle: &FeatureBundle<E>,
        init: TrackState<E>,
        iters: usize,
    ) -> Result<Vec<TrackState<E>>> {
        let s = bundle.frame_feats.shape()[0];
        let query = self.query_feat_for_correlation(bundle);
        let pyramid = build_pyramid(&bundle.frame_feats, self.cfg.refiner.corr_levels)?;
        let ctx_dim = self.cfg.context_dim();
        let context = tile_query(&bundle.query_context, s);
        let emb = time_embedding::<E>(s, ctx_dim);
        let context = add_time_bias(&context, &emb);
        self.refiner.refine(init, &query, &pyramid, &context, iters)
    }

    /// Fresh state for the first window: zero flow (positions = meshgrid),
    /// zero logits, hidden from the query features.
    pub fn init_state(&self, s: usize, h: usize, w: usize, query: &QueryEncoding<E>) -> TrackState<E> {
        TrackState {
            flow: Tensor::zeros(&[s, 2, h, w]),
            vis_logit: Tensor::zeros(&[s, 1, h, w]),
            conf_logit: Tensor::zeros(&[s, 1, h, w]),
            hidden: tile_query(&query.hidden_init, s),
        }
    }
}

/// Parameter-count reference points (millions) for the stock configs.
pub mod budget {
    pub const BACKBONE_MAIN_M: f64 = 12.72;
    pub const FULL_MAIN_M: f64 = 16.48;
    pub const FULL_TINY_M: f64 = 6.29;
}

impl<E: Element> TrackModel<E> {
    /// Relative deviation of this model's parameter count from a target in
    /// millions.
    pub fn param_count_deviation(&self, target_millions: f64) -> f64 {
        let n = self.param_count() as f64;
        (n - target_millions * 1e6).abs() / (target_millions * 1e6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_parameter_budget() {
        let m = TrackModel::<f32>::new(&ModelConfig::main_full(), 0).unwrap();
        let backbone = m.backbone_param_count() as f64;
        assert!(
            (backbone - budget::BACKBONE_MAIN_M * 1e6).abs() / (budget::BACKBONE_MAIN_M * 1e6)
                < 0.01,
            "backbone {backbone}"
        );
        assert!(
            m.param_count_deviation(budget::FULL_MAIN_M) < 0.02,
            "full model {} vs {}M",
            m.param_count(),
            budget::FULL_MAIN_M
        );
    }

    #[test]
    fn tiny_model_parameter_budget() {
        let m = TrackModel::<f32>::new(&ModelConfig::tiny_full(), 0).unwrap();
        assert!(
            m.param_count_deviation(budget::FULL_TINY_M) < 0.03,
            "tiny model {} vs {}M",
            m.param_count(),
            budget::FULL_TINY_M
        );
    }

    #[test]
    fn desk_model_is_small() {
        let m = TrackModel::<f32>::new(&ModelConfig::desk(), 0).unwrap();
        let n = m.param_count();
        assert!(
            (200_000..900_000).contains(&n),
            "desk model should be roughly half a million params, got {n}"
        );
    }

    #[test]
    fn iteration_count_does_not_change_params() {
        let mut cfg = ModelConfig::desk();
        let a = TrackModel::<f32>::new(&cfg, 1).unwrap().param_count();
        cfg.refiner.iters = 1;
        let b = TrackModel::<f32>::new(&cfg, 1).unwrap().param_count();
        assert_eq!(a, b);
    }

    #[test]
    fn init_state_is_zero_flow_half_probability() {
        let m = TrackModel::<f32>::new(&ModelConfig::desk(), 0).unwrap();
        let frame = Tensor::zeros(&[1, 3, 32, 32]);
        let q = m.encode_query(&frame).unwrap();
        let st = m.init_state(4, 4, 4, &q);
        assert!(st.flow.to_vec().iter().all(|&v| v == 0.0));
        assert!(st.vis_logit.to_vec().iter().all(|&v| v == 0.0));
        // sigmoid(0) = 0.5
        let vis = crate::numerics::sigmoid(&st.vis_logit);
        assert!(vis.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert_eq!(st.hidden.shape(), &[4, m.cfg.context_dim(), 4, 4]);
    }
}
