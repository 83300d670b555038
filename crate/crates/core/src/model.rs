//! Feature network and decoder sharing one parameter store.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{ClipEntry, VideoClip};
use crate::decoder::{infer_tracks, Decoder, DecoderOutput};
use crate::error::{Error, Result};
use crate::eval::PredictedTrack;
use crate::features::FeatureNet;
use crate::losses::{build_targets, match_tracks, total_loss_graph, LossBreakdown, LossConfig, MatchResult, TrackTarget};
use crate::params::{self, ParamStore};

#[derive(Debug, Clone)]
pub struct Model {
    pub features: FeatureNet,
    pub decoder: Decoder,
    pub store: ParamStore,
}

/// Loss, matching and parameter gradients of one clip.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub matching: MatchResult,
    /// One slot per parameter, in store order.
    pub grads: Vec<Option<Array2<f64>>>,
}

impl Model {
    /// Builds and initializes a model; all randomness comes from `seed`.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let features = FeatureNet::new(cfg.feature_config(), &mut store, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder_config(), &mut store, &mut rng)?;
        Ok(Model {
            features,
            decoder,
            store,
        })
    }

    pub fn forward(&self, clip: &VideoClip) -> Result<DecoderOutput> {
        self.store.check_finite()?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let fm = self.features.forward(&mut g, &p, clip)?;
        let vars = self.decoder.forward_graph(&mut g, &p, &fm)?;
        Ok(vars.to_output(&g))
    }

    pub fn predict(&self, clip: &VideoClip, score_thresh: f64) -> Result<Vec<PredictedTrack>> {
        let out = self.forward(clip)?;
        Ok(infer_tracks(&out, &clip.clip_id, score_thresh))
    }

    /// Supervision targets for `entry` on this model's feature grid.
    pub fn targets(&self, entry: &ClipEntry, loss: &LossConfig) -> Result<Vec<TrackTarget>> {
        let (t, h, w) = entry.clip.shape();
        let s = self.features.config().stride;
        build_targets(entry, s, (t, h.div_ceil(s), w.div_ceil(s)), loss.contact_radius)
    }

    /// Forward pass, matching, loss and backward pass for one clip.
    pub fn step(&self, clip: &VideoClip, targets: &[TrackTarget], loss: &LossConfig) -> Result<StepResult> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, true);
        let fm = self.features.forward(&mut g, &p, clip)?;
        let vars = self.decoder.forward_graph(&mut g, &p, &fm)?;
        let matching = match_tracks(&vars.to_output(&g), targets, loss)?;
        let lv = total_loss_graph(&mut g, &vars, targets, &matching, loss)?;
        let mut grads = g.backward(lv.total);
        let grads = p.vars().iter().map(|&v| grads.take(v)).collect();
        Ok(StepResult {
            breakdown: lv.breakdown,
            matching,
            grads,
        })
    }

    /// Loss of one clip under a fixed matching, without gradients.
    pub fn loss_with_matching(
        &self,
        clip: &VideoClip,
        targets: &[TrackTarget],
        matching: &MatchResult,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let fm = self.features.forward(&mut g, &p, clip)?;
        let vars = self.decoder.forward_graph(&mut g, &p, &fm)?;
        Ok(total_loss_graph(&mut g, &vars, targets, matching, loss)?.breakdown)
    }

    pub fn save(&self, path: &std::path::Path, cfg: &RunConfig) -> Result<()> {
        params::save_checkpoint(path, &cfg.to_toml(), &self.store)
    }

    /// Builds a model for `cfg` and fills it from a checkpoint. The model
    /// section of the checkpoint's embedded config must agree with `cfg`.
    pub fn load(path: &std::path::Path, cfg: &RunConfig) -> Result<Self> {
        let (text, stored) = params::load_checkpoint(path)?;
        let saved = RunConfig::from_toml(&text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let (a, b) = (&saved.model, &cfg.model);
        if (a.n_queries, a.channels, a.layers, a.stride) != (b.n_queries, b.channels, b.layers, b.stride) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has N={} C={} L={} stride={}, config asks for N={} C={} L={} stride={}",
                a.n_queries, a.channels, a.layers, a.stride, b.n_queries, b.channels, b.layers, b.stride
            )));
        }
        let mut model = Model::new(cfg, 0)?;
        model.store.load_from(&stored)?;
        model.store.check_finite()?;
        Ok(model)
    }
}
