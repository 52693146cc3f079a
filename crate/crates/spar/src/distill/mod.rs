//! Teacher feature precomputation, training-time augmentation, AdamW,
//! and the feature-distillation training loop.

mod augment;
mod store;
mod trainer;

pub use augment::{augment, augment_rng, ensure_min_side, hflip};
pub use store::{FeatureStore, FeatureStoreRecord, StoreDtype};
pub use trainer::{precompute_teacher, teacher_features, train, train_step};

use std::collections::{BTreeMap, BTreeSet};

use crate::vit::{block_tensor_name, ModelParams, ParamGrads, BLOCK_FIELDS};
use crate::{Result, SparError};

/// Which parameter subset the optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    /// All tensors of the last `n` transformer blocks.
    LastBlocks(usize),
    /// Every tensor, including patch projection and positional grid.
    All,
    PatchProjection,
    PosEncodings,
    /// Only the MLP tensors of the last two blocks.
    MlpOnly,
    /// Only the packed QKV projection of the last two blocks.
    QkvOnly,
}

impl Trainable {
    /// Canonical tensor names selected by this configuration.
    pub fn mask(&self, num_blocks: usize) -> BTreeSet<String> {
        fn add_blocks(set: &mut BTreeSet<String>, from: usize, to: usize, fields: &[&str]) {
            for b in from..to {
                for f in fields {
                    set.insert(block_tensor_name(b, f));
                }
            }
        }
        let mut set = BTreeSet::new();
        match self {
            Trainable::LastBlocks(n) => {
                add_blocks(&mut set, num_blocks.saturating_sub(*n), num_blocks, &BLOCK_FIELDS);
            }
            Trainable::All => {
                add_blocks(&mut set, 0, num_blocks, &BLOCK_FIELDS);
                set.insert("patch_projection.weight".to_string());
                set.insert("patch_projection.bias".to_string());
                set.insert("pos_encodings".to_string());
            }
            Trainable::PatchProjection => {
                set.insert("patch_projection.weight".to_string());
                set.insert("patch_projection.bias".to_string());
            }
            Trainable::PosEncodings => {
                set.insert("pos_encodings".to_string());
            }
            Trainable::MlpOnly => {
                add_blocks(
                    &mut set,
                    num_blocks.saturating_sub(2),
                    num_blocks,
                    &["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"],
                );
            }
            Trainable::QkvOnly => {
                add_blocks(&mut set, num_blocks.saturating_sub(2), num_blocks, &["qkv.weight", "qkv.bias"]);
            }
        }
        set
    }

    /// Parses the config-file spelling, e.g. `last_n_blocks(2)`.
    pub fn parse(s: &str) -> Result<Trainable> {
        let s = s.trim();
        match s {
            "all" => return Ok(Trainable::All),
            "patch_projection" => return Ok(Trainable::PatchProjection),
            "pos_encodings" => return Ok(Trainable::PosEncodings),
            "mlp_only" => return Ok(Trainable::MlpOnly),
            "qkv_only" => return Ok(Trainable::QkvOnly),
            _ => {}
        }
        if let Some(body) = s.strip_prefix("last_n_blocks(").and_then(|t| t.strip_suffix(')')) {
            let n: usize = body.trim().parse().map_err(|_| {
                SparError::Config(format!("bad block count in trainable spec `{s}`"))
            })?;
            if n == 0 {
                return Err(SparError::Config("last_n_blocks needs n >= 1".into()));
            }
            return Ok(Trainable::LastBlocks(n));
        }
        Err(SparError::Config(format!(
            "unknown trainable spec `{s}`; expected all, patch_projection, pos_encodings, \
             mlp_only, qkv_only or last_n_blocks(n)"
        )))
    }
}

/// Training hyperparameters and augmentation ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub trainable: Trainable,
    pub seed: u64,
    /// Random-resize range for the image's shorter side, in pixels.
    pub resize_short_min: usize,
    pub resize_short_max: usize,
    /// Minimum crop side; crops sample each side independently from
    /// `[crop_min, current dim]`.
    pub crop_min: usize,
    pub flip_prob: f64,
    pub crop_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 2e-5,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            trainable: Trainable::LastBlocks(2),
            seed: 0,
            resize_short_min: 512,
            resize_short_max: 2048,
            crop_min: 512,
            flip_prob: 0.5,
            crop_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (label, p) in [("flip_prob", self.flip_prob), ("crop_prob", self.crop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SparError::Config(format!("{label} {p} outside [0, 1]")));
            }
        }
        if self.resize_short_min > self.resize_short_max {
            return Err(SparError::Config(format!(
                "resize range [{}, {}] is inverted",
                self.resize_short_min, self.resize_short_max
            )));
        }
        if self.crop_min > self.resize_short_min {
            return Err(SparError::Config(format!(
                "crop_min {} exceeds resize_short_min {}",
                self.crop_min, self.resize_short_min
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(SparError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// First/second Adam moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-tensor Adam moments plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Decoupled-weight-decay Adam step with bias correction:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
/// `p <- p - lr*(m_hat/(sqrt(v_hat)+eps) + wd*p)`.
pub fn adamw_update(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in grads.tensors.keys() {
        if !params.trainable.contains(name) {
            return Err(SparError::InvalidArgument(format!(
                "gradient supplied for frozen tensor `{name}`"
            )));
        }
    }
    for name in &params.trainable {
        if !grads.tensors.contains_key(name) {
            return Err(SparError::InvalidArgument(format!(
                "trainable tensor `{name}` has no gradient"
            )));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t as i32);
    for (name, tensor) in params.tensors_mut() {
        let Some(grad) = grads.get(&name) else {
            continue;
        };
        if grad.dims != tensor.dims {
            return Err(SparError::ShapeMismatch(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                grad.dims, tensor.dims
            )));
        }
        let entry = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; tensor.len()],
            v: vec![0.0; tensor.len()],
        });
        for i in 0..tensor.len() {
            let g = grad.data[i];
            entry.m[i] = cfg.adam_beta1 * entry.m[i] + (1.0 - cfg.adam_beta1) * g;
            entry.v[i] = cfg.adam_beta2 * entry.v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            let p = tensor.data[i];
            tensor.data[i] =
                p - cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.adam_epsilon) + cfg.weight_decay * p);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{init_params, Param, ViTConfig};

    fn cfg4() -> ViTConfig {
        ViTConfig {
            patch_size: 16,
            native_side: 32,
            channels: 8,
            num_blocks: 4,
            num_heads: 2,
            mlp_ratio: 2.0,
            last_attention_identity: false,
        }
    }

    #[test]
    fn masks_select_expected_tensors() {
        let last2 = Trainable::LastBlocks(2).mask(4);
        assert!(last2.contains("blocks.2.qkv.weight"));
        assert!(last2.contains("blocks.3.mlp.fc2.bias"));
        assert!(!last2.contains("blocks.1.qkv.weight"));
        assert!(!last2.contains("pos_encodings"));
        assert_eq!(last2.len(), 24);

        let all = Trainable::All.mask(4);
        assert_eq!(all.len(), 4 * 12 + 3);

        let mlp = Trainable::MlpOnly.mask(4);
        assert_eq!(mlp.len(), 8);
        assert!(mlp.iter().all(|n| n.contains(".mlp.")));

        let qkv = Trainable::QkvOnly.mask(4);
        assert_eq!(qkv.len(), 4);
        assert!(qkv.iter().all(|n| n.contains(".qkv.")));
    }

    #[test]
    fn trainable_parsing() {
        assert_eq!(Trainable::parse("all").unwrap(), Trainable::All);
        assert_eq!(
            Trainable::parse("last_n_blocks(2)").unwrap(),
            Trainable::LastBlocks(2)
        );
        assert_eq!(Trainable::parse("mlp_only").unwrap(), Trainable::MlpOnly);
        assert!(Trainable::parse("last_n_blocks(0)").is_err());
        assert!(Trainable::parse("sometimes").is_err());
    }

    fn single_scalar_setup(grad: f64) -> (ModelParams, ParamGrads, TrainConfig) {
        let cfg = cfg4();
        let mut params = init_params(&cfg, 3).unwrap();
        params.trainable = ["pos_encodings".to_string()].into_iter().collect();
        let mut grads = ParamGrads::default();
        grads.tensors.insert(
            "pos_encodings".to_string(),
            Param {
                dims: params.pos_encodings.dims.clone(),
                data: vec![grad; params.pos_encodings.len()],
            },
        );
        let tc = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        (params, grads, tc)
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut params, grads, mut tc) = single_scalar_setup(0.0);
        tc.weight_decay = 0.0;
        let before = params.pos_encodings.clone();
        let mut state = OptimizerState::new();
        adamw_update(&mut params, &grads, &mut state, &tc).unwrap();
        assert_eq!(params.pos_encodings, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_with_decay_scales_parameters() {
        let (mut params, grads, mut tc) = single_scalar_setup(0.0);
        tc.weight_decay = 0.01;
        let before = params.pos_encodings.clone();
        let mut state = OptimizerState::new();
        adamw_update(&mut params, &grads, &mut state, &tc).unwrap();
        for (p, q) in before.data.iter().zip(&params.pos_encodings.data) {
            assert_eq!(*q, p - tc.learning_rate * tc.weight_decay * p);
        }
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // p = 1, g = 1, lr = 0.1, defaults otherwise
        let (mut params, grads, tc) = single_scalar_setup(1.0);
        params.pos_encodings.data.fill(1.0);
        let mut state = OptimizerState::new();
        adamw_update(&mut params, &grads, &mut state, &tc).unwrap();
        // independent evaluation of the update formula
        let (b1, b2, eps, lr, wd): (f64, f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1, 1e-4);
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 1.0 - lr * (m_hat / (v_hat.sqrt() + eps) + wd * 1.0);
        for &p in &params.pos_encodings.data {
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
        }
    }

    #[test]
    fn update_rejects_incomplete_gradients() {
        let cfg = cfg4();
        let mut params = init_params(&cfg, 3).unwrap();
        params.trainable = Trainable::LastBlocks(1).mask(4);
        let grads = ParamGrads::default();
        let mut state = OptimizerState::new();
        let err = adamw_update(&mut params, &grads, &mut state, &TrainConfig::default());
        assert!(err.is_err());
    }
}
