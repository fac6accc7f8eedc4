//! Micro detector: strided-conv backbone, top-down feature pyramid P3-P7,
//! a supervised attention branch with exponential gating, and classification
//! and regression subnets shared across levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{exp_gate, GateMode};
use crate::error::{FanError, Result};
use crate::geometry::AnchorSpec;
use crate::losses::LevelVars;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pyramid_levels: Vec<u32>,
    pub backbone_channels: usize,
    /// Width of the pyramid features and of both subnets.
    pub subnet_channels: usize,
    pub subnet_depth: usize,
    pub num_classes: usize,
    pub anchors_per_location: usize,
    pub prior_pi: f64,
    /// Head weight std at `init_reference_width` channels.
    pub init_sigma: f64,
    /// Head width at which `init_sigma` applies as is; other widths use
    /// `init_sigma * sqrt(init_reference_width / subnet_channels)`, which
    /// keeps the per-layer gain. 0 uses `init_sigma` at every width.
    #[serde(default = "default_reference_width")]
    pub init_reference_width: usize,
    /// Attention branch and gate present. When false the subnets see the
    /// raw pyramid features.
    pub attention: bool,
    pub gate_mode: GateMode,
    /// Convolutions in the attention branch (the last one outputs 1 channel).
    pub attention_depth: usize,
    /// Anchor design the heads are trained against.
    #[serde(default)]
    pub anchors: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pyramid_levels: vec![3, 4, 5, 6, 7],
            backbone_channels: 32,
            subnet_channels: 32,
            subnet_depth: 4,
            num_classes: 1,
            anchors_per_location: 6,
            prior_pi: 0.01,
            init_sigma: 0.01,
            init_reference_width: REFERENCE_HEAD_WIDTH,
            attention: true,
            gate_mode: GateMode::Sigmoid,
            attention_depth: 1,
            anchors: AnchorSpec::fan(),
        }
    }
}

/// Head width of the full-size detector.
pub const REFERENCE_HEAD_WIDTH: usize = 256;

fn default_reference_width() -> usize {
    REFERENCE_HEAD_WIDTH
}

/// Stride of the coarsest level; input sides must be a multiple of it.
pub const MODEL_STRIDE: usize = 128;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FanError::Config(format!("model: {m}")));
        if self.pyramid_levels != [3, 4, 5, 6, 7] {
            return bad(format!("pyramid levels must be 3..=7, got {:?}", self.pyramid_levels));
        }
        if self.num_classes != 1 {
            return bad("only single-class (sigmoid) detection is supported".into());
        }
        if self.backbone_channels == 0 || self.subnet_channels == 0 || self.anchors_per_location == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.subnet_depth == 0 || self.attention_depth == 0 {
            return bad("subnet and attention depth must be at least 1".into());
        }
        self.anchors.validate()?;
        if self.anchors.levels != self.pyramid_levels || self.anchors.anchors_per_location() != self.anchors_per_location {
            return bad(format!(
                "anchor spec ({} per location over {:?}) does not match the heads",
                self.anchors.anchors_per_location(),
                self.anchors.levels
            ));
        }
        if !(self.prior_pi > 0.0 && self.prior_pi < 1.0) || !(self.init_sigma > 0.0) {
            return bad("prior_pi must be in (0, 1) and init_sigma positive".into());
        }
        Ok(())
    }

    /// Standard deviation actually used for the head weights.
    pub fn effective_init_sigma(&self) -> f64 {
        if self.init_reference_width == 0 {
            self.init_sigma
        } else {
            self.init_sigma * (self.init_reference_width as f64 / self.subnet_channels as f64).sqrt()
        }
    }

    /// Initial bias of the classification output, `-ln((1 - π) / π)`.
    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_pi) / self.prior_pi).ln()
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::{parse_bool, parse_list, parse_value};
        match key {
            "pyramid_levels" => self.pyramid_levels = parse_list(key, value)?,
            "backbone_channels" => self.backbone_channels = parse_value(key, value)?,
            "subnet_channels" => self.subnet_channels = parse_value(key, value)?,
            "subnet_depth" => self.subnet_depth = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "anchors_per_location" => self.anchors_per_location = parse_value(key, value)?,
            "prior_pi" => self.prior_pi = parse_value(key, value)?,
            "init_sigma" => self.init_sigma = parse_value(key, value)?,
            "init_reference_width" => self.init_reference_width = parse_value(key, value)?,
            "attention" => self.attention = parse_bool(key, value)?,
            "gate_mode" => {
                self.gate_mode = match value.trim() {
                    "sigmoid" => GateMode::Sigmoid,
                    "raw" => GateMode::Raw,
                    "bypass" => GateMode::Bypass,
                    other => return Err(FanError::Config(format!("gate_mode: unknown {other:?}"))),
                }
            }
            "attention_depth" => self.attention_depth = parse_value(key, value)?,
            "anchors" => {
                self.anchors = AnchorSpec::preset(value.trim())?;
                self.anchors_per_location = self.anchors.anchors_per_location();
            }
            other => return Err(FanError::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of a conv tower ending in an output conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tower {
    pub hidden: Vec<ConvParams>,
    pub out: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Vec<ConvParams>,
    pub lateral: Vec<ConvParams>,
    pub p6: ConvParams,
    pub p7: ConvParams,
    pub attention: Option<Tower>,
    pub cls: Tower,
    pub reg: Tower,
}

/// Head outputs of one level as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T> {
    pub cls_logits: Tensor<T>,
    pub reg_deltas: Tensor<T>,
    pub att_logits: Option<Tensor<T>>,
}

pub type PyramidOutput<T> = Vec<LevelOutput<T>>;

enum Init {
    /// N(0, 2 / fan_in)
    He,
    /// N(0, σ²)
    Gaussian(f64),
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, init: Init, bias: f64) -> ConvParams {
        let fan_in = (inp * k * k) as f64;
        let std = match init {
            Init::He => (2.0 / fan_in).sqrt(),
            Init::Gaussian(s) => s,
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[out, inp, k, k], |_| T::lit(normal.sample(self.rng)));
        ConvParams {
            weight: self.store.add(format!("{name}.weight"), w),
            bias: self.store.add(format!("{name}.bias"), Tensor::full(&[out], T::lit(bias))),
        }
    }

    fn tower(&mut self, name: &str, depth: usize, width: usize, out: usize, sigma: f64, out_bias: f64) -> Tower {
        let hidden = (0..depth)
            .map(|i| self.conv(&format!("{name}.conv{i}"), width, width, 3, Init::Gaussian(sigma), 0.0))
            .collect();
        let out = self.conv(&format!("{name}.out"), out, width, 3, Init::Gaussian(sigma), out_bias);
        Tower { hidden, out }
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: He-normal backbone and pyramid, N(0, σ²)
    /// heads (σ from [`ModelConfig::effective_init_sigma`]) with zero bias,
    /// classification output bias from the prior π.
    pub fn new(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let (c, f, a) = (config.backbone_channels, config.subnet_channels, config.anchors_per_location);
        let backbone = (1..=5)
            .map(|s| b.conv(&format!("backbone.s{s}"), c, if s == 1 { 3 } else { c }, 3, Init::He, 0.0))
            .collect();
        let lateral = (3..=5).map(|k| b.conv(&format!("fpn.lateral{k}"), f, c, 1, Init::He, 0.0)).collect();
        let p6 = b.conv("fpn.p6", f, f, 3, Init::He, 0.0);
        let p7 = b.conv("fpn.p7", f, f, 3, Init::He, 0.0);
        let sigma = config.effective_init_sigma();
        let attention = config
            .attention
            .then(|| b.tower("attention", config.attention_depth - 1, f, 1, sigma, 0.0));
        let cls = b.tower("cls", config.subnet_depth, f, a * config.num_classes, sigma, config.prior_bias());
        let reg = b.tower("reg", config.subnet_depth, f, 4 * a, sigma, 0.0);
        Ok(Model { params: b.store, config, backbone, lateral, p6, p7, attention, cls, reg })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Model::<T>::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(FanError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            let other = params.get(id);
            if params.name(id) != name || other.shape() != t.shape() {
                return Err(FanError::Checkpoint(format!(
                    "parameter {} {:?} does not match {name} {:?}",
                    params.name(id),
                    other.shape(),
                    t.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            lateral: self.lateral.clone(),
            p6: self.p6,
            p7: self.p7,
            attention: self.attention.clone(),
            cls: self.cls.clone(),
            reg: self.reg.clone(),
        }
    }

    /// Parameters of the attention branch.
    pub fn attention_params(&self) -> Vec<ParamId> {
        self.attention
            .iter()
            .flat_map(|t| t.hidden.iter().chain(std::iter::once(&t.out)))
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, p: ConvParams, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(&self.params, p.weight);
        let b = g.param(&self.params, p.bias);
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn tower(&self, g: &mut Graph<T>, x: Var, t: &Tower) -> Result<Var> {
        let mut h = x;
        for c in &t.hidden {
            let y = self.conv(g, h, *c, 1, 1)?;
            h = g.relu(y);
        }
        self.conv(g, h, t.out, 1, 1)
    }

    /// Builds the forward pass of `image: [3, H, W]` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<LevelVars>> {
        let shape = g.shape(image).to_vec();
        match shape[..] {
            [3, h, w] if h > 0 && w > 0 && h % MODEL_STRIDE == 0 && w % MODEL_STRIDE == 0 => {}
            _ => {
                return Err(FanError::shape(
                    "forward",
                    format!("[3, H, W] with H, W multiples of {MODEL_STRIDE}"),
                    format!("{shape:?}"),
                ))
            }
        }
        let mut c = image;
        let mut stages = Vec::with_capacity(5);
        for p in &self.backbone {
            let y = self.conv(g, c, *p, 2, 1)?;
            c = g.relu(y);
            stages.push(c);
        }
        // top-down: P5 = L5(C5), P4 = L4(C4) + up(P5), P3 = L3(C3) + up(P4)
        let mut pyramid = Vec::with_capacity(5);
        let mut top = self.conv(g, stages[4], self.lateral[2], 1, 0)?;
        pyramid.push(top);
        for (stage, lat) in [(3, 1), (2, 0)] {
            let l = self.conv(g, stages[stage], self.lateral[lat], 1, 0)?;
            let up = g.upsample2(top)?;
            top = g.add(l, up)?;
            pyramid.push(top);
        }
        pyramid.reverse();
        let p6 = self.conv(g, pyramid[2], self.p6, 2, 1)?;
        let p6_act = g.relu(p6);
        let p7 = self.conv(g, p6_act, self.p7, 2, 1)?;
        pyramid.push(p6);
        pyramid.push(p7);

        let mut out = Vec::with_capacity(5);
        for feature in pyramid {
            let (trunk, att) = match &self.attention {
                Some(tower) => {
                    let att = self.tower(g, feature, tower)?;
                    (exp_gate(g, feature, att, self.config.gate_mode)?, Some(att))
                }
                None => (feature, None),
            };
            let cls = self.tower(g, trunk, &self.cls)?;
            let reg = self.tower(g, trunk, &self.reg)?;
            out.push(LevelVars { cls, reg, att });
        }
        Ok(out)
    }

    /// Forward pass returning plain tensors.
    pub fn predict(&self, image: &Tensor<T>) -> Result<PyramidOutput<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let levels = self.forward(&mut g, x)?;
        Ok(levels
            .into_iter()
            .map(|l| LevelOutput {
                cls_logits: g.value(l.cls).clone(),
                reg_deltas: g.value(l.reg).clone(),
                att_logits: l.att.map(|a| g.value(a).clone()),
            })
            .collect())
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::tensor::save_checkpoint(path, &self.params, &self.checkpoint_meta())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        crate::tensor::write_checkpoint(&mut buf, &self.params, &self.checkpoint_meta())?;
        Ok(buf)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = crate::tensor::load_checkpoint::<T>(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model").cloned().ok_or_else(|| FanError::Checkpoint("manifest lacks model config".into()))?,
        )?;
        Model::from_params(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { backbone_channels: 8, subnet_channels: 8, subnet_depth: 2, ..Default::default() }
    }

    #[test]
    fn prior_bias_value() {
        let b = ModelConfig::default().prior_bias();
        assert!((b - -(99f64.ln())).abs() < 1e-12);
        assert!((b - -4.59512).abs() < 1e-5);
        let m = Model::<f64>::new(small(), 3).unwrap();
        assert!(m.params.get(m.cls.out.bias).data().iter().all(|&v| v == b));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(small(), 11).unwrap();
        let b = Model::<f32>::new(small(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f32>::new(small(), 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn output_shapes_on_256() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let img = Tensor::zeros(&[3, 256, 256]);
        let out = m.predict(&img).unwrap();
        let dims: Vec<usize> = out.iter().map(|l| l.cls_logits.shape()[1]).collect();
        assert_eq!(dims, vec![32, 16, 8, 4, 2]);
        for l in &out {
            assert_eq!(l.cls_logits.shape()[0], 6);
            assert_eq!(l.reg_deltas.shape()[0], 24);
            assert_eq!(l.att_logits.as_ref().unwrap().shape()[0], 1);
        }
    }

    #[test]
    fn rejects_bad_input_dims() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[3, 200, 256])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 128, 128])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(small(), 5).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back, m);
        let other = ModelConfig { subnet_depth: 3, ..small() };
        assert!(Model::from_params(other, m.params.clone()).is_err());
    }

    #[test]
    fn subnets_share_parameters_across_levels() {
        let m = Model::<f64>::new(small(), 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 128, 128]));
        m.forward(&mut g, x).unwrap();
        // one leaf per parameter even though every head runs on five levels
        assert_eq!(g.param_vars().count(), m.params.len());
    }
}
