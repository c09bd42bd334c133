use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::capsule::route_on_graph;
use super::{cnn_layers, ModelConfig};
use crate::autodiff::{
    gaussian, glorot_uniform, read_checkpoint, write_checkpoint, Graph, NamedTensor, Tensor, Var,
};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive, rng, sub_seed, Purpose};

const BN_EPS: f64 = 1e-5;
pub const CHECKPOINT_FILE: &str = "best.capw";
pub const SIDECAR_FILE: &str = "config.json";

/// Index of the largest score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Loss terms of one evaluated batch. For the CNN `primary` is the
/// cross-entropy; for capsule models it is the margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub primary: f64,
    pub reconstruction: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossParts,
    /// `[N × n_classes]`, row-major
    pub scores: Vec<f64>,
    /// one buffer per trainable parameter, in [`Model::param_names`] order
    pub grads: Vec<Vec<f64>>,
    /// batch mean/variance of the CNN batch-norm layer
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    class_names: Vec<String>,
}

/// Parameters plus the configuration needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    class_names: Vec<String>,
    params: Vec<NamedTensor>,
    /// non-trainable state: input standardization, batch-norm running stats
    buffers: Vec<NamedTensor>,
}

struct Built {
    params: Vec<Var>,
    scores: Var,
    primary: Option<Var>,
    recon: Option<Var>,
    total: Option<Var>,
    bn: Option<Var>,
}

fn named(name: impl Into<String>, tensor: Tensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        tensor,
    }
}

/// Fresh model with seeded initial weights.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let init = sub_seed(seed, Purpose::Init);
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let rows = cfg.input_rows;
    if cfg.architecture.is_capsule() {
        let g = cfg.caps_geometry();
        let mut c_in = 1;
        for (i, c) in g.convs.iter().enumerate() {
            conv_specs(&mut specs, &format!("conv{}", i + 1), c_in, c);
            c_in = c.channels;
        }
        conv_specs(&mut specs, "primary", c_in, &g.primary);
        let n_primary = cfg.primary_capsules().expect("validated geometry");
        specs.push((
            "digit.w".into(),
            vec![n_primary, cfg.n_classes, g.digit_dim, g.primary_dim],
            Init::Gaussian(0.01),
        ));
        if cfg.decoder_enabled {
            let flat = cfg.n_classes * g.digit_dim;
            let out = rows * cfg.input_frames;
            dense_specs(&mut specs, "dec1", flat, cfg.decoder_hidden);
            dense_specs(&mut specs, "dec2", cfg.decoder_hidden, out);
        }
    } else {
        let mut c_in = 1;
        for (i, (c, _)) in cnn_layers(rows).iter().enumerate() {
            conv_specs(&mut specs, &format!("conv{}", i + 1), c_in, c);
            c_in = c.channels;
        }
        specs.push(("bn.gamma".into(), vec![256], Init::Const(1.0)));
        specs.push(("bn.beta".into(), vec![256], Init::Const(0.0)));
        dense_specs(&mut specs, "fc", 128, cfg.n_classes);
    }
    let params = specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, how))| {
            let mut r = rng(derive(init, i as u64));
            let t = match how {
                Init::Glorot(fi, fo) => glorot_uniform(&shape, fi, fo, &mut r),
                Init::Gaussian(s) => gaussian(&shape, s, &mut r),
                Init::Const(v) => Tensor::full(&shape, v),
            };
            named(name, t)
        })
        .collect();
    let mut buffers = vec![
        named("input.mean", Tensor::zeros(&[rows])),
        named("input.std", Tensor::full(&[rows], 1.0)),
    ];
    if !cfg.architecture.is_capsule() {
        buffers.push(named("bn.running_mean", Tensor::zeros(&[256])));
        buffers.push(named("bn.running_var", Tensor::full(&[256], 1.0)));
    }
    Ok(Model {
        config: cfg.clone(),
        class_names: (0..cfg.n_classes).map(|i| format!("class{i}")).collect(),
        params,
        buffers,
    })
}

enum Init {
    Glorot(usize, usize),
    Gaussian(f64),
    Const(f64),
}

fn conv_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c_in: usize, c: &super::ConvSpec) {
    let (kh, kw) = c.kernel;
    specs.push((
        format!("{name}.k"),
        vec![c.channels, c_in, kh, kw],
        Init::Glorot(c_in * kh * kw, c.channels * kh * kw),
    ));
    specs.push((format!("{name}.b"), vec![c.channels], Init::Const(0.0)));
}

fn dense_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    specs.push((format!("{name}.w"), vec![fan_out, fan_in], Init::Glorot(fan_in, fan_out)));
    specs.push((format!("{name}.b"), vec![fan_out], Init::Const(0.0)));
}

/// Per-row mean and standard deviation over the unpadded frames of
/// `features`. Rows with (near) zero spread get a unit scale.
pub fn input_statistics(features: &[&FeatureMatrix]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("input statistics need at least one feature matrix".into()))?;
    let rows = first.rows;
    let mut sum = vec![0.0; rows];
    let mut count = 0usize;
    for f in features {
        for (r, acc) in sum.iter_mut().enumerate() {
            *acc += f.row(r)[..f.n_valid_frames].iter().sum::<f64>();
        }
        count += f.n_valid_frames;
    }
    if count == 0 {
        return Err(Error::Contract("input statistics: no valid frames".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; rows];
    for f in features {
        for (r, acc) in sq.iter_mut().enumerate() {
            *acc += f.row(r)[..f.n_valid_frames]
                .iter()
                .map(|x| (x - mean[r]) * (x - mean[r]))
                .sum::<f64>();
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.config.n_classes {
            return Err(Error::Contract(format!(
                "{} class names for {} classes",
                names.len(),
                self.config.n_classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.tensor.data_mut()).collect()
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.tensor.data())
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    fn buffer_mut(&mut self, name: &str) -> &mut [f64] {
        self.buffers
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| b.tensor.data_mut())
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn input_stats(&self) -> (&[f64], &[f64]) {
        (self.buffer("input.mean"), self.buffer("input.std"))
    }

    pub fn set_input_stats(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let rows = self.config.input_rows;
        if mean.len() != rows || std.len() != rows || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract(format!(
                "input statistics need {rows} means and {rows} positive deviations"
            )));
        }
        self.buffer_mut("input.mean").copy_from_slice(mean);
        self.buffer_mut("input.std").copy_from_slice(std);
        Ok(())
    }

    /// Fold a batch's statistics into the batch-norm running averages:
    /// `running ← m·running + (1−m)·batch`.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        if self.config.architecture.is_capsule() {
            return;
        }
        for (r, b) in self.buffer_mut("bn.running_mean").iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.buffer_mut("bn.running_var").iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }

    /// Standardized input (padding kept at zero).
    pub fn standardize(&self, f: &FeatureMatrix) -> Result<Vec<f64>> {
        let (rows, cols) = (self.config.input_rows, self.config.input_frames);
        if f.rows != rows || f.cols != cols {
            return Err(Error::Shape(format!(
                "model expects {rows}×{cols} features, got {}×{}",
                f.rows, f.cols
            )));
        }
        let (mean, std) = self.input_stats();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..f.n_valid_frames.min(cols) {
                out[r * cols + c] = (f.get(r, c) - mean[r]) / std[r];
            }
        }
        Ok(out)
    }

    fn build(
        &self,
        g: &mut Graph,
        inputs: &[&FeatureMatrix],
        targets: Option<&[usize]>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Built> {
        if inputs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(t) = targets {
            if t.len() != inputs.len() {
                return Err(Error::Contract(format!("{} targets for {} inputs", t.len(), inputs.len())));
            }
        }
        let n = inputs.len();
        let (rows, cols) = (self.config.input_rows, self.config.input_frames);
        let mut x = Vec::with_capacity(n * rows * cols);
        for f in inputs {
            x.extend(self.standardize(f)?);
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.tensor.clone(), train)).collect();
        let p = |name: &str| -> Var {
            let i = self.params.iter().position(|q| q.name == name).expect("known parameter");
            params[i]
        };
        let input = g.constant(Tensor::new(&[n, 1, rows, cols], x.clone())?);
        let mut built = Built {
            params: params.clone(),
            scores: input,
            primary: None,
            recon: None,
            total: None,
            bn: None,
        };
        let cfg = &self.config;
        if cfg.architecture.is_capsule() {
            let geom = cfg.caps_geometry();
            let mut h = input;
            for (i, c) in geom.convs.iter().enumerate() {
                let name = format!("conv{}", i + 1);
                h = g.conv2d(h, p(&format!("{name}.k")), p(&format!("{name}.b")), c.stride)?;
                h = g.relu(h)?;
            }
            h = g.conv2d(h, p("primary.k"), p("primary.b"), geom.primary.stride)?;
            let [_, ch, gh, gw] = g.shape(h).try_into().expect("rank 4");
            let maps = ch / geom.primary_dim;
            h = g.reshape(h, &[n, maps, geom.primary_dim, gh * gw])?;
            h = g.permute(h, &[0, 1, 3, 2])?;
            h = g.reshape(h, &[n, maps * gh * gw, geom.primary_dim])?;
            let u = g.squash(h)?;
            let uhat = g.caps_predict(u, p("digit.w"))?;
            let (v, _) = route_on_graph(g, uhat, cfg.routing_iterations)?;
            let lengths = g.norm_axis(v, 2)?;
            built.scores = lengths;
            if let Some(t) = targets {
                let l = &cfg.loss;
                let margin = g.margin_loss(lengths, t, l.m_plus, l.m_minus, l.lambda)?;
                built.primary = Some(margin);
                built.total = Some(margin);
                if cfg.decoder_enabled {
                    let k = cfg.n_classes;
                    let d = geom.digit_dim;
                    let mut mask = vec![0.0; n * k * d];
                    for (s, &c) in t.iter().enumerate() {
                        mask[(s * k + c) * d..(s * k + c + 1) * d].fill(1.0);
                    }
                    let masked = g.mul_const(v, mask)?;
                    let flat = g.reshape(masked, &[n, k * d])?;
                    let h1 = g.dense(flat, p("dec1.w"), p("dec1.b"))?;
                    let h1 = g.relu(h1)?;
                    let out = g.dense(h1, p("dec2.w"), p("dec2.b"))?;
                    let recon = g.mse(out, &x)?;
                    let scaled = g.scale(recon, l.alpha)?;
                    built.recon = Some(recon);
                    built.total = Some(g.add(margin, scaled)?);
                }
            }
        } else {
            let layers = cnn_layers(rows);
            let mut h = input;
            for (i, (c, pool)) in layers.iter().enumerate() {
                let name = format!("conv{}", i + 1);
                h = g.conv2d(h, p(&format!("{name}.k")), p(&format!("{name}.b")), c.stride)?;
                h = g.relu(h)?;
                if i == 1 {
                    let running = if train {
                        None
                    } else {
                        Some((self.buffer("bn.running_mean"), self.buffer("bn.running_var")))
                    };
                    h = g.batch_norm(h, p("bn.gamma"), p("bn.beta"), running, BN_EPS)?;
                    built.bn = Some(h);
                }
                if let Some(w) = pool {
                    h = g.maxpool2d(h, (1, *w))?;
                }
                if i == 0 && train && cfg.dropout_rate > 0.0 {
                    let keep = 1.0 - cfg.dropout_rate;
                    let mut r = rng(dropout_seed);
                    let mask: Vec<f64> = (0..g.value(h).len())
                        .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = g.mul_const(h, mask)?;
                }
            }
            let pooled = g.global_avg_pool(h)?;
            let logits = g.dense(pooled, p("fc.w"), p("fc.b"))?;
            built.scores = g.softmax(logits, 1)?;
            if let Some(t) = targets {
                let ce = g.softmax_cross_entropy(logits, t)?;
                built.primary = Some(ce);
                built.total = Some(ce);
            }
        }
        Ok(built)
    }

    fn loss_parts(g: &Graph, b: &Built) -> LossParts {
        LossParts {
            primary: g.value(b.primary.expect("targets given")).item(),
            reconstruction: b.recon.map(|r| g.value(r).item()),
            total: g.value(b.total.expect("targets given")).item(),
        }
    }

    /// Training-mode forward and backward pass.
    pub fn train_step(&self, inputs: &[&FeatureMatrix], targets: &[usize], dropout_seed: u64) -> Result<StepOutput> {
        let mut g = Graph::new();
        let b = self.build(&mut g, inputs, Some(targets), true, dropout_seed)?;
        let total = b.total.expect("targets given");
        g.backward(total)?;
        let grads = b.params.iter().map(|&v| g.grad_or_zeros(v)).collect();
        let batch_stats = b
            .bn
            .and_then(|v| g.batch_stats(v))
            .map(|(m, v)| (m.to_vec(), v.to_vec()));
        Ok(StepOutput {
            loss: Self::loss_parts(&g, &b),
            scores: g.value(b.scores).data().to_vec(),
            grads,
            batch_stats,
        })
    }

    /// Inference-mode loss and scores (decoder masked by the true label).
    pub fn evaluate_loss(&self, inputs: &[&FeatureMatrix], targets: &[usize]) -> Result<(LossParts, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.build(&mut g, inputs, Some(targets), false, 0)?;
        Ok((Self::loss_parts(&g, &b), g.value(b.scores).data().to_vec()))
    }

    /// Training-mode total loss only; used by gradient checks.
    pub fn train_loss(&self, inputs: &[&FeatureMatrix], targets: &[usize], dropout_seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.build(&mut g, inputs, Some(targets), true, dropout_seed)?;
        Ok(g.value(b.total.expect("targets given")).item())
    }

    /// Class scores `[N, n_classes]`: capsule lengths or softmax
    /// probabilities.
    pub fn forward(&self, inputs: &[&FeatureMatrix]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.build(&mut g, inputs, None, false, 0)?;
        Ok(g.value(b.scores).clone())
    }

    pub fn to_checkpoint(&self) -> Vec<NamedTensor> {
        self.params.iter().chain(&self.buffers).cloned().collect()
    }

    /// Rebuild a model from a configuration and checkpoint tensors; every
    /// expected tensor must be present with the expected shape.
    pub fn from_checkpoint(cfg: &ModelConfig, class_names: Vec<String>, tensors: Vec<NamedTensor>) -> Result<Model> {
        let mut model = build_model(cfg, 0)?.with_class_names(class_names)?;
        let mut tensors: Vec<Option<NamedTensor>> = tensors.into_iter().map(Some).collect();
        for slot in model.params.iter_mut().chain(model.buffers.iter_mut()) {
            let found = tensors
                .iter_mut()
                .find(|t| t.as_ref().is_some_and(|t| t.name == slot.name))
                .and_then(Option::take)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {}", slot.name)))?;
            if found.tensor.shape() != slot.tensor.shape() {
                return Err(Error::parse(
                    "checkpoint",
                    format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        slot.name,
                        found.tensor.shape(),
                        slot.tensor.shape()
                    ),
                ));
            }
            slot.tensor = found.tensor;
        }
        if let Some(extra) = tensors.into_iter().flatten().next() {
            return Err(Error::parse("checkpoint", format!("unexpected tensor {}", extra.name)));
        }
        Ok(model)
    }

    /// Write `best.capw` and the `config.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &self.to_checkpoint())?;
        let sidecar = Sidecar {
            model: self.config.clone(),
            class_names: self.class_names.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("serializable config");
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let tensors = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        Model::from_checkpoint(&sidecar.model, sidecar.class_names, tensors)
    }
}

/// Predicted class of one feature matrix.
pub fn predict(model: &Model, features: &FeatureMatrix) -> Result<usize> {
    let scores = model.forward(&[features])?;
    Ok(argmax_lowest(scores.data()))
}
