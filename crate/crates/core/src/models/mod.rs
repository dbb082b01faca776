//! The three classifier families and their shared pieces.

mod checkpoint;
mod spec;

use indexmap::IndexMap;
use megphone_tensor::init::{fan_in_normal, RELU_GAIN};
use megphone_tensor::{
    conv1d, conv2d, linear, norm_layer, stft, transformer_encoder, AttentionParams, BatchStats, EncoderLayerParams,
    NormParams, Real, TapRegistry, Tape, Tensor, Var, NORM_EPS,
};

use crate::data::SignalMatrix;
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_INIT};

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{Arch, BlockNorm, InputNorm, ModelSpec, Nonlinearity, TRANSFORMER_FRONT_BLOCKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy)]
enum Init {
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

fn param_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, Init)> {
    let d = spec.hidden_dim;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let two_d = spec.arch == Arch::StftCnn;
    for b in 0..spec.conv_blocks() {
        let name = block_name(b);
        let cin = if b == 0 { spec.in_channels } else { d };
        let (shape, fan_in) = if two_d {
            let k = spec.kernel_size_2d;
            (vec![d, cin, k, k], cin * k * k)
        } else {
            (vec![d, cin, spec.kernel_size], cin * spec.kernel_size)
        };
        push(format!("{name}.conv.weight"), shape, Init::Normal { fan_in, gain: RELU_GAIN });
        push(format!("{name}.conv.bias"), vec![d], Init::Zeros);
        push(format!("{name}.norm.weight"), vec![d], Init::Ones);
        push(format!("{name}.norm.bias"), vec![d], Init::Zeros);
    }
    if spec.block_norm != BlockNorm::None {
        push("extra_norm.weight".into(), vec![d], Init::Ones);
        push("extra_norm.bias".into(), vec![d], Init::Zeros);
    }
    if spec.arch == Arch::CnnTransformer {
        let f = spec.transformer_ff_mult * d;
        let unit = Init::Normal { fan_in: d, gain: 1.0 };
        for i in 0..spec.transformer_layers {
            for proj in ["q", "k", "v", "out"] {
                push(format!("encoder.{i}.attn.{proj}.weight"), vec![d, d], unit);
                push(format!("encoder.{i}.attn.{proj}.bias"), vec![d], Init::Zeros);
            }
            push(format!("encoder.{i}.norm1.weight"), vec![d], Init::Ones);
            push(format!("encoder.{i}.norm1.bias"), vec![d], Init::Zeros);
            push(format!("encoder.{i}.ff1.weight"), vec![f, d], Init::Normal { fan_in: d, gain: RELU_GAIN });
            push(format!("encoder.{i}.ff1.bias"), vec![f], Init::Zeros);
            push(format!("encoder.{i}.ff2.weight"), vec![d, f], Init::Normal { fan_in: f, gain: 1.0 });
            push(format!("encoder.{i}.ff2.bias"), vec![d], Init::Zeros);
            push(format!("encoder.{i}.norm2.weight"), vec![d], Init::Ones);
            push(format!("encoder.{i}.norm2.bias"), vec![d], Init::Zeros);
        }
    }
    push("head.weight".into(), vec![spec.n_classes, d], unit_normal(d));
    push("head.bias".into(), vec![spec.n_classes], Init::Zeros);
    out
}

fn unit_normal(fan_in: usize) -> Init {
    Init::Normal { fan_in, gain: 1.0 }
}

fn block_name(b: usize) -> String {
    if b == 0 {
        "stem".to_string()
    } else {
        format!("block{b}")
    }
}

fn buffer_layout(spec: &ModelSpec) -> Vec<(String, Tensor<f32>)> {
    if spec.block_norm == BlockNorm::Batch {
        vec![
            ("extra_norm.running_mean".into(), Tensor::zeros(vec![spec.hidden_dim])),
            ("extra_norm.running_var".into(), Tensor::ones(vec![spec.hidden_dim])),
        ]
    } else {
        Vec::new()
    }
}

/// Parameters and running buffers of one classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: IndexMap<String, Tensor<f32>>,
    buffers: IndexMap<String, Tensor<f32>>,
}

/// Result of one forward pass.
pub struct ForwardOutput<'t, F: Real> {
    pub logits: Var<'t, F>,
    /// Parameter variables by name (gradient-carrying in train mode).
    pub params: IndexMap<String, Var<'t, F>>,
    /// Batch statistics of training-mode batch norms, by layer.
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = stream(seed, &[TAG_INIT]);
        let params = param_layout(&spec)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal { fan_in, gain } => fan_in_normal(shape, fan_in, gain, &mut rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                };
                (name, t)
            })
            .collect();
        let buffers = buffer_layout(&spec).into_iter().collect();
        Ok(Model { spec, params, buffers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.spec.tap_names()
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: IndexMap<String, Tensor<f32>>,
        buffers: IndexMap<String, Tensor<f32>>,
    ) -> Result<Model> {
        let reference = Model::build(spec, 0)?;
        let same_layout = |a: &IndexMap<String, Tensor<f32>>, b: &IndexMap<String, Tensor<f32>>| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
        };
        if !same_layout(&reference.params, &params) || !same_layout(&reference.buffers, &buffers) {
            return Err(Error::Checkpoint("tensor names or shapes do not match the stored model spec".into()));
        }
        Ok(Model {
            spec: reference.spec,
            params,
            buffers,
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            let mut mean = self.buffers[&format!("{layer}.running_mean")].data().to_vec();
            let mut var = self.buffers[&format!("{layer}.running_var")].data().to_vec();
            s.update_running(&mut mean, &mut var, self.spec.bn_momentum);
            self.buffers[&format!("{layer}.running_mean")].data_mut().copy_from_slice(&mean);
            self.buffers[&format!("{layer}.running_var")].data_mut().copy_from_slice(&var);
        }
    }

    /// Stacks windows into a `[B, C, T]` tensor.
    pub fn batch_tensor<F: Real>(&self, windows: &[&SignalMatrix]) -> Result<Tensor<F>> {
        let (c, t) = (self.spec.in_channels, self.spec.n_times);
        let mut data = Vec::with_capacity(windows.len() * c * t);
        for w in windows {
            if w.channels() != c || w.times() != t {
                return Err(Error::Input(format!(
                    "window is {}×{}, model expects {c}×{t}",
                    w.channels(),
                    w.times()
                )));
            }
            data.extend(w.data().iter().map(|&v| F::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::new(vec![windows.len(), c, t], data)?)
    }

    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        input: Var<'t, F>,
        mode: Mode,
        taps: Option<&mut TapRegistry>,
    ) -> Result<ForwardOutput<'t, F>> {
        let s = input.shape();
        if s.len() != 3 || s[1] != self.spec.in_channels || s[2] != self.spec.n_times {
            return Err(Error::Input(format!(
                "input batch has shape {s:?}, expected [B, {}, {}]",
                self.spec.in_channels, self.spec.n_times
            )));
        }
        if !input.value().all_finite() {
            return Err(Error::Input("input batch contains non-finite values".into()));
        }
        let mut ctx = Ctx {
            tape,
            model: self,
            mode,
            taps,
            params: IndexMap::new(),
            batch_stats: Vec::new(),
        };
        let logits = ctx.run(input)?;
        Ok(ForwardOutput {
            logits,
            params: ctx.params,
            batch_stats: ctx.batch_stats,
        })
    }

    /// Eval-mode logits for a batch of windows.
    pub fn logits(&self, windows: &[&SignalMatrix]) -> Result<Tensor<f32>> {
        let tape = Tape::<f32>::new();
        let x = tape.constant(self.batch_tensor(windows)?);
        let out = self.forward(&tape, x, Mode::Eval, None)?;
        Ok((*out.logits.value()).clone())
    }

    /// Eval-mode predictions, evaluated in chunks of `batch_size`.
    pub fn predict_windows(&self, windows: &[&SignalMatrix], batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch_size.max(1)) {
            out.extend(predict(&self.logits(chunk)?));
        }
        Ok(out)
    }
}

/// Row-wise argmax of `[B, K]` logits; ties go to the lowest class id.
pub fn predict<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

struct Ctx<'t, 'm, 'r, F: Real> {
    tape: &'t Tape<F>,
    model: &'m Model,
    mode: Mode,
    taps: Option<&'r mut TapRegistry>,
    params: IndexMap<String, Var<'t, F>>,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'t, F: Real> Ctx<'t, '_, '_, F> {
    fn p(&mut self, name: &str) -> Var<'t, F> {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let t = self.model.params[name].cast::<F>();
        let v = self.tape.leaf(t, self.mode == Mode::Train);
        self.params.insert(name.to_string(), v);
        v
    }

    fn emit(&mut self, name: &str, v: Var<'t, F>) -> Result<Var<'t, F>> {
        if !v.value().all_finite() {
            return Err(Error::NumericFault { layer: name.to_string() });
        }
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.record(name, v)?;
        }
        Ok(v)
    }

    fn check(&self, name: &str, v: Var<'t, F>) -> Result<Var<'t, F>> {
        if v.value().all_finite() {
            Ok(v)
        } else {
            Err(Error::NumericFault { layer: name.to_string() })
        }
    }

    fn conv_block(&mut self, b: usize, x: Var<'t, F>, skip: Option<Var<'t, F>>) -> Result<Var<'t, F>> {
        let spec = &self.model.spec;
        let name = block_name(b);
        let w = self.p(&format!("{name}.conv.weight"));
        let bias = self.p(&format!("{name}.conv.bias"));
        let h = if spec.arch == Arch::StftCnn {
            conv2d(x, w, 1, spec.kernel_size_2d / 2)?
        } else {
            conv1d(x, w, 1, spec.kernel_size / 2)?
        };
        let h = self.check(&format!("{name}.conv"), h.add_along(bias, 1)?)?;
        let groups = spec.group_norm_groups;
        let gamma = self.p(&format!("{name}.norm.weight"));
        let beta = self.p(&format!("{name}.norm.bias"));
        let (mut h, _) = norm_layer(h, NormParams::Group { groups, gamma, beta }, NORM_EPS)?;
        if let Some(s) = skip {
            h = h.add(s)?;
        }
        self.emit(&name, h.relu())
    }

    fn extra_norm(&mut self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let spec = &self.model.spec;
        let kind = spec.block_norm;
        let groups = spec.group_norm_groups;
        if kind == BlockNorm::None {
            return Ok(x);
        }
        let gamma = self.p("extra_norm.weight");
        let beta = self.p("extra_norm.bias");
        let model = self.model;
        let params = match kind {
            BlockNorm::Layer => NormParams::Layer { gamma, beta },
            BlockNorm::Group => NormParams::Group { groups, gamma, beta },
            BlockNorm::Batch => NormParams::Batch {
                gamma,
                beta,
                running_mean: model.buffers["extra_norm.running_mean"].data(),
                running_var: model.buffers["extra_norm.running_var"].data(),
                training: self.mode == Mode::Train,
            },
            BlockNorm::None => unreachable!(),
        };
        let (y, stats) = norm_layer(x, params, NORM_EPS)?;
        if let Some(s) = stats {
            self.batch_stats.push(("extra_norm".into(), s));
        }
        self.emit("extra_norm", y)
    }

    /// Stem plus residual blocks; blocks 2 and 4 add the input of the block
    /// before them.
    fn backbone(&mut self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let mut h = self.conv_block(0, x, None)?;
        let mut pair_input = h;
        for b in 1..self.model.spec.conv_blocks() {
            let skip = (b % 2 == 0 && b <= 4).then_some(pair_input);
            let out = self.conv_block(b, h, skip)?;
            if b % 2 == 0 {
                pair_input = out;
            }
            h = out;
        }
        self.extra_norm(h)
    }

    fn encoder(&mut self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let spec = self.model.spec.clone();
        let mut layers = Vec::with_capacity(spec.transformer_layers);
        for i in 0..spec.transformer_layers {
            let mut g = |n: &str| self.p(&format!("encoder.{i}.{n}"));
            layers.push(EncoderLayerParams {
                attention: AttentionParams {
                    q_weight: g("attn.q.weight"),
                    q_bias: g("attn.q.bias"),
                    k_weight: g("attn.k.weight"),
                    k_bias: g("attn.k.bias"),
                    v_weight: g("attn.v.weight"),
                    v_bias: g("attn.v.bias"),
                    out_weight: g("attn.out.weight"),
                    out_bias: g("attn.out.bias"),
                },
                norm1_gamma: g("norm1.weight"),
                norm1_beta: g("norm1.bias"),
                ff1_weight: g("ff1.weight"),
                ff1_bias: g("ff1.bias"),
                ff2_weight: g("ff2.weight"),
                ff2_bias: g("ff2.bias"),
                norm2_gamma: g("norm2.weight"),
                norm2_beta: g("norm2.bias"),
            });
        }
        let out = transformer_encoder(x, &layers, spec.transformer_heads)?;
        for i in 0..spec.transformer_layers {
            self.emit(&format!("encoder.{i}.attn"), out.attention_outputs[i])?;
            self.emit(&format!("encoder.{i}"), out.layer_outputs[i])?;
        }
        Ok(out.output)
    }

    fn run(&mut self, input: Var<'t, F>) -> Result<Var<'t, F>> {
        let spec = self.model.spec.clone();
        let mut x = input;
        if spec.input_norm == InputNorm::Instance {
            let (y, _) = norm_layer(x, NormParams::Instance, NORM_EPS)?;
            x = self.emit("input_norm", y)?;
        }
        let pooled = match spec.arch {
            Arch::ResnetCnn => self.backbone(x)?.mean_axis(2)?,
            Arch::StftCnn => {
                let s = stft(x, spec.stft_n_fft, spec.stft_hop)?;
                let s = self.emit("stft", s)?;
                self.backbone(s)?.mean_axis(3)?.mean_axis(2)?
            }
            Arch::CnnTransformer => {
                let h = self.backbone(x)?.permute(&[0, 2, 1])?;
                self.encoder(h)?.mean_axis(1)?
            }
        };
        let w = self.p("head.weight");
        let b = self.p("head.bias");
        self.check("head", linear(pooled, w, Some(b))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_ties_and_peaks() {
        let mut row = vec![0.0f32; 39];
        row[7] = 5.0;
        row.extend(vec![1.0f32; 39]);
        let t = Tensor::new(vec![2, 39], row).unwrap();
        assert_eq!(predict(&t), vec![7, 0]);
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let spec = ModelSpec {
            arch: Arch::CnnTransformer,
            hidden_dim: 30,
            transformer_heads: 8,
            group_norm_groups: 5,
            ..Default::default()
        };
        assert!(matches!(Model::build(spec, 0), Err(Error::Config(_))));
    }
}
