//! Architecture descriptors and the (optionally keyed) sequential model.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instrument::{regularizer_on_tape, DetectorLayer, GuardLayer};
use crate::keys::Key;
use crate::tensor::{Tape, Tensor, Var};

/// Inference runs in chunks of this many samples.
pub const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool(usize),
    Flatten,
    Linear(usize),
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv({out_channels},{kernel},{stride},{padding})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool(s) => write!(f, "maxpool({s})"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Linear(o) => write!(f, "linear({o})"),
        }
    }
}

impl LayerSpec {
    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer spec `{s}`"));
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => (n, rest.strip_suffix(')').ok_or_else(bad)?),
            None => (s, ""),
        };
        let nums: Vec<usize> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        match (name, nums.as_slice()) {
            ("conv", &[out_channels, kernel, stride, padding]) => Ok(LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            }),
            ("relu", []) => Ok(LayerSpec::Relu),
            ("maxpool", &[k]) => Ok(LayerSpec::MaxPool(k)),
            ("flatten", []) => Ok(LayerSpec::Flatten),
            ("linear", &[o]) => Ok(LayerSpec::Linear(o)),
            _ => Err(bad()),
        }
    }
}

/// Convolution block geometry as seen by the instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockShape {
    pub fn volume(&self) -> u64 {
        (self.channels * self.height * self.width) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub name: String,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn lenet5() -> Self {
        use LayerSpec::*;
        Self {
            name: "lenet5".into(),
            input: [1, 28, 28],
            layers: vec![
                Conv {
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Relu,
                MaxPool(2),
                Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                Relu,
                MaxPool(2),
                Flatten,
                Linear(120),
                Relu,
                Linear(84),
                Relu,
                Linear(10),
            ],
        }
    }

    pub fn small_cnn() -> Self {
        use LayerSpec::*;
        let conv = |c| Conv {
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        Self {
            name: "smallcnn".into(),
            input: [1, 28, 28],
            layers: vec![
                conv(32),
                Relu,
                MaxPool(2),
                conv(64),
                Relu,
                MaxPool(2),
                conv(64),
                Relu,
                MaxPool(2),
                Flatten,
                Linear(64),
                Relu,
                Linear(10),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lenet5" => Ok(Self::lenet5()),
            "smallcnn" => Ok(Self::small_cnn()),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }

    /// One-line textual form, e.g. `lenet5 1x28x28 conv(6,5,1,2) relu ...`.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} {}x{}x{}",
            self.name, self.input[0], self.input[1], self.input[2]
        );
        for l in &self.layers {
            s.push(' ');
            s.push_str(&l.to_string());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Config("empty architecture descriptor".into()))?;
        let dims: Vec<usize> = parts
            .next()
            .ok_or_else(|| Error::Config("descriptor lacks input dims".into()))?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Config(format!("bad input dims in `{text}`"))))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Config(format!("input dims must be CxHxW in `{text}`")))?;
        let layers = parts.map(LayerSpec::parse).collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            input,
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Linear(o) => Some(*o),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Shapes of every convolution block output (post-ReLU), in order.
    pub fn conv_blocks(&self) -> Vec<BlockShape> {
        self.trace()
            .into_iter()
            .filter_map(|t| match t {
                Traced::Conv { out, .. } => Some(out),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn trace(&self) -> Vec<Traced> {
        let [mut c, mut h, mut w] = self.input;
        let mut flat = 0usize;
        let mut out = Vec::new();
        for l in &self.layers {
            match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let oh = (h + 2 * padding).saturating_sub(kernel) / stride.max(1) + 1;
                    let ow = (w + 2 * padding).saturating_sub(kernel) / stride.max(1) + 1;
                    out.push(Traced::Conv {
                        in_channels: c,
                        kernel,
                        out: BlockShape {
                            channels: out_channels,
                            height: oh,
                            width: ow,
                        },
                    });
                    c = out_channels;
                    h = oh;
                    w = ow;
                }
                LayerSpec::MaxPool(k) => {
                    h /= k;
                    w /= k;
                    out.push(Traced::Other);
                }
                LayerSpec::Flatten => {
                    flat = c * h * w;
                    out.push(Traced::Other);
                }
                LayerSpec::Linear(o) => {
                    let input = if flat == 0 { c * h * w } else { flat };
                    out.push(Traced::Linear { input, output: o });
                    flat = o;
                }
                LayerSpec::Relu => out.push(Traced::Other),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Traced {
    Conv {
        in_channels: usize,
        kernel: usize,
        out: BlockShape,
    },
    Linear {
        input: usize,
        output: usize,
    },
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    Detector(DetectorLayer),
    Guard(GuardLayer),
    MaxPool(usize),
    Flatten,
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
}

/// A sequential network, with a detector and a guard after each
/// convolution+ReLU block when keyed. Without a key it is the plain
/// baseline network.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentedModel {
    descriptor: ArchDescriptor,
    key: Option<Key>,
    layers: Vec<Layer>,
}

/// Tape handles produced by [`InstrumentedModel::forward`].
pub struct Forward {
    pub logits: Var,
    /// Inputs seen by each detector, in block order.
    pub observed: Vec<Var>,
    /// Parameters in [`InstrumentedModel::params`] order.
    pub params: Vec<Var>,
}

/// Batched inference output.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub flagged: Vec<bool>,
    /// Criterion-positive value counts per detector.
    pub layer_positive: Vec<u64>,
    /// Values evaluated per detector.
    pub layer_evaluated: Vec<u64>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

const PHI_STREAM: u64 = 0x5bd1_e995_7a3c_19f1;

impl InstrumentedModel {
    /// Builds a freshly initialized model. Layer weights depend only on
    /// `seed`, so a baseline and a keyed model with the same seed share them.
    pub fn build(descriptor: ArchDescriptor, key: Option<Key>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi_rng = ChaCha8Rng::seed_from_u64(seed ^ PHI_STREAM);
        let traced = descriptor.trace();
        let mut layers = Vec::new();
        let mut block = 0;
        let mut pending_block: Option<usize> = None;
        for (spec, t) in descriptor.layers.iter().zip(traced) {
            match (spec, t) {
                (
                    &LayerSpec::Conv {
                        stride, padding, ..
                    },
                    Traced::Conv {
                        in_channels,
                        kernel,
                        out,
                    },
                ) => {
                    if out.height == 0 || out.width == 0 || stride == 0 {
                        return Err(Error::shape("build_model", format!("degenerate conv {spec}")));
                    }
                    let fan_in = in_channels * kernel * kernel;
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    let weight = Tensor::from_fn(&[out.channels, in_channels, kernel, kernel], |_| {
                        rng.gen_range(-bound..bound)
                    });
                    let bias = Tensor::from_fn(&[out.channels], |_| rng.gen_range(-bound..bound));
                    layers.push(Layer::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    });
                    pending_block = Some(out.channels);
                }
                (LayerSpec::Relu, _) => {
                    layers.push(Layer::Relu);
                    if let Some(channels) = pending_block.take() {
                        if let Some(key) = key.as_ref() {
                            let range = 1.0 / channels as f32;
                            let phi = Tensor::from_fn(&[channels, channels], |i| {
                                let eye = if i / channels == i % channels { 1.0 } else { 0.0 };
                                eye + phi_rng.gen_range(-range..=range)
                            });
                            layers.push(Layer::Detector(DetectorLayer::new(key.clone(), block)));
                            layers.push(Layer::Guard(GuardLayer::keyed(key, block, phi)?));
                        }
                        block += 1;
                    }
                }
                (&LayerSpec::MaxPool(k), _) => layers.push(Layer::MaxPool(k)),
                (LayerSpec::Flatten, _) => layers.push(Layer::Flatten),
                (&LayerSpec::Linear(_), Traced::Linear { input, output }) => {
                    let bound = 1.0 / (input as f32).sqrt();
                    let weight = Tensor::from_fn(&[input, output], |_| rng.gen_range(-bound..bound));
                    let bias = Tensor::from_fn(&[output], |_| rng.gen_range(-bound..bound));
                    layers.push(Layer::Linear { weight, bias });
                }
                _ => unreachable!("trace mirrors layer specs"),
            }
        }
        Ok(Self {
            descriptor,
            key,
            layers,
        })
    }

    /// Baseline copy of `self` with every detector and guard stripped.
    pub fn without_instrumentation(&self) -> Self {
        Self {
            descriptor: self.descriptor.clone(),
            key: None,
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, Layer::Detector(_) | Layer::Guard(_)))
                .cloned()
                .collect(),
        }
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn key(&self) -> Option<&Key> {
        self.key.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn detectors(&self) -> impl Iterator<Item = &DetectorLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Detector(d) => Some(d),
            _ => None,
        })
    }

    pub fn guards(&self) -> impl Iterator<Item = &GuardLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Guard(g) => Some(g),
            _ => None,
        })
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::Guard(g) => out.push((format!("layer{i}.phi"), &g.phi)),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Guard(g) => out.push(&mut g.phi),
                _ => {}
            }
        }
        out
    }

    /// 16 hex digits of FNV-1a over the architecture, key and weight bits.
    pub fn fingerprint(&self) -> String {
        let mut bytes = self.descriptor.render().into_bytes();
        bytes.extend_from_slice(self.key.as_ref().map_or("none", |k| k.spec()).as_bytes());
        for (_, t) in self.params() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        format!("{:016x}", crate::keys::fnv1a(&bytes))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.descriptor.input;
        match x.shape() {
            [_, c, h, w] if [*c, *h, *w] == want => Ok(()),
            other => Err(Error::shape(
                "forward",
                format!("input shape {other:?}, model expects [N, {}, {}, {}]", want[0], want[1], want[2]),
            )),
        }
    }

    /// Records the forward pass of `x` (already on the tape). Parameters are
    /// placed on the tape as leaves that require a gradient iff `train`.
    pub fn forward(&self, tape: &mut Tape, x: Var, train: bool) -> Result<Forward> {
        self.forward_recording(tape, x, train, None)
    }

    fn forward_recording(
        &self,
        tape: &mut Tape,
        x: Var,
        train: bool,
        mut record: Option<&mut Vec<Var>>,
    ) -> Result<Forward> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut observed = Vec::new();
        let mut params = Vec::new();
        for l in &self.layers {
            h = match l {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone(), train);
                    let b = tape.leaf(bias.clone(), train);
                    params.extend([w, b]);
                    tape.conv2d(h, w, b, *stride, *padding)?
                }
                Layer::Relu => tape.relu(h),
                Layer::Detector(_) => {
                    observed.push(h);
                    h
                }
                Layer::Guard(g) => {
                    let phi = tape.leaf(g.phi.clone(), train);
                    params.push(phi);
                    g.forward(tape, h, phi)?
                }
                Layer::MaxPool(k) => tape.max_pool2d(h, *k)?,
                Layer::Flatten => tape.flatten(h),
                Layer::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone(), train);
                    let b = tape.leaf(bias.clone(), train);
                    params.extend([w, b]);
                    tape.linear(h, w, b)?
                }
            };
            if let Some(r) = record.as_deref_mut() {
                r.push(h);
            }
        }
        Ok(Forward {
            logits: h,
            observed,
            params,
        })
    }

    /// Output of every layer for `x`, in layer order.
    pub fn layer_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut vars = Vec::new();
        self.forward_recording(&mut tape, xv, false, Some(&mut vars))?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Data-dependent initialization on a calibration batch, visiting layers
    /// in order so each is measured on the already-rescaled layers before it:
    ///
    /// - a convolution whose block feeds a detector is scaled so its largest
    ///   activation sits at half the key's taboo onset (at most 1);
    /// - a guard's `φ` is scaled so its channel scale `γ ⊙ (pool(x)·φ)`
    ///   averages 1 in magnitude;
    /// - any other convolution or linear layer gets unit output deviation.
    pub fn rescale_from_data(&mut self, x: &Tensor) -> Result<()> {
        let cap = match self.key.as_ref().and_then(|k| k.onset(1e3)) {
            Some(onset) if onset > 0.0 => (0.5 * onset).min(1.0),
            _ => 1.0,
        };
        for i in 0..self.layers.len() {
            let outs = match self.layers[i] {
                Layer::Conv { .. } | Layer::Linear { .. } | Layer::Guard(_) => self.layer_outputs(x)?,
                _ => continue,
            };
            let s = match &self.layers[i] {
                Layer::Guard(g) => {
                    let mut tape = Tape::inference();
                    let xv = tape.constant(outs[i - 1].clone());
                    let pooled = tape.global_avg_pool(xv)?;
                    let phi = tape.constant(g.phi.clone());
                    let mixed = tape.matmul(pooled, phi)?;
                    let scale = tape.scale_columns(mixed, g.gamma_f32())?;
                    let v = tape.value(scale).data();
                    let mean_abs = v.iter().map(|a| a.abs()).sum::<f32>() / v.len().max(1) as f32;
                    (mean_abs > 1e-12).then(|| 1.0 / mean_abs)
                }
                _ if matches!(self.layers.get(i + 2), Some(Layer::Detector(_))) => {
                    let peak = outs[i].data().iter().fold(0.0f32, |m, &v| m.max(v));
                    (peak > 1e-12).then(|| cap / peak)
                }
                _ => {
                    let out = outs[i].data();
                    let n = out.len().max(1) as f64;
                    let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
                    let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                    (var > 1e-24).then(|| 1.0 / var.sqrt() as f32)
                }
            };
            let Some(s) = s else { continue };
            match &mut self.layers[i] {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    weight.data_mut().iter_mut().chain(bias.data_mut()).for_each(|v| *v *= s);
                }
                Layer::Guard(g) => g.phi.data_mut().iter_mut().for_each(|v| *v *= s),
                _ => {}
            }
        }
        Ok(())
    }

    /// Cross-entropy plus `lambda` times the batch-mean detector
    /// regularizer. Returns `(total, cross_entropy, regularizer)`.
    pub fn objective(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        labels: &[usize],
        lambda: f32,
    ) -> Result<(Var, Var, Option<Var>)> {
        let ce = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let reg = match &self.key {
            Some(key) if !fwd.observed.is_empty() => regularizer_on_tape(tape, &fwd.observed, key),
            _ => None,
        };
        let total = match reg {
            Some(r) if lambda != 0.0 => {
                let weighted = tape.scale(r, lambda);
                tape.add(ce, weighted)?
            }
            _ => ce,
        };
        Ok((total, ce, reg))
    }

    /// Logits only, no tape kept.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.logits)
    }

    /// Logits plus detector alarms, evaluated in chunks.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        self.check_input(x)?;
        let n = x.batch();
        let detectors: Vec<&DetectorLayer> = self.detectors().collect();
        let mut flagged = vec![false; n];
        let mut layer_positive = vec![0u64; detectors.len()];
        let mut layer_evaluated = vec![0u64; detectors.len()];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::inference();
            let xv = tape.constant(x.slice_batch(start, end));
            let fwd = self.forward(&mut tape, xv, false)?;
            for (d, (&obs, det)) in fwd.observed.iter().zip(&detectors).enumerate() {
                let act = tape.value(obs);
                for (i, count) in det.positives_per_sample(act).into_iter().enumerate() {
                    layer_positive[d] += count as u64;
                    flagged[start + i] |= count > 0;
                }
                layer_evaluated[d] += act.len() as u64;
            }
            parts.push(tape.value(fwd.logits).clone());
            start = end;
        }
        let logits = if parts.is_empty() {
            Tensor::zeros(&[0, self.descriptor.classes()])
        } else {
            Tensor::concat(&parts)?
        };
        Ok(Inference {
            logits,
            flagged,
            layer_positive,
            layer_evaluated,
        })
    }

    /// Cross-entropy of each sample, without a tape.
    pub fn per_sample_loss(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(x)?;
        let k = logits.sample_len();
        Ok(logits
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
                lse - row[y] as f64
            })
            .collect())
    }
}

/// Baseline (no key) or keyed model by architecture name.
pub fn build_model(name: &str, key: Option<Key>, seed: u64) -> Result<InstrumentedModel> {
    InstrumentedModel::build(ArchDescriptor::by_name(name)?, key, seed)
}

/// Per-sample alarm flags and per-detector positive counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AlarmReport {
    pub flagged: Vec<bool>,
    pub layer_positive: Vec<u64>,
    pub layer_evaluated: Vec<u64>,
}

impl AlarmReport {
    pub fn detection_ratio(&self) -> f64 {
        if self.flagged.is_empty() {
            return 0.0;
        }
        self.flagged.iter().filter(|&&f| f).count() as f64 / self.flagged.len() as f64
    }
}

pub fn detector_alarm(model: &InstrumentedModel, batch: &Tensor) -> Result<AlarmReport> {
    let inf = model.infer(batch)?;
    Ok(AlarmReport {
        flagged: inf.flagged,
        layer_positive: inf.layer_positive,
        layer_evaluated: inf.layer_evaluated,
    })
}
