//! Online/target networks, the fine-tuning classifier head and the
//! checkpoint file format.
//!
//! The encoder is a stack of 3x3 convolutions (bias, relu, padding 1)
//! followed by global average pooling. Projector, predictor and head are
//! two-layer MLPs: linear -> relu -> linear. There is no normalization layer,
//! so no forward pass couples samples in a batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Side of the square grayscale input seen during fine-tuning.
    pub input_side: usize,
    pub stages: Vec<ConvStage>,
}

impl EncoderSpec {
    pub fn desk(input_side: usize) -> Self {
        EncoderSpec {
            input_side,
            stages: [16, 32, 64]
                .into_iter()
                .map(|out_channels| ConvStage {
                    out_channels,
                    stride: 2,
                })
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Side of the augmented views used during pretraining.
    pub fn view_side(&self) -> usize {
        self.input_side / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 8 {
            return Err(Error::Spec(format!(
                "input_side must be >= 8, got {}",
                self.input_side
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Spec("encoder needs at least one conv stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(Error::Spec(format!(
                    "stage {i}: out_channels must be >= 1 and stride 1 or 2, got {s:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        MlpSpec {
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Spec(format!("MLP dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Architecture of every network in a [`ModelBundle`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecs {
    pub encoder: EncoderSpec,
    pub projector: MlpSpec,
    pub predictor: MlpSpec,
    /// Hidden width of the fine-tuning head; its output width is the class count.
    pub head_hidden: usize,
}

impl ModelSpecs {
    /// Encoder 16/32/64 with stride 2, projector d->128->32, predictor
    /// 32->32->32, head d->64->K.
    pub fn desk(input_side: usize) -> Self {
        let encoder = EncoderSpec::desk(input_side);
        let d = encoder.feature_dim();
        ModelSpecs {
            encoder,
            projector: MlpSpec::new(d, 128, 32),
            predictor: MlpSpec::new(32, 32, 32),
            head_hidden: 64,
        }
    }

    pub fn head(&self, num_classes: usize) -> MlpSpec {
        MlpSpec::new(self.encoder.feature_dim(), self.head_hidden, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        self.predictor.validate()?;
        let d = self.encoder.feature_dim();
        if self.projector.in_dim != d {
            return Err(Error::Spec(format!(
                "projector in_dim {} != encoder feature_dim {d}",
                self.projector.in_dim
            )));
        }
        if self.predictor.in_dim != self.projector.out_dim
            || self.predictor.out_dim != self.projector.out_dim
        {
            return Err(Error::Spec(format!(
                "predictor {:?} must map projector output ({}) to the same width",
                self.predictor, self.projector.out_dim
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Spec("head_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// `(name, tensor)` pairs in [`Parameters::params`] order.
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)>;

    /// Records every parameter on `tape`, as leaves when `trainable`.
    fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: uniform_tensor(rng, &[fan_in, fan_out], fan_in),
            bias: uniform_tensor(rng, &[fan_out], fan_in),
        }
    }

    fn forward(tape: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.add(tape.matmul(x, vars[0])?, vars[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, 3, 3]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv>,
}

impl Encoder {
    pub fn init<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = 1;
        let mut convs = Vec::with_capacity(spec.stages.len());
        for stage in &spec.stages {
            let fan_in = in_ch * KERNEL * KERNEL;
            convs.push(Conv {
                weight: uniform_tensor(rng, &[stage.out_channels, in_ch, KERNEL, KERNEL], fan_in),
                bias: uniform_tensor(rng, &[stage.out_channels], fan_in),
                stride: stage.stride,
            });
            in_ch = stage.out_channels;
        }
        Ok(Encoder {
            spec: spec.clone(),
            convs,
        })
    }

    /// `images[N,1,S,S] -> features[N,d]`, requiring `S == side`.
    pub fn forward(&self, tape: &Tape, vars: &[Var], images: Var, side: usize) -> Result<Var> {
        let shape = tape.value(images)?.shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("encoder expects [N, 1, {side}, {side}]"),
            });
        }
        let mut h = images;
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = tape.conv2d(h, vars[2 * i], vars[2 * i + 1], conv.stride, PAD)?;
            h = tape.relu(pre)?;
        }
        tape.global_avg_pool(h)
    }
}

impl Parameters for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("{prefix}.conv{i}.weight"), &c.weight),
                    (format!("{prefix}.conv{i}.bias"), &c.bias),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Mlp {
            spec,
            hidden: Linear::init(rng, spec.in_dim, spec.hidden_dim),
            out: Linear::init(rng, spec.hidden_dim, spec.out_dim),
        })
    }

    pub fn forward(&self, tape: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: shape,
                rhs: vec![self.spec.in_dim],
            });
        }
        let h = tape.relu(Linear::forward(tape, &vars[..2], x)?)?;
        Linear::forward(tape, &vars[2..], h)
    }

    fn from_tensors(hidden: Linear, out: Linear) -> Result<Self> {
        let (in_dim, hidden_dim) = hidden.weight.dims2("mlp")?;
        let (h2, out_dim) = out.weight.dims2("mlp")?;
        if h2 != hidden_dim || hidden.bias.shape() != [hidden_dim] || out.bias.shape() != [out_dim]
        {
            return Err(Error::Format("inconsistent MLP tensor shapes".into()));
        }
        Ok(Mlp {
            spec: MlpSpec::new(in_dim, hidden_dim, out_dim),
            hidden,
            out,
        })
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.hidden.weight"), &self.hidden.weight),
            (format!("{prefix}.hidden.bias"), &self.hidden.bias),
            (format!("{prefix}.out.weight"), &self.out.weight),
            (format!("{prefix}.out.bias"), &self.out.bias),
        ]
    }
}

/// Online network (θ), target network (ψ) and the optional fine-tuning head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub specs: ModelSpecs,
    pub init_seed: u64,
    pub online_encoder: Encoder,
    pub online_projector: Mlp,
    pub predictor: Mlp,
    pub target_encoder: Encoder,
    pub target_projector: Mlp,
    pub classifier_head: Option<Mlp>,
}

impl ModelBundle {
    /// Draws θ from the `init` stream of `seed` and sets ψ = θ.
    pub fn init(specs: &ModelSpecs, seed: u64) -> Result<Self> {
        specs.validate()?;
        let mut rng = rng::stream(seed, "init", &[]);
        let online_encoder = Encoder::init(&specs.encoder, &mut rng)?;
        let online_projector = Mlp::init(specs.projector, &mut rng)?;
        let predictor = Mlp::init(specs.predictor, &mut rng)?;
        Ok(ModelBundle {
            specs: specs.clone(),
            init_seed: seed,
            target_encoder: online_encoder.clone(),
            target_projector: online_projector.clone(),
            online_encoder,
            online_projector,
            predictor,
            classifier_head: None,
        })
    }

    /// Replaces the head with a fresh one drawn from the `head` stream of the
    /// bundle's seed. The result depends only on the seed and class count.
    pub fn attach_classifier(&mut self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Spec(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = rng::stream(self.init_seed, "head", &[num_classes as u64]);
        self.classifier_head = Some(Mlp::init(self.specs.head(num_classes), &mut rng)?);
        Ok(())
    }

    pub fn head(&self) -> Result<&Mlp> {
        self.classifier_head
            .as_ref()
            .ok_or_else(|| Error::Spec("no classifier head attached".into()))
    }

    /// θ restricted to the parts that have a target counterpart, in the
    /// same order as [`ModelBundle::target_params_mut`].
    pub fn online_mirror_params(&self) -> Vec<&Tensor> {
        let mut v = self.online_encoder.params();
        v.extend(self.online_projector.params());
        v
    }

    pub fn target_params(&self) -> Vec<&Tensor> {
        let mut v = self.target_encoder.params();
        v.extend(self.target_projector.params());
        v
    }

    pub fn target_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.target_encoder.params_mut();
        v.extend(self.target_projector.params_mut());
        v
    }

    /// Encoder features without recording gradients.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.online_encoder.bind(&tape, false);
        let x = tape.constant(images.clone());
        let y = self
            .online_encoder
            .forward(&tape, &vars, x, self.specs.encoder.input_side)?;
        Ok((*tape.value(y)?).clone())
    }

    /// Head logits for `images[N,1,S,S]`, without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let head = self.head()?;
        let tape = Tape::new();
        let enc = self.online_encoder.bind(&tape, false);
        let hv = head.bind(&tape, false);
        let x = tape.constant(images.clone());
        let y = self
            .online_encoder
            .forward(&tape, &enc, x, self.specs.encoder.input_side)?;
        let l = head.forward(&tape, &hv, y)?;
        Ok((*tape.value(l)?).clone())
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("meta.specs".to_string(), encode_specs(&self.specs)),
            ("meta.seed".to_string(), encode_seed(self.init_seed)),
        ];
        let mut push = |pairs: Vec<(String, &Tensor)>| {
            out.extend(pairs.into_iter().map(|(n, t)| (n, t.clone())));
        };
        push(self.online_encoder.named_params("online.encoder"));
        push(self.online_projector.named_params("online.projector"));
        push(self.predictor.named_params("online.predictor"));
        push(self.target_encoder.named_params("target.encoder"));
        push(self.target_projector.named_params("target.projector"));
        if let Some(head) = &self.classifier_head {
            push(head.named_params("online.head"));
        }
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        write_tensors(&self.named_tensors())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = read_tensors(bytes)?.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let specs = decode_specs(&take("meta.specs")?)?;
        let init_seed = decode_seed(&take("meta.seed")?)?;
        let mut encoder = |prefix: &str| -> Result<Encoder> {
            let mut convs = Vec::new();
            for (i, stage) in specs.encoder.stages.iter().enumerate() {
                convs.push(Conv {
                    weight: take(&format!("{prefix}.conv{i}.weight"))?,
                    bias: take(&format!("{prefix}.conv{i}.bias"))?,
                    stride: stage.stride,
                });
            }
            Ok(Encoder {
                spec: specs.encoder.clone(),
                convs,
            })
        };
        let online_encoder = encoder("online.encoder")?;
        let target_encoder = encoder("target.encoder")?;
        let mut mlp = |prefix: &str| -> Result<Mlp> {
            Mlp::from_tensors(
                Linear {
                    weight: take(&format!("{prefix}.hidden.weight"))?,
                    bias: take(&format!("{prefix}.hidden.bias"))?,
                },
                Linear {
                    weight: take(&format!("{prefix}.out.weight"))?,
                    bias: take(&format!("{prefix}.out.bias"))?,
                },
            )
        };
        let online_projector = mlp("online.projector")?;
        let predictor = mlp("online.predictor")?;
        let target_projector = mlp("target.projector")?;
        let classifier_head = if map.contains_key("online.head.hidden.weight") {
            let mut take = |name: &str| {
                map.remove(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
            };
            Some(Mlp::from_tensors(
                Linear {
                    weight: take("online.head.hidden.weight")?,
                    bias: take("online.head.hidden.bias")?,
                },
                Linear {
                    weight: take("online.head.out.weight")?,
                    bias: take("online.head.out.bias")?,
                },
            )?)
        } else {
            None
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        let bundle = ModelBundle {
            specs,
            init_seed,
            online_encoder,
            online_projector,
            predictor,
            target_encoder,
            target_projector,
            classifier_head,
        };
        bundle.check_layout()?;
        Ok(bundle)
    }

    /// Verifies every tensor against the specs.
    pub fn check_layout(&self) -> Result<()> {
        let reference = ModelBundle::init(&self.specs, 0)?;
        let shapes = |ts: Vec<&Tensor>| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let pairs = [
            (shapes(self.online_encoder.params()), shapes(reference.online_encoder.params())),
            (shapes(self.target_encoder.params()), shapes(reference.online_encoder.params())),
            (shapes(self.online_projector.params()), shapes(reference.online_projector.params())),
            (shapes(self.target_projector.params()), shapes(reference.online_projector.params())),
            (shapes(self.predictor.params()), shapes(reference.predictor.params())),
        ];
        for (got, want) in pairs {
            if got != want {
                return Err(Error::Format(format!(
                    "tensor shapes {got:?} do not match the recorded specs {want:?}"
                )));
            }
        }
        if let Some(head) = &self.classifier_head {
            if head.spec.in_dim != self.specs.encoder.feature_dim()
                || head.spec.hidden_dim != self.specs.head_hidden
            {
                return Err(Error::Format(format!(
                    "classifier head {:?} does not match the recorded specs",
                    head.spec
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

fn encode_specs(s: &ModelSpecs) -> Tensor {
    let mut v = vec![s.encoder.input_side as f64, s.encoder.stages.len() as f64];
    for st in &s.encoder.stages {
        v.push(st.out_channels as f64);
        v.push(st.stride as f64);
    }
    for m in [s.projector, s.predictor] {
        v.extend([m.in_dim as f64, m.hidden_dim as f64, m.out_dim as f64]);
    }
    v.push(s.head_hidden as f64);
    let n = v.len();
    Tensor::new(vec![n], v).expect("spec vector is non-empty")
}

fn decode_specs(t: &Tensor) -> Result<ModelSpecs> {
    let bad = || Error::Format("corrupt meta.specs tensor".into());
    let v: Vec<usize> = t
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        })
        .collect::<Result<_>>()?;
    let n_stages = *v.get(1).ok_or_else(bad)?;
    if v.len() != 2 + 2 * n_stages + 7 {
        return Err(bad());
    }
    let stages = (0..n_stages)
        .map(|i| ConvStage {
            out_channels: v[2 + 2 * i],
            stride: v[3 + 2 * i],
        })
        .collect();
    let r = &v[2 + 2 * n_stages..];
    let specs = ModelSpecs {
        encoder: EncoderSpec {
            input_side: v[0],
            stages,
        },
        projector: MlpSpec::new(r[0], r[1], r[2]),
        predictor: MlpSpec::new(r[3], r[4], r[5]),
        head_hidden: r[6],
    };
    specs.validate()?;
    Ok(specs)
}

fn encode_seed(seed: u64) -> Tensor {
    let lo = (seed & 0xFFFF_FFFF) as f64;
    let hi = (seed >> 32) as f64;
    Tensor::new(vec![2], vec![lo, hi]).expect("two values")
}

fn decode_seed(t: &Tensor) -> Result<u64> {
    match t.data() {
        &[lo, hi] if lo >= 0.0 && hi >= 0.0 && lo < 4294967296.0 && hi < 4294967296.0 => {
            Ok(((hi as u64) << 32) | lo as u64)
        }
        _ => Err(Error::Format("corrupt meta.seed tensor".into())),
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BKEC";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes named tensors:
/// `"BKEC"`, u32 version, u32 count, then per tensor
/// `{u16 name_len, name, u8 rank, u32 dims..., f64 payload}`, then a u64
/// holding the number of bytes that precede it. Little-endian throughout.
pub fn write_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let len = buf.len() as u64;
    buf.extend_from_slice(&len.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::PayloadLength {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("bad checkpoint magic (expected BKEC)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("tensor {name} is too large"))
        })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let body = r.pos as u64;
    let recorded = r.u64()?;
    if recorded != body {
        return Err(Error::PayloadLength {
            expected: recorded,
            found: body,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::PayloadLength {
            expected: r.pos as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(out)
}
