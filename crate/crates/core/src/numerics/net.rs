//! Fixed-topology MLPs for the encoder `f`, projection head `g` and
//! classification head `c`, with hand-written backward passes.
//!
//! Each layer is `affine -> activation -> dropout`. Dropout is the classic
//! (non-inverted) form: training multiplies by a Bernoulli keep-mask, eval
//! multiplies by the keep probability, so eval mode is deterministic.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn code(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::Linear => 0.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v {
            x if x == 1.0 => Ok(Activation::Relu),
            x if x == 0.0 => Ok(Activation::Linear),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

/// Weight (`fan_in x fan_out`) and bias of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    /// Uniform Glorot initialization, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Shape-defining network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Output width of every encoder layer; the last entry is the width of `h`.
    pub encoder_widths: Vec<usize>,
    /// Activation after the last encoder layer (hidden layers always use ReLU).
    #[serde(default = "default_encoder_output")]
    pub encoder_output_activation: Activation,
    #[serde(default)]
    pub encoder_dropout: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub cls_hidden: usize,
    pub classes: usize,
    #[serde(default = "default_head_dropout")]
    pub head_dropout: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
}

fn default_encoder_output() -> Activation {
    Activation::Linear
}

fn default_head_dropout() -> f64 {
    0.1
}

fn default_ema_decay() -> f64 {
    0.999
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_widths.is_empty() {
            return Err(Error::Config("encoder needs an input width and at least one layer".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.proj_hidden == 0
            || self.proj_dim == 0
            || self.cls_hidden == 0
            || self.classes == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        for (name, p) in [("encoder_dropout", self.encoder_dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Non-shape topology facts needed to run the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub encoder_activations: Vec<Activation>,
    pub encoder_dropout: f64,
    pub head_dropout: f64,
}

impl NetSpec {
    fn encoder_dropouts(&self) -> Vec<f64> {
        vec![self.encoder_dropout; self.encoder_activations.len()]
    }

    fn head_activations() -> [Activation; 2] {
        [Activation::Relu, Activation::Linear]
    }

    fn head_dropouts(&self) -> [f64; 2] {
        [self.head_dropout, 0.0]
    }
}

/// One full set of tensors for `f`, `g` and `c`. Also used for gradients and
/// optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub encoder: Vec<LayerParams>,
    pub proj_head: Vec<LayerParams>,
    pub cls_head: Vec<LayerParams>,
}

pub type GradSet = Weights;

/// Which sub-networks a gradient step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sections {
    pub encoder: bool,
    pub proj_head: bool,
    pub cls_head: bool,
}

impl Sections {
    pub const ALL: Sections = Sections {
        encoder: true,
        proj_head: true,
        cls_head: true,
    };
}

impl Weights {
    pub fn zeros_like(&self) -> Weights {
        let z = |v: &[LayerParams]| v.iter().map(LayerParams::zeros_like).collect();
        Weights {
            encoder: z(&self.encoder),
            proj_head: z(&self.proj_head),
            cls_head: z(&self.cls_head),
        }
    }

    /// Named tensors in canonical order (biases as `1 x fan_out`).
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (section, layers) in self.sections() {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}{section}.{i}.weight"), l.weight.clone()));
                let bias = Matrix::from_vec(1, l.bias.len(), l.bias.clone()).expect("row vector");
                out.push((format!("{prefix}{section}.{i}.bias"), bias));
            }
        }
        out
    }

    fn sections(&self) -> [(&'static str, &Vec<LayerParams>); 3] {
        [
            ("encoder", &self.encoder),
            ("proj", &self.proj_head),
            ("cls", &self.cls_head),
        ]
    }

    /// Flat parameter slices in canonical order, paired with the section they
    /// belong to.
    pub fn slices(&self) -> Vec<(Section, &[f64])> {
        let mut out = Vec::new();
        for (sec, layers) in [
            (Section::Encoder, &self.encoder),
            (Section::ProjHead, &self.proj_head),
            (Section::ClsHead, &self.cls_head),
        ] {
            for l in layers {
                out.push((sec, l.weight.as_slice()));
                out.push((sec, l.bias.as_slice()));
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<(Section, &mut [f64])> {
        let mut out = Vec::new();
        for (sec, layers) in [
            (Section::Encoder, &mut self.encoder),
            (Section::ProjHead, &mut self.proj_head),
            (Section::ClsHead, &mut self.cls_head),
        ] {
            for l in layers.iter_mut() {
                out.push((sec, l.weight.as_mut_slice()));
                out.push((sec, l.bias.as_mut_slice()));
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Weights) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.len() == y.len())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].fan_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(0, LayerParams::fan_out)
    }

    pub fn classes(&self) -> usize {
        self.cls_head.last().map_or(0, LayerParams::fan_out)
    }

    pub fn forward_encoder(&self, spec: &NetSpec, x: &Matrix, mode: Mode) -> Result<(Matrix, MlpCache)> {
        mlp_forward(
            &self.encoder,
            &spec.encoder_activations,
            &spec.encoder_dropouts(),
            x,
            mode,
        )
    }

    pub fn forward_classifier(&self, spec: &NetSpec, h: &Matrix, mode: Mode) -> Result<(Matrix, MlpCache)> {
        mlp_forward(
            &self.cls_head,
            &NetSpec::head_activations(),
            &spec.head_dropouts(),
            h,
            mode,
        )
    }

    pub fn forward_projection(&self, spec: &NetSpec, h: &Matrix, mode: Mode) -> Result<(Matrix, ProjCache)> {
        let (pre, mlp) = mlp_forward(
            &self.proj_head,
            &NetSpec::head_activations(),
            &spec.head_dropouts(),
            h,
            mode,
        )?;
        let (z, norms) = l2_normalize_rows(&pre);
        Ok((z.clone(), ProjCache { mlp, z, norms }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Encoder,
    ProjHead,
    ClsHead,
}

impl Sections {
    pub fn contains(&self, s: Section) -> bool {
        match s {
            Section::Encoder => self.encoder,
            Section::ProjHead => self.proj_head,
            Section::ClsHead => self.cls_head,
        }
    }
}

/// Forward-pass mode. Training draws dropout masks from the given seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub fn from_flag(train_mode: bool, rng_seed: u64) -> Mode {
        if train_mode {
            Mode::Train { seed: rng_seed }
        } else {
            Mode::Eval
        }
    }
}

/// Activation record of one MLP forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    keep: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ProjCache {
    mlp: MlpCache,
    z: Matrix,
    norms: Vec<f64>,
}

fn mlp_forward(
    layers: &[LayerParams],
    acts: &[Activation],
    dropout: &[f64],
    x: &Matrix,
    mode: Mode,
) -> Result<(Matrix, MlpCache)> {
    debug_assert_eq!(layers.len(), acts.len());
    let mut rng = match mode {
        Mode::Train { seed } => Some(rng::seeded(seed)),
        Mode::Eval => None,
    };
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
        masks: Vec::with_capacity(layers.len()),
        keep: Vec::with_capacity(layers.len()),
    };
    let mut cur = x.clone();
    for ((layer, &act), &p) in layers.iter().zip(acts).zip(dropout) {
        if cur.cols() != layer.fan_in() {
            return Err(Error::dim("layer forward", layer.fan_in(), cur.cols()));
        }
        let mut pre = cur.matmul(&layer.weight)?;
        pre.add_row_vector(&layer.bias)?;
        let mut out = match act {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Linear => pre.clone(),
        };
        let keep = 1.0 - p;
        let mask = if p > 0.0 {
            match rng.as_mut() {
                Some(r) => {
                    let m: Vec<f64> = (0..out.rows() * out.cols())
                        .map(|_| if r.random::<f64>() < keep { 1.0 } else { 0.0 })
                        .collect();
                    for (v, &k) in out.as_mut_slice().iter_mut().zip(&m) {
                        *v *= k;
                    }
                    Some(m)
                }
                None => {
                    out.scale(keep);
                    None
                }
            }
        } else {
            None
        };
        cache.inputs.push(std::mem::replace(&mut cur, out));
        cache.pre.push(pre);
        cache.masks.push(mask);
        cache.keep.push(keep);
    }
    Ok((cur, cache))
}

/// Backpropagates `grad_out` through the MLP, accumulating parameter
/// gradients into `grads` and returning the gradient w.r.t. the input.
fn mlp_backward(
    layers: &[LayerParams],
    acts: &[Activation],
    cache: &MlpCache,
    grad_out: &Matrix,
    grads: &mut [LayerParams],
) -> Result<Matrix> {
    let mut g = grad_out.clone();
    for i in (0..layers.len()).rev() {
        let pre = &cache.pre[i];
        if g.shape() != pre.shape() {
            return Err(Error::dim(
                "layer backward",
                format!("{:?}", pre.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        match &cache.masks[i] {
            Some(m) => {
                for (v, &k) in g.as_mut_slice().iter_mut().zip(m) {
                    *v *= k;
                }
            }
            None if cache.keep[i] < 1.0 => g.scale(cache.keep[i]),
            None => {}
        }
        if acts[i] == Activation::Relu {
            for (v, &a) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if a <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        let gw = cache.inputs[i].t_matmul(&g)?;
        grads[i].weight.add_scaled(&gw, 1.0)?;
        for (b, s) in grads[i].bias.iter_mut().zip(g.column_sums()) {
            *b += s;
        }
        g = g.matmul_t(&layers[i].weight)?;
    }
    Ok(g)
}

/// Row-wise L2 normalization; an all-zero row maps to the first basis vector.
pub fn l2_normalize_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else if let Some(first) = row.first_mut() {
            *first = 1.0;
        }
        norms.push(n);
    }
    (out, norms)
}

fn l2_normalize_backward(z: &Matrix, norms: &[f64], grad_z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let n = norms[i];
        if n == 0.0 {
            continue;
        }
        let zr = z.row(i);
        let gr = grad_z.row(i);
        let proj: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &zv), &gv) in out.row_mut(i).iter_mut().zip(zr).zip(gr) {
            *o = (gv - zv * proj) / n;
        }
    }
    out
}

/// Trainable weights of `f`, `g`, `c` plus their EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub live: Weights,
    pub ema_shadow: Weights,
    pub ema_decay: f64,
    pub spec: NetSpec,
}

impl ParamSet {
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<ParamSet> {
        cfg.validate()?;
        let mut r = rng::seeded(rng::derive(seed, 1));
        let mut encoder = Vec::new();
        let mut fan_in = cfg.input_dim;
        for &w in &cfg.encoder_widths {
            encoder.push(LayerParams::glorot(fan_in, w, &mut r));
            fan_in = w;
        }
        let embed = fan_in;
        let proj_head = vec![
            LayerParams::glorot(embed, cfg.proj_hidden, &mut r),
            LayerParams::glorot(cfg.proj_hidden, cfg.proj_dim, &mut r),
        ];
        let cls_head = init_cls_head(embed, cfg.cls_hidden, cfg.classes, rng::derive(seed, 2));
        let live = Weights {
            encoder,
            proj_head,
            cls_head,
        };
        let mut acts = vec![Activation::Relu; cfg.encoder_widths.len()];
        *acts.last_mut().expect("non-empty") = cfg.encoder_output_activation;
        Ok(ParamSet {
            ema_shadow: live.clone(),
            live,
            ema_decay: cfg.ema_decay,
            spec: NetSpec {
                encoder_activations: acts,
                encoder_dropout: cfg.encoder_dropout,
                head_dropout: cfg.head_dropout,
            },
        })
    }

    /// Assembles a parameter set from explicit tensors (shadow = live).
    pub fn from_parts(live: Weights, spec: NetSpec, ema_decay: f64) -> Result<ParamSet> {
        if live.encoder.len() != spec.encoder_activations.len() {
            return Err(Error::dim(
                "ParamSet::from_parts",
                format!("{} encoder activations", live.encoder.len()),
                spec.encoder_activations.len(),
            ));
        }
        if live.proj_head.len() != 2 || live.cls_head.len() != 2 {
            return Err(Error::Config("heads must have exactly two layers".into()));
        }
        let chain = |layers: &[LayerParams], start: usize| {
            layers.iter().try_fold(start, |fan_in, l| {
                if l.fan_in() == fan_in && l.bias.len() == l.fan_out() {
                    Ok(l.fan_out())
                } else {
                    Err(Error::dim("ParamSet::from_parts", fan_in, l.fan_in()))
                }
            })
        };
        let embed = chain(&live.encoder, live.input_dim())?;
        chain(&live.proj_head, embed)?;
        chain(&live.cls_head, embed)?;
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {ema_decay}")));
        }
        Ok(ParamSet {
            ema_shadow: live.clone(),
            live,
            ema_decay,
            spec,
        })
    }

    /// Replaces the classification head with a freshly initialized one.
    pub fn reinit_cls_head(&mut self, seed: u64) {
        let embed = self.live.embed_dim();
        let hidden = self.live.cls_head[0].fan_out();
        let classes = self.live.classes();
        self.live.cls_head = init_cls_head(embed, hidden, classes, seed);
    }

    /// Copies the live weights into the EMA shadow.
    pub fn reset_ema(&mut self) {
        self.ema_shadow = self.live.clone();
    }

    /// Architecture metadata as tensors (`meta.*`), stored alongside the
    /// weights in checkpoints.
    pub fn meta_tensors(&self) -> Vec<(String, Matrix)> {
        let acts: Vec<f64> = self.spec.encoder_activations.iter().map(|a| a.code()).collect();
        vec![
            (
                "meta.encoder_activation".into(),
                Matrix::from_vec(1, acts.len(), acts).expect("row vector"),
            ),
            (
                "meta.dropout".into(),
                Matrix::from_vec(1, 2, vec![self.spec.encoder_dropout, self.spec.head_dropout])
                    .expect("row vector"),
            ),
            (
                "meta.ema_decay".into(),
                Matrix::from_vec(1, 1, vec![self.ema_decay]).expect("scalar"),
            ),
        ]
    }

    pub fn to_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = self.meta_tensors();
        out.extend(self.live.named_tensors(""));
        out.extend(self.ema_shadow.named_tensors("ema."));
        out
    }

    pub fn from_tensors(tensors: &[(String, Matrix)]) -> Result<ParamSet> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let acts = find("meta.encoder_activation")?
            .as_slice()
            .iter()
            .map(|&v| Activation::from_code(v))
            .collect::<Result<Vec<_>>>()?;
        let dropout = find("meta.dropout")?.as_slice().to_vec();
        if dropout.len() != 2 {
            return Err(Error::Checkpoint("meta.dropout must hold two values".into()));
        }
        let ema_decay = *find("meta.ema_decay")?
            .as_slice()
            .first()
            .ok_or_else(|| Error::Checkpoint("meta.ema_decay is empty".into()))?;
        let read = |prefix: &str| -> Result<Weights> {
            let section = |name: &str, count: usize| -> Result<Vec<LayerParams>> {
                (0..count)
                    .map(|i| {
                        let weight = find(&format!("{prefix}{name}.{i}.weight"))?.clone();
                        let bias = find(&format!("{prefix}{name}.{i}.bias"))?.as_slice().to_vec();
                        Ok(LayerParams { weight, bias })
                    })
                    .collect()
            };
            Ok(Weights {
                encoder: section("encoder", acts.len())?,
                proj_head: section("proj", 2)?,
                cls_head: section("cls", 2)?,
            })
        };
        let spec = NetSpec {
            encoder_activations: acts.clone(),
            encoder_dropout: dropout[0],
            head_dropout: dropout[1],
        };
        let mut params = ParamSet::from_parts(read("")?, spec, ema_decay)?;
        let shadow = read("ema.")?;
        if !shadow.same_shape(&params.live) {
            return Err(Error::Checkpoint("EMA shadow shape differs from live weights".into()));
        }
        params.ema_shadow = shadow;
        Ok(params)
    }

    pub fn zero_grads(&self) -> GradSet {
        self.live.zeros_like()
    }
}

fn init_cls_head(embed: usize, hidden: usize, classes: usize, seed: u64) -> Vec<LayerParams> {
    let mut r = rng::seeded(seed);
    vec![
        LayerParams::glorot(embed, hidden, &mut r),
        LayerParams::glorot(hidden, classes, &mut r),
    ]
}

/// Encoder forward pass `h = f(x)` with live weights.
pub fn forward_encoder(
    params: &ParamSet,
    batch: &Matrix,
    train_mode: bool,
    rng_seed: u64,
) -> Result<(Matrix, MlpCache)> {
    params
        .live
        .forward_encoder(&params.spec, batch, Mode::from_flag(train_mode, rng_seed))
}

pub fn backward_encoder(
    params: &ParamSet,
    cache: &MlpCache,
    grad_h: &Matrix,
    grads: &mut GradSet,
) -> Result<Matrix> {
    mlp_backward(
        &params.live.encoder,
        &params.spec.encoder_activations,
        cache,
        grad_h,
        &mut grads.encoder,
    )
}

/// Projection `z = g(h)` with unit-norm rows.
pub fn forward_projection(
    params: &ParamSet,
    h: &Matrix,
    train_mode: bool,
    rng_seed: u64,
) -> Result<(Matrix, ProjCache)> {
    params
        .live
        .forward_projection(&params.spec, h, Mode::from_flag(train_mode, rng_seed))
}

pub fn backward_projection(
    params: &ParamSet,
    cache: &ProjCache,
    grad_z: &Matrix,
    grads: &mut GradSet,
) -> Result<Matrix> {
    if grad_z.shape() != cache.z.shape() {
        return Err(Error::dim(
            "backward_projection",
            format!("{:?}", cache.z.shape()),
            format!("{:?}", grad_z.shape()),
        ));
    }
    let g_pre = l2_normalize_backward(&cache.z, &cache.norms, grad_z);
    mlp_backward(
        &params.live.proj_head,
        &NetSpec::head_activations(),
        &cache.mlp,
        &g_pre,
        &mut grads.proj_head,
    )
}

/// Classification logits `c(h)`.
pub fn forward_classifier(
    params: &ParamSet,
    h: &Matrix,
    train_mode: bool,
    rng_seed: u64,
) -> Result<(Matrix, MlpCache)> {
    params
        .live
        .forward_classifier(&params.spec, h, Mode::from_flag(train_mode, rng_seed))
}

pub fn backward_classifier(
    params: &ParamSet,
    cache: &MlpCache,
    grad_logits: &Matrix,
    grads: &mut GradSet,
) -> Result<Matrix> {
    mlp_backward(
        &params.live.cls_head,
        &NetSpec::head_activations(),
        cache,
        grad_logits,
        &mut grads.cls_head,
    )
}
