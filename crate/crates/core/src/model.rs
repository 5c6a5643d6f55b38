//! The two-path residual recurrent regressor.
//!
//! A convolutional trunk embeds every frame; a linear head turns each
//! embedding into a preliminary per-region estimate. The recurrent path runs a
//! temporal LSTM over frames (hidden width = number of regions), transposes the
//! result, runs a spatial LSTM over regions (hidden width = number of frames)
//! and transposes back. Residual variants add the two paths.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, BoundLstm, CircleConfig, ConvBlockParams, FcParams, InitScheme, LstmCellParams, ParamKind,
    ParamTree,
};
use crate::tensor::{Tape, Tensor, Var};

/// Region names in traversal order (counter-clockwise from inferoseptal).
pub const REGIONS: [&str; 6] = ["IS", "I", "IL", "AL", "A", "AS"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Trunk plus linear head only.
    Cnn,
    /// Temporal then spatial recurrence, zero initial state.
    RnnPlain,
    /// Temporal then spatial recurrence, circular.
    RnnCircle,
    /// Linear head plus zero-state recurrent residual.
    ResRnnPlain,
    /// Linear head plus circular recurrent residual.
    ResRnnCircle,
    /// Temporal recurrence alone, zero initial state.
    TemporalPlain,
    /// Temporal recurrence alone, circular.
    TemporalCircle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Cnn,
        Variant::RnnPlain,
        Variant::RnnCircle,
        Variant::ResRnnPlain,
        Variant::ResRnnCircle,
        Variant::TemporalPlain,
        Variant::TemporalCircle,
    ];

    /// The five columns of the architecture comparison table.
    pub const ABLATION: [Variant; 5] = [
        Variant::Cnn,
        Variant::RnnPlain,
        Variant::RnnCircle,
        Variant::ResRnnPlain,
        Variant::ResRnnCircle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::RnnPlain => "rnn-plain",
            Variant::RnnCircle => "rnn-circle",
            Variant::ResRnnPlain => "resrnn-plain",
            Variant::ResRnnCircle => "resrnn-circle",
            Variant::TemporalPlain => "temporal-plain",
            Variant::TemporalCircle => "temporal-circle",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Cnn => "CNN",
            Variant::RnnPlain => "RNN (plain)",
            Variant::RnnCircle => "RNN (circle)",
            Variant::ResRnnPlain => "ResRNN (plain)",
            Variant::ResRnnCircle => "ResRNN (circle)",
            Variant::TemporalPlain => "Temporal RNN (plain)",
            Variant::TemporalCircle => "Temporal RNN (circle)",
        }
    }

    pub fn uses_head(self) -> bool {
        matches!(self, Variant::Cnn | Variant::ResRnnPlain | Variant::ResRnnCircle)
    }

    pub fn uses_temporal(self) -> bool {
        self != Variant::Cnn
    }

    pub fn uses_spatial(self) -> bool {
        matches!(
            self,
            Variant::RnnPlain | Variant::RnnCircle | Variant::ResRnnPlain | Variant::ResRnnCircle
        )
    }

    pub fn circular(self) -> bool {
        matches!(
            self,
            Variant::RnnCircle | Variant::ResRnnCircle | Variant::TemporalCircle
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(kernels: usize, size: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            kernels,
            size,
            stride,
            pad,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResRnnConfig {
    pub frames: usize,
    pub regions: usize,
    pub input_size: usize,
    pub conv: [ConvSpec; 3],
    pub embed_dim: usize,
    pub temporal_depth: CircleConfig,
    pub spatial_depth: CircleConfig,
    pub variant: Variant,
    /// Record trunk parameters as constants so only the heads train.
    pub freeze_trunk: bool,
}

impl Default for ResRnnConfig {
    fn default() -> Self {
        ResRnnConfig {
            frames: 20,
            regions: 6,
            input_size: 75,
            conv: [
                ConvSpec::new(8, 5, 1, 0),
                ConvSpec::new(16, 5, 1, 0),
                ConvSpec::new(32, 3, 1, 0),
            ],
            embed_dim: 100,
            temporal_depth: CircleConfig::new(20).unwrap(),
            spatial_depth: CircleConfig::new(6).unwrap(),
            variant: Variant::ResRnnCircle,
            freeze_trunk: false,
        }
    }
}

impl ResRnnConfig {
    /// The small configuration used for whole-model gradient checks.
    pub fn toy() -> Self {
        ResRnnConfig {
            frames: 3,
            regions: 2,
            input_size: 10,
            conv: [
                ConvSpec::new(2, 3, 1, 1),
                ConvSpec::new(3, 3, 1, 1),
                ConvSpec::new(3, 3, 1, 1),
            ],
            embed_dim: 5,
            temporal_depth: CircleConfig::new(2).unwrap(),
            spatial_depth: CircleConfig::new(2).unwrap(),
            variant: Variant::ResRnnCircle,
            freeze_trunk: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Temporal hidden width: one unit per region.
    pub fn temporal_hidden(&self) -> usize {
        self.regions
    }

    /// Spatial hidden width: one unit per frame.
    pub fn spatial_hidden(&self) -> usize {
        self.frames
    }

    /// Flattened trunk output length, validating the conv/pool chain.
    pub fn flat_features(&self) -> Result<usize> {
        if self.frames == 0 || self.regions == 0 || self.embed_dim == 0 {
            return Err(Error::Config("frames, regions and embed_dim must be positive".into()));
        }
        let mut side = self.input_size;
        let mut channels = 1;
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernels == 0 || c.size == 0 || c.stride == 0 {
                return Err(Error::Config(format!("conv{} has a zero extent", i + 1)));
            }
            if side + 2 * c.pad < c.size {
                return Err(Error::Config(format!(
                    "conv{}: kernel {} exceeds padded input {}",
                    i + 1,
                    c.size,
                    side + 2 * c.pad
                )));
            }
            side = (side + 2 * c.pad - c.size) / c.stride + 1;
            if side < 2 {
                return Err(Error::Config(format!("conv{} output {side} too small to pool", i + 1)));
            }
            side /= 2;
            channels = c.kernels;
        }
        Ok(channels * side * side)
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ResRnnParams<T = Tensor> {
    pub conv: [ConvBlockParams<T>; 3],
    pub fc1: FcParams<T>,
    pub fc2: FcParams<T>,
    pub temporal: LstmCellParams<T>,
    pub spatial: LstmCellParams<T>,
}

const CONV_NAMES: [&str; 3] = ["conv1", "conv2", "conv3"];

impl<T> ParamTree<T> for ResRnnParams<T> {
    type Out<U> = ResRnnParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> ResRnnParams<U> {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        let conv = [
            self.conv[0].map_named(&p(CONV_NAMES[0]), f),
            self.conv[1].map_named(&p(CONV_NAMES[1]), f),
            self.conv[2].map_named(&p(CONV_NAMES[2]), f),
        ];
        ResRnnParams {
            conv,
            fc1: self.fc1.map_named(&p("fc1"), f),
            fc2: self.fc2.map_named(&p("fc2"), f),
            temporal: self.temporal.map_named(&p("temporal"), f),
            spatial: self.spatial.map_named(&p("spatial"), f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        for (c, name) in self.conv.iter().zip(CONV_NAMES) {
            c.visit(&p(name), f);
        }
        self.fc1.visit(&p("fc1"), f);
        self.fc2.visit(&p("fc2"), f);
        self.temporal.visit(&p("temporal"), f);
        self.spatial.visit(&p("spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        for (c, name) in self.conv.iter_mut().zip(CONV_NAMES) {
            c.visit_mut(&p(name), f);
        }
        self.fc1.visit_mut(&p("fc1"), f);
        self.fc2.visit_mut(&p("fc2"), f);
        self.temporal.visit_mut(&p("temporal"), f);
        self.spatial.visit_mut(&p("spatial"), f);
    }
}

impl ResRnnParams {
    pub fn init(cfg: &ResRnnConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        let flat = cfg.flat_features()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 1;
        let conv = cfg.conv.map(|c| {
            let p = nn::init_conv(in_ch, c.kernels, c.size, c.stride, c.pad, scheme, &mut rng);
            in_ch = c.kernels;
            p
        });
        Ok(ResRnnParams {
            conv,
            fc1: nn::init_fc(flat, cfg.embed_dim, scheme, &mut rng),
            fc2: nn::init_fc(cfg.embed_dim, cfg.regions, scheme, &mut rng),
            temporal: nn::init_lstm(cfg.embed_dim, cfg.temporal_hidden(), scheme, &mut rng),
            spatial: nn::init_lstm(cfg.frames, cfg.spatial_hidden(), scheme, &mut rng),
        })
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ResRnnConfig) -> Result<()> {
        let flat = cfg.flat_features()?;
        let mut in_ch = 1;
        for (i, (p, c)) in self.conv.iter().zip(&cfg.conv).enumerate() {
            if p.kernels.shape() != [c.kernels, in_ch, c.size, c.size]
                || p.bias.shape() != [c.kernels]
                || p.stride != c.stride
                || p.pad != c.pad
            {
                return Err(Error::Config(format!("conv{} parameters do not match the config", i + 1)));
            }
            in_ch = c.kernels;
        }
        let fc_ok = |p: &FcParams, i: usize, o: usize| p.weight.shape() == [o, i] && p.bias.shape() == [o];
        if !fc_ok(&self.fc1, flat, cfg.embed_dim) {
            return Err(Error::Config("fc1 parameters do not match the config".into()));
        }
        if !fc_ok(&self.fc2, cfg.embed_dim, cfg.regions) {
            return Err(Error::Config("fc2 parameters do not match the config".into()));
        }
        self.temporal.validate()?;
        self.spatial.validate()?;
        if self.temporal.input_dim() != cfg.embed_dim || self.temporal.hidden_dim() != cfg.temporal_hidden() {
            return Err(Error::Config(format!(
                "temporal cell must map {} → {} (one unit per region)",
                cfg.embed_dim,
                cfg.temporal_hidden()
            )));
        }
        if self.spatial.input_dim() != cfg.frames || self.spatial.hidden_dim() != cfg.spatial_hidden() {
            return Err(Error::Config(format!(
                "spatial cell must map {} → {} (one unit per frame)",
                cfg.frames,
                cfg.spatial_hidden()
            )));
        }
        let mut finite = true;
        self.visit("", &mut |_, _, t| finite &= t.is_finite());
        if !finite {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.len());
        n
    }
}

/// Frame-by-region thickness matrix in normalised units, columns in
/// [`REGIONS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RwtMatrix {
    frames: usize,
    regions: usize,
    values: Vec<f64>,
}

impl RwtMatrix {
    pub fn new(frames: usize, regions: usize, values: Vec<f64>) -> Result<Self> {
        if frames * regions != values.len() || frames == 0 || regions == 0 {
            return Err(Error::shape(
                "rwt",
                format!("{frames}×{regions} matrix cannot hold {} values", values.len()),
            ));
        }
        Ok(RwtMatrix {
            frames,
            regions,
            values,
        })
    }

    pub fn zeros(frames: usize, regions: usize) -> Self {
        RwtMatrix {
            frames,
            regions,
            values: vec![0.0; frames * regions],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [f, l] => RwtMatrix::new(*f, *l, t.data().to_vec()),
            s => Err(Error::shape("rwt", format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.regions], self.values.clone()).expect("consistent by construction")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn get(&self, frame: usize, region: usize) -> f64 {
        self.values[frame * self.regions + region]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Whether `name` belongs to the convolutional trunk or the embedding layer.
pub fn is_trunk_param(name: &str) -> bool {
    name.starts_with("conv") || name.starts_with("fc1.")
}

/// Model parameters recorded on a tape.
pub struct BoundModel {
    pub vars: ResRnnParams<Var>,
    temporal: BoundLstm,
    spatial: BoundLstm,
}

impl BoundModel {
    /// Records `params` on `tape`. Trunk parameters are constants when the
    /// config freezes the trunk; everything else is tracked iff `tracked`.
    pub fn bind(tape: &mut Tape, params: &ResRnnParams, cfg: &ResRnnConfig, tracked: bool) -> Result<Self> {
        params.validate(cfg)?;
        let vars = params.map_named("", &mut |name, _, t| {
            if tracked && !(is_trunk_param(name) && cfg.freeze_trunk) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        let temporal = BoundLstm::from_vars(tape, &vars.temporal)?;
        let spatial = BoundLstm::from_vars(tape, &vars.spatial)?;
        Ok(BoundModel {
            vars,
            temporal,
            spatial,
        })
    }
}

/// Output of one forward pass with the intermediate paths kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embeddings: Var,
    pub head: Option<Var>,
    pub residual: Option<Var>,
    pub output: Var,
}

/// Embeds a stack of frames `N × 1 × S × S` into `N × embed_dim`.
pub fn cnn_embed_on(tape: &mut Tape, model: &BoundModel, frames: Var) -> Result<Var> {
    let mut x = frames;
    for block in &model.vars.conv {
        x = nn::conv_block(tape, block, x)?;
    }
    let n = tape.value(x).shape()[0];
    let flat = tape.value(x).len() / n;
    let x = tape.reshape(x, &[n, flat])?;
    let e = nn::fc_forward(tape, &model.vars.fc1, x)?;
    Ok(tape.relu(e))
}

/// Preliminary per-frame estimate `N × regions` from embeddings.
pub fn cnn_estimate_on(tape: &mut Tape, model: &BoundModel, embeddings: Var) -> Result<Var> {
    nn::fc_forward(tape, &model.vars.fc2, embeddings)
}

fn run(tape: &mut Tape, cell: &BoundLstm, inputs: &[Var], circle: Option<CircleConfig>) -> Result<Vec<Var>> {
    match circle {
        Some(c) => nn::rnn_run_circle(tape, cell, inputs, c),
        None => nn::rnn_run_plain(tape, cell, inputs),
    }
}

/// Temporal recurrence over frames: `F × embed` → `F × regions`.
pub fn temporal_on(tape: &mut Tape, model: &BoundModel, embeddings: Var, cfg: &ResRnnConfig) -> Result<Var> {
    let frames = tape.value(embeddings).shape()[0];
    if frames != cfg.frames {
        return Err(Error::shape(
            "temporal",
            format!("expected {} embeddings, got {frames}", cfg.frames),
        ));
    }
    let rows = (0..frames)
        .map(|f| tape.slice_row(embeddings, f))
        .collect::<Result<Vec<_>>>()?;
    let circle = cfg.variant.circular().then_some(cfg.temporal_depth);
    let hs = run(tape, &model.temporal, &rows, circle)?;
    tape.concat_rows(&hs)
}

/// Full recurrent residual: temporal pass, transpose, spatial pass over
/// regions, transpose back. Returns `F × regions`.
pub fn rnn_residual_on(tape: &mut Tape, model: &BoundModel, embeddings: Var, cfg: &ResRnnConfig) -> Result<Var> {
    let temporal = temporal_on(tape, model, embeddings, cfg)?;
    let by_region = tape.transpose2d(temporal)?;
    let rows = (0..cfg.regions)
        .map(|l| tape.slice_row(by_region, l))
        .collect::<Result<Vec<_>>>()?;
    let circle = cfg.variant.circular().then_some(cfg.spatial_depth);
    let hs = run(tape, &model.spatial, &rows, circle)?;
    let stacked = tape.concat_rows(&hs)?;
    tape.transpose2d(stacked)
}

/// Dispatches on the configured variant. `frames` is `F × 1 × S × S`.
pub fn forward_on(tape: &mut Tape, model: &BoundModel, frames: Var, cfg: &ResRnnConfig) -> Result<ForwardVars> {
    let shape = tape.value(frames).shape();
    if shape != [cfg.frames, 1, cfg.input_size, cfg.input_size] {
        return Err(Error::shape(
            "forward",
            format!(
                "expected {}×1×{}×{} frames, got {shape:?}",
                cfg.frames, cfg.input_size, cfg.input_size
            ),
        ));
    }
    let embeddings = cnn_embed_on(tape, model, frames)?;
    let head = if cfg.variant.uses_head() {
        Some(cnn_estimate_on(tape, model, embeddings)?)
    } else {
        None
    };
    let residual = if cfg.variant.uses_spatial() {
        Some(rnn_residual_on(tape, model, embeddings, cfg)?)
    } else if cfg.variant.uses_temporal() {
        Some(temporal_on(tape, model, embeddings, cfg)?)
    } else {
        None
    };
    let output = match (head, residual) {
        (Some(h), Some(r)) => tape.add(h, r)?,
        (Some(h), None) => h,
        (None, Some(r)) => r,
        (None, None) => unreachable!("every variant has at least one path"),
    };
    Ok(ForwardVars {
        embeddings,
        head,
        residual,
        output,
    })
}

/// Stacks equally sized square frames into an `F × 1 × S × S` tensor.
pub fn stack_frames(frames: &[Vec<f64>], size: usize) -> Result<Tensor> {
    if frames.iter().any(|f| f.len() != size * size) {
        return Err(Error::shape("frames", format!("every frame must be {size}×{size}")));
    }
    Tensor::new(vec![frames.len(), 1, size, size], frames.concat())
}

/// Eager forward pass without gradient tracking.
pub fn forward(params: &ResRnnParams, frames: &Tensor, cfg: &ResRnnConfig) -> Result<RwtMatrix> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, cfg, false)?;
    let x = tape.constant(frames.clone());
    let out = forward_on(&mut tape, &model, x, cfg)?;
    RwtMatrix::from_tensor(tape.value(out.output))
}

/// Embedding of a single `1 × S × S` frame.
pub fn cnn_embed(params: &ResRnnParams, frame: &Tensor, cfg: &ResRnnConfig) -> Result<Vec<f64>> {
    if frame.shape() != [1, cfg.input_size, cfg.input_size] {
        return Err(Error::shape(
            "cnn_embed",
            format!("expected 1×{s}×{s}, got {:?}", frame.shape(), s = cfg.input_size),
        ));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, cfg, false)?;
    let x = tape.constant(frame.clone().reshaped(vec![1, 1, cfg.input_size, cfg.input_size])?);
    let e = cnn_embed_on(&mut tape, &model, x)?;
    Ok(tape.value(e).data().to_vec())
}

/// Preliminary estimate from one embedding.
pub fn cnn_estimate(params: &ResRnnParams, embedding: &[f64], cfg: &ResRnnConfig) -> Result<Vec<f64>> {
    if embedding.len() != cfg.embed_dim {
        return Err(Error::shape(
            "cnn_estimate",
            format!("expected {} features, got {}", cfg.embed_dim, embedding.len()),
        ));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, cfg, false)?;
    let e = tape.constant(Tensor::row(embedding.to_vec())?);
    let y = cnn_estimate_on(&mut tape, &model, e)?;
    Ok(tape.value(y).data().to_vec())
}

/// Recurrent residual from `F` embeddings (rows of an `F × embed` matrix).
pub fn rnn_residual(params: &ResRnnParams, embeddings: &Tensor, cfg: &ResRnnConfig) -> Result<RwtMatrix> {
    if embeddings.shape() != [cfg.frames, cfg.embed_dim] {
        return Err(Error::shape(
            "rnn_residual",
            format!("expected {}×{} embeddings, got {:?}", cfg.frames, cfg.embed_dim, embeddings.shape()),
        ));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, cfg, false)?;
    let e = tape.constant(embeddings.clone());
    let r = rnn_residual_on(&mut tape, &model, e, cfg)?;
    RwtMatrix::from_tensor(tape.value(r))
}
