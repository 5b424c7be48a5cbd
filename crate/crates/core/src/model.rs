//! Two-branch network.
//!
//! The global branch runs a strided conv stack on the downsampled image,
//! feeds the resulting features `X` to gated attention and classifies
//! `GAP(X)` into `Y_g`. The instance branch crops the top attended regions
//! from the full-resolution image, runs one shared conv stack over every
//! patch, and the fusion head classifies the concatenation of the global
//! feature with `k` instance features (zero-padded when fewer patches are
//! found) into `Y_f`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{self, AttentionConfig, AttentionNodes, AttentionOutput, ConvVars, DilatedBlocks};
use crate::error::{Error, Result};
use crate::localizer::{self, InstanceBox, Localization, LocalizerConfig, PixelBox};
use crate::rng;
use crate::tensor::{ops, ConvGeometry, Tape, Tensor4, Var};

/// Strided 3×3 conv stack, each stage halving the spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    fn validate(&self, what: &str, min_output: usize) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::usage(format!("{what} backbone: stage channels must be non-empty and positive")));
        }
        if !self.input_size.is_multiple_of(self.total_stride()) {
            return Err(Error::usage(format!(
                "{what} backbone: input size {} is not divisible by total stride {}",
                self.input_size,
                self.total_stride()
            )));
        }
        if self.output_size() < min_output {
            return Err(Error::usage(format!(
                "{what} backbone: final feature map {}×{} is smaller than {min_output}×{min_output}",
                self.output_size(),
                self.output_size()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub image_channels: usize,
    pub global: BackboneConfig,
    pub instance_stages: Vec<usize>,
    pub dilation_rates: (usize, usize),
    /// Channel-average ablation: every attention gate fixed at 1.
    pub uniform_gates: bool,
    pub localizer: LocalizerConfig,
    /// Both branches see `(pixel − mean) / pixel_std`, where `mean` is
    /// `pixel_mean` or, when `None`, the per-channel mean of the image
    /// being processed.
    pub pixel_mean: Option<f64>,
    pub pixel_std: f64,
    /// `false` drops the instance branch; `Y_f` then equals `Y_g`.
    pub fusion: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 96-pixel input and patches, four stages of
    /// (8, 16, 32, 64) channels in both branches, four patches.
    pub fn desk(classes: usize) -> Self {
        Self {
            classes,
            image_channels: 3,
            global: BackboneConfig {
                stage_channels: alloc::vec![8, 16, 32, 64],
                input_size: 96,
            },
            instance_stages: alloc::vec![8, 16, 32, 64],
            dilation_rates: (2, 4),
            uniform_gates: false,
            localizer: LocalizerConfig::default(),
            pixel_mean: Some(0.5),
            pixel_std: 0.25,
            fusion: true,
        }
    }

    fn standardize(&self, mut t: Tensor4) -> Tensor4 {
        let inv = 1.0 / self.pixel_std;
        let plane = t.plane_len();
        for chunk in t.data_mut().chunks_mut(plane) {
            let mean = self.pixel_mean.unwrap_or_else(|| chunk.iter().sum::<f64>() / plane as f64);
            for v in chunk {
                *v = (*v - mean) * inv;
            }
        }
        t
    }

    pub fn instance_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.instance_stages.clone(),
            input_size: self.localizer.patch_size,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dilation_rates: self.dilation_rates,
            uniform_gates: self.uniform_gates,
            ..AttentionConfig::new(self.global.out_channels())
        }
    }

    /// Width of the fusion feature: `D_g + k · D_i`.
    pub fn fusion_width(&self) -> usize {
        self.global.out_channels() + self.localizer.top_k * self.instance_backbone().out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::usage("model: at least one class is required"));
        }
        if self.image_channels == 0 {
            return Err(Error::usage("model: image must have at least one channel"));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_std.is_finite() || self.pixel_mean.is_some_and(|m| !m.is_finite()) {
            return Err(Error::usage("model: pixel_std must be positive and both pixel statistics finite"));
        }
        self.global.validate("global", 3)?;
        self.attention().validate()?;
        self.localizer.validate()?;
        if self.fusion {
            self.instance_backbone().validate("instance", 1)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered named tensors, each with a same-shaped gradient slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor4>,
    grads: Vec<Tensor4>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor4) -> ParamId {
        self.grads.push(Tensor4::zeros(value.dims()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor4] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor4] {
        &self.grads
    }

    pub fn values_and_grads(&mut self) -> (&mut [Tensor4], &mut [Tensor4]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    global: Vec<ConvIds>,
    attention: [ConvIds; 2],
    instance: Vec<ConvIds>,
    global_head: LinearIds,
    fusion_head: Option<LinearIds>,
}

/// All trainable weights. The instance backbone is a single parameter set
/// applied to every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    store: ParamStore,
    layout: Layout,
}

enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, for convolutions followed by ReLU.
    He,
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn,
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: Option<&'a mut R>,
}

impl<R: Rng> Builder<'_, R> {
    fn tensor(&mut self, dims: [usize; 4], init: Init) -> Tensor4 {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Tensor4::zeros(dims);
        };
        let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
        let bound = match init {
            Init::He => libm::sqrt(6.0 / fan_in),
            Init::FanIn => libm::sqrt(1.0 / fan_in),
        };
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor4::new(dims, data).expect("dims match data length")
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, init: Init) -> ConvIds {
        let w = self.tensor([out_c, in_c, 3, 3], init);
        let weight = self.store.push(format!("{name}.weight"), w);
        let bias = self.store.push(format!("{name}.bias"), Tensor4::zeros([out_c, 1, 1, 1]));
        ConvIds { weight, bias }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinearIds {
        let w = self.tensor([out, inp, 1, 1], Init::FanIn);
        let weight = self.store.push(format!("{name}.weight"), w);
        let bias = self.store.push(format!("{name}.bias"), Tensor4::zeros([out, 1, 1, 1]));
        LinearIds { weight, bias }
    }

    fn stack(&mut self, prefix: &str, in_c: usize, stages: &[usize]) -> Vec<ConvIds> {
        let mut prev = in_c;
        stages
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let ids = self.conv(&format!("{prefix}.stage{i}"), c, prev, Init::He);
                prev = c;
                ids
            })
            .collect()
    }

    fn build(mut self, config: &ModelConfig) -> ModelParams {
        let global = self.stack("global", config.image_channels, &config.global.stage_channels);
        let c = config.global.out_channels();
        let attention = [
            self.conv("attention.block1", c, c, Init::FanIn),
            self.conv("attention.block2", c, c, Init::FanIn),
        ];
        let instance = if config.fusion {
            self.stack("instance", config.image_channels, &config.instance_stages)
        } else {
            Vec::new()
        };
        let global_head = self.linear("head.global", config.classes, c);
        let fusion_head = config
            .fusion
            .then(|| self.linear("head.fusion", config.classes, config.fusion_width()));
        ModelParams {
            store: self.store,
            layout: Layout {
                global,
                attention,
                instance,
                global_head,
                fusion_head,
            },
        }
    }
}

impl ModelParams {
    /// Random initialisation, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0x1417);
        Ok(Builder {
            store: ParamStore::default(),
            rng: Some(&mut rng),
        }
        .build(config))
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Builder::<rand_chacha::ChaCha8Rng> {
            store: ParamStore::default(),
            rng: None,
        }
        .build(config))
    }

    /// Rebuilds parameters from named arrays (e.g. a checkpoint), checking
    /// that names and shapes match `config` exactly.
    pub fn from_named(config: &ModelConfig, arrays: Vec<(String, Tensor4)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if arrays.len() != params.store.len() {
            return Err(Error::usage(format!(
                "parameter count mismatch: expected {}, found {}",
                params.store.len(),
                arrays.len()
            )));
        }
        for (i, (name, value)) in arrays.into_iter().enumerate() {
            if params.store.names[i] != name {
                return Err(Error::usage(format!(
                    "parameter {i}: expected '{}', found '{name}'",
                    params.store.names[i]
                )));
            }
            if params.store.values[i].dims() != value.dims() {
                return Err(Error::usage(format!("parameter '{name}': shape does not match the model config")));
            }
            params.store.values[i] = value;
        }
        Ok(params)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn global_head(&self) -> LinearIds {
        self.layout.global_head
    }

    pub fn fusion_head(&self) -> Option<LinearIds> {
        self.layout.fusion_head
    }

    pub fn attention_blocks(&self) -> [ConvIds; 2] {
        self.layout.attention
    }

    pub fn global_stages(&self) -> &[ConvIds] {
        &self.layout.global
    }

    pub fn instance_stages(&self) -> &[ConvIds] {
        &self.layout.instance
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.bind_as(tape, true, None)
    }

    /// Registers every parameter as a constant (forward only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Binding {
        self.bind_as(tape, false, None)
    }

    /// Like [`Self::bind_constant`], but `id` is replaced by an existing
    /// tape value. Used to differentiate with respect to one tensor.
    pub fn bind_with_override(&self, tape: &mut Tape, id: ParamId, var: Var) -> Binding {
        self.bind_as(tape, false, Some((id, var)))
    }

    fn bind_as(&self, tape: &mut Tape, track: bool, over: Option<(ParamId, Var)>) -> Binding {
        let vars = self
            .store
            .ids()
            .map(|id| match over {
                Some((o, v)) if o == id => v,
                _ if track => tape.param(self.store.value(id).clone()),
                _ => tape.constant(self.store.value(id).clone()),
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles of one model's parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, ids: ConvIds) -> ConvVars {
        ConvVars {
            weight: self.var(ids.weight),
            bias: self.var(ids.bias),
        }
    }
}

/// `[conv 3×3 stride 2, ReLU]` per stage.
pub fn backbone_forward(tape: &mut Tape, input: Var, stages: &[ConvVars]) -> Result<Var> {
    let total_stride = 1usize << stages.len();
    let dims = tape.value(input).dims();
    for (axis, len) in [("height", dims[2]), ("width", dims[3])] {
        if len % total_stride != 0 {
            return Err(Error::shape("backbone", axis, len.next_multiple_of(total_stride), len));
        }
    }
    let mut x = input;
    for s in stages {
        let y = tape.conv2d(x, s.weight, s.bias, ConvGeometry::new(2, 1, 1))?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Tape handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    /// Final global feature map `X`.
    pub features: Var,
    pub global_features: Var,
    pub logits_global: Var,
    pub logits_fusion: Var,
    pub attention: AttentionNodes,
    pub fusion_features: Option<Var>,
    pub localization: Option<Localization>,
}

fn check_image(image: &Tensor4, config: &ModelConfig) -> Result<()> {
    if image.n() != 1 {
        return Err(Error::shape("forward", "batch", 1, image.n()));
    }
    if image.c() != config.image_channels {
        return Err(Error::shape("forward", "channel", config.image_channels, image.c()));
    }
    if image.h() == 0 || image.w() == 0 {
        return Err(Error::usage("forward: empty image"));
    }
    Ok(())
}

/// Resamples the full image to the global branch's square input.
pub fn downsample(image: &Tensor4, size: usize) -> Result<Tensor4> {
    if image.h() == size && image.w() == size {
        return Ok(image.clone());
    }
    localizer::crop_resize(image, &PixelBox::new(0, 0, image.h(), image.w()), size)
}

/// Records the full two-branch forward on `tape`.
pub fn forward_graph(
    tape: &mut Tape,
    binding: &Binding,
    params: &ModelParams,
    image_full: &Tensor4,
    config: &ModelConfig,
) -> Result<ForwardGraph> {
    check_image(image_full, config)?;
    let layout = &params.layout;
    let small = downsample(image_full, config.global.input_size)?;
    let input = tape.constant(config.standardize(small));
    let global_convs: Vec<ConvVars> = layout.global.iter().map(|&c| binding.conv(c)).collect();
    let features = backbone_forward(tape, input, &global_convs)?;

    let blocks = DilatedBlocks {
        first: binding.conv(layout.attention[0]),
        second: binding.conv(layout.attention[1]),
    };
    let attention = attention::gated_attention(tape, features, &blocks, &config.attention())?;

    let global_features = tape.global_avg_pool(features)?;
    let head = layout.global_head;
    let logits_global = tape.linear(global_features, binding.var(head.weight), binding.var(head.bias))?;

    let Some(fusion_head) = layout.fusion_head.filter(|_| config.fusion) else {
        return Ok(ForwardGraph {
            features,
            global_features,
            logits_global,
            logits_fusion: logits_global,
            attention,
            fusion_features: None,
            localization: None,
        });
    };

    let image_dims = (image_full.h(), image_full.w());
    let loc = localizer::localize(tape.value(attention.attention), image_dims, &config.localizer)?;
    let k = config.localizer.top_k;
    let patch = config.localizer.patch_size;
    let patches = loc
        .pixel_boxes
        .iter()
        .take(k)
        .map(|b| localizer::crop_resize(image_full, b, patch).map(|t| config.standardize(t)))
        .collect::<Result<Vec<_>>>()?;
    let found = patches.len();
    let patch_batch = tape.constant(Tensor4::stack(&patches)?);
    let instance_convs: Vec<ConvVars> = layout.instance.iter().map(|&c| binding.conv(c)).collect();
    let inst_maps = backbone_forward(tape, patch_batch, &instance_convs)?;
    let inst_pooled = tape.global_avg_pool(inst_maps)?;
    let d_i = config.instance_backbone().out_channels();
    let inst_flat = tape.reshape(inst_pooled, [1, found * d_i, 1, 1])?;
    let mut parts = alloc::vec![global_features, inst_flat];
    if found < k {
        parts.push(tape.constant(Tensor4::zeros([1, (k - found) * d_i, 1, 1])));
    }
    let fusion_features = tape.concat_channels(&parts)?;
    let logits_fusion = tape.linear(
        fusion_features,
        binding.var(fusion_head.weight),
        binding.var(fusion_head.bias),
    )?;
    Ok(ForwardGraph {
        features,
        global_features,
        logits_global,
        logits_fusion,
        attention,
        fusion_features: Some(fusion_features),
        localization: Some(loc),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits_global: Vec<f64>,
    pub logits_fusion: Vec<f64>,
    /// Final global feature map `X`.
    pub features: Tensor4,
    pub attention: AttentionOutput,
    /// Selected boxes in attention-map cells; empty when fusion is off.
    pub boxes: Vec<InstanceBox>,
    /// The same boxes in full-image pixels.
    pub pixel_boxes: Vec<PixelBox>,
}

impl ForwardOutput {
    pub(crate) fn from_graph(tape: &Tape, graph: &ForwardGraph) -> Self {
        let loc = graph.localization.clone().unwrap_or(Localization {
            boxes: Vec::new(),
            pixel_boxes: Vec::new(),
        });
        Self {
            logits_global: tape.value(graph.logits_global).data().to_vec(),
            logits_fusion: tape.value(graph.logits_fusion).data().to_vec(),
            features: tape.value(graph.features).clone(),
            attention: graph.attention.output(tape),
            boxes: loc.boxes,
            pixel_boxes: loc.pixel_boxes,
        }
    }
}

pub fn forward(image_full: &Tensor4, params: &ModelParams, config: &ModelConfig) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let binding = params.bind_constant(&mut tape);
    let graph = forward_graph(&mut tape, &binding, params, image_full, config)?;
    Ok(ForwardOutput::from_graph(&tape, &graph))
}

/// Class decision and softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Argmax of softmax; ties go to the lowest class index.
pub fn predict_from_logits(logits: &[f64]) -> Prediction {
    let probabilities = ops::softmax(logits);
    let mut class = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[class] {
            class = i;
        }
    }
    Prediction { class, probabilities }
}

/// Classifies from `Y_f`.
pub fn predict(image_full: &Tensor4, params: &ModelParams, config: &ModelConfig) -> Result<Prediction> {
    Ok(predict_from_logits(&forward(image_full, params, config)?.logits_fusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy(fusion: bool) -> ModelConfig {
        ModelConfig {
            classes: 3,
            image_channels: 3,
            global: BackboneConfig {
                stage_channels: alloc::vec![4, 6],
                input_size: 16,
            },
            instance_stages: alloc::vec![4, 5],
            dilation_rates: (1, 2),
            uniform_gates: false,
            localizer: LocalizerConfig {
                top_k: 2,
                patch_size: 8,
                ..LocalizerConfig::default()
            },
            pixel_mean: None,
            pixel_std: 0.25,
            fusion,
        }
    }

    fn image(h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
            let v = libm::sin((c * 31 + y * 7 + x * 3) as f64 * 0.37);
            0.5 + 0.5 * v
        })
    }

    #[test]
    fn backbone_desk_shape() {
        let cfg = ModelConfig::desk(4);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let b = params.bind_constant(&mut tape);
        let x = tape.constant(Tensor4::full([1, 3, 96, 96], 0.5));
        let convs: Vec<_> = params.global_stages().iter().map(|&c| b.conv(c)).collect();
        let out = backbone_forward(&mut tape, x, &convs).unwrap();
        assert_eq!(tape.value(out).dims(), [1, 64, 6, 6]);
    }

    #[test]
    fn backbone_rejects_indivisible_input() {
        let cfg = ModelConfig::desk(4);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let b = params.bind_constant(&mut tape);
        let x = tape.constant(Tensor4::zeros([1, 3, 90, 96]));
        let convs: Vec<_> = params.global_stages().iter().map(|&c| b.conv(c)).collect();
        let err = backbone_forward(&mut tape, x, &convs).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "height", .. }));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = toy(true);
        let params = ModelParams::zeros(&cfg).unwrap();
        let out = forward(&image(24, 24), &params, &cfg).unwrap();
        assert!(out.attention.attention_map.data().iter().all(|&v| v == 0.0));
        assert!(out.logits_global.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attention_falls_back_to_whole_image_and_defines_fusion_logits() {
        let cfg = toy(true);
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        // Kill the last global stage so X, and therefore Ω, is identically zero.
        let last = *params.global_stages().last().unwrap();
        params.store_mut().value_mut(last.weight).data_mut().fill(0.0);
        params.store_mut().value_mut(last.bias).data_mut().fill(0.0);
        let img = image(24, 20);
        let out = forward(&img, &params, &cfg).unwrap();
        assert!(out.attention.attention_map.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.pixel_boxes, alloc::vec![PixelBox::new(0, 0, 24, 20)]);
        assert_eq!(out.logits_fusion.len(), 3);
        assert!(out.logits_fusion.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standardization_modes() {
        let img = Tensor4::from_fn([1, 2, 2, 2], |_, c, y, x| 0.25 * (c + y + x) as f64);
        let fixed = ModelConfig::desk(2).standardize(img.clone());
        assert_eq!(fixed.at(0, 0, 0, 0), -2.0);
        assert_eq!(fixed.at(0, 1, 1, 1), 1.0);
        let per_image = ModelConfig { pixel_mean: None, ..ModelConfig::desk(2) }.standardize(img);
        for c in 0..2 {
            assert!(per_image.plane(0, c).iter().sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(per_image.at(0, 0, 0, 0), -1.0);
    }

    #[test]
    fn fusion_width_is_fixed() {
        let cfg = toy(true);
        let params = ModelParams::init(&cfg, 5).unwrap();
        for seed in 0..4u64 {
            let img = Tensor4::from_fn([1, 3, 24, 24], |_, c, y, x| {
                libm::cos((seed as usize * 17 + c * 5 + y * x) as f64).abs()
            });
            let mut tape = Tape::new();
            let b = params.bind_constant(&mut tape);
            let g = forward_graph(&mut tape, &b, &params, &img, &cfg).unwrap();
            let ff = tape.value(g.fusion_features.unwrap());
            assert_eq!(ff.item_len(), cfg.fusion_width());
            assert_eq!(cfg.fusion_width(), 6 + 2 * 5);
        }
    }

    #[test]
    fn global_logits_do_not_depend_on_fusion() {
        let img = image(24, 24);
        let with = toy(true);
        let params = ModelParams::init(&with, 9).unwrap();
        let a = forward(&img, &params, &with).unwrap();
        let mut without = with.clone();
        without.fusion = false;
        let b = forward(&img, &params, &without).unwrap();
        assert_eq!(a.logits_global, b.logits_global);
        assert_eq!(b.logits_fusion, b.logits_global);
    }

    #[test]
    fn predict_tie_and_peak() {
        let p = predict_from_logits(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.class, 0);
        for &q in &p.probabilities {
            assert_abs_diff_eq!(q, 0.25, epsilon = 1e-15);
        }
        let p = predict_from_logits(&[0.0, 10.0, 0.0, 0.0]);
        assert_eq!(p.class, 1);
        let expected = libm::exp(10.0) / (libm::exp(10.0) + 3.0);
        assert_abs_diff_eq!(p.probabilities[1], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probabilities[1], 0.99986, epsilon = 1e-5);
        let shifted = predict_from_logits(&[7.0, 17.0, 7.0, 7.0]);
        assert_eq!(shifted.class, 1);
    }

    #[test]
    fn checkpoint_names_are_validated() {
        let cfg = toy(true);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let arrays: Vec<_> = params.store().named().map(|(n, t)| (String::from(n), t.clone())).collect();
        let back = ModelParams::from_named(&cfg, arrays.clone()).unwrap();
        assert_eq!(back, params);
        let mut renamed = arrays.clone();
        renamed[0].0 = String::from("bogus");
        assert!(ModelParams::from_named(&cfg, renamed).is_err());
        assert!(ModelParams::from_named(&cfg, arrays[1..].to_vec()).is_err());
    }

    #[test]
    fn shared_backbone_is_one_parameter_set() {
        let cfg = toy(true);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let instance_names: Vec<_> = params
            .store()
            .named()
            .filter(|(n, _)| n.starts_with("instance."))
            .map(|(n, _)| n)
            .collect();
        assert_eq!(instance_names.len(), 2 * cfg.instance_stages.len());
    }

    #[test]
    fn config_rejects_tiny_attention_map() {
        let mut cfg = toy(true);
        cfg.global.input_size = 8;
        assert!(cfg.validate().is_err());
    }
}

