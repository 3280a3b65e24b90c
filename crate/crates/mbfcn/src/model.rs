//! The detector network: a small four-stage backbone emitting C2-C5 feature
//! maps at strides {4, 8, 16, 16}, branch-specific skip-connection fusion,
//! and per-branch classification/regression heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{bilinear_filler, Element, Tensor};

/// Backbone stage outputs available for skip connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceLayer {
    C2,
    C3,
    C4,
    C5,
}

impl SourceLayer {
    pub const ALL: [SourceLayer; 4] = [
        SourceLayer::C2,
        SourceLayer::C3,
        SourceLayer::C4,
        SourceLayer::C5,
    ];

    /// Output stride relative to the input image. C5 keeps stride 16: its
    /// stage uses stride-1 dilated convolutions instead of downsampling.
    pub fn stride(self) -> usize {
        match self {
            SourceLayer::C2 => 4,
            SourceLayer::C3 => 8,
            SourceLayer::C4 => 16,
            SourceLayer::C5 => 16,
        }
    }

    pub fn index(self) -> usize {
        match self {
            SourceLayer::C2 => 0,
            SourceLayer::C3 => 1,
            SourceLayer::C4 => 2,
            SourceLayer::C5 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceLayer::C2 => "C2",
            SourceLayer::C3 => "C3",
            SourceLayer::C4 => "C4",
            SourceLayer::C5 => "C5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "C2" | "c2" => Ok(SourceLayer::C2),
            "C3" | "c3" => Ok(SourceLayer::C3),
            "C4" | "c4" => Ok(SourceLayer::C4),
            "C5" | "c5" => Ok(SourceLayer::C5),
            other => Err(Error::Config(format!(
                "unknown backbone layer '{other}' (expected C2..C5)"
            ))),
        }
    }
}

/// Four-stage backbone layout.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel width of each stage C2..C5.
    pub widths: [usize; 4],
    pub convs_per_stage: usize,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [16, 32, 64, 64],
            convs_per_stage: 2,
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.convs_per_stage == 0 {
            return Err(Error::Config("backbone needs at least one conv per stage".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "backbone kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone stage widths must be positive".into()));
        }
        Ok(())
    }
}

/// One detection branch: which stage outputs it fuses, at which stride, and
/// which anchors it predicts.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub sources: Vec<SourceLayer>,
    pub target_stride: usize,
    pub head_dim: usize,
    pub anchor_sizes: Vec<f32>,
    pub anchor_ratios: Vec<f32>,
}

impl BranchConfig {
    pub fn new(sources: Vec<SourceLayer>, target_stride: usize, anchor_sizes: Vec<f32>) -> Self {
        BranchConfig {
            sources,
            target_stride,
            head_dim: 64,
            anchor_sizes,
            anchor_ratios: vec![1.0],
        }
    }

    /// Anchors per feature-map cell.
    pub fn slots(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("branch has no source layers".into()));
        }
        if !matches!(self.target_stride, 4 | 8 | 16 | 32) {
            return Err(Error::Config(format!(
                "branch target stride {} must be one of 4/8/16/32",
                self.target_stride
            )));
        }
        for &s in &self.sources {
            let (a, b) = (s.stride(), self.target_stride);
            let ratio = if a > b { a / b } else { b / a };
            if !ratio.is_power_of_two() || a.max(b) % a.min(b) != 0 {
                return Err(Error::Config(format!(
                    "stride {} of {} is not a power-of-two factor from target {}",
                    a,
                    s.name(),
                    b
                )));
            }
        }
        if self.anchor_sizes.is_empty() {
            return Err(Error::Config("branch has no anchor sizes".into()));
        }
        if self.anchor_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "anchor sizes must be strictly increasing, got {:?}",
                self.anchor_sizes
            )));
        }
        if self.anchor_ratios.is_empty() {
            return Err(Error::Config("branch has no anchor ratios".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("branch head_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Full detector layout. The default is the two-branch model: a fine branch
/// fusing C3+C4+C5 at stride 8 and a coarse branch fusing C4+C5 at stride 16.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub branches: Vec<BranchConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            branches: vec![
                BranchConfig::new(
                    vec![SourceLayer::C3, SourceLayer::C4, SourceLayer::C5],
                    8,
                    vec![12.0, 16.0, 24.0, 32.0, 48.0],
                ),
                BranchConfig::new(
                    vec![SourceLayer::C4, SourceLayer::C5],
                    16,
                    vec![64.0, 96.0, 128.0, 192.0],
                ),
            ],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.branches.is_empty() {
            return Err(Error::Config("model needs at least one branch".into()));
        }
        for b in &self.branches {
            b.validate()?;
        }
        Ok(())
    }

    /// Channel count of a branch's fused feature map.
    pub fn fused_channels(&self, branch: &BranchConfig) -> usize {
        branch
            .sources
            .iter()
            .map(|s| self.backbone.widths[s.index()])
            .sum()
    }

    /// Up-sampling factors any branch needs, ascending and deduplicated.
    pub fn upsample_factors(&self) -> Vec<usize> {
        let mut factors: Vec<usize> = Vec::new();
        for b in &self.branches {
            for &s in &b.sources {
                if s.stride() > b.target_stride {
                    let f = s.stride() / b.target_stride;
                    if !factors.contains(&f) {
                        factors.push(f);
                    }
                }
            }
        }
        factors.sort_unstable();
        factors
    }
}

/// A named parameter tensor; fixed resampling kernels are not trainable.
#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// All network parameters, in a stable order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<E: Element> {
    pub entries: Vec<ParamEntry<E>>,
}

impl<E: Element> ModelParams<E> {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.index(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        match self.index(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::Config(format!("missing parameter tensor '{name}'"))),
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if e.trainable {
                e.tensor.zero_grad();
            }
        }
    }

    pub fn cast<F: Element>(&self) -> ModelParams<F> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Checks that every tensor the config's forward pass will look up exists
    /// with the expected shape.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, shape) in expected_shapes(cfg) {
            let t = self.get(&name)?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Per-conv (stride, dilation) schedule of one backbone stage. C2 absorbs a
/// total factor of 4, C3/C4 a factor of 2 on their first conv, and C5 runs
/// dilated at stride 1 so it keeps C4's resolution.
fn stage_schedule(stage: usize, convs: usize) -> Vec<(usize, usize)> {
    let mut plan = Vec::with_capacity(convs);
    match stage {
        0 => {
            if convs == 1 {
                plan.push((4, 1));
            } else {
                plan.push((2, 1));
                plan.push((2, 1));
                plan.extend(std::iter::repeat((1, 1)).take(convs - 2));
            }
        }
        1 | 2 => {
            plan.push((2, 1));
            plan.extend(std::iter::repeat((1, 1)).take(convs - 1));
        }
        _ => plan.extend(std::iter::repeat((1, 2)).take(convs)),
    }
    plan
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, [usize; 4])> {
    let mut out = Vec::new();
    let k = cfg.backbone.kernel;
    let mut in_ch = 3;
    for (stage, layer) in SourceLayer::ALL.iter().enumerate() {
        let width = cfg.backbone.widths[stage];
        for conv in 0..cfg.backbone.convs_per_stage {
            let name = format!("backbone.{}.conv{}", layer.name().to_lowercase(), conv);
            out.push((format!("{name}.weight"), [width, in_ch, k, k]));
            out.push((format!("{name}.bias"), [1, width, 1, 1]));
            in_ch = width;
        }
    }
    for (bi, branch) in cfg.branches.iter().enumerate() {
        let fused = cfg.fused_channels(branch);
        let a = branch.slots();
        out.push((
            format!("branch{bi}.reduce.weight"),
            [branch.head_dim, fused, 1, 1],
        ));
        out.push((format!("branch{bi}.reduce.bias"), [1, branch.head_dim, 1, 1]));
        out.push((
            format!("branch{bi}.cls.weight"),
            [2 * a, branch.head_dim, 1, 1],
        ));
        out.push((format!("branch{bi}.cls.bias"), [1, 2 * a, 1, 1]));
        out.push((
            format!("branch{bi}.reg.weight"),
            [4 * a, branch.head_dim, 1, 1],
        ));
        out.push((format!("branch{bi}.reg.bias"), [1, 4 * a, 1, 1]));
    }
    for f in cfg.upsample_factors() {
        let kf = 2 * f - (f % 2);
        out.push((format!("filler.f{f}"), [1, 1, kf, kf]));
    }
    out
}

/// Initial bias value for every layer.
pub const BIAS_INIT: f64 = 0.1;
/// Standard deviation of the Gaussian weight initializer.
pub const WEIGHT_STD: f64 = 0.01;

/// Creates all parameters: weights drawn from N(0, 0.01^2) in a fixed order
/// from the seeded generator, biases at 0.1, and the fixed bilinear kernels.
pub fn build_model<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, WEIGHT_STD).expect("valid std");
    let mut params = ModelParams { entries: Vec::new() };

    for (name, shape) in expected_shapes(cfg) {
        if let Some(rest) = name.strip_prefix("filler.f") {
            let f: usize = rest.parse().expect("factor name");
            params.entries.push(ParamEntry {
                name,
                tensor: bilinear_filler::<E>(f)?,
                trainable: false,
            });
        } else if name.ends_with(".bias") {
            params.entries.push(ParamEntry {
                name,
                tensor: Tensor::full(shape, E::from_f64(BIAS_INIT)),
                trainable: true,
            });
        } else {
            let len: usize = shape.iter().product();
            let data: Vec<E> = (0..len)
                .map(|_| E::from_f64(normal.sample(&mut rng)))
                .collect();
            params.entries.push(ParamEntry {
                name,
                tensor: Tensor::new(shape, data)?,
                trainable: true,
            });
        }
    }
    Ok(params)
}

/// Parameter handles staged onto a tape, aligned with `ModelParams::entries`.
pub struct StagedParams {
    vars: Vec<Var>,
}

impl StagedParams {
    pub fn var(&self, params: &ModelParams<impl Element>, name: &str) -> Result<Var> {
        params
            .index(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Copies every parameter onto the tape; trainable entries request gradients
/// when `with_grads` is set.
pub fn stage_params<E: Element>(
    tape: &mut Tape<E>,
    params: &ModelParams<E>,
    with_grads: bool,
) -> StagedParams {
    let vars = params
        .entries
        .iter()
        .map(|e| tape.leaf(e.tensor.clone(), with_grads && e.trainable))
        .collect();
    StagedParams { vars }
}

/// Counters for the single-pass and image-pyramid cost claims.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassStats {
    /// Convolutions executed inside the backbone (shared across branches).
    pub backbone_convs: usize,
    /// Full backbone passes (one per pyramid scale).
    pub backbone_passes: usize,
}

/// Runs the shared backbone. The image must be (1, 3, h, w) with h and w
/// multiples of 16; `preprocess` pads inputs accordingly.
pub fn extract_features<E: Element>(
    tape: &mut Tape<E>,
    image: Var,
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    staged: &StagedParams,
    stats: &mut PassStats,
) -> Result<[Var; 4]> {
    let shape = tape.value(image).shape();
    let [n, c, h, w] = shape;
    if n != 1 || c != 3 {
        return Err(Error::Config(format!(
            "backbone expects a (1, 3, h, w) image, got {shape:?}"
        )));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "backbone input {h}x{w} must be padded to multiples of 16"
        )));
    }

    let k = cfg.backbone.kernel;
    let mut x = image;
    let mut features = [image; 4];
    for (stage, layer) in SourceLayer::ALL.iter().enumerate() {
        for (conv, (stride, dilation)) in stage_schedule(stage, cfg.backbone.convs_per_stage)
            .into_iter()
            .enumerate()
        {
            let base = format!("backbone.{}.conv{}", layer.name().to_lowercase(), conv);
            let weight = staged.var(params, &format!("{base}.weight"))?;
            let bias = staged.var(params, &format!("{base}.bias"))?;
            let pad = dilation * (k - 1) / 2;
            let y = tape.conv2d(x, weight, bias, stride, pad, dilation)?;
            stats.backbone_convs += 1;
            x = tape.relu(y);
        }
        features[stage] = x;
    }
    stats.backbone_passes += 1;
    Ok(features)
}

/// Resamples each source map to the branch's target stride (fixed bilinear
/// up-sampling, repeated 2x2 max pooling down) and concatenates them in
/// C2..C5 order.
pub fn fuse_branch<E: Element>(
    tape: &mut Tape<E>,
    features: &[Var; 4],
    branch: &BranchConfig,
) -> Result<Var> {
    let mut sources = branch.sources.clone();
    sources.sort();
    sources.dedup();
    let mut parts = Vec::with_capacity(sources.len());
    for s in sources {
        let stride = s.stride();
        let target = branch.target_stride;
        let var = features[s.index()];
        let resampled = if stride == target {
            var
        } else if stride > target {
            let f = stride / target;
            if !f.is_power_of_two() {
                return Err(Error::Config(format!(
                    "cannot upsample {} (stride {stride}) to stride {target}",
                    s.name()
                )));
            }
            tape.upsample(var, f)?
        } else {
            let mut f = target / stride;
            if !f.is_power_of_two() {
                return Err(Error::Config(format!(
                    "cannot downsample {} (stride {stride}) to stride {target}",
                    s.name()
                )));
            }
            let mut v = var;
            while f > 1 {
                v = tape.max_pool2d(v, 2, 2)?;
                f /= 2;
            }
            v
        };
        parts.push(resampled);
    }
    tape.concat_channels(&parts)
}

/// Applies the branch head: 1x1 reduction + ReLU, then sibling 1x1 convs
/// producing the classification (2A channels) and regression (4A channels)
/// maps.
pub fn branch_head<E: Element>(
    tape: &mut Tape<E>,
    fused: Var,
    branch_idx: usize,
    params: &ModelParams<E>,
    staged: &StagedParams,
) -> Result<(Var, Var)> {
    let base = format!("branch{branch_idx}");
    let rw = staged.var(params, &format!("{base}.reduce.weight"))?;
    let rb = staged.var(params, &format!("{base}.reduce.bias"))?;
    let reduced = tape.conv2d(fused, rw, rb, 1, 0, 1)?;
    let reduced = tape.relu(reduced);

    let cw = staged.var(params, &format!("{base}.cls.weight"))?;
    let cb = staged.var(params, &format!("{base}.cls.bias"))?;
    let cls = tape.conv2d(reduced, cw, cb, 1, 0, 1)?;

    let gw = staged.var(params, &format!("{base}.reg.weight"))?;
    let gb = staged.var(params, &format!("{base}.reg.bias"))?;
    let reg = tape.conv2d(reduced, gw, gb, 1, 0, 1)?;
    Ok((cls, reg))
}

/// One backbone pass shared by all K branches, then each branch's fusion and
/// head. Returns (cls, reg) map handles per branch in config order.
pub fn forward_on_tape<E: Element>(
    tape: &mut Tape<E>,
    image: Var,
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    staged: &StagedParams,
    stats: &mut PassStats,
) -> Result<Vec<(Var, Var)>> {
    let features = extract_features(tape, image, cfg, params, staged, stats)?;
    let mut outputs = Vec::with_capacity(cfg.branches.len());
    for (bi, branch) in cfg.branches.iter().enumerate() {
        let fused = fuse_branch(tape, &features, branch)?;
        outputs.push(branch_head(tape, fused, bi, params, staged)?);
    }
    Ok(outputs)
}

/// Inference-only forward pass: no gradients, plain tensors out.
pub fn forward(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
) -> Result<(Vec<(Tensor<f32>, Tensor<f32>)>, PassStats)> {
    let mut tape: Tape<f32> = Tape::new();
    let staged = stage_params(&mut tape, params, false);
    let image = tape.leaf(image.clone(), false);
    let mut stats = PassStats::default();
    let vars = forward_on_tape(&mut tape, image, cfg, params, &staged, &mut stats)?;
    let outputs = vars
        .into_iter()
        .map(|(c, r)| (tape.value(c).clone(), tape.value(r).clone()))
        .collect();
    Ok((outputs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_shapes(cfg: &ModelConfig, h: usize, w: usize) -> Vec<[usize; 4]> {
        let params = build_model::<f32>(cfg, 7).unwrap();
        let image = Tensor::zeros([1, 3, h, w]);
        let (outs, _) = forward(&image, cfg, &params).unwrap();
        outs.iter().map(|(c, _)| c.shape()).collect()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = build_model::<f32>(&cfg, 42).unwrap();
        let b = build_model::<f32>(&cfg, 42).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
        let c = build_model::<f32>(&cfg, 43).unwrap();
        assert_ne!(
            a.get("backbone.c2.conv0.weight").unwrap().data(),
            c.get("backbone.c2.conv0.weight").unwrap().data()
        );
    }

    #[test]
    fn init_statistics_match_recipe() {
        let cfg = ModelConfig::default();
        let params = build_model::<f64>(&cfg, 11).unwrap();
        // branch0 reduce: 64 x (32+64+64) = 10240 weights.
        let w = params.get("branch0.reduce.weight").unwrap();
        assert!(w.len() >= 10_000);
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        let var: f64 =
            w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.001, "mean {mean}");
        let std = var.sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");

        for e in &params.entries {
            if e.name.ends_with(".bias") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.1));
            }
        }
    }

    #[test]
    fn fillers_are_installed_and_frozen() {
        let cfg = ModelConfig::default();
        let params = build_model::<f32>(&cfg, 5).unwrap();
        let filler = params.get("filler.f2").unwrap();
        assert_eq!(filler.shape(), [1, 1, 4, 4]);
        let expect = bilinear_filler::<f32>(2).unwrap();
        assert_eq!(filler.data(), expect.data());
        let entry = &params.entries[params.index("filler.f2").unwrap()];
        assert!(!entry.trainable);
    }

    #[test]
    fn feature_map_strides() {
        let cfg = ModelConfig::default();
        let params = build_model::<f32>(&cfg, 3).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let staged = stage_params(&mut tape, &params, false);
        let image = tape.leaf(Tensor::zeros([1, 3, 128, 128]), false);
        let mut stats = PassStats::default();
        let feats = extract_features(&mut tape, image, &cfg, &params, &staged, &mut stats).unwrap();
        let sizes: Vec<[usize; 4]> = feats.iter().map(|&v| tape.value(v).shape()).collect();
        assert_eq!(sizes[0], [1, 16, 32, 32]);
        assert_eq!(sizes[1], [1, 32, 16, 16]);
        assert_eq!(sizes[2], [1, 64, 8, 8]);
        assert_eq!(sizes[3], [1, 64, 8, 8]);

        let image = tape.leaf(Tensor::zeros([1, 3, 64, 64]), false);
        let feats = extract_features(&mut tape, image, &cfg, &params, &staged, &mut stats).unwrap();
        assert_eq!(tape.value(feats[3]).shape(), [1, 64, 4, 4]);

        let image = tape.leaf(Tensor::zeros([1, 3, 40, 40]), false);
        assert!(extract_features(&mut tape, image, &cfg, &params, &staged, &mut stats).is_err());
    }

    #[test]
    fn default_branches_output_at_both_strides() {
        let cfg = ModelConfig::default();
        let shapes = forward_shapes(&cfg, 128, 128);
        assert_eq!(shapes.len(), 2);
        assert_eq!(shapes[0], [1, 10, 16, 16]); // 5 anchors * 2 at stride 8
        assert_eq!(shapes[1], [1, 8, 8, 8]); // 4 anchors * 2 at stride 16
    }

    #[test]
    fn fuse_branch_resamples_to_target() {
        let cfg = ModelConfig::default();
        let params = build_model::<f32>(&cfg, 3).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let staged = stage_params(&mut tape, &params, false);
        let image = tape.leaf(Tensor::zeros([1, 3, 128, 128]), false);
        let mut stats = PassStats::default();
        let feats = extract_features(&mut tape, image, &cfg, &params, &staged, &mut stats).unwrap();

        // C3+C4+C5 at stride 8 on a 128 input -> 16x16, c3+c4+c5 channels.
        let fused = fuse_branch(&mut tape, &feats, &cfg.branches[0]).unwrap();
        assert_eq!(tape.value(fused).shape(), [1, 32 + 64 + 64, 16, 16]);

        // C4+C5 at stride 16: pure concat.
        let fused = fuse_branch(&mut tape, &feats, &cfg.branches[1]).unwrap();
        assert_eq!(tape.value(fused).shape(), [1, 128, 8, 8]);

        // C2 alone down to stride 16: two successive 2x2 pools.
        let branch = BranchConfig::new(vec![SourceLayer::C2], 16, vec![32.0]);
        let fused = fuse_branch(&mut tape, &feats, &branch).unwrap();
        assert_eq!(tape.value(fused).shape(), [1, 16, 8, 8]);
    }

    #[test]
    fn head_channel_arithmetic() {
        let mut cfg = ModelConfig::default();
        cfg.branches = vec![BranchConfig::new(
            vec![SourceLayer::C4, SourceLayer::C5],
            16,
            vec![32.0, 64.0, 128.0],
        )];
        let params = build_model::<f32>(&cfg, 1).unwrap();
        let image = Tensor::zeros([1, 3, 64, 64]);
        let (outs, _) = forward(&image, &cfg, &params).unwrap();
        assert_eq!(outs.len(), 1);
        let (cls, reg) = &outs[0];
        assert_eq!(cls.shape(), [1, 6, 4, 4]);
        assert_eq!(reg.shape(), [1, 12, 4, 4]);
    }

    #[test]
    fn backbone_work_independent_of_branch_count() {
        let image = Tensor::zeros([1, 3, 64, 64]);
        let mut counts = Vec::new();
        for k in 1..=3 {
            let mut cfg = ModelConfig::default();
            cfg.branches.truncate(k.min(2));
            if k == 3 {
                cfg.branches.push(BranchConfig::new(
                    vec![SourceLayer::C4, SourceLayer::C5],
                    32,
                    vec![256.0],
                ));
            }
            let params = build_model::<f32>(&cfg, 2).unwrap();
            let (outs, stats) = forward(&image, &cfg, &params).unwrap();
            assert_eq!(outs.len(), cfg.branches.len());
            counts.push(stats.backbone_convs);
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn branch_order_permutes_outputs() {
        let cfg = ModelConfig::default();
        let mut swapped = cfg.clone();
        swapped.branches.reverse();

        let params = build_model::<f32>(&cfg, 9).unwrap();
        // Rename branch params so the swapped config finds its tensors.
        let mut params_swapped = params.clone();
        for e in &mut params_swapped.entries {
            if let Some(rest) = e.name.strip_prefix("branch0.") {
                e.name = format!("branch1.{rest}");
            } else if let Some(rest) = e.name.strip_prefix("branch1.") {
                e.name = format!("branch0.{rest}");
            }
        }

        let image = Tensor::full([1, 3, 64, 64], 0.5);
        let (a, _) = forward(&image, &cfg, &params).unwrap();
        let (b, _) = forward(&image, &swapped, &params_swapped).unwrap();
        assert_eq!(a[0].0.data(), b[1].0.data());
        assert_eq!(a[1].1.data(), b[0].1.data());
    }

    #[test]
    fn zero_weights_constant_propagation() {
        // With all trainable weights zero, every conv output equals its bias,
        // so the cls logits must equal exactly the cls bias. An independent
        // constant-propagation oracle mirrors that composition.
        let cfg = ModelConfig::default();
        let mut params = build_model::<f32>(&cfg, 4).unwrap();
        for e in &mut params.entries {
            if e.trainable && e.name.ends_with(".weight") {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let oracle = {
            // Constant forward: conv(x) = bias, relu clamps, head is linear.
            let mut v = 0.0f32;
            for _ in 0..cfg.backbone.convs_per_stage * 4 {
                v = (0.0 * v + 0.1f32).max(0.0);
            }
            let _reduced = (0.0 * v + 0.1f32).max(0.0);
            0.0 * _reduced + 0.1f32
        };
        let image = Tensor::full([1, 3, 32, 32], 0.7);
        let (outs, _) = forward(&image, &cfg, &params).unwrap();
        for (cls, _) in &outs {
            for &v in cls.data() {
                assert_eq!(v, oracle);
            }
        }
    }

    #[test]
    fn validate_against_catches_shape_drift() {
        let cfg = ModelConfig::default();
        let mut params = build_model::<f32>(&cfg, 8).unwrap();
        params.validate_against(&cfg).unwrap();
        let i = params.index("branch0.cls.weight").unwrap();
        params.entries[i].tensor = Tensor::zeros([1, 1, 1, 1]);
        assert!(params.validate_against(&cfg).is_err());
    }
}
