//! Pixel-space neural style transfer: content / style / total-variation
//! losses over a pluggable feature extractor, exact analytic pixel
//! gradients, and the gradient-descent loop.

mod extractor;

pub use extractor::{load_extractor, save_extractor, FeatureExtractor, FeatureMap, Layer};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

/// C×C Gram matrix of a layer's C×M feature view.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub Array2<f64>);

/// `G = F·Fᵀ` over the `(C, M)` view of a feature map. Each `(i, j)` pair
/// is computed once and mirrored, so symmetry is exact.
pub fn gram(values: &Array3<f64>) -> GramMatrix {
    let (c, h, w) = values.dim();
    let flat = values.to_shape((c, h * w)).expect("contiguous feature map");
    let mut g = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let v = flat.row(i).dot(&flat.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    GramMatrix(g)
}

/// `w_c · Σ (F_ij − P_ij)²` at the content layer.
pub fn content_loss(f: &Array3<f64>, p: &Array3<f64>, w_c: f64) -> Result<f64> {
    if f.dim() != p.dim() {
        return Err(Error::ShapeMismatch("content loss feature shapes differ".into()));
    }
    let mut acc = 0.0;
    for (a, b) in f.iter().zip(p.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(w_c * acc)
}

/// `Σ_ℓ w_ℓ · Σ_ij (G^ℓ_ij − A^ℓ_ij)²` over matched layer lists.
pub fn style_loss(
    grams_current: &[GramMatrix],
    grams_style: &[GramMatrix],
    weights: &[f64],
) -> Result<f64> {
    if grams_current.len() != grams_style.len() || grams_current.len() != weights.len() {
        return Err(Error::ShapeMismatch("style loss layer sets differ".into()));
    }
    let mut total = 0.0;
    for ((g, a), w) in grams_current.iter().zip(grams_style).zip(weights) {
        if g.0.dim() != a.0.dim() {
            return Err(Error::ShapeMismatch("style loss gram shapes differ".into()));
        }
        let mut acc = 0.0;
        for (gv, av) in g.0.iter().zip(a.0.iter()) {
            let d = gv - av;
            acc += d * d;
        }
        total += w * acc;
    }
    Ok(total)
}

/// Total-variation loss: squared differences of vertically and
/// horizontally adjacent pixels, per channel, weighted by `w_t`.
pub fn tv_loss(img: &Array3<f64>, w_t: f64) -> f64 {
    let (c, h, w) = img.dim();
    let mut acc = 0.0;
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w {
                let d = img[(ch, i + 1, j)] - img[(ch, i, j)];
                acc += d * d;
            }
        }
        for i in 0..h {
            for j in 0..w - 1 {
                let d = img[(ch, i, j + 1)] - img[(ch, i, j)];
                acc += d * d;
            }
        }
    }
    w_t * acc
}

/// Closed-form gradient of [`tv_loss`].
pub fn tv_grad(img: &Array3<f64>, w_t: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut grad = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w {
                let d = 2.0 * w_t * (img[(ch, i + 1, j)] - img[(ch, i, j)]);
                grad[(ch, i + 1, j)] += d;
                grad[(ch, i, j)] -= d;
            }
        }
        for i in 0..h {
            for j in 0..w - 1 {
                let d = 2.0 * w_t * (img[(ch, i, j + 1)] - img[(ch, i, j)]);
                grad[(ch, i, j + 1)] += d;
                grad[(ch, i, j)] -= d;
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Fixed-step gradient descent; with `step_halving` the step is
    /// halved and the move reverted whenever the loss would increase.
    PlainGd { step_halving: bool },
    /// Adam-style per-pixel adaptive moments.
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitMode {
    ContentCopy,
    UniformNoise { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NstConfig {
    /// Layer index (into the extractor's layer list) of the content target.
    pub content_layer: usize,
    pub content_weight: f64,
    /// `(layer index, weight)` pairs for the style target.
    pub style_layers: Vec<(usize, f64)>,
    pub tv_weight: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub snapshot_interval: usize,
    pub init: InitMode,
}

impl NstConfig {
    /// Defaults for the reference extractor: content on the second conv,
    /// style on every conv with equal weight.
    pub fn default_for(ex: &FeatureExtractor) -> Self {
        let convs = ex.conv_indices();
        let content_layer = convs.get(1).copied().or_else(|| convs.last().copied()).unwrap_or(0);
        NstConfig {
            content_layer,
            content_weight: 1.0,
            style_layers: convs.iter().map(|&i| (i, 1e-6)).collect(),
            tv_weight: 1e-2,
            iterations: 100,
            step_size: 0.05,
            optimizer: Optimizer::AdaptiveMoment,
            snapshot_interval: 10,
            init: InitMode::ContentCopy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.snapshot_interval == 0 {
            return Err(Error::domain("iterations and snapshot_interval must be >= 1"));
        }
        if self.content_weight < 0.0
            || self.tv_weight < 0.0
            || self.style_layers.iter().any(|(_, w)| *w < 0.0)
        {
            return Err(Error::domain("loss weights must be >= 0"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::domain("step size must be > 0"));
        }
        Ok(())
    }
}

impl Default for NstConfig {
    fn default() -> Self {
        // matches the reference extractor's conv layout (convs at 0, 2, 5)
        NstConfig {
            content_layer: 2,
            content_weight: 1.0,
            style_layers: vec![(0, 1e-6), (2, 1e-6), (5, 1e-6)],
            tv_weight: 1e-2,
            iterations: 100,
            step_size: 0.05,
            optimizer: Optimizer::AdaptiveMoment,
            snapshot_interval: 10,
            init: InitMode::ContentCopy,
        }
    }
}

/// Precomputed optimization targets: the content layer's feature map and
/// the style image's per-layer Gram matrices.
#[derive(Debug, Clone)]
pub struct NstTargets {
    pub content: Array3<f64>,
    pub style_grams: Vec<GramMatrix>,
}

pub fn prepare_targets(
    ex: &FeatureExtractor,
    content: &ImageTensor,
    style: &ImageTensor,
    cfg: &NstConfig,
) -> Result<NstTargets> {
    let content_acts = ex.forward_full(&content.data)?;
    let style_acts = ex.forward_full(&style.data)?;
    if cfg.content_layer >= ex.layers.len()
        || cfg.style_layers.iter().any(|(l, _)| *l >= ex.layers.len())
    {
        return Err(Error::domain("config references a layer beyond the extractor"));
    }
    Ok(NstTargets {
        content: content_acts[cfg.content_layer + 1].clone(),
        style_grams: cfg
            .style_layers
            .iter()
            .map(|(l, _)| gram(&style_acts[l + 1]))
            .collect(),
    })
}

/// The three loss components and their sum at one image state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub tv: f64,
}

fn loss_from_acts(
    acts: &[Array3<f64>],
    img: &Array3<f64>,
    targets: &NstTargets,
    cfg: &NstConfig,
) -> Result<LossBreakdown> {
    let content = content_loss(&acts[cfg.content_layer + 1], &targets.content, cfg.content_weight)?;
    let current_grams: Vec<GramMatrix> =
        cfg.style_layers.iter().map(|(l, _)| gram(&acts[l + 1])).collect();
    let weights: Vec<f64> = cfg.style_layers.iter().map(|(_, w)| *w).collect();
    let style = style_loss(&current_grams, &targets.style_grams, &weights)?;
    let tv = tv_loss(img, cfg.tv_weight);
    Ok(LossBreakdown { total: content + style + tv, content, style, tv })
}

/// Weighted total loss and its components at `img`.
pub fn total_loss(
    ex: &FeatureExtractor,
    img: &ImageTensor,
    targets: &NstTargets,
    cfg: &NstConfig,
) -> Result<LossBreakdown> {
    let acts = ex.forward_full(&img.data)?;
    loss_from_acts(&acts, &img.data, targets, cfg)
}

/// Exact analytic gradient of the total loss with respect to every pixel.
pub fn pixel_gradient(
    ex: &FeatureExtractor,
    img: &ImageTensor,
    targets: &NstTargets,
    cfg: &NstConfig,
) -> Result<Array3<f64>> {
    let acts = ex.forward_full(&img.data)?;
    let mut seeds: Vec<Option<Array3<f64>>> = vec![None; ex.layers.len()];

    if cfg.content_weight > 0.0 {
        let f = &acts[cfg.content_layer + 1];
        if f.dim() != targets.content.dim() {
            return Err(Error::ShapeMismatch("content target shape differs".into()));
        }
        let mut seed = f - &targets.content;
        seed.mapv_inplace(|v| 2.0 * cfg.content_weight * v);
        merge_seed(&mut seeds[cfg.content_layer], seed);
    }

    for ((layer, weight), target_gram) in cfg.style_layers.iter().zip(&targets.style_grams) {
        if *weight == 0.0 {
            continue;
        }
        let f3 = &acts[layer + 1];
        let (c, h, w) = f3.dim();
        let flat = f3.to_shape((c, h * w)).expect("contiguous feature map");
        let g = gram(f3);
        if g.0.dim() != target_gram.0.dim() {
            return Err(Error::ShapeMismatch("style gram shape differs".into()));
        }
        // L = w Σ (G−A)², G = F·Fᵀ  ⇒  dL/dF = 4w (G−A)·F
        let diff = &g.0 - &target_gram.0;
        let mut df = diff.dot(&flat);
        df.mapv_inplace(|v| 4.0 * weight * v);
        let seed = df.into_shape((c, h, w)).expect("reshape back");
        merge_seed(&mut seeds[*layer], seed);
    }

    let mut grad = ex.backward(&acts, seeds)?;
    if cfg.tv_weight > 0.0 {
        grad += &tv_grad(&img.data, cfg.tv_weight);
    }
    Ok(grad)
}

fn merge_seed(slot: &mut Option<Array3<f64>>, seed: Array3<f64>) {
    match slot {
        Some(existing) => *existing += &seed,
        None => *slot = Some(seed),
    }
}

/// One sample of the recorded loss trajectory.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Result of an optimization run: final image, numbered snapshots, and
/// the loss trajectory (entry `i` is the loss before iteration `i`'s
/// step; the last entry is the final state).
#[derive(Debug, Clone)]
pub struct NstRun {
    pub final_image: ImageTensor,
    pub snapshots: Vec<(usize, ImageTensor)>,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Gradient descent on pixel values. Pixels are clamped to `[0, 1]`
/// after every step; a snapshot is recorded every
/// `cfg.snapshot_interval` iterations and at the end.
pub fn optimize(
    content: &ImageTensor,
    style: &ImageTensor,
    ex: &FeatureExtractor,
    cfg: &NstConfig,
) -> Result<NstRun> {
    let mut snapshots = Vec::new();
    let mut trajectory = Vec::new();
    let final_image = optimize_with(
        content,
        style,
        ex,
        cfg,
        &mut |iter, img| {
            snapshots.push((iter, img.clone()));
            Ok(())
        },
        &mut |point| {
            trajectory.push(point);
            Ok(())
        },
    )?;
    Ok(NstRun { final_image, snapshots, trajectory })
}

/// [`optimize`] with streaming sinks: `on_snapshot` receives each
/// numbered snapshot as it is produced and `on_point` each trajectory
/// sample, so callers keep partial outputs when a run aborts.
pub fn optimize_with(
    content: &ImageTensor,
    style: &ImageTensor,
    ex: &FeatureExtractor,
    cfg: &NstConfig,
    on_snapshot: &mut dyn FnMut(usize, &ImageTensor) -> Result<()>,
    on_point: &mut dyn FnMut(TrajectoryPoint) -> Result<()>,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let targets = prepare_targets(ex, content, style, cfg)?;

    let mut img = match cfg.init {
        InitMode::ContentCopy => content.data.clone(),
        InitMode::UniformNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array3::from_shape_fn(content.data.raw_dim(), |_| rng.gen_range(0.0..1.0))
        }
    };

    let mut step = cfg.step_size;
    let mut adam_m: Array3<f64> = Array3::zeros(img.raw_dim());
    let mut adam_v: Array3<f64> = Array3::zeros(img.raw_dim());
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut current_loss = loss_from_acts(
        &ex.forward_full(&img)?,
        &img,
        &targets,
        cfg,
    )?;

    for iter in 0..cfg.iterations {
        if !current_loss.total.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        on_point(TrajectoryPoint { iteration: iter, loss: current_loss })?;

        let wrap = ImageTensor { data: img.clone(), normalized: None };
        let grad = pixel_gradient(ex, &wrap, &targets, cfg)?;

        match cfg.optimizer {
            Optimizer::AdaptiveMoment => {
                let t = (iter + 1) as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for ((x, g), (m, v)) in img
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(adam_m.iter_mut().zip(adam_v.iter_mut()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *x = (*x - step * m_hat / (v_hat.sqrt() + adam_eps)).clamp(0.0, 1.0);
                }
                current_loss = loss_from_acts(&ex.forward_full(&img)?, &img, &targets, cfg)?;
            }
            Optimizer::PlainGd { step_halving } => {
                let mut accepted = false;
                for _ in 0..64 {
                    let mut candidate = img.clone();
                    for (x, g) in candidate.iter_mut().zip(grad.iter()) {
                        *x = (*x - step * g).clamp(0.0, 1.0);
                    }
                    let candidate_loss =
                        loss_from_acts(&ex.forward_full(&candidate)?, &candidate, &targets, cfg)?;
                    if !step_halving || candidate_loss.total <= current_loss.total {
                        img = candidate;
                        current_loss = candidate_loss;
                        accepted = true;
                        break;
                    }
                    step /= 2.0;
                }
                if !accepted {
                    // step underflowed; the image is already a local fixed point
                }
            }
        }

        let done = iter + 1;
        if done % cfg.snapshot_interval == 0 || done == cfg.iterations {
            on_snapshot(done, &ImageTensor { data: img.clone(), normalized: None })?;
        }
    }

    if !current_loss.total.is_finite() {
        return Err(Error::NonFiniteLoss(cfg.iterations));
    }
    on_point(TrajectoryPoint { iteration: cfg.iterations, loss: current_loss })?;

    Ok(ImageTensor { data: img, normalized: None })
}
