//! Synthetic multi-label benchmark with controllable co-occurrence bias.
//!
//! Every class is a flat-colored glyph pasted onto a noisy gray canvas. Glyph
//! pixels carry the exact class color and background pixels stay strictly
//! inside `(0.5 - a, 0.5 + a)` with `a < 0.5`, so the labels can be recovered
//! from the pixels alone (`recover_labels`).
//!
//! Models are a fixed pointwise color-response layer, global max pooling and a
//! trainable linear head. Because the feature layer acts per pixel, splitting
//! the feature map of a mixed image along its grid gives the features of the
//! downsampled members.
//!
//! Random streams per seed `s`: `derive(s, 0)` train data, `derive(s, 1)` test
//! data, `derive(s, 2)` head init, `derive(s, 3)` epoch shuffles and
//! `derive(s, 4)` augmentation plans. Methods differ only in whether the last
//! one is consumed.

use std::fmt::Write as _;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_images, mix_labels, plan_batch, AugConfig, MultiHotLabel};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, map_score, EvalTable};
use crate::model::{
    bce_loss, global_max_pool, grad_total_loss, predict_pooled, split_features, LinearHead,
    Objective, PooledBatch, PredictionSet, Sgd,
};
use crate::rng::SeededStream;
use crate::tensor::ImageTensor;

const BACKGROUND: f32 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_RESTARTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphShape {
    Square,
    Disc,
    Bar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Glyph {
    pub shape: GlyphShape,
    pub color: [f32; 3],
    /// Side length range as a fraction of the shorter canvas side.
    pub scale: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasedPair {
    pub b: usize,
    pub c: usize,
    pub co_occur_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_n: usize,
    pub test_n: usize,
    /// Independent presence probability of each class before bias is applied.
    pub class_prior: f64,
    pub biased_pairs: Vec<BiasedPair>,
    /// One glyph per class; empty means `default_palette(classes)`.
    pub palette: Vec<Glyph>,
    pub noise_amplitude: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            height: 24,
            width: 24,
            train_n: 480,
            test_n: 600,
            class_prior: 0.3,
            biased_pairs: vec![BiasedPair {
                b: 0,
                c: 1,
                co_occur_prob: 0.95,
            }],
            palette: Vec::new(),
            noise_amplitude: 0.3,
            seed: 0,
        }
    }
}

const COLORS: [[f32; 3]; 12] = [
    [1.0, 0.35, 0.35],
    [0.1, 0.3, 1.0],
    [0.0, 0.8, 0.2],
    [1.0, 0.85, 0.0],
    [0.7, 0.0, 0.9],
    [0.0, 0.9, 0.9],
    [1.0, 0.5, 0.0],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [0.4, 0.2, 0.0],
    [1.0, 0.0, 0.6],
    [0.0, 0.45, 0.45],
];

/// Class 0 is a small object (1/8 of the canvas); the rest are larger.
pub fn default_palette(classes: usize) -> Vec<Glyph> {
    let shapes = [GlyphShape::Disc, GlyphShape::Square, GlyphShape::Bar];
    (0..classes)
        .map(|k| Glyph {
            shape: shapes[k % shapes.len()],
            color: COLORS[k % COLORS.len()],
            scale: if k == 0 { (0.125, 0.125) } else { (0.2, 0.3) },
        })
        .collect()
}

impl SynthConfig {
    pub fn palette(&self) -> Vec<Glyph> {
        if self.palette.is_empty() {
            default_palette(self.classes)
        } else {
            self.palette.clone()
        }
    }

    fn side_range(&self, g: &Glyph) -> (usize, usize) {
        let short = self.height.min(self.width) as f64;
        let lo = ((g.scale.0 * short).round() as usize).max(2);
        let hi = ((g.scale.1 * short).round() as usize).max(lo);
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.height == 0 || self.width == 0 {
            return bad("classes and resolution must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.class_prior) {
            return bad(format!("class_prior {} outside [0, 1]", self.class_prior));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude < 0.5) {
            return bad(format!(
                "noise_amplitude {} outside [0, 0.5)",
                self.noise_amplitude
            ));
        }
        for p in &self.biased_pairs {
            if p.b >= self.classes || p.c >= self.classes || p.b == p.c {
                return bad(format!("biased pair ({}, {}) is invalid", p.b, p.c));
            }
            if !(0.0..=1.0).contains(&p.co_occur_prob) {
                return bad(format!("co_occur_prob {} outside [0, 1]", p.co_occur_prob));
            }
        }
        let palette = self.palette();
        if palette.len() != self.classes {
            return bad(format!(
                "palette has {} glyphs for {} classes",
                palette.len(),
                self.classes
            ));
        }
        for (k, g) in palette.iter().enumerate() {
            if !g.color.iter().any(|&v| v == 0.0 || v == 1.0) {
                return bad(format!("class {k} color needs a channel at 0 or 1"));
            }
            if palette[..k].iter().any(|o| o.color == g.color) {
                return bad(format!("class {k} repeats an earlier color"));
            }
            if !(g.scale.0 > 0.0 && g.scale.0 <= g.scale.1) {
                return bad(format!("class {k} has scale range {:?}", g.scale));
            }
            let (_, hi) = self.side_range(g);
            if hi > self.height || hi > self.width {
                return bad(format!("class {k} glyph does not fit the canvas"));
            }
        }
        // every glyph at its largest, with a one-pixel margin, must fit by area
        let area: usize = palette
            .iter()
            .map(|g| {
                let s = self.side_range(g).1 + 1;
                s * s
            })
            .sum();
        if area > self.height * self.width {
            return Err(Error::InfeasiblePlan(format!(
                "{} glyphs need {} pixels, canvas has {}",
                self.classes,
                area,
                self.height * self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: MultiHotLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn draw_label(cfg: &SynthConfig, biased: bool, rng: &mut SeededStream) -> MultiHotLabel {
    let mut y = MultiHotLabel::zeros(cfg.classes);
    for k in 0..cfg.classes {
        y.set(k, rng.bernoulli(cfg.class_prior));
    }
    if biased {
        for p in &cfg.biased_pairs {
            // one draw per pair regardless of b, so streams stay aligned
            let co = rng.bernoulli(p.co_occur_prob);
            if y.get(p.b) {
                y.set(p.c, co);
            }
        }
    }
    y
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Placed {
    fn overlaps(&self, o: &Placed) -> bool {
        // one pixel of background between glyphs
        self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1 && self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1
    }
}

fn glyph_box(g: &Glyph, side: usize) -> (usize, usize) {
    match g.shape {
        GlyphShape::Square | GlyphShape::Disc => (side, side),
        GlyphShape::Bar => ((side / 3).max(1), side),
    }
}

fn covers(g: &Glyph, b: &Placed, y: usize, x: usize) -> bool {
    match g.shape {
        GlyphShape::Square | GlyphShape::Bar => true,
        GlyphShape::Disc => {
            let r = b.h as f64 / 2.0;
            let dy = (y - b.y) as f64 + 0.5 - r;
            let dx = (x - b.x) as f64 + 0.5 - r;
            dy * dy + dx * dx <= r * r
        }
    }
}

fn layout(
    cfg: &SynthConfig,
    palette: &[Glyph],
    present: &[usize],
    rng: &mut SeededStream,
) -> Result<Vec<Placed>> {
    'restart: for _ in 0..LAYOUT_RESTARTS {
        let mut placed: Vec<Placed> = Vec::with_capacity(present.len());
        for &k in present {
            let (lo, hi) = cfg.side_range(&palette[k]);
            let side = lo + rng.below((hi - lo + 1) as u64) as usize;
            let (h, w) = glyph_box(&palette[k], side);
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cand = Placed {
                    y: rng.below((cfg.height - h + 1) as u64) as usize,
                    x: rng.below((cfg.width - w + 1) as u64) as usize,
                    h,
                    w,
                };
                if placed.iter().all(|p| !p.overlaps(&cand)) {
                    ok = Some(cand);
                    break;
                }
            }
            match ok {
                Some(p) => placed.push(p),
                None => continue 'restart,
            }
        }
        return Ok(placed);
    }
    Err(Error::InfeasiblePlan(format!(
        "could not place classes {present:?} on a {}x{} canvas",
        cfg.height, cfg.width
    )))
}

/// Draws one image for `label`.
pub fn render(cfg: &SynthConfig, label: &MultiHotLabel, rng: &mut SeededStream) -> Result<ImageTensor> {
    let palette = cfg.palette();
    let present = label.indices();
    let boxes = layout(cfg, &palette, &present, rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (&k, b) in present.iter().zip(&boxes) {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if covers(&palette[k], b, y, x) {
                    owner[y * w + x] = Some(k);
                }
            }
        }
    }
    let amp = cfg.noise_amplitude as f64;
    let mut data = vec![0f32; 3 * h * w];
    for (pix, o) in owner.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + pix] = match o {
                Some(k) => palette[*k].color[ch],
                None if amp > 0.0 => {
                    let v = (BACKGROUND as f64 + rng.uniform(-amp, amp)) as f32;
                    // keep strictly inside the open noise band
                    v.clamp(
                        f32::from_bits((BACKGROUND - cfg.noise_amplitude).to_bits() + 1),
                        f32::from_bits((BACKGROUND + cfg.noise_amplitude).to_bits() - 1),
                    )
                }
                None => BACKGROUND,
            };
        }
    }
    ImageTensor::new(3, h, w, data)
}

/// Labels read back from pixels: a class is present iff some pixel has its color.
pub fn recover_labels(cfg: &SynthConfig, image: &ImageTensor) -> MultiHotLabel {
    let palette = cfg.palette();
    let mut y = MultiHotLabel::zeros(cfg.classes);
    let (_, h, w) = image.shape();
    for pix in 0..h * w {
        let px = [
            image.channel(0)[pix],
            image.channel(1)[pix],
            image.channel(2)[pix],
        ];
        if let Some(k) = palette.iter().position(|g| g.color == px) {
            y.set(k, true);
        }
    }
    y
}

fn gen_split(cfg: &SynthConfig, n: usize, biased: bool, stream: u64) -> Result<Vec<Sample>> {
    let mut rng = SeededStream::derive(cfg.seed, stream);
    (0..n)
        .map(|_| {
            let label = draw_label(cfg, biased, &mut rng);
            let image = render(cfg, &label, &mut rng)?;
            Ok(Sample { image, label })
        })
        .collect()
}

/// Biased training set and an unbiased test set.
///
/// The test set draws every class independently so that both protocol
/// splits have enough `b`-bearing images.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    Ok(SynthDataset {
        classes: cfg.classes,
        train: gen_split(cfg, cfg.train_n, true, 0)?,
        test: gen_split(cfg, cfg.test_n, false, 1)?,
    })
}

/// Test indices of the exclusive and co-occur splits for one pair.
///
/// Exclusive: `b` without `c`, plus every image without `b`. Co-occur: `b`
/// with `c`, plus every image without `b`.
pub fn pair_splits(labels: &[MultiHotLabel], pair: &BiasedPair) -> (Vec<usize>, Vec<usize>) {
    let mut exclusive = Vec::new();
    let mut cooccur = Vec::new();
    for (i, y) in labels.iter().enumerate() {
        match (y.get(pair.b), y.get(pair.c)) {
            (false, _) => {
                exclusive.push(i);
                cooccur.push(i);
            }
            (true, false) => exclusive.push(i),
            (true, true) => cooccur.push(i),
        }
    }
    (exclusive, cooccur)
}

/// Fixed per-pixel color responses `exp(-gamma * |x - color_k|^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorFeatures {
    centers: Vec<[f32; 3]>,
    gamma: f64,
}

impl ColorFeatures {
    pub fn new(palette: &[Glyph], gamma: f64) -> Self {
        Self {
            centers: palette.iter().map(|g| g.color).collect(),
            gamma,
        }
    }

    pub fn dim(&self) -> usize {
        self.centers.len()
    }

    pub fn map(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (c, h, w) = img.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        let mut out = vec![0f32; self.dim() * h * w];
        for pix in 0..h * w {
            let px = [
                img.channel(0)[pix] as f64,
                img.channel(1)[pix] as f64,
                img.channel(2)[pix] as f64,
            ];
            for (k, ctr) in self.centers.iter().enumerate() {
                let d2: f64 = (0..3).map(|i| (px[i] - ctr[i] as f64).powi(2)).sum();
                out[k * h * w + pix] = (-self.gamma * d2).exp() as f32;
            }
        }
        ImageTensor::new(self.dim(), h, w, out)
    }

    pub fn pooled(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(global_max_pool(&self.map(img)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Splicemix,
    SplicemixCl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Splicemix, Method::SplicemixCl];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Splicemix => "splicemix",
            Method::SplicemixCl => "splicemix_cl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size per regular sample; the batch gradient is a sum.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init_scale: f64,
    pub feature_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            init_scale: 0.01,
            feature_gamma: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// Mean AP of each biased class on its exclusive split, in percent.
    pub map_exclusive: f64,
    pub map_cooccur: f64,
    /// mAP over all classes on the whole test set.
    pub map_full: f64,
    /// Mean total loss per regular sample, one entry per epoch.
    pub train_loss: Vec<f64>,
    /// Mean summed BCE per test sample; entry 0 is before training.
    pub test_loss: Vec<f64>,
}

impl RunReport {
    pub fn final_test_loss(&self) -> f64 {
        *self.test_loss.last().expect("test loss has an initial entry")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_map_exclusive: f64,
    pub mean_map_cooccur: f64,
    pub mean_map_full: f64,
    pub mean_final_test_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    pub summary: Vec<MethodSummary>,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn run(&self, method: Method, seed: u64) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }

    /// One row per (seed, method, epoch).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("seed,method,epoch,train_loss,test_loss\n");
        for r in &self.runs {
            for (e, test) in r.test_loss.iter().enumerate() {
                let train = if e == 0 {
                    String::new()
                } else {
                    format!("{:.9}", r.train_loss[e - 1])
                };
                let _ = writeln!(out, "{},{},{},{},{:.9}", r.seed, r.method.name(), e, train, test);
            }
        }
        out
    }
}

struct Prepared<'a> {
    data: &'a SynthDataset,
    features: ColorFeatures,
    train_pooled: Vec<Vec<f64>>,
    test_pooled: Vec<Vec<f64>>,
    test_labels: Vec<MultiHotLabel>,
}

fn test_scores(head: &LinearHead, prep: &Prepared<'_>) -> Result<(f64, Vec<Vec<f64>>)> {
    let preds = prep
        .test_pooled
        .iter()
        .map(|x| predict_pooled(head, x))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let loss = bce_loss(&PredictionSet::new(preds), &prep.test_labels)?
        .iter()
        .sum::<f64>()
        / prep.test_pooled.len().max(1) as f64;
    Ok((loss, probs))
}

fn eval_table(probs: &[Vec<f64>], labels: &[MultiHotLabel]) -> Result<EvalTable> {
    let c = labels.first().map(MultiHotLabel::len).unwrap_or(0);
    EvalTable::new(
        labels.len(),
        c,
        probs.concat(),
        labels.iter().flat_map(|y| (0..c).map(|k| y.get(k))).collect(),
    )
}

fn pair_map(
    table: &EvalTable,
    labels: &[MultiHotLabel],
    pairs: &[BiasedPair],
    exclusive: bool,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for p in pairs {
        let (ex, co) = pair_splits(labels, p);
        let rows = if exclusive { ex } else { co };
        let sub = table.select_samples(&rows)?;
        sum += average_precision(&sub.class_scores(p.b), &sub.class_labels(p.b), p.b)?;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

fn train_one(
    prep: &Prepared<'_>,
    synth: &SynthConfig,
    aug: &AugConfig,
    tc: &TrainConfig,
    method: Method,
    seed: u64,
) -> Result<RunReport> {
    let classes = prep.data.classes;
    let n = prep.data.train.len();
    let bs = tc.batch_size;
    if bs == 0 || bs > n {
        return Err(Error::Config(format!(
            "batch size {bs} does not fit {n} training samples"
        )));
    }
    let mut head = LinearHead::random(
        classes,
        prep.features.dim(),
        tc.init_scale,
        &mut SeededStream::derive(seed, 2),
    );
    let mut shuffle_rng = SeededStream::derive(seed, 3);
    let mut aug_rng = SeededStream::derive(seed, 4);
    let mut sgd = Sgd::new(tc.lr / bs as f64, tc.momentum, tc.weight_decay);
    let objective = match method {
        Method::SplicemixCl => Objective::SpliceMixCl,
        _ => Objective::SpliceMix,
    };

    let (loss0, _) = test_scores(&head, prep)?;
    let mut test_loss = vec![loss0];
    let mut train_loss = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..tc.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks_exact(bs).enumerate() {
            let regular: Vec<Vec<f64>> = idx.iter().map(|&i| prep.train_pooled[i].clone()).collect();
            let labels: Vec<MultiHotLabel> =
                idx.iter().map(|&i| prep.data.train[i].label.clone()).collect();

            let (mut mixed, mut mixed_labels, mut sub, mut sub_members) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            if method != Method::Baseline {
                let plan = plan_batch(bs, aug, &mut aug_rng)?;
                if plan.n_mixed() > 0 {
                    let images: Vec<ImageTensor> =
                        idx.iter().map(|&i| prep.data.train[i].image.clone()).collect();
                    mixed_labels = mix_labels(&labels, &plan)?;
                    for (img, m) in mix_images(&images, &plan)?.iter().zip(&plan.mixed) {
                        let fmap = prep.features.map(img)?;
                        mixed.push(global_max_pool(&fmap));
                        if objective == Objective::SpliceMixCl {
                            for part in split_features(&fmap, &m.grid)? {
                                sub.push(global_max_pool(&part));
                            }
                            sub_members.extend(&m.members);
                        }
                    }
                }
            }

            let batch = PooledBatch::new(regular, labels, mixed, mixed_labels, sub, sub_members)?;
            let (loss, grad) = grad_total_loss(&head, &batch, objective)?;
            if !loss.total.is_finite() || !grad.norm().is_finite() {
                return Err(Error::Divergence(format!(
                    "{} seed {seed}: non-finite loss at epoch {epoch}, batch {bi} (lr {})",
                    method.name(),
                    tc.lr
                )));
            }
            epoch_loss += loss.total;
            seen += bs;
            head = sgd.step(&head, &grad)?;
        }
        train_loss.push(epoch_loss / seen as f64);
        let (tl, _) = test_scores(&head, prep)?;
        if !tl.is_finite() {
            return Err(Error::Divergence(format!(
                "{} seed {seed}: non-finite test loss after epoch {epoch}",
                method.name()
            )));
        }
        test_loss.push(tl);
        debug!(
            "{} seed {seed} epoch {epoch}: train {:.4} test {:.4}",
            method.name(),
            train_loss[epoch],
            tl
        );
    }

    let (_, probs) = test_scores(&head, prep)?;
    let table = eval_table(&probs, &prep.test_labels)?;
    Ok(RunReport {
        method,
        seed,
        map_exclusive: pair_map(&table, &prep.test_labels, &synth.biased_pairs, true)?,
        map_cooccur: pair_map(&table, &prep.test_labels, &synth.biased_pairs, false)?,
        map_full: map_score(&table)?,
        train_loss,
        test_loss,
    })
}

fn prepare<'a>(data: &'a SynthDataset, synth: &SynthConfig, tc: &TrainConfig) -> Result<Prepared<'a>> {
    let features = ColorFeatures::new(&synth.palette(), tc.feature_gamma);
    let pool = |set: &[Sample]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|s| features.pooled(&s.image)).collect()
    };
    Ok(Prepared {
        train_pooled: pool(&data.train)?,
        test_pooled: pool(&data.test)?,
        test_labels: data.test.iter().map(|s| s.label.clone()).collect(),
        features,
        data,
    })
}

/// Trains one head per (seed, method) on identical data and evaluates it.
pub fn run_experiment(
    synth: &SynthConfig,
    aug: &AugConfig,
    tc: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one method and one seed".into()));
    }
    aug.validate()?;
    let (rd, cd) = aug.required_divisors();
    if methods.iter().any(|&m| m != Method::Baseline) && (synth.height % rd != 0 || synth.width % cd != 0) {
        return Err(Error::Config(format!(
            "resolution {}x{} is not divisible by the grid family ({rd}x{cd})",
            synth.height, synth.width
        )));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();

    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<RunReport>> {
            let cfg = SynthConfig {
                seed,
                ..synth.clone()
            };
            let data = gen_dataset(&cfg)?;
            let prep = prepare(&data, &cfg, tc)?;
            methods
                .par_iter()
                .map(|&m| train_one(&prep, &cfg, aug, tc, m, seed))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunReport> = per_seed.into_iter().flatten().collect();

    let summary = methods
        .iter()
        .map(|&m| {
            let rows: Vec<&RunReport> = runs.iter().filter(|r| r.method == m).collect();
            let mean = |f: &dyn Fn(&RunReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            let s = MethodSummary {
                method: m,
                mean_map_exclusive: mean(&|r| r.map_exclusive),
                mean_map_cooccur: mean(&|r| r.map_cooccur),
                mean_map_full: mean(&|r| r.map_full),
                mean_final_test_loss: mean(&|r| r.final_test_loss()),
            };
            info!(
                "{}: exclusive {:.2} co-occur {:.2} full {:.2} test loss {:.4}",
                m.name(),
                s.mean_map_exclusive,
                s.mean_map_cooccur,
                s.mean_map_full,
                s.mean_final_test_loss
            );
            s
        })
        .collect();

    Ok(ExperimentReport {
        seeds: seeds.to_vec(),
        synth: synth.clone(),
        aug: aug.clone(),
        train: tc.clone(),
        summary,
        runs,
    })
}
