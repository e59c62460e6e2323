//! Batch planning and execution of grid-spliced mixing.
//!
//! A pass has two phases. [`plan_batch`] consumes the random stream in a fixed
//! order and records every choice in a [`BatchPlan`]:
//!
//! 1. grid index, uniform over `grid_family`;
//! 2. for an asymmetric grid, one coin (`asymmetric_flip_prob`) to swap rows and columns;
//! 3. one `dropout_prob` Bernoulli for the batch and, if it fires, a dropout
//!    count uniform in `[1, rows·cols − 1]`;
//! 4. for every mixed image, the dropped cell positions by partial Fisher–Yates
//!    over `[0, rows·cols)`;
//! 5. the members, drawn without replacement over `[0, batch_size)` by partial
//!    Fisher–Yates and consumed in order across the live cells of each mixed image.
//!
//! With [`DropoutScope::PerImage`], step 3 keeps the single Bernoulli but the
//! count is drawn inside step 4, immediately before each image's positions.
//!
//! Regular images join at most one mixed image. When the requested mixed-set
//! size needs more members than the batch holds (a 2x3 grid with a quarter-size
//! mixed set, say), [`MixedOverflow::Cap`] shrinks the mixed set to the
//! referenced cardinality `⌊B / live⌋` before step 4; under per-image dropout
//! the image whose cells no longer fit is discarded after its draws and
//! planning stops. [`MixedOverflow::Error`] reports the plan as infeasible.
//!
//! Execution ([`mix_images`], [`mix_labels`], [`splicemix`]) is then pure.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::tensor::{downsample_and_compose, GridGeometry, ImageTensor};

/// Value written into dropped cells.
pub const DROPPED_FILL: f32 = 0.0;

/// Fixed-width multi-hot class vector.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MultiHotLabel {
    len: usize,
    words: Vec<u64>,
}

impl MultiHotLabel {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut label = Self::zeros(len);
        for &i in indices {
            if i >= len {
                return Err(Error::Shape(format!("class index {i} out of range for {len} classes")));
            }
            label.set(i, true);
        }
        Ok(label)
    }

    /// Builds a label from 0/1 bytes; any other byte is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let mut label = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => label.set(i, true),
                _ => return Err(Error::Shape(format!("label byte {b} at {i} is not 0/1"))),
            }
        }
        Ok(label)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for {} classes", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for {} classes", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        if other.len != self.len {
            return Err(Error::Shape(format!(
                "label widths differ: {} vs {}",
                self.len, other.len
            )));
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }
}

impl fmt::Debug for MultiHotLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.len)
            .map(|i| if self.get(i) { '1' } else { '0' })
            .collect();
        write!(f, "MultiHotLabel({s})")
    }
}

/// Whether the dropout count is shared by a batch or drawn per mixed image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutScope {
    #[default]
    PerBatch,
    PerImage,
}

/// What to do when the mixed set needs more distinct members than the batch has.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedOverflow {
    #[default]
    Cap,
    Error,
}

fn default_family() -> Vec<GridGeometry> {
    vec![
        GridGeometry { rows: 1, cols: 2 },
        GridGeometry { rows: 2, cols: 2 },
        GridGeometry { rows: 2, cols: 3 },
    ]
}

fn default_dropout_prob() -> f64 {
    0.3
}

fn default_mixed_frac() -> f64 {
    0.25
}

fn default_flip_prob() -> f64 {
    0.5
}

/// Augmentation settings. Defaults: grids `{1x2, 2x2, 2x3}`, dropout 0.3,
/// a mixed set a quarter the size of the regular batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    #[serde(default = "default_family")]
    pub grid_family: Vec<GridGeometry>,
    #[serde(default = "default_dropout_prob")]
    pub dropout_prob: f64,
    /// Fraction of the regular batch size; `0` disables mixing.
    #[serde(default = "default_mixed_frac")]
    pub mixed_frac: f64,
    #[serde(default = "default_flip_prob")]
    pub asymmetric_flip_prob: f64,
    #[serde(default)]
    pub dropout_scope: DropoutScope,
    #[serde(default)]
    pub overflow: MixedOverflow,
    /// Overrides the mixed-set size derived from `mixed_frac`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed_count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            grid_family: default_family(),
            dropout_prob: default_dropout_prob(),
            mixed_frac: default_mixed_frac(),
            asymmetric_flip_prob: default_flip_prob(),
            dropout_scope: DropoutScope::PerBatch,
            overflow: MixedOverflow::Cap,
            mixed_count: None,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_family.is_empty() {
            return Err(Error::Config("grid_family is empty".into()));
        }
        if let Some(g) = self.grid_family.iter().find(|g| g.cells() < 2) {
            return Err(Error::Config(format!("grid {g} has fewer than two cells")));
        }
        for (name, p) in [
            ("dropout_prob", self.dropout_prob),
            ("asymmetric_flip_prob", self.asymmetric_flip_prob),
            ("mixed_frac", self.mixed_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `max(1, ⌊mixed_frac · batch_size⌋)`, or the explicit override; 0 when disabled.
    pub fn mixed_count_for(&self, batch_size: usize) -> usize {
        if let Some(n) = self.mixed_count {
            return n;
        }
        if self.mixed_frac == 0.0 || batch_size == 0 {
            return 0;
        }
        ((self.mixed_frac * batch_size as f64).floor() as usize).max(1)
    }

    /// Every height/width divisor any sampled grid (or its transpose) can impose.
    pub fn required_divisors(&self) -> (usize, usize) {
        fn lcm(a: usize, b: usize) -> usize {
            fn gcd(a: usize, b: usize) -> usize {
                if b == 0 { a } else { gcd(b, a % b) }
            }
            a / gcd(a, b) * b
        }
        self.grid_family.iter().fold((1, 1), |(h, w), g| {
            if g.is_symmetric() || self.asymmetric_flip_prob == 0.0 {
                (lcm(h, g.rows), lcm(w, g.cols))
            } else {
                let m = lcm(g.rows, g.cols);
                (lcm(h, m), lcm(w, m))
            }
        })
    }
}

/// One grid and the cells masked out of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub geom: GridGeometry,
    /// Sorted, distinct, all `< geom.cells()`.
    pub dropped_cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(geom: GridGeometry, mut dropped_cells: Vec<usize>) -> Result<Self> {
        dropped_cells.sort_unstable();
        dropped_cells.dedup();
        if dropped_cells.iter().any(|&k| k >= geom.cells()) {
            return Err(Error::Grid(format!("dropped cell out of range for {geom}")));
        }
        if dropped_cells.len() >= geom.cells() {
            return Err(Error::Grid(format!("every cell of {geom} is dropped")));
        }
        Ok(Self {
            geom,
            dropped_cells,
        })
    }

    pub fn full(geom: GridGeometry) -> Self {
        Self {
            geom,
            dropped_cells: Vec::new(),
        }
    }

    pub fn live_cells(&self) -> usize {
        self.geom.cells() - self.dropped_cells.len()
    }

    pub fn is_dropped(&self, cell: usize) -> bool {
        self.dropped_cells.binary_search(&cell).is_ok()
    }

    /// Live cell indices in row-major order.
    pub fn live(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.geom.cells()).filter(|&k| !self.is_dropped(k))
    }
}

/// `⌊batch_size / (rows·cols − dropped)⌋`
pub fn referenced_cardinality(batch_size: usize, grid: &GridSpec) -> Result<usize> {
    let live = grid
        .geom
        .cells()
        .checked_sub(grid.dropped_cells.len())
        .filter(|&l| l > 0)
        .ok_or_else(|| Error::Grid(format!("{} has no live cell", grid.geom)))?;
    Ok(batch_size / live)
}

/// Provenance of one mixed image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedPlan {
    pub grid: GridSpec,
    /// Regular-batch indices, one per live cell in row-major order.
    pub members: Vec<usize>,
}

impl MixedPlan {
    /// `(cell, member)` pairs for the live cells.
    pub fn placements(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.grid.live().zip(self.members.iter().copied())
    }
}

/// All random choices of one augmentation pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Grid after the asymmetric coin.
    pub geom: GridGeometry,
    /// Shared dropout count; with per-image dropout this is 0 and counts live in `mixed`.
    pub dropout: usize,
    pub mixed: Vec<MixedPlan>,
}

impl BatchPlan {
    pub fn n_mixed(&self) -> usize {
        self.mixed.len()
    }

    pub fn passthrough(batch_size: usize, geom: GridGeometry) -> Self {
        Self {
            batch_size,
            geom,
            dropout: 0,
            mixed: Vec::new(),
        }
    }

    /// Checks membership bounds, cell counts and at-most-once use of every regular image.
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![false; self.batch_size];
        for (i, m) in self.mixed.iter().enumerate() {
            if m.grid.geom != self.geom {
                return Err(Error::InfeasiblePlan(format!("mixed image {i} uses a different grid")));
            }
            if m.members.len() != m.grid.live_cells() {
                return Err(Error::InfeasiblePlan(format!(
                    "mixed image {i} has {} members for {} live cells",
                    m.members.len(),
                    m.grid.live_cells()
                )));
            }
            for &j in &m.members {
                match used.get_mut(j) {
                    None => {
                        return Err(Error::InfeasiblePlan(format!(
                            "member {j} outside a batch of {}",
                            self.batch_size
                        )))
                    }
                    Some(true) => {
                        return Err(Error::InfeasiblePlan(format!("member {j} used twice")))
                    }
                    Some(slot) => *slot = true,
                }
            }
        }
        Ok(())
    }
}

/// Draws a plan for a batch of `batch_size` regular images.
pub fn plan_batch(batch_size: usize, cfg: &AugConfig, rng: &mut SeededStream) -> Result<BatchPlan> {
    cfg.validate()?;
    let n_mixed = cfg.mixed_count_for(batch_size);
    if n_mixed == 0 {
        return Ok(BatchPlan::passthrough(batch_size, cfg.grid_family[0]));
    }

    let mut geom = cfg.grid_family[rng.below(cfg.grid_family.len() as u64) as usize];
    if !geom.is_symmetric() && rng.bernoulli(cfg.asymmetric_flip_prob) {
        geom = geom.transposed();
    }
    let cells = geom.cells();
    let apply_dropout = rng.bernoulli(cfg.dropout_prob);
    let draw_count = |rng: &mut SeededStream| 1 + rng.below((cells - 1) as u64) as usize;
    let shared = match (apply_dropout, cfg.dropout_scope) {
        (true, DropoutScope::PerBatch) => draw_count(rng),
        _ => 0,
    };

    let infeasible = |n: usize, needed: usize| {
        Error::InfeasiblePlan(format!(
            "{n} mixed images on a {geom} grid need {needed} distinct regular images, \
             batch has {batch_size}"
        ))
    };
    let mut n_mixed = n_mixed;
    if cfg.dropout_scope == DropoutScope::PerBatch {
        let live = cells - shared;
        if n_mixed * live > batch_size {
            match cfg.overflow {
                MixedOverflow::Cap if batch_size >= live => n_mixed = batch_size / live,
                _ => return Err(infeasible(n_mixed, n_mixed * live)),
            }
        }
    }

    let mut grids = Vec::with_capacity(n_mixed);
    let mut needed = 0;
    for i in 0..n_mixed {
        let d = match (apply_dropout, cfg.dropout_scope) {
            (true, DropoutScope::PerImage) => draw_count(rng),
            _ => shared,
        };
        let dropped = if d > 0 {
            rng.sample_without_replacement(cells, d)
        } else {
            Vec::new()
        };
        let grid = GridSpec::new(geom, dropped)?;
        if needed + grid.live_cells() > batch_size {
            if cfg.overflow == MixedOverflow::Error || i == 0 {
                return Err(infeasible(n_mixed, needed + grid.live_cells()));
            }
            break;
        }
        needed += grid.live_cells();
        grids.push(grid);
    }

    let mut omega = rng.sample_without_replacement(batch_size, needed).into_iter();
    let mixed = grids
        .into_iter()
        .map(|grid| {
            let members = omega.by_ref().take(grid.live_cells()).collect();
            MixedPlan { grid, members }
        })
        .collect();

    Ok(BatchPlan {
        batch_size,
        geom,
        dropout: shared,
        mixed,
    })
}

fn check_resolution(batch: &[ImageTensor]) -> Result<(usize, usize, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    if let Some(bad) = batch.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "batch mixes shapes {:?} and {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(first.shape())
}

/// Builds the mixed images of `plan`, in plan order.
pub fn mix_images(batch: &[ImageTensor], plan: &BatchPlan) -> Result<Vec<ImageTensor>> {
    if plan.mixed.is_empty() {
        return Ok(Vec::new());
    }
    let (_, h, w) = check_resolution(batch)?;
    if batch.len() != plan.batch_size {
        return Err(Error::Shape(format!(
            "plan is for {} images, batch has {}",
            plan.batch_size,
            batch.len()
        )));
    }
    plan.validate()?;
    plan.mixed
        .par_iter()
        .map(|m| {
            let mut cells: Vec<Option<&ImageTensor>> = vec![None; m.grid.geom.cells()];
            for (cell, member) in m.placements() {
                cells[cell] = Some(&batch[member]);
            }
            downsample_and_compose(&cells, m.grid.geom, h, w, DROPPED_FILL)
        })
        .collect()
}

/// Union of the live members' labels for every mixed image.
pub fn mix_labels(labels: &[MultiHotLabel], plan: &BatchPlan) -> Result<Vec<MultiHotLabel>> {
    let width = labels.first().map(MultiHotLabel::len).unwrap_or(0);
    plan.mixed
        .iter()
        .map(|m| {
            let mut y = MultiHotLabel::zeros(width);
            for &j in &m.members {
                let member = labels.get(j).ok_or_else(|| {
                    Error::Shape(format!("member {j} outside {} labels", labels.len()))
                })?;
                y.union_with(member)?;
            }
            Ok(y)
        })
        .collect()
}

/// Regular samples followed by the mixed set, with the plan that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SplicedBatch {
    pub regulars: Vec<(ImageTensor, MultiHotLabel)>,
    pub mixed: Vec<(ImageTensor, MultiHotLabel)>,
    pub plan: BatchPlan,
}

impl SplicedBatch {
    pub fn len(&self) -> usize {
        self.regulars.len() + self.mixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Regular then mixed samples.
    pub fn iter(&self) -> impl Iterator<Item = &(ImageTensor, MultiHotLabel)> {
        self.regulars.iter().chain(&self.mixed)
    }
}

/// Plans and executes one pass over `batch`.
pub fn splicemix(
    batch: &[(ImageTensor, MultiHotLabel)],
    cfg: &AugConfig,
    rng: &mut SeededStream,
) -> Result<SplicedBatch> {
    let images: Vec<ImageTensor> = batch.iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<MultiHotLabel> = batch.iter().map(|(_, y)| y.clone()).collect();
    check_resolution(&images)?;
    if let Some((_, y)) = batch.iter().find(|(_, y)| y.len() != labels[0].len()) {
        return Err(Error::Shape(format!(
            "label widths differ: {} vs {}",
            labels[0].len(),
            y.len()
        )));
    }
    let plan = plan_batch(batch.len(), cfg, rng)?;
    let mixed_x = mix_images(&images, &plan)?;
    let mixed_y = mix_labels(&labels, &plan)?;
    Ok(SplicedBatch {
        regulars: batch.to_vec(),
        mixed: mixed_x.into_iter().zip(mixed_y).collect(),
        plan,
    })
}
