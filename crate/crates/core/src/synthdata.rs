//! Synthetic corrupted-image benchmark.
//!
//! Small rasters with a bright disc target on a textured background, with
//! controlled artefact injection (inside or outside the target region) and
//! difficulty injection (low contrast, tiny target). Every sample carries
//! exact ground-truth flags for both quality axes, so detection claims can
//! be checked against the generator rather than human labels.

use crate::error::{Error, Result};
use crate::rng::{rng_for_indexed, RunRng};
use crate::tasks::{TaskKind, Target};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

pub const DATA_VERSION: &str = "data-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactKind {
    None,
    GaussianNoise,
    Stripe,
    Blur,
    ChannelMisalign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardKind {
    None,
    LowContrast,
    TinyTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u32,
    /// [channels, h, w] raster in [0, 1], quantized to f32 so in-memory
    /// generation matches a file round trip bitwise.
    pub raster: Tensor,
    /// [1, h, w] binary target mask reflecting the labelled geometry.
    pub mask: Tensor,
    pub present: bool,
    pub artefact: bool,
    pub artefact_kind: ArtefactKind,
    pub artefact_in_roi: bool,
    pub hard: bool,
    pub hard_kind: HardKind,
}

impl ImageSample {
    pub fn class_label(&self) -> usize {
        self.present as usize
    }

    pub fn target(&self, kind: TaskKind) -> Target<'_> {
        match kind {
            TaskKind::Classification => Target::Class(self.class_label()),
            TaskKind::Segmentation => Target::Mask(&self.mask),
            TaskKind::Reconstruction => Target::Image(&self.raster),
        }
    }

    /// Ground-truth task-impact axis: an artefact on the target region or an
    /// intrinsically hard case. Out-of-region artefacts leave the labelled
    /// geometry pixel-identical, so they do not impact the task.
    pub fn task_impact(&self) -> bool {
        (self.artefact && self.artefact_in_roi) || self.hard
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub holdout: Vec<ImageSample>,
}

impl SplitDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(&self.val).chain(&self.holdout)
    }

    /// Train sample lookup by global id (train ids precede val and holdout).
    pub fn train_by_id(&self, id: u32) -> &ImageSample {
        let s = &self.train[id as usize];
        debug_assert_eq!(s.id, id);
        s
    }
}

/// Per-kind corruption rates; the total artefact rate is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindRates {
    pub gaussian_noise: f64,
    pub stripe: f64,
    pub blur: f64,
    pub channel_misalign: f64,
}

impl Default for KindRates {
    fn default() -> Self {
        KindRates {
            gaussian_noise: 0.12,
            stripe: 0.1,
            blur: 0.08,
            channel_misalign: 0.0,
        }
    }
}

impl KindRates {
    pub fn total(&self) -> f64 {
        self.gaussian_noise + self.stripe + self.blur + self.channel_misalign
    }

    fn weights(&self) -> [f64; 4] {
        [self.gaussian_noise, self.stripe, self.blur, self.channel_misalign]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardRates {
    pub low_contrast: f64,
    pub tiny_target: f64,
}

impl Default for HardRates {
    fn default() -> Self {
        HardRates {
            low_contrast: 0.15,
            tiny_target: 0.15,
        }
    }
}

impl HardRates {
    pub fn total(&self) -> f64 {
        self.low_contrast + self.tiny_target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub train: usize,
    pub val: usize,
    pub holdout: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Fraction of samples containing the disc target.
    pub presence_rate: f64,
    pub disc_radius: (f64, f64),
    pub disc_intensity: (f64, f64),
    pub background_level: f64,
    pub background_texture: f64,
    pub background_noise: f64,
    pub artefact_rates: KindRates,
    /// Fraction of artefacts placed on the target region.
    pub artefact_in_roi_fraction: f64,
    pub artefact_severity: (f64, f64),
    /// Hard-case rates among target-present samples.
    pub hard_rates: HardRates,
    pub hard_severity: (f64, f64),
    /// Require every (artefact x hard) combination to occur in every split.
    pub require_quadrants: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            train: 256,
            val: 64,
            holdout: 64,
            image_size: 32,
            channels: 1,
            presence_rate: 0.5,
            disc_radius: (3.5, 6.0),
            disc_intensity: (0.75, 0.95),
            background_level: 0.35,
            background_texture: 0.08,
            background_noise: 0.03,
            artefact_rates: KindRates::default(),
            artefact_in_roi_fraction: 0.5,
            artefact_severity: (0.5, 0.9),
            hard_rates: HardRates::default(),
            hard_severity: (0.55, 0.85),
            require_quadrants: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let err = |p: &str, m: String| Err(Error::config(format!("data.{p}"), m));
        if self.train == 0 || self.val == 0 || self.holdout == 0 {
            return err("counts", "every split needs at least one sample".into());
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return err(
                "image_size",
                format!("{} must be >= 8 and divisible by 4", self.image_size),
            );
        }
        if self.channels == 0 {
            return err("channels", "at least one channel".into());
        }
        for (name, v) in [
            ("presence_rate", self.presence_rate),
            ("artefact_in_roi_fraction", self.artefact_in_roi_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(name, format!("{v} outside [0, 1]"));
            }
        }
        let a = self.artefact_rates.total();
        let h = self.hard_rates.total();
        if !(0.0..=1.0).contains(&a) || self.artefact_rates.weights().iter().any(|&w| w < 0.0) {
            return err("artefact_rates", format!("total {a} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&h)
            || self.hard_rates.low_contrast < 0.0
            || self.hard_rates.tiny_target < 0.0
        {
            return err("hard_rates", format!("total {h} outside [0, 1]"));
        }
        if self.artefact_rates.channel_misalign > 0.0 && self.channels < 2 {
            return err(
                "artefact_rates.channel_misalign",
                "channel misalignment needs at least 2 channels".into(),
            );
        }
        Ok(())
    }
}

/// Half-open pixel rectangle, the target's bounding region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Roi {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// Counts proportional to `weights` summing exactly to `n`
/// (largest-remainder rounding, ties by index).
fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0; weights.len()];
        if !out.is_empty() {
            out[weights.len() - 1] = n; // degenerate: everything in the last (complement) bucket
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, Default)]
struct Assignment {
    present: bool,
    artefact_kind: Option<ArtefactKind>,
    artefact_in_roi: bool,
    hard_kind: Option<HardKind>,
}

fn assign_split(
    cfg: &GeneratorConfig,
    n: usize,
    split_index: u64,
) -> Result<Vec<Assignment>> {
    let mut rng = rng_for_indexed(cfg.seed, "assign", split_index);
    let mut slots: Vec<Assignment> = vec![Assignment::default(); n];

    let n_pos = largest_remainder(n, &[cfg.presence_rate, 1.0 - cfg.presence_rate])[0];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (pos_idx, neg_idx) = order.split_at(n_pos);
    for &i in pos_idx {
        slots[i].present = true;
    }

    // joint (artefact x hard) quadrants within the target-present subset
    let a = cfg.artefact_rates.total();
    let h = cfg.hard_rates.total();
    let quad = largest_remainder(
        n_pos,
        &[a * h, a * (1.0 - h), (1.0 - a) * h, (1.0 - a) * (1.0 - h)],
    );
    if cfg.require_quadrants {
        let expected = [a * h, a * (1.0 - h), (1.0 - a) * h, (1.0 - a) * (1.0 - h)];
        for (q, (&c, &e)) in quad.iter().zip(&expected).enumerate() {
            if e > 0.0 && c == 0 {
                return Err(Error::config(
                    "data",
                    format!("quadrant {q} has zero expected count in a split of {n_pos} target-present samples"),
                ));
            }
        }
    }
    let mut pos_shuffled = pos_idx.to_vec();
    pos_shuffled.shuffle(&mut rng);
    let mut artefact_slots: Vec<usize> = Vec::new();
    let mut hard_slots: Vec<usize> = Vec::new();
    {
        let (q_ah, rest) = pos_shuffled.split_at(quad[0]);
        let (q_a, rest) = rest.split_at(quad[1]);
        let (q_h, _) = rest.split_at(quad[2]);
        artefact_slots.extend_from_slice(q_ah);
        artefact_slots.extend_from_slice(q_a);
        hard_slots.extend_from_slice(q_ah);
        hard_slots.extend_from_slice(q_h);
    }
    // artefacts among target-absent samples
    let mut neg_shuffled = neg_idx.to_vec();
    neg_shuffled.shuffle(&mut rng);
    let n_neg_art = largest_remainder(neg_shuffled.len(), &[a, 1.0 - a])[0];
    artefact_slots.extend_from_slice(&neg_shuffled[..n_neg_art]);

    // distribute artefact kinds, placement, and hard kinds
    artefact_slots.sort_unstable();
    artefact_slots.shuffle(&mut rng);
    let kind_counts = largest_remainder(artefact_slots.len(), &cfg.artefact_rates.weights());
    let kinds = [
        ArtefactKind::GaussianNoise,
        ArtefactKind::Stripe,
        ArtefactKind::Blur,
        ArtefactKind::ChannelMisalign,
    ];
    let mut cursor = 0;
    for (kind, &count) in kinds.iter().zip(&kind_counts) {
        for &slot in &artefact_slots[cursor..cursor + count] {
            slots[slot].artefact_kind = Some(*kind);
        }
        cursor += count;
    }
    let mut placement = artefact_slots.clone();
    placement.shuffle(&mut rng);
    let n_in = largest_remainder(
        placement.len(),
        &[cfg.artefact_in_roi_fraction, 1.0 - cfg.artefact_in_roi_fraction],
    )[0];
    for &slot in &placement[..n_in] {
        slots[slot].artefact_in_roi = true;
    }

    hard_slots.sort_unstable();
    hard_slots.shuffle(&mut rng);
    let hard_counts = largest_remainder(
        hard_slots.len(),
        &[cfg.hard_rates.low_contrast, cfg.hard_rates.tiny_target],
    );
    for (i, &slot) in hard_slots.iter().enumerate() {
        slots[slot].hard_kind = Some(if i < hard_counts[0] {
            HardKind::LowContrast
        } else {
            HardKind::TinyTarget
        });
    }
    Ok(slots)
}

struct DiscGeometry {
    cy: f64,
    cx: f64,
    radius: f64,
    intensity: f64,
}

fn render_background(cfg: &GeneratorConfig, rng: &mut RunRng) -> Tensor {
    let s = cfg.image_size;
    let c = cfg.channels;
    let f1 = rng.random::<f64>() * 3.0 + 1.0;
    let f2 = rng.random::<f64>() * 3.0 + 1.0;
    let a1 = rng.random::<f64>() * std::f64::consts::PI;
    let a2 = rng.random::<f64>() * std::f64::consts::PI;
    let p1 = rng.random::<f64>() * std::f64::consts::TAU;
    let p2 = rng.random::<f64>() * std::f64::consts::TAU;
    let channel_offsets: Vec<f64> = (0..c)
        .map(|ci| {
            if ci == 0 {
                0.0
            } else {
                (rng.random::<f64>() - 0.5) * 0.08
            }
        })
        .collect();
    let mut data = vec![0.0; c * s * s];
    let tau = std::f64::consts::TAU;
    for ci in 0..c {
        for y in 0..s {
            for x in 0..s {
                let (yf, xf) = (y as f64 / s as f64, x as f64 / s as f64);
                let t1 = (tau * f1 * (xf * a1.cos() + yf * a1.sin()) + p1).sin();
                let t2 = (tau * f2 * (xf * a2.cos() + yf * a2.sin()) + p2).sin();
                let noise = (rng.random::<f64>() - 0.5) * 2.0;
                let v = cfg.background_level
                    + channel_offsets[ci]
                    + cfg.background_texture * 0.5 * (t1 + t2)
                    + cfg.background_noise * noise;
                data[ci * s * s + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[c, s, s], data).expect("background shape consistent")
}

/// Binary coverage mask of the disc geometry, independent of the raster.
fn coverage_mask(geo: &DiscGeometry, s: usize) -> Tensor {
    let mut mask = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let d = ((y as f64 - geo.cy).powi(2) + (x as f64 - geo.cx).powi(2)).sqrt();
            if geo.radius + 0.5 - d > 0.5 {
                mask[y * s + x] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[1, s, s], mask).expect("mask shape consistent")
}

fn draw_disc(raster: &mut Tensor, geo: &DiscGeometry) -> Tensor {
    let (c, s) = (raster.shape()[0], raster.shape()[1]);
    let data = raster.data_mut();
    for y in 0..s {
        for x in 0..s {
            let d = ((y as f64 - geo.cy).powi(2) + (x as f64 - geo.cx).powi(2)).sqrt();
            let coverage = (geo.radius + 0.5 - d).clamp(0.0, 1.0);
            if coverage > 0.0 {
                for ci in 0..c {
                    let i = ci * s * s + y * s + x;
                    data[i] = (data[i] * (1.0 - coverage) + geo.intensity * coverage).clamp(0.0, 1.0);
                }
            }
        }
    }
    coverage_mask(geo, s)
}

/// Target bounding region from a mask. Target-absent samples pass the
/// would-be coverage mask of their drawn geometry, so the region statistics
/// of corrupted samples carry no information about target presence.
fn mask_roi(mask: &Tensor, size: usize) -> Roi {
    let s = size;
    let mut y0 = s;
    let mut y1 = 0usize;
    let mut x0 = s;
    let mut x1 = 0usize;
    let mut any = false;
    for y in 0..s {
        for x in 0..s {
            if mask.data()[y * s + x] > 0.5 {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if !any {
        // degenerate geometry rasterizing to nothing: center a minimal box
        y0 = s / 2;
        y1 = s / 2 + 1;
        x0 = s / 2;
        x1 = s / 2 + 1;
    }
    // inflate so region-confined corruption has room to act
    const PAD: usize = 3;
    const MIN_SIDE: usize = 9;
    y0 = y0.saturating_sub(PAD);
    y1 = (y1 + PAD).min(s);
    x0 = x0.saturating_sub(PAD);
    x1 = (x1 + PAD).min(s);
    while y1 - y0 < MIN_SIDE && (y0 > 0 || y1 < s) {
        y0 = y0.saturating_sub(1);
        y1 = (y1 + 1).min(s);
    }
    while x1 - x0 < MIN_SIDE && (x0 > 0 || x1 < s) {
        x0 = x0.saturating_sub(1);
        x1 = (x1 + 1).min(s);
    }
    Roi { y0, y1, x0, x1 }
}

fn gaussian(rng: &mut RunRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn box_blur(field: &[f64], s: usize, out: &mut [f64]) {
    for y in 0..s {
        for x in 0..s {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < s as i64 && xx >= 0 && xx < s as i64 {
                        sum += field[yy as usize * s + xx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y * s + x] = sum / count;
        }
    }
}

/// Applies one corruption kind, confined to the target's bounding region
/// when `in_roi` and to its complement otherwise. Modified pixels are
/// clamped to [0, 1]; pixels outside the region are untouched bitwise.
pub fn corrupt(
    raster: &mut Tensor,
    kind: ArtefactKind,
    roi: &Roi,
    in_roi: bool,
    severity: f64,
    rng: &mut RunRng,
) -> Result<()> {
    if !(0.0 < severity && severity <= 1.0) {
        return Err(Error::config("severity", format!("{severity} outside (0, 1]")));
    }
    let (c, s) = (raster.shape()[0], raster.shape()[1]);
    let region = |y: usize, x: usize| roi.contains(y, x) == in_roi;
    match kind {
        ArtefactKind::None => {
            return Err(Error::UnknownCorruption("none".into()));
        }
        // noise and stripes blend toward a replacement pattern: at full
        // severity the region's original content is gone, the way heavy
        // acquisition defects wipe out signal rather than ride on top of it
        ArtefactKind::GaussianNoise => {
            let data = raster.data_mut();
            for ci in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        if region(y, x) {
                            let i = ci * s * s + y * s + x;
                            let target = (0.5 + 0.5 * gaussian(rng)).clamp(0.0, 1.0);
                            data[i] = ((1.0 - severity) * data[i] + severity * target)
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ArtefactKind::Stripe => {
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            let period = 3.0 + rng.random::<f64>() * 3.0;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let data = raster.data_mut();
            for ci in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        if region(y, x) {
                            let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                            let bar = (std::f64::consts::TAU * u / period + phase).sin();
                            let target = 0.5 + 0.45 * bar.signum();
                            let i = ci * s * s + y * s + x;
                            data[i] = ((1.0 - severity) * data[i] + severity * target)
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ArtefactKind::Blur => {
            for ci in 0..c {
                let plane: Vec<f64> = raster.data()[ci * s * s..(ci + 1) * s * s].to_vec();
                let mut once = vec![0.0; s * s];
                let mut twice = vec![0.0; s * s];
                box_blur(&plane, s, &mut once);
                box_blur(&once, s, &mut twice);
                let data = raster.data_mut();
                for y in 0..s {
                    for x in 0..s {
                        if region(y, x) {
                            let i = ci * s * s + y * s + x;
                            data[i] = ((1.0 - severity) * data[i] + severity * twice[y * s + x])
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ArtefactKind::ChannelMisalign => {
            if c < 2 {
                return Err(Error::UnknownCorruption(
                    "channel_misalign on a single-channel raster".into(),
                ));
            }
            let shift = (4.0 * severity).round() as usize;
            if shift == 0 {
                return Ok(());
            }
            let plane: Vec<f64> = raster.data()[..s * s].to_vec();
            let data = raster.data_mut();
            for y in 0..s {
                for x in 0..s {
                    if region(y, x) {
                        let src_x = x.saturating_sub(shift);
                        data[y * s + x] = plane[y * s + src_x];
                    }
                }
            }
        }
    }
    Ok(())
}

fn background_mean(raster: &Tensor, mask: &Tensor, channel: usize) -> f64 {
    let s = raster.shape()[1];
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in 0..s {
        for x in 0..s {
            if mask.data()[y * s + x] <= 0.5 {
                sum += raster.data()[channel * s * s + y * s + x];
                n += 1.0;
            }
        }
    }
    if n > 0.0 {
        sum / n
    } else {
        0.5
    }
}

/// Injects clinical-style difficulty. `low_contrast` scales the
/// target-background intensity gap by (1 - severity); `tiny_target` shrinks
/// the mask to at most 4 pixels and updates the label mask accordingly.
/// Severity 0 is a no-op; errors when no target is present.
pub fn make_hard(
    raster: &mut Tensor,
    mask: &mut Tensor,
    kind: HardKind,
    severity: f64,
    rng: &mut RunRng,
) -> Result<()> {
    if severity == 0.0 {
        return Ok(());
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::config("severity", format!("{severity} outside [0, 1]")));
    }
    let (c, s) = (raster.shape()[0], raster.shape()[1]);
    let area: usize = mask.iter().filter(|&&v| v > 0.5).count();
    if area == 0 {
        return Err(Error::Shape("make_hard requires a present target".into()));
    }
    match kind {
        HardKind::None => {}
        HardKind::LowContrast => {
            for ci in 0..c {
                let bg = background_mean(raster, mask, ci);
                let data = raster.data_mut();
                for y in 0..s {
                    for x in 0..s {
                        if mask.data()[y * s + x] > 0.5 {
                            let i = ci * s * s + y * s + x;
                            data[i] = (bg + (data[i] - bg) * (1.0 - severity)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        HardKind::TinyTarget => {
            // target centroid
            let mut cy = 0.0;
            let mut cx = 0.0;
            for y in 0..s {
                for x in 0..s {
                    if mask.data()[y * s + x] > 0.5 {
                        cy += y as f64;
                        cx += x as f64;
                    }
                }
            }
            cy /= area as f64;
            cx /= area as f64;
            // per-channel target intensity before erasing
            let mut intensity = vec![0.0; c];
            for (ci, it) in intensity.iter_mut().enumerate() {
                let mut sum = 0.0;
                for y in 0..s {
                    for x in 0..s {
                        if mask.data()[y * s + x] > 0.5 {
                            sum += raster.data()[ci * s * s + y * s + x];
                        }
                    }
                }
                *it = sum / area as f64;
            }
            // erase the old target with background fill
            for ci in 0..c {
                let bg = background_mean(raster, mask, ci);
                let data = raster.data_mut();
                for y in 0..s {
                    for x in 0..s {
                        if mask.data()[y * s + x] > 0.5 {
                            let jitter = (rng.random::<f64>() - 0.5) * 0.04;
                            data[ci * s * s + y * s + x] = (bg + jitter).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            // 2x2 replacement target at the centroid
            let ty = (cy.round() as usize).clamp(1, s - 2);
            let tx = (cx.round() as usize).clamp(1, s - 2);
            for v in mask.data_mut() {
                *v = 0.0;
            }
            for dy in 0..2 {
                for dx in 0..2 {
                    let (y, x) = (ty + dy, tx + dx);
                    mask.data_mut()[y * s + x] = 1.0;
                    for ci in 0..c {
                        raster.data_mut()[ci * s * s + y * s + x] = intensity[ci].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(())
}

fn quantize_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = (*v as f32) as f64;
    }
}

fn render_sample(cfg: &GeneratorConfig, id: u32, a: Assignment) -> Result<ImageSample> {
    let mut rng = rng_for_indexed(cfg.seed, "sample", id as u64);
    let s = cfg.image_size;
    let radius =
        cfg.disc_radius.0 + rng.random::<f64>() * (cfg.disc_radius.1 - cfg.disc_radius.0);
    let margin = radius.ceil() + 2.0;
    let span = s as f64 - 2.0 * margin;
    let geo = DiscGeometry {
        cy: margin + rng.random::<f64>() * span,
        cx: margin + rng.random::<f64>() * span,
        radius,
        intensity: cfg.disc_intensity.0
            + rng.random::<f64>() * (cfg.disc_intensity.1 - cfg.disc_intensity.0),
    };
    let mut raster = render_background(cfg, &mut rng);
    let mut mask = if a.present {
        draw_disc(&mut raster, &geo)
    } else {
        Tensor::zeros(&[1, s, s])
    };
    let hard_kind = a.hard_kind.unwrap_or(HardKind::None);
    if let Some(kind) = a.hard_kind {
        let sev = cfg.hard_severity.0
            + rng.random::<f64>() * (cfg.hard_severity.1 - cfg.hard_severity.0);
        make_hard(&mut raster, &mut mask, kind, sev, &mut rng)?;
    }
    let artefact_kind = a.artefact_kind.unwrap_or(ArtefactKind::None);
    if let Some(kind) = a.artefact_kind {
        let phantom;
        let roi_mask = if a.present {
            &mask
        } else {
            phantom = coverage_mask(&geo, s);
            &phantom
        };
        let roi = mask_roi(roi_mask, s);
        let sev = cfg.artefact_severity.0
            + rng.random::<f64>() * (cfg.artefact_severity.1 - cfg.artefact_severity.0);
        corrupt(&mut raster, kind, &roi, a.artefact_in_roi, sev, &mut rng)?;
    }
    quantize_f32(&mut raster);
    Ok(ImageSample {
        id,
        raster,
        mask,
        present: a.present,
        artefact: a.artefact_kind.is_some(),
        artefact_kind,
        artefact_in_roi: a.artefact_kind.is_some() && a.artefact_in_roi,
        hard: a.hard_kind.is_some(),
        hard_kind,
    })
}

/// Generates disjoint train/val/holdout splits; a pure function of the
/// config (per-sample streams are derived from the seed and sample id).
pub fn generate(cfg: &GeneratorConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let sizes = [cfg.train, cfg.val, cfg.holdout];
    let mut offsets = [0u32; 3];
    let mut acc = 0u32;
    for (o, &n) in offsets.iter_mut().zip(&sizes) {
        *o = acc;
        acc += n as u32;
    }
    let mut splits = Vec::with_capacity(3);
    for (si, &n) in sizes.iter().enumerate() {
        let assignments = assign_split(cfg, n, si as u64)?;
        let samples: Vec<ImageSample> = (0..n)
            .into_par_iter()
            .map(|i| render_sample(cfg, offsets[si] + i as u32, assignments[i]))
            .collect::<Result<Vec<_>>>()?;
        splits.push(samples);
    }
    let holdout = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SplitDataset { train, val, holdout })
}

#[derive(Serialize, Deserialize)]
struct DataManifest {
    version: String,
    config: GeneratorConfig,
    samples: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    id: u32,
    split: String,
    present: bool,
    artefact: bool,
    artefact_kind: ArtefactKind,
    artefact_in_roi: bool,
    hard: bool,
    hard_kind: HardKind,
}

fn write_f32_records(path: &Path, tensors: impl Iterator<Item = Tensor>) -> Result<()> {
    let mut bytes = Vec::new();
    for t in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes `manifest.json`, `samples.bin` and `labels.bin` (little-endian
/// 32-bit floats, row-major, samples concatenated in manifest order; labels
/// are one h*w mask per sample).
pub fn save_dataset(dir: &Path, ds: &SplitDataset, cfg: &GeneratorConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metas = Vec::new();
    for (split, samples) in [
        ("train", &ds.train),
        ("val", &ds.val),
        ("holdout", &ds.holdout),
    ] {
        for s in samples {
            metas.push(SampleMeta {
                id: s.id,
                split: split.to_string(),
                present: s.present,
                artefact: s.artefact,
                artefact_kind: s.artefact_kind,
                artefact_in_roi: s.artefact_in_roi,
                hard: s.hard,
                hard_kind: s.hard_kind,
            });
        }
    }
    let manifest = DataManifest {
        version: DATA_VERSION.to_string(),
        config: cfg.clone(),
        samples: metas,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    write_f32_records(
        &dir.join("samples.bin"),
        ds.all_samples().map(|s| s.raster.clone()),
    )?;
    write_f32_records(
        &dir.join("labels.bin"),
        ds.all_samples().map(|s| s.mask.clone()),
    )?;
    Ok(())
}

fn read_f32_record(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let mut data = Vec::with_capacity(n);
    for chunk in buf.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
        if !v.is_finite() {
            return Err(Error::DataFormat("non-finite raster value".into()));
        }
        data.push(v);
    }
    Tensor::from_vec(shape, data)
}

pub fn load_dataset(dir: &Path) -> Result<(SplitDataset, GeneratorConfig)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: DataManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.version != DATA_VERSION {
        return Err(Error::DataFormat(format!(
            "unsupported version `{}`",
            manifest.version
        )));
    }
    let cfg = manifest.config.clone();
    let s = cfg.image_size;
    let raster_shape = [cfg.channels, s, s];
    let mask_shape = [1, s, s];
    let mut samples_file = std::fs::File::open(dir.join("samples.bin"))?;
    let mut labels_file = std::fs::File::open(dir.join("labels.bin"))?;
    let mut ds = SplitDataset {
        train: Vec::new(),
        val: Vec::new(),
        holdout: Vec::new(),
    };
    for meta in &manifest.samples {
        let raster = read_f32_record(&mut samples_file, &raster_shape)?;
        let mask = read_f32_record(&mut labels_file, &mask_shape)?;
        let sample = ImageSample {
            id: meta.id,
            raster,
            mask,
            present: meta.present,
            artefact: meta.artefact,
            artefact_kind: meta.artefact_kind,
            artefact_in_roi: meta.artefact_in_roi,
            hard: meta.hard,
            hard_kind: meta.hard_kind,
        };
        match meta.split.as_str() {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            "holdout" => ds.holdout.push(sample),
            other => {
                return Err(Error::DataFormat(format!("unknown split `{other}`")));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if samples_file.read(&mut trailing)? != 0 {
        return Err(Error::DataFormat("trailing bytes in samples.bin".into()));
    }
    Ok((ds, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn quick_cfg() -> GeneratorConfig {
        GeneratorConfig {
            train: 60,
            val: 20,
            holdout: 20,
            image_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rates_give_clean_easy_samples() {
        let cfg = GeneratorConfig {
            artefact_rates: KindRates {
                gaussian_noise: 0.0,
                stripe: 0.0,
                blur: 0.0,
                channel_misalign: 0.0,
            },
            hard_rates: HardRates {
                low_contrast: 0.0,
                tiny_target: 0.0,
            },
            ..quick_cfg()
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.all_samples().all(|s| !s.artefact && !s.hard));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = quick_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn artefact_count_tracks_rate() {
        let cfg = GeneratorConfig {
            train: 1000,
            val: 10,
            holdout: 10,
            artefact_rates: KindRates {
                gaussian_noise: 0.15,
                stripe: 0.15,
                blur: 0.0,
                channel_misalign: 0.0,
            },
            ..quick_cfg()
        };
        let ds = generate(&cfg).unwrap();
        let count = ds.train.iter().filter(|s| s.artefact).count() as f64;
        let sd = (1000.0f64 * 0.3 * 0.7).sqrt();
        assert!(
            (count - 300.0).abs() <= 3.0 * sd,
            "count {count} vs expected 300"
        );
    }

    #[test]
    fn quadrants_are_populated_when_rates_positive() {
        let cfg = GeneratorConfig {
            require_quadrants: true,
            presence_rate: 1.0,
            ..quick_cfg()
        };
        let ds = generate(&cfg).unwrap();
        for split in [&ds.train, &ds.val, &ds.holdout] {
            for (a, h) in [(false, false), (false, true), (true, false), (true, true)] {
                assert!(
                    split.iter().any(|s| s.artefact == a && s.hard == h),
                    "missing quadrant ({a}, {h})"
                );
            }
        }
    }

    #[test]
    fn corruption_vanishes_with_severity() {
        let mut rng = rng_for(1, "c");
        let base = Tensor::filled(&[1, 16, 16], 0.5);
        let roi = Roi { y0: 4, y1: 12, x0: 4, x1: 12 };
        for kind in [ArtefactKind::GaussianNoise, ArtefactKind::Stripe, ArtefactKind::Blur] {
            let mut t = base.clone();
            corrupt(&mut t, kind, &roi, true, 1e-9, &mut rng).unwrap();
            assert!(t.max_abs_diff(&base).unwrap() < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn full_noise_on_constant_image_spreads() {
        let mut rng = rng_for(2, "c");
        let mut t = Tensor::filled(&[1, 16, 16], 0.5);
        let roi = Roi { y0: 0, y1: 16, x0: 0, x1: 16 };
        corrupt(&mut t, ArtefactKind::GaussianNoise, &roi, true, 1.0, &mut rng).unwrap();
        let mean: f64 = t.iter().sum::<f64>() / t.len() as f64;
        let var: f64 = t.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        assert!(var.sqrt() > 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn out_of_roi_corruption_leaves_target_untouched() {
        let cfg = quick_cfg();
        let mut rng = rng_for(3, "c");
        let mut raster = render_background(&cfg, &mut rng);
        let geo = DiscGeometry { cy: 8.0, cx: 8.0, radius: 3.5, intensity: 0.9 };
        let mask = draw_disc(&mut raster, &geo);
        let roi = mask_roi(&mask, 16);
        let before = raster.clone();
        corrupt(&mut raster, ArtefactKind::Stripe, &roi, false, 0.9, &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if mask.data()[y * 16 + x] > 0.5 {
                    assert_eq!(raster.data()[y * 16 + x], before.data()[y * 16 + x]);
                }
            }
        }
        assert!(raster != before);
    }

    #[test]
    fn unknown_corruption_kind_errors() {
        let mut rng = rng_for(3, "c");
        let mut t = Tensor::filled(&[1, 16, 16], 0.5);
        let roi = Roi { y0: 0, y1: 8, x0: 0, x1: 8 };
        assert!(corrupt(&mut t, ArtefactKind::None, &roi, true, 0.5, &mut rng).is_err());
        assert!(corrupt(&mut t, ArtefactKind::ChannelMisalign, &roi, true, 0.5, &mut rng).is_err());
    }

    #[test]
    fn make_hard_zero_severity_is_identity() {
        let cfg = quick_cfg();
        let mut rng = rng_for(4, "h");
        let mut raster = render_background(&cfg, &mut rng);
        let geo = DiscGeometry { cy: 8.0, cx: 8.0, radius: 4.0, intensity: 0.9 };
        let mut mask = draw_disc(&mut raster, &geo);
        let (r0, m0) = (raster.clone(), mask.clone());
        make_hard(&mut raster, &mut mask, HardKind::LowContrast, 0.0, &mut rng).unwrap();
        assert_eq!(raster, r0);
        assert_eq!(mask, m0);
    }

    #[test]
    fn full_low_contrast_flattens_target() {
        let cfg = quick_cfg();
        let mut rng = rng_for(5, "h");
        let mut raster = render_background(&cfg, &mut rng);
        let geo = DiscGeometry { cy: 8.0, cx: 8.0, radius: 4.0, intensity: 0.95 };
        let mut mask = draw_disc(&mut raster, &geo);
        make_hard(&mut raster, &mut mask, HardKind::LowContrast, 1.0, &mut rng).unwrap();
        let inside = {
            let mut sum = 0.0;
            let mut n = 0.0;
            for (i, &m) in mask.data().iter().enumerate() {
                if m > 0.5 {
                    sum += raster.data()[i];
                    n += 1.0;
                }
            }
            sum / n
        };
        let outside = background_mean(&raster, &mask, 0);
        assert!((inside - outside).abs() < 0.02, "gap {}", (inside - outside).abs());
    }

    #[test]
    fn tiny_target_shrinks_mask() {
        let cfg = quick_cfg();
        let mut rng = rng_for(6, "h");
        let mut raster = render_background(&cfg, &mut rng);
        let geo = DiscGeometry { cy: 8.0, cx: 8.0, radius: 4.0, intensity: 0.9 };
        let mut mask = draw_disc(&mut raster, &geo);
        let old_mask = mask.clone();
        let old_area = old_mask.iter().filter(|&&v| v > 0.5).count();
        assert!(old_area >= 16);
        make_hard(&mut raster, &mut mask, HardKind::TinyTarget, 0.8, &mut rng).unwrap();
        let area = mask.iter().filter(|&&v| v > 0.5).count();
        assert!(area <= 4, "area {area}");
        assert!(crate::tasks::dice(&old_mask, &mask).unwrap() < 0.5);
    }

    #[test]
    fn make_hard_requires_target() {
        let mut rng = rng_for(7, "h");
        let mut raster = Tensor::filled(&[1, 16, 16], 0.4);
        let mut mask = Tensor::zeros(&[1, 16, 16]);
        assert!(make_hard(&mut raster, &mut mask, HardKind::TinyTarget, 0.5, &mut rng).is_err());
    }

    #[test]
    fn out_of_roi_samples_keep_clean_label_region() {
        // stronger form of the corruption contract across generation: for
        // out-of-region artefact samples, the mask region equals the clean
        // rendering pixel for pixel
        let cfg = GeneratorConfig {
            presence_rate: 1.0,
            artefact_in_roi_fraction: 0.0,
            ..quick_cfg()
        };
        let ds = generate(&cfg).unwrap();
        let clean_cfg = GeneratorConfig {
            artefact_rates: KindRates {
                gaussian_noise: 0.0,
                stripe: 0.0,
                blur: 0.0,
                channel_misalign: 0.0,
            },
            hard_rates: HardRates {
                low_contrast: 0.0,
                tiny_target: 0.0,
            },
            ..cfg.clone()
        };
        let clean = generate(&clean_cfg).unwrap();
        let mut checked = 0;
        for (s, cs) in ds.train.iter().zip(&clean.train) {
            if s.artefact && !s.artefact_in_roi && !s.hard {
                let sz = cfg.image_size;
                for y in 0..sz {
                    for x in 0..sz {
                        if s.mask.data()[y * sz + x] > 0.5 {
                            assert_eq!(
                                s.raster.data()[y * sz + x],
                                cs.raster.data()[y * sz + x]
                            );
                        }
                    }
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg();
        let ds = generate(&cfg).unwrap();
        save_dataset(dir.path(), &ds, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(loaded_cfg, cfg);
    }
}
