//! From attention map to instance patches: relative threshold, 4-connected
//! components, score ranking, box rescaling and bilinear crop-resize.
//!
//! Boxes are integer decisions, so no gradient flows through them. Patch
//! pixels come from the input image.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerConfig {
    /// Relative threshold τ: a cell is kept when `Ω ≥ τ · max Ω`.
    pub rel_threshold: f64,
    pub top_k: usize,
    /// Side length of the square patches fed to the instance branch.
    pub patch_size: usize,
    pub min_component_area: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            rel_threshold: 0.5,
            top_k: 4,
            patch_size: 96,
            min_component_area: 2,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return Err(Error::usage("localizer: rel_threshold must lie in (0, 1)"));
        }
        if self.top_k == 0 {
            return Err(Error::usage("localizer: top_k must be at least 1"));
        }
        if self.patch_size == 0 {
            return Err(Error::usage("localizer: patch_size must be positive"));
        }
        Ok(())
    }
}

/// Box in attention-map cells, half-open on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    /// Sum of Ω over the component's cells.
    pub score: f64,
}

impl InstanceBox {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Box in image pixels, half-open on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl PixelBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self { row0, col0, row1, col1 }
    }

    pub fn height(&self) -> usize {
        self.row1.saturating_sub(self.row0)
    }

    pub fn width(&self) -> usize {
        self.col1.saturating_sub(self.col0)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn intersection(&self, other: &PixelBox) -> usize {
        let r0 = self.row0.max(other.row0);
        let r1 = self.row1.min(other.row1);
        let c0 = self.col0.max(other.col0);
        let c1 = self.col1.min(other.col1);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }

    pub fn overlaps(&self, other: &PixelBox) -> bool {
        self.intersection(other) > 0
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One 4-connected component: its cells and tight bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub bbox: InstanceBox,
    pub cells: Vec<(usize, usize)>,
}

fn single_plane(omega: &Tensor4) -> Result<&[f64]> {
    if omega.n() != 1 {
        return Err(Error::shape("localizer", "batch", 1, omega.n()));
    }
    if omega.c() != 1 {
        return Err(Error::shape("localizer", "channel", 1, omega.c()));
    }
    Ok(omega.plane(0, 0))
}

/// `mask(i, j) = Ω(i, j) ≥ τ · max Ω`; all-zero when `max Ω ≤ 0`.
pub fn threshold_mask(omega: &Tensor4, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::usage("threshold_mask: tau must lie in (0, 1)"));
    }
    let plane = single_plane(omega)?;
    let peak = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bits = if peak > 0.0 {
        let cut = tau * peak;
        plane.iter().map(|&v| v >= cut).collect()
    } else {
        vec![false; plane.len()]
    };
    Ok(Mask {
        h: omega.h(),
        w: omega.w(),
        bits,
    })
}

/// 4-connected flood fill. Components smaller than `min_area` cells are
/// dropped; the rest are ordered by `(row0, col0)`.
pub fn connected_components(mask: &Mask, min_area: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut cells = Vec::new();
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / mask.w, i % mask.w);
            cells.push((r, c));
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
            let mut visit = |j: usize| {
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - mask.w);
            }
            if r + 1 < mask.h {
                visit(i + mask.w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < mask.w {
                visit(i + 1);
            }
        }
        if cells.len() >= min_area {
            cells.sort_unstable();
            out.push(Component {
                bbox: InstanceBox {
                    row0: r0,
                    col0: c0,
                    row1: r1,
                    col1: c1,
                    score: 0.0,
                },
                cells,
            });
        }
    }
    out.sort_by_key(|c| (c.bbox.row0, c.bbox.col0));
    out
}

fn rank(a: &InstanceBox, b: &InstanceBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.area().cmp(&a.area()))
        .then_with(|| (a.row0, a.col0).cmp(&(b.row0, b.col0)))
}

/// Scores each component by the sum of Ω over its cells and keeps the best
/// `k`. With no components, returns one box covering the whole map.
pub fn select_top_k(components: &[Component], omega: &Tensor4, k: usize) -> Result<Vec<InstanceBox>> {
    let plane = single_plane(omega)?;
    let w = omega.w();
    if components.is_empty() {
        return Ok(vec![InstanceBox {
            row0: 0,
            col0: 0,
            row1: omega.h(),
            col1: w,
            score: plane.iter().sum(),
        }]);
    }
    let mut boxes: Vec<InstanceBox> = components
        .iter()
        .map(|c| InstanceBox {
            score: c.cells.iter().map(|&(r, col)| plane[r * w + col]).sum(),
            ..c.bbox
        })
        .collect();
    boxes.sort_by(rank);
    boxes.truncate(k.max(1));
    Ok(boxes)
}

/// Scales a map box to image pixels, rounding outward and clamping.
pub fn map_box_to_image(b: &InstanceBox, map_dims: (usize, usize), image_dims: (usize, usize)) -> PixelBox {
    let (h, w) = map_dims;
    let (img_h, img_w) = image_dims;
    let floor = |v: usize, num: usize, den: usize| v * num / den;
    let ceil = |v: usize, num: usize, den: usize| (v * num).div_ceil(den);
    let row0 = floor(b.row0, img_h, h).min(img_h.saturating_sub(1));
    let col0 = floor(b.col0, img_w, w).min(img_w.saturating_sub(1));
    let row1 = ceil(b.row1, img_h, h).clamp(row0 + 1, img_h);
    let col1 = ceil(b.col1, img_w, w).clamp(col0 + 1, img_w);
    PixelBox { row0, col0, row1, col1 }
}

/// Copies a pixel box out of `(1, c, H, W)`.
pub fn crop(image: &Tensor4, b: &PixelBox) -> Result<Tensor4> {
    if b.area() == 0 {
        return Err(Error::usage("crop: zero-area box"));
    }
    if b.row1 > image.h() || b.col1 > image.w() {
        return Err(Error::usage("crop: box extends outside the image"));
    }
    Ok(Tensor4::from_fn([image.n(), image.c(), b.height(), b.width()], |n, c, r, col| {
        image.at(n, c, b.row0 + r, b.col0 + col)
    }))
}

/// Crops `b` and resamples it to `out × out` with half-pixel-centre bilinear
/// interpolation. A crop already of size `out` is returned unchanged.
pub fn crop_resize(image: &Tensor4, b: &PixelBox, out: usize) -> Result<Tensor4> {
    let patch = crop(image, b)?;
    ops::resize_bilinear(&patch, out, out)
}

/// Output of the full localization pipeline on one attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub boxes: Vec<InstanceBox>,
    pub pixel_boxes: Vec<PixelBox>,
}

/// Threshold, components, top-k and rescale to `image_dims`.
pub fn localize(omega: &Tensor4, image_dims: (usize, usize), config: &LocalizerConfig) -> Result<Localization> {
    let mask = threshold_mask(omega, config.rel_threshold)?;
    let components = connected_components(&mask, config.min_component_area);
    let boxes = select_top_k(&components, omega, config.top_k)?;
    let map_dims = (omega.h(), omega.w());
    let pixel_boxes = boxes.iter().map(|b| map_box_to_image(b, map_dims, image_dims)).collect();
    Ok(Localization { boxes, pixel_boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: &[f64]) -> Tensor4 {
        Tensor4::new([1, 1, h, w], values.to_vec()).unwrap()
    }

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut bits = vec![false; h * w];
        for &(r, c) in on {
            bits[r * w + c] = true;
        }
        Mask { h, w, bits }
    }

    #[test]
    fn threshold_examples() {
        let m = threshold_mask(&Tensor4::full([1, 1, 3, 3], 0.7), 0.9).unwrap();
        assert_eq!(m.count(), 9);
        let m = threshold_mask(&map(1, 2, &[0.1, 0.9]), 0.5).unwrap();
        assert_eq!(m.bits, vec![false, true]);
        let m = threshold_mask(&Tensor4::zeros([1, 1, 4, 4]), 0.5).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn threshold_rejects_tau_outside_unit_interval() {
        assert!(threshold_mask(&Tensor4::zeros([1, 1, 2, 2]), 1.0).is_err());
        assert!(threshold_mask(&Tensor4::zeros([1, 1, 2, 2]), 0.0).is_err());
    }

    #[test]
    fn two_blocks_give_two_boxes() {
        let on = [(0, 0), (0, 1), (1, 0), (1, 1), (4, 4), (4, 5), (5, 4), (5, 5)];
        let comps = connected_components(&mask_from(6, 6, &on), 1);
        let boxes: Vec<_> = comps.iter().map(|c| (c.bbox.row0, c.bbox.col0, c.bbox.row1, c.bbox.col1)).collect();
        assert_eq!(boxes, vec![(0, 0, 2, 2), (4, 4, 6, 6)]);
    }

    #[test]
    fn all_ones_and_all_zeros() {
        let full = Mask { h: 3, w: 5, bits: vec![true; 15] };
        let comps = connected_components(&full, 1);
        assert_eq!(comps.len(), 1);
        assert_eq!((comps[0].bbox.row1, comps[0].bbox.col1), (3, 5));
        assert!(connected_components(&Mask { h: 3, w: 5, bits: vec![false; 15] }, 1).is_empty());
    }

    #[test]
    fn diagonal_cells_are_not_connected() {
        let comps = connected_components(&mask_from(2, 2, &[(0, 0), (1, 1)]), 1);
        assert_eq!(comps.len(), 2);
    }

    #[test]
    fn small_components_dropped() {
        let comps = connected_components(&mask_from(4, 4, &[(0, 0), (2, 2), (2, 3)]), 2);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bbox.row0, 2);
    }

    #[test]
    fn components_ordered_by_box_origin() {
        // The L-shape's first raster cell is (0, 3) but its box starts at column 1.
        let on = [(0, 3), (1, 1), (1, 2), (1, 3), (0, 0)];
        let comps = connected_components(&mask_from(3, 4, &on), 1);
        let origins: Vec<_> = comps.iter().map(|c| (c.bbox.row0, c.bbox.col0)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn top_k_by_score() {
        let mut values = vec![0.0; 9 * 3];
        // three single-cell components in row 0, 1, 2 at columns 0, 4, 8
        values[0] = 0.2;
        values[9 + 4] = 0.9;
        values[18 + 8] = 0.5;
        let omega = map(3, 9, &values);
        let comps = connected_components(&threshold_mask(&omega, 0.1).unwrap(), 1);
        let top = select_top_k(&comps, &omega, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].score, 0.9);
        assert_eq!(top[1].score, 0.5);
    }

    #[test]
    fn empty_components_fall_back_to_whole_map() {
        let omega = Tensor4::zeros([1, 1, 5, 7]);
        let top = select_top_k(&[], &omega, 3).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!((top[0].row0, top[0].col0, top[0].row1, top[0].col1), (0, 0, 5, 7));
    }

    #[test]
    fn equal_scores_prefer_larger_area() {
        let mut values = vec![0.0; 4 * 6];
        values[0] = 1.0; // single cell, score 1.0
        values[6 * 2 + 3] = 0.5;
        values[6 * 2 + 4] = 0.5; // two cells, score 1.0
        let omega = map(4, 6, &values);
        let comps = connected_components(&threshold_mask(&omega, 0.4).unwrap(), 1);
        let top = select_top_k(&comps, &omega, 2).unwrap();
        assert_eq!(top[0].area(), 2);
        assert_eq!(top[1].area(), 1);
    }

    #[test]
    fn box_scaling_examples() {
        let b = |r0, c0, r1, c1| InstanceBox { row0: r0, col0: c0, row1: r1, col1: c1, score: 0.0 };
        assert_eq!(map_box_to_image(&b(1, 2, 3, 4), (5, 5), (5, 5)), PixelBox::new(1, 2, 3, 4));
        assert_eq!(map_box_to_image(&b(0, 0, 1, 1), (7, 7), (224, 224)), PixelBox::new(0, 0, 32, 32));
        assert_eq!(map_box_to_image(&b(3, 3, 5, 5), (7, 7), (100, 100)), PixelBox::new(42, 42, 72, 72));
        assert_eq!(map_box_to_image(&b(0, 0, 7, 7), (7, 7), (100, 60)), PixelBox::new(0, 0, 100, 60));
    }

    #[test]
    fn crop_resize_identity_and_constant() {
        let img = Tensor4::from_fn([1, 2, 6, 6], |_, c, h, w| (c * 36 + h * 6 + w) as f64 * 0.37);
        let b = PixelBox::new(1, 2, 5, 6);
        let same = crop_resize(&img, &PixelBox::new(0, 0, 6, 6), 6).unwrap();
        assert_eq!(same, img);
        let sq = crop_resize(&img, &PixelBox::new(1, 1, 5, 5), 4).unwrap();
        assert_eq!(sq, crop(&img, &PixelBox::new(1, 1, 5, 5)).unwrap());
        let flat = Tensor4::full([1, 3, 9, 9], 0.3);
        let up = crop_resize(&flat, &b, 13).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn row_resize_example() {
        let row = Tensor4::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let out = ops::resize_bilinear(&row, 1, 3).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn degenerate_crop_rejected() {
        let img = Tensor4::zeros([1, 1, 4, 4]);
        assert!(crop_resize(&img, &PixelBox::new(2, 2, 2, 3), 4).is_err());
    }

    #[test]
    fn zero_attention_yields_whole_image_patch() {
        let omega = Tensor4::zeros([1, 1, 6, 6]);
        let loc = localize(&omega, (128, 128), &LocalizerConfig::default()).unwrap();
        assert_eq!(loc.pixel_boxes, vec![PixelBox::new(0, 0, 128, 128)]);
    }
}
