//! Per-cell multi-label ground truth: mask conversion, annotation files,
//! synthetic scenes and label-aware augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeom::{CellMaskSet, LabelLayout};
use crate::imageio::RgbImage;

/// Annotation file tag.
pub const ANNOTATION_VERSION: &str = "yolic-ann/1";

/// Class id marking unlabelled / background pixels in a [`ClassIdMask`].
pub const SENTINEL: u8 = 255;

/// Default coverage fraction above which a class counts as present in a cell.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("mask is {mask_w}x{mask_h} but cells were rasterized at {cells_w}x{cells_h}")]
    DimensionMismatch {
        mask_w: usize,
        mask_h: usize,
        cells_w: usize,
        cells_h: usize,
    },
    #[error("coverage threshold must be in (0, 1], got {0}")]
    BadTau(String),
    #[error("mask pixel {index} has class id {id} but only {n_classes} classes exist")]
    ClassOutOfRange {
        index: usize,
        id: u8,
        n_classes: usize,
    },
    #[error("line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("expected {expected} cells, found {found}")]
    CellCount { expected: usize, found: usize },
    #[error("label layout {found_cells}x{found_classes} does not match config {expected_cells}x{expected_classes}")]
    LayoutMismatch {
        expected_cells: usize,
        expected_classes: usize,
        found_cells: usize,
        found_classes: usize,
    },
    #[error("cell {0} is both background and object")]
    Exclusivity(usize),
    #[error("configuration has no mirror permutation; flip augmentation is disabled")]
    NoMirror,
    #[error("permutation has length {found}, expected {expected}")]
    BadPermutation { expected: usize, found: usize },
}

/// `N x (M + 1)` binary matrix; in every block of `M + 1` bits the first `M`
/// are object classes and the last is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellLabelVector {
    layout: LabelLayout,
    bits: Vec<u8>,
}

impl CellLabelVector {
    /// All cells background.
    pub fn background(layout: LabelLayout) -> Self {
        let mut bits = vec![0u8; layout.n_outputs()];
        for i in 0..layout.n_cells {
            bits[i * layout.block_len() + layout.n_classes] = 1;
        }
        Self { layout, bits }
    }

    /// Builds from per-cell sets of present classes; background is derived.
    pub fn from_classes(n_classes: usize, cells: &[Vec<usize>]) -> Self {
        let mut out = Self::background(LabelLayout::new(cells.len(), n_classes));
        for (i, set) in cells.iter().enumerate() {
            out.set_classes(i, set);
        }
        out
    }

    /// Raw bits, validated to be 0/1 and of length `N * (M + 1)`. Exclusivity
    /// is not enforced here; see [`CellLabelVector::is_consistent`].
    pub fn from_bits(layout: LabelLayout, bits: Vec<u8>) -> Option<Self> {
        (bits.len() == layout.n_outputs() && bits.iter().all(|&b| b <= 1))
            .then_some(Self { layout, bits })
    }

    pub fn layout(&self) -> LabelLayout {
        self.layout
    }

    pub fn n_cells(&self) -> usize {
        self.layout.n_cells
    }

    pub fn n_classes(&self) -> usize {
        self.layout.n_classes
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn block(&self, cell: usize) -> &[u8] {
        let b = self.layout.block_len();
        &self.bits[cell * b..(cell + 1) * b]
    }

    pub fn object(&self, cell: usize, class: usize) -> bool {
        self.block(cell)[class] == 1
    }

    pub fn is_background(&self, cell: usize) -> bool {
        self.block(cell)[self.layout.n_classes] == 1
    }

    /// Object classes present in `cell`, ascending.
    pub fn classes(&self, cell: usize) -> Vec<usize> {
        let m = self.layout.n_classes;
        self.block(cell)[..m]
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| (b == 1).then_some(k))
            .collect()
    }

    /// Replaces the object bits of `cell` and re-derives its background bit.
    pub fn set_classes(&mut self, cell: usize, classes: &[usize]) {
        let b = self.layout.block_len();
        let m = self.layout.n_classes;
        let block = &mut self.bits[cell * b..(cell + 1) * b];
        block.fill(0);
        for &k in classes {
            block[k] = 1;
        }
        block[m] = u8::from(classes.is_empty());
    }

    /// Background bit set iff no object bit is set, in every cell.
    pub fn is_consistent(&self) -> bool {
        self.first_inconsistent().is_none()
    }

    fn first_inconsistent(&self) -> Option<usize> {
        let m = self.layout.n_classes;
        (0..self.n_cells()).find(|&i| {
            let blk = self.block(i);
            let any = blk[..m].contains(&1);
            (blk[m] == 1) == any
        })
    }

    /// Targets as floats for the loss.
    pub fn to_targets(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Reorders cell blocks: block `j` of the result is block `perm[j]` of `self`.
    pub fn permute_cells(&self, perm: &[usize]) -> Result<Self, LabelError> {
        if perm.len() != self.n_cells() {
            return Err(LabelError::BadPermutation {
                expected: self.n_cells(),
                found: perm.len(),
            });
        }
        let mut bits = Vec::with_capacity(self.bits.len());
        for &src in perm {
            bits.extend_from_slice(self.block(src));
        }
        Ok(Self {
            layout: self.layout,
            bits,
        })
    }
}

/// Per-pixel class ids; [`SENTINEL`] marks background / unlabelled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIdMask {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl ClassIdMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![SENTINEL; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, ids: Vec<u8>) -> Option<Self> {
        (ids.len() == width * height).then_some(Self { width, height, ids })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, id: u8) {
        self.ids[row * self.width + col] = id;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.ids[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    /// Checks every non-sentinel id is below `n_classes`.
    pub fn check_classes(&self, n_classes: usize) -> Result<(), LabelError> {
        match self
            .ids
            .iter()
            .position(|&id| id != SENTINEL && id as usize >= n_classes)
        {
            Some(index) => Err(LabelError::ClassOutOfRange {
                index,
                id: self.ids[index],
                n_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Distils a pixel-wise class mask into per-cell labels: class `k` is present
/// in cell `i` when it covers at least a `tau` fraction of the cell's pixels.
/// Sentinel pixels count towards cell area but towards no class.
pub fn mask_to_labels(
    mask: &ClassIdMask,
    cells: &CellMaskSet,
    n_classes: usize,
    tau: f64,
) -> Result<CellLabelVector, LabelError> {
    if mask.width != cells.width() || mask.height != cells.height() {
        return Err(LabelError::DimensionMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            cells_w: cells.width(),
            cells_h: cells.height(),
        });
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LabelError::BadTau(tau.to_string()));
    }
    mask.check_classes(n_classes)?;
    let mut out = CellLabelVector::background(LabelLayout::new(cells.len(), n_classes));
    let mut counts = vec![0usize; n_classes];
    let mut present = Vec::with_capacity(n_classes);
    for (i, cell) in cells.masks().iter().enumerate() {
        counts.fill(0);
        for (&inside, &id) in cell.bits().iter().zip(&mask.ids) {
            if inside && id != SENTINEL {
                counts[id as usize] += 1;
            }
        }
        let area = cell.area() as f64;
        present.clear();
        present.extend((0..n_classes).filter(|&k| counts[k] as f64 / area >= tau));
        out.set_classes(i, &present);
    }
    Ok(out)
}

/// Serializes labels as `yolic-ann/1`: a header line, then one line of
/// `M + 1` space-separated bits per cell in canonical order.
pub fn write_annotation(labels: &CellLabelVector) -> Vec<u8> {
    let mut s = format!(
        "{ANNOTATION_VERSION} {} {}\n",
        labels.n_cells(),
        labels.n_classes()
    );
    for i in 0..labels.n_cells() {
        let line: Vec<&str> = labels
            .block(i)
            .iter()
            .map(|&b| if b == 1 { "1" } else { "0" })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s.into_bytes()
}

/// Reads a `yolic-ann/1` file against the layout of its configuration.
///
/// A header that declares a different layout is a [`LabelError::LayoutMismatch`];
/// a body with the wrong number of cell lines is a [`LabelError::CellCount`].
pub fn read_annotation(bytes: &[u8], layout: LabelLayout) -> Result<CellLabelVector, LabelError> {
    let ann = |line: usize, message: String| LabelError::Annotation { line, message };
    let text = std::str::from_utf8(bytes).map_err(|e| ann(0, format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| ann(1, "empty file".into()))?;
    let mut h = header.split_whitespace();
    if h.next() != Some(ANNOTATION_VERSION) {
        return Err(ann(1, format!("expected header `{ANNOTATION_VERSION} N M`")));
    }
    let mut num = |what: &str| -> Result<usize, LabelError> {
        h.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ann(1, format!("header is missing {what}")))
    };
    let n = num("N")?;
    let m = num("M")?;
    if n != layout.n_cells || m != layout.n_classes {
        return Err(LabelError::LayoutMismatch {
            expected_cells: layout.n_cells,
            expected_classes: layout.n_classes,
            found_cells: n,
            found_classes: m,
        });
    }

    let body: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.trim().is_empty()).collect();
    if body.len() != n {
        return Err(LabelError::CellCount {
            expected: n,
            found: body.len(),
        });
    }
    let mut bits = Vec::with_capacity(layout.n_outputs());
    for (line_no, line) in body {
        let before = bits.len();
        for tok in line.split_whitespace() {
            match tok {
                "0" => bits.push(0),
                "1" => bits.push(1),
                other => return Err(ann(line_no, format!("non-binary token {other:?}"))),
            }
        }
        let got = bits.len() - before;
        if got != m + 1 {
            return Err(ann(line_no, format!("expected {} bits, found {got}", m + 1)));
        }
    }
    let labels = CellLabelVector { layout, bits };
    if let Some(i) = labels.first_inconsistent() {
        return Err(LabelError::Exclusivity(i));
    }
    Ok(labels)
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape side range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Amplitude of the background texture noise.
    pub noise: f32,
}

impl SceneParams {
    pub fn new(width: usize, height: usize, n_classes: usize) -> Self {
        Self {
            width,
            height,
            n_classes,
            min_shapes: 1,
            max_shapes: 3,
            min_size: 0.2,
            max_size: 0.45,
            noise: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// Pixel-space geometry of one painted shape: the half-open box
/// `[x0, x1) x [y0, y1)` in pixel columns/rows, or the ellipse inscribed in it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PlacedShape {
    /// Whether pixel `(row, col)` is painted by this shape.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        if row < self.y0 || row >= self.y1 || col < self.x0 || col >= self.x1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let cx = (self.x0 + self.x1) as f64 / 2.0;
                let cy = (self.y0 + self.y1) as f64 / 2.0;
                let rx = (self.x1 - self.x0) as f64 / 2.0;
                let ry = (self.y1 - self.y0) as f64 / 2.0;
                let dx = (col as f64 + 0.5 - cx) / rx;
                let dy = (row as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub mask: ClassIdMask,
    pub seed: u64,
    /// Shapes in painting order; later shapes overwrite earlier ones.
    pub shapes: Vec<PlacedShape>,
}

/// Solid colour used for class `k`. Distinct hues, saturated.
pub fn class_color(k: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [0.90, 0.15, 0.10],
        [0.10, 0.80, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.90],
        [0.98, 0.55, 0.05],
        [0.55, 0.30, 0.10],
    ];
    let base = PALETTE[k % PALETTE.len()];
    // cycle brightness for classes beyond the palette
    let dim = 1.0 - 0.35 * ((k / PALETTE.len()) % 2) as f32;
    [base[0] * dim, base[1] * dim, base[2] * dim]
}

/// Paints `shape` into an image/mask pair.
pub fn paint_shape(image: &mut RgbImage, mask: &mut ClassIdMask, shape: &PlacedShape) {
    let color = class_color(shape.class as usize);
    for r in shape.y0..shape.y1 {
        for c in shape.x0..shape.x1 {
            if shape.covers(r, c) {
                image.set_pixel(r, c, color);
                mask.set(r, c, shape.class);
            }
        }
    }
}

/// Generates a deterministic synthetic scene: a smooth grey textured
/// background with solid per-class rectangles and ellipses on top.
pub fn synth_scene(params: &SceneParams, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (params.width, params.height);
    let mut image = RgbImage::new(w, h);
    let base: f32 = rng.random_range(0.35..0.6);
    let (gx, gy): (f32, f32) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for r in 0..h {
        for c in 0..w {
            let g = base + gx * (c as f32 / w as f32 - 0.5) + gy * (r as f32 / h as f32 - 0.5);
            let mut px = [0.0; 3];
            for v in &mut px {
                let n: f32 = rng.random_range(-1.0..1.0);
                *v = (g + params.noise * n).clamp(0.0, 1.0);
            }
            image.set_pixel(r, c, px);
        }
    }
    let mut mask = ClassIdMask::new(w, h);
    let count = if params.max_shapes > params.min_shapes {
        rng.random_range(params.min_shapes..=params.max_shapes)
    } else {
        params.min_shapes
    };
    let mut shapes = Vec::with_capacity(count);
    if params.n_classes > 0 {
        for _ in 0..count {
            let sw = ((rng.random_range(params.min_size..=params.max_size) * w as f64).round()
                as usize)
                .clamp(1, w);
            let sh = ((rng.random_range(params.min_size..=params.max_size) * h as f64).round()
                as usize)
                .clamp(1, h);
            let x0 = rng.random_range(0..=w - sw);
            let y0 = rng.random_range(0..=h - sh);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Ellipse
            };
            let class = rng.random_range(0..params.n_classes.min(SENTINEL as usize)) as u8;
            let shape = PlacedShape {
                kind,
                class,
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            };
            paint_shape(&mut image, &mut mask, &shape);
            shapes.push(shape);
        }
    }
    SyntheticScene {
        image,
        mask,
        seed,
        shapes,
    }
}

/// Horizontal flip of an image with its labels remapped by the mirror
/// permutation (`perm[i]` is the cell that cell `i` mirrors onto).
pub fn flip_example(
    image: &RgbImage,
    labels: &CellLabelVector,
    perm: Option<&[usize]>,
) -> Result<(RgbImage, CellLabelVector), LabelError> {
    let perm = perm.ok_or(LabelError::NoMirror)?;
    Ok((image.flip_horizontal(), labels.permute_cells(perm)?))
}

/// Per-channel affine perturbation `gain * v + bias`, clamped to `[0, 1]`,
/// with gain in `[1 - s, 1 + s]` and bias in `[-s/4, s/4]`.
pub fn color_jitter(image: &RgbImage, strength: f32, seed: u64) -> RgbImage {
    let s = strength.clamp(0.0, 1.0);
    if s == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gain = [1.0f32; 3];
    let mut bias = [0.0f32; 3];
    for k in 0..3 {
        gain[k] = rng.random_range(1.0 - s..=1.0 + s);
        bias[k] = rng.random_range(-s / 4.0..=s / 4.0);
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for k in 0..3 {
            px[k] = (gain[k] * px[k] + bias[k]).clamp(0.0, 1.0);
        }
    }
    out
}
