//! Cells of interest: shapes, configurations, rasterization and mirroring.
//!
//! All coordinates are normalized image fractions in `[0, 1]`, so a single
//! configuration can be realized at any raster size. The order of
//! [`CellConfig::cells`] is canonical: output block `i` of the network maps to
//! `cells()[i]`.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

/// Version tag carried by every configuration document.
pub const CONFIG_VERSION: &str = "yolic-config/1";

/// Default reference raster side used for validation and display.
pub const DEFAULT_REF_SIZE: u32 = 224;

/// Tolerance used when pairing a mirrored cell with an original one.
pub const MIRROR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("cell {index} covers no pixel at {width}x{height}")]
    EmptyCell {
        index: usize,
        width: usize,
        height: usize,
    },
    #[error("raster size must be at least 1x1, got {width}x{height}")]
    BadRasterSize { width: usize, height: usize },
    #[error("invalid configuration: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// A single cell of interest.
#[derive(Debug, Clone, PartialEq)]
pub enum CellShape {
    /// Half-open box `[x0, x1) x [y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Closed polygon; vertices in drawing order, last edge implied.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl CellShape {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        CellShape::Rect { x0, y0, x1, y1 }
    }

    pub fn polygon(vertices: impl Into<Vec<(f64, f64)>>) -> Self {
        CellShape::Polygon {
            vertices: vertices.into(),
        }
    }

    /// Whether the point `(x, y)` lies inside the cell (half-open for rects,
    /// even-odd crossing rule for polygons).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            CellShape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            CellShape::Polygon { vertices } => {
                let mut inside = false;
                for (a, b) in edges(vertices) {
                    if let Some(xi) = edge_crossing(a, b, y) {
                        if x < xi {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    fn mirrored(&self) -> Self {
        match self {
            CellShape::Rect { x0, y0, x1, y1 } => CellShape::Rect {
                x0: 1.0 - x1,
                y0: *y0,
                x1: 1.0 - x0,
                y1: *y1,
            },
            CellShape::Polygon { vertices } => CellShape::Polygon {
                vertices: vertices.iter().map(|&(x, y)| (1.0 - x, y)).collect(),
            },
        }
    }

    fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        match (self, other) {
            (
                CellShape::Rect { x0, y0, x1, y1 },
                CellShape::Rect {
                    x0: u0,
                    y0: v0,
                    x1: u1,
                    y1: v1,
                },
            ) => close(*x0, *u0) && close(*y0, *v0) && close(*x1, *u1) && close(*y1, *v1),
            (CellShape::Polygon { vertices: a }, CellShape::Polygon { vertices: b }) => {
                if a.len() != b.len() {
                    return false;
                }
                let sa = sorted_vertices(a);
                let sb = sorted_vertices(b);
                sa.iter()
                    .zip(&sb)
                    .all(|(p, q)| close(p.0, q.0) && close(p.1, q.1))
            }
            _ => false,
        }
    }
}

fn sorted_vertices(v: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    s
}

fn edges(v: &[(f64, f64)]) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
    (0..v.len()).map(move |i| (v[i], v[(i + 1) % v.len()]))
}

/// X coordinate where the edge `a -> b` crosses the horizontal line at `y`,
/// using the half-open convention that makes vertex hits count once.
#[inline]
fn edge_crossing(a: (f64, f64), b: (f64, f64), y: f64) -> Option<f64> {
    if (a.1 > y) != (b.1 > y) {
        Some((b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0)
    } else {
        None
    }
}

/// One broken invariant. `cell` is `None` for configuration-level problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub cell: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.cell {
            Some(i) => write!(f, "cell {i}: {} ({})", self.rule, self.detail),
            None => write!(f, "config: {} ({})", self.rule, self.detail),
        }
    }
}

/// An ordered set of cells plus the class list they are labelled with.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    name: String,
    ref_width: u32,
    ref_height: u32,
    cells: Vec<CellShape>,
    class_names: Vec<String>,
}

impl CellConfig {
    /// Builds a configuration without checking it; see [`validate_config`].
    pub fn new(
        name: impl Into<String>,
        ref_size: (u32, u32),
        cells: Vec<CellShape>,
        class_names: Vec<String>,
    ) -> Self {
        Self {
            name: name.into(),
            ref_width: ref_size.0,
            ref_height: ref_size.1,
            cells,
            class_names,
        }
    }

    /// Builds a configuration and rejects it if any invariant fails.
    pub fn try_new(
        name: impl Into<String>,
        ref_size: (u32, u32),
        cells: Vec<CellShape>,
        class_names: Vec<String>,
    ) -> Result<Self, ConfigError> {
        let cfg = Self::new(name, ref_size, cells, class_names);
        let v = validate_config(&cfg);
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// A `rows x cols` grid of rects over the full frame, row-major.
    pub fn uniform_grid(name: &str, rows: usize, cols: usize, class_names: &[&str]) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(CellShape::rect(
                    c as f64 / cols as f64,
                    r as f64 / rows as f64,
                    (c + 1) as f64 / cols as f64,
                    (r + 1) as f64 / rows as f64,
                ));
            }
        }
        Self::new(
            name,
            (DEFAULT_REF_SIZE, DEFAULT_REF_SIZE),
            cells,
            class_names.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ref_size(&self) -> (u32, u32) {
        (self.ref_width, self.ref_height)
    }

    pub fn cells(&self) -> &[CellShape] {
        &self.cells
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Total network output width, `N * (M + 1)`.
    pub fn n_outputs(&self) -> usize {
        self.n_cells() * (self.n_classes() + 1)
    }

    pub fn layout(&self) -> LabelLayout {
        LabelLayout {
            n_cells: self.n_cells(),
            n_classes: self.n_classes(),
        }
    }
}

/// The `N x (M + 1)` block structure shared by labels, logits and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LabelLayout {
    pub n_cells: usize,
    pub n_classes: usize,
}

impl LabelLayout {
    pub fn new(n_cells: usize, n_classes: usize) -> Self {
        Self { n_cells, n_classes }
    }

    pub fn block_len(&self) -> usize {
        self.n_classes + 1
    }

    pub fn n_outputs(&self) -> usize {
        self.n_cells * self.block_len()
    }
}

fn check_coord(v: f64) -> bool {
    v.is_finite() && (0.0..=1.0).contains(&v)
}

fn orientation(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed-segment intersection test, touching endpoints included.
pub fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Pairs of non-adjacent edges `(i, j)` that intersect. Empty for a simple polygon.
pub fn crossing_edges(vertices: &[(f64, f64)]) -> Vec<(usize, usize)> {
    let n = vertices.len();
    let mut out = Vec::new();
    if n < 4 {
        return out;
    }
    for i in 0..n {
        for j in (i + 2)..n {
            // first and last edge share vertex 0
            if i == 0 && j == n - 1 {
                continue;
            }
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let (c, d) = (vertices[j], vertices[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Every invariant violation in `cfg`; an empty list means the config is valid.
pub fn validate_config(cfg: &CellConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |cell, rule, detail: String| out.push(Violation { cell, rule, detail });

    if cfg.cells.is_empty() {
        push(None, "N >= 1", "no cells".into());
    }
    if cfg.class_names.is_empty() {
        push(None, "M >= 1", "no classes".into());
    }
    for (k, name) in cfg.class_names.iter().enumerate() {
        if name.trim().is_empty() {
            push(None, "class names nonempty", format!("class {k} has an empty name"));
        }
        if cfg.class_names[..k].contains(name) {
            push(None, "class names unique", format!("class {k} repeats {name:?}"));
        }
    }
    if cfg.ref_width == 0 || cfg.ref_height == 0 {
        push(
            None,
            "ref_size >= 1",
            format!("{}x{}", cfg.ref_width, cfg.ref_height),
        );
    }

    for (i, cell) in cfg.cells.iter().enumerate() {
        let mut shape_ok = true;
        match cell {
            CellShape::Rect { x0, y0, x1, y1 } => {
                for (label, v) in [("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)] {
                    if !check_coord(*v) {
                        shape_ok = false;
                        push(Some(i), "coordinates in [0,1]", format!("{label}={v}"));
                    }
                }
                if !(x0 < x1) {
                    shape_ok = false;
                    push(Some(i), "x0 < x1", format!("x0={x0}, x1={x1}"));
                }
                if !(y0 < y1) {
                    shape_ok = false;
                    push(Some(i), "y0 < y1", format!("y0={y0}, y1={y1}"));
                }
            }
            CellShape::Polygon { vertices } => {
                if vertices.len() < 3 {
                    shape_ok = false;
                    push(
                        Some(i),
                        "polygon has >= 3 vertices",
                        format!("{} vertices", vertices.len()),
                    );
                }
                for (k, &(x, y)) in vertices.iter().enumerate() {
                    if !check_coord(x) || !check_coord(y) {
                        shape_ok = false;
                        push(
                            Some(i),
                            "coordinates in [0,1]",
                            format!("vertex {k} = ({x}, {y})"),
                        );
                    }
                }
                let crossings = crossing_edges(vertices);
                if !crossings.is_empty() {
                    shape_ok = false;
                    push(
                        Some(i),
                        "simple polygon",
                        format!("edges cross at {crossings:?}"),
                    );
                }
            }
        }
        if shape_ok && cfg.ref_width > 0 && cfg.ref_height > 0 {
            let (w, h) = (cfg.ref_width as usize, cfg.ref_height as usize);
            if rasterize_cell(cell, w, h).count == 0 {
                push(
                    Some(i),
                    "rasterizes to >= 1 pixel",
                    format!("empty at {w}x{h}"),
                );
            }
        }
    }
    out
}

/// One rasterized cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    bits: Vec<bool>,
    count: usize,
}

impl CellMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of pixels covered.
    pub fn area(&self) -> usize {
        self.count
    }
}

/// Rasterized realization of a configuration at a given resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMaskSet {
    width: usize,
    height: usize,
    masks: Vec<CellMask>,
}

impl CellMaskSet {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[CellMask] {
        &self.masks
    }

    pub fn mask(&self, cell: usize) -> &CellMask {
        &self.masks[cell]
    }

    pub fn contains(&self, cell: usize, row: usize, col: usize) -> bool {
        self.masks[cell].bits[row * self.width + col]
    }
}

fn rasterize_cell(cell: &CellShape, width: usize, height: usize) -> CellMask {
    let mut bits = vec![false; width * height];
    let mut count = 0;
    let wf = width as f64;
    let hf = height as f64;
    match cell {
        CellShape::Rect { x0, y0, x1, y1 } => {
            for r in 0..height {
                let py = (r as f64 + 0.5) / hf;
                if py < *y0 || py >= *y1 {
                    continue;
                }
                for c in 0..width {
                    let px = (c as f64 + 0.5) / wf;
                    if px >= *x0 && px < *x1 {
                        bits[r * width + c] = true;
                        count += 1;
                    }
                }
            }
        }
        CellShape::Polygon { vertices } => {
            let mut xs = Vec::with_capacity(vertices.len());
            for r in 0..height {
                let py = (r as f64 + 0.5) / hf;
                xs.clear();
                xs.extend(edges(vertices).filter_map(|(a, b)| edge_crossing(a, b, py)));
                if xs.is_empty() {
                    continue;
                }
                xs.sort_by(f64::total_cmp);
                // a center is inside iff an odd number of crossings lie strictly right of it,
                // i.e. it falls in some [xs[2k], xs[2k+1])
                for span in xs.chunks_exact(2) {
                    let (lo, hi) = (span[0], span[1]);
                    let first = ((lo * wf - 0.5).floor() as i64 - 1).max(0) as usize;
                    let last = ((hi * wf).ceil() as i64 + 1).clamp(0, width as i64) as usize;
                    for c in first..last {
                        let px = (c as f64 + 0.5) / wf;
                        if px >= lo && px < hi {
                            let idx = r * width + c;
                            if !bits[idx] {
                                bits[idx] = true;
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    CellMask { bits, count }
}

/// Rasterizes every cell at `width x height` using pixel-center sampling.
pub fn rasterize(cfg: &CellConfig, width: usize, height: usize) -> Result<CellMaskSet, ConfigError> {
    if width == 0 || height == 0 {
        return Err(ConfigError::BadRasterSize { width, height });
    }
    let masks = cfg
        .cells
        .iter()
        .enumerate()
        .map(|(index, cell)| {
            let m = rasterize_cell(cell, width, height);
            if m.count == 0 {
                Err(ConfigError::EmptyCell {
                    index,
                    width,
                    height,
                })
            } else {
                Ok(m)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CellMaskSet {
        width,
        height,
        masks,
    })
}

/// Horizontally mirrors `cfg` (x -> 1 - x) and pairs each mirrored cell with
/// the original cell it coincides with.
///
/// `perm[i]` is the index `j` such that `mirror(cells[i]) == cells[j]`. The
/// permutation is `None` when some cell has no partner, in which case flip
/// augmentation is not label-preserving for this layout.
pub fn mirror_config(cfg: &CellConfig) -> (CellConfig, Option<Vec<usize>>) {
    let mirrored: Vec<CellShape> = cfg.cells.iter().map(CellShape::mirrored).collect();
    let mut perm = Vec::with_capacity(mirrored.len());
    let mut taken = vec![false; cfg.cells.len()];
    let mut complete = true;
    for m in &mirrored {
        match cfg
            .cells
            .iter()
            .enumerate()
            .find(|(j, c)| !taken[*j] && m.approx_eq(c, MIRROR_TOLERANCE))
        {
            Some((j, _)) => {
                taken[j] = true;
                perm.push(j);
            }
            None => {
                complete = false;
                break;
            }
        }
    }
    let out = CellConfig {
        cells: mirrored,
        ..cfg.clone()
    };
    (out, complete.then_some(perm))
}

fn fmt_num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

/// Serializes to the canonical `yolic-config/1` document, one cell per line.
pub fn save_config(cfg: &CellConfig) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("{\n");
    s.push_str(&format!("  \"version\": \"{CONFIG_VERSION}\",\n"));
    s.push_str(&format!(
        "  \"name\": {},\n",
        serde_json::to_string(&cfg.name).expect("string serializes")
    ));
    s.push_str(&format!(
        "  \"ref_size\": [{}, {}],\n",
        cfg.ref_width, cfg.ref_height
    ));
    s.push_str(&format!(
        "  \"classes\": {},\n",
        serde_json::to_string(&cfg.class_names).expect("strings serialize")
    ));
    s.push_str("  \"cells\": [\n");
    for (i, cell) in cfg.cells.iter().enumerate() {
        let body = match cell {
            CellShape::Rect { x0, y0, x1, y1 } => format!(
                "{{\"kind\": \"rect\", \"box\": [{}, {}, {}, {}]}}",
                fmt_num(*x0),
                fmt_num(*y0),
                fmt_num(*x1),
                fmt_num(*y1)
            ),
            CellShape::Polygon { vertices } => {
                let pts: Vec<String> = vertices
                    .iter()
                    .map(|&(x, y)| format!("[{}, {}]", fmt_num(x), fmt_num(y)))
                    .collect();
                format!("{{\"kind\": \"poly\", \"pts\": [{}]}}", pts.join(", "))
            }
        };
        let sep = if i + 1 == cfg.cells.len() { "" } else { "," };
        s.push_str(&format!("    {body}{sep}\n"));
    }
    s.push_str("  ]\n}\n");
    s.into_bytes()
}

fn get<'a>(obj: &'a Value, key: &str, loc: &str) -> Result<&'a Value, ConfigError> {
    obj.get(key)
        .ok_or_else(|| parse_err(loc, format!("missing field `{key}`")))
}

fn as_coord(v: &Value, loc: &str) -> Result<f64, ConfigError> {
    let x = v
        .as_f64()
        .ok_or_else(|| parse_err(loc, "expected a number"))?;
    if !check_coord(x) {
        return Err(parse_err(loc, format!("coordinate {x} outside [0,1]")));
    }
    Ok(x)
}

/// Parses a `yolic-config/1` document. Structural problems (unknown kinds,
/// missing fields, out-of-range coordinates) are rejected with a location;
/// geometric invariants are left to [`validate_config`].
pub fn load_config(bytes: &[u8]) -> Result<CellConfig, ConfigError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| {
        parse_err(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if !root.is_object() {
        return Err(parse_err("document", "expected an object"));
    }
    let version = get(&root, "version", "document")?
        .as_str()
        .ok_or_else(|| parse_err("version", "expected a string"))?;
    if version != CONFIG_VERSION {
        return Err(parse_err(
            "version",
            format!("unsupported version {version:?}, expected {CONFIG_VERSION:?}"),
        ));
    }
    let name = get(&root, "name", "document")?
        .as_str()
        .ok_or_else(|| parse_err("name", "expected a string"))?
        .to_string();

    let ref_size = get(&root, "ref_size", "document")?
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| parse_err("ref_size", "expected [width, height]"))?;
    let mut dims = [0u32; 2];
    for (k, v) in ref_size.iter().enumerate() {
        dims[k] = v
            .as_u64()
            .and_then(|d| u32::try_from(d).ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| parse_err(format!("ref_size[{k}]"), "expected a positive integer"))?;
    }

    let classes = get(&root, "classes", "document")?
        .as_array()
        .ok_or_else(|| parse_err("classes", "expected an array of strings"))?
        .iter()
        .enumerate()
        .map(|(k, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| parse_err(format!("classes[{k}]"), "expected a string"))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let cells_v = get(&root, "cells", "document")?
        .as_array()
        .ok_or_else(|| parse_err("cells", "expected an array"))?;
    let mut cells = Vec::with_capacity(cells_v.len());
    for (i, c) in cells_v.iter().enumerate() {
        let loc = format!("cell {i}");
        let kind = get(c, "kind", &loc)?
            .as_str()
            .ok_or_else(|| parse_err(&loc, "`kind` must be a string"))?;
        let shape = match kind {
            "rect" => {
                let b = get(c, "box", &loc)?
                    .as_array()
                    .filter(|a| a.len() == 4)
                    .ok_or_else(|| parse_err(&loc, "`box` must be [x0, y0, x1, y1]"))?;
                let mut v = [0.0; 4];
                for (k, x) in b.iter().enumerate() {
                    v[k] = as_coord(x, &format!("cell {i} box[{k}]"))?;
                }
                CellShape::rect(v[0], v[1], v[2], v[3])
            }
            "poly" => {
                let pts = get(c, "pts", &loc)?
                    .as_array()
                    .ok_or_else(|| parse_err(&loc, "`pts` must be an array of [x, y]"))?;
                let mut vertices = Vec::with_capacity(pts.len());
                for (k, p) in pts.iter().enumerate() {
                    let pl = format!("cell {i} pts[{k}]");
                    let xy = p
                        .as_array()
                        .filter(|a| a.len() == 2)
                        .ok_or_else(|| parse_err(&pl, "expected [x, y]"))?;
                    vertices.push((as_coord(&xy[0], &pl)?, as_coord(&xy[1], &pl)?));
                }
                CellShape::Polygon { vertices }
            }
            other => {
                return Err(parse_err(&loc, format!("unknown shape kind {other:?}")));
            }
        };
        cells.push(shape);
    }

    Ok(CellConfig {
        name,
        ref_width: dims[0],
        ref_height: dims[1],
        cells,
        class_names: classes,
    })
}
