//! Polygon and mask primitives.
//!
//! Everything downstream (labels, augmentation, evaluation) reduces to two
//! representations: a [`Polygon`] as it appears in YOLO label files, and a
//! dense [`BinaryMask`] on the image pixel grid. Pixel `(x, y)` covers the
//! square `[x, x+1) × [y, y+1)` and is sampled at its center `(x+0.5, y+0.5)`.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon has {0} vertices, at least 3 are required")]
    DegeneratePolygon(usize),
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("buffer length {len} does not match {width}x{height}")]
    BufferLength {
        len: usize,
        width: usize,
        height: usize,
    },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CoordinateSpace {
    /// Coordinates are fractions of the image width and height.
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
    pub space: CoordinateSpace,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>, space: CoordinateSpace) -> Self {
        Self { vertices, space }
    }

    pub fn normalized(vertices: Vec<(f64, f64)>) -> Self {
        Self::new(vertices, CoordinateSpace::Normalized)
    }

    pub fn pixel(vertices: Vec<(f64, f64)>) -> Self {
        Self::new(vertices, CoordinateSpace::Pixel)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Vertices in pixel coordinates for an image of the given size.
    pub fn to_pixel(&self, width: usize, height: usize) -> Polygon {
        match self.space {
            CoordinateSpace::Pixel => self.clone(),
            CoordinateSpace::Normalized => Polygon::pixel(
                self.vertices
                    .iter()
                    .map(|&(x, y)| (x * width as f64, y * height as f64))
                    .collect(),
            ),
        }
    }

    /// Vertices as fractions of the image size.
    pub fn to_normalized(&self, width: usize, height: usize) -> Polygon {
        match self.space {
            CoordinateSpace::Normalized => self.clone(),
            CoordinateSpace::Pixel => Polygon::normalized(
                self.vertices
                    .iter()
                    .map(|&(x, y)| (x / width as f64, y / height as f64))
                    .collect(),
            ),
        }
    }

    /// Signed shoelace area in the polygon's own coordinate space.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon {
        Polygon::new(
            self.vertices
                .iter()
                .map(|&(x, y)| (x + dx, y + dy))
                .collect(),
            self.space,
        )
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if bits.len() != width * height {
            return Err(GeometryError::BufferLength {
                len: bits.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`get`](Self::get) but treats everything outside the grid as background.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates in raster order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}

/// Row-major real raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != width * height {
            return Err(GeometryError::BufferLength {
                len: values.len(),
                width,
                height,
            });
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GeometryError::ValueOutOfRange(bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            values: mask
                .bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Foreground wherever the value is at least `level`.
    pub fn threshold(&self, level: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&v| v >= level).collect(),
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidDimensions { width, height });
    }
    Ok(())
}

/// Fill a polygon with the even-odd rule, sampling each pixel at its center.
///
/// Normalized polygons are scaled to `width × height` first. Vertices outside
/// the grid are allowed; the result is simply clipped.
pub fn rasterize(polygon: &Polygon, width: usize, height: usize) -> Result<BinaryMask> {
    if polygon.len() < 3 {
        return Err(GeometryError::DegeneratePolygon(polygon.len()));
    }
    let mut mask = BinaryMask::new(width, height)?;
    let pts = polygon.to_pixel(width, height).vertices;
    let n = pts.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..height {
        let cy = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > cy) != (yj > cy) {
                crossings.push((xj - xi) * (cy - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        // A center is inside iff an odd number of crossings lie strictly to its
        // right, i.e. it sits in [c[2k], c[2k+1]).
        for span in crossings.chunks_exact(2) {
            let (lo, hi) = (span[0], span[1]);
            let first = (lo - 0.5).ceil().max(0.0);
            if first >= width as f64 {
                continue;
            }
            let mut col = first as usize;
            while col < width && (col as f64 + 0.5) < hi {
                if col as f64 + 0.5 >= lo {
                    mask.set(col, row, true);
                }
                col += 1;
            }
        }
    }
    Ok(mask)
}

/// `|A ∩ B| / |A ∪ B|`, zero when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `2|A ∩ B| / (|A| + |B|)`, zero when both masks are empty.
pub fn mask_dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean of foreground pixel centers.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.iter_set() {
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        n += 1;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Bilinear resampling with corner-aligned pixel centers.
///
/// Output pixel `i` samples source coordinate `i·(in−1)/(out−1)`, so the first
/// and last centers coincide. Equal dimensions return an exact copy.
pub fn resize_bilinear(mask: &SoftMask, new_width: usize, new_height: usize) -> Result<SoftMask> {
    check_dims(new_width, new_height)?;
    if new_width == mask.width && new_height == mask.height {
        return Ok(mask.clone());
    }
    let xs = sample_positions(mask.width, new_width);
    let ys = sample_positions(mask.height, new_height);
    let mut values = Vec::with_capacity(new_width * new_height);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(mask.get(x0, y0), mask.get(x1, y0), tx);
            let bottom = lerp(mask.get(x0, y1), mask.get(x1, y1), tx);
            values.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
        }
    }
    Ok(SoftMask {
        width: new_width,
        height: new_height,
        values,
    })
}

// `a + t(b − a)` returns `a` bit-exactly when `a == b`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Label the 8-connected foreground components, in raster order of their
/// first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut comp = BinaryMask {
            width: w,
            height: h,
            bits: vec![false; w * h],
        };
        label[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            comp.bits[idx] = true;
            let (x, y) = ((idx % w) as isize, (idx / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if mask.get_signed(nx, ny) {
                        let n = ny as usize * w + nx as usize;
                        if label[n] == usize::MAX {
                            label[n] = id;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        components.push(comp);
    }
    components
}

/// Trace the outer boundary of each 8-connected component.
///
/// Boundaries follow pixel edges, so every vertex sits on an integer corner
/// and collinear runs are merged. Rasterizing a returned polygon reproduces
/// its component exactly, except that interior holes come back filled.
pub fn extract_contours(mask: &BinaryMask) -> Vec<Polygon> {
    connected_components(mask)
        .iter()
        .map(trace_outer_boundary)
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Crack {
    from: (i64, i64),
    to: (i64, i64),
    owner: (i64, i64),
}

// Walks the pixel-edge boundary clockwise (y down). At a saddle corner the
// walk crosses over to the diagonal partner pixel, which is what keeps an
// 8-connected component in a single loop.
fn trace_outer_boundary(component: &BinaryMask) -> Polygon {
    let mut outgoing: HashMap<(i64, i64), Vec<Crack>> = HashMap::new();
    let mut start: Option<Crack> = None;
    for (x, y) in component.iter_set() {
        let (xi, yi) = (x as i64, y as i64);
        let inside =
            |dx: i64, dy: i64| component.get_signed((xi + dx) as isize, (yi + dy) as isize);
        let owner = (xi, yi);
        let mut add = |from: (i64, i64), to: (i64, i64)| {
            outgoing
                .entry(from)
                .or_default()
                .push(Crack { from, to, owner });
        };
        if !inside(0, -1) {
            add((xi, yi), (xi + 1, yi));
        }
        if !inside(1, 0) {
            add((xi + 1, yi), (xi + 1, yi + 1));
        }
        if !inside(0, 1) {
            add((xi + 1, yi + 1), (xi, yi + 1));
        }
        if !inside(-1, 0) {
            add((xi, yi + 1), (xi, yi));
        }
        if start.is_none() {
            start = Some(Crack {
                from: (xi, yi),
                to: (xi + 1, yi),
                owner,
            });
        }
    }
    let Some(first) = start else {
        return Polygon::pixel(Vec::new());
    };

    let mut corners = vec![first.from];
    let mut current = first;
    loop {
        let candidates = &outgoing[&current.to];
        let next = if candidates.len() == 1 {
            candidates[0]
        } else {
            *candidates
                .iter()
                .find(|c| c.owner != current.owner)
                .unwrap_or(&candidates[0])
        };
        if next.from == first.from && next.to == first.to {
            break;
        }
        corners.push(next.from);
        current = next;
    }
    Polygon::pixel(
        prune_collinear(&corners)
            .into_iter()
            .map(|(x, y)| (x as f64, y as f64))
            .collect(),
    )
}

fn prune_collinear(ring: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let n = ring.len();
    if n < 3 {
        return ring.to_vec();
    }
    (0..n)
        .filter(|&i| {
            let p = ring[(i + n - 1) % n];
            let c = ring[i];
            let q = ring[(i + 1) % n];
            let cross = (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0);
            // Keep zero-cross reversals (saddle pass-throughs), drop straight runs.
            let dot = (c.0 - p.0) * (q.0 - c.0) + (c.1 - p.1) * (q.1 - c.1);
            cross != 0 || dot < 0
        })
        .map(|i| ring[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pnpoly(pts: &[(f64, f64)], px: f64, py: f64) -> bool {
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh
        })
        .unwrap()
    }

    #[test]
    fn unit_square_covers_everything() {
        let p = Polygon::normalized(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let m = rasterize(&p, 2, 2).unwrap();
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn two_vertices_is_degenerate() {
        let p = Polygon::pixel(vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(
            rasterize(&p, 4, 4),
            Err(GeometryError::DegeneratePolygon(2))
        );
        let tri = Polygon::pixel(vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert!(matches!(
            rasterize(&tri, 0, 4),
            Err(GeometryError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn triangle_matches_pointwise_even_odd() {
        let pts = vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        let m = rasterize(&Polygon::pixel(pts.clone()), 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(
                    m.get(x, y),
                    pnpoly(&pts, x as f64 + 0.5, y as f64 + 0.5),
                    "({x},{y})"
                );
            }
        }
        // Centers on the hypotenuse (x + y = 4) fall outside.
        assert_eq!(m.count(), 6);
    }

    #[test]
    fn self_intersecting_bowtie_uses_even_odd() {
        let pts = vec![(0.0, 0.0), (8.0, 8.0), (8.0, 0.0), (0.0, 8.0)];
        let m = rasterize(&Polygon::pixel(pts.clone()), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), pnpoly(&pts, x as f64 + 0.5, y as f64 + 0.5));
            }
        }
    }

    #[test]
    fn empty_mask_has_no_contours() {
        assert!(extract_contours(&BinaryMask::new(5, 5).unwrap()).is_empty());
    }

    #[test]
    fn filled_block_round_trips() {
        let m = block(5, 5, 1, 1, 3, 3);
        let polys = extract_contours(&m);
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].len(), 4);
        let back = rasterize(&polys[0], 5, 5).unwrap();
        assert!(mask_iou(&m, &back).unwrap() >= 0.95);
        assert_eq!(back, m);
    }

    #[test]
    fn disjoint_blocks_give_two_polygons() {
        let m = block(6, 6, 0, 0, 2, 2)
            .union(&block(6, 6, 4, 4, 2, 2))
            .unwrap();
        assert_eq!(connected_components(&m).len(), 2);
        assert_eq!(extract_contours(&m).len(), 2);
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        // 8-connected through the shared corner at (2, 2).
        let m = block(4, 4, 0, 0, 2, 2)
            .union(&block(4, 4, 2, 2, 2, 2))
            .unwrap();
        let polys = extract_contours(&m);
        assert_eq!(polys.len(), 1);
        assert_eq!(rasterize(&polys[0], 4, 4).unwrap(), m);
    }

    #[test]
    fn checkerboard_component_round_trips() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (x + y) % 2 == 0).unwrap();
        let polys = extract_contours(&m);
        assert_eq!(polys.len(), 1);
        assert_eq!(rasterize(&polys[0], 6, 6).unwrap(), fill_holes(&m));
    }

    // Background pixels not 4-connected to the border become foreground.
    fn fill_holes(m: &BinaryMask) -> BinaryMask {
        let (w, h) = (m.width(), m.height());
        let mut outside = vec![false; w * h];
        let mut stack: Vec<(usize, usize)> = (0..w)
            .flat_map(|x| [(x, 0), (x, h - 1)])
            .chain((0..h).flat_map(|y| [(0, y), (w - 1, y)]))
            .filter(|&(x, y)| !m.get(x, y))
            .collect();
        while let Some((x, y)) = stack.pop() {
            if outside[y * w + x] || m.get(x, y) {
                continue;
            }
            outside[y * w + x] = true;
            if x > 0 {
                stack.push((x - 1, y));
            }
            if x + 1 < w {
                stack.push((x + 1, y));
            }
            if y > 0 {
                stack.push((x, y - 1));
            }
            if y + 1 < h {
                stack.push((x, y + 1));
            }
        }
        BinaryMask::from_fn(w, h, |x, y| !outside[y * w + x]).unwrap()
    }

    #[test]
    fn ring_contour_fills_hole() {
        let m = BinaryMask::from_fn(7, 7, |x, y| {
            (1..6).contains(&x) && (1..6).contains(&y) && !(x == 3 && y == 3)
        })
        .unwrap();
        let polys = extract_contours(&m);
        assert_eq!(polys.len(), 1);
        let back = rasterize(&polys[0], 7, 7).unwrap();
        assert_eq!(back.count(), 25);
    }

    #[test]
    fn iou_and_dsc_half_overlap() {
        let left = BinaryMask::from_fn(4, 4, |x, _| x < 2).unwrap();
        let top = BinaryMask::from_fn(4, 4, |_, y| y < 2).unwrap();
        assert!((mask_iou(&left, &top).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(mask_dsc(&left, &top).unwrap(), 0.5);
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);
        assert_eq!(mask_dsc(&left, &left).unwrap(), 1.0);
        let right = BinaryMask::from_fn(4, 4, |x, _| x >= 2).unwrap();
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);
    }

    #[test]
    fn overlap_of_empties_is_zero() {
        let e = BinaryMask::new(3, 3).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        assert_eq!(mask_dsc(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn overlap_rejects_mismatched_sizes() {
        let a = BinaryMask::new(3, 3).unwrap();
        let b = BinaryMask::new(3, 4).unwrap();
        assert!(matches!(
            mask_iou(&a, &b),
            Err(GeometryError::DimensionMismatch(..))
        ));
        assert!(matches!(
            mask_dsc(&a, &b),
            Err(GeometryError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn centroids() {
        let mut single = BinaryMask::new(5, 5).unwrap();
        single.set(3, 2, true);
        assert_eq!(centroid(&single).unwrap(), (3.5, 2.5));
        let full = BinaryMask::from_fn(4, 4, |_, _| true).unwrap();
        assert_eq!(centroid(&full).unwrap(), (2.0, 2.0));
        let mut l = BinaryMask::new(3, 3).unwrap();
        l.set(0, 0, true);
        l.set(0, 1, true);
        l.set(1, 1, true);
        let (cx, cy) = centroid(&l).unwrap();
        assert!((cx - 2.5 / 3.0).abs() < 1e-12);
        assert!((cy - 3.5 / 3.0).abs() < 1e-12);
        assert_eq!(
            centroid(&BinaryMask::new(2, 2).unwrap()),
            Err(GeometryError::EmptyMask)
        );
    }

    #[test]
    fn resize_identity_and_constants() {
        let m = SoftMask::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&m, 3, 2).unwrap(), m);
        let c = SoftMask::new(5, 4, vec![0.7; 20]).unwrap();
        for (w, h) in [(1, 1), (2, 9), (17, 3), (5, 4)] {
            let r = resize_bilinear(&c, w, h).unwrap();
            assert!(r.values().iter().all(|&v| v == 0.7));
        }
        assert!(resize_bilinear(&c, 0, 3).is_err());
    }

    #[test]
    fn resize_ramp_matches_hand_weights() {
        let m = SoftMask::new(2, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&m, 4, 1).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in r.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(r.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn soft_mask_rejects_out_of_range() {
        assert_eq!(
            SoftMask::new(1, 1, vec![1.5]),
            Err(GeometryError::ValueOutOfRange(1.5))
        );
    }
}
