//! Ground truth: the scalar field being mapped, the obstacle layout, and
//! the point sensor the vehicle samples it with.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::Point;

/// Rectangular domain bounds in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        if !(xmin.is_finite() && xmax.is_finite() && ymin.is_finite() && ymax.is_finite())
            || xmin >= xmax
            || ymin >= ymax
        {
            return Err(Error::InvalidInput(format!(
                "bad bounds [{xmin}, {xmax}] x [{ymin}, {ymax}]"
            )));
        }
        Ok(Self { xmin, xmax, ymin, ymax })
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Bounds pulled in by `margin` on every side.
    pub fn inset(&self, margin: f64) -> Bounds {
        Bounds {
            xmin: self.xmin + margin,
            xmax: self.xmax - margin,
            ymin: self.ymin + margin,
            ymax: self.ymax - margin,
        }
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(p.x.clamp(self.xmin, self.xmax), p.y.clamp(self.ymin, self.ymax))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        Point::new(
            rng.gen_range(self.xmin..=self.xmax),
            rng.gen_range(self.ymin..=self.ymax),
        )
    }
}

/// Regular-grid ground-truth scalar field with bilinear interpolation.
#[derive(Clone, Debug)]
pub struct ScalarField {
    bounds: Bounds,
    nx: usize,
    ny: usize,
    /// Row-major, row index = y, column index = x.
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(bounds: Bounds, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidInput(format!("grid {nx}x{ny} must be at least 2x2")));
        }
        if values.len() != nx * ny {
            return Err(Error::InvalidInput(format!(
                "{} values for a {nx}x{ny} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self { bounds, nx, ny, values })
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn node(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn node_position(&self, ix: usize, iy: usize) -> Point {
        let dx = self.bounds.width() / (self.nx - 1) as f64;
        let dy = self.bounds.height() / (self.ny - 1) as f64;
        Point::new(self.bounds.xmin + ix as f64 * dx, self.bounds.ymin + iy as f64 * dy)
    }

    /// Bilinear interpolation; the query must lie inside the bounds.
    pub fn value_at(&self, p: Point) -> Result<f64> {
        if !self.bounds.contains(p) {
            return Err(Error::InvalidInput(format!(
                "query ({}, {}) outside field bounds",
                p.x, p.y
            )));
        }
        let fx = (p.x - self.bounds.xmin) / self.bounds.width() * (self.nx - 1) as f64;
        let fy = (p.y - self.bounds.ymin) / self.bounds.height() * (self.ny - 1) as f64;
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let v00 = self.node(ix, iy);
        let v10 = self.node(ix + 1, iy);
        let v01 = self.node(ix, iy + 1);
        let v11 = self.node(ix + 1, iy + 1);
        Ok(v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty)
    }

    /// Serialize in the exact text format `load_field` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("FIELD v1\n");
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.bounds.xmin, self.bounds.xmax, self.bounds.ymin, self.bounds.ymax
        );
        let _ = writeln!(out, "{} {}", self.nx, self.ny);
        for iy in 0..self.ny {
            let row: Vec<String> =
                (0..self.nx).map(|ix| self.node(ix, iy).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Parameters for the synthetic ground truth.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticFieldSpec {
    pub bounds: Bounds,
    pub nx: usize,
    pub ny: usize,
    /// Number of Gaussian bumps summed together.
    pub bumps: usize,
    /// Characteristic bump width in meters.
    pub smoothness: f64,
}

impl Default for SyntheticFieldSpec {
    fn default() -> Self {
        Self {
            bounds: Bounds { xmin: 0.0, xmax: 100.0, ymin: 0.0, ymax: 100.0 },
            nx: 101,
            ny: 101,
            bumps: 14,
            smoothness: 14.0,
        }
    }
}

/// Sum of random-amplitude Gaussian bumps, normalized to zero mean and unit
/// variance over the grid. Deterministic per seed.
pub fn generate_synthetic_field(seed: u64, spec: &SyntheticFieldSpec) -> Result<ScalarField> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaChaRng::seed_from_u64(seed);
    let bounds = spec.bounds;
    let mut centers = Vec::with_capacity(spec.bumps);
    for _ in 0..spec.bumps {
        let c = bounds.sample(&mut rng);
        let amplitude: f64 = StandardNormal.sample(&mut rng);
        let width = spec.smoothness * rng.gen_range(0.75..1.25);
        centers.push((c, amplitude, width));
    }

    let mut values = Vec::with_capacity(spec.nx * spec.ny);
    for iy in 0..spec.ny {
        for ix in 0..spec.nx {
            let x = bounds.xmin + bounds.width() * ix as f64 / (spec.nx - 1) as f64;
            let y = bounds.ymin + bounds.height() * iy as f64 / (spec.ny - 1) as f64;
            let mut v = 0.0;
            for (c, a, w) in &centers {
                let d2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
                v += a * (-d2 / (2.0 * w * w)).exp();
            }
            values.push(v);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for v in &mut values {
        *v = (*v - mean) / std;
    }
    ScalarField::new(bounds, spec.nx, spec.ny, values)
}

pub fn load_field(path: &FsPath) -> Result<ScalarField> {
    let text = std::fs::read_to_string(path)?;
    parse_field(&text)
}

pub fn parse_field(text: &str) -> Result<ScalarField> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.to_string()))
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {what}") })
    };
    let (ln, header) = next("header")?;
    if header.trim() != "FIELD v1" {
        return Err(Error::Parse { line: ln, msg: format!("bad header {header:?}, expected FIELD v1") });
    }
    let (ln, bounds_line) = next("bounds")?;
    let parts: Vec<f64> = bounds_line
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad bound {p:?}") }))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::Parse { line: ln, msg: "bounds line needs `xmin xmax ymin ymax`".into() });
    }
    let bounds = Bounds::new(parts[0], parts[1], parts[2], parts[3])?;
    let (ln, dims_line) = next("grid dims")?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad dimension {p:?}") }))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse { line: ln, msg: "dims line needs `nx ny`".into() });
    }
    let (nx, ny) = (dims[0], dims[1]);
    let mut values = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let (ln, row_line) = next(&format!("value row {row}"))?;
        let row_vals: Vec<f64> = row_line
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad value {p:?}") }))
            .collect::<Result<_>>()?;
        if row_vals.len() != nx {
            return Err(Error::Parse {
                line: ln,
                msg: format!("row {row} has {} values, expected {nx}", row_vals.len()),
            });
        }
        values.extend_from_slice(&row_vals);
    }
    ScalarField::new(bounds, nx, ny, values)
}

/// One timestamped point sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub position: Point,
    pub value: f64,
    pub time: f64,
}

/// Point sensor: ground truth plus Gaussian noise from the caller's RNG.
pub fn sense<R: Rng>(
    field: &ScalarField,
    pos: Point,
    time: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<Measurement> {
    let truth = field.value_at(pos)?;
    let value = if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std)
            .map_err(|e| Error::InvalidInput(format!("bad noise std: {e}")))?;
        truth + noise.sample(rng)
    } else {
        truth
    };
    Ok(Measurement { position: pos, value, time })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Obstacle {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Obstacle {
    /// Point containment against the obstacle inflated by `inflation`;
    /// boundary contact counts.
    pub fn contains(&self, p: Point, inflation: f64) -> bool {
        match *self {
            Obstacle::Rect { x0, y0, x1, y1 } => {
                p.x >= x0 - inflation
                    && p.x <= x1 + inflation
                    && p.y >= y0 - inflation
                    && p.y <= y1 + inflation
            }
            Obstacle::Circle { cx, cy, r } => {
                let dx = p.x - cx;
                let dy = p.y - cy;
                dx * dx + dy * dy <= (r + inflation) * (r + inflation)
            }
        }
    }

    fn segment_hits(&self, a: Point, b: Point, inflation: f64) -> bool {
        match *self {
            Obstacle::Rect { x0, y0, x1, y1 } => segment_intersects_aabb(
                a,
                b,
                x0 - inflation,
                y0 - inflation,
                x1 + inflation,
                y1 + inflation,
            ),
            Obstacle::Circle { cx, cy, r } => {
                segment_point_distance_sq(a, b, Point::new(cx, cy))
                    <= (r + inflation) * (r + inflation)
            }
        }
    }
}

fn segment_intersects_aabb(a: Point, b: Point, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (start, delta, lo, hi) in
        [(a.x, b.x - a.x, x0, x1), (a.y, b.y - a.y, y0, y1)]
    {
        if delta == 0.0 {
            if start < lo || start > hi {
                return false;
            }
        } else {
            let inv = 1.0 / delta;
            let mut ta = (lo - start) * inv;
            let mut tb = (hi - start) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn segment_point_distance_sq(a: Point, b: Point, c: Point) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    let t = if len_sq == 0.0 { 0.0 } else { ((c - a).dot(&ab) / len_sq).clamp(0.0, 1.0) };
    let closest = a + ab * t;
    (c - closest).norm_squared()
}

/// Static obstacle layout.
#[derive(Clone, Debug, Default)]
pub struct ObstacleMap {
    obstacles: Vec<Obstacle>,
}

impl ObstacleMap {
    pub fn new(obstacles: Vec<Obstacle>, bounds: &Bounds) -> Result<Self> {
        for (i, o) in obstacles.iter().enumerate() {
            let inside = match *o {
                Obstacle::Rect { x0, y0, x1, y1 } => {
                    x0 < x1
                        && y0 < y1
                        && bounds.contains(Point::new(x0, y0))
                        && bounds.contains(Point::new(x1, y1))
                }
                Obstacle::Circle { cx, cy, r } => {
                    r > 0.0
                        && bounds.contains(Point::new(cx - r, cy - r))
                        && bounds.contains(Point::new(cx + r, cy + r))
                }
            };
            if !inside {
                return Err(Error::InvalidInput(format!(
                    "obstacle {i} ({o:?}) extends outside the domain"
                )));
            }
        }
        Ok(Self { obstacles })
    }

    pub fn empty() -> Self {
        Self { obstacles: Vec::new() }
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn contains(&self, p: Point, inflation: f64) -> bool {
        self.obstacles.iter().any(|o| o.contains(p, inflation))
    }
}

/// True iff the segment a-b touches any obstacle inflated by `inflation`
/// meters. Boundary contact counts as a collision.
pub fn segment_collides(a: Point, b: Point, obstacles: &ObstacleMap, inflation: f64) -> bool {
    obstacles.obstacles.iter().any(|o| o.segment_hits(a, b, inflation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaChaRng;

    fn unit_bounds() -> Bounds {
        Bounds::new(0.0, 100.0, 0.0, 100.0).unwrap()
    }

    #[test]
    fn synthetic_field_is_deterministic_per_seed() {
        let spec = SyntheticFieldSpec::default();
        let a = generate_synthetic_field(42, &spec).unwrap();
        let b = generate_synthetic_field(42, &spec).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_synthetic_field(43, &spec).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn synthetic_field_is_normalized() {
        let spec = SyntheticFieldSpec::default();
        let f = generate_synthetic_field(7, &spec).unwrap();
        let n = f.values.len() as f64;
        let mean = f.values.iter().sum::<f64>() / n;
        let var = f.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "grid mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "grid variance {var}");
    }

    /// Empirical correlation length: first lag at which the isotropic
    /// autocorrelation of grid values drops below 1/2.
    fn correlation_length(field: &ScalarField) -> f64 {
        let (nx, ny) = field.grid_dims();
        let step = field.bounds().width() / (nx - 1) as f64;
        for lag in 1..nx / 2 {
            let mut num = 0.0;
            let mut count = 0.0;
            for iy in 0..ny {
                for ix in 0..(nx - lag) {
                    num += field.node(ix, iy) * field.node(ix + lag, iy);
                    count += 1.0;
                }
            }
            if num / count < 0.5 {
                return lag as f64 * step;
            }
        }
        field.bounds().width() / 2.0
    }

    #[test]
    fn smoothness_scale_increases_correlation_range() {
        let mut last = 0.0;
        for smoothness in [5.0, 12.0, 25.0] {
            let spec = SyntheticFieldSpec { smoothness, ..Default::default() };
            let f = generate_synthetic_field(11, &spec).unwrap();
            let range = correlation_length(&f);
            assert!(
                range > last,
                "range {range} at smoothness {smoothness} not above previous {last}"
            );
            last = range;
        }
    }

    #[test]
    fn flat_two_by_two_grid_reads_zero_everywhere() {
        let f = parse_field("FIELD v1\n0 1 0 1\n2 2\n0 0\n0 0\n").unwrap();
        for p in [Point::new(0.0, 0.0), Point::new(0.5, 0.5), Point::new(1.0, 1.0)] {
            assert_eq!(f.value_at(p).unwrap(), 0.0);
        }
    }

    #[test]
    fn field_file_roundtrips_bit_identically() {
        let f = generate_synthetic_field(3, &SyntheticFieldSpec::default()).unwrap();
        let text = f.to_text();
        let back = parse_field(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.values, f.values);
    }

    #[test]
    fn ragged_row_is_rejected_with_line_number() {
        let text = "FIELD v1\n0 1 0 1\n2 2\n0 0\n0\n";
        match parse_field(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("row 1"), "message {msg:?}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bilinear_is_exact_on_nodes_and_bounded_by_corners() {
        let f = generate_synthetic_field(9, &SyntheticFieldSpec::default()).unwrap();
        let (nx, ny) = f.grid_dims();
        for iy in (0..ny).step_by(17) {
            for ix in (0..nx).step_by(13) {
                let p = f.node_position(ix, iy);
                assert_relative_eq!(f.value_at(p).unwrap(), f.node(ix, iy), epsilon = 1e-9);
            }
        }
        let mut rng = ChaChaRng::seed_from_u64(5);
        for _ in 0..200 {
            let p = f.bounds().sample(&mut rng);
            let v = f.value_at(p).unwrap();
            let fx = (p.x / 100.0) * (nx - 1) as f64;
            let fy = (p.y / 100.0) * (ny - 1) as f64;
            let ix = (fx.floor() as usize).min(nx - 2);
            let iy = (fy.floor() as usize).min(ny - 2);
            let corners = [
                f.node(ix, iy),
                f.node(ix + 1, iy),
                f.node(ix, iy + 1),
                f.node(ix + 1, iy + 1),
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn sensing_at_cell_center_averages_corners() {
        let f = parse_field("FIELD v1\n0 1 0 1\n2 2\n1 2\n3 4\n").unwrap();
        let mut rng = ChaChaRng::seed_from_u64(1);
        let m = sense(&f, Point::new(0.5, 0.5), 0.0, 0.0, &mut rng).unwrap();
        assert_relative_eq!(m.value, 2.5, epsilon = 1e-12);
        let corner = sense(&f, Point::new(0.0, 0.0), 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(corner.value, 1.0);
        assert_eq!(corner.time, 1.0);
    }

    #[test]
    fn sensor_noise_statistics() {
        let f = generate_synthetic_field(2, &SyntheticFieldSpec::default()).unwrap();
        let mut rng = ChaChaRng::seed_from_u64(33);
        let pos = Point::new(50.0, 50.0);
        let n = 10_000;
        let samples: Vec<f64> =
            (0..n).map(|i| sense(&f, pos, i as f64, 0.1, &mut rng).unwrap().value).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std =
            (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "sample std {std}");
    }

    #[test]
    fn sensing_outside_domain_is_an_input_error() {
        let f = generate_synthetic_field(2, &SyntheticFieldSpec::default()).unwrap();
        let mut rng = ChaChaRng::seed_from_u64(1);
        let err = sense(&f, Point::new(-1.0, 5.0), 0.0, 0.0, &mut rng);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn segment_collision_basics() {
        let bounds = unit_bounds();
        let obstacles = ObstacleMap::new(
            vec![
                Obstacle::Rect { x0: 40.0, y0: 40.0, x1: 60.0, y1: 60.0 },
                Obstacle::Circle { cx: 20.0, cy: 80.0, r: 5.0 },
            ],
            &bounds,
        )
        .unwrap();

        // Fully clear of everything.
        assert!(!segment_collides(
            Point::new(0.0, 0.0),
            Point::new(30.0, 10.0),
            &obstacles,
            0.0
        ));
        // One endpoint inside the rectangle.
        assert!(segment_collides(
            Point::new(50.0, 50.0),
            Point::new(90.0, 90.0),
            &obstacles,
            0.0
        ));
        // Passing straight through the rectangle.
        assert!(segment_collides(
            Point::new(30.0, 50.0),
            Point::new(70.0, 50.0),
            &obstacles,
            0.0
        ));
    }

    #[test]
    fn segment_grazing_inflated_circle_counts_as_collision() {
        let bounds = unit_bounds();
        let obstacles = ObstacleMap::new(
            vec![Obstacle::Circle { cx: 50.0, cy: 50.0, r: 5.0 }],
            &bounds,
        )
        .unwrap();
        // Horizontal line exactly (r + inflation) below the center.
        let inflation = 2.0;
        let y = 50.0 - 5.0 - inflation;
        assert!(segment_collides(
            Point::new(0.0, y),
            Point::new(100.0, y),
            &obstacles,
            inflation
        ));
        // A hair farther away must be clear.
        assert!(!segment_collides(
            Point::new(0.0, y - 1e-9),
            Point::new(100.0, y - 1e-9),
            &obstacles,
            inflation
        ));
    }

    #[test]
    fn segment_collision_is_symmetric() {
        let bounds = unit_bounds();
        let obstacles = ObstacleMap::new(
            vec![
                Obstacle::Rect { x0: 10.0, y0: 10.0, x1: 30.0, y1: 20.0 },
                Obstacle::Circle { cx: 70.0, cy: 30.0, r: 8.0 },
            ],
            &bounds,
        )
        .unwrap();
        let mut rng = ChaChaRng::seed_from_u64(8);
        for _ in 0..300 {
            let a = bounds.sample(&mut rng);
            let b = bounds.sample(&mut rng);
            assert_eq!(
                segment_collides(a, b, &obstacles, 1.0),
                segment_collides(b, a, &obstacles, 1.0)
            );
        }
    }

    #[test]
    fn obstacles_must_fit_in_bounds() {
        let bounds = unit_bounds();
        let err = ObstacleMap::new(
            vec![Obstacle::Circle { cx: 99.0, cy: 50.0, r: 5.0 }],
            &bounds,
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
