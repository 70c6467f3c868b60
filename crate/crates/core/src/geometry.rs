//! Relative polar coordinates between bounding-box centers and their
//! quantization into distance / angle bins.
//!
//! Page coordinates follow the OCR convention: x grows to the right, y grows
//! downward. An angle of `+π/2` therefore means "below", `-π/2` means "above".

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound of normalized page coordinates.
pub const COORD_MAX: u32 = 1000;

/// Axis-aligned box in normalized page coordinates (thousandths of the page).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Contract(alloc::format!(
                "bbox ({x0},{y0},{x1},{y1}) violates 0 <= x0 <= x1 <= 1000, 0 <= y0 <= y1 <= 1000"
            )))
        }
    }

    pub const FULL_PAGE: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: COORD_MAX,
        y1: COORD_MAX,
    };

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= COORD_MAX && self.y1 <= COORD_MAX
    }

    pub fn center(&self) -> Center {
        center(self)
    }

    /// Smallest box covering all of `boxes`, or `None` when empty.
    pub fn hull<'a, I: IntoIterator<Item = &'a BBox>>(boxes: I) -> Option<BBox> {
        boxes.into_iter().fold(None, |acc, b| {
            Some(match acc {
                None => *b,
                Some(a) => BBox {
                    x0: a.x0.min(b.x0),
                    y0: a.y0.min(b.y0),
                    x1: a.x1.max(b.x1),
                    y1: a.y1.max(b.y1),
                },
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub cx: f64,
    pub cy: f64,
}

impl Center {
    pub fn new(cx: f64, cy: f64) -> Self {
        Center { cx, cy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub rho_max: f64,
    pub n_dist_bins: usize,
    pub n_angle_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            rho_max: 500.0,
            n_dist_bins: 4,
            n_angle_bins: 8,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_max > 0.0) || !self.rho_max.is_finite() {
            return Err(Error::Config(alloc::format!("rho_max must be positive, got {}", self.rho_max)));
        }
        if self.n_dist_bins == 0 || self.n_angle_bins == 0 {
            return Err(Error::Config("bin counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of signed bins per axis for the Cartesian baseline.
    pub fn n_cartesian_bins(&self) -> usize {
        2 * self.n_dist_bins
    }
}

/// Quantized `(distance, angle)` of an ordered token pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PolarBinPair {
    pub dist_bin: usize,
    pub angle_bin: usize,
}

/// Quantized signed `(dx, dy)` between top-left corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CartesianBinPair {
    pub dx_bin: usize,
    pub dy_bin: usize,
}

/// Row-major `n × n` matrix of per-pair values; entry `(i, j)` describes
/// token `j` as seen from token `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMatrix<T> {
    n: usize,
    cells: Vec<T>,
}

impl<T: Copy> PairMatrix<T> {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut cells = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                cells.push(f(i, j));
            }
        }
        PairMatrix { n, cells }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.cells[i * self.n + j]
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }
}

pub fn center(b: &BBox) -> Center {
    Center {
        cx: (b.x0 as f64 + b.x1 as f64) / 2.0,
        cy: (b.y0 as f64 + b.y1 as f64) / 2.0,
    }
}

/// Euclidean distance between two centers.
pub fn rho(ci: Center, cj: Center) -> f64 {
    libm::hypot(cj.cx - ci.cx, cj.cy - ci.cy)
}

/// Angle of the displacement `cj - ci` from the x axis, in `(-π, π]`.
/// Identical points give exactly 0.
pub fn theta(ci: Center, cj: Center) -> f64 {
    let dx = cj.cx - ci.cx;
    let dy = cj.cy - ci.cy;
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    let t = libm::atan2(dy, dx);
    if t <= -PI {
        PI
    } else {
        t
    }
}

/// `min(floor(r · n / rho_max), n - 1)`.
pub fn quantize_distance(r: f64, cfg: &BinningConfig) -> usize {
    let n = cfg.n_dist_bins;
    let scaled = libm::floor(r.max(0.0) * n as f64 / cfg.rho_max);
    // saturating float->int cast maps NaN to 0 and huge values to usize::MAX
    (scaled as usize).min(n - 1)
}

/// Full-circle binning: `min(floor((t + π) · n / 2π), n - 1)`.
pub fn quantize_angle(t: f64, cfg: &BinningConfig) -> usize {
    let n = cfg.n_angle_bins;
    let scaled = libm::floor((t + PI).max(0.0) * n as f64 / TAU);
    (scaled as usize).min(n - 1)
}

pub fn polar_bin(ci: Center, cj: Center, cfg: &BinningConfig) -> PolarBinPair {
    PolarBinPair {
        dist_bin: quantize_distance(rho(ci, cj), cfg),
        angle_bin: quantize_angle(theta(ci, cj), cfg),
    }
}

pub fn relative_bins(centers: &[Center], cfg: &BinningConfig) -> PairMatrix<PolarBinPair> {
    PairMatrix::from_fn(centers.len(), |i, j| polar_bin(centers[i], centers[j], cfg))
}

/// Signed offset clipped to `[-rho_max, rho_max]`, quantized into
/// `2 · n_dist_bins` uniform bins. Zero lands on bin `n_dist_bins`.
pub fn quantize_signed(delta: f64, cfg: &BinningConfig) -> usize {
    let n = cfg.n_cartesian_bins();
    let clipped = delta.clamp(-cfg.rho_max, cfg.rho_max);
    let scaled = libm::floor((clipped + cfg.rho_max) * n as f64 / (2.0 * cfg.rho_max));
    (scaled as usize).min(n - 1)
}

/// Top-left-corner offsets of box `j` relative to box `i`.
pub fn cartesian_relative_bins(bboxes: &[BBox], cfg: &BinningConfig) -> PairMatrix<CartesianBinPair> {
    PairMatrix::from_fn(bboxes.len(), |i, j| {
        let (bi, bj) = (bboxes[i], bboxes[j]);
        CartesianBinPair {
            dx_bin: quantize_signed(bj.x0 as f64 - bi.x0 as f64, cfg),
            dy_bin: quantize_signed(bj.y0 as f64 - bi.y0 as f64, cfg),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;
    use proptest::prelude::*;

    fn c(x: f64, y: f64) -> Center {
        Center::new(x, y)
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(&BBox::new(0, 0, 10, 20).unwrap()), c(5.0, 10.0));
        assert_eq!(center(&BBox::new(7, 7, 7, 7).unwrap()), c(7.0, 7.0));
        assert_eq!(center(&BBox::FULL_PAGE), c(500.0, 500.0));
    }

    #[test]
    fn bbox_rejects_inverted_and_out_of_range() {
        assert!(BBox::new(5, 0, 4, 0).is_err());
        assert!(BBox::new(0, 0, 1001, 3).is_err());
        assert!(BBox::new(0, 9, 3, 8).is_err());
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(c(0.0, 0.0), c(3.0, 4.0)), 5.0);
        assert_eq!(rho(c(7.0, 7.0), c(7.0, 7.0)), 0.0);
        assert_eq!(rho(c(1.0, 1.0), c(4.0, 5.0)), 5.0);
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta(c(0.0, 0.0), c(5.0, 0.0)), 0.0);
        assert_eq!(theta(c(0.0, 0.0), c(0.0, 5.0)), FRAC_PI_2);
        assert_eq!(theta(c(3.0, 3.0), c(3.0, 3.0)), 0.0);
        // straight left is +π, never -π
        assert_eq!(theta(c(3.0, 3.0), c(1.0, 3.0)), PI);
    }

    #[test]
    fn quantize_distance_examples() {
        let cfg = BinningConfig::default();
        assert_eq!(quantize_distance(0.0, &cfg), 0);
        assert_eq!(quantize_distance(9999.0, &cfg), 3);
        assert_eq!(quantize_distance(250.0, &cfg), 2);
        assert_eq!(quantize_distance(500.0, &cfg), 3);
        assert_eq!(quantize_distance(f64::INFINITY, &cfg), 3);
    }

    #[test]
    fn quantize_angle_examples() {
        let cfg = BinningConfig::default();
        assert_eq!(quantize_angle(-PI + 1e-9, &cfg), 0);
        assert_eq!(quantize_angle(0.0, &cfg), 4);
        assert_eq!(quantize_angle(PI, &cfg), 7);
        // straight up sits exactly on the lower edge of bin 2
        assert_eq!(quantize_angle(-FRAC_PI_2, &cfg), 2);
    }

    #[test]
    fn relative_bins_examples() {
        let cfg = BinningConfig::default();
        let single = relative_bins(&[c(10.0, 10.0)], &cfg);
        assert_eq!(single.get(0, 0), PolarBinPair { dist_bin: 0, angle_bin: 4 });

        let same = relative_bins(&[c(3.0, 4.0), c(3.0, 4.0)], &cfg);
        assert!(same.cells().iter().all(|p| *p == same.get(0, 0)));

        // three collinear centers rho_max apart, brute-force evaluation of both quantizers
        let pts = [c(0.0, 100.0), c(500.0, 100.0), c(1000.0, 100.0)];
        let m = relative_bins(&pts, &cfg);
        for i in 0..3 {
            for j in 0..3 {
                let p = m.get(i, j);
                if j > i {
                    assert_eq!(p.angle_bin, 4);
                    assert_eq!(p.dist_bin, 3);
                } else if j < i {
                    assert_eq!(p.angle_bin, 7);
                    assert_eq!(p.dist_bin, 3);
                } else {
                    assert_eq!(p, PolarBinPair { dist_bin: 0, angle_bin: 4 });
                }
            }
        }
    }

    #[test]
    fn cartesian_examples() {
        let cfg = BinningConfig::default();
        let b = BBox::new(100, 100, 200, 120).unwrap();
        let m = cartesian_relative_bins(&[b, b], &cfg);
        assert_eq!(m.get(0, 1), CartesianBinPair { dx_bin: 4, dy_bin: 4 });

        let right = BBox::new(600, 100, 700, 120).unwrap();
        let m = cartesian_relative_bins(&[b, right], &cfg);
        assert_eq!(m.get(0, 1), CartesianBinPair { dx_bin: 7, dy_bin: 4 });
        assert_eq!(m.get(1, 0), CartesianBinPair { dx_bin: 0, dy_bin: 4 });
    }

    fn wrap(t: f64) -> f64 {
        let mut w = t;
        while w > PI {
            w -= TAU;
        }
        while w <= -PI {
            w += TAU;
        }
        w
    }

    proptest! {
        #[test]
        fn quantizers_are_total(r in 0.0f64..1e12, t in -PI..=PI, nd in 1usize..16, na in 1usize..32, rmax in 1e-3f64..5e3) {
            let cfg = BinningConfig { rho_max: rmax, n_dist_bins: nd, n_angle_bins: na };
            prop_assert!(quantize_distance(r, &cfg) < nd);
            prop_assert!(quantize_angle(t, &cfg) < na);
            prop_assert!(quantize_signed(r - 5e11, &cfg) < 2 * nd);
        }

        #[test]
        fn distance_quantizer_monotone(a in 0.0f64..2000.0, b in 0.0f64..2000.0) {
            let cfg = BinningConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_distance(lo, &cfg) <= quantize_distance(hi, &cfg));
        }

        #[test]
        fn antipodal_angles(ax in 0.0f64..1000.0, ay in 0.0f64..1000.0, bx in 0.0f64..1000.0, by in 0.0f64..1000.0) {
            prop_assume!(ax != bx || ay != by);
            let (a, b) = (c(ax, ay), c(bx, by));
            let lhs = theta(a, b);
            let rhs = wrap(theta(b, a) + PI);
            prop_assert!((lhs - rhs).abs() < 1e-12 || (lhs - rhs).abs() > TAU - 1e-12);
            prop_assert_eq!(rho(a, b), rho(b, a));
        }

        #[test]
        fn scale_leaves_angle(ax in -500.0f64..500.0, ay in -500.0f64..500.0, bx in -500.0f64..500.0, by in -500.0f64..500.0, s in 0.01f64..100.0) {
            prop_assume!(ax != bx || ay != by);
            let (a, b) = (c(ax, ay), c(bx, by));
            let (sa, sb) = (c(ax * s, ay * s), c(bx * s, by * s));
            prop_assert!((theta(a, b) - theta(sa, sb)).abs() < 1e-9);
            prop_assert!((rho(sa, sb) - s * rho(a, b)).abs() < 1e-9 * (1.0 + s * rho(a, b)));
        }
    }
}
