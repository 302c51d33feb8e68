//! Closed reference track: a dense polyline sampled at uniform arc length,
//! with per-waypoint heading, curvature, speed and border half-spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One reference sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
    pub speed: T,
    pub curvature: T,
}

/// Border constraint `c_right ≤ a·x + b·y ≤ c_left`; `(a, b)` is the left normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace<T> {
    pub a: T,
    pub b: T,
    pub c_left: T,
    pub c_right: T,
}

impl<T: Scalar> HalfSpace<T> {
    pub fn value(&self, x: T, y: T) -> T {
        self.a * x + self.b * y
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        let v = self.value(x, y);
        v >= self.c_right && v <= self.c_left
    }
}

/// Nearest-segment projection of a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    /// Arc length of the foot point, in `[0, length)`.
    pub s: T,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub cte: T,
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackGeometry<T> {
    waypoints: Vec<Waypoint<T>>,
    half_spaces: Vec<HalfSpace<T>>,
    spacing: T,
    half_width: T,
}

impl<T: Scalar> TrackGeometry<T> {
    /// Counter-clockwise ellipse with semi-axes `(ax, ay)`, `n` waypoints,
    /// constant reference `speed` and corridor `half_width`.
    pub fn ellipse(ax: f64, ay: f64, n: usize, speed: f64, half_width: f64) -> Result<Self> {
        if !(ax > 0.0 && ay > 0.0 && speed > 0.0 && half_width > 0.0) || n < 8 {
            return Err(Error::invalid("ellipse track needs positive axes, speed, width and n ≥ 8"));
        }
        // Dense parameter grid, then invert cumulative arc length.
        let fine = 64 * n;
        let point = |t: f64| (ax * t.cos(), ay * t.sin());
        let mut cum = Vec::with_capacity(fine + 1);
        cum.push(0.0);
        let mut prev = point(0.0);
        for i in 1..=fine {
            let p = point(std::f64::consts::TAU * i as f64 / fine as f64);
            let last = *cum.last().unwrap();
            cum.push(last + ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt());
            prev = p;
        }
        let length = cum[fine];
        let mut waypoints = Vec::with_capacity(n);
        let mut j = 0;
        for k in 0..n {
            let target = length * k as f64 / n as f64;
            while cum[j + 1] < target {
                j += 1;
            }
            let frac = (target - cum[j]) / (cum[j + 1] - cum[j]);
            let t = std::f64::consts::TAU * (j as f64 + frac) / fine as f64;
            let (dx, dy) = (-ax * t.sin(), ay * t.cos());
            let denom = (dx * dx + dy * dy).powf(1.5);
            let (x, y) = point(t);
            waypoints.push(Waypoint {
                x: T::of(x),
                y: T::of(y),
                heading: T::of(dy.atan2(dx)),
                speed: T::of(speed),
                curvature: T::of(ax * ay / denom),
            });
        }
        Self::from_waypoints(waypoints, T::of(length / n as f64), T::of(half_width))
    }

    /// Builds half-spaces from waypoints assumed to be uniformly spaced by `spacing`.
    pub fn from_waypoints(waypoints: Vec<Waypoint<T>>, spacing: T, half_width: T) -> Result<Self> {
        if waypoints.len() < 3 || !(spacing > T::zero()) || !(half_width > T::zero()) {
            return Err(Error::invalid("track needs ≥ 3 waypoints, positive spacing and width"));
        }
        let half_spaces = waypoints
            .iter()
            .map(|w| {
                let (a, b) = (-w.heading.sin(), w.heading.cos());
                let c = a * w.x + b * w.y;
                HalfSpace {
                    a,
                    b,
                    c_left: c + half_width,
                    c_right: c - half_width,
                }
            })
            .collect();
        Ok(Self {
            waypoints,
            half_spaces,
            spacing,
            half_width,
        })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn length(&self) -> T {
        self.spacing * T::of(self.waypoints.len() as f64)
    }

    pub fn half_width(&self) -> T {
        self.half_width
    }

    pub fn waypoints(&self) -> &[Waypoint<T>] {
        &self.waypoints
    }

    pub fn half_spaces(&self) -> &[HalfSpace<T>] {
        &self.half_spaces
    }

    /// Wraps an arc length into `[0, length)`.
    pub fn wrap_s(&self, s: T) -> T {
        let l = self.length();
        let w = s % l;
        if w < T::zero() {
            w + l
        } else {
            w
        }
    }

    /// Interpolated reference at arc length `s`; heading is continuous modulo `2π`.
    pub fn sample(&self, s: T) -> Waypoint<T> {
        let s = self.wrap_s(s);
        let pos = s / self.spacing;
        let i = pos.floor().to_usize().unwrap_or(0).min(self.len() - 1);
        let f = pos - T::of(i as f64);
        let a = &self.waypoints[i];
        let b = &self.waypoints[(i + 1) % self.len()];
        let lerp = |p: T, q: T| p + (q - p) * f;
        Waypoint {
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            heading: a.heading + super::wrap_angle(b.heading - a.heading) * f,
            speed: lerp(a.speed, b.speed),
            curvature: lerp(a.curvature, b.curvature),
        }
    }

    /// Border half-space through the reference at arc length `s`, with half-width `w`.
    pub fn half_space_at(&self, s: T, w: T) -> HalfSpace<T> {
        let p = self.sample(s);
        let (a, b) = (-p.heading.sin(), p.heading.cos());
        let c = a * p.x + b * p.y;
        HalfSpace {
            a,
            b,
            c_left: c + w,
            c_right: c - w,
        }
    }

    /// Nearest point on the closed polyline.
    pub fn project(&self, px: T, py: T) -> Projection<T> {
        let n = self.len();
        let mut best = (T::infinity(), T::zero(), T::zero(), 0usize);
        for i in 0..n {
            let a = &self.waypoints[i];
            let b = &self.waypoints[(i + 1) % n];
            let (ex, ey) = (b.x - a.x, b.y - a.y);
            let len2 = ex * ex + ey * ey;
            let (dx, dy) = (px - a.x, py - a.y);
            let t = ((dx * ex + dy * ey) / len2).max(T::zero()).min(T::one());
            let (fx, fy) = (a.x + ex * t - px, a.y + ey * t - py);
            let d2 = fx * fx + fy * fy;
            if d2 < best.0 {
                let cross = ex * dy - ey * dx;
                let cte = d2.sqrt() * if cross < T::zero() { -T::one() } else { T::one() };
                best = (d2, t, cte, i);
            }
        }
        let (_, t, cte, seg) = best;
        Projection {
            s: self.wrap_s((T::of(seg as f64) + t) * self.spacing),
            cte,
            segment: seg,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TrackGeometry<U> {
        let c = |v: T| U::of(v.as_f64());
        TrackGeometry {
            waypoints: self
                .waypoints
                .iter()
                .map(|w| Waypoint {
                    x: c(w.x),
                    y: c(w.y),
                    heading: c(w.heading),
                    speed: c(w.speed),
                    curvature: c(w.curvature),
                })
                .collect(),
            half_spaces: self
                .half_spaces
                .iter()
                .map(|h| HalfSpace {
                    a: c(h.a),
                    b: c(h.b),
                    c_left: c(h.c_left),
                    c_right: c(h.c_right),
                })
                .collect(),
            spacing: c(self.spacing),
            half_width: c(self.half_width),
        }
    }
}
