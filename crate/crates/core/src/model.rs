//! Linear models, piecewise-linear segmentation and FMCD fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `predict(key) = floor(slope * (key - anchor) + intercept)`, clamped.
///
/// Keys are measured from `anchor` (normally the first key the model covers)
/// so that 64-bit keys do not lose precision against a tiny slope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub anchor: u64,
    pub slope: f64,
    pub intercept: f64,
}

impl LinearModel {
    pub const ENCODED_LEN: usize = 24;

    pub fn new(anchor: u64, slope: f64, intercept: f64) -> Self {
        LinearModel { anchor, slope, intercept }
    }

    #[inline]
    pub fn predict_f(&self, key: u64) -> f64 {
        let dx = key as i128 - self.anchor as i128;
        self.slope * dx as f64 + self.intercept
    }

    /// Predicted position clamped to `[0, len)`. Returns 0 when `len == 0`.
    #[inline]
    pub fn predict(&self, key: u64, len: usize) -> usize {
        let p = self.predict_f(key).floor();
        if !(p > 0.0) || len == 0 {
            0
        } else if p >= (len - 1) as f64 {
            len - 1
        } else {
            p as usize
        }
    }

    pub fn to_bytes(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[..8].copy_from_slice(&self.anchor.to_le_bytes());
        out[8..16].copy_from_slice(&self.slope.to_le_bytes());
        out[16..].copy_from_slice(&self.intercept.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        LinearModel {
            anchor: u64::from_le_bytes(b[..8].try_into().unwrap()),
            slope: f64::from_le_bytes(b[8..16].try_into().unwrap()),
            intercept: f64::from_le_bytes(b[16..24].try_into().unwrap()),
        }
    }
}

/// One ε-bounded segment: keys from `first_key` on, `count` of them, whose
/// rank inside the segment is predicted by `model`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub first_key: u64,
    pub model: LinearModel,
    pub count: usize,
}

fn check_sorted(keys: &[u64]) -> Result<()> {
    if let Some(w) = keys.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!("keys not strictly increasing at {} >= {}", w[0], w[1])));
    }
    Ok(())
}

fn check_eps(eps: u64) -> Result<()> {
    if eps == 0 {
        return Err(Error::Input("error bound must be at least 1".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Pt {
    x: i128,
    y: i128,
}

// Direction (dx, dy) with dx > 0 once two distinct keys are involved.
#[derive(Clone, Copy, Debug)]
struct Dir {
    dx: i128,
    dy: i128,
}

impl Dir {
    fn between(from: Pt, to: Pt) -> Dir {
        Dir { dx: to.x - from.x, dy: to.y - from.y }
    }
    fn lt(self, o: Dir) -> bool {
        self.dy * o.dx < o.dy * self.dx
    }
    fn gt(self, o: Dir) -> bool {
        self.dy * o.dx > o.dy * self.dx
    }
}

fn cross(o: Pt, a: Pt, b: Pt) -> i128 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Streaming convex-hull segmentation: each segment is extended until no line
/// can keep every key within ε ranks, which yields the minimum segment count.
struct OptimalBuilder {
    eps: i128,
    points: usize,
    rect: [Pt; 4],
    upper: Vec<Pt>,
    lower: Vec<Pt>,
    upper_start: usize,
    lower_start: usize,
}

impl OptimalBuilder {
    fn new(eps: u64) -> Self {
        let z = Pt { x: 0, y: 0 };
        OptimalBuilder {
            eps: eps as i128,
            points: 0,
            rect: [z; 4],
            upper: Vec::new(),
            lower: Vec::new(),
            upper_start: 0,
            lower_start: 0,
        }
    }

    fn add(&mut self, x: u64, y: usize) -> bool {
        let p1 = Pt { x: x as i128, y: y as i128 + self.eps };
        let p2 = Pt { x: x as i128, y: y as i128 - self.eps };
        if self.points == 0 {
            self.rect[0] = p1;
            self.rect[1] = p2;
            self.upper.clear();
            self.lower.clear();
            self.upper.push(p1);
            self.lower.push(p2);
            self.upper_start = 0;
            self.lower_start = 0;
            self.points = 1;
            return true;
        }
        if self.points == 1 {
            self.rect[2] = p2;
            self.rect[3] = p1;
            self.upper.push(p1);
            self.lower.push(p2);
            self.points = 2;
            return true;
        }
        let slope1 = Dir::between(self.rect[0], self.rect[2]);
        let slope2 = Dir::between(self.rect[1], self.rect[3]);
        let outside1 = Dir::between(self.rect[2], p1).lt(slope1);
        let outside2 = Dir::between(self.rect[3], p2).gt(slope2);
        if outside1 || outside2 {
            return false;
        }

        if Dir::between(self.rect[1], p1).lt(slope2) {
            let mut min = Dir::between(p1, self.lower[self.lower_start]);
            let mut min_i = self.lower_start;
            for i in self.lower_start + 1..self.lower.len() {
                let val = Dir::between(p1, self.lower[i]);
                if val.gt(min) {
                    break;
                }
                min = val;
                min_i = i;
            }
            self.rect[1] = self.lower[min_i];
            self.rect[3] = p1;
            self.lower_start = min_i;

            let mut end = self.upper.len();
            while end >= self.upper_start + 2 && cross(self.upper[end - 2], self.upper[end - 1], p1) <= 0 {
                end -= 1;
            }
            self.upper.truncate(end);
            self.upper.push(p1);
        }

        if Dir::between(self.rect[0], p2).gt(slope1) {
            let mut max = Dir::between(p2, self.upper[self.upper_start]);
            let mut max_i = self.upper_start;
            for i in self.upper_start + 1..self.upper.len() {
                let val = Dir::between(p2, self.upper[i]);
                if val.lt(max) {
                    break;
                }
                max = val;
                max_i = i;
            }
            self.rect[0] = self.upper[max_i];
            self.rect[2] = p2;
            self.upper_start = max_i;

            let mut end = self.lower.len();
            while end >= self.lower_start + 2 && cross(self.lower[end - 2], self.lower[end - 1], p2) >= 0 {
                end -= 1;
            }
            self.lower.truncate(end);
            self.lower.push(p2);
        }

        self.points += 1;
        true
    }

    // Line through the intersection of the two extreme lines with the mean
    // of their slopes. `origin` is the first key; `base` the first rank.
    fn model(&self, origin: u64, base: usize) -> LinearModel {
        let f = |p: Pt| ((p.x - origin as i128) as f64, (p.y - base as i128) as f64);
        if self.points <= 1 {
            let (_, y0) = f(self.rect[0]);
            let (_, y1) = f(self.rect[1]);
            return LinearModel::new(origin, 0.0, (y0 + y1) / 2.0 + 0.5);
        }
        let (p0, p1, p2, p3) = (f(self.rect[0]), f(self.rect[1]), f(self.rect[2]), f(self.rect[3]));
        let s1 = (p2.0 - p0.0, p2.1 - p0.1);
        let s2 = (p3.0 - p1.0, p3.1 - p1.1);
        let min_slope = s1.1 / s1.0;
        let max_slope = s2.1 / s2.0;
        let slope = (min_slope + max_slope) / 2.0;
        let a = s1.0 * s2.1 - s1.1 * s2.0;
        let intercept = if a == 0.0 || !a.is_finite() {
            // Parallel extremes: average the two boundary lines.
            let b1 = p0.1 - slope * p0.0;
            let b2 = p1.1 - slope * p1.0;
            (b1 + b2) / 2.0
        } else {
            let b = ((p1.0 - p0.0) * (p3.1 - p1.1) - (p1.1 - p0.1) * (p3.0 - p1.0)) / a;
            let ix = p0.0 + b * s1.0;
            let iy = p0.1 + b * s1.1;
            iy - ix * slope
        };
        LinearModel::new(origin, slope, intercept + 0.5)
    }
}

/// Minimum-count ε-bounded segmentation of strictly increasing keys.
pub fn optimal_pla(keys: &[u64], eps: u64) -> Result<Vec<SegmentSpec>> {
    check_eps(eps)?;
    check_sorted(keys)?;
    let mut out = Vec::new();
    optimal_pla_with(keys.len(), |i| keys[i], eps, |s| out.push(s));
    Ok(out)
}

/// Segmentation over `n` keys supplied by index; avoids materializing key
/// arrays when segmenting records. Keys must be strictly increasing.
pub fn optimal_pla_with(n: usize, key_at: impl Fn(usize) -> u64, eps: u64, mut emit: impl FnMut(SegmentSpec)) {
    if n == 0 {
        return;
    }
    let mut b = OptimalBuilder::new(eps.max(1));
    let mut start = 0usize;
    let mut i = 0usize;
    while i < n {
        let k = key_at(i);
        if b.add(k, i - start) {
            i += 1;
            continue;
        }
        let first = key_at(start);
        emit(SegmentSpec { first_key: first, model: b.model(first, 0), count: i - start });
        b.points = 0;
        start = i;
    }
    let first = key_at(start);
    emit(SegmentSpec { first_key: first, model: b.model(first, 0), count: n - start });
}

// Exact rational p/q with q > 0.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    p: i128,
    q: i128,
}

impl Ratio {
    fn le(self, o: Ratio) -> bool {
        self.p * o.q <= o.p * self.q
    }
    fn to_f64(self) -> f64 {
        self.p as f64 / self.q as f64
    }
}

/// Shrinking-cone segmentation anchored at each segment's first key.
pub fn greedy_pla(keys: &[u64], eps: u64) -> Result<Vec<SegmentSpec>> {
    check_eps(eps)?;
    check_sorted(keys)?;
    let eps = eps as i128;
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut lo: Option<Ratio> = None;
    let mut hi: Option<Ratio> = None;
    let emit = |out: &mut Vec<SegmentSpec>, start: usize, end: usize, lo: Option<Ratio>, hi: Option<Ratio>| {
        let slope = match (lo, hi) {
            (Some(l), Some(h)) => (l.to_f64() + h.to_f64()) / 2.0,
            _ => 0.0,
        };
        out.push(SegmentSpec {
            first_key: keys[start],
            model: LinearModel::new(keys[start], slope, 0.5),
            count: end - start,
        });
    };
    let mut i = 1;
    while i < keys.len() {
        let dx = (keys[i] - keys[start]) as i128;
        let y = (i - start) as i128;
        let l = Ratio { p: y - eps, q: dx };
        let h = Ratio { p: y + eps, q: dx };
        let fits = lo.is_none_or(|lo| lo.le(h)) && hi.is_none_or(|hi| l.le(hi));
        if fits {
            lo = Some(match lo {
                Some(cur) if l.le(cur) => cur,
                _ => l,
            });
            hi = Some(match hi {
                Some(cur) if cur.le(h) => cur,
                _ => h,
            });
            i += 1;
        } else {
            emit(&mut out, start, i, lo, hi);
            start = i;
            lo = None;
            hi = None;
            i += 1;
        }
    }
    if !keys.is_empty() {
        emit(&mut out, start, keys.len(), lo, hi);
    }
    Ok(out)
}

/// Largest rank error of `seg` over `keys[base..base + seg.count]`.
pub fn max_rank_error(seg: &SegmentSpec, keys: &[u64], base: usize) -> usize {
    (0..seg.count)
        .map(|r| seg.model.predict(keys[base + r], usize::MAX).abs_diff(r))
        .max()
        .unwrap_or(0)
}

/// Maximum number of keys the model sends to one slot.
pub fn conflict_degree(model: &LinearModel, keys: &[u64], slot_count: usize) -> usize {
    if keys.is_empty() || slot_count == 0 {
        return 0;
    }
    // Predictions are monotone for sorted keys, so equal slots are adjacent.
    let mut best = 0;
    let mut run = 0;
    let mut prev = usize::MAX;
    let mut monotone = true;
    for &k in keys {
        let s = model.predict(k, slot_count);
        if prev != usize::MAX && s < prev {
            monotone = false;
            break;
        }
        run = if s == prev { run + 1 } else { 1 };
        best = best.max(run);
        prev = s;
    }
    if monotone {
        return best;
    }
    let mut hist = std::collections::HashMap::new();
    for &k in keys {
        *hist.entry(model.predict(k, slot_count)).or_insert(0usize) += 1;
    }
    hist.into_values().max().unwrap_or(0)
}

/// Fits a model placing `keys` into `slot_count` slots with few conflicts.
/// Returns the model and its conflict degree.
pub fn fmcd_fit(keys: &[u64], slot_count: usize) -> Result<(LinearModel, usize)> {
    if slot_count < keys.len() || slot_count == 0 {
        return Err(Error::Capacity(format!("{} keys do not fit {} slots", keys.len(), slot_count)));
    }
    let n = keys.len();
    let l = slot_count as f64;
    let anchor = keys.first().copied().unwrap_or(0);
    let rel = |i: usize| (keys[i] - anchor) as f64;
    let model = match n {
        0 => LinearModel::new(0, 0.0, 0.0),
        1 => LinearModel::new(anchor, 0.0, (l / 2.0).floor()),
        2 => two_point(anchor, 0.0, rel(1), l),
        _ => {
            // FMCD first; the other members of the two-anchor family only
            // replace it when they strictly lower the degree.
            let mut cands: Vec<LinearModel> = fmcd_search(keys, slot_count).into_iter().collect();
            cands.push(quantile_model(keys, slot_count));
            cands.push(endpoint_model(keys, slot_count));
            let mut d = 1;
            while d * 3 <= n && slot_count > 2 {
                cands.push(span_model(keys, slot_count, d));
                d *= 2;
            }
            let mut best = cands[0];
            let mut best_deg = conflict_degree(&best, keys, slot_count);
            for c in &cands[1..] {
                let deg = conflict_degree(c, keys, slot_count);
                if deg < best_deg {
                    best = *c;
                    best_deg = deg;
                }
            }
            best
        }
    };
    Ok((model, conflict_degree(&model, keys, slot_count)))
}

// Keys at 1/3 and 2/3 of the slot range.
fn two_point(anchor: u64, x1: f64, x2: f64, l: f64) -> LinearModel {
    let (t1, t2) = (l / 3.0, l * 2.0 / 3.0);
    let slope = (t2 - t1) / (x2 - x1);
    LinearModel::new(anchor, slope, t1 - slope * x1)
}

fn fmcd_search(keys: &[u64], slot_count: usize) -> Option<LinearModel> {
    let n = keys.len();
    let l = slot_count as f64;
    if slot_count < 3 {
        return None;
    }
    let anchor = keys[0];
    let rel = |i: usize| (keys[i] - anchor) as f64;
    let span = |d: usize| (rel(n - 1 - d) - rel(d)) / (l - 2.0) + 1e-6;
    let mut i = 0usize;
    let mut d = 1usize;
    let mut ut = span(d);
    while i < n - 1 - d {
        while i + d < n && (keys[i + d] - keys[i]) as f64 >= ut {
            i += 1;
        }
        if i + d >= n {
            break;
        }
        d += 1;
        if d * 3 > n {
            break;
        }
        ut = span(d);
    }
    if d * 3 > n {
        return None;
    }
    Some(span_model(keys, slot_count, d))
}

// Maps keys[d] and keys[n-1-d] one slot inside either end of the slot range.
fn span_model(keys: &[u64], slot_count: usize, d: usize) -> LinearModel {
    let n = keys.len();
    let l = slot_count as f64;
    let anchor = keys[0];
    let rel = |i: usize| (keys[i] - anchor) as f64;
    let ut = (rel(n - 1 - d) - rel(d)) / (l - 2.0) + 1e-6;
    let a = 1.0 / ut;
    let b = (l - a * (rel(n - 1 - d) + rel(d))) / 2.0;
    LinearModel::new(anchor, a, b)
}

fn endpoint_model(keys: &[u64], slot_count: usize) -> LinearModel {
    let n = keys.len();
    let span = (keys[n - 1] - keys[0]) as f64;
    let slope = (slot_count as f64 - 1.0) / span;
    LinearModel::new(keys[0], slope, 0.5)
}

// Fallback: interpolate between the key midpoints at one and two thirds.
fn quantile_model(keys: &[u64], slot_count: usize) -> LinearModel {
    let n = keys.len();
    let anchor = keys[0];
    let rel = |i: usize| (keys[i] - anchor) as f64;
    let gap = slot_count as f64 / n as f64;
    let m1 = (n - 1) / 3;
    let m2 = (n - 1) * 2 / 3;
    let k1 = (rel(m1) + rel(m1 + 1)) / 2.0;
    let k2 = (rel(m2) + rel(m2 + 1)) / 2.0;
    let t1 = m1 as f64 * gap + gap / 2.0;
    let t2 = m2 as f64 * gap + gap / 2.0;
    if k2 <= k1 {
        return two_point(anchor, 0.0, rel(n - 1), slot_count as f64);
    }
    let slope = (t2 - t1) / (k2 - k1);
    LinearModel::new(anchor, slope, t1 - slope * k1)
}
