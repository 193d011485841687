//! Classical visual checks for site plans and the deterministic rule-pack
//! evaluator.

use std::collections::BTreeMap;
use std::path::Path;

use image::{imageops, GrayImage, Luma};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::docmodel::{BoundingBox, DocumentBundle, Page};
use crate::extraction::normalize_scale;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub page_index: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum VisError {
    #[error("template {tw}x{th} does not fit page {pw}x{ph}")]
    TemplateTooLarge { tw: u32, th: u32, pw: u32, ph: u32 },
    #[error("unknown region selector {0:?}")]
    UnknownRegion(String),
    #[error("invalid rule pack: {0}")]
    InvalidPack(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Greedy non-maximum suppression. Detections are visited by descending
/// score (ties by ascending page, x, y); one is dropped when its IoU with an
/// already kept detection of the same label on the same page exceeds
/// `iou_threshold`.
pub fn non_max_suppression(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.page_index.cmp(&b.page_index))
            .then(a.bbox.x.cmp(&b.bbox.x))
            .then(a.bbox.y.cmp(&b.bbox.y))
            .then(a.bbox.w.cmp(&b.bbox.w))
            .then(a.bbox.h.cmp(&b.bbox.h))
            .then(a.label.cmp(&b.label))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept.iter().any(|k| k.label == d.label && k.page_index == d.page_index && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

struct Integral {
    width: usize,
    sum: Vec<u64>,
    sq: Vec<u64>,
}

impl Integral {
    fn of(ink: &[u8], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut sum = vec![0u64; stride * (height + 1)];
        let mut sq = vec![0u64; stride * (height + 1)];
        for y in 0..height {
            let (mut rs, mut rq) = (0u64, 0u64);
            for x in 0..width {
                let v = ink[y * width + x] as u64;
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Integral { width, sum, sq }
    }

    fn window(&self, x: usize, y: usize, w: usize, h: usize) -> (u64, u64) {
        let s = self.width + 1;
        let at = |t: &Vec<u64>, xx: usize, yy: usize| t[yy * s + xx];
        let f = |t: &Vec<u64>| at(t, x + w, y + h) + at(t, x, y) - at(t, x + w, y) - at(t, x, y + h);
        (f(&self.sum), f(&self.sq))
    }
}

fn inverted(img: &GrayImage) -> Vec<u8> {
    img.as_raw().iter().map(|&p| 255 - p).collect()
}

/// Zero-mean normalized cross-correlation of `template` at every offset of
/// `page_img`, clamped to `[0, 1]`. Row-major, `(W-w+1) x (H-h+1)`.
/// Windows with zero variance score 0.
pub fn ncc_map(page_img: &GrayImage, template: &GrayImage) -> Vec<f32> {
    let (pw, ph) = (page_img.width() as usize, page_img.height() as usize);
    let (tw, th) = (template.width() as usize, template.height() as usize);
    if tw > pw || th > ph || tw == 0 || th == 0 {
        return Vec::new();
    }
    let page = inverted(page_img);
    let tmpl = inverted(template);
    let n = (tw * th) as f64;
    let s_t: f64 = tmpl.iter().map(|&v| v as f64).sum();
    let s_tt: f64 = tmpl.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let var_t = n * s_tt - s_t * s_t;
    let (ow, oh) = (pw - tw + 1, ph - th + 1);
    if var_t <= 0.0 {
        return vec![0.0; ow * oh];
    }
    // Template ink as horizontal runs of equal value: (row, x0, x1, value).
    let mut runs: Vec<(usize, usize, usize, u64)> = Vec::new();
    for ty in 0..th {
        let row = &tmpl[ty * tw..(ty + 1) * tw];
        let mut x = 0;
        while x < tw {
            let v = row[x];
            let start = x;
            while x < tw && row[x] == v {
                x += 1;
            }
            if v > 0 {
                runs.push((ty, start, x, v as u64));
            }
        }
    }
    let stride = pw + 1;
    let mut row_prefix = vec![0u64; stride * ph];
    for y in 0..ph {
        for x in 0..pw {
            row_prefix[y * stride + x + 1] = row_prefix[y * stride + x] + page[y * pw + x] as u64;
        }
    }
    let integral = Integral::of(&page, pw, ph);
    let mut out = vec![0f32; ow * oh];
    out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        for (x, cell) in row.iter_mut().enumerate() {
            let (s_p, s_pp) = integral.window(x, y, tw, th);
            if s_p == 0 {
                continue;
            }
            let (s_p, s_pp) = (s_p as f64, s_pp as f64);
            let var_p = n * s_pp - s_p * s_p;
            if var_p <= 0.0 {
                continue;
            }
            let s_tp: u64 = runs
                .iter()
                .map(|&(ty, x0, x1, t)| {
                    let r = (y + ty) * stride + x;
                    t * (row_prefix[r + x1] - row_prefix[r + x0])
                })
                .sum();
            let num = n * s_tp as f64 - s_t * s_p;
            *cell = (num / (var_t * var_p).sqrt()).clamp(0.0, 1.0) as f32;
        }
    });
    out
}

/// Local maxima of a score map (3x3 neighborhood; plateaus yield their
/// first cell in raster order) at or above `threshold`.
fn peaks(map: &[f32], w: usize, h: usize, threshold: f64) -> Vec<(usize, usize, f32)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if (v as f64) < threshold {
                continue;
            }
            let mut is_peak = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let u = map[ny as usize * w + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if u > v || (earlier && u == v) {
                        is_peak = false;
                        break 'n;
                    }
                }
            }
            if is_peak {
                out.push((x, y, v));
            }
        }
    }
    out
}

/// The four right-angle rotations of a template.
pub fn right_angle_rotations(template: &GrayImage) -> [GrayImage; 4] {
    [template.clone(), imageops::rotate90(template), imageops::rotate180(template), imageops::rotate270(template)]
}

/// Template matching over right-angle rotations, followed by NMS at IoU 0.5.
pub fn detect_template(page: &Page, template: &GrayImage, label: &str, threshold: f64) -> Result<Vec<Detection>, VisError> {
    let (tw, th) = template.dimensions();
    let fits = |w: u32, h: u32| w <= page.width && h <= page.height;
    if !fits(tw, th) && !fits(th, tw) {
        return Err(VisError::TemplateTooLarge { tw, th, pw: page.width, ph: page.height });
    }
    let mut dets = Vec::new();
    for rot in right_angle_rotations(template) {
        let (rw, rh) = rot.dimensions();
        if !fits(rw, rh) {
            continue;
        }
        let map = ncc_map(&page.image, &rot);
        let (ow, oh) = ((page.width - rw + 1) as usize, (page.height - rh + 1) as usize);
        for (x, y, s) in peaks(&map, ow, oh, threshold) {
            dets.push(Detection { label: label.to_string(), bbox: BoundingBox { x: x as u32, y: y as u32, w: rw, h: rh }, score: s as f64, page_index: page.index });
        }
    }
    Ok(non_max_suppression(&dets, 0.5))
}

/// Fixed gradient-magnitude threshold (|gx| + |gy| with central differences).
pub const EDGE_THRESHOLD: i32 = 128;

/// Binary edge map, row-major.
pub fn edge_map(img: &GrayImage) -> Vec<bool> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.as_raw();
    let at = |x: usize, y: usize| px[y * w + x] as i32;
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            out[y * w + x] = gx.abs() + gy.abs() >= EDGE_THRESHOLD;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub page_index: u32,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl LineSegment {
    pub fn length(&self) -> f64 {
        (self.x1 - self.x0).hypot(self.y1 - self.y0)
    }

    /// Direction in degrees, `[0, 180)`, with 0 horizontal.
    pub fn angle_deg(&self) -> f64 {
        let a = (self.y1 - self.y0).atan2(self.x1 - self.x0).to_degrees();
        let a = a.rem_euclid(180.0);
        if a >= 179.9999 {
            0.0
        } else {
            a
        }
    }

    fn unit(&self) -> (f64, f64) {
        let l = self.length().max(f64::EPSILON);
        ((self.x1 - self.x0) / l, (self.y1 - self.y0) / l)
    }
}

const THETA_BINS: usize = 180;
const PEAK_RADIUS: i64 = 2;
const GAP_TOLERANCE: usize = 1;
const MERGE_ANGLE_DEG: f64 = 2.0;
const MERGE_DISTANCE: f64 = 4.0;
const JOIN_DISTANCE: f64 = 4.0;

fn trace_line(edges: &[bool], w: usize, h: usize, theta: f64, rho: f64, min_length: f64, page_index: u32) -> Vec<LineSegment> {
    let (c, s) = (theta.cos(), theta.sin());
    let (dx, dy) = (-s, c);
    let diag = ((w * w + h * h) as f64).sqrt().ceil() as i64;
    let on = |t: f64| {
        let (bx, by) = (rho * c + t * dx, rho * s + t * dy);
        (-1i32..=1).any(|k| {
            let (x, y) = ((bx + k as f64 * c).round(), (by + k as f64 * s).round());
            x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && edges[y as usize * w + x as usize]
        })
    };
    let point = |t: f64| (rho * c + t * dx, rho * s + t * dy);
    let mut out = Vec::new();
    let mut run: Option<(i64, i64)> = None;
    let mut gap = 0usize;
    let mut flush = |run: &mut Option<(i64, i64)>| {
        if let Some((a, b)) = run.take() {
            if (b - a) as f64 + 1.0 >= min_length {
                let (x0, y0) = point(a as f64);
                let (x1, y1) = point(b as f64);
                out.push(LineSegment { page_index, x0, y0, x1, y1 });
            }
        }
    };
    // Range of t for which the line is inside the image.
    let (mut t_lo, mut t_hi) = (-(diag as f64), diag as f64);
    for (p0, d, lim) in [(rho * c, dx, w as f64), (rho * s, dy, h as f64)] {
        if d.abs() < 1e-9 {
            continue;
        }
        let (a, b) = ((-1.5 - p0) / d, (lim + 0.5 - p0) / d);
        t_lo = t_lo.max(a.min(b));
        t_hi = t_hi.min(a.max(b));
    }
    for t in (t_lo.floor() as i64).max(-diag)..=(t_hi.ceil() as i64).min(diag) {
        if on(t as f64) {
            run = Some(match run {
                Some((a, _)) => (a, t),
                None => (t, t),
            });
            gap = 0;
        } else if run.is_some() {
            gap += 1;
            if gap > GAP_TOLERANCE {
                flush(&mut run);
                gap = 0;
            }
        }
    }
    flush(&mut run);
    out
}

const CONSUME_RADIUS: f64 = 3.0;
const REFINE_RADIUS: f64 = 6.0;

fn dist_to_segment(px: f64, py: f64, s: &LineSegment) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let l2 = vx * vx + vy * vy;
    let t = if l2 == 0.0 { 0.0 } else { (((px - s.x0) * vx + (py - s.y0) * vy) / l2).clamp(0.0, 1.0) };
    (px - s.x0 - t * vx).hypot(py - s.y0 - t * vy)
}

/// Unit steps along `seg` that have an unconsumed edge within one pixel.
fn fresh_support(fresh: &[bool], w: usize, h: usize, seg: &LineSegment) -> f64 {
    let steps = seg.length().round() as usize;
    let (ux, uy) = seg.unit();
    (0..=steps)
        .filter(|&i| {
            let (bx, by) = (seg.x0 + i as f64 * ux, seg.y0 + i as f64 * uy);
            (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (x, y) = (bx.round() as i64 + dx, by.round() as i64 + dy);
                    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && fresh[y as usize * w + x as usize]
                })
            })
        })
        .count() as f64
}

fn stroke_window(w: usize, h: usize, seg: &LineSegment, radius: f64) -> (usize, usize, usize, usize) {
    let x_lo = (seg.x0.min(seg.x1) - radius).floor().max(0.0) as usize;
    let x_hi = ((seg.x0.max(seg.x1) + radius).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let y_lo = (seg.y0.min(seg.y1) - radius).floor().max(0.0) as usize;
    let y_hi = ((seg.y0.max(seg.y1) + radius).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    (x_lo, x_hi, y_lo, y_hi)
}

/// Least-squares fit of the edge pixels within [`REFINE_RADIUS`] of
/// `seg`, with endpoints at the extreme projections.
fn refine(edges: &[bool], w: usize, h: usize, seg: &LineSegment) -> LineSegment {
    let (x_lo, x_hi, y_lo, y_hi) = stroke_window(w, h, seg, REFINE_RADIUS);
    let mut pts = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if edges[y * w + x] && dist_to_segment(x as f64, y as f64, seg) <= REFINE_RADIUS {
                pts.push((x as f64, y as f64));
            }
        }
    }
    if pts.len() < 2 {
        return seg.clone();
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let (sxx, syy, sxy) = pts.iter().fold((0.0, 0.0, 0.0), |(a, b, c), p| (a + (p.0 - mx).powi(2), b + (p.1 - my).powi(2), c + (p.0 - mx) * (p.1 - my)));
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (angle.cos(), angle.sin());
    let (lo, hi) = pts.iter().map(|p| (p.0 - mx) * ux + (p.1 - my) * uy).fold((f64::MAX, f64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    LineSegment { page_index: seg.page_index, x0: mx + lo * ux, y0: my + lo * uy, x1: mx + hi * ux, y1: my + hi * uy }
}

/// Walks outward along `seg` while edge pixels continue within two pixels
/// of the line, allowing [`GAP_TOLERANCE`] missing steps.
fn extend(edges: &[bool], w: usize, h: usize, seg: &LineSegment) -> LineSegment {
    let (ux, uy) = seg.unit();
    let (nx, ny) = (-uy, ux);
    let on = |x: f64, y: f64| {
        (-2i32..=2).any(|k| {
            let (px, py) = ((x + k as f64 * nx).round(), (y + k as f64 * ny).round());
            px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h && edges[py as usize * w + px as usize]
        })
    };
    let walk = |x: f64, y: f64, dx: f64, dy: f64| {
        let (mut last, mut gap, mut t) = (0.0, 0usize, 1.0);
        while gap <= GAP_TOLERANCE && t < (w + h) as f64 {
            if on(x + t * dx, y + t * dy) {
                last = t;
                gap = 0;
            } else {
                gap += 1;
            }
            t += 1.0;
        }
        (x + last * dx, y + last * dy)
    };
    let (x0, y0) = walk(seg.x0, seg.y0, -ux, -uy);
    let (x1, y1) = walk(seg.x1, seg.y1, ux, uy);
    LineSegment { page_index: seg.page_index, x0, y0, x1, y1 }
}

fn consume(fresh: &mut [bool], w: usize, h: usize, seg: &LineSegment) {
    let (x_lo, x_hi, y_lo, y_hi) = stroke_window(w, h, seg, CONSUME_RADIUS);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if dist_to_segment(x as f64, y as f64, seg) <= CONSUME_RADIUS {
                fresh[y * w + x] = false;
            }
        }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 180.0;
    d.min(180.0 - d)
}

fn try_merge(a: &LineSegment, b: &LineSegment) -> Option<LineSegment> {
    if angle_diff(a.angle_deg(), b.angle_deg()) > MERGE_ANGLE_DEG {
        return None;
    }
    let (base, other) = if a.length() >= b.length() { (a, b) } else { (b, a) };
    let (ux, uy) = base.unit();
    let (nx, ny) = (-uy, ux);
    let proj = |x: f64, y: f64| ((x - base.x0) * ux + (y - base.y0) * uy, (x - base.x0) * nx + (y - base.y0) * ny);
    let (t0, p0) = proj(other.x0, other.y0);
    let (t1, p1) = proj(other.x1, other.y1);
    let offset = (p0 + p1) / 2.0;
    if offset.abs() > MERGE_DISTANCE {
        return None;
    }
    let (lo_o, hi_o) = (t0.min(t1), t0.max(t1));
    let len = base.length();
    if hi_o < -1.0 || lo_o > len + 1.0 {
        return None;
    }
    let lo = lo_o.min(0.0);
    let hi = hi_o.max(len);
    let weight = other.length() / (other.length() + len);
    let shift = offset * weight;
    let at = |t: f64| (base.x0 + t * ux + shift * nx, base.y0 + t * uy + shift * ny);
    let (x0, y0) = at(lo);
    let (x1, y1) = at(hi);
    Some(LineSegment { page_index: base.page_index, x0, y0, x1, y1 })
}

fn merge_segments(mut segs: Vec<LineSegment>) -> Vec<LineSegment> {
    loop {
        let mut merged = false;
        'outer: for i in 0..segs.len() {
            for j in i + 1..segs.len() {
                if let Some(m) = try_merge(&segs[i], &segs[j]) {
                    segs[i] = m;
                    segs.remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return segs;
        }
    }
}

fn canonical_direction(mut s: LineSegment) -> LineSegment {
    if (s.x1, s.y1) < (s.x0, s.y0) {
        std::mem::swap(&mut s.x0, &mut s.x1);
        std::mem::swap(&mut s.y0, &mut s.y1);
    }
    s
}

/// Straight segments of at least `min_length` pixels found with a Hough
/// accumulator (1 degree by 1 pixel bins) over [`edge_map`]. Parallel edge
/// responses of one stroke are merged into a single segment.
pub fn detect_lines(page: &Page, min_length: u32) -> Vec<LineSegment> {
    let (w, h) = (page.width as usize, page.height as usize);
    let edges = edge_map(&page.image);
    let diag = ((w * w + h * h) as f64).sqrt().ceil() as usize;
    let rho_bins = 2 * diag + 1;
    let trig: Vec<(f64, f64)> = (0..THETA_BINS).map(|t| ((t as f64).to_radians().cos(), (t as f64).to_radians().sin())).collect();
    let mut acc = vec![0u32; THETA_BINS * rho_bins];
    for y in 0..h {
        for x in 0..w {
            if !edges[y * w + x] {
                continue;
            }
            for (t, &(c, s)) in trig.iter().enumerate() {
                let rho = (x as f64 * c + y as f64 * s).round() as i64 + diag as i64;
                acc[t * rho_bins + rho as usize] += 1;
            }
        }
    }
    let min_votes = min_length.max(1);
    let mut peaks = Vec::new();
    for t in 0..THETA_BINS {
        for r in 0..rho_bins {
            let v = acc[t * rho_bins + r];
            if v < min_votes {
                continue;
            }
            let mut is_peak = true;
            'n: for dt in -PEAK_RADIUS..=PEAK_RADIUS {
                for dr in -PEAK_RADIUS..=PEAK_RADIUS {
                    if dt == 0 && dr == 0 {
                        continue;
                    }
                    // Theta wraps around with rho mirrored.
                    let (mut nt, mut nr) = (t as i64 + dt, r as i64 + dr);
                    if nt < 0 || nt >= THETA_BINS as i64 {
                        nt = nt.rem_euclid(THETA_BINS as i64);
                        nr = 2 * diag as i64 - nr;
                    }
                    if nr < 0 || nr >= rho_bins as i64 {
                        continue;
                    }
                    let u = acc[nt as usize * rho_bins + nr as usize];
                    if u > v || ((dt, dr) < (0, 0) && u == v) {
                        is_peak = false;
                        break 'n;
                    }
                }
            }
            if is_peak {
                peaks.push((v, t, r));
            }
        }
    }
    // Strongest peaks first; each accepted segment consumes the edges of its
    // stroke so that weaker peaks crossing the same stroke are not reported.
    peaks.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut fresh = edges.clone();
    let mut segs = Vec::new();
    for (_, t, r) in peaks {
        let rho = r as f64 - diag as f64;
        for seg in trace_line(&edges, w, h, (t as f64).to_radians(), rho, min_length as f64, page.index) {
            let seg = extend(&edges, w, h, &refine(&edges, w, h, &seg));
            if fresh_support(&fresh, w, h, &seg) * 2.0 < seg.length() + 1.0 {
                continue;
            }
            consume(&mut fresh, w, h, &seg);
            segs.push(seg);
        }
    }
    let mut merged: Vec<LineSegment> = merge_segments(segs).into_iter().map(canonical_direction).collect();
    merged.sort_by(|a, b| (a.x0, a.y0, a.x1, a.y1).partial_cmp(&(b.x0, b.y0, b.x1, b.y1)).unwrap_or(std::cmp::Ordering::Equal));
    merged
}

pub const RED_LINE_LABEL: &str = "red_line";

/// Closed polylines assembled from segments, reported as bounding-box
/// detections. A group of segments is closed when every endpoint lies within
/// 4 px of an endpoint of another segment in the group. The score is the
/// fraction of the bounding-box perimeter the segments cover.
pub fn red_line_proxies(page_index: u32, segments: &[LineSegment], page_w: u32, page_h: u32) -> Vec<Detection> {
    let n = segments.len();
    let ends = |s: &LineSegment| [(s.x0, s.y0), (s.x1, s.y1)];
    let near = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1) <= JOIN_DISTANCE;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if ends(&segments[i]).iter().any(|&a| ends(&segments[j]).iter().any(|&b| near(a, b))) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out = Vec::new();
    for members in groups.values() {
        if members.len() < 3 {
            continue;
        }
        let closed = members.iter().all(|&i| {
            ends(&segments[i]).iter().all(|&e| members.iter().any(|&j| j != i && ends(&segments[j]).iter().any(|&f| near(e, f))))
        });
        if !closed {
            continue;
        }
        let xs = members.iter().flat_map(|&i| [segments[i].x0, segments[i].x1]);
        let ys = members.iter().flat_map(|&i| [segments[i].y0, segments[i].y1]);
        let (minx, maxx) = xs.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (miny, maxy) = ys.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let x = minx.round().max(0.0) as u32;
        let y = miny.round().max(0.0) as u32;
        let right = (maxx.round() as u32 + 1).min(page_w);
        let bottom = (maxy.round() as u32 + 1).min(page_h);
        if right <= x || bottom <= y {
            continue;
        }
        let bbox = BoundingBox { x, y, w: right - x, h: bottom - y };
        let perimeter = 2.0 * (bbox.w as f64 + bbox.h as f64);
        let covered: f64 = members.iter().map(|&i| segments[i].length()).sum();
        out.push(Detection { label: RED_LINE_LABEL.into(), bbox, score: (covered / perimeter).clamp(0.0, 1.0), page_index });
    }
    out
}

pub fn detect_red_lines(page: &Page, min_length: u32) -> Vec<Detection> {
    let segs = detect_lines(page, min_length);
    non_max_suppression(&red_line_proxies(page.index, &segs, page.width, page.height), 0.5)
}

/// A north arrow: a solid arrowhead over a shaft, 24x24, black on white.
pub fn builtin_north_arrow() -> GrayImage {
    let mut img = GrayImage::from_pixel(24, 24, Luma([255]));
    for y in 2..12u32 {
        let half = (y - 2) / 2 + 1;
        for x in 12 - half..12 + half {
            img.put_pixel(x, y, Luma([0]));
        }
    }
    for y in 12..20 {
        for x in 10..14 {
            img.put_pixel(x, y, Luma([0]));
        }
    }
    for x in 6..18 {
        img.put_pixel(x, 20, Luma([0]));
        img.put_pixel(x, 21, Luma([0]));
    }
    // Left barb so the symbol is not mirror-symmetric.
    for y in 14..18 {
        for x in 6..10 {
            img.put_pixel(x, y, Luma([0]));
        }
    }
    img
}

/// Loads every `*.png` in `dir` as a grayscale template keyed by file stem.
pub fn load_template_library(dir: &Path) -> Result<BTreeMap<String, GrayImage>, VisError> {
    let io = |e: &dyn std::fmt::Display| VisError::Io { path: dir.display().to_string(), message: e.to_string() };
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io(&e))? {
        let path = entry.map_err(|e| io(&e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let img = image::open(&path).map_err(|e| io(&e))?.to_luma8();
        out.insert(label, img);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleKind {
    RequireSymbol {
        label: String,
        min_score: f64,
    },
    RequireTextMatch {
        region: String,
        pattern: String,
        /// Set to `"scale"` to also try the normalized scale form of each span.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalize: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePack {
    pub pack_id: String,
    pub jurisdiction: String,
    pub rules: Vec<Rule>,
}

impl RulePack {
    pub fn from_toml(text: &str) -> Result<Self, VisError> {
        let pack: RulePack = toml::from_str(text).map_err(|e| VisError::InvalidPack(e.to_string()))?;
        pack.validate()?;
        Ok(pack)
    }

    pub fn load(path: &Path) -> Result<Self, VisError> {
        let text = std::fs::read_to_string(path).map_err(|e| VisError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    /// The bundled site-location-plan pack (north arrow and scale text).
    pub fn site_plan_default() -> Self {
        Self::from_toml(include_str!("../config/site_plan_rules.toml")).expect("bundled rule pack is valid")
    }

    pub fn validate(&self) -> Result<(), VisError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rules {
            if !seen.insert(&r.rule_id) {
                return Err(VisError::InvalidPack(format!("duplicate rule id {:?}", r.rule_id)));
            }
            match &r.kind {
                RuleKind::RequireSymbol { min_score, .. } if !(0.0..=1.0).contains(min_score) => {
                    return Err(VisError::InvalidPack(format!("rule {:?}: min_score outside [0,1]", r.rule_id)));
                }
                RuleKind::RequireTextMatch { pattern, region, normalize } => {
                    Regex::new(pattern).map_err(|e| VisError::InvalidPack(format!("rule {:?}: {e}", r.rule_id)))?;
                    RegionSelector::parse(region)?;
                    if normalize.as_deref().is_some_and(|n| n != "scale") {
                        return Err(VisError::InvalidPack(format!("rule {:?}: unknown normalizer", r.rule_id)));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionSelector {
    All,
    Page(u32),
    TopBand,
    BottomBand,
    TitleBlock,
    Bbox(u32, BoundingBox),
}

impl RegionSelector {
    pub fn parse(s: &str) -> Result<Self, VisError> {
        let bad = || VisError::UnknownRegion(s.to_string());
        Ok(match s {
            "all" => RegionSelector::All,
            "top_band" => RegionSelector::TopBand,
            "bottom_band" => RegionSelector::BottomBand,
            "title_block" => RegionSelector::TitleBlock,
            _ => {
                if let Some(n) = s.strip_prefix("page:") {
                    RegionSelector::Page(n.parse().map_err(|_| bad())?)
                } else if let Some(rest) = s.strip_prefix("bbox:") {
                    let (p, coords) = rest.split_once(':').ok_or_else(bad)?;
                    let v: Vec<u32> = coords.split(',').map(|c| c.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                    let [x, y, w, h] = v[..] else { return Err(bad()) };
                    RegionSelector::Bbox(p.parse().map_err(|_| bad())?, BoundingBox::new(x, y, w, h).map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        })
    }

    /// The region on `page`, if the selector covers that page at all.
    pub fn region_on(&self, page: &Page) -> Option<BoundingBox> {
        let full = BoundingBox { x: 0, y: 0, w: page.width, h: page.height };
        match self {
            RegionSelector::All => Some(full),
            RegionSelector::Page(i) => (*i == page.index).then_some(full),
            RegionSelector::TopBand => Some(band(page, 0.0, 0.2)),
            RegionSelector::BottomBand => Some(band(page, 0.8, 1.0)),
            RegionSelector::TitleBlock => {
                let x = page.width * 3 / 5;
                let y = page.height * 3 / 4;
                Some(BoundingBox { x, y, w: page.width - x, h: page.height - y })
            }
            RegionSelector::Bbox(p, b) => (*p == page.index).then(|| b.clip(page.width, page.height)).flatten(),
        }
    }
}

fn band(page: &Page, from: f64, to: f64) -> BoundingBox {
    let y0 = (page.height as f64 * from).floor() as u32;
    let y1 = ((page.height as f64 * to).ceil() as u32).clamp(y0 + 1, page.height.max(y0 + 1));
    BoundingBox { x: 0, y: y0, w: page.width, h: y1 - y0 }
}

fn center_inside(b: &BoundingBox, region: &BoundingBox) -> bool {
    let (cx2, cy2) = (2 * b.x as u64 + b.w as u64, 2 * b.y as u64 + b.h as u64);
    cx2 >= 2 * region.x as u64 && cx2 < 2 * region.right() as u64 && cy2 >= 2 * region.y as u64 && cy2 < 2 * region.bottom() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    Detection(Detection),
    Text { span_id: String, text: String, page_index: u32, bbox: BoundingBox },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule_id: String,
    pub satisfied: bool,
    pub evidence: Vec<Evidence>,
}

/// Evaluates each rule in pack order. Detections may come from the classical
/// detectors or from a provider.
pub fn evaluate_rule_pack(bundle: &DocumentBundle, pack: &RulePack, detections: &[Detection]) -> Result<Vec<RuleOutcome>, VisError> {
    let mut out = Vec::with_capacity(pack.rules.len());
    for rule in &pack.rules {
        let evidence: Vec<Evidence> = match &rule.kind {
            RuleKind::RequireSymbol { label, min_score } => {
                let mut hits: Vec<&Detection> = detections.iter().filter(|d| &d.label == label && d.score >= *min_score).collect();
                hits.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.page_index, a.bbox.x, a.bbox.y).cmp(&(b.page_index, b.bbox.x, b.bbox.y))));
                hits.into_iter().cloned().map(Evidence::Detection).collect()
            }
            RuleKind::RequireTextMatch { region, pattern, normalize } => {
                let selector = RegionSelector::parse(region)?;
                let re = Regex::new(pattern).map_err(|e| VisError::InvalidPack(e.to_string()))?;
                let mut ev = Vec::new();
                for page in &bundle.pages {
                    let Some(area) = selector.region_on(page) else { continue };
                    for span in page.spans.iter().filter(|s| center_inside(&s.bbox, &area)) {
                        let text = span.text.trim();
                        let normalized = normalize.as_deref().and_then(|_| normalize_scale(text).ok());
                        if re.is_match(text) || normalized.is_some_and(|n| re.is_match(&n)) {
                            ev.push(Evidence::Text { span_id: span.span_id.clone(), text: span.text.clone(), page_index: page.index, bbox: span.bbox });
                        }
                    }
                }
                ev
            }
        };
        out.push(RuleOutcome { rule_id: rule.rule_id.clone(), satisfied: !evidence.is_empty(), evidence });
    }
    Ok(out)
}
