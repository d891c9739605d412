//! Core geometric and video data types shared across the crate.
//!
//! All types are immutable after construction; pipeline stages communicate by
//! building new values.

use std::collections::BTreeMap;

use crate::color::rgb_to_lab;
use crate::error::{Error, Result};

/// Round half-up to the nearest integer. Used everywhere a real-valued box
/// coordinate is converted to a pixel index so every stage rasterizes boxes
/// identically.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// A single video frame with cached CIELAB pixels.
#[derive(Debug, Clone)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit RGB triplets, `width * height` entries.
    pub rgb: Vec<[u8; 3]>,
    /// Per-pixel CIELAB triplets derived deterministically from `rgb`.
    pub lab: Vec<[f32; 3]>,
    /// Frame number in the sequence.
    pub index: usize,
}

impl Frame {
    pub fn from_rgb(width: usize, height: usize, rgb: Vec<[u8; 3]>, index: usize) -> Result<Self> {
        if rgb.len() != width * height {
            return Err(Error::invalid(format!(
                "frame {index}: {} rgb entries for {width}x{height}",
                rgb.len()
            )));
        }
        let lab = rgb.iter().map(|&p| rgb_to_lab(p)).collect();
        Ok(Frame {
            width,
            height,
            rgb,
            lab,
            index,
        })
    }

    /// Uniform-color frame, mostly for tests.
    pub fn solid(width: usize, height: usize, rgb: [u8; 3], index: usize) -> Self {
        Frame::from_rgb(width, height, vec![rgb; width * height], index).unwrap()
    }

    #[inline]
    pub fn lab_at(&self, x: usize, y: usize) -> [f32; 3] {
        self.lab[y * self.width + x]
    }

    #[inline]
    pub fn rgb_at(&self, x: usize, y: usize) -> [u8; 3] {
        self.rgb[y * self.width + x]
    }
}

/// A rectangular target hypothesis. Coordinates are real-valued; boxes may
/// extend past the frame borders and are clipped only at feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    /// Top-left corner.
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Frame index the box lives on.
    pub frame: usize,
    /// Scale relative to the parent box it was sampled from.
    pub scale: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, frame: usize) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        BBox {
            x,
            y,
            w,
            h,
            frame,
            scale: 1.0,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, frame: usize) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h, frame)
    }

    /// Integer pixel range covered by this box under half-up rounding,
    /// clipped to `width x height`. Returns `(x0, y0, x1, y1)` with the
    /// exclusive upper corner; empty ranges collapse to x0 == x1.
    pub fn pixel_rect(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = round_half_up(self.x).clamp(0, width as i64) as usize;
        let y0 = round_half_up(self.y).clamp(0, height as i64) as usize;
        let x1 = round_half_up(self.x + self.w).clamp(x0 as i64, width as i64) as usize;
        let y1 = round_half_up(self.y + self.h).clamp(y0 as i64, height as i64) as usize;
        (x0, y0, x1, y1)
    }

    /// True if the clipped pixel rectangle is non-empty.
    pub fn intersects_frame(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.pixel_rect(width, height);
        x1 > x0 && y1 > y0
    }
}

/// Intersection-over-union of two boxes on the same frame.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    inter / union
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// One target's sequence of selected boxes.
#[derive(Debug, Clone)]
pub struct Track {
    pub target_id: u32,
    /// Frame index -> box; contiguous between birth and exit.
    pub boxes: BTreeMap<usize, BBox>,
    pub active: bool,
    pub exit_frame: Option<usize>,
}

impl Track {
    pub fn new(target_id: u32) -> Self {
        Track {
            target_id,
            boxes: BTreeMap::new(),
            active: true,
            exit_frame: None,
        }
    }

    pub fn push(&mut self, bbox: BBox) {
        self.boxes.insert(bbox.frame, bbox);
    }

    pub fn last_box(&self) -> Option<&BBox> {
        self.boxes.values().next_back()
    }

    /// Difference between the last two box centers, if the track has them.
    pub fn velocity(&self) -> Option<(f64, f64)> {
        let mut it = self.boxes.values().rev();
        let cur = it.next()?;
        let prev = it.next()?;
        let (cx, cy) = cur.center();
        let (px, py) = prev.center();
        Some((cx - px, cy - py))
    }
}

/// True if the track's current box sits within `border_margin` of a frame
/// edge and its velocity points toward that same edge. Tracks with fewer
/// than two boxes have no velocity and never exit.
pub fn exit_check(track: &Track, frame_width: usize, frame_height: usize, border_margin: f64) -> bool {
    let (vx, vy) = match track.velocity() {
        Some(v) => v,
        None => return false,
    };
    let cur = track.last_box().expect("velocity implies a box");
    let (cx, cy) = cur.center();
    let w = frame_width as f64;
    let h = frame_height as f64;

    (cx < border_margin && vx < 0.0)
        || (cx > w - border_margin && vx > 0.0)
        || (cy < border_margin && vy < 0.0)
        || (cy > h - border_margin && vy > 0.0)
}

/// `exit_check` with the default margins: half of the current box width for
/// the vertical borders and half of its height for the horizontal borders.
pub fn exit_check_auto(track: &Track, frame_width: usize, frame_height: usize) -> bool {
    let (vx, vy) = match track.velocity() {
        Some(v) => v,
        None => return false,
    };
    let cur = track.last_box().expect("velocity implies a box");
    let (cx, cy) = cur.center();
    let (mx, my) = (cur.w * 0.5, cur.h * 0.5);
    let w = frame_width as f64;
    let h = frame_height as f64;

    (cx < mx && vx < 0.0)
        || (cx > w - mx && vx > 0.0)
        || (cy < my && vy < 0.0)
        || (cy > h - my && vy > 0.0)
}

/// A consecutive run of frames processed as one unit.
#[derive(Debug, Clone, Copy)]
pub struct VideoSegment<'a> {
    pub frames: &'a [Frame],
}

impl<'a> VideoSegment<'a> {
    pub fn new(frames: &'a [Frame]) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid("segment needs at least 2 frames"));
        }
        for pair in frames.windows(2) {
            if pair[1].index != pair[0].index + 1 {
                return Err(Error::invalid("segment frames must be consecutive"));
            }
        }
        Ok(VideoSegment { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_index(&self) -> usize {
        self.frames[0].index
    }
}

/// Per-pixel labeling: 0 = background, 1..=N = target id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl PixelMask {
    pub fn background(width: usize, height: usize) -> Self {
        PixelMask {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Number of pixels carrying `label`.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h, 0)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = boxed(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = boxed(100.0, 100.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_shift() {
        // (0,0,10,10) vs (5,0,10,10): intersection 50, union 150.
        let a = boxed(0.0, 0.0, 10.0, 10.0);
        let b = boxed(5.0, 0.0, 10.0, 10.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn center_distance_cases() {
        let a = boxed(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_distance(&a, &a), 0.0);
        // centers (0,0) and (3,4)
        let c = BBox::from_center(0.0, 0.0, 2.0, 2.0, 0);
        let d = BBox::from_center(3.0, 4.0, 2.0, 2.0, 0);
        assert!((center_distance(&c, &d) - 5.0).abs() < 1e-12);
        let b = boxed(10.0, 0.0, 10.0, 10.0);
        assert!((center_distance(&a, &b) - 10.0).abs() < 1e-12);
    }

    fn track_with(centers: &[(f64, f64)]) -> Track {
        let mut t = Track::new(1);
        for (i, &(cx, cy)) in centers.iter().enumerate() {
            t.push(BBox::from_center(cx, cy, 10.0, 10.0, i));
        }
        t
    }

    #[test]
    fn exit_check_center_of_frame() {
        let t = track_with(&[(50.0, 50.0), (53.0, 50.0)]);
        assert!(!exit_check(&t, 100, 100, 20.0));
    }

    #[test]
    fn exit_check_outward_velocity_near_edge() {
        // center 5 px from the right edge of a 100-wide frame, moving right
        let t = track_with(&[(92.0, 50.0), (95.0, 50.0)]);
        assert!(exit_check(&t, 100, 100, 20.0));
        // same position, moving left: stays
        let t = track_with(&[(98.0, 50.0), (95.0, 50.0)]);
        assert!(!exit_check(&t, 100, 100, 20.0));
    }

    #[test]
    fn exit_check_single_box_is_false() {
        let t = track_with(&[(95.0, 50.0)]);
        assert!(!exit_check(&t, 100, 100, 20.0));
    }

    #[test]
    fn pixel_rect_rounds_half_up() {
        let b = boxed(1.5, 0.4, 3.0, 2.0);
        // x: [round(1.5), round(4.5)) = [2, 5); y: [round(0.4), round(2.4)) = [0, 2)
        assert_eq!(b.pixel_rect(100, 100), (2, 0, 5, 2));
    }

    #[test]
    fn segment_rejects_gaps() {
        let f0 = Frame::solid(4, 4, [0, 0, 0], 0);
        let f2 = Frame::solid(4, 4, [0, 0, 0], 2);
        assert!(VideoSegment::new(&[f0.clone(), f2]).is_err());
        let f1 = Frame::solid(4, 4, [0, 0, 0], 1);
        assert!(VideoSegment::new(&[f0, f1]).is_ok());
    }
}
