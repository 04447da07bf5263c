//! Axis-aligned boxes.

use serde::{Deserialize, Serialize};

/// Pixel box: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Box normalised to a frame of unit size, centre plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxPx {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn normalized(&self, frame_w: f64, frame_h: f64) -> BoxN {
        let (cx, cy) = self.center();
        BoxN {
            cx: cx / frame_w,
            cy: cy / frame_h,
            w: self.w / frame_w,
            h: self.h / frame_h,
        }
    }

    /// Translates the box by `(-dx, -dy)`, e.g. into crop coordinates.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x - dx, self.y - dy, self.w, self.h)
    }

    pub fn within(&self, frame_w: f64, frame_h: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= frame_w && self.y + self.h <= frame_h
    }
}

impl BoxN {
    pub fn to_px(&self, frame_w: f64, frame_h: f64) -> BoxPx {
        BoxPx {
            x: (self.cx - self.w / 2.0) * frame_w,
            y: (self.cy - self.h / 2.0) * frame_h,
            w: self.w * frame_w,
            h: self.h * frame_h,
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center_distance(a: &BoxPx, b: &BoxPx) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BoxPx::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoxPx::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BoxPx::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&BoxPx::new(0.0, 0.0, 0.0, 0.0), &BoxPx::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn normalisation_round_trip() {
        let b = BoxPx::new(10.0, 12.0, 16.0, 8.0);
        let n = b.normalized(64.0, 64.0);
        let back = n.to_px(64.0, 64.0);
        assert!((back.x - 10.0).abs() < 1e-12 && (back.h - 8.0).abs() < 1e-12);
    }
}
