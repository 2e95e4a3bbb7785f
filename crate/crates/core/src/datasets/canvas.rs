//! Tiny RGB raster used by the generators. Shapes are tested against pixel
//! centres, so sub-pixel motion moves edges one pixel at a time.

use crate::tensor::Tensor;

pub(crate) type Rgb = [u8; 3];

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Canvas {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        Canvas {
            height,
            width,
            pixels: vec![color; height * width],
        }
    }

    fn paint_where(&mut self, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    self.pixels[y * self.width + x] = color;
                }
            }
        }
    }

    pub fn rect(&mut self, top: f64, left: f64, bottom: f64, right: f64, color: Rgb) {
        self.paint_where(color, |y, x| y >= top && y < bottom && x >= left && x < right);
    }

    pub fn disc(&mut self, cy: f64, cx: f64, r: f64, color: Rgb) {
        self.paint_where(color, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
    }

    pub fn ring(&mut self, cy: f64, cx: f64, r: f64, width: f64, color: Rgb) {
        self.paint_where(color, |y, x| {
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            d <= r && d >= r - width
        });
    }

    /// Segment of the given thickness with round caps.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, color: Rgb) {
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = dy * dy + dx * dx;
        let half = thickness / 2.0;
        self.paint_where(color, |y, x| {
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((y - a.0) * dy + (x - a.1) * dx) / len2).clamp(0.0, 1.0)
            };
            let (py, px) = (a.0 + t * dy, a.1 + t * dx);
            (y - py).powi(2) + (x - px).powi(2) <= half * half
        });
    }

    pub fn triangle(&mut self, cy: f64, cx: f64, r: f64, filled: bool, color: Rgb) {
        let top = cy - r;
        let bottom = cy + r;
        let inside = |y: f64, x: f64, shrink: f64| {
            let (t, b) = (top + shrink * 1.5, bottom - shrink);
            if y < t || y > b {
                return false;
            }
            let half = (y - top) / (2.0 * r) * r - shrink;
            (x - cx).abs() <= half
        };
        if filled {
            self.paint_where(color, |y, x| inside(y, x, 0.0));
        } else {
            self.paint_where(color, |y, x| inside(y, x, 0.0) && !inside(y, x, 1.0));
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.height * self.width;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = byte_to_unit(p[c]);
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("canvas extents")
    }

    /// Per-channel absolute difference against a background.
    pub fn abs_diff(&self, background: &Canvas) -> Canvas {
        let pixels = self
            .pixels
            .iter()
            .zip(&background.pixels)
            .map(|(a, b)| [a[0].abs_diff(b[0]), a[1].abs_diff(b[1]), a[2].abs_diff(b[2])])
            .collect();
        Canvas {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

pub(crate) fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub(crate) fn unit_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
    }

    #[test]
    fn shapes_paint_expected_pixels() {
        let mut c = Canvas::filled(8, 8, [0; 3]);
        c.rect(1.0, 2.0, 3.0, 5.0, [9; 3]);
        let lit: Vec<usize> = (0..64).filter(|&i| c.pixels[i] == [9; 3]).collect();
        assert_eq!(lit, vec![10, 11, 12, 18, 19, 20]);

        let mut c = Canvas::filled(9, 9, [0; 3]);
        c.disc(4.5, 4.5, 1.0, [1; 3]);
        assert_eq!(c.pixels.iter().filter(|p| **p == [1; 3]).count(), 5);

        let mut c = Canvas::filled(5, 9, [0; 3]);
        c.line((2.5, 1.5), (2.5, 7.5), 1.0, [1; 3]);
        assert_eq!(c.pixels.iter().filter(|p| **p == [1; 3]).count(), 7);
    }
}
