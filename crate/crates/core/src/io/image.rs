//! In-memory rasters: 8-bit RGB images and single-channel masks.

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Bilinear sample at continuous coordinates; `None` when the sample
    /// point lies outside the raster.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0u8; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let p00 = self.get(x0, y0)[c] as f64;
            let p10 = self.get(x1, y0)[c] as f64;
            let p01 = self.get(x0, y1)[c] as f64;
            let p11 = self.get(x1, y1)[c] as f64;
            let top = p00 + (p10 - p00) * fx;
            let bottom = p01 + (p11 - p01) * fx;
            *slot = (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8;
        }
        Some(out)
    }

    /// Mirror left-right.
    pub fn flipped_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// 8-bit single-channel raster (foreground masks, part-id buffers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Value at a continuous position, nearest-pixel; `None` off-raster.
    pub fn at_point(&self, x: f64, y: f64) -> Option<u8> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let xi = x.round() as usize;
        let yi = y.round() as usize;
        if xi >= self.width || yi >= self.height {
            return None;
        }
        Some(self.get(xi, yi))
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}
