/// Square bird's-eye-view grid over `[-range, range]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    pub range: f64,
    pub resolution: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            range: 50.0,
            resolution: 128,
        }
    }
}

impl BevGrid {
    pub fn new(range: f64, resolution: usize) -> Self {
        Self { range, resolution }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.range / self.resolution as f64
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Cell indices of a world position; `None` outside the extent.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cs = self.cell_size();
        let fx = ((x + self.range) / cs).floor();
        let fy = ((y + self.range) / cs).floor();
        let n = self.resolution as f64;
        if fx < 0.0 || fy < 0.0 || fx >= n || fy >= n || !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.resolution + ix
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.resolution, idx / self.resolution)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let cs = self.cell_size();
        (
            -self.range + (ix as f64 + 0.5) * cs,
            -self.range + (iy as f64 + 0.5) * cs,
        )
    }

    /// Continuous grid coordinates in which cell centers sit on integers.
    pub fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let cs = self.cell_size();
        ((x + self.range) / cs - 0.5, (y + self.range) / cs - 0.5)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -self.range && x < self.range && y >= -self.range && y < self.range
    }
}
