//! Row-major 2D grid used for images, projection maps and masks.

/// Dense row-major grid; `(u, v)` is (column, row).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    width: usize,
    height: usize,
    data: Vec<V>,
}

impl<V: Clone> Grid<V> {
    pub fn filled(width: usize, height: usize, value: V) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<V> Grid<V> {
    /// Wraps `data`; returns `None` if its length is not `width × height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<V>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index_of(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v * self.width + u
    }

    #[inline]
    pub fn in_bounds(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &V {
        &self.data[self.index_of(u, v)]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut V {
        let i = self.index_of(u, v);
        &mut self.data[i]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: V) {
        *self.get_mut(u, v) = value;
    }

    pub fn as_slice(&self) -> &[V] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<V> {
        self.data
    }

    pub fn map<W>(&self, f: impl FnMut(&V) -> W) -> Grid<W> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Value at `(u, v)` with coordinates clamped to the border.
    #[inline]
    pub fn clamped(&self, u: isize, v: isize) -> &V {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.get(u, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major() {
        let g = Grid::from_fn(3, 2, |u, v| 10 * v + u);
        assert_eq!(g.as_slice(), &[0, 1, 2, 10, 11, 12]);
        assert_eq!(*g.get(2, 1), 12);
        assert_eq!(*g.clamped(-4, 9), 10);
        assert!(Grid::from_vec(2, 2, vec![0; 3]).is_none());
    }
}
