//! Minimal dense `N x C x H x W` array used by the modulation block and losses.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("shape mismatch: {0}")]
pub struct ShapeMismatch(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self, ShapeMismatch> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(ShapeMismatch(format!(
                "{} values for dims {dims:?} ({n} expected)",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut i = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(b, ch, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous `H x W` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn same_dims(&self, other: &Self, what: &str) -> Result<(), ShapeMismatch> {
        if self.dims != other.dims {
            return Err(ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Stack tensors along the channel axis. All parts must share N, H and W.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4, ShapeMismatch> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeMismatch("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.dims;
        for p in parts {
            if p.dims[0] != n || p.dims[2] != h || p.dims[3] != w {
                return Err(ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    first.dims, p.dims
                )));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let chunk = p.dims[1] * h * w;
                data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
            }
        }
        Ok(Tensor4 {
            dims: [n, c_total, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor4>, ShapeMismatch> {
        let [n, c, h, w] = self.dims;
        if sizes.iter().sum::<usize>() != c {
            return Err(ShapeMismatch(format!("split {sizes:?} of {c} channels")));
        }
        let mut out: Vec<Tensor4> = sizes.iter().map(|&s| Tensor4::zeros([n, s, h, w])).collect();
        let hw = h * w;
        for b in 0..n {
            let mut offset = (b * c) * hw;
            for (t, &s) in out.iter_mut().zip(sizes) {
                t.data[b * s * hw..(b + 1) * s * hw]
                    .copy_from_slice(&self.data[offset..offset + s * hw]);
                offset += s * hw;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}
