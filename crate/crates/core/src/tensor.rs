//! Dense NCHW `f32` buffers and the handful of layout helpers the network needs.

use crate::error::{Error, Result};

/// A 4-D array laid out as (batch, channel, height, width), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x] = v;
    }

    /// Number of elements in one batch item.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Copies batch items `[start, start + count)` into a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Tensor {
        let len = self.sample_len();
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [count, c, h, w],
            data: self.data[start * len..(start + count) * len].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn clamp01(mut self) -> Tensor {
        self.map_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [n, ca, h, w] = a.shape;
        if b.shape[0] != n || b.shape[2] != h || b.shape[3] != w {
            return Err(Error::Dimension(format!(
                "channel concat of {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let cb = b.shape[1];
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Tensor {
            shape: [n, ca + cb, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after the first `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut a = Vec::with_capacity(n * first * hw);
        let mut b = Vec::with_capacity(n * (c - first) * hw);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..first * hw]);
            b.extend_from_slice(&s[first * hw..]);
        }
        (
            Tensor {
                shape: [n, first, h, w],
                data: a,
            },
            Tensor {
                shape: [n, c - first, h, w],
                data: b,
            },
        )
    }

    /// Keeps the top-left `height` x `width` window.
    pub fn crop(&self, height: usize, width: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(height <= h && width <= w, "crop larger than source");
        if height == h && width == w {
            return self.clone();
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for i in 0..n {
            for ch in 0..c {
                let plane = self.plane(i, ch);
                for y in 0..height {
                    data.extend_from_slice(&plane[y * w..y * w + width]);
                }
            }
        }
        Tensor {
            shape: [n, c, height, width],
            data,
        }
    }

    /// Zero-extends on the bottom/right to `height` x `width` (adjoint of [`Tensor::crop`]).
    pub fn zero_extend(&self, height: usize, width: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(height >= h && width >= w, "zero_extend smaller than source");
        if height == h && width == w {
            return self.clone();
        }
        let mut out = Tensor::zeros([n, c, height, width]);
        for i in 0..n {
            for ch in 0..c {
                let src = self.plane(i, ch);
                let start = (i * c + ch) * height * width;
                for y in 0..h {
                    out.data[start + y * width..start + y * width + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// Extends on the bottom/right to `height` x `width` by repeating the last row/column.
    pub fn replicate_extend(&self, height: usize, width: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(height >= h && width >= w, "replicate_extend smaller than source");
        if height == h && width == w {
            return self.clone();
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for i in 0..n {
            for ch in 0..c {
                let plane = self.plane(i, ch);
                for y in 0..height {
                    let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
                    data.extend_from_slice(row);
                    let last = row[w - 1];
                    data.extend(std::iter::repeat(last).take(width - w));
                }
            }
        }
        Tensor {
            shape: [n, c, height, width],
            data,
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, with optional transposes.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`),
/// `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut expected = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            sgemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-5, "{ta} {tb}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn([2, 2, 3, 3], |n, c, y, x| (n * 100 + c * 10 + y * 3 + x) as f32);
        let b = Tensor::from_fn([2, 1, 3, 3], |n, _, y, x| -((n * 9 + y * 3 + x) as f32));
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 3, 3, 3]);
        let (a2, b2) = cat.split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn replicate_extend_repeats_edges() {
        let t = Tensor::from_fn([1, 1, 2, 2], |_, _, y, x| (y * 2 + x) as f32);
        let e = t.replicate_extend(3, 4);
        assert_eq!(e.data(), &[0., 1., 1., 1., 2., 3., 3., 3., 2., 3., 3., 3.]);
        assert_eq!(e.crop(2, 2), t);
    }

    #[test]
    fn zero_extend_is_adjoint_of_crop() {
        let t = Tensor::from_fn([1, 2, 3, 2], |_, c, y, x| (c * 6 + y * 2 + x) as f32 + 1.0);
        let z = t.zero_extend(4, 5);
        assert_eq!(z.crop(3, 2), t);
        let sum: f32 = z.data().iter().sum();
        let sum0: f32 = t.data().iter().sum();
        assert_eq!(sum, sum0);
    }
}
