use crate::error::{invalid, Result};
use crate::real::Real;

/// Dense NCHW batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::ZERO; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return invalid(format!(
                "tensor data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates samples of equal shape along the batch axis.
    pub fn stack(samples: &[&Tensor<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| {
            crate::error::CevaeError::InvalidArgument("cannot stack zero tensors".into())
        })?;
        let mut data = Vec::with_capacity(samples.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in samples {
            if (t.c, t.h, t.w) != (first.c, first.h, first.w) {
                return invalid("stack: shape mismatch");
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Ok(Tensor {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// `[B, C, P] -> [C, B*P]`
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            out[ci * b * p + bi * p..ci * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P] -> [B, C, P]`
pub(crate) fn channel_major_to_batch<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::ZERO; x.len()];
    for ci in 0..c {
        for bi in 0..b {
            let src = &x[ci * b * p + bi * p..ci * b * p + (bi + 1) * p];
            out[(bi * c + ci) * p..(bi * c + ci + 1) * p].copy_from_slice(src);
        }
    }
    out
}
