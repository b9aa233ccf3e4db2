//! Row-major fixed-point matrices.

use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{FxpFormat, OpTally};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_raw(rows: usize, cols: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64], fmt: FxpFormat) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| fmt.quantize(*v))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_raw(rows, cols, data)
    }

    pub fn to_f64(&self, fmt: FxpFormat) -> Vec<f64> {
        self.data.iter().map(|r| fmt.dequantize(*r)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [i64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor, fmt: FxpFormat) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| fmt.add(*a, *b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Tensor, fmt: FxpFormat) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = fmt.add(*a, *b)?;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor, fmt: FxpFormat) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| fmt.sub(*a, *b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor { data, ..*self })
    }

    /// `self · otherᵀ`: `(n×k)·(m×k)ᵀ = n×m`. One rescale per output.
    pub fn matmul_t(&self, other: &Tensor, fmt: FxpFormat, tally: &mut OpTally) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = fmt.dot(a, other.row(j))?;
            }
        }
        tally.mul((self.rows * other.rows) as u64);
        Ok(out)
    }

    /// `self · other`: `(n×k)·(k×m) = n×m`.
    pub fn matmul(&self, other: &Tensor, fmt: FxpFormat, tally: &mut OpTally) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.cols {
                out.data[i * other.cols + j] = fmt.dot_strided(a, &other.data, j, other.cols)?;
            }
        }
        tally.mul((self.rows * other.cols) as u64);
        Ok(out)
    }

    /// `selfᵀ · other`: `(k×n)ᵀ·(k×m) = n×m`, used for weight gradients.
    pub fn t_matmul(&self, other: &Tensor, fmt: FxpFormat, tally: &mut OpTally) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let mut acc: i128 = 0;
                for r in 0..k {
                    acc += self.data[r * n + i] as i128 * other.data[r * m + j] as i128;
                }
                out.data[i * m + j] =
                    fmt.check(crate::fxp::round_shift(acc, fmt.frac_bits()), "t_matmul")?;
            }
        }
        tally.mul((n * m) as u64);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn digest(&self, name: &str, fmt: FxpFormat) -> Digest {
        let mut h = Hasher::new(tag::TENSOR);
        h.str(name)
            .u64(self.rows as u64)
            .u64(self.cols as u64)
            .update(&fmt.to_bytes())
            .raws(&self.data);
        h.finish()
    }

    /// `(name, shape, format, little-endian raws)`.
    pub fn encode(&self, name: &str, fmt: FxpFormat, e: &mut Encoder) {
        e.str(name)
            .u64(self.rows as u64)
            .u64(self.cols as u64)
            .u8(fmt.int_bits() as u8)
            .u8(fmt.frac_bits() as u8)
            .raws(&self.data);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<(String, FxpFormat, Tensor)> {
        let name = d.string()?;
        let rows = d.u64()? as usize;
        let cols = d.u64()? as usize;
        let fmt = FxpFormat::from_bytes([d.u8()?, d.u8()?])?;
        let data = d.raws()?;
        Ok((name, fmt, Tensor::from_raw(rows, cols, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_f64(rows, cols, v, FxpFormat::default()).unwrap()
    }

    #[test]
    fn matmul_variants_agree() {
        let fmt = FxpFormat::default();
        let mut tally = OpTally::default();
        let a = t(2, 3, &[1.0, 0.5, -0.25, 2.0, 0.0, 1.5]);
        let b = t(3, 2, &[0.5, 1.0, -1.0, 0.25, 2.0, 0.0]);
        let ab = a.matmul(&b, fmt, &mut tally).unwrap();
        let ab2 = a.matmul_t(&b.transpose(), fmt, &mut tally).unwrap();
        let ab3 = a.transpose().t_matmul(&b, fmt, &mut tally).unwrap();
        assert_eq!(ab, ab2);
        assert_eq!(ab, ab3);
        assert_eq!(ab.to_f64(fmt), vec![-0.5, 1.125, 4.0, 2.0]);
        assert_eq!(tally.mul, 12);
    }

    #[test]
    fn shape_errors() {
        let fmt = FxpFormat::default();
        let mut tally = OpTally::default();
        let a = Tensor::zeros(2, 3);
        assert!(a.matmul(&a, fmt, &mut tally).is_err());
        assert!(a.add(&Tensor::zeros(3, 2), fmt).is_err());
        assert!(Tensor::from_raw(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn encode_decode() {
        let fmt = FxpFormat::default();
        let a = t(2, 2, &[1.0, -1.0, 0.5, 0.0]);
        let mut e = Encoder::new();
        a.encode("w", fmt, &mut e);
        let bytes = e.into_bytes();
        let mut d = Decoder::new(&bytes);
        let (name, f2, b) = Tensor::decode(&mut d).unwrap();
        assert_eq!((name.as_str(), f2), ("w", fmt));
        assert_eq!(a, b);
    }
}
