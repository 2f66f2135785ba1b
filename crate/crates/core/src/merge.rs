//! LoRA weight patching on dense row-major matrices: in-place merge
//! (`W += scale * A * B`, no replacement layer), its inverse, and the
//! create-and-replace scheme it replaces.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LoraId;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged matrix rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Entries uniform in `[-1, 1]`.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| T::of(rng.random_range(-1.0..=1.0)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// `self += coef * a * b`, one output row at a time, without forming `a * b`.
    /// Each row of the product is summed in a transient buffer and added to
    /// the weight once, so merging and unmerging apply the same delta.
    fn add_low_rank(&mut self, a: &Matrix<T>, b: &Matrix<T>, coef: T) {
        let cols = self.cols;
        let mut row = vec![T::zero(); cols];
        for i in 0..self.rows {
            row.fill(T::zero());
            for k in 0..a.cols {
                let c = a.get(i, k);
                if c == T::zero() {
                    continue;
                }
                for (acc, bv) in row.iter_mut().zip(b.row(k)) {
                    *acc += c * *bv;
                }
            }
            for (w, d) in self.data[i * cols..(i + 1) * cols].iter_mut().zip(&row) {
                *w += coef * *d;
            }
        }
    }
}

/// A rank-`r` adapter: `A` is H1×r, `B` is r×H2.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub id: LoraId,
    a: Matrix<T>,
    b: Matrix<T>,
    pub scale: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(id: LoraId, a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        Self::with_scale(id, a, b, T::one())
    }

    pub fn with_scale(id: LoraId, a: Matrix<T>, b: Matrix<T>, scale: T) -> Result<Self> {
        let r = a.cols;
        if r < 1 {
            return Err(Error::validation("adapter rank must be >= 1"));
        }
        if b.rows != r {
            return Err(Error::validation(format!(
                "A is {}x{} but B is {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        if r > a.rows.min(b.cols) {
            return Err(Error::validation(format!(
                "rank {r} exceeds min({}, {})",
                a.rows, b.cols
            )));
        }
        Ok(Self { id, a, b, scale })
    }

    pub fn random(
        id: LoraId,
        h1: usize,
        h2: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            id,
            Matrix::random(h1, rank, rng),
            Matrix::random(rank, h2, rng),
        )
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    /// One adapter equivalent to merging all of `adapters`: `A` blocks are
    /// concatenated column-wise (each pre-scaled) and `B` blocks row-wise.
    pub fn stack(id: LoraId, adapters: &[LoraAdapter<T>]) -> Result<Self> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::validation("nothing to stack"))?;
        let (h1, h2) = (first.a.rows, first.b.cols);
        if adapters.iter().any(|x| x.a.rows != h1 || x.b.cols != h2) {
            return Err(Error::validation("stacked adapters must share H1 and H2"));
        }
        let r: usize = adapters.iter().map(|x| x.rank()).sum();
        let mut a = Matrix::zeros(h1, r);
        let mut b = Matrix::zeros(r, h2);
        let mut off = 0;
        for x in adapters {
            for i in 0..h1 {
                for k in 0..x.rank() {
                    a.data[i * r + off + k] = x.scale * x.a.get(i, k);
                }
            }
            for k in 0..x.rank() {
                b.data[(off + k) * h2..(off + k + 1) * h2].copy_from_slice(x.b.row(k));
            }
            off += x.rank();
        }
        // the stacked rank may exceed min(H1, H2); that is fine for an equivalence check
        Ok(Self {
            id,
            a,
            b,
            scale: T::one(),
        })
    }
}

/// A patchable layer and the adapters currently merged into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    weight: Matrix<T>,
    patched: Vec<(LoraId, T)>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weight: Matrix<T>) -> Self {
        Self {
            weight,
            patched: Vec::new(),
        }
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn patched_adapters(&self) -> &[(LoraId, T)] {
        &self.patched
    }

    pub fn footprint_bytes(&self) -> usize {
        self.weight.size_bytes()
    }

    fn check_dims(&self, adapter: &LoraAdapter<T>) -> Result<()> {
        if adapter.a.rows != self.weight.rows || adapter.b.cols != self.weight.cols {
            return Err(Error::validation(format!(
                "adapter {} is {}x{} but layer is {}x{}",
                adapter.id, adapter.a.rows, adapter.b.cols, self.weight.rows, self.weight.cols
            )));
        }
        Ok(())
    }

    /// `W += scale * A * B` in place.
    pub fn merge_in_place(&mut self, adapter: &LoraAdapter<T>) -> Result<()> {
        self.check_dims(adapter)?;
        if self.patched.iter().any(|(id, _)| *id == adapter.id) {
            return Err(Error::validation(format!(
                "{} is already merged",
                adapter.id
            )));
        }
        self.weight
            .add_low_rank(&adapter.a, &adapter.b, adapter.scale);
        self.patched.push((adapter.id, adapter.scale));
        Ok(())
    }

    /// `W -= scale * A * B`, using the scale recorded at merge time.
    pub fn unmerge(&mut self, adapter: &LoraAdapter<T>) -> Result<()> {
        self.check_dims(adapter)?;
        let pos = self
            .patched
            .iter()
            .position(|(id, _)| *id == adapter.id)
            .ok_or_else(|| Error::validation(format!("{} is not merged", adapter.id)))?;
        let (_, scale) = self.patched.remove(pos);
        self.weight.add_low_rank(&adapter.a, &adapter.b, -scale);
        Ok(())
    }

    /// Builds a separate layer that keeps its own copies of `W`, `A` and `B`
    /// alongside the merged weight. The original layer is untouched.
    pub fn create_and_replace(&self, adapter: &LoraAdapter<T>) -> Result<ReplacementLayer<T>> {
        self.check_dims(adapter)?;
        let base = self.weight.clone();
        let mut effective = base.clone();
        effective.add_low_rank(&adapter.a, &adapter.b, adapter.scale);
        Ok(ReplacementLayer {
            base,
            a: adapter.a.clone(),
            b: adapter.b.clone(),
            scale: adapter.scale,
            effective,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReplacementLayer<T> {
    base: Matrix<T>,
    a: Matrix<T>,
    b: Matrix<T>,
    scale: T,
    effective: Matrix<T>,
}

impl<T: Scalar> ReplacementLayer<T> {
    pub fn effective_weight(&self) -> &Matrix<T> {
        &self.effective
    }

    pub fn base_weight(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn footprint_bytes(&self) -> usize {
        self.base.size_bytes()
            + self.a.size_bytes()
            + self.b.size_bytes()
            + self.effective.size_bytes()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeBench {
    pub h1: usize,
    pub h2: usize,
    pub rank: usize,
    pub in_place_ms: f64,
    pub create_replace_ms: f64,
    pub in_place_bytes: usize,
    pub create_replace_bytes: usize,
}

/// Times both patching schemes on one random f32 layer; best of `reps`.
pub fn bench_merge(
    h1: usize,
    h2: usize,
    rank: usize,
    reps: usize,
    seed: u64,
) -> Result<MergeBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter = LoraAdapter::<f32>::random(LoraId(0), h1, h2, rank, &mut rng)?;
    let mut layer = Layer::new(Matrix::<f32>::random(h1, h2, &mut rng));
    let mut in_place = f64::INFINITY;
    let mut replace = f64::INFINITY;
    let mut replace_bytes = 0;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        layer.merge_in_place(&adapter)?;
        in_place = in_place.min(t.elapsed().as_secs_f64() * 1e3);
        layer.unmerge(&adapter)?;

        let t = Instant::now();
        let r = layer.create_and_replace(&adapter)?;
        replace = replace.min(t.elapsed().as_secs_f64() * 1e3);
        replace_bytes = r.footprint_bytes();
        drop(r);
    }
    Ok(MergeBench {
        h1,
        h2,
        rank,
        in_place_ms: in_place,
        create_replace_ms: replace,
        in_place_bytes: layer.footprint_bytes(),
        create_replace_bytes: replace_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Naive oracle: materialise A*B with a triple loop.
    fn naive_merged(w: &Matrix<f64>, a: &Matrix<f64>, b: &Matrix<f64>, scale: f64) -> Matrix<f64> {
        Matrix::from_fn(w.rows(), w.cols(), |i, j| {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            w.get(i, j) + scale * acc
        })
    }

    #[test]
    fn hand_computed_merge() {
        let a = m(&[&[1.0], &[0.0]]);
        let b = m(&[&[0.0, 2.0]]);
        let mut layer = Layer::new(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        layer
            .merge_in_place(&LoraAdapter::new(LoraId(1), a.clone(), b.clone()).unwrap())
            .unwrap();
        assert_eq!(layer.weight(), &m(&[&[1.0, 2.0], &[0.0, 1.0]]));

        let mut half = Layer::new(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        half.merge_in_place(&LoraAdapter::with_scale(LoraId(1), a, b, 0.5).unwrap())
            .unwrap();
        assert_eq!(half.weight(), &m(&[&[1.0, 1.0], &[0.0, 1.0]]));
        assert_eq!(half.patched_adapters(), &[(LoraId(1), 0.5)]);
    }

    #[test]
    fn zero_adapter_leaves_weight_but_is_recorded() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut layer = Layer::new(w.clone());
        let z = LoraAdapter::new(LoraId(4), Matrix::zeros(2, 1), m(&[&[5.0, 6.0]])).unwrap();
        layer.merge_in_place(&z).unwrap();
        assert_eq!(layer.weight(), &w);
        assert_eq!(layer.patched_adapters().len(), 1);
    }

    #[test]
    fn merge_errors() {
        let mut layer = Layer::new(Matrix::<f32>::zeros(3, 3));
        let wrong = LoraAdapter::new(LoraId(1), Matrix::zeros(2, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(layer.merge_in_place(&wrong).is_err());
        let ok = LoraAdapter::new(LoraId(2), Matrix::zeros(3, 1), Matrix::zeros(1, 3)).unwrap();
        layer.merge_in_place(&ok).unwrap();
        assert!(
            layer.merge_in_place(&ok).is_err(),
            "double merge must be rejected"
        );
        let never = LoraAdapter::new(LoraId(3), Matrix::zeros(3, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(layer.unmerge(&never).is_err());
        assert!(
            LoraAdapter::<f32>::new(LoraId(9), Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err()
        );
        assert!(
            LoraAdapter::<f32>::new(LoraId(9), Matrix::zeros(2, 1), Matrix::zeros(2, 2)).is_err()
        );
    }

    #[test]
    fn matches_naive_product_in_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::<f64>::random(17, 23, &mut rng);
        let ad = LoraAdapter::with_scale(
            LoraId(0),
            Matrix::random(17, 4, &mut rng),
            Matrix::random(4, 23, &mut rng),
            0.7,
        )
        .unwrap();
        let expected = naive_merged(&w, ad.a(), ad.b(), 0.7);
        let mut layer = Layer::new(w);
        layer.merge_in_place(&ad).unwrap();
        assert!(layer.weight().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn unmerge_in_reverse_order_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::<f32>::random(64, 48, &mut rng);
        let a1 = LoraAdapter::random(LoraId(1), 64, 48, 8, &mut rng).unwrap();
        let a2 = LoraAdapter::random(LoraId(2), 64, 48, 4, &mut rng).unwrap();
        let mut layer = Layer::new(w.clone());
        layer.merge_in_place(&a1).unwrap();
        layer.merge_in_place(&a2).unwrap();
        layer.unmerge(&a2).unwrap();
        layer.unmerge(&a1).unwrap();
        assert!(layer.weight().max_abs_diff(&w) <= 1e-5);
        assert!(layer.patched_adapters().is_empty());
    }

    #[test]
    fn replacement_matches_in_place_and_costs_more_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::<f32>::random(32, 40, &mut rng);
        let ad = LoraAdapter::random(LoraId(1), 32, 40, 6, &mut rng).unwrap();
        let layer = Layer::new(w.clone());
        let rep = layer.create_and_replace(&ad).unwrap();
        assert_eq!(layer.weight(), &w, "original untouched");
        let mut inplace = layer.clone();
        inplace.merge_in_place(&ad).unwrap();
        assert!(rep.effective_weight().max_abs_diff(inplace.weight()) <= 1e-6);
        assert!(
            rep.footprint_bytes()
                >= inplace.footprint_bytes() + ad.a().size_bytes() + ad.b().size_bytes()
        );
    }

    #[test]
    fn stacked_adapter_is_linear_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Matrix::<f32>::random(30, 20, &mut rng);
        let mut a1 = LoraAdapter::random(LoraId(1), 30, 20, 3, &mut rng).unwrap();
        a1.scale = 0.5;
        let a2 = LoraAdapter::random(LoraId(2), 30, 20, 5, &mut rng).unwrap();
        let mut seq = Layer::new(w.clone());
        seq.merge_in_place(&a1).unwrap();
        seq.merge_in_place(&a2).unwrap();
        let mut once = Layer::new(w);
        once.merge_in_place(&LoraAdapter::stack(LoraId(3), &[a1, a2]).unwrap())
            .unwrap();
        assert!(seq.weight().max_abs_diff(once.weight()) <= 1e-5);
    }

    #[test]
    fn generic_over_precision() {
        let mut l64 = Layer::new(Matrix::<f64>::zeros(2, 2));
        let a = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        l64.merge_in_place(&LoraAdapter::new(LoraId(0), a, b).unwrap())
            .unwrap();
        assert_eq!(l64.weight().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
