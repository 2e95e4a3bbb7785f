//! 2×2 max pooling with stride 2.
//!
//! Odd extents are padded by replicating the last row/column, which is the
//! same as letting the trailing windows be truncated: a replicated value
//! never beats the original it copies, and ties resolve to the first
//! maximal element in row-major window order.

use super::Tensor;
use crate::error::{Error, Result};

/// Flat input index of the winning element for each pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgIndices {
    input_shape: [usize; 3],
    winners: Vec<usize>,
}

impl ArgIndices {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

pub fn pool_output_extent(len: usize) -> usize {
    len.div_ceil(2)
}

pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, ArgIndices)> {
    let (maps, h, w) = input.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot pool an empty map"));
    }
    let (oh, ow) = (pool_output_extent(h), pool_output_extent(w));
    let mut out = Tensor::zeros(&[maps, oh, ow]);
    let mut winners = Vec::with_capacity(maps * oh * ow);
    let x = input.data();
    for (o, value) in out.data_mut().iter_mut().enumerate() {
        let m = o / (oh * ow);
        let oy = (o / ow) % oh;
        let ox = o % ow;
        let mut best = usize::MAX;
        let mut best_value = f64::NEG_INFINITY;
        for iy in 2 * oy..(2 * oy + 2).min(h) {
            for ix in 2 * ox..(2 * ox + 2).min(w) {
                let i = (m * h + iy) * w + ix;
                if best == usize::MAX || x[i] > best_value {
                    best = i;
                    best_value = x[i];
                }
            }
        }
        *value = best_value;
        winners.push(best);
    }
    Ok((
        out,
        ArgIndices {
            input_shape: [maps, h, w],
            winners,
        },
    ))
}

/// Routes each pooled gradient back to the element that won its window.
pub fn maxpool2d_backward(grad_output: &Tensor, args: &ArgIndices) -> Result<Tensor> {
    if grad_output.len() != args.winners.len() {
        return Err(Error::shape(format!(
            "pooled gradient has {} entries, pooling produced {}",
            grad_output.len(),
            args.winners.len()
        )));
    }
    let mut grad = Tensor::zeros(&args.input_shape);
    let g = grad.data_mut();
    for (&i, &v) in args.winners.iter().zip(grad_output.data()) {
        g[i] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, args) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(args.winners(), &[3]);
    }

    #[test]
    fn ties_go_to_top_left() {
        let x = Tensor::full(&[2, 4, 4], 0.5);
        let (y, args) = maxpool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(&args.winners()[..4], &[0, 2, 8, 10]);
    }

    #[test]
    fn matches_window_scan() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::from_vec(&[1, 6, 6], (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let (y, _) = maxpool2d(&x).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let window = [
                    x.data()[(2 * oy) * 6 + 2 * ox],
                    x.data()[(2 * oy) * 6 + 2 * ox + 1],
                    x.data()[(2 * oy + 1) * 6 + 2 * ox],
                    x.data()[(2 * oy + 1) * 6 + 2 * ox + 1],
                ];
                let expected = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.data()[oy * 3 + ox], expected);
            }
        }
    }

    #[test]
    fn odd_extent_replicates_edge() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let (y, args) = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        assert_eq!(args.winners(), &[4, 5, 7, 8]);
    }

    #[test]
    fn backward_scatters_to_winners() {
        let x = Tensor::from_vec(&[1, 2, 4], vec![0.0, 3.0, 1.0, 1.0, 2.0, 0.0, 5.0, 1.0]).unwrap();
        let (_, args) = maxpool2d(&x).unwrap();
        let g = maxpool2d_backward(&Tensor::from_vec(&[1, 1, 2], vec![1.5, -2.0]).unwrap(), &args)
            .unwrap();
        assert_eq!(g.data(), &[0.0, 1.5, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0]);
    }

    proptest! {
        #[test]
        fn output_extent_closed_form(maps in 1usize..3, h in 1usize..11, w in 1usize..11) {
            let (y, args) = maxpool2d(&Tensor::zeros(&[maps, h, w])).unwrap();
            prop_assert_eq!(y.shape(), &[maps, h.div_ceil(2), w.div_ceil(2)]);
            prop_assert_eq!(args.winners().len(), y.len());
        }
    }
}
