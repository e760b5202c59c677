use crate::autodiff::Var;
use crate::error::Result;

/// Max over disjoint pairs along the length axis. Odd lengths are rejected.
pub fn maxpool1d(x: Var<'_>) -> Result<Var<'_>> {
    x.maxpool2()
}

/// Nearest-neighbour ×2 along the length axis.
pub fn upsample1d(x: Var<'_>) -> Result<Var<'_>> {
    x.upsample(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn seq(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn pairwise_max() {
        let tape = Tape::new();
        let y = maxpool1d(tape.leaf(&seq(&[1.0, 3.0, 2.0, 2.0]))).unwrap();
        assert_eq!(y.data(), vec![3.0, 2.0]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let tape = Tape::new();
        let y = maxpool1d(tape.leaf(&seq(&[4.5; 8]))).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 1]);
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn upsample_repeats_rows() {
        let tape = Tape::new();
        let y = upsample1d(tape.leaf(&seq(&[1.0, 2.0]))).unwrap();
        assert_eq!(y.data(), vec![1.0, 1.0, 2.0, 2.0]);
        let z = upsample1d(tape.leaf(&Tensor::zeros(vec![1, 16, 1]))).unwrap();
        assert_eq!(z.shape(), vec![1, 32, 1]);
    }

    #[test]
    fn maxpool_is_left_inverse_of_upsample() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let back = maxpool1d(upsample1d(tape.leaf(&x)).unwrap()).unwrap();
        assert_eq!(back.value(), x);
    }

    #[test]
    fn shape_contracts_over_lengths() {
        for len in (2..=256).step_by(2) {
            for ch in [1, 64] {
                let tape = Tape::new();
                let x = tape.leaf(&Tensor::zeros(vec![1, len, ch]));
                assert_eq!(maxpool1d(x).unwrap().shape(), vec![1, len / 2, ch]);
                assert_eq!(upsample1d(x).unwrap().shape(), vec![1, len * 2, ch]);
            }
        }
    }
}
