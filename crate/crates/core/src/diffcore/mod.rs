//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Values live on a [`Tape`]; every op appends a node holding its output and
//! a backward rule. Ops with hand-derived gradients (the rasterizer, the
//! image losses) plug in through [`CustomOp`].

pub mod gradcheck;
pub mod nn;
mod ops;
pub mod params;
mod tape;
mod tensor;

pub use ops::{concat_cols, logit, sigmoid, softplus, softplus_inv, Activation, ElemKind, Rhs};
pub use params::{Bound, Group, Param, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::{Real, Tensor};


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(&[3, 4], v).unwrap());
            let y = x.softmax(-1).unwrap().value();
            for r in 0..3 {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(y.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
