use std::cell::RefCell;
use std::sync::Arc;

use rustfft::{Fft, FftDirection, FftNum, FftPlanner};
use sdum_autograd::Real;

/// Element types with a cached FFT planner.
pub trait Float: Real + FftNum {
    fn fft_plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<Self>>;
}

macro_rules! impl_float {
    ($t:ty) => {
        impl Float for $t {
            fn fft_plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<Self>> {
                thread_local! {
                    static PLANNER: RefCell<FftPlanner<$t>> = RefCell::new(FftPlanner::new());
                }
                PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
            }
        }
    };
}

impl_float!(f32);
impl_float!(f64);
