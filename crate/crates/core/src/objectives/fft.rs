use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(())
}

/// In-place unnormalized forward 2-D DFT of a row-major `h × w` buffer.
pub(crate) fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize) -> Result<()> {
    check_pow2(h)?;
    check_pow2(w)?;
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let rows = planner.plan_fft_forward(w);
        rows.process(buf);
        let cols = planner.plan_fft_forward(h);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            cols.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    });
    Ok(())
}

/// Forward unnormalized 2-D DFT of a real `h × w` plane, returned as
/// `(real, imaginary)` planes. Both sides must be powers of two.
pub fn fft2d(plane: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if plane.len() != h * w {
        return Err(crate::error::invalid(format!(
            "fft2d: plane has {} values, expected {h}×{w}",
            plane.len()
        )));
    }
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w)?;
    Ok((buf.iter().map(|z| z.re).collect(), buf.iter().map(|z| z.im).collect()))
}
