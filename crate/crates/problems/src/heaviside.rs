use smoothgrad_core::{Cond, Exec, Program, ProgramError};

/// `y = 1` if `x ≥ 0`, else `0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Heaviside;

impl Program for Heaviside {
    fn name(&self) -> String {
        "heaviside".into()
    }

    fn dim(&self) -> usize {
        1
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        let mut y = E::Real::from(0.0);
        ex.when(Cond::ge(x[0].clone(), 0.0), &mut y, |_, y| {
            *y = 1.0.into();
            Ok(())
        })?;
        Ok(y)
    }
}
