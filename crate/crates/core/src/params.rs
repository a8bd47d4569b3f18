use rand::Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot-uniform `rows×cols` matrix: U(−a, a), a = √(6 / (fan_in + fan_out))
/// with fan_in = cols and fan_out = rows.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches length")
}

/// Registers parameter tensors on a tape, remembering their order so
/// gradients can be matched back to parameters. A constant binder records
/// values without gradient slots, for inference.
pub struct Binder<'t> {
    tape: &'t mut Tape,
    vars: Vec<Var>,
    mode: Mode<'t>,
}

enum Mode<'t> {
    Leaves,
    Constants,
    /// Hands out existing variables in order instead of recording new ones.
    Replay(&'t [Var]),
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            vars: Vec::new(),
            mode: Mode::Leaves,
        }
    }

    pub fn constants(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            vars: Vec::new(),
            mode: Mode::Constants,
        }
    }

    /// Binds to variables already on the tape, e.g. leaves created by a
    /// gradient checker. Shapes must match the parameters bound.
    pub fn replay(tape: &'t mut Tape, vars: &'t [Var]) -> Self {
        Binder {
            tape,
            vars: Vec::new(),
            mode: Mode::Replay(vars),
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let v = match self.mode {
            Mode::Leaves => self.tape.leaf(t.clone())?,
            Mode::Constants => self.tape.constant(t.clone())?,
            Mode::Replay(vars) => {
                let Some(&v) = vars.get(self.vars.len()) else {
                    return Err(Error::Contract(format!(
                        "replay binder has only {} variables",
                        vars.len()
                    )));
                };
                let got = self.tape.value(v).shape();
                if got != t.shape() {
                    return Err(Error::dim("replay binder", got, t.shape()));
                }
                v
            }
        };
        self.vars.push(v);
        Ok(v)
    }

    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}
