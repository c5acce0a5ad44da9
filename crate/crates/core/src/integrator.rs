//! Classical fixed-step fourth-order Runge–Kutta.

/// Scratch buffers for one RK4 step, reused across steps to avoid allocation.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Derivative evaluated at the start of the most recent step.
    pub fn last_slope(&self) -> &[f64] {
        &self.k1
    }

    /// Advances `x` from `t` to `t + h` in place.
    pub fn step<F>(&mut self, f: &mut F, t: f64, x: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let half = 0.5 * h;
        f(t, x, &mut self.k1);
        for ((tmp, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k1) {
            *tmp = xi + half * k;
        }
        f(t + half, &self.tmp, &mut self.k2);
        for ((tmp, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k2) {
            *tmp = xi + half * k;
        }
        f(t + half, &self.tmp, &mut self.k3);
        for ((tmp, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k3) {
            *tmp = xi + h * k;
        }
        f(t + h, &self.tmp, &mut self.k4);
        let sixth = h / 6.0;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Integrates `f` on the grid `t_k = t0 + k·h`, `k = 0..=steps`, calling
/// `observe(k, t_k, x_k, f(t_k, x_k))` at every grid point.
///
/// Returns the final state, or the first grid time at which the state became
/// non-finite.
pub fn integrate_fixed<F, O>(
    mut f: F,
    t0: f64,
    x0: &[f64],
    h: f64,
    steps: usize,
    mut observe: O,
) -> Result<Vec<f64>, f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(usize, f64, &[f64], &[f64]),
{
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    let mut prev = x0.to_vec();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        prev.copy_from_slice(&x);
        rk.step(&mut f, t, &mut x, h);
        observe(k, t, &prev, rk.last_slope());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(t0 + (k + 1) as f64 * h);
        }
    }
    let t_end = t0 + steps as f64 * h;
    let mut slope = vec![0.0; x.len()];
    f(t_end, &x, &mut slope);
    observe(steps, t_end, &x, &slope);
    Ok(x)
}
