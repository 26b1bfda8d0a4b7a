use super::NnError;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8. Moment buffers are allocated on the
    /// first step.
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::Shape {
            what: "adam parameter list",
            expected: params.len().to_string(),
            actual: grads.len().to_string(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        g.expect_shape("adam gradient", p.shape())?;
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.second = state.first.clone();
    }
    for (p, m) in params.iter().zip(&state.first) {
        m.expect_shape("adam moment", p.shape())?;
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
