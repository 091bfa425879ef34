use super::param::ParamStore;

/// SGD with momentum and L2 weight decay over every trainable parameter of
/// `store`:
///
/// `buf = momentum * buf + (grad + weight_decay * value)`,
/// `value -= lr * buf`.
pub fn sgd_step(store: &mut ParamStore, lr: f32, momentum: f32, weight_decay: f32) {
    for p in store.iter_mut() {
        if !p.kind.trainable() {
            continue;
        }
        let (value, grad, buf) = (p.value.data_mut(), p.grad.data(), p.momentum.data_mut());
        for i in 0..value.len() {
            let d = grad[i] + weight_decay * value[i];
            buf[i] = momentum * buf[i] + d;
            value[i] -= lr * buf[i];
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(_, p)| {
            p.grad
                .data()
                .iter()
                .map(|&g| (g as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.scale_assign(s);
        }
    }
    norm
}
