//! AdamW with per-tensor step counts, so tensors unfrozen in a later stage
//! start their bias correction from scratch.

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Updates applied to each tensor so far.
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(shapes: &[usize]) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    /// One update of every trainable tensor. Weight decay is decoupled and
    /// applied only where `decays` is set.
    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], trainable: &[bool], decays: &[bool], lr: f64, weight_decay: f64) {
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step_size = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
            let shrink = if decays[i] { 1.0 - (lr * weight_decay) as f32 } else { 1.0 };
            let (p, g, m, v) = (&mut params[i], &grads[i], &mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] = p[j] * shrink - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm(grads: &[Vec<f32>], trainable: &[bool]) -> f64 {
    grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(g, _)| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], trainable: &[bool], max_norm: f64) -> f64 {
    let norm = grad_norm(grads, trainable);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (g, _) in grads.iter_mut().zip(trainable).filter(|(_, &t)| t) {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(&[2]);
        let mut p = vec![vec![1.0f32, -1.0]];
        opt.step(&mut p, &[vec![0.5, -3.0]], &[true], &[false], 0.1, 0.0);
        assert!((p[0][0] - 0.9).abs() < 1e-6);
        assert!((p[0][1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_tensors_keep_zero_moments() {
        let mut opt = AdamW::new(&[1, 1]);
        let mut p = vec![vec![1.0f32], vec![1.0]];
        opt.step(&mut p, &[vec![1.0], vec![1.0]], &[true, false], &[true, true], 0.1, 0.1);
        assert_eq!(p[1], vec![1.0]);
        assert_eq!((opt.m[1][0], opt.v[1][0], opt.steps[1]), (0.0, 0.0, 0));
        assert_eq!(opt.steps[0], 1);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, &[true, true], 1.0), 5.0);
        assert!((grad_norm(&g, &[true, true]) - 1.0).abs() < 1e-6);
    }
}
