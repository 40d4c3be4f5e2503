//! Logistic-regression probe fitted by full-batch gradient descent on
//! standardized features.

pub struct Probe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl Probe {
    pub fn fit(features: &[Vec<f64>], labels: &[bool], steps: usize, lr: f64, l2: f64) -> Self {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let x: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
            .collect();
        let pos = labels.iter().filter(|&&y| y).count() as f64;
        let pos_weight = (n - pos) / pos.max(1.0);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (xi, &y) in x.iter().zip(labels) {
                let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let g = if y { (p - 1.0) * pos_weight } else { p };
                for (gwj, xij) in gw.iter_mut().zip(xi) {
                    *gwj += g * xij / n;
                }
                gb += g / n;
            }
            for (wj, gj) in w.iter_mut().zip(&gw) {
                *wj -= lr * (gj + l2 * *wj);
            }
            b -= lr * gb;
        }
        Self {
            mean,
            scale,
            weights: w,
            bias: b,
        }
    }

    pub fn score(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) * s * w)
            .sum::<f64>()
            + self.bias
    }
}
