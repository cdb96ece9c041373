//! Forecast error metrics, accumulated in f64.

/// Running sums of squared and absolute error over any number of windows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: &[f64], target: &[f64]) {
        debug_assert_eq!(pred.len(), target.len());
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.len();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.count as f64
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = MetricAccumulator::default();
    acc.push(pred, target);
    acc.mse()
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = MetricAccumulator::default();
    acc.push(pred, target);
    acc.mae()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]), 12.5);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]), 3.5);
        assert_eq!(mse(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
    }

    #[test]
    fn equal_length_windows_average_like_one_pool() {
        let mut acc = MetricAccumulator::default();
        acc.push(&[0.0, 0.0], &[3.0, 4.0]);
        acc.push(&[1.0, 1.0], &[1.0, 3.0]);
        assert_eq!(acc.mse(), (12.5 + 2.0) / 2.0);
        assert_eq!(acc.mae(), (3.5 + 1.0) / 2.0);
        assert_eq!(acc.count(), 4);
    }
}
