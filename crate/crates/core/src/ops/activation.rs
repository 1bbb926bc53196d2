use crate::tensor::{Real, Tensor};

/// Leaky rectifier; `slope = 0` gives the plain ReLU.
pub fn leaky_relu(x: &Tensor, slope: Real) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// VJP given the *pre-activation* input.
pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: Real) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g *= slope;
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    leaky_relu(x, 0.0)
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    leaky_relu_backward(x, dy, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_values_and_grad() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.4, -0.1, 0.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.0, 3.0]);
        let g = leaky_relu_backward(&x, &Tensor::full(&[4], 1.0), 0.2);
        assert_eq!(g.data(), &[0.2, 0.2, 0.2, 1.0]);
    }
}
