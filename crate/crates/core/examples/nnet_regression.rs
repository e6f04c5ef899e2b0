//! Fits y = sin(3x) on [-1, 1] with the built-in MLP, reverse-mode
//! gradients and Adam.
use mavtrack::nnet::{Activation, Adam, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mavtrack::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::new(&[1, 32, 32, 1], &[Activation::Relu, Activation::Relu, Activation::Linear], 1.0, &mut rng)?;
    let mut adam = Adam::new(net.num_params(), 3e-3);
    let batch = 64;
    for step in 0..=3000 {
        let x: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = net.forward(&x, batch)?;
        let mut loss = 0.0;
        let out_grad: Vec<f64> = cache
            .output()
            .iter()
            .zip(&x)
            .map(|(p, xi)| {
                let d = p - (3.0 * xi).sin();
                loss += d * d / batch as f64;
                2.0 * d / batch as f64
            })
            .collect();
        let mut grads = vec![0.0; net.num_params()];
        net.backward(&cache, &out_grad, &mut grads, false)?;
        adam.step(net.params_mut(), &grads)?;
        if step % 500 == 0 {
            println!("step {step:>4}: mse {loss:.2e}");
        }
    }
    Ok(())
}
