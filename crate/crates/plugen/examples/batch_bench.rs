// temporary probe: wall time of one nll_loss batch at recipe width
use plugen::flow::NiceFlow;
use plugen::priors::LabelSpec;
use plugen::training::nll_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    for (width, depth) in [(32usize, 3usize), (256, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = NiceFlow::new(8, 3, 4, depth, width, &mut rng).unwrap();
        println!("width {width}: {} params", flow.param_count());
        let specs = vec![LabelSpec::balanced_binary(); 3];
        let zs: Vec<Vec<f64>> = (0..256)
            .map(|_| (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<Vec<Option<f64>>> = (0..256).map(|_| vec![Some(1.0), Some(0.0), None]).collect();
        let batch: Vec<(&[f64], &[Option<f64>])> = zs
            .iter()
            .zip(&ys)
            .map(|(z, y)| (z.as_slice(), y.as_slice()))
            .collect();
        let start = Instant::now();
        let iters = 3;
        for _ in 0..iters {
            let _ = nll_loss(&flow, &specs, &batch, 0.5).unwrap();
        }
        println!("  batch of 256: {:?} per batch", start.elapsed() / iters);
    }
}
