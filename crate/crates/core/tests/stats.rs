use deepbreg::net::{Generator, NetArch};
use deepbreg::stats::{mean_grid, pointwise_std, pixel_histogram, sample_generator};

/// Pairwise (cascade) summation, independent of the streaming update.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 2 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[test]
fn mean_and_std_match_two_pass_oracle() {
    let net = Generator::new(NetArch { latent_dim: 8, ..NetArch::with_stages(1) }).unwrap();
    let w = net.init(4, 1.0).unwrap();
    let m = 500;
    let s = sample_generator(&net, &w, m, 13).unwrap();
    let mean = mean_grid(&s).unwrap();
    let std = pointwise_std(&s).unwrap();
    for p in 0..mean.len() {
        let vals: Vec<f64> = s.realizations.iter().map(|g| g.as_slice()[p]).collect();
        let mu = pairwise_sum(&vals) / m as f64;
        let dev: Vec<f64> = vals.iter().map(|v| (v - mu) * (v - mu)).collect();
        let sd = (pairwise_sum(&dev) / m as f64).sqrt();
        assert!((mean.as_slice()[p] - mu).abs() <= 1e-12, "mean at {p}");
        assert!((std.as_slice()[p] - sd).abs() <= 1e-12, "std at {p}");
    }
}

#[test]
fn histogram_counts_are_conserved() {
    let net = Generator::new(NetArch { latent_dim: 8, ..NetArch::with_stages(1) }).unwrap();
    let w = net.init(4, 1.0).unwrap();
    let s = sample_generator(&net, &w, 321, 2).unwrap();
    for bins in [1, 2, 7, 40] {
        for pixel in [(0, 0), (3, 5), (7, 7)] {
            let h = pixel_histogram(&s, pixel, bins).unwrap();
            assert_eq!(h.counts.iter().sum::<usize>(), 321);
            assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
        }
    }
}
