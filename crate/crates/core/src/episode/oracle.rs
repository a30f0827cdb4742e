use super::Episode;

/// Fraction of test samples whose nearest (Euclidean) train-class centroid
/// is their own class. Ties go to the lower class index.
pub fn centroid_oracle(episode: &Episode) -> f64 {
    let n = episode.n_way();
    let d = episode.dim();
    let mut centroids = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (r, &label) in episode.train_y.iter().enumerate() {
        for (c, x) in centroids[label].iter_mut().zip(episode.train_x.row_slice(r)) {
            *c += x;
        }
        counts[label] += 1;
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let correct = episode
        .test_y
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let x = episode.test_x.row_slice(r);
            let mut best = (0, f64::INFINITY);
            for (class, c) in centroids.iter().enumerate() {
                let dist: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (class, dist);
                }
            }
            best.0 == label
        })
        .count();
    correct as f64 / episode.test_y.len() as f64
}
