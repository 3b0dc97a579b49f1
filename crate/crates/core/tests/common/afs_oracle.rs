//! Exact dense-grid CDF inversion over integer profiles.

/// Grid points per frame so the whole timeline has at least this many.
pub const GRID_POINTS: usize = 100_000;

/// Indices `round(F⁻¹(k/n))` for `k = 0..n`, found by scanning the grid
/// `x_j = j/G` in exact integer arithmetic and interpolating inside the first
/// cell where `F` reaches the quantile. Rounds half up. All-zero profiles use
/// the uniform CDF.
pub fn grid_indices(d: &[u64], n: usize) -> Vec<usize> {
    if d.is_empty() {
        return vec![0; n];
    }
    let mass: Vec<i128> = if d.iter().all(|&x| x == 0) {
        vec![1; d.len()]
    } else {
        d.iter().map(|&x| x as i128).collect()
    };
    let segments = mass.len();
    let g = GRID_POINTS.div_ceil(segments) as i128;
    let total: i128 = mass.iter().sum();
    let mut prefix = vec![0i128; segments + 1];
    for (t, &m) in mass.iter().enumerate() {
        prefix[t + 1] = prefix[t] + m;
    }
    // F(x_j) · total · G
    let f = |j: i128| -> i128 {
        let t = (j / g).min(segments as i128 - 1);
        let r = j - t * g;
        prefix[t as usize] * g + r * mass[t as usize]
    };
    let last = segments as i128 * g;
    let n128 = n as i128;
    let mut out = Vec::with_capacity(n);
    let mut j = 0i128;
    for k in 0..n128 {
        let target = k * total * g;
        while n128 * f(j) < target {
            j += 1;
            assert!(j <= last, "quantile beyond the grid");
        }
        if j == 0 {
            out.push(0);
            continue;
        }
        let a = n128 * f(j - 1);
        let b = n128 * f(j);
        // x* = (j-1)/G + (target-a)/((b-a)G), plus one half, floored
        let num = 2 * (j - 1) * (b - a) + 2 * (target - a) + g * (b - a);
        let den = 2 * g * (b - a);
        out.push((num / den) as usize);
    }
    out
}

/// Integer profile with `M ≤ 64` frames, often sparse, plus a frame count
/// `N ≤ 32`. One profile in eight is all zeros.
pub fn random_profile<R: rand::Rng>(rng: &mut R) -> (Vec<u64>, usize) {
    let frames = rng.random_range(1..=64usize);
    let n = rng.random_range(1..=32usize);
    let zero_rate = rng.random_range(0.0..0.9);
    let all_zero = rng.random_range(0..8) == 0;
    let d = (0..frames - 1)
        .map(|_| {
            if all_zero || rng.random_bool(zero_rate) {
                0
            } else {
                rng.random_range(1..=9)
            }
        })
        .collect();
    (d, n)
}
