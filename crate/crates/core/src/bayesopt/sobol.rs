//! Owen-scrambled Sobol points in the unit cube.

/// Highest dimension the scrambled sequence supports.
pub const MAX_DIM: usize = sobol_burley::NUM_DIMENSIONS as usize;

/// Point `index` of the sequence scrambled by `seed`, promoted to `f64`.
///
/// Dimensions beyond [`MAX_DIM`] reuse the sequence with a derived seed,
/// which keeps them well spread but drops joint stratification.
pub fn point(index: u32, dim: usize, seed: u64) -> Vec<f64> {
    let base = (seed ^ (seed >> 32)) as u32;
    (0..dim)
        .map(|d| {
            let block = (d / MAX_DIM) as u32;
            let s = base.wrapping_add(block.wrapping_mul(0x6c8e_9cf5));
            f64::from(sobol_burley::sample(index, (d % MAX_DIM) as u32, s))
        })
        .collect()
}

pub fn points(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count as u32).map(|i| point(i, dim, seed)).collect()
}
