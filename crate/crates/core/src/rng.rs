use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for a (seed, key...) tuple, so draws do not depend on
/// event processing order.
pub(crate) fn keyed_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &v in key {
        x = x.wrapping_add(v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 29;
    }
    ChaCha8Rng::seed_from_u64(x)
}
