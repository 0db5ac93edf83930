//! Derivation of independent seeds for each random stream of a run.

/// Random streams consumed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Bootstrap = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a = derive(7, Stream::Shuffle, &[1]);
        assert_ne!(a, derive(7, Stream::Dropout, &[1]));
        assert_ne!(a, derive(7, Stream::Shuffle, &[2]));
        assert_ne!(a, derive(8, Stream::Shuffle, &[1]));
        assert_eq!(a, derive(7, Stream::Shuffle, &[1]));
    }
}
