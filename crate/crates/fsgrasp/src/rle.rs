//! Uncompressed column-major run-length encoding for binary masks.
//!
//! Counts alternate runs of background and foreground pixels in column-major
//! (Fortran) scan order and always start with the background run, so a mask
//! whose first pixel is set encodes as `[0, ...]`. The sum of all counts
//! equals H*W.

use crate::image::BinaryMask;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RleError {
    #[error("RLE counts sum to {sum} but the {height}x{width} mask has {expect} pixels")]
    SizeMismatch {
        height: usize,
        width: usize,
        sum: usize,
        expect: usize,
    },
}

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = mask.size();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

pub fn decode(height: usize, width: usize, counts: &[u32]) -> Result<BinaryMask, RleError> {
    let expect = height * width;
    let sum: usize = counts.iter().map(|c| *c as usize).sum();
    if sum != expect {
        return Err(RleError::SizeMismatch { height, width, sum, expect });
    }
    let mut pixels = vec![false; expect];
    let mut value = false;
    let mut pos = 0usize;
    for &run in counts {
        if value {
            for i in pos..pos + run as usize {
                // column-major position i maps to (x, y) = (i / h, i % h)
                let x = i / height;
                let y = i % height;
                pixels[y * width + x] = true;
            }
        }
        pos += run as usize;
        value = !value;
    }
    Ok(BinaryMask::new(height, width, pixels).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_count_is_background_run() {
        let mask = BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0);
        // column-major scan: (0,0)=1, (0,1)=0, (1,0)=0, (1,1)=0
        assert_eq!(encode(&mask), vec![0, 1, 3]);
    }

    #[test]
    fn empty_and_full() {
        let empty = BinaryMask::empty(3, 4);
        assert_eq!(encode(&empty), vec![12]);
        let full = BinaryMask::from_fn(3, 4, |_, _| true);
        assert_eq!(encode(&full), vec![0, 12]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(matches!(
            decode(4, 4, &[3]),
            Err(RleError::SizeMismatch { sum: 3, expect: 16, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_identity(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.4));
            let counts = encode(&mask);
            let back = decode(h, w, &counts).unwrap();
            prop_assert_eq!(mask, back);
        }
    }
}
