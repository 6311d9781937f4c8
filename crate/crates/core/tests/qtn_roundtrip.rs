use proptest::prelude::*;

use shiftmatch::format::{encode_tensor, qtn_encoded_len, read_tensor};
use shiftmatch::rng::XorShift64Star;
use shiftmatch::ClipQueryTensor;

const AWKWARD: [f64; 8] = [
    0.0,
    -0.0,
    f64::MIN_POSITIVE,
    5e-324,
    f64::MAX,
    f64::MIN,
    1.0 / 3.0,
    -1e-300,
];

fn tensor(t: usize, n: usize, d: usize, seed: u64) -> ClipQueryTensor {
    let mut rng = XorShift64Star::new(seed);
    let data = (0..t * n * d)
        .map(|_| match rng.below(10) {
            0 => AWKWARD[rng.below(AWKWARD.len() as u64) as usize],
            _ => rng.gaussian() * 10f64.powi(rng.range_inclusive(-8, 8) as i32),
        })
        .collect();
    ClipQueryTensor::from_flat(t, n, d, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_decode_is_bit_exact(
        t in 1usize..=8,
        n in 1usize..=128,
        d in 1usize..=512,
        seed in any::<u64>(),
    ) {
        let original = tensor(t, n, d, seed);
        let bytes = encode_tensor(&original);
        prop_assert_eq!(bytes.len() as u64, qtn_encoded_len(t, n, d));
        let decoded = read_tensor(&bytes).unwrap();
        prop_assert_eq!((decoded.t_len(), decoded.n_queries(), decoded.dim()), (t, n, d));
        for (a, b) in original.iter_values().zip(decoded.iter_values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn any_truncation_is_rejected(cut in 1usize..60, seed in any::<u64>()) {
        let bytes = encode_tensor(&tensor(2, 3, 4, seed));
        let cut = cut.min(bytes.len());
        prop_assert!(read_tensor(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn smallest_tensor_layout() {
    let clip = ClipQueryTensor::from_flat(1, 1, 1, vec![1.5]).unwrap();
    let bytes = encode_tensor(&clip);
    assert_eq!(bytes.len(), 36);
    assert_eq!(&bytes[..8], b"QTNv0001");
    assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
    assert_eq!(&bytes[28..], b"QTNEND\0\0");
}

#[test]
fn non_finite_payload_is_rejected() {
    let mut bytes = encode_tensor(&ClipQueryTensor::from_flat(1, 1, 2, vec![0.0, 1.0]).unwrap());
    bytes[28..36].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(read_tensor(&bytes).is_err());
}
