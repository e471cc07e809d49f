use lsaq_core::{dequantize, pack_int4, quantize_row, quantize_tensor, unpack_int4, Bits};
use proptest::prelude::*;

fn ulp(x: f32) -> f32 {
    let x = x.abs();
    if x == 0.0 {
        f32::from_bits(1)
    } else {
        f32::from_bits(x.to_bits() + 1) - x
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f32>> {
    // Each row has its own magnitude; some rows are all zero.
    prop::collection::vec(
        (
            prop::bool::weighted(0.1),
            -6i32..6,
            prop::collection::vec(-1.0f32..1.0, cols),
        )
            .prop_map(|(zero, exp, row)| {
                if zero {
                    vec![0.0; row.len()]
                } else {
                    let scale = 10f32.powi(exp);
                    row.into_iter().map(|v| v * scale).collect()
                }
            }),
        rows,
    )
    .prop_map(|rows| rows.concat())
}

fn bits() -> impl Strategy<Value = Bits> {
    prop_oneof![Just(Bits::Eight), Just(Bits::Four)]
}

proptest! {
    #[test]
    fn error_bound_and_range(w in matrix(16, 16), bits in bits()) {
        let t = quantize_tensor(&w, 16, 16, bits).unwrap();
        let back = dequantize(&t);
        let qmax = bits.qmax();
        for i in 0..16 {
            let s = t.scales[i];
            prop_assert!(s > 0.0);
            for j in 0..16 {
                let q = t.q[i * 16 + j];
                prop_assert!((-qmax..=qmax).contains(&q));
                let err = (w[i * 16 + j] - back[i * 16 + j]).abs();
                prop_assert!(err <= s / 2.0 + 4.0 * ulp(s / 2.0).max(ulp(w[i * 16 + j])), "err {} s {}", err, s);
            }
        }
    }

    #[test]
    fn row_max_hits_qmax(row in prop::collection::vec(-100.0f32..100.0, 1..64), bits in bits()) {
        let (q, s) = quantize_row(&row, bits).unwrap();
        let (arg, max) = row.iter().enumerate().fold((0, 0.0f32), |(ai, am), (i, v)| {
            if v.abs() > am { (i, v.abs()) } else { (ai, am) }
        });
        if max > 0.0 {
            prop_assert_eq!(q[arg].unsigned_abs(), bits.qmax() as u8);
            let rebuilt = q[arg] as f32 * s;
            prop_assert!((rebuilt.abs() - max).abs() <= 2.0 * ulp(max));
        }
    }

    #[test]
    fn requantization_is_a_fixed_point(w in matrix(8, 24), bits in bits()) {
        let t = quantize_tensor(&w, 8, 24, bits).unwrap();
        let again = quantize_tensor(&dequantize(&t), 8, 24, bits).unwrap();
        prop_assert_eq!(again.q, t.q);
        // All-zero rows keep scale 1 and zero rows; otherwise scales match bit-for-bit.
        prop_assert_eq!(again.scales, t.scales);
    }

    #[test]
    fn pack_unpack_bijection(v in prop::collection::vec(-7i8..=7, 0..200)) {
        let packed = pack_int4(&v).unwrap();
        prop_assert_eq!(packed.len(), v.len().div_ceil(2));
        prop_assert_eq!(unpack_int4(&packed, v.len()), v);
    }

    #[test]
    fn packing_is_injective_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..50)) {
        // Every byte with both nibbles != 0 decodes and re-encodes to itself.
        let valid: Vec<u8> = bytes.into_iter().filter(|b| b & 0x0f != 0 && b >> 4 != 0).collect();
        let values = unpack_int4(&valid, valid.len() * 2);
        prop_assert_eq!(pack_int4(&values).unwrap(), valid);
    }
}
