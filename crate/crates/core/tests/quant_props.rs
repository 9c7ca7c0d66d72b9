use proptest::prelude::*;

use dit_accel::quant::{
    allocate_weight_bits, compute_minmax_params, compute_minmax_params_with_zero, dequantize,
    quantize, Granularity, HadamardRotation,
};
use dit_accel::tensor::{matmul_fp, matmul_int, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f32..50.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn straddling(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (
        prop::collection::vec(-50.0f32..50.0, rows * cols - 2),
        -50.0f32..-0.01,
        0.01f32..50.0,
    )
        .prop_map(move |(mut d, lo, hi)| {
            d.push(lo);
            d.push(hi);
            Tensor::new(vec![rows, cols], d).unwrap()
        })
}

fn shaped() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..24, 1usize..6).prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // the half-step bound needs a range that contains zero, else z clamps
    #[test]
    fn round_trip_within_half_step(x in straddling(3, 17), bits in 2u8..=8) {
        let p = compute_minmax_params(&x, bits, Granularity::PerTensor).unwrap();
        let back = dequantize(&quantize(&x, &p).unwrap());
        let bound = p.scale(0) / 2.0 + 1e-6;
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= bound, "{a} -> {b}, s = {}", p.scale(0));
        }
    }

    #[test]
    fn per_column_round_trip(x in tensor(9, 4), bits in 2u8..=8) {
        let p = compute_minmax_params_with_zero(&x, bits, Granularity::PerChannel { axis: 1 }).unwrap();
        let back = dequantize(&quantize(&x, &p).unwrap());
        for (i, (a, b)) in x.data().iter().zip(back.data()).enumerate() {
            prop_assert!((a - b).abs() <= p.scale(i % 4) / 2.0 + 1e-6);
        }
    }

    #[test]
    fn integer_gemm_is_exact((a, w) in shaped(), ba in 2u8..=8, bw in 2u8..=8, per_row in any::<bool>()) {
        let ag = if per_row { Granularity::PerChannel { axis: 0 } } else { Granularity::PerTensor };
        let aq = quantize(&a, &compute_minmax_params(&a, ba, ag).unwrap()).unwrap();
        let wq = quantize(&w, &compute_minmax_params(&w, bw, Granularity::PerChannel { axis: 1 }).unwrap()).unwrap();
        let int = matmul_int(&aq, &wq).unwrap();
        let fp = matmul_fp(&dequantize(&aq), &dequantize(&wq)).unwrap();
        prop_assert_eq!(int.data(), fp.data());
    }

    #[test]
    fn rotation_is_orthogonal(log_block in 0u32..5, blocks in 1usize..4, seed in any::<u64>()) {
        let block = 1usize << log_block;
        let r = HadamardRotation::new(block * blocks, block, Some(seed)).unwrap();
        let m = r.to_matrix();
        let n = block * blocks;
        for i in 0..n {
            for j in 0..n {
                let dot: f32 = (0..n).map(|k| m.data()[i * n + k] * m.data()[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() <= 1e-5, "({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn allocation_respects_budget(sens in prop::collection::vec(0.0f64..10.0, 1..12), extra in 0u32..40) {
        let budget = 4 * sens.len() as u32 + extra;
        let plan = allocate_weight_bits(&sens, budget).unwrap();
        prop_assert!(plan.total_bits() <= budget);
        prop_assert!(plan.bits_per_layer.iter().all(|b| [4, 6, 8].contains(b)));
        prop_assert!(allocate_weight_bits(&sens, 4 * sens.len() as u32 - 1).is_err());
    }
}
