use rcmf::fused_kernel::{fused_recurrent, unfused_recurrent};
use rcmf::ternary::ternary_matmul;
use rcmf::Variant;
use rcmf_bench::{random_tensor, random_ternary, RecurrentCase};

#[test]
fn ternary_density_is_close() {
    let t = random_ternary(100, 100, 0.3, 1);
    let frac = t.nonzero_count() as f64 / 10_000.0;
    assert!((frac - 0.3).abs() < 0.03);
    assert_eq!(t, random_ternary(100, 100, 0.3, 1));
}

#[test]
fn benchmarked_paths_agree() {
    let x = random_tensor(8, 32, 2);
    let t = random_ternary(32, 16, 0.5, 3);
    let dense = x.matmul(&t.dequantize()).unwrap();
    assert!(ternary_matmul(&x, &t).unwrap().max_abs_diff(&dense) < 1e-5);
    for v in Variant::ALL {
        let case = RecurrentCase::new(16, 10, v, 4);
        assert_eq!(case.reservoir.is_some(), v != Variant::Base);
        let (a, _) = fused_recurrent(&case.input()).unwrap();
        let (b, _) = unfused_recurrent(&case.input()).unwrap();
        assert_eq!(a.len(), 160);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
