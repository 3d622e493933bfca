use loopweaver_wasm_demo::{alpha_bar, blend, noised, synthesize};

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let n = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn synthesis_is_seeded_and_square() {
    let a = synthesize(220.0, 4, 0.6, 4.0, 16, 7).unwrap();
    assert_eq!(a.len(), 256);
    assert_eq!(a, synthesize(220.0, 4, 0.6, 4.0, 16, 7).unwrap());
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(synthesize(220.0, 0, 0.6, 4.0, 16, 7).is_err());
    assert!(synthesize(220.0, 4, 0.6, 4.0, 4, 7).is_err());
}

#[test]
fn blend_endpoints_and_midpoint() {
    let a = synthesize(180.0, 3, 0.5, 2.0, 16, 1).unwrap();
    let b = synthesize(440.0, 6, 0.8, 6.0, 16, 2).unwrap();
    assert_eq!(blend(&a, &b, 0.0).unwrap(), a);
    assert_eq!(blend(&a, &b, 1.0).unwrap(), b);
    let mid = blend(&a, &b, 0.5).unwrap();
    let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    assert!((cos(&mid, &sum) - 1.0).abs() < 1e-6);
    assert!(blend(&a, &b[..10], 0.5).is_err());
}

#[test]
fn schedule_and_noising() {
    let ab = alpha_bar(1000, 1e-4, 0.02).unwrap();
    assert_eq!(ab.len(), 1000);
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
    assert!(alpha_bar(0, 1e-4, 0.02).is_err());

    let spec = synthesize(220.0, 4, 0.6, 4.0, 16, 3).unwrap();
    assert_eq!(noised(&spec, 0, 1000, 1e-4, 0.02, 5).unwrap(), spec);
    let late = noised(&spec, 1000, 1000, 1e-4, 0.02, 5).unwrap();
    assert!(cos(&late, &spec).abs() < 0.3);
    assert!(noised(&spec[..15], 10, 1000, 1e-4, 0.02, 5).is_err());
}
