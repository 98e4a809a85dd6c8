use std::f64::consts::PI;

use branchflow::builder::{build_symmetric, BuildSpec};
use branchflow::optimizer::{optimize, OptimizeOptions};
use branchflow::quantize::quantize;
use branchflow::transport::w2_squared;
use branchflow::{total_energy, validate, PolygonalMeasure};

#[test]
fn build_quantize_optimize_round_trip() {
    let b = build_symmetric(&BuildSpec::uniform(1.0, 1.0, 0.5, Some(2), 3)).unwrap();
    let e0 = total_energy(&b.measure).unwrap().total;

    let q = quantize(&b.measure, 2.0 * PI * 256.0).unwrap();
    assert!(q.kirchhoff_residuals().is_empty());
    // the uniform build only carries dyadic fluxes, so nothing moves
    assert_eq!(q.measure, b.measure);

    let opt = optimize(&q.measure, &OptimizeOptions::default()).unwrap();
    assert!(validate(&opt.measure).is_empty());
    assert!(opt.energy() <= e0);
    assert_eq!(opt.measure.trace_top(), b.measure.trace_top());
    assert_eq!(opt.measure.trace_bottom(), b.measure.trace_bottom());

    let back = PolygonalMeasure::from_json(&opt.measure.to_json()).unwrap();
    assert_eq!(back, opt.measure);
    assert_eq!(total_energy(&back).unwrap().total, opt.energy());
}

#[test]
fn slices_move_no_faster_than_the_energy_allows() {
    let b = build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(1), 3)).unwrap();
    let m = &b.measure;
    let energy = total_energy(m).unwrap().total;
    let zs = [-0.9, -0.4, 0.0, 0.3, 0.8];
    for (i, &z) in zs.iter().enumerate() {
        for &w in &zs[i + 1..] {
            let d = w2_squared(&m.slice_at(z).unwrap(), &m.slice_at(w).unwrap()).unwrap();
            assert!(d.value <= m.l * m.l * energy * (w - z) + 1e-9, "{z} {w}: {}", d.value);
        }
    }
}
