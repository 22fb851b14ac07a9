use intrinsic_core::metrics::scaled_mse;
use intrinsic_core::retinex::{retinex_decompose, Gauge, RetinexParams};
use intrinsic_core::synth::{render_index, Canvas, Formation, SceneParams};

fn params() -> SceneParams {
    SceneParams::smooth_shading(Canvas { height: 40, width: 56 })
}

#[test]
fn retinex_beats_identity_on_generated_scenes() {
    for seed in 0..10 {
        let s = render_index(seed, 0, Formation::Diffuse, &params()).unwrap();
        let out = retinex_decompose(&s.image, &RetinexParams::default()).unwrap();
        let ours = scaled_mse(&out.set.reflectance, &s.set.reflectance).unwrap();
        let identity = scaled_mse(&s.image, &s.set.reflectance).unwrap();
        assert!(ours < identity, "seed {seed}: {ours} vs {identity}");
    }
}

#[test]
fn achromatic_gauge_keeps_reflectance_color() {
    let s = render_index(4, 2, Formation::Diffuse, &params()).unwrap();
    let run = |gauge| {
        let p = RetinexParams {
            gauge,
            ..Default::default()
        };
        let r = retinex_decompose(&s.image, &p).unwrap().set.reflectance;
        scaled_mse(&r, &s.set.reflectance).unwrap()
    };
    let achromatic = run(Gauge::AchromaticShading);
    let zero_mean = run(Gauge::ZeroMean);
    assert!(achromatic < 1e-4, "{achromatic}");
    assert!(10.0 * achromatic < zero_mean, "{achromatic} vs {zero_mean}");
}
