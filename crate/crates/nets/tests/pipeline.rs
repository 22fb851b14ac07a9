use intrinsic_autodiff::{Graph, Mode, Shape, Tensor};
use intrinsic_core::rng::stream;
use intrinsic_core::synth::{render_index, Formation, SceneParams};
use intrinsic_nets::data::TrainSample;
use intrinsic_nets::{Architecture, Model, ModelKind, ModelSpec, SavedModel, Stage2Config, Stage2Net, TrainConfig, Trainer};
use rand::Rng;

fn run_stage2(net: &mut Stage2Net, x: Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let mut g = Graph::new();
    let bound = net.store.bind(&mut g, false);
    let x = g.input(x);
    let (r, s) = net.forward(&mut g, &bound, x, Mode::Eval).unwrap();
    (g.value(r).clone(), g.value(s).clone())
}

fn at(t: &Tensor<f32>, c: usize, i: usize, j: usize) -> f32 {
    let s = t.shape();
    t.data()[(c * s.h() + i) * s.w() + j]
}

#[test]
fn stage2_is_translation_equivariant() {
    let (h, w, shift) = (22, 24, 2);
    let mut net = Stage2Net::new(Stage2Config::desk(), 3, 0).unwrap();
    let mut rng = stream(17, "equivariance", &[]);
    let shape = Shape::new(1, 9, h, w);
    let base: Vec<f32> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let moved: Vec<f32> = (0..shape.len())
        .map(|p| {
            let (c, rest) = (p / (h * w), p % (h * w));
            let (i, j) = (rest / w, rest % w);
            if i < shift || j < shift {
                0.0
            } else {
                base[(c * h + i - shift) * w + j - shift]
            }
        })
        .collect();
    let (r0, s0) = run_stage2(&mut net, Tensor::new(shape, base).unwrap());
    let (r1, s1) = run_stage2(&mut net, Tensor::new(shape, moved).unwrap());
    // Five 3x3 layers see five pixels in each direction.
    let margin = 5 + shift;
    for c in 0..3 {
        for i in margin..h - margin {
            for j in margin..w - margin {
                for (a, b) in [(&r0, &r1), (&s0, &s1)] {
                    let d = (at(a, c, i, j) - at(b, c, i + shift, j + shift)).abs();
                    assert!(d <= 1e-5, "({c},{i},{j}) differs by {d}");
                }
            }
        }
    }
}

#[test]
fn saved_model_decomposes_like_the_trained_one() {
    let params = SceneParams::default();
    let data: Vec<TrainSample> = (0..3)
        .map(|i| {
            let s = render_index(40, i, Formation::Diffuse, &params).unwrap();
            TrainSample::new(s.image, s.set.reflectance, s.set.shading).unwrap()
        })
        .collect();
    let probe = data[1].image.crop(3, 1, 27, 29).unwrap();
    let mut train = TrainConfig::desk();
    train.epochs = 1;
    train.batch_size = 2;
    let spec = ModelSpec {
        arch: Architecture::preset(ModelKind::Intrinsicnet, false),
        train,
    };
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&spec.arch, spec.train.seed).unwrap();
    let mut t = Trainer::new(spec.clone(), model, data).unwrap().with_output(dir.path()).unwrap();
    t.run().unwrap();
    let expected = t.model.decompose(&probe, spec.arch.size_multiple()).unwrap();
    let mut saved = SavedModel::load(dir.path()).unwrap();
    assert_eq!(saved.spec, spec);
    let got = saved.decompose(&probe).unwrap();
    assert_eq!(got, expected);
    assert_eq!(got.set.reflectance.shape(), (27, 29, 3));
    assert!(got.set.shading.data().iter().all(|&v| v >= 0.0));
}
