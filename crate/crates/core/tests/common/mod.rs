#![allow(dead_code)]

use std::fs;
use std::path::Path;

use hemocnn::data::{CellClass, LabeledDataset, Sample};
use hemocnn::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small input the full stack accepts; keeps the heavier tests quick.
pub const SMALL: [usize; 3] = [48, 64, 3];

pub fn shape(dims: [usize; 3]) -> Shape {
    Shape::new(dims.to_vec()).unwrap()
}

/// Noisy background with one bright disc: left half for mononuclear, right
/// half for polynuclear, position jittered.
pub fn blob_image(rng: &mut ChaCha8Rng, class: CellClass, h: usize, w: usize) -> Tensor<f32> {
    let cx = match class {
        CellClass::Mononuclear => w as f64 * 0.3,
        CellClass::Polynuclear => w as f64 * 0.7,
    } + rng.gen_range(-3.0..3.0);
    let cy = h as f64 * 0.5 + rng.gen_range(-3.0..3.0);
    let r = h.min(w) as f64 * 0.2;
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            let inside = d2 < r * r;
            for c in 0..3 {
                let base = if inside { [200.0, 120.0, 220.0][c] } else { 60.0 };
                let v: f64 = base + rng.gen_range(-40.0..40.0);
                data.push(v.clamp(0.0, 255.0).round() as f32);
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data).unwrap()
}

/// `per_class` images of each class, classes interleaved.
pub fn blob_dataset(per_class: usize, seed: u64, dims: [usize; 3]) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in 0..per_class {
        for class in CellClass::ALL {
            samples.push(Sample {
                image: blob_image(&mut rng, class, dims[0], dims[1]),
                label: class,
                path: format!("synthetic/{class}/{i:04}.ppm").into(),
            });
        }
    }
    LabeledDataset::new(shape(dims), samples).unwrap()
}

pub fn encode_ppm(img: &Tensor<f32>) -> Vec<u8> {
    let &[h, w, 3] = img.dims() else {
        panic!("not an RGB image")
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data().iter().map(|&v| v as u8));
    bytes
}

/// Writes `root/{TRAIN,TEST}/{LYMPHOCYTE,NEUTROPHIL}/*.ppm`.
pub fn write_fixture(root: &Path, train_per_class: usize, test_per_class: usize, seed: u64, hw: [usize; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (split, n) in [("TRAIN", train_per_class), ("TEST", test_per_class)] {
        for (folder, class) in [
            ("LYMPHOCYTE", CellClass::Mononuclear),
            ("NEUTROPHIL", CellClass::Polynuclear),
        ] {
            let dir = root.join(split).join(folder);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..n {
                let img = blob_image(&mut rng, class, hw[0], hw[1]);
                fs::write(dir.join(format!("{i:03}.ppm")), encode_ppm(&img)).unwrap();
            }
        }
    }
}

pub mod grad {
    use hemocnn::layers::{LayerSpec, TrainMode};
    use hemocnn::optimize::{finite_difference_check, GradCheckConfig, GradCheckReport, Objective};
    use hemocnn::{build_blood_cell_model, SequentialModel, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{shape, SMALL};

    pub const TOLERANCE: f64 = 1e-4;
    pub const EPSILON: f64 = 1e-5;

    fn uniform(dims: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn one_hot(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut data = vec![0.0; n * 2];
        for i in 0..n {
            data[i * 2 + rng.gen_range(0..2)] = 1.0;
        }
        Tensor::from_vec(&[n, 2], data).unwrap()
    }

    pub fn config(seed: u64) -> GradCheckConfig {
        GradCheckConfig {
            epsilon: EPSILON,
            seed,
            ..GradCheckConfig::default()
        }
    }

    /// One case per layer kind, each a tiny model checked under squared
    /// error (or cross entropy for the sigmoid head).
    pub const LAYER_CASES: [&str; 9] = [
        "rescale",
        "conv2d",
        "relu",
        "max_pool",
        "flatten",
        "dense",
        "dropout",
        "sigmoid",
        "sigmoid_bce",
    ];

    pub fn layer_case(name: &str, seed: u64) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (input, specs, objective): (Vec<usize>, Vec<LayerSpec>, Objective) = match name {
            "rescale" => (
                vec![4, 5, 3],
                vec![LayerSpec::Rescale { divisor: 255.0 }],
                Objective::SquaredError,
            ),
            "conv2d" => (
                vec![6, 7, 3],
                vec![LayerSpec::Conv2d {
                    filters: 4,
                    kernel: [3, 3],
                }],
                Objective::SquaredError,
            ),
            "relu" => (vec![12], vec![LayerSpec::Relu], Objective::SquaredError),
            "max_pool" => (
                vec![7, 6, 2],
                vec![LayerSpec::MaxPool2d { pool: 2 }],
                Objective::SquaredError,
            ),
            "flatten" => (vec![3, 4, 2], vec![LayerSpec::Flatten], Objective::SquaredError),
            "dense" => (vec![7], vec![LayerSpec::Dense { units: 5 }], Objective::SquaredError),
            "dropout" => (
                vec![20],
                vec![LayerSpec::Dropout { ratio: 0.5 }],
                Objective::SquaredError,
            ),
            "sigmoid" => (vec![8], vec![LayerSpec::Sigmoid], Objective::SquaredError),
            "sigmoid_bce" => (
                vec![6],
                vec![LayerSpec::Dense { units: 2 }, LayerSpec::Sigmoid],
                Objective::BinaryCrossEntropy,
            ),
            other => panic!("unknown case {other}"),
        };
        let mut model = SequentialModel::<f64>::new(hemocnn::Shape::new(input).unwrap(), &specs, seed).unwrap();
        let n = 3;
        let in_dims = model.input_shape().with_batch(n).unwrap();
        let scale = if name == "rescale" { 255.0 } else { 2.0 };
        let x = uniform(in_dims.dims(), &mut rng, -scale, scale);
        let targets = match objective {
            Objective::BinaryCrossEntropy => one_hot(n, &mut rng),
            Objective::SquaredError => {
                let out = model.output_shape().with_batch(n).unwrap();
                uniform(out.dims(), &mut rng, -1.0, 1.0)
            }
        };
        let cfg = GradCheckConfig {
            mode: TrainMode::Training,
            ..config(seed)
        };
        finite_difference_check(&mut model, &x, &targets, objective, &cfg).unwrap()
    }

    /// The full blood-cell stack at the small input size, batch of two,
    /// cross entropy, pixels on the 0..=255 scale.
    pub fn full_stack(seed: u64, entries: usize) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = build_blood_cell_model::<f64>(&shape(SMALL), seed).unwrap();
        let x = uniform(shape(SMALL).with_batch(2).unwrap().dims(), &mut rng, 0.0, 255.0);
        let targets = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = GradCheckConfig {
            max_entries_per_tensor: entries,
            ..config(seed)
        };
        finite_difference_check(&mut model, &x, &targets, Objective::BinaryCrossEntropy, &cfg).unwrap()
    }
}

/// Uniform-noise images with alternating labels: nothing to learn, only to
/// memorize.
pub fn noise_dataset(n: usize, seed: u64, dims: [usize; 3]) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = dims.iter().product();
    let samples = (0..n)
        .map(|i| Sample {
            image: Tensor::from_vec(&dims, (0..numel).map(|_| rng.gen_range(0..=255) as f32).collect()).unwrap(),
            label: CellClass::ALL[i % 2],
            path: format!("noise/{i:04}.ppm").into(),
        })
        .collect();
    LabeledDataset::new(shape(dims), samples).unwrap()
}
