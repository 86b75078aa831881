mod common;

use facesvm::baselines::MlpConfig;
use facesvm::eval::{cross_validate, fit_method, make_splits, ClassifierSpec, MethodSpec};
use facesvm::imageio::{Dataset, GrayImage, WeightedSample};
use facesvm::linalg::Matrix;
use facesvm::subspace::{ComponentCount, PipelineConfig, Variant};
use facesvm::svm::{KernelKind, SmoParams};
use proptest::prelude::*;
use rand::Rng;

fn svm(kind: KernelKind, c_grid: Vec<f64>, sigma_grid: Vec<f64>) -> ClassifierSpec {
    ClassifierSpec::Svm {
        kind,
        c_grid,
        sigma_grid,
        params: SmoParams::default(),
    }
}

fn method(variant: Variant, classifier: ClassifierSpec) -> MethodSpec {
    MethodSpec {
        extractor: PipelineConfig {
            variant,
            d: 4,
            k_final: ComponentCount::default(),
        },
        classifier,
        seed: 5,
    }
}

/// Three well-separated image classes.
fn blob_images() -> Dataset {
    let mut rng = common::rng(41);
    let (h, w) = (6, 5);
    let templates: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..h * w).map(|i| if i % 3 == k { 0.9 } else { 0.1 }).collect())
        .collect();
    let mut samples = Vec::new();
    for (k, t) in templates.iter().enumerate() {
        for i in 0..9 {
            let px: Vec<f64> = t.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            samples.push(WeightedSample {
                image: GrayImage::new(Matrix::from_vec(h, w, px).unwrap(), format!("{k}/{i}")).unwrap(),
                label: k,
                weight: 1.0,
            });
        }
    }
    Dataset::new(samples).unwrap()
}

#[test]
fn separable_images_are_classified_perfectly() {
    let data = blob_images();
    let plan = make_splits(&data.labels(), 1);
    let m = method(Variant::PcaOnly, svm(KernelKind::Linear, vec![10.0], vec![]));
    let report = cross_validate(&data, &plan, &m).unwrap();
    assert_eq!(report.mean_accuracy, 1.0);
    let cms = report.cms(3).unwrap();
    assert_eq!(cms.rates, vec![1.0, 1.0, 1.0]);
}

#[test]
fn held_out_contents_never_reach_training() {
    let data = common::synthetic_faces(5, 6, 12, 10, 42);
    let plan = make_splits(&data.labels(), 9);
    let mut rng = common::rng(43);
    let noised: Vec<WeightedSample> = data
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if plan.folds[i] == 0 {
                WeightedSample {
                    image: common::random_image(&mut rng, 12, 10, "noise"),
                    ..s.clone()
                }
            } else {
                s.clone()
            }
        })
        .collect();
    let noised = Dataset::new(noised).unwrap();
    for m in [
        method(Variant::Wpca2dThenPca, svm(KernelKind::Rbf, vec![1.0, 8.0], vec![0.5, 2.0])),
        method(Variant::PcaOnly, ClassifierSpec::Knn { k: 1 }),
        method(
            Variant::Wpca2dThenPca,
            ClassifierSpec::Mlp {
                config: MlpConfig {
                    hidden: 6,
                    ..MlpConfig::default()
                },
                epochs: 5,
            },
        ),
    ] {
        let train = plan.complement(0);
        let a = fit_method(&data.subset(&train).unwrap(), &m, data.class_count()).unwrap();
        let b = fit_method(&noised.subset(&train).unwrap(), &m, data.class_count()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn synthetic_faces_are_recognised() {
    let data = common::synthetic_faces(8, 6, 16, 13, 44);
    let plan = make_splits(&data.labels(), 2);
    for m in [
        method(
            Variant::Wpca2dThenPca,
            svm(KernelKind::Rbf, vec![1.0, 16.0], vec![0.25, 1.0, 4.0]),
        ),
        method(Variant::PcaOnly, ClassifierSpec::Knn { k: 1 }),
    ] {
        let r = cross_validate(&data, &plan, &m).unwrap();
        assert!(r.mean_accuracy >= 0.9, "{}: {}", r.method, r.mean_accuracy);
        let a = cross_validate(&data, &plan, &m).unwrap();
        assert_eq!(a, r);
    }
}

proptest! {
    #[test]
    fn splits_partition_the_indices(counts in prop::collection::vec(3usize..12, 1..8), seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat(k).take(c)).collect();
        let plan = make_splits(&labels, seed);
        let mut seen = vec![0usize; labels.len()];
        for f in 0..3 {
            for i in plan.members(f) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for (k, &c) in counts.iter().enumerate() {
            for f in 0..3 {
                let n = plan.members(f).into_iter().filter(|&i| labels[i] == k).count();
                prop_assert!(n >= c / 3 && n <= c.div_ceil(3));
            }
        }
    }
}
